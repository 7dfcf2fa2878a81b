use nvsd::annotate::Segment;
use nvsd::classes::NUM_SOUNDS;
use nvsd::events::Event;
use nvsd::metrics::{fp_per_hour, segmental_score, success, ClipResult};
use proptest::prelude::*;

/// Disjoint segments on a 3000-frame clip plus sorted random events.
fn clip() -> impl Strategy<Value = (Vec<Segment>, Vec<Event>)> {
    let segs = proptest::collection::vec((0usize..40, 3usize..40, 0usize..4), 0..8).prop_map(|v| {
        let mut pos = 0;
        v.into_iter()
            .map(|(gap, len, class)| {
                let s = Segment::new(pos + gap, pos + gap + len - 1, class);
                pos = s.end + 1;
                s
            })
            .collect::<Vec<_>>()
    });
    let events = proptest::collection::vec((0usize..600, 0usize..4), 0..12).prop_map(|v| {
        let mut e: Vec<Event> = v.into_iter().map(|(frame, class)| Event { class, frame }).collect();
        e.sort_by_key(|e| e.frame);
        e
    });
    (segs, events)
}

fn results(clips: &[(Vec<Segment>, Vec<Event>)]) -> Vec<ClipResult<'_>> {
    clips.iter().map(|(s, e)| ClipResult { events: e, segments: s }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn counts_partition_segments_and_events(clips in proptest::collection::vec(clip(), 1..5), tol in 0usize..30) {
        let r = segmental_score(&results(&clips), tol).unwrap();
        for c in 0..NUM_SOUNDS {
            let segs = clips.iter().flat_map(|(s, _)| s).filter(|s| s.label == c).count();
            let events = clips.iter().flat_map(|(_, e)| e).filter(|e| e.class == c).count();
            let s = &r.per_class[c];
            prop_assert_eq!(s.tp + s.fn_, segs);
            prop_assert_eq!(s.tp + s.fp, events);
            prop_assert_eq!(r.confusion[c].iter().sum::<usize>(), segs);
            for v in [s.precision, s.recall, s.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(s.precision.is_none(), events == 0);
            prop_assert_eq!(s.recall.is_none(), segs == 0);
        }
        prop_assert_eq!(r.latencies_ms.len(), r.overall.tp);
    }

    #[test]
    fn clip_order_does_not_matter(clips in proptest::collection::vec(clip(), 1..5)) {
        let mut rev = clips.clone();
        rev.reverse();
        let a = segmental_score(&results(&clips), 13).unwrap();
        let b = segmental_score(&results(&rev), 13).unwrap();
        prop_assert_eq!(&a.per_class, &b.per_class);
        prop_assert_eq!(&a.confusion, &b.confusion);
        prop_assert_eq!(a.macro_f1, b.macro_f1);
    }

    #[test]
    fn unbounded_tolerance_gives_full_recall(segs in proptest::collection::vec(3usize..30, 1..6)) {
        // one clip per segment, each with one event of the right class far away
        let clips: Vec<(Vec<Segment>, Vec<Event>)> = segs
            .iter()
            .enumerate()
            .map(|(i, &len)| (vec![Segment::new(500, 500 + len, i % 3)], vec![Event { class: i % 3, frame: 5 }]))
            .collect();
        let r = segmental_score(&results(&clips), usize::MAX).unwrap();
        prop_assert_eq!(r.overall.recall, Some(1.0));
    }

    #[test]
    fn per_class_rates_sum_to_overall(events in proptest::collection::vec((0usize..1000, 0usize..NUM_SOUNDS), 0..50), secs in 1.0f64..10000.0) {
        let ev: Vec<Event> = events.into_iter().map(|(frame, class)| Event { class, frame }).collect();
        let r = fp_per_hour(&ev, secs).unwrap();
        let sum: f64 = r.per_class.iter().sum();
        prop_assert!((sum - r.overall).abs() <= 1e-9 * r.overall.max(1.0));
    }
}

#[test]
fn fp_rate_examples() {
    let ev = vec![Event { class: 0, frame: 1 }, Event { class: 1, frame: 9 }];
    assert_eq!(fp_per_hour(&ev, 1800.0).unwrap().overall, 4.0);
    assert_eq!(fp_per_hour(&[], 10.0).unwrap().overall, 0.0);
    assert!(fp_per_hour(&ev, 0.0).is_err());
}

#[test]
fn success_threshold() {
    assert!(success(Some(0.5)));
    assert!(!success(Some(0.49)));
    assert!(!success(None));
}
