use nvsd::annotate::Segment;
use nvsd::classes::NUM_CLASSES;
use nvsd::eval::{evaluate, frame_auc};
use nvsd::events::{PostProcConfig, ScoredClip};
use nvsd::linalg::Matrix;
use nvsd::tcn::FrameProbs;
use proptest::prelude::*;

/// All positive/negative pairs counted directly.
fn pairwise_auc(clips: &[ScoredClip], class: usize, margin: usize) -> Option<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for c in clips {
        let segs: Vec<_> = c.segments.iter().filter(|s| s.label == class).collect();
        for t in 0..c.probs.num_frames() {
            let v = c.probs.row(t)[class];
            if segs.iter().any(|s| s.start <= t && t <= s.end) {
                pos.push(v);
            } else if segs.iter().all(|s| t + margin < s.start || t > s.end + margin) {
                neg.push(v);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn clip(values: Vec<u8>, segs: Vec<(usize, usize)>) -> ScoredClip {
    let t = values.len();
    let mut m = Matrix::zeros(t, NUM_CLASSES);
    for (i, v) in values.into_iter().enumerate() {
        // coarse levels so ties are common
        m.set(i, 2, v as f32 / 8.0);
    }
    let segments = segs
        .into_iter()
        .filter(|&(s, _)| s < t)
        .map(|(s, l)| Segment::new(s, (s + l).min(t - 1), 2))
        .collect();
    ScoredClip { probs: FrameProbs(m), segments }
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        clips in proptest::collection::vec(
            (proptest::collection::vec(0u8..8, 1..120), proptest::collection::vec((0usize..120, 0usize..10), 0..3)),
            1..4),
        margin in 0usize..5,
    ) {
        let clips: Vec<ScoredClip> = clips.into_iter().map(|(v, s)| clip(v, s)).collect();
        let got = frame_auc(&clips, 2, margin);
        let want = pairwise_auc(&clips, 2, margin);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn perfect_scores_give_perfect_evaluation() {
    let mut m = Matrix::zeros(400, NUM_CLASSES);
    let segs = vec![Segment::new(50, 70, 1), Segment::new(200, 220, 1)];
    for s in &segs {
        for t in s.start..=s.end {
            m.set(t, 1, 0.9);
        }
    }
    let sounds = vec![ScoredClip { probs: FrameProbs(m), segments: segs }];
    let noise = vec![ScoredClip { probs: FrameProbs(Matrix::zeros(360_000, NUM_CLASSES)), segments: vec![] }];
    let e = evaluate(&sounds, &noise, &PostProcConfig::default(), &[0, 1], 13).unwrap();
    assert_eq!(e.one_active[1].f1, Some(1.0));
    assert_eq!(e.one_active[0].f1, None);
    assert_eq!(e.min_one_active(), 0.0);
    assert_eq!(e.all_active.f1(1), Some(1.0));
    assert_eq!(e.all_active.fp_per_hour.as_ref().unwrap().overall, 0.0);
    assert_eq!(frame_auc(&sounds, 1, 13), Some(1.0));
    assert!(evaluate(&[], &noise, &PostProcConfig::default(), &[0], 13).is_err());
}
