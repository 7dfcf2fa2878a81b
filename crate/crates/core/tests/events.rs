mod common;

use common::{brute_force_events, random_postproc_case};
use nvsd::annotate::Segment;
use nvsd::classes::{BACKGROUND, NUM_CLASSES, NUM_SOUNDS};
use nvsd::events::{optimize, process, PostProcConfig, PostProcessor, ScoredClip, SearchSpace};
use nvsd::linalg::Matrix;
use nvsd::metrics::{segmental_score, ClipResult};
use nvsd::tcn::FrameProbs;
use proptest::prelude::*;

#[test]
fn matches_brute_force_oracle_on_1000_cases() {
    let mut total = 0;
    for seed in 0..1000 {
        let (probs, cfg) = random_postproc_case(seed, 2000);
        let got = process(&probs, &cfg).unwrap();
        assert_eq!(got, brute_force_events(&probs, &cfg), "seed {seed}, cfg {cfg:?}");
        total += got.len();
    }
    // the generator must actually exercise emission
    assert!(total > 5000, "only {total} events over all trials");
}

#[test]
fn carried_state_equals_one_pass() {
    for seed in 0..50 {
        let (probs, cfg) = random_postproc_case(seed, 600);
        let whole = process(&probs, &cfg).unwrap();
        let cut = 137 + seed as usize * 7;
        let mut pp = PostProcessor::new(cfg.clone()).unwrap();
        let mut got = pp.process(&FrameProbs(probs.matrix().slice_rows(0, cut))).unwrap();
        got.extend(pp.process(&FrameProbs(probs.matrix().slice_rows(cut, 600))).unwrap());
        assert_eq!(got, whole);
    }
}

fn case() -> impl Strategy<Value = (FrameProbs, PostProcConfig)> {
    (any::<u64>(), 50usize..600).prop_map(|(seed, frames)| random_postproc_case(seed, frames))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn events_respect_refractory((probs, cfg) in case()) {
        let ev = process(&probs, &cfg).unwrap();
        for w in ev.windows(2) {
            prop_assert!(w[1].frame > w[0].frame);
            prop_assert!(w[1].frame - w[0].frame >= cfg.refractory);
        }
    }

    #[test]
    fn raising_theta_never_adds_events((probs, cfg) in case(), class in 0usize..NUM_SOUNDS, bump in 0.01f32..0.3) {
        // with a single active class the other classes cannot interact
        let one = cfg.one_active(class);
        let mut higher = one.clone();
        higher.theta[class] = (one.theta[class] + bump).min(0.99);
        let a = process(&probs, &one).unwrap().len();
        let b = process(&probs, &higher).unwrap().len();
        prop_assert!(b <= a, "{b} > {a}");
    }

    #[test]
    fn constant_background_suppresses_everything((probs, cfg) in case()) {
        let mut m = probs.matrix().clone();
        for t in 0..m.rows() {
            m.set(t, BACKGROUND, cfg.theta_bg + 1e-3);
        }
        let mut cfg = cfg;
        cfg.refractory = cfg.refractory.max(1);
        prop_assert!(process(&FrameProbs(m), &cfg).unwrap().is_empty());
    }
}

/// Clips where class `c` is held at `level` over each truth segment.
fn scored(levels: &[f32]) -> Vec<ScoredClip> {
    levels
        .iter()
        .enumerate()
        .map(|(c, &level)| {
            let segs: Vec<Segment> = (0..5).map(|i| Segment::new(100 + i * 150, 125 + i * 150, c)).collect();
            let mut m = Matrix::zeros(900, NUM_CLASSES);
            for s in &segs {
                for t in s.start..=s.end {
                    m.set(t, c, level);
                }
            }
            ScoredClip { probs: FrameProbs(m), segments: segs }
        })
        .collect()
}

#[test]
fn optimizer_stays_in_grid_and_beats_the_fixed_config() {
    let eval = scored(&[0.55, 0.9, 0.42]);
    let space = SearchSpace::default();
    let cfg = optimize(&space, &eval, &[], &PostProcConfig::default()).unwrap();
    let f1 = |cfg: &PostProcConfig, c: usize| {
        let one = cfg.one_active(c);
        let ev: Vec<_> = eval.iter().map(|s| process(&s.probs, &one).unwrap()).collect();
        let clips: Vec<_> = eval.iter().zip(&ev).map(|(s, e)| ClipResult { events: e, segments: &s.segments }).collect();
        segmental_score(&clips, 13).unwrap().f1(c).unwrap_or(0.0)
    };
    let fixed = PostProcConfig::uniform(0.5, 10);
    for c in 0..3 {
        assert!(space.theta.contains(&cfg.theta[c]));
        assert!(space.tau.contains(&cfg.tau[c]));
        assert!(f1(&cfg, c) >= f1(&fixed, c));
    }
    assert!(space.theta_bg.contains(&cfg.theta_bg));
    // class 2 only peaks at 0.42, which only the lowest grid threshold catches
    assert_eq!(cfg.theta[2], 0.40);
    assert_eq!(f1(&cfg, 2), 1.0);
    // untouched classes keep the base values
    assert_eq!(cfg.theta[7], 0.5);
    assert_eq!(cfg.tau[7], 10);
}

#[test]
fn optimizer_rejects_empty_evaluation() {
    assert!(optimize(&SearchSpace::default(), &[], &[], &PostProcConfig::default()).is_err());
}
