use nvsd::classes::ClassSet;
use nvsd::error::Error;
use nvsd::synthbench::{generate_corpus, SynthCorpus, SynthSpec};
use nvsd::tcn::{load_weights, ModelSpec};
use nvsd::train::{AdamConfig, BatchComposer, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus() -> SynthCorpus {
    let spec = SynthSpec { train_users: 4, eval_users: 1, repetitions: 4, aggressor_s: 6.0, ..SynthSpec::default() };
    generate_corpus(&spec).unwrap()
}

fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::tiny(16, 4, 2),
        batch_frames: 200,
        sequences_per_batch: 2,
        max_piece_frames: 80,
        epochs: 2,
        steps_per_epoch: Some(4),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn aggressor_share_stays_near_half() {
    let c = small_corpus();
    let composer = BatchComposer::new(c.train.iter().collect(), c.aggressors.iter().collect(), 1000, 0.5, 250);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut agg, mut total) = (0usize, 0usize);
    for _ in 0..100 {
        for _ in 0..4 {
            let s = composer.next_sequence(&mut rng);
            assert_eq!(s.feats.rows(), 1000);
            assert_eq!(s.targets.rows(), 1000);
            agg += s.aggressor_frames;
            total += s.feats.rows();
        }
        let share = agg as f64 / total as f64;
        assert!((0.45..=0.55).contains(&share), "aggressor share {share}");
    }
}

#[test]
fn same_seed_gives_identical_weights() {
    let c = small_corpus();
    let run = |seed| Trainer::new(tiny_cfg(seed)).classes(c.classes.clone()).run(&c.train, &c.aggressors).unwrap();
    let (a, b) = (run(5), run(5));
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.report.step_losses, b.report.step_losses);
    assert_ne!(run(6).weights, a.weights);
}

#[test]
fn loss_falls_during_the_first_epoch() {
    let spec = SynthSpec { train_users: 6, eval_users: 1, aggressor_s: 6.0, ..SynthSpec::default() };
    let c = generate_corpus(&spec).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let t = Trainer::new(cfg).classes(c.classes.clone()).run(&c.train, &c.aggressors).unwrap();
    let l = &t.report.step_losses;
    assert!(l.len() >= 6, "{} steps", l.len());
    let head: f32 = l[..3].iter().sum::<f32>() / 3.0;
    let tail: f32 = l[l.len() - 3..].iter().sum::<f32>() / 3.0;
    assert!(tail < 0.5 * head, "first steps {head}, last steps {tail}");
}

#[test]
fn checkpoints_hold_weights_and_optimizer_state() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny_cfg(1)).checkpoint_dir(dir.path()).classes(c.classes.clone()).run(&c.train, &c.aggressors).unwrap();
    let w = load_weights(dir.path().join("checkpoint.nvsd")).unwrap();
    assert_eq!(w.spec, t.weights.spec);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(side["epoch"], 1);
    assert_eq!(side["history"].as_array().unwrap().len(), 2);
    assert!(side["optimizer"]["m"].is_array());
}

#[test]
fn divergence_reports_and_keeps_last_good_weights() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { adam: AdamConfig { learning_rate: 1e30, ..AdamConfig::default() }, ..tiny_cfg(2) };
    let err = Trainer::new(cfg).checkpoint_dir(dir.path()).classes(ClassSet::standard()).run(&c.train, &c.aggressors);
    match err {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|t| t.report.step_losses)),
    }
    assert!(load_weights(dir.path().join("last_good.nvsd")).is_ok());
}

#[test]
fn rejects_bad_config() {
    let c = small_corpus();
    let cfg = TrainConfig { aggressor_ratio: 1.5, ..tiny_cfg(0) };
    assert!(Trainer::new(cfg).run(&c.train, &c.aggressors).is_err());
    assert!(Trainer::new(tiny_cfg(0)).run(&[], &c.aggressors).is_err());
}
