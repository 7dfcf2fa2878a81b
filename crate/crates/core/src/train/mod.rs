//! Training the TCN from scratch.

mod adam;
mod backward;
mod batch;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use backward::{backward, bce_loss, bce_term, bce_with_logits, Gradients};
pub use batch::{BatchComposer, Sequence};

use crate::annotate::LabeledClip;
use crate::classes::ClassSet;
use crate::error::{Error, Result};
use crate::tcn::{forward, save_weights, DropoutMasks, FeatureNorm, ModelSpec, ModelWeights, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    /// Frames per training sequence.
    pub batch_frames: usize,
    pub sequences_per_batch: usize,
    /// Share of each sequence drawn from aggressor clips.
    pub aggressor_ratio: f32,
    /// Longest crop taken from a single clip.
    pub max_piece_frames: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Steps per epoch; by default one pass over the sound frames.
    pub steps_per_epoch: Option<usize>,
    /// Fraction of speakers held out for validation.
    pub validation_fraction: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            batch_frames: 1000,
            sequences_per_batch: 4,
            aggressor_ratio: 0.5,
            max_piece_frames: 250,
            adam: AdamConfig::default(),
            epochs: 8,
            steps_per_epoch: None,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.aggressor_ratio) {
            return Err(Error::Config(format!("aggressor_ratio {} not in [0, 1]", self.aggressor_ratio)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} not in [0, 1)", self.validation_fraction)));
        }
        if self.batch_frames == 0 || self.sequences_per_batch == 0 || self.max_piece_frames == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f32>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub validation_speakers: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub weights: ModelWeights,
    pub report: TrainReport,
}

/// Sidecar written next to each checkpoint.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    epoch: usize,
    config: TrainConfig,
    history: Vec<EpochStats>,
    optimizer: Adam,
}

pub fn train(corpus: &[LabeledClip], aggressors: &[LabeledClip], cfg: &TrainConfig) -> Result<Trained> {
    Trainer::new(cfg.clone()).run(corpus, aggressors)
}

/// Training with optional on-disk checkpoints.
pub struct Trainer {
    cfg: TrainConfig,
    checkpoint_dir: Option<PathBuf>,
    classes: ClassSet,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        Self { cfg, checkpoint_dir: None, classes: ClassSet::standard() }
    }

    pub fn checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn classes(mut self, classes: ClassSet) -> Self {
        self.classes = classes;
        self
    }

    pub fn run(&self, corpus: &[LabeledClip], aggressors: &[LabeledClip]) -> Result<Trained> {
        let cfg = &self.cfg;
        cfg.validate()?;
        if corpus.iter().all(|c| c.num_frames() == 0) {
            return Err(Error::Config("training corpus is empty".into()));
        }

        let held_out = held_out_speakers(corpus, cfg.validation_fraction, cfg.seed);
        let (train_sounds, val_sounds): (Vec<&LabeledClip>, Vec<_>) =
            corpus.iter().partition(|c| !held_out.contains(&c.speaker));
        let (train_aggr, val_aggr): (Vec<&LabeledClip>, Vec<_>) =
            aggressors.iter().partition(|c| !held_out.contains(&c.speaker));
        if train_sounds.is_empty() {
            return Err(Error::Config("no training clips left after the validation split".into()));
        }

        let mut weights = ModelWeights::init(cfg.model.clone(), self.classes.clone(), cfg.seed)?;
        weights.norm = Some(FeatureNorm::fit(
            train_sounds.iter().chain(&train_aggr).map(|c| &c.feats),
        ));
        let norm = weights.norm.clone();

        let aggr_pool = if cfg.aggressor_ratio > 0.0 { train_aggr.clone() } else { Vec::new() };
        let composer = BatchComposer::new(
            train_sounds.clone(),
            aggr_pool,
            cfg.batch_frames,
            cfg.aggressor_ratio,
            cfg.max_piece_frames,
        );
        let sound_frames: usize = train_sounds.iter().map(|c| c.num_frames()).sum();
        let per_step = ((cfg.batch_frames - composer.aggressor_frames()) * cfg.sequences_per_batch).max(1);
        let steps = cfg.steps_per_epoch.unwrap_or_else(|| sound_frames.div_ceil(per_step)).max(1);
        info!(
            "training: {} sound clips, {} aggressor clips, {} held-out speakers, {} steps x {} epochs",
            train_sounds.len(),
            train_aggr.len(),
            held_out.len(),
            steps,
            cfg.epochs
        );

        let mut params: Vec<Vec<f32>> = weights.to_params();
        let mut adam = Adam::new(cfg.adam, params.iter().map(Vec::len));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
        let mut report = TrainReport { validation_speakers: held_out.iter().copied().collect(), ..Default::default() };
        let mut best: Option<(f64, ModelWeights)> = None;
        let mut last_good = weights.clone();

        for epoch in 0..cfg.epochs {
            let mut epoch_loss = 0.0f64;
            for step in 0..steps {
                let global = (epoch * steps + step) as u64;
                let mut sum: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
                let mut loss = 0.0f32;
                for s in 0..cfg.sequences_per_batch {
                    let seq = composer.next_sequence(&mut rng);
                    let mask_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (global << 8) ^ s as u64;
                    let masks = (cfg.model.dropout > 0.0)
                        .then(|| DropoutMasks::sample(&cfg.model, seq.feats.rows(), cfg.model.dropout, mask_seed));
                    let set = ParamSet { spec: &cfg.model, norm: norm.as_ref(), tensors: &params };
                    let outcome = backward(&set, &seq.feats, &seq.targets, None, masks.as_ref());
                    let (l, g) = match outcome {
                        Ok((l, g)) if l.is_finite() && g.is_finite() => (l, g),
                        Ok(_) | Err(Error::NonFinite { .. }) => {
                            return Err(self.diverged(&last_good, epoch, step));
                        }
                        Err(e) => return Err(e),
                    };
                    loss += l;
                    for (acc, gt) in sum.iter_mut().zip(&g.tensors) {
                        for (a, &v) in acc.iter_mut().zip(gt) {
                            *a += v;
                        }
                    }
                }
                let inv = 1.0 / cfg.sequences_per_batch as f32;
                for acc in &mut sum {
                    for a in acc.iter_mut() {
                        *a *= inv;
                    }
                }
                adam.apply(&mut params, &sum);
                if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                    return Err(self.diverged(&last_good, epoch, step));
                }
                let loss = loss * inv;
                report.step_losses.push(loss);
                epoch_loss += loss as f64;
            }

            weights.set_params(&params);
            let val_loss = validation_loss(&weights, &val_sounds, &val_aggr, cfg.aggressor_ratio)?;
            let stats = EpochStats { epoch, train_loss: epoch_loss / steps as f64, val_loss };
            info!("epoch {epoch}: train loss {:.5}, validation loss {:?}", stats.train_loss, val_loss);
            report.epochs.push(stats);
            last_good = weights.clone();

            // without a validation set the latest epoch is kept
            let score = val_loss.unwrap_or(-(epoch as f64));
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, weights.clone()));
                report.best_epoch = epoch;
            }
            if let Some(dir) = &self.checkpoint_dir {
                self.write_checkpoint(dir, epoch, &weights, &report, &adam)?;
            }
        }

        let weights = best.map(|(_, w)| w).unwrap_or(weights);
        Ok(Trained { weights, report })
    }

    fn diverged(&self, last_good: &ModelWeights, epoch: usize, step: usize) -> Error {
        if let Some(dir) = &self.checkpoint_dir {
            if let Err(e) = std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir, e))
                .and_then(|_| save_weights(last_good, dir.join("last_good.nvsd")))
            {
                log::error!("could not save last good weights: {e}");
            }
        }
        Error::Diverged { epoch, step }
    }

    fn write_checkpoint(&self, dir: &Path, epoch: usize, w: &ModelWeights, report: &TrainReport, adam: &Adam) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_weights(w, dir.join("checkpoint.nvsd"))?;
        let side = Checkpoint { epoch, config: self.cfg.clone(), history: report.epochs.clone(), optimizer: adam.clone() };
        let path = dir.join("checkpoint.json");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), &side)?;
        Ok(())
    }
}

/// Speakers held out for validation: a seeded `fraction` of the distinct
/// speakers, at least one when there are two or more.
pub fn held_out_speakers(corpus: &[LabeledClip], fraction: f32, seed: u64) -> BTreeSet<u32> {
    let mut speakers: Vec<u32> = corpus.iter().map(|c| c.speaker).collect::<BTreeSet<_>>().into_iter().collect();
    if fraction <= 0.0 || speakers.len() < 2 {
        return BTreeSet::new();
    }
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0011_d0u64));
    let n = ((speakers.len() as f32 * fraction).round() as usize).clamp(1, speakers.len() - 1);
    speakers.into_iter().take(n).collect()
}

/// Frame-weighted BCE over sound clips and aggressor clips, mixed with the
/// training ratio. `None` when there is nothing to validate on.
fn validation_loss(w: &ModelWeights, sounds: &[&LabeledClip], aggr: &[&LabeledClip], ratio: f32) -> Result<Option<f64>> {
    let mean = |clips: &[&LabeledClip]| -> Result<Option<f64>> {
        let mut total = 0.0;
        let mut frames = 0usize;
        for c in clips.iter().filter(|c| c.num_frames() > 0) {
            let (p, _) = forward(w, &c.feats)?;
            total += bce_loss(&p, &c.frame_labels)? * c.num_frames() as f64;
            frames += c.num_frames();
        }
        Ok((frames > 0).then(|| total / frames as f64))
    };
    let s = mean(sounds)?;
    let a = if ratio > 0.0 { mean(aggr)? } else { None };
    Ok(match (s, a) {
        (Some(s), Some(a)) => Some((1.0 - ratio as f64) * s + ratio as f64 * a),
        (s, a) => s.or(a),
    })
}
