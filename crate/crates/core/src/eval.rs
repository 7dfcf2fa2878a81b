//! Model-level evaluation: one-active and all-active segmental scores,
//! false positives on aggressor audio, frame-wise AUC.

use serde::Serialize;

use crate::annotate::LabeledClip;
use crate::classes::ClassSet;
use crate::error::{Error, Result};
use crate::events::{process, Event, PostProcConfig, ScoredClip};
use crate::metrics::{fp_per_hour, segmental_score, ClipResult, EvalReport};
use crate::tcn::{forward, ModelWeights};

/// Runs the model over each clip. Aggressor clips get no truth segments.
pub fn score_clips(weights: &ModelWeights, clips: &[LabeledClip]) -> Result<Vec<ScoredClip>> {
    clips
        .iter()
        .map(|c| {
            let probs = forward(weights, &c.feats)?.0;
            let segments = if c.sound_class().is_some() { c.segments.clone() } else { Vec::new() };
            Ok(ScoredClip { probs, segments })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OneActive {
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub one_active: Vec<OneActive>,
    /// Scores with every class of `classes` enabled, FP/hour on the
    /// aggressor clips when there were any.
    pub all_active: EvalReport,
}

impl Evaluation {
    /// Smallest one-active F1, missing counted as 0.
    pub fn min_one_active(&self) -> f64 {
        self.one_active.iter().map(|o| o.f1.unwrap_or(0.0)).fold(f64::INFINITY, f64::min)
    }
}

fn report(sounds: &[ScoredClip], cfg: &PostProcConfig, tolerance: usize) -> Result<EvalReport> {
    let events: Vec<Vec<Event>> = sounds.iter().map(|c| process(&c.probs, cfg)).collect::<Result<_>>()?;
    let clips: Vec<ClipResult<'_>> = sounds
        .iter()
        .zip(&events)
        .map(|(c, e)| ClipResult { events: e, segments: &c.segments })
        .collect();
    segmental_score(&clips, tolerance)
}

pub fn evaluate(
    sounds: &[ScoredClip],
    noise: &[ScoredClip],
    cfg: &PostProcConfig,
    classes: &[usize],
    tolerance: usize,
) -> Result<Evaluation> {
    if sounds.is_empty() || classes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let one_active = classes
        .iter()
        .map(|&class| Ok(OneActive { class, name: None, f1: report(sounds, &cfg.one_active(class), tolerance)?.f1(class) }))
        .collect::<Result<_>>()?;
    let all = cfg.with_active(classes);
    let mut all_active = report(sounds, &all, tolerance)?;
    let duration: f64 = noise.iter().map(ScoredClip::duration_s).sum();
    if duration > 0.0 {
        let mut events = Vec::new();
        for c in noise {
            events.extend(process(&c.probs, &all)?);
        }
        all_active = all_active.with_fp_rate(fp_per_hour(&events, duration)?);
    }
    Ok(Evaluation { one_active, all_active })
}

impl Evaluation {
    pub fn with_class_names(mut self, classes: &ClassSet) -> Self {
        self.all_active = self.all_active.with_class_names(classes);
        for o in &mut self.one_active {
            o.name = Some(classes.name(o.class).to_string());
        }
        self
    }
}

/// Frame-wise ROC AUC of `class`. Positives are frames inside its truth
/// segments; negatives are frames more than `margin` frames away from any of
/// them, on every clip. Ties count half. `None` without both kinds.
pub fn frame_auc(clips: &[ScoredClip], class: usize, margin: usize) -> Option<f64> {
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for c in clips {
        let t_max = c.probs.num_frames();
        let mut kind = vec![Some(false); t_max];
        for s in c.segments.iter().filter(|s| s.label == class) {
            for k in kind.iter_mut().take((s.end + margin + 1).min(t_max)).skip(s.start.saturating_sub(margin)) {
                *k = None;
            }
        }
        for s in c.segments.iter().filter(|s| s.label == class) {
            for k in kind.iter_mut().take((s.end + 1).min(t_max)).skip(s.start) {
                *k = Some(true);
            }
        }
        scored.extend(kind.iter().enumerate().filter_map(|(t, k)| k.map(|pos| (c.probs.row(t)[class], pos))));
    }
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U over runs of equal scores
    let mut u = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        let p = scored[i..j].iter().filter(|s| s.1).count();
        let n = (j - i) - p;
        u += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Some(u / (pos as f64 * neg as f64))
}
