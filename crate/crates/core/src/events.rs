//! Sparse events from frame probabilities: per-class thresholds held for a
//! number of frames, background/speech suppression and a global refractory
//! window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::annotate::Segment;
use crate::classes::{ClassSet, BACKGROUND, NUM_CLASSES, NUM_SOUNDS, SPEECH};
use crate::error::{Error, Result};
use crate::frontend::FRAME_MS;
use crate::metrics::{fp_per_hour, segmental_score, ClipResult};
use crate::tcn::FrameProbs;

/// Longest supported hold length `tau`.
pub const MAX_TAU: usize = 256;
pub const DEFAULT_REFRACTORY: usize = 50;
/// Quiet frames required by the silence-after mode.
pub const DEFAULT_SILENCE_FRAMES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcConfig {
    /// Per sound class probability threshold.
    pub theta: Vec<f32>,
    /// Per sound class number of consecutive frames above `theta`.
    pub tau: Vec<usize>,
    /// Background and speech suppression threshold.
    pub theta_bg: f32,
    /// Frames after an event (and after suppression) with no new events.
    pub refractory: usize,
    pub active: Vec<bool>,
    /// A class must drop to or below its threshold before it can fire again.
    pub rearm: bool,
    /// Hold each event until this many frames with every active class
    /// below its threshold have passed.
    pub silence_after: Option<usize>,
}

impl Default for PostProcConfig {
    fn default() -> Self {
        Self {
            theta: vec![0.5; NUM_SOUNDS],
            tau: vec![10; NUM_SOUNDS],
            theta_bg: 0.5,
            refractory: DEFAULT_REFRACTORY,
            active: vec![true; NUM_SOUNDS],
            rearm: false,
            silence_after: None,
        }
    }
}

impl PostProcConfig {
    pub fn uniform(theta: f32, tau: usize) -> Self {
        Self { theta: vec![theta; NUM_SOUNDS], tau: vec![tau; NUM_SOUNDS], ..Default::default() }
    }

    /// Same thresholds with only `class` enabled.
    pub fn one_active(&self, class: usize) -> Self {
        let mut c = self.clone();
        c.active = (0..NUM_SOUNDS).map(|i| i == class).collect();
        c
    }

    /// Only the given classes enabled.
    pub fn with_active(&self, classes: &[usize]) -> Self {
        let mut c = self.clone();
        c.active = (0..NUM_SOUNDS).map(|i| classes.contains(&i)).collect();
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != NUM_SOUNDS || self.tau.len() != NUM_SOUNDS || self.active.len() != NUM_SOUNDS {
            return Err(Error::Config(format!("theta, tau and active need {NUM_SOUNDS} entries")));
        }
        let open = |v: f32| v > 0.0 && v < 1.0;
        if let Some(c) = (0..NUM_SOUNDS).find(|&c| !open(self.theta[c])) {
            return Err(Error::Config(format!("theta[{c}] = {} not in (0, 1)", self.theta[c])));
        }
        if !open(self.theta_bg) {
            return Err(Error::Config(format!("theta_bg = {} not in (0, 1)", self.theta_bg)));
        }
        if let Some(c) = (0..NUM_SOUNDS).find(|&c| !(1..=MAX_TAU).contains(&self.tau[c])) {
            return Err(Error::Config(format!("tau[{c}] = {} not in [1, {MAX_TAU}]", self.tau[c])));
        }
        if self.silence_after == Some(0) {
            return Err(Error::Config("silence_after must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    /// Frame at which the event was emitted; time is `frame * 10 ms`.
    pub frame: usize,
}

impl Event {
    pub fn time_ms(&self) -> u64 {
        (self.frame as f64 * FRAME_MS).round() as u64
    }

    /// `{"class": name, "frame": n, "time_ms": ms}`.
    pub fn to_json_line(&self, classes: &ClassSet) -> String {
        serde_json::json!({
            "class": classes.name(self.class),
            "frame": self.frame,
            "time_ms": self.time_ms(),
        })
        .to_string()
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    event: Event,
    quiet: usize,
}

/// Streaming post-processor state.
#[derive(Debug, Clone)]
pub struct PostProcessor {
    cfg: PostProcConfig,
    frame: usize,
    history: VecDeque<[f32; NUM_CLASSES]>,
    above: [usize; NUM_SOUNDS],
    armed: [bool; NUM_SOUNDS],
    last_event: Option<usize>,
    last_suppress: Option<usize>,
    pending: Option<Pending>,
}

impl PostProcessor {
    pub fn new(cfg: PostProcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            frame: 0,
            history: VecDeque::with_capacity(MAX_TAU),
            above: [0; NUM_SOUNDS],
            armed: [true; NUM_SOUNDS],
            last_event: None,
            last_suppress: None,
            pending: None,
        })
    }

    pub fn config(&self) -> &PostProcConfig {
        &self.cfg
    }

    /// Frames consumed so far.
    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Replaces thresholds mid-stream. Hold counters are recomputed from the
    /// retained history, so the result is as if the new config had always
    /// been in place for the last [`MAX_TAU`] frames.
    pub fn set_config(&mut self, cfg: PostProcConfig) -> Result<()> {
        cfg.validate()?;
        self.cfg = cfg;
        for c in 0..NUM_SOUNDS {
            self.above[c] = self.history.iter().rev().take_while(|r| r[c] > self.cfg.theta[c]).count();
        }
        Ok(())
    }

    /// Consumes one 17-probability row.
    pub fn step(&mut self, row: &[f32]) -> Result<Option<Event>> {
        if row.len() != NUM_CLASSES {
            return Err(Error::RowLength { got: row.len(), expected: NUM_CLASSES });
        }
        let t = self.frame;
        self.frame += 1;
        let mut r = [0f32; NUM_CLASSES];
        r.copy_from_slice(row);
        if self.history.len() == MAX_TAU {
            self.history.pop_front();
        }
        self.history.push_back(r);

        let cfg = &self.cfg;
        for c in 0..NUM_SOUNDS {
            if r[c] > cfg.theta[c] {
                self.above[c] += 1;
            } else {
                self.above[c] = 0;
                self.armed[c] = true;
            }
        }
        if r[BACKGROUND] > cfg.theta_bg || r[SPEECH] > cfg.theta_bg {
            self.last_suppress = Some(t);
            self.pending = None;
        }

        if let Some(p) = &mut self.pending {
            let quiet = (0..NUM_SOUNDS).all(|c| !cfg.active[c] || r[c] < cfg.theta[c]);
            p.quiet = if quiet { p.quiet + 1 } else { 0 };
            if p.quiet >= cfg.silence_after.unwrap_or(0) {
                let e = Event { class: p.event.class, frame: t };
                self.pending = None;
                self.last_event = Some(t);
                return Ok(Some(e));
            }
            return Ok(None);
        }

        let within = |last: Option<usize>| last.is_some_and(|l| t - l < cfg.refractory);
        if within(self.last_suppress) || within(self.last_event) {
            return Ok(None);
        }
        let mut best: Option<(f64, usize)> = None;
        for c in 0..NUM_SOUNDS {
            if !cfg.active[c] || self.above[c] < cfg.tau[c] || (cfg.rearm && !self.armed[c]) {
                continue;
            }
            let tau = cfg.tau[c];
            let mean = self.history.iter().rev().take(tau).map(|r| r[c] as f64).sum::<f64>() / tau as f64;
            if best.is_none_or(|(m, _)| mean > m) {
                best = Some((mean, c));
            }
        }
        let Some((_, class)) = best else {
            return Ok(None);
        };
        self.armed[class] = false;
        let event = Event { class, frame: t };
        if cfg.silence_after.is_some() {
            self.pending = Some(Pending { event, quiet: 0 });
            return Ok(None);
        }
        self.last_event = Some(t);
        Ok(Some(event))
    }

    /// Folds [`step`](Self::step) over every row.
    pub fn process(&mut self, probs: &FrameProbs) -> Result<Vec<Event>> {
        let mut out = Vec::new();
        for t in 0..probs.num_frames() {
            if let Some(e) = self.step(probs.row(t))? {
                out.push(e);
            }
        }
        Ok(out)
    }
}

pub fn process(probs: &FrameProbs, cfg: &PostProcConfig) -> Result<Vec<Event>> {
    PostProcessor::new(cfg.clone())?.process(probs)
}

/// Model output for one clip, with truth segments (empty for aggressors).
#[derive(Debug, Clone)]
pub struct ScoredClip {
    pub probs: FrameProbs,
    pub segments: Vec<Segment>,
}

impl ScoredClip {
    pub fn duration_s(&self) -> f64 {
        self.probs.num_frames() as f64 * FRAME_MS as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub theta: Vec<f32>,
    pub tau: Vec<usize>,
    pub theta_bg: Vec<f32>,
    /// Weight of false positives per hour on aggressor clips.
    pub lambda_fp: f64,
    /// Weight of mean positive latency in seconds.
    pub lambda_latency: f64,
    pub tolerance: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            theta: vec![0.40, 0.45, 0.50, 0.55, 0.60],
            tau: (7..=15).collect(),
            theta_bg: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            lambda_fp: 0.01,
            lambda_latency: 0.1,
            tolerance: crate::metrics::DEFAULT_TOLERANCE,
        }
    }
}

/// One-active objective for `class` under `cfg`:
/// `F1 - lambda_fp * FP/hour - lambda_latency * max(mean latency, 0)`.
pub fn class_objective(
    class: usize,
    cfg: &PostProcConfig,
    eval: &[ScoredClip],
    aggressors: &[ScoredClip],
    space: &SearchSpace,
) -> Result<f64> {
    let one = cfg.one_active(class);
    let events: Vec<Vec<Event>> = eval.iter().map(|c| process(&c.probs, &one)).collect::<Result<_>>()?;
    let clips: Vec<ClipResult<'_>> = eval
        .iter()
        .zip(&events)
        .map(|(c, e)| ClipResult { events: e, segments: &c.segments })
        .collect();
    let report = segmental_score(&clips, space.tolerance)?;
    let f1 = report.per_class[class].f1.unwrap_or(0.0);

    let mut fp_penalty = 0.0;
    let duration: f64 = aggressors.iter().map(ScoredClip::duration_s).sum();
    if duration > 0.0 {
        let mut all = Vec::new();
        for c in aggressors {
            all.extend(process(&c.probs, &one)?);
        }
        fp_penalty = fp_per_hour(&all, duration)?.overall;
    }
    // only `class` is active, so every latency belongs to it
    let latency_s = report.latency.map_or(0.0, |l| (l.mean_ms / 1000.0).max(0.0));
    Ok(f1 - space.lambda_fp * fp_penalty - space.lambda_latency * latency_s)
}

/// Per-class grid search over `(theta, tau)` in one-active mode, then a
/// global `theta_bg` chosen by the mean objective over the searched classes.
/// Classes without truth segments keep the values in `base`. Ties go to the
/// smaller `tau`, then the smaller `theta`, then the smaller `theta_bg`.
pub fn optimize(
    space: &SearchSpace,
    eval: &[ScoredClip],
    aggressors: &[ScoredClip],
    base: &PostProcConfig,
) -> Result<PostProcConfig> {
    if eval.is_empty() || eval.iter().all(|c| c.segments.is_empty()) {
        return Err(Error::EmptyEvaluation);
    }
    if space.theta.is_empty() || space.tau.is_empty() || space.theta_bg.is_empty() {
        return Err(Error::Config("empty search grid".into()));
    }
    base.validate()?;
    let mut classes: Vec<usize> = eval
        .iter()
        .flat_map(|c| c.segments.iter().map(|s| s.label))
        .filter(|&l| l < NUM_SOUNDS)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut cfg = base.clone();
    for &c in &classes {
        let mut best: Option<(f64, f32, usize)> = None;
        for &tau in &space.tau {
            for &theta in &space.theta {
                let mut trial = cfg.clone();
                trial.theta[c] = theta;
                trial.tau[c] = tau;
                let score = class_objective(c, &trial, eval, aggressors, space)?;
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, theta, tau));
                }
            }
        }
        let (score, theta, tau) = best.expect("grid is not empty");
        log::debug!("class {c}: theta {theta}, tau {tau}, objective {score:.4}");
        cfg.theta[c] = theta;
        cfg.tau[c] = tau;
    }

    let mut best: Option<(f64, f32)> = None;
    for &bg in &space.theta_bg {
        let mut trial = cfg.clone();
        trial.theta_bg = bg;
        let mut total = 0.0;
        for &c in &classes {
            total += class_objective(c, &trial, eval, aggressors, space)?;
        }
        let score = total / classes.len() as f64;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, bg));
        }
    }
    cfg.theta_bg = best.expect("grid is not empty").1;
    Ok(cfg)
}
