//! Few-shot personalization: refit the head rows of enrolled classes on
//! frozen embeddings.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{render_frame_labels, LabeledClip, Segment, DEFAULT_INFLATE};
use crate::classes::NUM_SOUNDS;
use crate::error::{Error, Result};
use crate::events::{process, PostProcConfig};
use crate::frontend::FRAME_RATE_HZ;
use crate::linalg::Matrix;
use crate::metrics::{segmental_score, ClipResult, DEFAULT_TOLERANCE};
use crate::tcn::{apply_head, forward, Embeddings, ModelWeights};
use crate::train::{bce_term, Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizeConfig {
    pub steps: usize,
    pub learning_rate: f32,
    /// Stop once the loss has improved by less than `plateau_tol` for this
    /// many consecutive steps.
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    /// Seconds of aggressor frames drawn as negatives, per enrolled class.
    pub negative_seconds_per_class: f32,
    pub inflate: usize,
    pub seed: u64,
    pub user_id: Option<String>,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-2,
            plateau_patience: 10,
            plateau_tol: 1e-5,
            negative_seconds_per_class: 60.0,
            inflate: DEFAULT_INFLATE,
            seed: 0,
            user_id: None,
        }
    }
}

/// Embeddings of aggressor frames, the negative budget is drawn from here.
#[derive(Debug, Clone)]
pub struct NegativePool {
    embeddings: Matrix<f32>,
}

impl NegativePool {
    pub fn from_clips(weights: &ModelWeights, clips: &[LabeledClip]) -> Result<Self> {
        let mut embeddings = Matrix::zeros(0, weights.spec.channels);
        for c in clips {
            if c.num_frames() > 0 {
                embeddings.append_rows(forward(weights, &c.feats)?.1.matrix());
            }
        }
        Ok(Self { embeddings })
    }

    pub fn empty(channels: usize) -> Self {
        Self { embeddings: Matrix::zeros(0, channels) }
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n` distinct frames (or all of them), chosen by `seed`.
    fn draw(&self, n: usize, seed: u64) -> Matrix<f32> {
        if n >= self.len() {
            return self.embeddings.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let rows: Vec<&[f32]> = idx.iter().map(|&i| self.embeddings.row(i)).collect();
        Matrix::from_rows(self.embeddings.cols(), &rows)
    }
}

/// Enrollment clips with their embeddings, computed once and reusable for
/// different shot counts.
pub struct Enrollment<'a> {
    items: Vec<(&'a LabeledClip, Embeddings)>,
}

impl<'a> Enrollment<'a> {
    pub fn new(weights: &ModelWeights, clips: &'a [LabeledClip]) -> Result<Self> {
        let items = clips
            .iter()
            .map(|c| Ok((c, forward(weights, &c.feats)?.1)))
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }
}

pub fn fit_head(
    weights: &ModelWeights,
    enrollment: &[LabeledClip],
    classes: &[usize],
    shots: usize,
    negatives: &NegativePool,
    cfg: &PersonalizeConfig,
) -> Result<ModelWeights> {
    if shots == 0 {
        return Ok(weights.clone());
    }
    fit_head_enrolled(weights, &Enrollment::new(weights, enrollment)?, classes, shots, negatives, cfg)
}

/// Refits head rows `classes` using the first `shots` segments of each
/// enrollment clip of that class. Each clip is cut after its last used
/// segment plus the inflation margin; every kept frame is a training frame
/// with the rendered labels as targets, joined by aggressor negatives. Each
/// class is fitted on its own clips only. Other head rows and the trunk are
/// left untouched.
pub fn fit_head_enrolled(
    weights: &ModelWeights,
    enrollment: &Enrollment<'_>,
    classes: &[usize],
    shots: usize,
    negatives: &NegativePool,
    cfg: &PersonalizeConfig,
) -> Result<ModelWeights> {
    if shots == 0 || classes.is_empty() {
        return Ok(weights.clone());
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= NUM_SOUNDS) {
        return Err(Error::Config(format!("class {c} is not a sound class")));
    }
    let channels = weights.spec.channels;
    let nc = weights.spec.num_classes;
    let hw = weights.head_weight_index();
    let hb = weights.head_bias_index();
    let budget = (cfg.negative_seconds_per_class as f64 * FRAME_RATE_HZ) as usize;
    let mut out = weights.clone();
    for &class in classes {
        let mut feats = Matrix::zeros(0, channels);
        let mut targets = Vec::new();
        for (clip, emb) in &enrollment.items {
            if clip.sound_class() != Some(class) {
                continue;
            }
            let mut segs: Vec<Segment> = clip.segments.iter().copied().filter(|s| s.label == class).collect();
            segs.sort_by_key(|s| s.start);
            segs.truncate(shots);
            let Some(last) = segs.last() else {
                continue;
            };
            let cut = (last.end + cfg.inflate + 1).min(clip.num_frames());
            let labels = render_frame_labels(&segs, cut, cfg.inflate);
            feats.append_rows(&emb.matrix().slice_rows(0, cut));
            targets.extend((0..cut).map(|t| labels.get(t, class)));
        }
        if !targets.iter().any(|&y| y > 0.5) {
            return Err(Error::EnrollmentFailed(format!(
                "no usable segments for class {class} ({} enrollment clips, {} frames kept)",
                enrollment.items.iter().filter(|(c, _)| c.sound_class() == Some(class)).count(),
                feats.rows()
            )));
        }
        let neg = negatives.draw(budget, cfg.seed.wrapping_add(class as u64));
        feats.append_rows(&neg);
        targets.resize(feats.rows(), 0.0);

        let head = &weights.tensor(hw).data;
        let w0: Vec<f32> = (0..channels).map(|i| head[i * nc + class]).collect();
        let (w, b) = fit_logistic(&feats, &targets, w0, weights.tensor(hb).data[class], cfg);
        let hwd = &mut out.tensor_mut(hw).data;
        for (i, v) in w.into_iter().enumerate() {
            hwd[i * nc + class] = v;
        }
        out.tensor_mut(hb).data[class] = b;
    }
    if cfg.user_id.is_some() {
        out.user_id = cfg.user_id.clone();
    }
    Ok(out)
}

const LANES: usize = 16;

/// Dot product with a fixed lane-wise summation order.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Full-batch logistic regression with Adam, starting from `(w, b)`.
fn fit_logistic(x: &Matrix<f32>, y: &[f32], w: Vec<f32>, b: f32, cfg: &PersonalizeConfig) -> (Vec<f32>, f32) {
    let n = x.rows();
    let channels = x.cols();
    let mut params = vec![w, vec![b]];
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() }, [channels, 1]);
    let inv = 1.0 / n as f32;
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    for _ in 0..cfg.steps {
        let mut loss = 0.0f64;
        let mut gw = vec![0f32; channels];
        let mut gb = 0f32;
        for (t, &yt) in y.iter().enumerate() {
            let row = x.row(t);
            let z = dot(row, &params[0]) + params[1][0];
            loss += bce_term(z as f64, yt as f64);
            let dz = (1.0 / (1.0 + (-z).exp()) - yt) * inv;
            gb += dz;
            for (g, &v) in gw.iter_mut().zip(row) {
                *g += dz * v;
            }
        }
        let loss = loss / n as f64;
        adam.apply(&mut params, &[gw, vec![gb]]);
        if loss < best - cfg.plateau_tol {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                break;
            }
        }
    }
    let b = params[1][0];
    (params.swap_remove(0), b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationScore {
    pub class: usize,
    pub f1_before: f64,
    pub f1_after: f64,
}

/// One-active F1 of each held-out clip's class under both models, with the
/// same post-processing config.
pub fn evaluate_personalization(
    generic: &ModelWeights,
    personalized: &ModelWeights,
    heldout: &[LabeledClip],
    postproc: &PostProcConfig,
) -> Result<Vec<PersonalizationScore>> {
    if generic.classes != personalized.classes || generic.spec != personalized.spec {
        return Err(Error::Config("generic and personalized models disagree on classes or spec".into()));
    }
    let same_trunk = generic
        .tensors()
        .iter()
        .zip(personalized.tensors())
        .take(generic.head_weight_index())
        .all(|(a, b)| a == b)
        && generic.norm == personalized.norm;
    // class -> (events before, events after, truth) per clip
    type Run<'s> = (Vec<crate::events::Event>, Vec<crate::events::Event>, &'s [Segment]);
    let mut per_class: Vec<(usize, Vec<Run<'_>>)> = Vec::new();
    for clip in heldout {
        let Some(class) = clip.sound_class() else {
            continue;
        };
        let (before, emb) = forward(generic, &clip.feats)?;
        let after = if same_trunk { apply_head(personalized, &emb) } else { forward(personalized, &clip.feats)?.0 };
        let one = postproc.one_active(class);
        let entry = (process(&before, &one)?, process(&after, &one)?, clip.segments.as_slice());
        match per_class.iter_mut().find(|(c, _)| *c == class) {
            Some((_, v)) => v.push(entry),
            None => per_class.push((class, vec![entry])),
        }
    }
    let f1 = |class: usize, clips: Vec<ClipResult<'_>>| -> Result<f64> {
        Ok(segmental_score(&clips, DEFAULT_TOLERANCE)?.f1(class).unwrap_or(0.0))
    };
    per_class
        .into_iter()
        .map(|(class, runs)| {
            let before = runs.iter().map(|r| ClipResult { events: &r.0, segments: r.2 }).collect();
            let after = runs.iter().map(|r| ClipResult { events: &r.1, segments: r.2 }).collect();
            Ok(PersonalizationScore { class, f1_before: f1(class, before)?, f1_after: f1(class, after)? })
        })
        .collect()
}
