//! Reference implementations and check harnesses shared by the integration
//! tests and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use nvsd::audio::AudioClip;
use nvsd::classes::{ClassSet, BACKGROUND, NUM_CLASSES, NUM_SOUNDS, SPEECH};
use nvsd::events::{Event, PostProcConfig};
use nvsd::frontend::{FeatureMatrix, NUM_BINS};
use nvsd::linalg::Matrix;
use nvsd::pipeline::{detect_clip, Detector};
use nvsd::tcn::{forward, forward_trace, FeatureNorm, FrameProbs, ModelSpec, ModelWeights, ParamSet};
use nvsd::train::backward;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_feats(frames: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let data = (0..frames * NUM_BINS).map(|_| r.random_range(-12.0f32..2.0)).collect();
    FeatureMatrix::new(Matrix::from_vec(frames, NUM_BINS, data)).unwrap()
}

/// Straightforward grouped causal convolution: `out[t][o] = b[o] + sum over
/// taps d and the group's input channels of w[d][i][o] * x[t + d][g*cin_g + i]`,
/// with `x` already left-padded by `k - 1` rows.
pub fn naive_grouped_conv(
    k: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    w: &[f64],
    b: &[f64],
    x: &[f64],
    t: usize,
) -> Vec<f64> {
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = vec![0.0; t * cout];
    for f in 0..t {
        for o in 0..cout {
            let g = o / cout_g;
            let mut acc = b[o];
            for d in 0..k {
                for i in 0..cin_g {
                    acc += w[(d * cin_g + i) * cout + o] * x[(f + d) * cin + g * cin_g + i];
                }
            }
            out[f * cout + o] = acc;
        }
    }
    out
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to rounding do not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences in `f64` against the analytic gradient, over
/// every parameter and every input feature of a tiny random model.
/// Perturbations that flip any LeakyReLU sign are skipped.
pub fn gradient_check(seed: u64) -> GradCheck {
    let spec = ModelSpec { dropout: 0.0, ..ModelSpec::tiny(8, 2, 2) };
    let classes = ClassSet::standard();
    let mut w = ModelWeights::random(spec.clone(), classes, seed, 0.5).unwrap();
    let frames = 30;
    let feats = random_feats(frames, seed ^ 0x5eed);
    w.norm = Some(FeatureNorm::fit([&feats]));
    let x: Matrix<f64> = feats.matrix().cast();
    let mut r = rng(seed ^ 0x7a46);
    let targets = Matrix::from_vec(
        frames,
        NUM_CLASSES,
        (0..frames * NUM_CLASSES).map(|_| if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
    );
    let params: Vec<Vec<f64>> = w.to_params();
    let norm = w.norm.clone();
    let eval = |p: &[Vec<f64>], x: &Matrix<f64>| -> (f64, Vec<bool>) {
        let ps = ParamSet { spec: &spec, norm: norm.as_ref(), tensors: p };
        let tr = forward_trace(&ps, x, None).unwrap();
        let logits = Matrix::from_vec(frames, NUM_CLASSES, tr.logits.clone());
        let loss = nvsd::train::bce_with_logits(&logits, &targets, None).unwrap();
        (loss, tr.activation_signs())
    };
    let ps = ParamSet { spec: &spec, norm: norm.as_ref(), tensors: &params };
    let (_, grads) = backward(&ps, &x, &targets, None, None).unwrap();
    let (_, base_signs) = eval(&params, &x);

    // five-point stencil: truncation error O(h^4), rounding error ~eps/h
    let h = 1e-4;
    let stencil = |f: &mut dyn FnMut(f64) -> (f64, Vec<bool>)| -> Option<f64> {
        let mut l = [0.0; 4];
        for (i, d) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            let (loss, signs) = f(d * h);
            if signs != base_signs {
                return None;
            }
            l[i] = loss;
        }
        Some((-l[0] + 8.0 * l[1] - 8.0 * l[2] + l[3]) / (12.0 * h))
    };
    let mut out = GradCheck { max_rel_err: 0.0, checked: 0, skipped_kinks: 0 };
    let mut p = params.clone();
    for ti in 0..params.len() {
        for j in 0..params[ti].len() {
            let v = params[ti][j];
            let num = stencil(&mut |d| {
                p[ti][j] = v + d;
                let r = eval(&p, &x);
                p[ti][j] = v;
                r
            });
            match num {
                Some(num) => {
                    out.max_rel_err = out.max_rel_err.max(rel_err(grads.tensors[ti][j], num));
                    out.checked += 1;
                }
                None => out.skipped_kinks += 1,
            }
        }
    }
    let mut xp = x.clone();
    for i in 0..x.as_slice().len() {
        let v = x.as_slice()[i];
        let num = stencil(&mut |d| {
            xp.as_mut_slice()[i] = v + d;
            let r = eval(&params, &xp);
            xp.as_mut_slice()[i] = v;
            r
        });
        match num {
            Some(num) => {
                out.max_rel_err = out.max_rel_err.max(rel_err(grads.input.as_slice()[i], num));
                out.checked += 1;
            }
            None => out.skipped_kinks += 1,
        }
    }
    out
}

/// For every checked output row `t`, randomizing all frames before `t - 24`
/// must leave row `t` bit-identical, while changing frame `t - 24` alone
/// must change it. Returns the number of rows checked, or a description of
/// the first violation.
pub fn receptive_field_check(weights: &ModelWeights, frames: usize, seed: u64) -> Result<usize, String> {
    let rf = weights.spec.receptive_field();
    let feats = random_feats(frames, seed);
    let (base, base_emb) = forward(weights, &feats).unwrap();
    let emb_row = |e: &nvsd::tcn::Embeddings, t: usize| e.matrix().row(t).to_vec();
    let mut r = rng(seed ^ 1);
    let mut checked = 0;
    for t in (rf..frames).step_by(7) {
        let mut m = feats.matrix().clone();
        for f in 0..=t - rf {
            for v in m.row_mut(f) {
                *v = r.random_range(-12.0f32..2.0);
            }
        }
        let (p, e) = forward(weights, &FeatureMatrix::new(m).unwrap()).unwrap();
        let same = p.row(t).iter().zip(base.row(t)).all(|(a, b)| a.to_bits() == b.to_bits())
            && emb_row(&e, t).iter().zip(emb_row(&base_emb, t)).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("row {t} changed when frames before {} were perturbed", t + 1 - rf));
        }
        let mut m = feats.matrix().clone();
        for v in m.row_mut(t + 1 - rf) {
            *v += 3.0;
        }
        // probabilities may saturate, so look at the embedding row
        let (_, e) = forward(weights, &FeatureMatrix::new(m).unwrap()).unwrap();
        if emb_row(&e, t) == emb_row(&base_emb, t) {
            return Err(format!("row {t} ignores frame {}", t + 1 - rf));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Thresholds at each class's median probability on `probs`, so that a
/// random model still produces events.
pub fn median_config(probs: &FrameProbs, tau: usize) -> PostProcConfig {
    let median = |c: usize| {
        let mut v: Vec<f32> = (0..probs.num_frames()).map(|t| probs.row(t)[c]).collect();
        v.sort_by(f32::total_cmp);
        v[v.len() / 2].clamp(0.01, 0.99)
    };
    let mut cfg = PostProcConfig::uniform(0.5, tau);
    for c in 0..NUM_SOUNDS {
        cfg.theta[c] = median(c);
    }
    cfg.theta_bg = median(BACKGROUND).max(median(SPEECH)).max(0.5).min(0.99);
    cfg.refractory = 10;
    cfg
}

/// Random cut points splitting `n` samples into chunks of 0 to `max` samples.
pub fn random_chunks(n: usize, max: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut pos = 0;
    while pos < n {
        let len = r.random_range(0..=max).min(n - pos);
        cuts.push(len);
        pos += len;
    }
    cuts
}

/// Runs the clip through a [`Detector`] in `chunkings` random chunkings and
/// compares probabilities and events bit-for-bit with whole-clip detection.
pub fn streaming_check(
    weights: Arc<ModelWeights>,
    clip: &AudioClip,
    cfg: &PostProcConfig,
    chunkings: usize,
    seed: u64,
) -> Result<usize, String> {
    let (probs, events) = detect_clip(&weights, clip, cfg).unwrap();
    let mut r = rng(seed);
    for trial in 0..chunkings {
        let max = [1, 37, 160, 401, 4000][trial % 5];
        let mut det = Detector::new(weights.clone(), cfg.clone()).unwrap();
        let mut got_probs = Matrix::zeros(0, NUM_CLASSES);
        let mut got_events = Vec::new();
        let mut pos = 0;
        for len in random_chunks(clip.len(), max, &mut r) {
            let d = det.push(&clip.samples()[pos..pos + len]).unwrap();
            if d.first_frame != got_probs.rows() {
                return Err(format!("trial {trial}: first_frame {} after {} rows", d.first_frame, got_probs.rows()));
            }
            got_probs.append_rows(d.probs.matrix());
            got_events.extend(d.events);
            pos += len;
        }
        let same = got_probs.rows() == probs.num_frames()
            && got_probs.as_slice().iter().zip(probs.matrix().as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("trial {trial}: probabilities differ from batch"));
        }
        if got_events != events {
            return Err(format!("trial {trial}: events {got_events:?} != batch {events:?}"));
        }
    }
    Ok(events.len())
}

/// Direct reading of the emission rule, recomputed from scratch at every
/// frame against the raw matrix and the events emitted so far. Covers the
/// re-arm option; the buffered silence mode is not modeled.
pub fn brute_force_events(probs: &FrameProbs, cfg: &PostProcConfig) -> Vec<Event> {
    assert!(cfg.silence_after.is_none());
    let p = |t: usize, c: usize| probs.row(t)[c];
    let r = cfg.refractory;
    let mut events: Vec<Event> = Vec::new();
    for t in 0..probs.num_frames() {
        // background or speech above threshold anywhere in the last R rows
        let lo = (t + 1).saturating_sub(r);
        let suppressed = (lo..=t).any(|s| r > 0 && (p(s, BACKGROUND) > cfg.theta_bg || p(s, SPEECH) > cfg.theta_bg));
        let refractory = events.iter().any(|e| t - e.frame < r);
        if suppressed || refractory {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for c in 0..NUM_SOUNDS {
            let tau = cfg.tau[c];
            if !cfg.active[c] || t + 1 < tau {
                continue;
            }
            let window = t + 1 - tau..=t;
            if !window.clone().all(|s| p(s, c) > cfg.theta[c]) {
                continue;
            }
            if cfg.rearm {
                if let Some(last) = events.iter().rev().find(|e| e.class == c) {
                    if !(last.frame + 1..=t).any(|s| p(s, c) <= cfg.theta[c]) {
                        continue;
                    }
                }
            }
            let mean = window.map(|s| p(s, c) as f64).sum::<f64>() / tau as f64;
            match best {
                Some((m, _)) if mean <= m => {}
                _ => best = Some((mean, c)),
            }
        }
        if let Some((_, class)) = best {
            events.push(Event { class, frame: t });
        }
    }
    events
}

/// Random blocky probability matrix and a random configuration. Half the
/// trials use values on a 1/16 grid so that exact ties occur.
pub fn random_postproc_case(seed: u64, frames: usize) -> (FrameProbs, PostProcConfig) {
    let mut r = rng(seed);
    let quantized = seed % 2 == 0;
    let draw = |r: &mut ChaCha8Rng, hi: bool| -> f32 {
        let v: f32 = if hi { r.random_range(0.3..1.0) } else { r.random_range(0.0..0.6) };
        if quantized {
            (v * 16.0).round() / 16.0
        } else {
            v
        }
    };
    let mut m = Matrix::zeros(frames, NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let aggressor = c >= NUM_SOUNDS;
        let mut t = 0;
        while t < frames {
            let len = r.random_range(1..40usize);
            let hi = r.random::<f32>() < if aggressor { 0.08 } else { 0.35 };
            for f in t..(t + len).min(frames) {
                let v = draw(&mut r, hi);
                m.set(f, c, v);
            }
            t += len;
        }
    }
    let mut cfg = PostProcConfig::uniform(0.5, 10);
    for c in 0..NUM_SOUNDS {
        cfg.theta[c] = if quantized { (r.random_range(5..12) as f32) / 16.0 } else { r.random_range(0.3..0.7) };
        cfg.tau[c] = r.random_range(1..=20);
        cfg.active[c] = r.random::<f32>() < 0.8;
    }
    cfg.theta_bg = r.random_range(0.3..0.9);
    cfg.refractory = r.random_range(0..=80);
    cfg.rearm = r.random::<f32>() < 0.3;
    (FrameProbs(m), cfg)
}
