//! Frame-wise binary cross entropy and exact gradients through the TCN.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::tcn::{forward_trace, index, DropoutMasks, FrameProbs, Params, ResidualSpan};

/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`, the BCE of `sigmoid(z)` against `y`.
#[inline]
pub fn bce_term<S: Real>(z: S, y: S) -> S {
    z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<S: Real>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Mean BCE over frames (optionally only those with `mask[t]`) and classes,
/// from logits.
pub fn bce_with_logits<S: Real>(logits: &Matrix<S>, targets: &Matrix<S>, mask: Option<&[bool]>) -> Result<S> {
    check_targets(logits.rows(), logits.cols(), targets)?;
    let mut sum = S::zero();
    let mut count = 0usize;
    for t in 0..logits.rows() {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        for (&z, &y) in logits.row(t).iter().zip(targets.row(t)) {
            sum += bce_term(z, y);
        }
        count += logits.cols();
    }
    Ok(if count == 0 { S::zero() } else { sum / S::of(count as f64) })
}

/// Mean BCE of probabilities against targets. Probabilities are mapped back
/// to logits so the stable form is used.
pub fn bce_loss(probs: &FrameProbs, targets: &Matrix<f32>) -> Result<f64> {
    let logits = probs.matrix().map(|p| {
        let p = p as f64;
        (p / (1.0 - p)).ln()
    });
    bce_with_logits(&logits, &targets.cast(), None)
}

fn check_targets<S: Real>(rows: usize, cols: usize, targets: &Matrix<S>) -> Result<()> {
    if targets.rows() != rows || targets.cols() != cols {
        return Err(Error::Shape {
            tensor: "targets".into(),
            expected: vec![rows, cols],
            got: vec![targets.rows(), targets.cols()],
        });
    }
    Ok(())
}

/// Gradients mirroring the weight tensors, plus the gradient with respect to
/// the raw input features.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub tensors: Vec<Vec<S>>,
    pub input: Matrix<S>,
}

impl<S: Real> Gradients<S> {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[inline]
fn leaky_grad<S: Real>(dz: &mut [S], z: &[S], mask: Option<&[S]>, slope: S) {
    for (i, (g, &zi)) in dz.iter_mut().zip(z).enumerate() {
        let d = if zi > S::zero() { S::one() } else { slope };
        *g = *g * d * mask.map_or(S::one(), |m| m[i]);
    }
}

/// Loss and exact gradients for one sequence. `mask` restricts the loss to
/// selected frames; `dropout` fixes the masks shared with the forward pass.
pub fn backward<S: Real>(
    p: &impl Params<S>,
    feats: &Matrix<S>,
    targets: &Matrix<S>,
    mask: Option<&[bool]>,
    dropout: Option<&DropoutMasks<S>>,
) -> Result<(S, Gradients<S>)> {
    let spec = p.spec().clone();
    let trace = forward_trace(p, feats, dropout)?;
    if let Some(layer) = trace.first_non_finite() {
        return Err(Error::NonFinite { layer });
    }
    let t = trace.frames;
    let c = spec.num_classes;
    let n = spec.channels;
    let nb = spec.bottleneck();
    let pad = spec.kernel - 1;
    let slope = S::of(spec.leaky_slope as f64);
    check_targets(t, c, targets)?;
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::Shape { tensor: "loss mask".into(), expected: vec![t], got: vec![m.len()] });
        }
    }

    let included = mask.map_or(t, |m| m.iter().filter(|&&b| b).count());
    let denom = S::of((included * c).max(1) as f64);
    let mut loss = S::zero();
    let mut dz = vec![S::zero(); t * c];
    for f in 0..t {
        if mask.is_some_and(|m| !m[f]) {
            continue;
        }
        for k in 0..c {
            let z = trace.logits[f * c + k];
            let y = targets.get(f, k);
            loss += bce_term(z, y);
            dz[f * c + k] = (sigmoid(z) - y) / denom;
        }
    }
    let loss = loss / denom;
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: "loss".into() });
    }

    let mut g: Vec<Vec<S>> = spec
        .tensor_layout()
        .iter()
        .map(|(_, s)| vec![S::zero(); s.iter().product()])
        .collect();
    let mut split = |a: usize, b: usize| -> (Vec<S>, Vec<S>) { (std::mem::take(&mut g[a]), std::mem::take(&mut g[b])) };
    let mut done: Vec<(usize, Vec<S>)> = Vec::new();

    // head
    let (hw, hb) = (index::head_w(spec.num_blocks), index::head_b(spec.num_blocks));
    let head = spec.head();
    let (mut gw, mut gb) = split(hw, hb);
    head.backward_params(&trace.embeddings, &dz, t, &mut gw, &mut gb);
    done.push((hw, gw));
    done.push((hb, gb));
    let mut dh = vec![S::zero(); t * n];
    head.backward_input(p.tensor_data(hw), &dz, t, &mut dh);

    let (gconv, reduce, expand) = (spec.gconv(), spec.reduce(), spec.expand());
    for b in (0..spec.num_blocks).rev() {
        let bt = &trace.blocks[b];
        let masks = dropout.map(|d| &d.blocks[b]);

        let dz3 = &dh;
        let (mut gw, mut gb) = split(index::expand_w(b), index::expand_b(b));
        expand.backward_params(&bt.a2, dz3, t, &mut gw, &mut gb);
        done.push((index::expand_w(b), gw));
        done.push((index::expand_b(b), gb));
        let mut dz2 = vec![S::zero(); t * nb];
        expand.backward_input(p.tensor_data(index::expand_w(b)), dz3, t, &mut dz2);
        leaky_grad(&mut dz2, &bt.z2, masks.map(|m| m[1].as_slice()), slope);

        let (mut gw, mut gb) = split(index::reduce_w(b), index::reduce_b(b));
        reduce.backward_params(&bt.a1, &dz2, t, &mut gw, &mut gb);
        done.push((index::reduce_w(b), gw));
        done.push((index::reduce_b(b), gb));
        let mut dz1 = vec![S::zero(); t * n];
        reduce.backward_input(p.tensor_data(index::reduce_w(b)), &dz2, t, &mut dz1);
        if spec.residual == ResidualSpan::Bottleneck {
            for (a, &d) in dz1.iter_mut().zip(&dh) {
                *a += d;
            }
        }
        leaky_grad(&mut dz1, &bt.z1, masks.map(|m| m[0].as_slice()), slope);

        let (mut gw, mut gb) = split(index::gconv_w(b), index::gconv_b(b));
        gconv.backward_params(&bt.input, &dz1, t, &mut gw, &mut gb);
        done.push((index::gconv_w(b), gw));
        done.push((index::gconv_b(b), gb));
        let mut dinput = vec![S::zero(); (pad + t) * n];
        gconv.backward_input(p.tensor_data(index::gconv_w(b)), &dz1, t, &mut dinput);
        let dx = &dinput[pad * n..];
        match spec.residual {
            ResidualSpan::Block => {
                for (a, &d) in dh.iter_mut().zip(dx) {
                    *a += d;
                }
            }
            ResidualSpan::Bottleneck => dh.copy_from_slice(dx),
        }
    }

    // stem
    leaky_grad(&mut dh, &trace.stem_z, dropout.map(|d| d.stem.as_slice()), slope);
    let stem = spec.stem();
    let (mut gw, mut gb) = split(index::STEM_W, index::STEM_B);
    stem.backward_params(&trace.input, &dh, t, &mut gw, &mut gb);
    done.push((index::STEM_W, gw));
    done.push((index::STEM_B, gb));
    let bins = spec.input_bins;
    let mut dx = vec![S::zero(); (pad + t) * bins];
    stem.backward_input(p.tensor_data(index::STEM_W), &dh, t, &mut dx);
    let mut input = Matrix::from_vec(t, bins, dx.split_off(pad * bins));
    if let Some(norm) = p.norm() {
        for f in 0..t {
            for (v, &s) in input.row_mut(f).iter_mut().zip(&norm.scale) {
                *v = *v * S::of(s as f64);
            }
        }
    }

    for (i, v) in done {
        g[i] = v;
    }
    Ok((loss, Gradients { tensors: g, input }))
}
