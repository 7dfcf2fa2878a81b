//! Causal temporal convolutional network.
//!
//! Layer stack: a k=5 stem convolution to N channels, then `num_blocks`
//! residual blocks of grouped k=5 convolution, LeakyReLU, a k=1 bottleneck
//! down to N/4, LeakyReLU, and a k=1 expansion back to N. A k=1 head maps the
//! N-dim embedding of each frame to class logits. Every convolution is left
//! padded, so output frame `t` depends on input frames `t-24..=t` only.

mod io;
mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{ClassSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, NUM_BINS};
use crate::linalg::{gemm, transpose_into, Lhs, Matrix, Out, Real, Rhs};

pub use io::{load_weights, read_weights, save_weights, write_weights, FORMAT_VERSION, MAGIC};
pub use stream::StreamSession;

/// Which activations the identity shortcut of a block spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpan {
    /// `out = x + expand(act(reduce(act(gconv(x)))))`
    Block,
    /// `y = act(gconv(x)); out = y + expand(act(reduce(y)))`
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_bins: usize,
    pub kernel: usize,
    pub channels: usize,
    pub groups: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub leaky_slope: f32,
    pub dropout: f32,
    pub residual: ResidualSpan,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_bins: NUM_BINS,
            kernel: 5,
            channels: 256,
            groups: 4,
            num_blocks: 5,
            num_classes: NUM_CLASSES,
            leaky_slope: 0.01,
            dropout: 0.1,
            residual: ResidualSpan::Block,
        }
    }
}

impl ModelSpec {
    /// Small configuration for oracle and gradient tests.
    pub fn tiny(channels: usize, groups: usize, num_blocks: usize) -> Self {
        Self {
            channels,
            groups,
            num_blocks,
            ..Self::default()
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.channels / 4
    }

    /// Frames of input visible to one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * (1 + self.num_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel == 0 || self.channels == 0 || self.groups == 0 {
            return bad("kernel, channels and groups must be positive".into());
        }
        if self.channels % self.groups != 0 || self.channels % 4 != 0 {
            return bad(format!(
                "channels {} must be divisible by groups {} and by 4",
                self.channels, self.groups
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub(crate) fn stem(&self) -> ConvDef {
        ConvDef { k: self.kernel, cin: self.input_bins, cout: self.channels, groups: 1 }
    }

    pub(crate) fn gconv(&self) -> ConvDef {
        ConvDef { k: self.kernel, cin: self.channels, cout: self.channels, groups: self.groups }
    }

    pub(crate) fn reduce(&self) -> ConvDef {
        ConvDef { k: 1, cin: self.channels, cout: self.bottleneck(), groups: 1 }
    }

    pub(crate) fn expand(&self) -> ConvDef {
        ConvDef { k: 1, cin: self.bottleneck(), cout: self.channels, groups: 1 }
    }

    pub(crate) fn head(&self) -> ConvDef {
        ConvDef { k: 1, cin: self.channels, cout: self.num_classes, groups: 1 }
    }

    /// `(name, shape)` of every tensor, in file order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, def: ConvDef| {
            out.push((format!("{name}.weight"), def.weight_shape()));
            out.push((format!("{name}.bias"), vec![def.cout]));
        };
        push("stem".into(), self.stem());
        for b in 0..self.num_blocks {
            push(format!("blocks.{b}.gconv"), self.gconv());
            push(format!("blocks.{b}.reduce"), self.reduce());
            push(format!("blocks.{b}.expand"), self.expand());
        }
        push("head".into(), self.head());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensor_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Tensor indices in [`ModelSpec::tensor_layout`] order.
pub mod index {
    pub const STEM_W: usize = 0;
    pub const STEM_B: usize = 1;
    pub fn gconv_w(b: usize) -> usize {
        2 + 6 * b
    }
    pub fn gconv_b(b: usize) -> usize {
        3 + 6 * b
    }
    pub fn reduce_w(b: usize) -> usize {
        4 + 6 * b
    }
    pub fn reduce_b(b: usize) -> usize {
        5 + 6 * b
    }
    pub fn expand_w(b: usize) -> usize {
        6 + 6 * b
    }
    pub fn expand_b(b: usize) -> usize {
        7 + 6 * b
    }
    pub fn head_w(num_blocks: usize) -> usize {
        2 + 6 * num_blocks
    }
    pub fn head_b(num_blocks: usize) -> usize {
        3 + 6 * num_blocks
    }
}

/// One convolution. Kernel layout is `[k, cin / groups, cout]`; output
/// channel `o` reads input group `o / (cout / groups)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDef {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
}

impl ConvDef {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.k, self.cin_g(), self.cout]
    }

    /// `input` holds `k - 1 + t` rows of `cin` channels (left context first);
    /// `out` receives `t` rows of `cout`. Each output starts at the bias and
    /// accumulates taps in order, input channels in order within a tap.
    pub fn forward<S: Real>(&self, w: &[S], b: &[S], input: &[S], t: usize, out: &mut [S]) {
        debug_assert_eq!(input.len(), (self.k - 1 + t) * self.cin);
        debug_assert_eq!(out.len(), t * self.cout);
        for row in out.chunks_exact_mut(self.cout) {
            row.copy_from_slice(b);
        }
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        for g in 0..self.groups {
            for d in 0..self.k {
                gemm(
                    t,
                    cout_g,
                    cin_g,
                    Lhs { data: input, offset: d * self.cin + g * cin_g, row_stride: self.cin, col_stride: 1 },
                    Rhs { data: w, offset: d * cin_g * self.cout + g * cout_g, row_stride: self.cout },
                    Out { data: out, offset: g * cout_g, row_stride: self.cout },
                );
            }
        }
    }

    /// Accumulates kernel and bias gradients from `dout` (`t × cout`) given
    /// the padded `input` of the forward call.
    pub fn backward_params<S: Real>(&self, input: &[S], dout: &[S], t: usize, dw: &mut [S], db: &mut [S]) {
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        for g in 0..self.groups {
            for d in 0..self.k {
                gemm(
                    cin_g,
                    cout_g,
                    t,
                    Lhs { data: input, offset: d * self.cin + g * cin_g, row_stride: 1, col_stride: self.cin },
                    Rhs { data: dout, offset: g * cout_g, row_stride: self.cout },
                    Out { data: dw, offset: d * cin_g * self.cout + g * cout_g, row_stride: self.cout },
                );
            }
        }
        for row in dout.chunks_exact(self.cout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }

    /// Accumulates the gradient w.r.t. the padded input into `dinput`
    /// (`(k - 1 + t) × cin`).
    pub fn backward_input<S: Real>(&self, w: &[S], dout: &[S], t: usize, dinput: &mut [S]) {
        let (cin_g, cout_g) = (self.cin_g(), self.cout_g());
        let mut wt = vec![S::zero(); cout_g * cin_g];
        let mut block = vec![S::zero(); cin_g * cout_g];
        for g in 0..self.groups {
            for d in 0..self.k {
                for ci in 0..cin_g {
                    let src = (d * cin_g + ci) * self.cout + g * cout_g;
                    block[ci * cout_g..(ci + 1) * cout_g].copy_from_slice(&w[src..src + cout_g]);
                }
                transpose_into(&block, cin_g, cout_g, &mut wt);
                gemm(
                    t,
                    cin_g,
                    cout_g,
                    Lhs { data: dout, offset: g * cout_g, row_stride: self.cout, col_stride: 1 },
                    Rhs { data: &wt, offset: 0, row_stride: cin_g },
                    Out { data: dinput, offset: d * self.cin + g * cin_g, row_stride: self.cin },
                );
            }
        }
    }
}

/// Fixed per-bin affine input normalization, `(x - mean) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl FeatureNorm {
    /// Per-bin mean and inverse standard deviation over all rows.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0f64; NUM_BINS];
        let mut sq = vec![0f64; NUM_BINS];
        for f in features {
            for row in f.matrix().iter_rows() {
                n += 1;
                for (i, &v) in row.iter().enumerate() {
                    sum[i] += v as f64;
                    sq[i] += (v as f64) * (v as f64);
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let scale = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let var = (q / n - (s / n) * (s / n)).max(0.0);
                (1.0 / var.sqrt().max(1e-3)) as f32
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply_row<S: Real>(&self, row: &[f32], out: &mut [S]) {
        for i in 0..row.len() {
            out[i] = S::of(((row[i] - self.mean[i]) * self.scale[i]) as f64);
        }
    }
}

/// Versioned weight bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub classes: ClassSet,
    pub norm: Option<FeatureNorm>,
    pub user_id: Option<String>,
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ModelWeights {
    pub fn zeros(spec: ModelSpec, classes: ClassSet) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| Tensor {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self {
            spec,
            classes,
            norm: None,
            user_id: None,
            tensors,
        })
    }

    /// He-uniform kernels (bound `sqrt(6 / fan_in)`), zero biases. The last
    /// conv of each block starts at zero so every block begins as the
    /// identity; otherwise the five residual sums blow the initial logits up.
    pub fn init(spec: ModelSpec, classes: ClassSet, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(spec, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut w.tensors {
            if t.shape.len() == 3 && !t.name.ends_with(".expand.weight") {
                let fan_in = (t.shape[0] * t.shape[1]) as f64;
                let bound = (6.0 / fan_in).sqrt() as f32;
                for v in &mut t.data {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(w)
    }

    /// Every tensor entry uniform in `[-scale, scale]`, biases included.
    pub fn random(spec: ModelSpec, classes: ClassSet, seed: u64, scale: f32) -> Result<Self> {
        let mut w = Self::zeros(spec, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &mut w.tensors {
            for v in &mut t.data {
                *v = rng.random_range(-scale..=scale);
            }
        }
        Ok(w)
    }

    pub fn from_tensors(
        spec: ModelSpec,
        classes: ClassSet,
        norm: Option<FeatureNorm>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        spec.validate()?;
        let layout = spec.tensor_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape {
                    tensor: t.name.clone(),
                    expected: shape.clone(),
                    got: t.shape.clone(),
                });
            }
        }
        if let Some(n) = &norm {
            if n.mean.len() != spec.input_bins || n.scale.len() != spec.input_bins {
                return Err(Error::Shape {
                    tensor: "norm".into(),
                    expected: vec![spec.input_bins],
                    got: vec![n.mean.len(), n.scale.len()],
                });
            }
        }
        Ok(Self {
            spec,
            classes,
            norm,
            user_id: None,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn head_weight_index(&self) -> usize {
        index::head_w(self.spec.num_blocks)
    }

    pub fn head_bias_index(&self) -> usize {
        index::head_b(self.spec.num_blocks)
    }

    /// All tensor data cast to `S`, for training and gradient checks.
    pub fn to_params<S: Real>(&self) -> Vec<Vec<S>> {
        self.tensors
            .iter()
            .map(|t| t.data.iter().map(|&v| S::of(v as f64)).collect())
            .collect()
    }

    pub fn set_params<S: Real>(&mut self, params: &[Vec<S>]) {
        for (t, p) in self.tensors.iter_mut().zip(params) {
            for (d, &v) in t.data.iter_mut().zip(p) {
                *d = v.as_f64() as f32;
            }
        }
    }
}

/// Read access to network parameters in any precision.
pub trait Params<S: Real> {
    fn spec(&self) -> &ModelSpec;
    fn norm(&self) -> Option<&FeatureNorm>;
    fn tensor_data(&self, i: usize) -> &[S];
}

impl Params<f32> for ModelWeights {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    fn norm(&self) -> Option<&FeatureNorm> {
        self.norm.as_ref()
    }
    fn tensor_data(&self, i: usize) -> &[f32] {
        &self.tensors[i].data
    }
}

/// Parameters held outside a [`ModelWeights`], e.g. in `f64`.
pub struct ParamSet<'a, S> {
    pub spec: &'a ModelSpec,
    pub norm: Option<&'a FeatureNorm>,
    pub tensors: &'a [Vec<S>],
}

impl<S: Real> Params<S> for ParamSet<'_, S> {
    fn spec(&self) -> &ModelSpec {
        self.spec
    }
    fn norm(&self) -> Option<&FeatureNorm> {
        self.norm
    }
    fn tensor_data(&self, i: usize) -> &[S] {
        &self.tensors[i]
    }
}

/// Sigmoid with the result kept strictly inside (0, 1) in `f32`.
#[inline]
pub fn sigmoid(z: f32) -> f32 {
    const LO: f32 = 1e-7;
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    (1.0 / (1.0 + (-z).exp())).clamp(LO, HI)
}

#[inline]
pub(crate) fn leaky<S: Real>(z: S, slope: S) -> S {
    if z > S::zero() {
        z
    } else {
        z * slope
    }
}

/// T×17 class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbs(pub Matrix<f32>);

impl FrameProbs {
    pub fn matrix(&self) -> &Matrix<f32> {
        &self.0
    }
    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }
    pub fn row(&self, t: usize) -> &[f32] {
        self.0.row(t)
    }
}

/// T×N activations feeding the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings(pub Matrix<f32>);

impl Embeddings {
    pub fn matrix(&self) -> &Matrix<f32> {
        &self.0
    }
    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }
}

/// Multiplicative inverted-dropout masks, one per activation site, each the
/// size of that activation (`T × channels`).
#[derive(Debug, Clone)]
pub struct DropoutMasks<S> {
    pub stem: Vec<S>,
    pub blocks: Vec<[Vec<S>; 2]>,
}

impl<S: Real> DropoutMasks<S> {
    pub fn sample(spec: &ModelSpec, frames: usize, rate: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = S::of(1.0 / (1.0 - rate as f64));
        let mut draw = |n: usize| -> Vec<S> {
            (0..n)
                .map(|_| if rng.random::<f32>() < rate { S::zero() } else { keep })
                .collect()
        };
        let stem = draw(frames * spec.channels);
        let blocks = (0..spec.num_blocks)
            .map(|_| [draw(frames * spec.channels), draw(frames * spec.bottleneck())])
            .collect();
        Self { stem, blocks }
    }
}

/// Per-block activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockTrace<S> {
    /// Block input with `k - 1` zero rows prepended.
    pub input: Vec<S>,
    pub z1: Vec<S>,
    pub a1: Vec<S>,
    pub z2: Vec<S>,
    pub a2: Vec<S>,
}

/// Everything the forward pass computed, in training layout.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    pub frames: usize,
    /// Normalized input with `k - 1` zero rows prepended.
    pub input: Vec<S>,
    pub stem_z: Vec<S>,
    pub blocks: Vec<BlockTrace<S>>,
    /// Output of the last block, `T × N`.
    pub embeddings: Vec<S>,
    /// Head outputs before the sigmoid, `T × C`.
    pub logits: Vec<S>,
}

impl<S: Real> Trace<S> {
    /// Sign of every LeakyReLU pre-activation; two traces with different
    /// patterns straddle a kink.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.stem_z.iter().map(|&z| z > S::zero()).collect();
        for b in &self.blocks {
            out.extend(b.z1.iter().map(|&z| z > S::zero()));
            out.extend(b.z2.iter().map(|&z| z > S::zero()));
        }
        out
    }

    /// Name of the first layer whose output contains a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let bad = |v: &[S]| v.iter().any(|x| !x.is_finite());
        if bad(&self.input) {
            return Some("input".into());
        }
        if bad(&self.stem_z) {
            return Some("stem".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if bad(&b.z1) {
                return Some(format!("blocks.{i}.gconv"));
            }
            if bad(&b.z2) {
                return Some(format!("blocks.{i}.reduce"));
            }
        }
        if bad(&self.embeddings) {
            return Some(format!("blocks.{}.expand", self.blocks.len().saturating_sub(1)));
        }
        if bad(&self.logits) {
            return Some("head".into());
        }
        None
    }
}

fn check_input<S: Real>(p: &impl Params<S>, feats: &Matrix<S>) -> Result<()> {
    let spec = p.spec();
    if feats.cols() != spec.input_bins {
        return Err(Error::Shape {
            tensor: "features".into(),
            expected: vec![feats.rows(), spec.input_bins],
            got: vec![feats.rows(), feats.cols()],
        });
    }
    for (i, (name, shape)) in spec.tensor_layout().iter().enumerate() {
        let n: usize = shape.iter().product();
        if p.tensor_data(i).len() != n {
            return Err(Error::Shape {
                tensor: name.clone(),
                expected: shape.clone(),
                got: vec![p.tensor_data(i).len()],
            });
        }
    }
    Ok(())
}

/// Normalized input rows with `pad` zero rows prepended.
pub(crate) fn normalized_padded<S: Real>(norm: Option<&FeatureNorm>, feats: &Matrix<S>, pad: usize) -> Vec<S> {
    let bins = feats.cols();
    let mut x = vec![S::zero(); (pad + feats.rows()) * bins];
    match norm {
        Some(n) => {
            for t in 0..feats.rows() {
                let row = feats.row(t);
                let dst = &mut x[(pad + t) * bins..(pad + t + 1) * bins];
                for i in 0..bins {
                    dst[i] = (row[i] - S::of(n.mean[i] as f64)) * S::of(n.scale[i] as f64);
                }
            }
        }
        None => x[pad * bins..].copy_from_slice(feats.as_slice()),
    }
    x
}

/// Full forward pass keeping every intermediate. `feats` are raw log-mel
/// frames (normalization is applied here).
pub fn forward_trace<S: Real>(
    p: &impl Params<S>,
    feats: &Matrix<S>,
    dropout: Option<&DropoutMasks<S>>,
) -> Result<Trace<S>> {
    check_input(p, feats)?;
    let spec = p.spec();
    let t = feats.rows();
    let pad = spec.kernel - 1;
    let n = spec.channels;
    let slope = S::of(spec.leaky_slope as f64);

    let input = normalized_padded(p.norm(), feats, pad);
    let stem = spec.stem();
    let mut stem_z = vec![S::zero(); t * n];
    stem.forward(p.tensor_data(index::STEM_W), p.tensor_data(index::STEM_B), &input, t, &mut stem_z);

    // block input buffer, padded
    let mut h = vec![S::zero(); (pad + t) * n];
    for (i, (dst, &z)) in h[pad * n..].iter_mut().zip(&stem_z).enumerate() {
        let m = dropout.map_or(S::one(), |d| d.stem[i]);
        *dst = leaky(z, slope) * m;
    }

    let (gconv, reduce, expand) = (spec.gconv(), spec.reduce(), spec.expand());
    let nb = spec.bottleneck();
    let mut blocks = Vec::with_capacity(spec.num_blocks);
    for b in 0..spec.num_blocks {
        let mut z1 = vec![S::zero(); t * n];
        gconv.forward(p.tensor_data(index::gconv_w(b)), p.tensor_data(index::gconv_b(b)), &h, t, &mut z1);
        let a1: Vec<S> = z1
            .iter()
            .enumerate()
            .map(|(i, &z)| leaky(z, slope) * dropout.map_or(S::one(), |d| d.blocks[b][0][i]))
            .collect();
        let mut z2 = vec![S::zero(); t * nb];
        reduce.forward(p.tensor_data(index::reduce_w(b)), p.tensor_data(index::reduce_b(b)), &a1, t, &mut z2);
        let a2: Vec<S> = z2
            .iter()
            .enumerate()
            .map(|(i, &z)| leaky(z, slope) * dropout.map_or(S::one(), |d| d.blocks[b][1][i]))
            .collect();
        let mut z3 = vec![S::zero(); t * n];
        expand.forward(p.tensor_data(index::expand_w(b)), p.tensor_data(index::expand_b(b)), &a2, t, &mut z3);

        let shortcut: &[S] = match spec.residual {
            ResidualSpan::Block => &h[pad * n..],
            ResidualSpan::Bottleneck => &a1,
        };
        let mut next = vec![S::zero(); (pad + t) * n];
        for ((dst, &s), &z) in next[pad * n..].iter_mut().zip(shortcut).zip(&z3) {
            *dst = s + z;
        }
        blocks.push(BlockTrace { input: std::mem::replace(&mut h, next), z1, a1, z2, a2 });
    }
    let embeddings = h.split_off(pad * n);
    let logits = head_logits(p, &embeddings, t);
    Ok(Trace {
        frames: t,
        input,
        stem_z,
        blocks,
        embeddings,
        logits,
    })
}

fn head_logits<S: Real>(p: &impl Params<S>, embeddings: &[S], t: usize) -> Vec<S> {
    let spec = p.spec();
    let head = spec.head();
    let mut logits = vec![S::zero(); t * head.cout];
    head.forward(
        p.tensor_data(index::head_w(spec.num_blocks)),
        p.tensor_data(index::head_b(spec.num_blocks)),
        embeddings,
        t,
        &mut logits,
    );
    logits
}

/// Head and sigmoid applied to embeddings. [`forward`] produces its
/// probabilities through exactly this function.
pub fn apply_head(weights: &ModelWeights, embeddings: &Embeddings) -> FrameProbs {
    let t = embeddings.num_frames();
    let logits = head_logits(weights, embeddings.0.as_slice(), t);
    FrameProbs(Matrix::from_vec(
        t,
        weights.spec.num_classes,
        logits.into_iter().map(sigmoid).collect(),
    ))
}

/// Inference forward pass, dropout off.
pub fn forward(weights: &ModelWeights, feats: &FeatureMatrix) -> Result<(FrameProbs, Embeddings)> {
    let trace = forward_trace(weights, feats.matrix(), None)?;
    let emb = Embeddings(Matrix::from_vec(trace.frames, weights.spec.channels, trace.embeddings));
    let probs = apply_head(weights, &emb);
    Ok((probs, emb))
}
