use std::sync::Arc;

use super::{head_logits, index, leaky, sigmoid, Embeddings, FrameProbs, ModelWeights, ResidualSpan};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::linalg::Matrix;

/// Incremental inference. Keeps the last `k - 1` input rows of every k>1
/// convolution, so feeding frames in any chunking reproduces the batch
/// forward pass exactly.
pub struct StreamSession {
    weights: Arc<ModelWeights>,
    stem_history: Vec<f32>,
    block_history: Vec<Vec<f32>>,
    frames_seen: usize,
    closed: bool,
}

impl StreamSession {
    pub fn new(weights: Arc<ModelWeights>) -> Self {
        let spec = &weights.spec;
        let pad = spec.kernel - 1;
        Self {
            stem_history: vec![0.0; pad * spec.input_bins],
            block_history: vec![vec![0.0; pad * spec.channels]; spec.num_blocks],
            weights,
            frames_seen: 0,
            closed: false,
        }
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Swaps in weights with the same spec, keeping the streaming context.
    /// Intended for head-only updates; a different trunk makes the carried
    /// context stale.
    pub fn replace_weights(&mut self, weights: Arc<ModelWeights>) -> Result<()> {
        if weights.spec != self.weights.spec {
            return Err(Error::Config("replacement weights have a different spec".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn push(&mut self, feats: &FeatureMatrix) -> Result<(FrameProbs, Embeddings)> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        let w = &*self.weights;
        let spec = &w.spec;
        let t = feats.num_frames();
        let n = spec.channels;
        if t == 0 {
            return Ok((
                FrameProbs(Matrix::zeros(0, spec.num_classes)),
                Embeddings(Matrix::zeros(0, n)),
            ));
        }
        let pad = spec.kernel - 1;
        let bins = spec.input_bins;
        let slope = spec.leaky_slope;

        let mut input = super::normalized_padded(w.norm.as_ref(), feats.matrix(), pad);
        input[..pad * bins].copy_from_slice(&self.stem_history);
        self.stem_history.copy_from_slice(&input[t * bins..]);

        let mut z = vec![0.0f32; t * n];
        spec.stem().forward(&w.tensors[index::STEM_W].data, &w.tensors[index::STEM_B].data, &input, t, &mut z);
        let mut h = vec![0.0f32; (pad + t) * n];
        for (dst, &v) in h[pad * n..].iter_mut().zip(&z) {
            *dst = leaky(v, slope);
        }

        let (gconv, reduce, expand) = (spec.gconv(), spec.reduce(), spec.expand());
        let nb = spec.bottleneck();
        for b in 0..spec.num_blocks {
            h[..pad * n].copy_from_slice(&self.block_history[b]);
            self.block_history[b].copy_from_slice(&h[t * n..]);

            let mut z1 = vec![0.0f32; t * n];
            gconv.forward(&w.tensors[index::gconv_w(b)].data, &w.tensors[index::gconv_b(b)].data, &h, t, &mut z1);
            let a1: Vec<f32> = z1.iter().map(|&v| leaky(v, slope)).collect();
            let mut z2 = vec![0.0f32; t * nb];
            reduce.forward(&w.tensors[index::reduce_w(b)].data, &w.tensors[index::reduce_b(b)].data, &a1, t, &mut z2);
            let a2: Vec<f32> = z2.iter().map(|&v| leaky(v, slope)).collect();
            let mut z3 = vec![0.0f32; t * n];
            expand.forward(&w.tensors[index::expand_w(b)].data, &w.tensors[index::expand_b(b)].data, &a2, t, &mut z3);

            let mut next = vec![0.0f32; (pad + t) * n];
            {
                let shortcut: &[f32] = match spec.residual {
                    ResidualSpan::Block => &h[pad * n..],
                    ResidualSpan::Bottleneck => &a1,
                };
                for ((dst, &s), &v) in next[pad * n..].iter_mut().zip(shortcut).zip(&z3) {
                    *dst = s + v;
                }
            }
            h = next;
        }
        let emb = h.split_off(pad * n);
        let logits = head_logits(w, &emb, t);
        self.frames_seen += t;
        Ok((
            FrameProbs(Matrix::from_vec(t, spec.num_classes, logits.into_iter().map(sigmoid).collect())),
            Embeddings(Matrix::from_vec(t, n, emb)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::ClassSet;
    use crate::tcn::{forward, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(t: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(Matrix::from_vec(t, 64, (0..t * 64).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .unwrap()
    }

    #[test]
    fn single_frame_calls_match_batch() {
        let w = Arc::new(ModelWeights::random(ModelSpec::tiny(16, 4, 3), ClassSet::standard(), 1, 0.3).unwrap());
        let x = feats(300, 2);
        let (bp, be) = forward(&w, &x).unwrap();
        let mut s = StreamSession::new(w.clone());
        for t in 0..300 {
            let (p, e) = s.push(&x.slice(t, t + 1)).unwrap();
            assert_eq!(p.row(0), bp.row(t), "frame {t}");
            assert_eq!(e.matrix().row(0), be.matrix().row(t));
        }
    }

    #[test]
    fn empty_push_changes_nothing_and_close_is_final() {
        let w = Arc::new(ModelWeights::random(ModelSpec::tiny(8, 2, 2), ClassSet::standard(), 1, 0.3).unwrap());
        let x = feats(20, 3);
        let (bp, _) = forward(&w, &x).unwrap();
        let mut s = StreamSession::new(w);
        let (p0, _) = s.push(&x.slice(0, 10)).unwrap();
        let (pe, _) = s.push(&FeatureMatrix::empty()).unwrap();
        assert_eq!(pe.num_frames(), 0);
        assert_eq!(s.frames_seen(), 10);
        let (p1, _) = s.push(&x.slice(10, 20)).unwrap();
        assert_eq!(p0.matrix(), &bp.matrix().slice_rows(0, 10));
        assert_eq!(p1.matrix(), &bp.matrix().slice_rows(10, 20));
        s.close();
        assert!(matches!(s.push(&x), Err(Error::SessionClosed)));
    }
}
