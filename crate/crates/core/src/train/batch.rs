//! Training sequences: random crops of sound clips and aggressor clips,
//! concatenated to a fixed frame count with a fixed aggressor share.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::annotate::LabeledClip;
use crate::classes::NUM_CLASSES;
use crate::frontend::NUM_BINS;
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
pub struct Sequence {
    pub feats: Matrix<f32>,
    pub targets: Matrix<f32>,
    pub aggressor_frames: usize,
}

pub struct BatchComposer<'a> {
    sounds: Vec<&'a LabeledClip>,
    aggressors: Vec<&'a LabeledClip>,
    frames: usize,
    aggressor_ratio: f32,
    max_piece: usize,
}

struct Piece<'a> {
    clip: &'a LabeledClip,
    start: usize,
    len: usize,
    aggressor: bool,
}

impl<'a> BatchComposer<'a> {
    pub fn new(
        sounds: Vec<&'a LabeledClip>,
        aggressors: Vec<&'a LabeledClip>,
        frames: usize,
        aggressor_ratio: f32,
        max_piece: usize,
    ) -> Self {
        let sounds = sounds.into_iter().filter(|c| c.num_frames() > 0).collect();
        let aggressors = aggressors.into_iter().filter(|c| c.num_frames() > 0).collect();
        Self { sounds, aggressors, frames, aggressor_ratio, max_piece: max_piece.max(1) }
    }

    /// Frames per sequence drawn from aggressors.
    pub fn aggressor_frames(&self) -> usize {
        if self.aggressors.is_empty() {
            0
        } else if self.sounds.is_empty() {
            self.frames
        } else {
            (self.frames as f64 * self.aggressor_ratio as f64).round() as usize
        }
    }

    pub fn next_sequence(&self, rng: &mut ChaCha8Rng) -> Sequence {
        let agg = self.aggressor_frames();
        let mut pieces = Vec::new();
        self.fill(&self.sounds, self.frames - agg, false, rng, &mut pieces);
        self.fill(&self.aggressors, agg, true, rng, &mut pieces);
        pieces.shuffle(rng);

        let mut feats = Matrix::zeros(0, NUM_BINS);
        let mut targets = Matrix::zeros(0, NUM_CLASSES);
        let mut aggressor_frames = 0;
        for p in &pieces {
            feats.append_rows(&p.clip.feats.matrix().slice_rows(p.start, p.start + p.len));
            targets.append_rows(&p.clip.frame_labels.slice_rows(p.start, p.start + p.len));
            if p.aggressor {
                aggressor_frames += p.len;
            }
        }
        Sequence { feats, targets, aggressor_frames }
    }

    fn fill(&self, pool: &[&'a LabeledClip], mut remaining: usize, aggressor: bool, rng: &mut ChaCha8Rng, out: &mut Vec<Piece<'a>>) {
        if pool.is_empty() {
            return;
        }
        while remaining > 0 {
            let clip = pool[rng.random_range(0..pool.len())];
            let len = remaining.min(clip.num_frames()).min(self.max_piece);
            let start = rng.random_range(0..=clip.num_frames() - len);
            out.push(Piece { clip, start, len, aggressor });
            remaining -= len;
        }
    }
}
