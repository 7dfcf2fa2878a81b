//! Audio in, events out: front end, streaming network and post-processor
//! glued together.

use std::sync::Arc;

use crate::audio::{pcm16_to_f32, AudioClip};
use crate::error::Result;
use crate::events::{Event, PostProcConfig, PostProcessor};
use crate::frontend::{compute_features, FeatureStream};
use crate::tcn::{forward, FrameProbs, ModelWeights, StreamSession};

/// Output of one [`Detector::push`] call.
#[derive(Debug, Clone)]
pub struct Detections {
    /// Probabilities of the frames completed by this push.
    pub probs: FrameProbs,
    /// Index of the first of those frames.
    pub first_frame: usize,
    pub events: Vec<Event>,
}

/// Streaming detector over raw samples. Any chunking of the input gives the
/// same frames and events as [`detect_clip`] on the whole signal.
pub struct Detector {
    features: FeatureStream,
    session: StreamSession,
    post: PostProcessor,
}

impl Detector {
    pub fn new(weights: Arc<ModelWeights>, cfg: PostProcConfig) -> Result<Self> {
        Ok(Self {
            features: FeatureStream::new(),
            session: StreamSession::new(weights),
            post: PostProcessor::new(cfg)?,
        })
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        self.session.weights()
    }

    pub fn postproc(&self) -> &PostProcConfig {
        self.post.config()
    }

    pub fn frames(&self) -> usize {
        self.session.frames_seen()
    }

    pub fn set_postproc(&mut self, cfg: PostProcConfig) -> Result<()> {
        self.post.set_config(cfg)
    }

    /// Swaps to weights with the same spec (e.g. a personalized head).
    pub fn replace_weights(&mut self, weights: Arc<ModelWeights>) -> Result<()> {
        self.session.replace_weights(weights)
    }

    pub fn push(&mut self, samples: &[f32]) -> Result<Detections> {
        let first_frame = self.session.frames_seen();
        let feats = self.features.push(samples);
        let (probs, _) = self.session.push(&feats)?;
        let events = self.post.process(&probs)?;
        Ok(Detections { probs, first_frame, events })
    }

    pub fn push_pcm16(&mut self, pcm: &[i16]) -> Result<Detections> {
        let samples: Vec<f32> = pcm.iter().map(|&s| pcm16_to_f32(s)).collect();
        self.push(&samples)
    }
}

/// Whole-clip detection through the batch code paths.
pub fn detect_clip(weights: &ModelWeights, clip: &AudioClip, cfg: &PostProcConfig) -> Result<(FrameProbs, Vec<Event>)> {
    let feats = compute_features(clip)?;
    let (probs, _) = forward(weights, &feats)?;
    let events = crate::events::process(&probs, cfg)?;
    Ok((probs, events))
}
