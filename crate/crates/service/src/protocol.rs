//! Wire format of a session.
//!
//! Audio goes in binary frames: one kind byte, a little-endian `u32` sample
//! count `n`, then `n` little-endian `i16` samples (16 kHz mono). Kind 1 is
//! live audio, kind 2 is enrollment audio. Everything else is JSON text,
//! tagged by `"type"`.

use serde::{Deserialize, Serialize};

use nvsd::events::PostProcConfig;

pub const AUDIO: u8 = 1;
pub const ENROLL_AUDIO: u8 = 2;
/// Largest accepted binary frame, in samples (10 s).
pub const MAX_FRAME_SAMPLES: u32 = 160_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FrameError {
    #[error("binary frame shorter than its 5 byte header")]
    Short,
    #[error("unknown frame kind {0}")]
    Kind(u8),
    #[error("frame declares {declared} samples but carries {bytes} payload bytes")]
    Length { declared: u32, bytes: usize },
    #[error("frame of {0} samples exceeds the limit")]
    TooLarge(u32),
}

/// Splits a binary frame into its kind and samples.
pub fn decode_audio(frame: &[u8]) -> Result<(u8, Vec<i16>), FrameError> {
    if frame.len() < 5 {
        return Err(FrameError::Short);
    }
    let kind = frame[0];
    if kind != AUDIO && kind != ENROLL_AUDIO {
        return Err(FrameError::Kind(kind));
    }
    let n = u32::from_le_bytes(frame[1..5].try_into().unwrap());
    if n > MAX_FRAME_SAMPLES {
        return Err(FrameError::TooLarge(n));
    }
    let payload = &frame[5..];
    if payload.len() != 2 * n as usize {
        return Err(FrameError::Length { declared: n, bytes: payload.len() });
    }
    Ok((kind, payload.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect()))
}

pub fn encode_audio(kind: u8, samples: &[i16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 2 * samples.len());
    out.push(kind);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    /// Must be the first message: `pcm_s16le`, 16000, 1.
    Hello { format: String, sample_rate: u32, channels: u16 },
    /// Changes one class (when `class` is set) and/or the global values.
    Config {
        #[serde(default)]
        class: Option<String>,
        #[serde(default)]
        theta: Option<f32>,
        #[serde(default)]
        tau: Option<usize>,
        #[serde(default)]
        active: Option<bool>,
        #[serde(default)]
        theta_bg: Option<f32>,
        #[serde(default)]
        refractory: Option<usize>,
    },
    /// Back to the server's configured post-processing.
    ConfigReset,
    EnrollStart { class: String, shots: usize },
    EnrollFinish,
    EnrollCancel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub class: String,
    pub p: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ready {
        session: u64,
        model_version: String,
        classes: Vec<String>,
        postproc: PostProcConfig,
        summary_hz: u32,
    },
    /// Per-class maxima over the last 100 ms, for display.
    Summary {
        t_ms: u64,
        top_k: Vec<ClassProb>,
        p_background: f32,
        p_speech: f32,
    },
    Event { class: String, class_index: usize, t_ms: u64 },
    ConfigAck { postproc: PostProcConfig, effective_from_ms: u64 },
    EnrollStarted { class: String, shots: usize },
    /// F1 values are measured on the recording after the enrolled shots,
    /// `None` when nothing was left over.
    Enrolled {
        class: String,
        segments_found: usize,
        shots_used: usize,
        f1_before: Option<f64>,
        f1_after: Option<f64>,
    },
    EnrollCancelled,
    Error { code: String, message: String, fatal: bool },
}

impl ServerMessage {
    pub fn error(code: &str, message: impl Into<String>, fatal: bool) -> Self {
        ServerMessage::Error { code: code.into(), message: message.into(), fatal }
    }
}
