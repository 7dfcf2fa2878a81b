//! Log-mel front-end: 25 ms Hann windows every 10 ms, 512-point FFT, 64
//! triangular HTK-mel filters between 20 Hz and 8 kHz, natural log with a
//! fixed floor. No per-utterance normalization, so batch and streaming
//! extraction agree frame for frame.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_BINS: usize = 64;
pub const FRAME_RATE_HZ: f64 = 100.0;
pub const FRAME_MS: f64 = 10.0;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 8000.0;
pub const ENERGY_FLOOR: f32 = 1e-10;

const DUMP_MAGIC: &[u8; 4] = b"NVSF";

/// Number of frames for `num_samples`, or zero when shorter than a window.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < WINDOW {
        0
    } else {
        (num_samples - WINDOW) / HOP + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of the filterbank: `NUM_BINS + 2` points equally
/// spaced on the mel scale. Filter `b` rises from `edges[b]`, peaks at
/// `edges[b + 1]` and falls to zero at `edges[b + 2]`.
pub fn mel_edges_hz() -> Vec<f64> {
    let lo = hz_to_mel(F_MIN);
    let hi = hz_to_mel(F_MAX);
    (0..NUM_BINS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_BINS + 1) as f64))
        .collect()
}

pub fn mel_center_hz(bin: usize) -> f64 {
    mel_edges_hz()[bin + 1]
}

/// T×64 log-mel energies at 100 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Matrix<f32>);

impl FeatureMatrix {
    pub fn new(frames: Matrix<f32>) -> Result<Self> {
        if frames.cols() != NUM_BINS {
            return Err(Error::Shape {
                tensor: "features".into(),
                expected: vec![frames.rows(), NUM_BINS],
                got: vec![frames.rows(), frames.cols()],
            });
        }
        Ok(Self(frames))
    }

    pub fn empty() -> Self {
        Self(Matrix::zeros(0, NUM_BINS))
    }

    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<f32> {
        self.0
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.0.row(t)
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self(self.0.slice_rows(start, end))
    }

    pub fn append(&mut self, other: &FeatureMatrix) {
        self.0.append_rows(&other.0);
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.num_frames() as u32).to_le_bytes())?;
        w.write_all(&(NUM_BINS as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for v in self.0.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Truncated("feature dump header".into()))?;
        if &header[..4] != DUMP_MAGIC {
            return Err(Error::Format("feature dump magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (frames, bins) = (word(4), word(8));
        if bins != NUM_BINS {
            return Err(Error::Format(format!("feature dump has {bins} bins")));
        }
        let mut bytes = vec![0u8; frames * bins * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Truncated(format!("feature dump payload of {frames} frames")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(Matrix::from_vec(frames, bins, data))
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_dump(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }
}

struct Filter {
    first_bin: usize,
    weights: Vec<f32>,
}

/// Window, FFT plan and filterbank; immutable and shareable.
pub struct MelFrontend {
    window: Vec<f32>,
    fft: Arc<dyn Fft<f32>>,
    filters: Vec<Filter>,
}

impl MelFrontend {
    pub fn new() -> Self {
        // periodic Hann
        let window = (0..WINDOW)
            .map(|n| {
                (0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos()) as f32
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let edges = mel_edges_hz();
        let bin_hz = SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let filters = (0..NUM_BINS)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..=FFT_SIZE / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f < mid {
                        (f - lo) / (mid - lo)
                    } else if f >= mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w as f32);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                Filter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        Self {
            window,
            fft,
            filters,
        }
    }

    /// Shared instance.
    pub fn global() -> &'static MelFrontend {
        static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
        FRONTEND.get_or_init(MelFrontend::new)
    }

    /// Dense 64×257 filterbank, for inspection and tests.
    pub fn filterbank(&self) -> Matrix<f32> {
        let mut m = Matrix::zeros(NUM_BINS, FFT_SIZE / 2 + 1);
        for (b, f) in self.filters.iter().enumerate() {
            for (i, &w) in f.weights.iter().enumerate() {
                m.set(b, f.first_bin + i, w);
            }
        }
        m
    }

    /// One frame of log-mel energies from exactly `WINDOW` samples.
    pub fn frame_into(&self, samples: &[f32], out: &mut [f32], scratch: &mut FrameScratch) {
        debug_assert_eq!(samples.len(), WINDOW);
        let buf = &mut scratch.buf;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WINDOW {
                Complex::new(samples[i] * self.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        self.fft.process_with_scratch(buf, &mut scratch.fft);
        for (k, p) in scratch.power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (o, f) in out.iter_mut().zip(&self.filters) {
            let mut e = 0.0f32;
            for (i, &w) in f.weights.iter().enumerate() {
                e += w * scratch.power[f.first_bin + i];
            }
            *o = e.max(ENERGY_FLOOR).ln();
        }
    }

    pub fn scratch(&self) -> FrameScratch {
        FrameScratch {
            buf: vec![Complex::new(0.0, 0.0); FFT_SIZE],
            fft: vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()],
            power: vec![0.0; FFT_SIZE / 2 + 1],
        }
    }

    pub fn compute(&self, samples: &[f32]) -> Matrix<f32> {
        let t = num_frames(samples.len());
        let mut out = Matrix::zeros(t, NUM_BINS);
        let mut scratch = self.scratch();
        for i in 0..t {
            let start = i * HOP;
            self.frame_into(&samples[start..start + WINDOW], out.row_mut(i), &mut scratch);
        }
        out
    }
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

pub struct FrameScratch {
    buf: Vec<Complex<f32>>,
    fft: Vec<Complex<f32>>,
    power: Vec<f32>,
}

/// Batch feature extraction for a validated 16 kHz clip.
pub fn compute_features(clip: &AudioClip) -> Result<FeatureMatrix> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::RateMismatch {
            got: clip.sample_rate(),
            expected: SAMPLE_RATE,
        });
    }
    if clip.len() < WINDOW {
        return Err(Error::TooShort {
            got: clip.len(),
            need: WINDOW,
        });
    }
    Ok(FeatureMatrix(MelFrontend::global().compute(clip.samples())))
}

/// Incremental extraction. Holds fewer than `WINDOW` samples that have not
/// yet completed a frame, plus the overlap needed for the next one.
pub struct FeatureStream {
    frontend: &'static MelFrontend,
    pending: Vec<f32>,
    scratch: FrameScratch,
    frames_emitted: usize,
}

impl FeatureStream {
    pub fn new() -> Self {
        let frontend = MelFrontend::global();
        Self {
            frontend,
            pending: Vec::with_capacity(WINDOW * 2),
            scratch: frontend.scratch(),
            frames_emitted: 0,
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.len()
    }

    /// Frames completed by `samples`.
    pub fn push(&mut self, samples: &[f32]) -> FeatureMatrix {
        self.pending.extend_from_slice(samples);
        let n = num_frames(self.pending.len());
        let mut out = Matrix::zeros(n, NUM_BINS);
        for i in 0..n {
            let start = i * HOP;
            self.frontend.frame_into(
                &self.pending[start..start + WINDOW],
                out.row_mut(i),
                &mut self.scratch,
            );
        }
        self.pending.drain(..n * HOP);
        self.frames_emitted += n;
        FeatureMatrix(out)
    }
}

impl Default for FeatureStream {
    fn default() -> Self {
        Self::new()
    }
}
