//! Mono 16 kHz audio clips and PCM16 WAV ingestion.

use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    pub source: Option<String>,
}

impl AudioClip {
    /// Validates the rate and that every sample is finite and within [-1, 1].
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::RateMismatch {
                got: sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::InvalidAudio(format!("sample {i} = {v} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Quantizes to signed 16-bit, the on-disk representation.
    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples.iter().map(|&s| f32_to_pcm16(s)).collect()
    }

    pub fn from_pcm16(pcm: &[i16]) -> Self {
        Self {
            samples: pcm.iter().map(|&s| pcm16_to_f32(s)).collect(),
            sample_rate: SAMPLE_RATE,
            source: None,
        }
    }

    /// Raw little-endian s16 mono bytes. A trailing odd byte is ignored.
    pub fn from_s16le_bytes(bytes: &[u8]) -> Self {
        let pcm: Vec<i16> = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::from_pcm16(&pcm)
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let clip = Self::read_wav_from(std::io::BufReader::new(file))?;
        Ok(clip.with_source(path.display().to_string()))
    }

    /// Accepts RIFF PCM16 mono at 16 kHz only.
    pub fn read_wav_from<R: Read>(reader: R) -> Result<Self> {
        let mut wav = hound::WavReader::new(reader)?;
        let spec = wav.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::WavFormat(format!(
                "{:?} {}-bit, expected PCM16",
                spec.sample_format, spec.bits_per_sample
            )));
        }
        if spec.channels != 1 {
            return Err(Error::WavFormat(format!("{} channels, expected mono", spec.channels)));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::RateMismatch {
                got: spec.sample_rate,
                expected: SAMPLE_RATE,
            });
        }
        let pcm = wav.samples::<i16>().collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_pcm16(&pcm))
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_wav_to(std::io::BufWriter::new(file))
    }

    pub fn write_wav_to<W: Write + Seek>(&self, writer: W) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::new(writer, spec)?;
        for s in self.to_pcm16() {
            w.write_sample(s)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[inline]
pub fn pcm16_to_f32(s: i16) -> f32 {
    s as f32 / 32768.0
}

#[inline]
pub fn f32_to_pcm16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
