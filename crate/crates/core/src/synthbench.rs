//! Seeded synthetic corpus: five stand-in sound classes repeated with gaps,
//! aggressor noise, and users whose spectra are shifted.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{write_label_file, ClipKind, LabelRecord, LabeledClip, Segment, DEFAULT_INFLATE};
use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::classes::{ClassSet, BACKGROUND, SPEECH};
use crate::error::{Error, Result};
use crate::frontend::{num_frames, HOP};

const SR: f32 = SAMPLE_RATE as f32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthSound {
    /// Train of short resonant impulses, about 40 ms.
    Click,
    /// Low decaying thump with low-passed noise, about 70 ms.
    Pop,
    /// Fundamental with two harmonics, about 200 ms.
    Tone { hz: f32 },
    /// High-passed noise, about 200 ms.
    Hiss,
}

impl SynthSound {
    pub fn name(&self) -> String {
        match self {
            SynthSound::Click => "click".into(),
            SynthSound::Pop => "pop".into(),
            SynthSound::Tone { hz } => format!("tone{}", hz.round() as u32),
            SynthSound::Hiss => "hiss".into(),
        }
    }

    fn base_ms(&self) -> f32 {
        match self {
            SynthSound::Click => 40.0,
            SynthSound::Pop => 70.0,
            SynthSound::Tone { .. } | SynthSound::Hiss => 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub sounds: Vec<SynthSound>,
    /// Sounds per clip.
    pub repetitions: usize,
    pub gap_s: f32,
    pub gap_jitter_s: f32,
    /// Silence before the first sound.
    pub lead_s: f32,
    /// Range of sound-to-noise-floor ratio per clip, in dB.
    pub snr_db: [f32; 2],
    pub train_users: usize,
    pub eval_users: usize,
    /// Per-user frequency factor is drawn from `1 ± user_spread`.
    pub user_spread: f32,
    /// Clips per aggressor type (pink noise, babble, chirps).
    pub aggressor_clips: usize,
    /// Held-out clips per aggressor type, for false-positive measurements.
    pub noise_clips: usize,
    pub aggressor_s: f32,
    /// Frequency factor of shifted users.
    pub shift_factor: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            sounds: vec![
                SynthSound::Click,
                SynthSound::Pop,
                SynthSound::Tone { hz: 300.0 },
                SynthSound::Tone { hz: 800.0 },
                SynthSound::Hiss,
            ],
            repetitions: 10,
            gap_s: 1.0,
            gap_jitter_s: 0.25,
            lead_s: 0.5,
            snr_db: [20.0, 40.0],
            train_users: 14,
            eval_users: 4,
            user_spread: 0.05,
            aggressor_clips: 2,
            noise_clips: 4,
            aggressor_s: 15.0,
            shift_factor: 1.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sounds.is_empty() || self.train_users == 0 || self.repetitions == 0 {
            return Err(Error::Config("synth spec needs at least one sound, user and repetition".into()));
        }
        if self.sounds.len() > crate::classes::NUM_SOUNDS {
            return Err(Error::Config("too many synthetic sounds".into()));
        }
        if !(self.gap_s > self.gap_jitter_s && self.gap_jitter_s >= 0.0 && self.lead_s >= 0.0) {
            return Err(Error::Config("gap must exceed its jitter".into()));
        }
        if !(self.snr_db[0] <= self.snr_db[1]) || !(self.shift_factor > 0.0) || !(0.0..1.0).contains(&self.user_spread) {
            return Err(Error::Config("invalid snr range, spread or shift factor".into()));
        }
        Ok(())
    }

    pub fn class_set(&self) -> ClassSet {
        let names: Vec<String> = self.sounds.iter().map(SynthSound::name).collect();
        ClassSet::with_sounds(&names).expect("at most 15 synthetic sounds")
    }
}

/// Per-user rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub freq: f32,
    pub duration: f32,
    pub level: f32,
}

pub fn user_voice(spec: &SynthSpec, user: u32, shifted: bool) -> Voice {
    let mut rng = rng_for(spec.seed, 1, user as u64, 0);
    let mut freq = rng.random_range(1.0 - spec.user_spread..=1.0 + spec.user_spread);
    if shifted {
        freq *= spec.shift_factor;
    }
    Voice { freq, duration: rng.random_range(0.85..=1.15), level: rng.random_range(0.3..=0.6) }
}

pub struct SynthCorpus {
    pub classes: ClassSet,
    pub train: Vec<LabeledClip>,
    pub eval: Vec<LabeledClip>,
    pub aggressors: Vec<LabeledClip>,
    /// Held-out aggressor clips for false-positive rates.
    pub noise: Vec<LabeledClip>,
}

impl SynthCorpus {
    pub fn duration_s(&self) -> f64 {
        [&self.train, &self.eval, &self.aggressors, &self.noise]
            .iter()
            .flat_map(|v| v.iter())
            .map(|c| c.clip.duration_s())
            .sum()
    }
}

/// Users `0..train_users` go to `train`, the next `eval_users` to `eval`.
/// Truth segments come from construction, not from energy segmentation.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for user in 0..(spec.train_users + spec.eval_users) as u32 {
        let voice = user_voice(spec, user, false);
        for class in 0..spec.sounds.len() {
            let seed = derive(spec.seed, 2, user as u64, class as u64);
            let clip = sound_clip(spec, class, voice, spec.repetitions, user, seed)?;
            if (user as usize) < spec.train_users {
                train.push(clip);
            } else {
                eval.push(clip);
            }
        }
    }
    let mut aggressors = Vec::new();
    let mut noise = Vec::new();
    for kind in 0..3u64 {
        for i in 0..spec.aggressor_clips as u64 {
            // spread aggressor clips over the training speakers so the
            // validation split gets some too
            let speaker = ((kind * spec.aggressor_clips as u64 + i) % spec.train_users as u64) as u32;
            aggressors.push(aggressor_clip(spec, kind, derive(spec.seed, 3, kind, i), speaker)?);
        }
        for i in 0..spec.noise_clips as u64 {
            noise.push(aggressor_clip(spec, kind, derive(spec.seed, 4, kind, i), u32::MAX)?);
        }
    }
    Ok(SynthCorpus { classes: spec.class_set(), train, eval, aggressors, noise })
}

/// One clip of `reps` repetitions of sound `class` by `voice`.
pub fn sound_clip(spec: &SynthSpec, class: usize, voice: Voice, reps: usize, speaker: u32, seed: u64) -> Result<LabeledClip> {
    let (audio, segments) = render_sound_clip(spec, class, voice, reps, seed)?;
    LabeledClip::sound(audio, class, segments, DEFAULT_INFLATE, speaker)
}

/// Audio plus construction-time segments. A segment covers every 10 ms hop
/// that overlaps the sound.
pub fn render_sound_clip(spec: &SynthSpec, class: usize, voice: Voice, reps: usize, seed: u64) -> Result<(AudioClip, Vec<Segment>)> {
    let sound = *spec.sounds.get(class).ok_or_else(|| Error::UnknownClass(format!("synthetic class {class}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(reps);
    let mut pos = (spec.lead_s * SR) as usize;
    for _ in 0..reps {
        let dur = sound.base_ms() * voice.duration * rng.random_range(0.9..=1.1);
        let amp = voice.level * rng.random_range(0.9..=1.1);
        let wave = render_sound(sound, voice.freq, dur, amp, &mut rng);
        events.push((pos, wave));
        let gap = spec.gap_s + rng.random_range(-spec.gap_jitter_s..=spec.gap_jitter_s);
        pos += events.last().unwrap().1.len() + (gap * SR) as usize;
    }
    let total = pos;
    let mut samples = vec![0f32; total];
    let mut sound_power = 0.0f64;
    let mut sound_len = 0usize;
    let mut segments = Vec::with_capacity(reps);
    for (start, wave) in &events {
        for (d, &v) in samples[*start..].iter_mut().zip(wave) {
            *d += v;
            sound_power += (v as f64) * (v as f64);
        }
        sound_len += wave.len();
        segments.push(Segment::new(start / HOP, (start + wave.len() - 1) / HOP, class));
    }
    let sound_rms = (sound_power / sound_len.max(1) as f64).sqrt() as f32;
    let snr = rng.random_range(spec.snr_db[0]..=spec.snr_db[1]);
    // white floor, so it does not look like the pink background aggressor
    let floor: Vec<f32> = (0..total).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    add_scaled(&mut samples, &floor, sound_rms / 10f32.powf(snr / 20.0));
    limit(&mut samples);
    let frames = num_frames(total);
    segments.retain(|s| s.end < frames);
    Ok((AudioClip::new(samples, SAMPLE_RATE)?, segments))
}

fn render_sound(sound: SynthSound, freq: f32, dur_ms: f32, amp: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = ((dur_ms / 1000.0) * SR).round().max(16.0) as usize;
    let mut out = vec![0f32; n];
    match sound {
        SynthSound::Click => {
            let f = 2800.0 * freq;
            let decay = 0.0015 * SR;
            let spacing = (0.008 * SR) as usize;
            let mut p = 0;
            while p < n {
                let a = rng.random_range(0.8..=1.0);
                for i in p..n.min(p + spacing) {
                    let k = (i - p) as f32;
                    out[i] += a * (-k / decay).exp() * (2.0 * PI * f * k / SR).sin();
                }
                p += spacing;
            }
            envelope(&mut out, 0.001, 0.003);
        }
        SynthSound::Pop => {
            let f = 90.0 * freq;
            let mut noise: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            Biquad::lowpass(300.0 * freq, 0.707).run(&mut noise);
            let nr = rms(&noise).max(1e-9);
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f32 / SR;
                *o = (2.0 * PI * f * t).sin() * (-t / 0.04).exp() + 0.5 * noise[i] / nr;
            }
            envelope(&mut out, 0.002, 0.01);
        }
        SynthSound::Tone { hz } => {
            let f = hz * freq;
            let phase: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
            for (i, o) in out.iter_mut().enumerate() {
                let t = i as f32 / SR;
                *o = (2.0 * PI * f * t + phase[0]).sin()
                    + 0.5 * (4.0 * PI * f * t + phase[1]).sin()
                    + 0.25 * (6.0 * PI * f * t + phase[2]).sin();
            }
            envelope(&mut out, 0.01, 0.01);
        }
        SynthSound::Hiss => {
            for o in out.iter_mut() {
                *o = rng.random_range(-1.0..=1.0);
            }
            let cut = (4000.0 * freq).min(0.45 * SR);
            Biquad::highpass(cut, 0.707).run(&mut out);
            Biquad::highpass(cut, 0.707).run(&mut out);
            envelope(&mut out, 0.01, 0.01);
        }
    }
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-9);
    for v in &mut out {
        *v *= amp / peak;
    }
    out
}

/// Aggressor `kind`: 0 pink noise, 1 babble, 2 chirps over a pink bed.
pub fn aggressor_clip(spec: &SynthSpec, kind: u64, seed: u64, speaker: u32) -> Result<LabeledClip> {
    let n = (spec.aggressor_s * SR) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = rng.random_range(0.03..=0.15);
    let (mut samples, label) = match kind {
        0 => (pink_noise(n, &mut rng), BACKGROUND),
        1 => (babble(n, &mut rng), SPEECH),
        _ => (chirps(n, &mut rng), BACKGROUND),
    };
    let r = rms(&samples).max(1e-9);
    for v in &mut samples {
        *v *= level / r;
    }
    limit(&mut samples);
    LabeledClip::whole(AudioClip::new(samples, SAMPLE_RATE)?, label, speaker)
}

/// A user whose sounds are rendered with the frequency shift applied:
/// enrollment and held-out clips per class, drawn with different seeds.
pub struct ShiftedUser {
    pub user: u32,
    pub voice: Voice,
    pub enrollment: Vec<LabeledClip>,
    pub heldout: Vec<LabeledClip>,
}

pub fn shifted_user(spec: &SynthSpec, user: u32) -> Result<ShiftedUser> {
    spec.validate()?;
    let voice = user_voice(spec, user, true);
    let mut enrollment = Vec::new();
    let mut heldout = Vec::new();
    for class in 0..spec.sounds.len() {
        let reps = spec.repetitions;
        enrollment.push(sound_clip(spec, class, voice, reps, user, derive(spec.seed, 5, user as u64, class as u64))?);
        heldout.push(sound_clip(spec, class, voice, reps, user, derive(spec.seed, 6, user as u64, class as u64))?);
    }
    Ok(ShiftedUser { user, voice, enrollment, heldout })
}

/// Writes `train/`, `eval/`, `aggressors/` and `noise/`, each holding WAV
/// files and a `labels.jsonl`.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (name, clips) in [
        ("train", &corpus.train),
        ("eval", &corpus.eval),
        ("aggressors", &corpus.aggressors),
        ("noise", &corpus.noise),
    ] {
        write_clips(clips, &corpus.classes, dir.join(name), name)?;
    }
    Ok(())
}

pub fn write_clips(clips: &[LabeledClip], classes: &ClassSet, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let class = match c.kind {
            ClipKind::Sound(k) => k,
            ClipKind::Background => BACKGROUND,
            ClipKind::Speech => SPEECH,
        };
        let file = format!("{prefix}_{i:04}_{}.wav", classes.name(class));
        c.clip.write_wav(dir.join(&file))?;
        let mut r = LabelRecord::new(file, classes.name(class), &c.segments);
        r.speaker = Some(c.speaker);
        records.push(r);
    }
    write_label_file(dir.join("labels.jsonl"), &records)
}

fn rng_for(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, a, b))
}

/// splitmix64 over the inputs.
pub fn derive(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed;
    for v in [tag, a, b] {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(v);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn rms(x: &[f32]) -> f32 {
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64).sqrt() as f32
}

fn add_scaled(dst: &mut [f32], src: &[f32], target_rms: f32) {
    let r = rms(src).max(1e-9);
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * target_rms / r;
    }
}

fn limit(x: &mut [f32]) {
    let peak = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        for v in x.iter_mut() {
            *v *= 0.99 / peak;
        }
    }
}

/// Raised-cosine fade in and out, times in seconds.
fn envelope(x: &mut [f32], attack: f32, release: f32) {
    let n = x.len();
    let a = ((attack * SR) as usize).clamp(1, n / 2);
    let r = ((release * SR) as usize).clamp(1, n / 2);
    for i in 0..a {
        x[i] *= 0.5 - 0.5 * (PI * i as f32 / a as f32).cos();
    }
    for i in 0..r {
        x[n - 1 - i] *= 0.5 - 0.5 * (PI * i as f32 / r as f32).cos();
    }
}

/// White noise through a three-pole pinking filter (Kellet's economy
/// coefficients).
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (mut b0, mut b1, mut b2) = (0f32, 0f32, 0f32);
    (0..n)
        .map(|_| {
            let w: f32 = rng.random_range(-1.0..=1.0);
            b0 = 0.99765 * b0 + w * 0.099_046;
            b1 = 0.96300 * b1 + w * 0.296_516_4;
            b2 = 0.57000 * b2 + w * 1.052_691_3;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

/// Several talkers: pulse trains through moving formant filters, gated by
/// syllable-rate envelopes.
fn babble(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0f32; n];
    let talkers = rng.random_range(3..=5);
    for _ in 0..talkers {
        let f0 = rng.random_range(90.0..220.0f32);
        let gain = rng.random_range(0.5..=1.0);
        let mut pos = 0usize;
        let mut phase = 0f32;
        while pos < n {
            let syl = ((rng.random_range(0.12..0.3f32)) * SR) as usize;
            let len = syl.min(n - pos);
            let pause = rng.random_bool(0.2);
            if !pause {
                let mut src = vec![0f32; len];
                let pitch = f0 * rng.random_range(0.85..1.15f32);
                for (i, s) in src.iter_mut().enumerate() {
                    phase += pitch / SR;
                    if phase >= 1.0 {
                        phase -= 1.0;
                        *s = 1.0;
                    }
                    *s += 0.05 * rng.random_range(-1.0..=1.0f32);
                    let _ = i;
                }
                let formants = [
                    rng.random_range(300.0..900.0),
                    rng.random_range(900.0..2500.0),
                    rng.random_range(2500.0..3500.0),
                ];
                let mut voiced = vec![0f32; len];
                for (k, &f) in formants.iter().enumerate() {
                    let mut band = src.clone();
                    Biquad::bandpass(f, 6.0).run(&mut band);
                    let g = [1.0, 0.6, 0.3][k];
                    for (v, b) in voiced.iter_mut().zip(&band) {
                        *v += g * b;
                    }
                }
                for (i, v) in voiced.iter().enumerate() {
                    let env = (PI * i as f32 / len as f32).sin().powi(2);
                    out[pos + i] += gain * env * v;
                }
            }
            pos += len;
        }
    }
    out
}

/// Log sweeps of random range and length over a quiet pink bed.
fn chirps(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = pink_noise(n, rng);
    let bed = rms(&out).max(1e-9);
    for v in &mut out {
        *v *= 0.1 / bed;
    }
    let mut pos = (rng.random_range(0.05..0.3f32) * SR) as usize;
    while pos < n {
        let len = ((rng.random_range(0.08..0.4f32)) * SR) as usize;
        let f_a: f32 = rng.random_range(150.0..3000.0);
        let f_b: f32 = rng.random_range(150.0..4000.0);
        let amp = rng.random_range(0.5..=1.0f32);
        let mut phase = 0f32;
        let len = len.min(n - pos);
        let mut sweep = vec![0f32; len];
        for (i, s) in sweep.iter_mut().enumerate() {
            let f = f_a * (f_b / f_a).powf(i as f32 / len as f32);
            phase += 2.0 * PI * f / SR;
            *s = amp * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
        envelope(&mut sweep, 0.005, 0.005);
        for (o, s) in out[pos..].iter_mut().zip(&sweep) {
            *o += s;
        }
        pos += len + ((rng.random_range(0.05..0.5f32)) * SR) as usize;
    }
    out
}

/// Direct-form I biquad with RBJ cookbook coefficients.
struct Biquad {
    b: [f32; 3],
    a: [f32; 2],
}

impl Biquad {
    fn new(b: [f32; 3], a0: f32, a: [f32; 2]) -> Self {
        Self { b: b.map(|v| v / a0), a: a.map(|v| v / a0) }
    }

    fn parts(f: f32, q: f32) -> (f32, f32) {
        let w = 2.0 * PI * f / SR;
        (w.cos(), w.sin() / (2.0 * q))
    }

    fn lowpass(f: f32, q: f32) -> Self {
        let (c, alpha) = Self::parts(f, q);
        Self::new([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    fn highpass(f: f32, q: f32) -> Self {
        let (c, alpha) = Self::parts(f, q);
        Self::new([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    /// Constant 0 dB peak gain.
    fn bandpass(f: f32, q: f32) -> Self {
        let (c, alpha) = Self::parts(f, q);
        Self::new([alpha, 0.0, -alpha], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    fn run(&self, x: &mut [f32]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0f32, 0f32, 0f32, 0f32);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}
