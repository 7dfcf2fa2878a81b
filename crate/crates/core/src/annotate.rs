//! Frame labels from energy segmentation, and the pseudo-label audit that
//! flags clips whose vocalization does not match their given label.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::classes::{ClassSet, BACKGROUND, NUM_CLASSES, NUM_SOUNDS, SPEECH};
use crate::error::{Error, Result};
use crate::frontend::{compute_features, num_frames, FeatureMatrix, HOP, WINDOW};
use crate::linalg::Matrix;
use crate::tcn::{forward, ModelWeights};

/// Energy-derived segments shorter than this are discarded (30 ms).
pub const MIN_SEGMENT_FRAMES: usize = 3;
/// Boundary inflation applied to training labels: half the 25-frame
/// receptive field, rounded up.
pub const DEFAULT_INFLATE: usize = 13;

/// Inclusive frame range carrying one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize, label: usize) -> Self {
        debug_assert!(end >= start);
        Self { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    Sound(usize),
    Background,
    Speech,
}

/// Audio with features, segments and the T×17 training target.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip: AudioClip,
    pub feats: FeatureMatrix,
    pub segments: Vec<Segment>,
    pub frame_labels: Matrix<f32>,
    pub kind: ClipKind,
    /// Speaker (or synthetic user) id, used for held-out splits.
    pub speaker: u32,
}

impl LabeledClip {
    /// Sound clip with the given segments rendered after `inflate`.
    pub fn sound(clip: AudioClip, class: usize, segments: Vec<Segment>, inflate: usize, speaker: u32) -> Result<Self> {
        let feats = compute_features(&clip)?;
        let frame_labels = render_frame_labels(&segments, feats.num_frames(), inflate);
        Ok(Self {
            clip,
            feats,
            segments,
            frame_labels,
            kind: ClipKind::Sound(class),
            speaker,
        })
    }

    /// Sound clip annotated by [`energy_segment`].
    pub fn annotate_sound(clip: AudioClip, class: usize, inflate: usize, speaker: u32) -> Result<Self> {
        let segments = energy_segment(&clip, class)?;
        Self::sound(clip, class, segments, inflate, speaker)
    }

    /// Background aggressor: every frame is class 15.
    pub fn background(clip: AudioClip, speaker: u32) -> Result<Self> {
        Self::whole(clip, BACKGROUND, speaker)
    }

    /// Aggressor clip with every frame labeled `class` (background or
    /// speech).
    pub fn whole(clip: AudioClip, class: usize, speaker: u32) -> Result<Self> {
        let feats = compute_features(&clip)?;
        let t = feats.num_frames();
        let segments = if t > 0 { vec![Segment::new(0, t - 1, class)] } else { vec![] };
        Self::with_kind(clip, feats, segments, 0, speaker)
    }

    /// Clip with explicit segments; the kind follows from their labels.
    pub fn from_segments(clip: AudioClip, segments: Vec<Segment>, inflate: usize, speaker: u32) -> Result<Self> {
        let feats = compute_features(&clip)?;
        Self::with_kind(clip, feats, segments, inflate, speaker)
    }

    fn with_kind(clip: AudioClip, feats: FeatureMatrix, segments: Vec<Segment>, inflate: usize, speaker: u32) -> Result<Self> {
        let kind = match segments.first().map(|s| s.label) {
            Some(BACKGROUND) => ClipKind::Background,
            Some(SPEECH) => ClipKind::Speech,
            Some(c) => ClipKind::Sound(c),
            None => return Err(Error::Config("clip has no segments to derive its kind from".into())),
        };
        if segments.iter().any(|s| s.label >= NUM_CLASSES) {
            return Err(Error::Config("segment label out of range".into()));
        }
        let frame_labels = render_frame_labels(&segments, feats.num_frames(), inflate);
        Ok(Self { clip, feats, segments, frame_labels, kind, speaker })
    }

    /// Speech aggressor: frames found active by the energy detector are
    /// class 16, the rest silence.
    pub fn speech(clip: AudioClip, inflate: usize, speaker: u32) -> Result<Self> {
        let segments = energy_segment(&clip, SPEECH)?;
        let feats = compute_features(&clip)?;
        let frame_labels = render_frame_labels(&segments, feats.num_frames(), inflate);
        Ok(Self {
            clip,
            feats,
            segments,
            frame_labels,
            kind: ClipKind::Speech,
            speaker,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.feats.num_frames()
    }

    pub fn sound_class(&self) -> Option<usize> {
        match self.kind {
            ClipKind::Sound(c) => Some(c),
            _ => None,
        }
    }

    /// Relabels a sound clip (segments and targets) as `class`.
    pub fn relabel(&mut self, class: usize, inflate: usize) {
        self.kind = ClipKind::Sound(class);
        for s in &mut self.segments {
            s.label = class;
        }
        self.frame_labels = render_frame_labels(&self.segments, self.num_frames(), inflate);
    }
}

/// RMS amplitude of the 10 ms hop starting each feature frame. Hops do not
/// overlap, so a run of `n` frames spans `n * 10` ms of audio.
pub fn frame_rms(samples: &[f32]) -> Vec<f64> {
    (0..num_frames(samples.len()))
        .map(|t| {
            let w = &samples[t * HOP..(t + 1) * HOP];
            (w.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / HOP as f64).sqrt()
        })
        .collect()
}

/// Runs of frames whose RMS exceeds the clip mean by more than one
/// standard deviation, at least [`MIN_SEGMENT_FRAMES`] long.
pub fn energy_segment(clip: &AudioClip, label: usize) -> Result<Vec<Segment>> {
    if clip.len() < WINDOW {
        return Err(Error::TooShort { got: clip.len(), need: WINDOW });
    }
    let rms = frame_rms(clip.samples());
    Ok(threshold_runs(&rms, label))
}

pub(crate) fn threshold_runs(energy: &[f64], label: usize) -> Vec<Segment> {
    let n = energy.len() as f64;
    let (lo, hi) = energy
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if energy.is_empty() || lo == hi {
        return Vec::new();
    }
    let mean = energy.iter().sum::<f64>() / n;
    let std = (energy.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + std;

    let mut out = Vec::new();
    let mut start = None;
    for (t, &e) in energy.iter().enumerate() {
        match (e > threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= MIN_SEGMENT_FRAMES {
                    out.push(Segment::new(s, t - 1, label));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if energy.len() - s >= MIN_SEGMENT_FRAMES {
            out.push(Segment::new(s, energy.len() - 1, label));
        }
    }
    out
}

/// T×17 one-hot targets. Each segment is widened by `inflate` frames on
/// both sides and clipped to `[0, frames)`. Where segments of different
/// classes overlap, the earlier segment in the list keeps the frame.
pub fn render_frame_labels(segments: &[Segment], frames: usize, inflate: usize) -> Matrix<f32> {
    let mut labels = Matrix::zeros(frames, NUM_CLASSES);
    if frames == 0 {
        return labels;
    }
    for s in segments {
        if s.start >= frames {
            continue;
        }
        let lo = s.start.saturating_sub(inflate);
        let hi = (s.end + inflate).min(frames - 1);
        for t in lo..=hi {
            let row = labels.row_mut(t);
            if row.iter().all(|&v| v == 0.0) {
                row[s.label] = 1.0;
            }
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub clip: usize,
    pub given: usize,
    pub predicted: usize,
    pub confidence: f32,
    pub flagged: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    /// All audited clips, most confident first.
    pub entries: Vec<AuditEntry>,
    /// Clips with no segments (or not sound clips), not audited.
    pub skipped: Vec<usize>,
}

impl AuditReport {
    pub fn flagged(&self) -> impl Iterator<Item = &AuditEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Predicts each clip's class as the sound class with the highest mean
/// probability over the clip's segment frames, and flags disagreements with
/// the given label.
pub fn audit_labels(weights: &ModelWeights, clips: &[LabeledClip]) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    for (i, c) in clips.iter().enumerate() {
        let given = match c.kind {
            ClipKind::Sound(g) if !c.segments.is_empty() => g,
            _ => {
                log::info!("audit: skipping clip {i} (no segments)");
                report.skipped.push(i);
                continue;
            }
        };
        let (probs, _) = forward(weights, &c.feats)?;
        let mut sums = [0f64; NUM_SOUNDS];
        let mut n = 0usize;
        for s in &c.segments {
            for t in s.start..=s.end.min(probs.num_frames().saturating_sub(1)) {
                for (k, acc) in sums.iter_mut().enumerate() {
                    *acc += probs.row(t)[k] as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            report.skipped.push(i);
            continue;
        }
        let mut predicted = 0;
        for k in 1..NUM_SOUNDS {
            if sums[k] > sums[predicted] {
                predicted = k;
            }
        }
        report.entries.push(AuditEntry {
            clip: i,
            given,
            predicted,
            confidence: (sums[predicted] / n as f64) as f32,
            flagged: predicted != given,
        });
    }
    report
        .entries
        .sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.clip.cmp(&b.clip)));
    Ok(report)
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub audio_path: String,
    pub class: String,
    pub segments: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<u32>,
}

impl LabelRecord {
    pub fn new(audio_path: impl Into<String>, class: &str, segments: &[Segment]) -> Self {
        Self {
            audio_path: audio_path.into(),
            class: class.to_string(),
            segments: segments.iter().map(|s| [s.start, s.end]).collect(),
            speaker: None,
        }
    }

    pub fn to_segments(&self, classes: &ClassSet) -> Result<Vec<Segment>> {
        let label = classes.index_of(&self.class)?;
        Ok(self
            .segments
            .iter()
            .map(|&[s, e]| Segment::new(s, e.max(s), label))
            .collect())
    }
}

pub fn write_label_file(path: impl AsRef<Path>, records: &[LabelRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Sound classes named in `records`, in order of first appearance.
pub fn infer_class_set(records: &[LabelRecord]) -> Result<ClassSet> {
    let mut sounds: Vec<&str> = Vec::new();
    for r in records {
        if r.class != "background" && r.class != "speech" && !sounds.contains(&r.class.as_str()) {
            sounds.push(&r.class);
        }
    }
    ClassSet::with_sounds(&sounds)
}

/// Loads a directory of WAV files described by its `labels.jsonl`, the
/// layout [`crate::synthbench::write_clips`] produces. Audio paths are
/// relative to `dir`.
pub fn read_labeled_dir(dir: impl AsRef<Path>, classes: &ClassSet, inflate: usize) -> Result<Vec<LabeledClip>> {
    let dir = dir.as_ref();
    let records = read_label_file(dir.join("labels.jsonl"))?;
    records
        .iter()
        .map(|r| {
            let clip = AudioClip::read_wav(dir.join(&r.audio_path))?.with_source(r.audio_path.clone());
            let class = classes.index_of(&r.class)?;
            let speaker = r.speaker.unwrap_or(0);
            let segments = r.to_segments(classes)?;
            if class < NUM_SOUNDS {
                LabeledClip::sound(clip, class, segments, inflate, speaker)
            } else if segments.is_empty() {
                LabeledClip::whole(clip, class, speaker)
            } else {
                LabeledClip::from_segments(clip, segments, inflate, speaker)
            }
        })
        .collect()
}
