//! Segmental scoring, false positives per hour and detection latency.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotate::Segment;
use crate::classes::{ClassSet, NUM_SOUNDS};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::frontend::FRAME_MS;

/// Default matching slack beyond segment bounds, in frames.
pub const DEFAULT_TOLERANCE: usize = 13;
/// Confusion column for truth segments with no event at all.
pub const MISSED: usize = NUM_SOUNDS;

/// Events and truth segments of one clip.
#[derive(Debug, Clone, Copy)]
pub struct ClipResult<'a> {
    pub events: &'a [Event],
    pub segments: &'a [Segment],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when there were no events (0/0).
    pub precision: Option<f64>,
    /// `None` when there were no truth segments.
    pub recall: Option<f64>,
    /// `None` when there were neither events nor segments.
    pub f1: Option<f64>,
}

impl ClassScore {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpRate {
    pub overall: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tolerance: usize,
    pub per_class: Vec<ClassScore>,
    /// Pooled over all classes.
    pub overall: ClassScore,
    /// Mean F1 over classes that have truth segments.
    pub macro_f1: Option<f64>,
    /// `confusion[truth][predicted]`, last column = missed.
    pub confusion: Vec<Vec<usize>>,
    pub latency: Option<LatencyStats>,
    /// Signed latency of every true positive, in ms.
    #[serde(skip)]
    pub latencies_ms: Vec<f64>,
    pub fp_per_hour: Option<FpRate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl EvalReport {
    pub fn with_fp_rate(mut self, rate: FpRate) -> Self {
        self.fp_per_hour = Some(rate);
        self
    }

    pub fn with_class_names(mut self, classes: &ClassSet) -> Self {
        self.class_names = Some(classes.names()[..NUM_SOUNDS].to_vec());
        self
    }

    pub fn f1(&self, class: usize) -> Option<f64> {
        self.per_class[class].f1
    }

    /// Classes with at least one truth segment.
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_SOUNDS).filter(|&c| self.per_class[c].tp + self.per_class[c].fn_ > 0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-user success criterion: F1 of at least 0.5.
pub fn success(f1: Option<f64>) -> bool {
    f1.is_some_and(|f| f >= 0.5)
}

fn check_disjoint(clip: usize, segments: &[Segment]) -> Result<Vec<Segment>> {
    let mut sorted: Vec<Segment> = segments.iter().copied().filter(|s| s.label < NUM_SOUNDS).collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start <= w[0].end {
            return Err(Error::OverlappingSegments {
                clip,
                a_start: w[0].start,
                a_end: w[0].end,
                b_start: w[1].start,
                b_end: w[1].end,
            });
        }
    }
    Ok(sorted)
}

/// Scores events against truth segments clip by clip.
///
/// Each segment, in time order, claims the earliest unclaimed event of its
/// class inside `[start - tolerance, end + tolerance]`. Unclaimed events are
/// false positives. Segments labeled background or speech are ignored.
pub fn segmental_score(clips: &[ClipResult<'_>], tolerance: usize) -> Result<EvalReport> {
    let mut tp = [0usize; NUM_SOUNDS];
    let mut fp = [0usize; NUM_SOUNDS];
    let mut fn_ = [0usize; NUM_SOUNDS];
    let mut confusion = vec![vec![0usize; NUM_SOUNDS + 1]; NUM_SOUNDS];
    let mut latencies = Vec::new();

    for (ci, clip) in clips.iter().enumerate() {
        let segments = check_disjoint(ci, clip.segments)?;
        let mut claimed = vec![false; clip.events.len()];
        for seg in &segments {
            let lo = seg.start.saturating_sub(tolerance);
            let hi = seg.end.saturating_add(tolerance);
            let in_window = |e: &Event| (lo..=hi).contains(&e.frame);
            let hit = clip
                .events
                .iter()
                .enumerate()
                .find(|(i, e)| !claimed[*i] && e.class == seg.label && in_window(e));
            match hit {
                Some((i, e)) => {
                    claimed[i] = true;
                    tp[seg.label] += 1;
                    confusion[seg.label][seg.label] += 1;
                    latencies.push((e.frame as f64 - seg.end as f64) * FRAME_MS as f64);
                }
                None => {
                    fn_[seg.label] += 1;
                    let wrong = clip.events.iter().find(|e| e.class != seg.label && in_window(e));
                    confusion[seg.label][wrong.map_or(MISSED, |e| e.class)] += 1;
                }
            }
        }
        for (e, _) in clip.events.iter().zip(&claimed).filter(|(_, &c)| !c) {
            fp[e.class] += 1;
        }
    }

    let per_class: Vec<ClassScore> = (0..NUM_SOUNDS).map(|c| ClassScore::from_counts(tp[c], fp[c], fn_[c])).collect();
    let overall = ClassScore::from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let present: Vec<f64> = (0..NUM_SOUNDS)
        .filter(|&c| tp[c] + fn_[c] > 0)
        .map(|c| per_class[c].f1.unwrap_or(0.0))
        .collect();
    let macro_f1 = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(EvalReport {
        tolerance,
        per_class,
        overall,
        macro_f1,
        confusion,
        latency: latency_stats(&latencies),
        latencies_ms: latencies,
        fp_per_hour: None,
        class_names: None,
    })
}

/// Events per hour of audio, overall and per sound class.
pub fn fp_per_hour(events: &[Event], duration_s: f64) -> Result<FpRate> {
    if !(duration_s > 0.0) {
        return Err(Error::ZeroDuration);
    }
    let mut per_class = vec![0.0; NUM_SOUNDS];
    for e in events {
        per_class[e.class] += 1.0;
    }
    for r in &mut per_class {
        *r *= 3600.0 / duration_s;
    }
    Ok(FpRate { overall: 3600.0 * events.len() as f64 / duration_s, per_class })
}

/// Mean and population standard deviation; `None` for an empty list.
pub fn latency_stats(latencies_ms: &[f64]) -> Option<LatencyStats> {
    if latencies_ms.is_empty() {
        return None;
    }
    let n = latencies_ms.len() as f64;
    let mean = latencies_ms.iter().sum::<f64>() / n;
    let var = latencies_ms.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Some(LatencyStats { mean_ms: mean, std_ms: var.sqrt(), count: latencies_ms.len() })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        writeln!(f, "{:<10} {:>5} {:>5} {:>5} {:>9} {:>7} {:>6}", "class", "tp", "fp", "fn", "precision", "recall", "f1")?;
        for (c, s) in self.per_class.iter().enumerate() {
            if s.tp + s.fp + s.fn_ == 0 {
                continue;
            }
            let name = self.class_names.as_ref().map_or_else(|| c.to_string(), |n| n[c].clone());
            writeln!(
                f,
                "{:<10} {:>5} {:>5} {:>5} {:>9} {:>7} {:>6}",
                name,
                s.tp,
                s.fp,
                s.fn_,
                opt(s.precision),
                opt(s.recall),
                opt(s.f1)
            )?;
        }
        let o = &self.overall;
        writeln!(
            f,
            "{:<10} {:>5} {:>5} {:>5} {:>9} {:>7} {:>6}",
            "overall",
            o.tp,
            o.fp,
            o.fn_,
            opt(o.precision),
            opt(o.recall),
            opt(o.f1)
        )?;
        writeln!(f, "macro f1: {}", opt(self.macro_f1))?;
        if let Some(l) = &self.latency {
            writeln!(f, "latency: {:.1} +/- {:.1} ms over {} detections", l.mean_ms, l.std_ms, l.count)?;
        }
        if let Some(r) = &self.fp_per_hour {
            writeln!(f, "false positives per hour: {:.2}", r.overall)?;
        }
        Ok(())
    }
}
