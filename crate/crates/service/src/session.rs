use std::sync::Arc;

use log::{debug, info};
use tokio::sync::mpsc;

use nvsd::annotate::{LabeledClip, Segment, DEFAULT_INFLATE};
use nvsd::audio::{AudioClip, SAMPLE_RATE};
use nvsd::classes::{BACKGROUND, NUM_CLASSES, NUM_SOUNDS, SPEECH};
use nvsd::events::{process, PostProcConfig};
use nvsd::frontend::{FRAME_MS, WINDOW};
use nvsd::linalg::Matrix;
use nvsd::metrics::{segmental_score, ClipResult, DEFAULT_TOLERANCE};
use nvsd::personalize::{fit_head, NegativePool, PersonalizeConfig};
use nvsd::pipeline::Detector;
use nvsd::tcn::{forward, FrameProbs, ModelWeights};

use crate::protocol::{decode_audio, ClassProb, ClientMessage, ServerMessage, ENROLL_AUDIO};
use crate::AppState;

/// Frames per display summary (100 Hz down to 10 Hz).
pub const SUMMARY_FRAMES: usize = 10;
const TOP_K: usize = 3;
const MAX_ENROLL_SAMPLES: usize = 60 * SAMPLE_RATE as usize;

/// Outgoing queues. Events and replies are never dropped; summaries are
/// dropped when the client does not keep up.
pub struct Outbox {
    pub reliable: mpsc::UnboundedSender<ServerMessage>,
    pub summaries: mpsc::Sender<ServerMessage>,
    pub dropped: u64,
}

impl Outbox {
    fn send(&self, m: ServerMessage) {
        // the writer only goes away once the connection is gone
        let _ = self.reliable.send(m);
    }

    fn summary(&mut self, m: ServerMessage) {
        if self.summaries.try_send(m).is_err() {
            self.dropped += 1;
        }
    }
}

#[derive(Debug, PartialEq)]
pub enum Flow {
    Continue,
    Close,
}

struct Pending {
    class: usize,
    shots: usize,
    pcm: Vec<i16>,
}

pub struct Session {
    pub id: u64,
    state: Arc<AppState>,
    out: Outbox,
    detector: Option<Detector>,
    enrolling: Option<Pending>,
    window: [f32; NUM_CLASSES],
}

impl Session {
    pub fn new(id: u64, state: Arc<AppState>, out: Outbox) -> Self {
        Self { id, state, out, detector: None, enrolling: None, window: [0.0; NUM_CLASSES] }
    }

    pub fn dropped_summaries(&self) -> u64 {
        self.out.dropped
    }

    fn fatal(&self, code: &str, message: impl Into<String>) -> Flow {
        self.out.send(ServerMessage::error(code, message, true));
        Flow::Close
    }

    fn reject(&self, code: &str, message: impl Into<String>) -> Flow {
        self.out.send(ServerMessage::error(code, message, false));
        Flow::Continue
    }

    pub async fn on_text(&mut self, text: &str) -> Flow {
        let msg: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return self.fatal("malformed", format!("bad control message: {e}")),
        };
        let Some(detector) = self.detector.as_mut() else {
            return match msg {
                ClientMessage::Hello { format, sample_rate, channels } => self.hello(&format, sample_rate, channels),
                _ => self.fatal("no_hello", "the first message must be hello"),
            };
        };
        match msg {
            ClientMessage::Hello { .. } => self.reject("duplicate_hello", "session already started"),
            ClientMessage::Config { class, theta, tau, active, theta_bg, refractory } => {
                let mut cfg = detector.postproc().clone();
                if let Some(name) = class {
                    let Some(c) = sound_index(&self.state.weights, &name) else {
                        return self.reject("bad_config", format!("unknown sound class {name:?}"));
                    };
                    if let Some(t) = theta {
                        cfg.theta[c] = t;
                    }
                    if let Some(t) = tau {
                        cfg.tau[c] = t;
                    }
                    if let Some(a) = active {
                        cfg.active[c] = a;
                    }
                } else if theta.is_some() || tau.is_some() || active.is_some() {
                    return self.reject("bad_config", "theta, tau and active need a class");
                }
                if let Some(v) = theta_bg {
                    cfg.theta_bg = v;
                }
                if let Some(v) = refractory {
                    cfg.refractory = v;
                }
                self.apply_config(cfg)
            }
            ClientMessage::ConfigReset => self.apply_config(self.state.config.postproc.clone()),
            ClientMessage::EnrollStart { class, shots } => {
                let Some(c) = sound_index(&self.state.weights, &class) else {
                    return self.reject("bad_enrollment", format!("unknown sound class {class:?}"));
                };
                if !(1..=5).contains(&shots) {
                    return self.reject("bad_enrollment", format!("shots must be 1 to 5, got {shots}"));
                }
                self.enrolling = Some(Pending { class: c, shots, pcm: Vec::new() });
                self.out.send(ServerMessage::EnrollStarted { class, shots });
                Flow::Continue
            }
            ClientMessage::EnrollCancel => {
                self.enrolling = None;
                self.out.send(ServerMessage::EnrollCancelled);
                Flow::Continue
            }
            ClientMessage::EnrollFinish => self.finish_enrollment().await,
        }
    }

    fn hello(&mut self, format: &str, sample_rate: u32, channels: u16) -> Flow {
        if format != "pcm_s16le" || sample_rate != SAMPLE_RATE || channels != 1 {
            return self.fatal(
                "bad_format",
                format!("expected pcm_s16le, {SAMPLE_RATE} Hz, mono; got {format}, {sample_rate} Hz, {channels} channels"),
            );
        }
        let detector = Detector::new(self.state.weights.clone(), self.state.config.postproc.clone())
            .expect("service postproc config is validated at startup");
        self.out.send(ServerMessage::Ready {
            session: self.id,
            model_version: self.state.model_version.clone(),
            classes: self.state.weights.classes.names().to_vec(),
            postproc: detector.postproc().clone(),
            summary_hz: (1000.0 / (FRAME_MS * SUMMARY_FRAMES as f64)).round() as u32,
        });
        self.detector = Some(detector);
        Flow::Continue
    }

    fn apply_config(&mut self, cfg: PostProcConfig) -> Flow {
        let detector = self.detector.as_mut().expect("called after hello");
        if let Err(e) = detector.set_postproc(cfg) {
            return self.reject("bad_config", e.to_string());
        }
        self.out.send(ServerMessage::ConfigAck {
            postproc: detector.postproc().clone(),
            effective_from_ms: frame_ms(detector.frames()),
        });
        Flow::Continue
    }

    pub fn on_binary(&mut self, frame: &[u8]) -> Flow {
        let (kind, pcm) = match decode_audio(frame) {
            Ok(v) => v,
            Err(e) => return self.fatal("malformed", e.to_string()),
        };
        if self.detector.is_none() {
            return self.fatal("no_hello", "audio before hello");
        }
        if kind == ENROLL_AUDIO {
            let Some(p) = self.enrolling.as_mut() else {
                return self.reject("not_enrolling", "enrollment audio outside an enrollment");
            };
            if p.pcm.len() + pcm.len() > MAX_ENROLL_SAMPLES {
                self.enrolling = None;
                return self.reject("enrollment_too_long", "enrollment recordings are limited to 60 s");
            }
            p.pcm.extend_from_slice(&pcm);
            return Flow::Continue;
        }
        let detector = self.detector.as_mut().unwrap();
        let det = match detector.push_pcm16(&pcm) {
            Ok(d) => d,
            Err(e) => return self.fatal("internal", e.to_string()),
        };
        let names = self.state.weights.classes.names();
        for e in &det.events {
            self.out.send(ServerMessage::Event { class: names[e.class].clone(), class_index: e.class, t_ms: e.time_ms() });
        }
        for i in 0..det.probs.num_frames() {
            for (w, &p) in self.window.iter_mut().zip(det.probs.row(i)) {
                *w = w.max(p);
            }
            let frame = det.first_frame + i;
            if (frame + 1) % SUMMARY_FRAMES == 0 {
                let summary = summarize(&self.window, names, frame_ms(frame));
                self.out.summary(summary);
                self.window = [0.0; NUM_CLASSES];
            }
        }
        Flow::Continue
    }

    async fn finish_enrollment(&mut self) -> Flow {
        let Some(p) = self.enrolling.take() else {
            return self.reject("not_enrolling", "no enrollment in progress");
        };
        let detector = self.detector.as_ref().unwrap();
        let job = EnrollJob {
            weights: detector.weights().clone(),
            negatives: self.state.negatives.clone(),
            cfg: self.state.config.personalize.clone(),
            postproc: detector.postproc().clone(),
            class: p.class,
            shots: p.shots,
            pcm: p.pcm,
        };
        let outcome = match tokio::task::spawn_blocking(move || job.run()).await {
            Ok(r) => r,
            Err(e) => return self.fatal("internal", format!("enrollment task failed: {e}")),
        };
        match outcome {
            Ok(done) => {
                let name = self.state.weights.classes.name(p.class).to_string();
                info!("session {}: enrolled {name} with {} shots", self.id, done.shots_used);
                let detector = self.detector.as_mut().unwrap();
                detector.replace_weights(Arc::new(done.weights)).expect("same spec");
                self.out.send(ServerMessage::Enrolled {
                    class: name,
                    segments_found: done.segments_found,
                    shots_used: done.shots_used,
                    f1_before: done.f1_before,
                    f1_after: done.f1_after,
                });
                Flow::Continue
            }
            Err(msg) => {
                debug!("session {}: enrollment failed: {msg}", self.id);
                self.reject("enrollment_failed", msg)
            }
        }
    }
}

fn frame_ms(frame: usize) -> u64 {
    (frame as f64 * FRAME_MS).round() as u64
}

fn sound_index(weights: &ModelWeights, name: &str) -> Option<usize> {
    weights.classes.index_of(name).ok().filter(|&c| c < NUM_SOUNDS)
}

fn summarize(window: &[f32; NUM_CLASSES], names: &[String], t_ms: u64) -> ServerMessage {
    let mut order: Vec<usize> = (0..NUM_SOUNDS).collect();
    order.sort_by(|&a, &b| window[b].total_cmp(&window[a]).then(a.cmp(&b)));
    ServerMessage::Summary {
        t_ms,
        top_k: order[..TOP_K].iter().map(|&c| ClassProb { class: names[c].clone(), p: window[c] }).collect(),
        p_background: window[BACKGROUND],
        p_speech: window[SPEECH],
    }
}

struct EnrollJob {
    weights: Arc<ModelWeights>,
    negatives: Arc<NegativePool>,
    cfg: PersonalizeConfig,
    postproc: PostProcConfig,
    class: usize,
    shots: usize,
    pcm: Vec<i16>,
}

struct EnrollDone {
    weights: ModelWeights,
    segments_found: usize,
    shots_used: usize,
    f1_before: Option<f64>,
    f1_after: Option<f64>,
}

impl EnrollJob {
    /// Energy-segments the recording, fits the class's head row on the
    /// first shots and scores both heads on what follows them.
    fn run(self) -> Result<EnrollDone, String> {
        const GUIDANCE: &str = "no sound detected, try louder or closer to the microphone";
        if self.pcm.len() < WINDOW {
            return Err(format!("recording too short; {GUIDANCE}"));
        }
        let clip = AudioClip::from_pcm16(&self.pcm);
        let labeled = LabeledClip::annotate_sound(clip, self.class, DEFAULT_INFLATE, 0).map_err(|e| e.to_string())?;
        let found = labeled.segments.len();
        if found == 0 {
            return Err(GUIDANCE.to_string());
        }
        let used = self.shots.min(found);
        let personalized = fit_head(
            &self.weights,
            std::slice::from_ref(&labeled),
            &[self.class],
            used,
            &self.negatives,
            &self.cfg,
        )
        .map_err(|e| format!("{e}; {GUIDANCE}"))?;

        let cut = labeled.segments[used - 1].end + self.cfg.inflate + 1;
        let rest: Vec<Segment> = labeled
            .segments
            .iter()
            .filter(|s| s.start >= cut)
            .map(|s| Segment::new(s.start - cut, s.end - cut, s.label))
            .collect();
        let (mut f1_before, mut f1_after) = (None, None);
        if !rest.is_empty() && cut < labeled.num_frames() {
            let score = |w: &ModelWeights| -> Result<Option<f64>, String> {
                let (probs, _) = forward(w, &labeled.feats).map_err(|e| e.to_string())?;
                let tail = FrameProbs(Matrix::slice_rows(probs.matrix(), cut, probs.num_frames()));
                let events = process(&tail, &self.postproc.one_active(self.class)).map_err(|e| e.to_string())?;
                let report = segmental_score(&[ClipResult { events: &events, segments: &rest }], DEFAULT_TOLERANCE)
                    .map_err(|e| e.to_string())?;
                Ok(Some(report.f1(self.class).unwrap_or(0.0)))
            };
            f1_before = score(&self.weights)?;
            f1_after = score(&personalized)?;
        }
        Ok(EnrollDone { weights: personalized, segments_found: found, shots_used: used, f1_before, f1_after })
    }
}
