use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use nvsd::annotate::Segment;
use nvsd::events::{Event, PostProcConfig};
use nvsd::metrics::{segmental_score, ClipResult, DEFAULT_TOLERANCE};
use nvsd::personalize::NegativePool;
use nvsd::pipeline::detect_clip;
use nvsd::synthbench::{generate_corpus, shifted_user, sound_clip, user_voice, SynthSpec};
use nvsd::tcn::{ModelSpec, ModelWeights};
use nvsd::train::{TrainConfig, Trainer};
use nvsd_service::protocol::{encode_audio, ServerMessage, AUDIO, ENROLL_AUDIO};
use nvsd_service::{serve, AppState, ServiceConfig};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const TONE800: usize = 3;

fn spec() -> SynthSpec {
    SynthSpec { train_users: 6, eval_users: 1, aggressor_clips: 1, noise_clips: 1, aggressor_s: 10.0, ..SynthSpec::default() }
}

/// A small model trained once per test binary.
fn trained() -> &'static (ModelWeights, NegativePool) {
    static MODEL: OnceLock<(ModelWeights, NegativePool)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = generate_corpus(&spec()).unwrap();
        let cfg = TrainConfig { model: ModelSpec::tiny(32, 4, 2), epochs: 20, ..Default::default() };
        let w = Trainer::new(cfg).classes(corpus.classes.clone()).run(&corpus.train, &corpus.aggressors).unwrap().weights;
        let pool = NegativePool::from_clips(&w, &corpus.aggressors).unwrap();
        (w, pool)
    })
}

async fn start(config: ServiceConfig) -> SocketAddr {
    let (w, pool) = tokio::task::spawn_blocking(trained).await.unwrap();
    let state = Arc::new(AppState::new(w.clone(), pool.clone(), config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    addr
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/session")).await.unwrap().0
}

async fn send_json(ws: &mut Ws, v: serde_json::Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

async fn send_audio(ws: &mut Ws, kind: u8, pcm: &[i16]) {
    ws.send(Message::binary(encode_audio(kind, pcm))).await.unwrap();
}

/// Next server message, `None` once the server closed the connection.
async fn recv_any(ws: &mut Ws) -> Option<ServerMessage> {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(120), ws.next()).await.expect("server went quiet");
        match msg {
            Some(Ok(Message::Text(t))) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return None,
            Some(Ok(_)) => {}
        }
    }
}

/// Like [`recv_any`] but skips display summaries.
async fn recv(ws: &mut Ws) -> Option<ServerMessage> {
    loop {
        match recv_any(ws).await {
            Some(ServerMessage::Summary { .. }) => {}
            other => return other,
        }
    }
}

async fn hello(ws: &mut Ws) -> ServerMessage {
    send_json(ws, serde_json::json!({"type": "hello", "format": "pcm_s16le", "sample_rate": 16000, "channels": 1})).await;
    let ready = recv(ws).await.unwrap();
    assert!(matches!(ready, ServerMessage::Ready { .. }), "{ready:?}");
    ready
}

/// Sends an empty config update and collects everything up to its ack.
/// Events are never reordered behind it.
async fn sync(ws: &mut Ws) -> Vec<ServerMessage> {
    send_json(ws, serde_json::json!({"type": "config"})).await;
    let mut out = Vec::new();
    loop {
        let m = recv(ws).await.expect("connection closed");
        if matches!(m, ServerMessage::ConfigAck { .. }) {
            return out;
        }
        out.push(m);
    }
}

fn events(msgs: &[ServerMessage]) -> Vec<(usize, u64)> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMessage::Event { class_index, t_ms, .. } => Some((*class_index, *t_ms)),
            _ => None,
        })
        .collect()
}

fn test_clip(seed: u64) -> Vec<i16> {
    let spec = spec();
    let mut pcm = Vec::new();
    for class in 0..spec.sounds.len() {
        let voice = user_voice(&spec, 500, false);
        pcm.extend(sound_clip(&spec, class, voice, 3, 500, seed + class as u64).unwrap().clip.to_pcm16());
    }
    pcm
}

async fn stream(ws: &mut Ws, pcm: &[i16], chunk: usize) -> Vec<ServerMessage> {
    for c in pcm.chunks(chunk) {
        send_audio(ws, AUDIO, c).await;
    }
    sync(ws).await
}

#[tokio::test]
async fn ready_and_health_describe_the_model() {
    let addr = start(ServiceConfig::default()).await;
    let mut ws = connect(addr).await;
    let ServerMessage::Ready { model_version, classes, summary_hz, .. } = hello(&mut ws).await else { unreachable!() };
    assert_eq!(summary_hz, 10);
    assert_eq!(model_version.len(), 12);
    assert_eq!(&classes[..2], ["click", "pop"]);

    let health: serde_json::Value =
        reqwest::get(format!("http://{addr}/health")).await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_version"], model_version.as_str());
    assert_eq!(health["sessions"], 1);
}

#[tokio::test]
async fn malformed_frames_close_the_session() {
    let addr = start(ServiceConfig::default()).await;

    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    let mut frame = encode_audio(AUDIO, &[0; 100]);
    frame.pop();
    ws.send(Message::binary(frame)).await.unwrap();
    match recv(&mut ws).await {
        Some(ServerMessage::Error { code, fatal: true, .. }) => assert_eq!(code, "malformed"),
        other => panic!("expected a fatal error, got {other:?}"),
    }
    assert!(recv(&mut ws).await.is_none());

    let mut ws = connect(addr).await;
    ws.send(Message::text("{not json")).await.unwrap();
    assert!(matches!(recv(&mut ws).await, Some(ServerMessage::Error { fatal: true, .. })));
    assert!(recv(&mut ws).await.is_none());

    let mut ws = connect(addr).await;
    send_audio(&mut ws, AUDIO, &[0; 160]).await;
    match recv(&mut ws).await {
        Some(ServerMessage::Error { code, fatal: true, .. }) => assert_eq!(code, "no_hello"),
        other => panic!("expected no_hello, got {other:?}"),
    }

    let mut ws = connect(addr).await;
    send_json(&mut ws, serde_json::json!({"type": "hello", "format": "pcm_s16le", "sample_rate": 44100, "channels": 1}))
        .await;
    assert!(matches!(recv(&mut ws).await, Some(ServerMessage::Error { fatal: true, .. })));
}

#[tokio::test]
async fn ten_seconds_of_silence_give_no_events_and_ten_hz_summaries() {
    let addr = start(ServiceConfig { summary_queue: 1000, ..Default::default() }).await;
    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    for c in vec![0i16; 160_000].chunks(1600) {
        send_audio(&mut ws, AUDIO, c).await;
    }
    send_json(&mut ws, serde_json::json!({"type": "config"})).await;
    let mut msgs = Vec::new();
    // summaries may trail the ack
    while let Ok(Some(m)) = tokio::time::timeout(Duration::from_millis(500), recv_any(&mut ws)).await {
        msgs.push(m);
    }
    assert!(events(&msgs).is_empty());
    let times: Vec<u64> = msgs
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Summary { t_ms, top_k, .. } => {
                assert_eq!(top_k.len(), 3);
                Some(*t_ms)
            }
            _ => None,
        })
        .collect();
    assert!((95..=100).contains(&times.len()), "{} summaries", times.len());
    assert!(times.windows(2).all(|w| w[1] - w[0] == 100), "{times:?}");
}

#[tokio::test]
async fn session_events_match_offline_detection_for_any_chunking() {
    let addr = start(ServiceConfig::default()).await;
    let (w, _) = trained();
    let pcm = test_clip(77);
    let clip = nvsd::audio::AudioClip::from_pcm16(&pcm);
    let (_, offline) = detect_clip(w, &clip, &PostProcConfig::default()).unwrap();
    let offline: Vec<(usize, u64)> = offline.iter().map(|e| (e.class, e.time_ms())).collect();
    assert!(offline.len() >= 5, "the test vector should produce events, got {offline:?}");

    for chunk in [160, 1000, 4801, 32000] {
        let mut ws = connect(addr).await;
        hello(&mut ws).await;
        let got = events(&stream(&mut ws, &pcm, chunk).await);
        assert_eq!(got, offline, "chunk {chunk}");
    }
}

#[tokio::test]
async fn config_updates_apply_from_the_next_frame() {
    let addr = start(ServiceConfig::default()).await;
    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    stream(&mut ws, &vec![0; 1600], 1600).await;

    send_json(&mut ws, serde_json::json!({"type": "config", "class": "click", "theta": 0.6})).await;
    match recv(&mut ws).await.unwrap() {
        ServerMessage::ConfigAck { postproc, effective_from_ms } => {
            assert_eq!(postproc.theta[0], 0.6);
            assert_eq!(postproc.theta[1], PostProcConfig::default().theta[1]);
            // 1600 samples hold 8 frames of 400 samples at a 160 sample hop
            assert_eq!(effective_from_ms, 80);
        }
        other => panic!("expected an ack, got {other:?}"),
    }

    for bad in [
        serde_json::json!({"type": "config", "class": "click", "theta": 2.0}),
        serde_json::json!({"type": "config", "class": "nope", "theta": 0.5}),
        serde_json::json!({"type": "config", "theta": 0.5}),
    ] {
        send_json(&mut ws, bad).await;
        match recv(&mut ws).await.unwrap() {
            ServerMessage::Error { code, fatal: false, .. } => assert_eq!(code, "bad_config"),
            other => panic!("expected a rejection, got {other:?}"),
        }
    }
    // the session survives and keeps the accepted value
    send_json(&mut ws, serde_json::json!({"type": "config"})).await;
    match recv(&mut ws).await.unwrap() {
        ServerMessage::ConfigAck { postproc, .. } => assert_eq!(postproc.theta[0], 0.6),
        other => panic!("expected an ack, got {other:?}"),
    }
}

#[tokio::test]
async fn a_raised_threshold_silences_a_class_mid_stream() {
    let addr = start(ServiceConfig::default()).await;
    let pcm = test_clip(77);
    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    let before = events(&stream(&mut ws, &pcm, 1600).await);
    let classes: Vec<usize> = before.iter().map(|e| e.0).collect();
    let c = classes[0];
    let name = trained().0.classes.name(c).to_string();
    send_json(&mut ws, serde_json::json!({"type": "config", "class": name, "active": false})).await;
    assert!(matches!(recv(&mut ws).await.unwrap(), ServerMessage::ConfigAck { .. }));
    let after = events(&stream(&mut ws, &pcm, 1600).await);
    assert!(!after.is_empty());
    assert!(after.iter().all(|e| e.0 != c), "{after:?}");
}

#[tokio::test]
async fn enrolling_silence_fails_without_closing() {
    let addr = start(ServiceConfig::default()).await;
    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    send_json(&mut ws, serde_json::json!({"type": "enroll_start", "class": "tone800", "shots": 5})).await;
    assert!(matches!(recv(&mut ws).await.unwrap(), ServerMessage::EnrollStarted { shots: 5, .. }));
    send_audio(&mut ws, ENROLL_AUDIO, &vec![0; 48_000]).await;
    send_json(&mut ws, serde_json::json!({"type": "enroll_finish"})).await;
    match recv(&mut ws).await.unwrap() {
        ServerMessage::Error { code, message, fatal: false } => {
            assert_eq!(code, "enrollment_failed");
            assert!(message.contains("louder"), "{message}");
        }
        other => panic!("expected enrollment_failed, got {other:?}"),
    }
    send_json(&mut ws, serde_json::json!({"type": "enroll_finish"})).await;
    assert!(matches!(recv(&mut ws).await.unwrap(), ServerMessage::Error { fatal: false, .. }));
    sync(&mut ws).await;
}

fn f1(events: &[(usize, u64)], class: usize, segments: &[Segment]) -> f64 {
    let evs: Vec<Event> =
        events.iter().filter(|e| e.0 == class).map(|&(class, t)| Event { class, frame: (t / 10) as usize }).collect();
    let report = segmental_score(&[ClipResult { events: &evs, segments }], DEFAULT_TOLERANCE).unwrap();
    report.f1(class).unwrap_or(0.0)
}

#[tokio::test]
async fn enrollment_rescues_a_shifted_user_and_leaves_other_classes_alone() {
    let addr = start(ServiceConfig::default()).await;
    let user = shifted_user(&spec(), 1002).unwrap();
    let enrollment = user.enrollment[TONE800].clip.to_pcm16();
    let heldout = &user.heldout[TONE800];
    let vector = test_clip(91);

    let mut plain = connect(addr).await;
    hello(&mut plain).await;
    let plain_heldout = events(&stream(&mut plain, &heldout.clip.to_pcm16(), 1600).await);
    let f1_plain = f1(&plain_heldout, TONE800, &heldout.segments);

    let mut ws = connect(addr).await;
    hello(&mut ws).await;
    send_json(&mut ws, serde_json::json!({"type": "enroll_start", "class": "tone800", "shots": 5})).await;
    recv(&mut ws).await.unwrap();
    for c in enrollment.chunks(8000) {
        send_audio(&mut ws, ENROLL_AUDIO, c).await;
    }
    send_json(&mut ws, serde_json::json!({"type": "enroll_finish"})).await;
    match recv(&mut ws).await.unwrap() {
        ServerMessage::Enrolled { class, segments_found, shots_used, f1_before, f1_after } => {
            assert_eq!(class, "tone800");
            assert_eq!(segments_found, 10);
            assert_eq!(shots_used, 5);
            assert!(f1_after.unwrap() > f1_before.unwrap(), "{f1_before:?} -> {f1_after:?}");
        }
        other => panic!("expected enrolled, got {other:?}"),
    }
    let got_heldout = events(&stream(&mut ws, &heldout.clip.to_pcm16(), 1600).await);
    let f1_enrolled = f1(&got_heldout, TONE800, &heldout.segments);
    assert!(f1_plain < 0.5 && f1_enrolled >= 0.8, "held-out F1 {f1_plain:.2} -> {f1_enrolled:.2}");

    // the refractory period is shared by all classes, so compare the others
    // with the enrolled class switched off in both sessions
    let mut vectors = Vec::new();
    for ws in [&mut plain, &mut ws] {
        send_json(ws, serde_json::json!({"type": "config", "class": "tone800", "active": false})).await;
        assert!(matches!(recv(ws).await.unwrap(), ServerMessage::ConfigAck { .. }));
        vectors.push(events(&stream(ws, &vector, 1600).await));
    }
    assert!(!vectors[0].is_empty());
    assert_eq!(vectors[0], vectors[1]);

    // a fresh session still runs the shared model
    let mut fresh = connect(addr).await;
    hello(&mut fresh).await;
    assert_eq!(events(&stream(&mut fresh, &heldout.clip.to_pcm16(), 1600).await), plain_heldout);
}

#[tokio::test]
async fn concurrent_sessions_do_not_share_state() {
    let addr = start(ServiceConfig::default()).await;
    let pcm = test_clip(77);
    let (mut a, mut b) = (connect(addr).await, connect(addr).await);
    hello(&mut a).await;
    hello(&mut b).await;
    let (w, _) = trained();
    let (_, offline) = detect_clip(w, &nvsd::audio::AudioClip::from_pcm16(&pcm), &PostProcConfig::default()).unwrap();
    let offline: Vec<(usize, u64)> = offline.iter().map(|e| (e.class, e.time_ms())).collect();
    let muted = offline[0].0;
    let name = w.classes.name(muted).to_string();
    send_json(&mut a, serde_json::json!({"type": "config", "class": name, "active": false})).await;
    recv(&mut a).await.unwrap();

    // interleave the two streams chunk by chunk
    for chunk in pcm.chunks(3200) {
        send_audio(&mut a, AUDIO, chunk).await;
        send_audio(&mut b, AUDIO, chunk).await;
    }
    let (ea, eb) = (events(&sync(&mut a).await), events(&sync(&mut b).await));
    assert_eq!(eb, offline);
    assert_eq!(ea, offline.iter().copied().filter(|e| e.0 != muted).collect::<Vec<_>>());
}
