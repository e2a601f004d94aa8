//! Drives a real server over TCP: a scripted client pushes pointer-derived
//! forces, records, exports, replays offline, and asks for fine-tuning.

use std::path::Path;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use phri_core::dynamics::{Assist, ControllerKind, Episode, SimOptions, TrajectoryKind, simulate_episode};
use phri_core::net::{PredictorConfig, PredictorModel, load_model, save_model};
use phri_core::pipeline::{EnvConfig, TrainConfig};
use phri_live::protocol::{Configure, Empty, ForceInput, RecordToggle, StateUpdate, TlRequest};
use phri_live::{Body, ServiceConfig, SessionMessage};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

struct Client {
    ws: Ws,
    seq: u64,
    last_seq: u64,
}

impl Client {
    async fn connect(addr: &str) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws"))
            .await
            .unwrap();
        Client {
            ws,
            seq: 0,
            last_seq: 0,
        }
    }

    async fn send(&mut self, body: Body) {
        self.seq += 1;
        let line = SessionMessage::new(self.seq, body).to_line();
        self.ws.send(Message::text(line)).await.unwrap();
    }

    async fn recv(&mut self) -> Body {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(30), self.ws.next())
                .await
                .expect("server went quiet")
                .expect("stream ended")
                .unwrap();
            if let Message::Text(text) = msg {
                let m = SessionMessage::parse(text.as_str()).unwrap();
                assert!(m.seq > self.last_seq, "sequence numbers must increase");
                self.last_seq = m.seq;
                return m.body;
            }
        }
    }

    /// Skips streaming updates until a message of another kind arrives.
    async fn reply(&mut self) -> Body {
        loop {
            match self.recv().await {
                Body::StateUpdate(_) | Body::PredictionUpdate(_) => continue,
                other => return other,
            }
        }
    }
}

async fn http_get(addr: &str, path: &str) -> (u16, serde_json::Value) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    let req = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status: u16 = text[9..12].parse().unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(body)
    } else {
        body.to_string()
    };
    (status, serde_json::from_str(&body).unwrap())
}

fn dechunk(mut body: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = body.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        body = &rest[n + 2..];
    }
}

/// The operator UI's input mapping: a spring from the end effector to the cursor, clamped.
fn pointer_to_force(cursor: &[f64], x: &[f64], k_ui: f64, cap: f64) -> Vec<f64> {
    let f: Vec<f64> = cursor.iter().zip(x).map(|(c, p)| k_ui * (c - p)).collect();
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > cap {
        f.iter().map(|v| v * cap / n).collect()
    } else {
        f
    }
}

const WINDOW: usize = 5;
const HORIZON: usize = 4;

fn service(dir: &Path) -> ServiceConfig {
    let env = EnvConfig::desk();
    let model_dir = dir.join("models");
    let pc = PredictorConfig::new(2, WINDOW, HORIZON, 1, 6, 8).unwrap();
    let mut model = PredictorModel::init(&pc, 11).unwrap();
    model.version_tag = "tiny".into();
    std::fs::create_dir_all(&model_dir).unwrap();
    save_model(&model, &model_dir.join("tiny.model")).unwrap();
    ServiceConfig {
        env,
        train: TrainConfig {
            tl_epochs: 20,
            ..TrainConfig::default()
        },
        model_dir,
        recordings_dir: dir.join("recordings"),
        rate_hz: 125.0,
        prediction_every: 5,
        seed: 4,
    }
}

async fn start_server(cfg: ServiceConfig) -> (String, oneshot::Sender<()>, tokio::task::JoinHandle<()>) {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let (stop, stopped) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        phri_live::serve(listener, cfg, async {
            let _ = stopped.await;
        })
        .await
        .unwrap();
    });
    (addr, stop, handle)
}

/// Runs a configured session to the end, steering the cursor along a slanted line.
async fn drive(client: &mut Client, rate: f64) -> (Vec<StateUpdate>, usize, f64) {
    client.send(Body::Start(Empty {})).await;
    let started = Instant::now();
    let mut states = Vec::new();
    let mut predictions = 0;
    let mut last_sent = -1.0;
    loop {
        match client.recv().await {
            Body::StateUpdate(s) => {
                let done = s.done;
                // Pointer updates at about 30 Hz of simulated time.
                if s.t - last_sent >= 1.0 / 30.0 - 1e-12 {
                    last_sent = s.t;
                    let cursor = [0.1 + 0.25 * s.t, 0.15 + 0.05 * s.t];
                    let force = pointer_to_force(&cursor, &s.x, 50.0, 30.0);
                    client.send(Body::ForceInput(ForceInput { force })).await;
                }
                states.push(s);
                if done {
                    break;
                }
            }
            Body::PredictionUpdate(p) => {
                assert_eq!(p.positions.len(), HORIZON);
                predictions += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    let rate_seen = states.len() as f64 / started.elapsed().as_secs_f64();
    for w in states.windows(2) {
        assert_eq!(w[1].step, w[0].step + 1);
        assert!((w[1].t - w[0].t - 1.0 / rate).abs() < 1e-12);
    }
    (states, predictions, rate_seen)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_session_records_replays_and_fine_tunes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = service(dir.path());
    let env = cfg.env.clone();
    let (addr, stop, server) = start_server(cfg).await;

    let (status, health) = http_get(&addr, "/health").await;
    assert_eq!(status, 200);
    assert_eq!(health["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(health["schema_version"], 1);

    let mut client = Client::connect(&addr).await;
    let Body::Hello(hello) = client.recv().await else {
        panic!("expected hello")
    };
    assert_eq!(hello.models, vec!["tiny".to_string()]);
    assert!(hello.rates_hz.contains(&125.0) && hello.rates_hz.contains(&60.0));

    // Rejections first: bad model, and commands before any session exists.
    let mut bad = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
    bad.model = Some("nope".into());
    client.send(Body::Configure(bad)).await;
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("nope"), "{}", e.message);
    client.send(Body::Start(Empty {})).await;
    assert!(matches!(client.reply().await, Body::Error(_)));
    client
        .ws
        .send(Message::text(
            r#"{"schema_version":1,"seq":99,"kind":"configure","payload":{"trajectory":"linear","controller":"PID"}}"#,
        ))
        .await
        .unwrap();
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("PID"), "{}", e.message);

    let duration = 2.0;
    let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
    c.model = Some("tiny".into());
    c.duration = Some(duration);
    c.human_id = Some("ann".into());
    client.send(Body::Configure(c)).await;
    let Body::Configure(applied) = client.reply().await else {
        panic!("expected configure")
    };
    let session_id = applied.session.clone().unwrap();
    assert_eq!(applied.rate_hz, Some(125.0));
    client.send(Body::RecordToggle(RecordToggle { recording: true })).await;
    assert_eq!(
        client.reply().await,
        Body::RecordToggle(RecordToggle { recording: true })
    );

    let (states, predictions, rate_seen) = drive(&mut client, 125.0).await;
    let expected = (duration * 125.0) as usize;
    assert_eq!(states.len(), expected);
    assert!(rate_seen >= 60.0, "loop ran at {rate_seen:.1} steps/s");
    assert!(predictions >= (expected - WINDOW) / 5);

    client.send(Body::Export(Default::default())).await;
    let Body::Export(export) = client.reply().await else {
        panic!("expected export")
    };
    assert_eq!(export.records, Some(expected));
    let rec_id = export.recording.unwrap();

    let (status, listing) = http_get(&addr, "/recordings").await;
    assert_eq!(status, 200);
    assert_eq!(listing["recordings"][0], rec_id.as_str());
    let (status, body) = http_get(&addr, &format!("/recordings/{rec_id}")).await;
    assert_eq!(status, 200);
    let downloaded: Episode = serde_json::from_value(body).unwrap();
    let ep = Episode::load(&dir.path().join("recordings"), &rec_id).unwrap();
    assert_eq!(downloaded, ep);
    assert_eq!(ep.len(), expected);
    assert_eq!(ep.meta.model_id.as_deref(), Some("tiny"));
    assert_eq!(ep.meta.human.id, "ann");
    assert_eq!(http_get(&addr, "/recordings/missing").await.0, 404);

    // Offline replay with the logged forces reproduces the logged states.
    let base = load_model(&dir.path().join("models/tiny.model")).unwrap();
    let mut replay_env = env.clone();
    replay_env.plant = ep.meta.plant.clone();
    let ctrl = replay_env.controller().unwrap();
    let replay = simulate_episode(
        &ep.meta.plant,
        &ep.meta.trajectory,
        ep.meta.obstacle.as_ref(),
        &ep.meta.human,
        Assist::Game {
            ctrl: &ctrl,
            predictor: Some(&base),
            pick_index: env.pick_index,
        },
        ep.meta.seed,
        SimOptions {
            logged_forces: Some(ep.records.iter().map(|r| r.u_h.clone()).collect()),
            ..SimOptions::default()
        },
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (a, b) in replay.episode.records.iter().zip(&ep.records) {
        for (p, q) in
            a.x.iter()
                .chain(&a.v)
                .chain(&a.u_r)
                .zip(b.x.iter().chain(&b.v).chain(&b.u_r))
        {
            worst = worst.max((p - q).abs());
        }
    }
    assert_eq!(replay.episode.len(), ep.len());
    assert!(worst <= 1e-9, "replay deviates by {worst:e}");

    client
        .send(Body::TlRequest(TlRequest {
            epochs: None,
            swap: true,
        }))
        .await;
    let Body::TlResult(tl) = client.reply().await else {
        panic!("expected tl_result")
    };
    assert_eq!(tl.base_model, "tiny");
    assert_eq!(tl.model, "tiny+tl-1");
    assert_eq!(tl.horizon, HORIZON);
    assert_eq!(tl.recordings, vec![rec_id.clone()]);
    assert!(tl.swapped);
    assert!(tl.pre_e_rms.is_finite() && tl.post_e_rms.is_finite());
    assert!(tl.post_e_rms < tl.pre_e_rms, "{} -> {}", tl.pre_e_rms, tl.post_e_rms);

    let tuned = load_model(&dir.path().join("models/tiny+tl-1.model")).unwrap();
    for (a, b) in base.blocks.iter().zip(&tuned.blocks) {
        if a.is_recurrent() {
            assert_eq!(a.value, b.value, "recurrent block {} changed", a.name);
        }
    }
    let (_, models) = http_get(&addr, "/models").await;
    assert_eq!(models["models"], serde_json::json!(["tiny", "tiny+tl-1"]));

    // A fresh session on the same connection; its unexported recording is
    // flushed when the server shuts down.
    let mut c = Configure::new(TrajectoryKind::Curved, ControllerKind::Impedance);
    c.duration = Some(5.0);
    c.human_id = Some("ann".into());
    c.rate_hz = Some(60.0);
    client.send(Body::Configure(c)).await;
    let Body::Configure(second) = client.reply().await else {
        panic!("expected configure")
    };
    assert_ne!(second.session.as_deref(), Some(session_id.as_str()));
    client.send(Body::RecordToggle(RecordToggle { recording: true })).await;
    client.reply().await;
    client.send(Body::Start(Empty {})).await;
    let mut seen = 0;
    while seen < 20 {
        if let Body::StateUpdate(s) = client.recv().await {
            assert!((s.t - seen as f64 / 60.0).abs() < 1e-12);
            seen += 1;
        }
    }
    stop.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(15), server)
        .await
        .unwrap()
        .unwrap();
    let flushed: Vec<_> = std::fs::read_dir(dir.path().join("recordings"))
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".meta.json"))
        .collect();
    assert_eq!(flushed.len(), 2, "{flushed:?}");
    let second_ep = Episode::load(&dir.path().join("recordings"), "ann-002").unwrap();
    assert!(second_ep.len() >= 20);
    assert!((second_ep.dt() - 1.0 / 60.0).abs() < 1e-15);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn short_recording_cannot_be_fine_tuned() {
    let dir = tempfile::tempdir().unwrap();
    let (addr, stop, server) = start_server(service(dir.path())).await;
    let mut client = Client::connect(&addr).await;
    client.recv().await;

    let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
    c.model = Some("tiny".into());
    c.duration = Some(0.05);
    c.human_id = Some("shorty".into());
    client.send(Body::Configure(c)).await;
    client.reply().await;

    client.send(Body::TlRequest(TlRequest::default())).await;
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("no exported recordings"), "{}", e.message);

    client.send(Body::RecordToggle(RecordToggle { recording: true })).await;
    client.reply().await;
    client.send(Body::Export(Default::default())).await;
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("nothing recorded"), "{}", e.message);

    let (states, _, _) = drive(&mut client, 125.0).await;
    assert_eq!(states.len(), 7);
    client.send(Body::Export(Default::default())).await;
    let Body::Export(export) = client.reply().await else {
        panic!("expected export")
    };
    assert_eq!(export.records, Some(7));

    client.send(Body::TlRequest(TlRequest::default())).await;
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("at least 9 samples"), "{}", e.message);
    let (_, models) = http_get(&addr, "/models").await;
    assert_eq!(models["models"], serde_json::json!(["tiny"]));

    // Forces above the cap are refused and reported.
    client
        .send(Body::ForceInput(ForceInput {
            force: vec![100.0, 0.0],
        }))
        .await;
    let Body::Error(e) = client.reply().await else {
        panic!("expected error")
    };
    assert!(e.message.contains("cap"), "{}", e.message);

    stop.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(15), server)
        .await
        .unwrap()
        .unwrap();
}
