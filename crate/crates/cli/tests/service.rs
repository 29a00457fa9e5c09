use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use vibrotwin::analysis::summarize;
use vibrotwin::SessionLog;
use vibrotwin_cli::service::{serve, Service, ServiceConfig};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(stream: bool) -> (SocketAddr, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let service = Service::start(ServiceConfig {
        log_dir: dir.path().into(),
        stream,
        ..ServiceConfig::default()
    })
    .unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, service, std::future::pending()));
    (addr, dir)
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/session"))
        .await
        .unwrap()
        .0
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

async fn next_text(ws: &mut Ws) -> String {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("message within 10 s")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = msg {
            return t.to_string();
        }
    }
}

async fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(
        format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes(),
    )
    .await
    .unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let status = text[9..12].parse().unwrap();
    let (_, body) = text.split_once("\r\n\r\n").unwrap();
    (status, body.to_string())
}

/// Answers every trial with `answer(trial_index)` and returns the raw event
/// stream up to and including the session summary.
async fn drive_session(ws: &mut Ws, start: Value, answer: impl Fn(usize) -> Value) -> Vec<String> {
    send(ws, start).await;
    let mut seen = Vec::new();
    loop {
        let text = next_text(ws).await;
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_ne!(v["type"], "error", "{text}");
        let kind = v["type"].as_str().unwrap().to_string();
        if kind == "trial_start" {
            let i = v["body"]["trial_index"].as_u64().unwrap() as usize;
            send(ws, json!({ "action": "response", "response": answer(i) })).await;
        }
        seen.push(text);
        if kind == "session_summary" {
            return seen;
        }
    }
}

/// Skips broadcast events until the next private reply.
async fn next_reply(ws: &mut Ws) -> Value {
    loop {
        let v: Value = serde_json::from_str(&next_text(ws).await).unwrap();
        if v.get("event_id").is_none() {
            return v;
        }
    }
}

fn body_text(event: &str) -> &str {
    let start = event.find(r#""body":"#).unwrap() + 7;
    &event[start..event.len() - 1]
}

#[tokio::test]
async fn thirty_responses_yield_a_six_by_six_summary() {
    let (addr, dir) = start(false).await;
    let mut ws = connect(addr).await;
    let start =
        json!({ "action": "start", "protocol": "single-location", "seed": 7, "session_id": "s1" });
    let events = drive_session(
        &mut ws,
        start,
        |i| json!({ "kind": "motor", "value": i % 6 }),
    )
    .await;

    let summary_event = events.last().unwrap();
    let summary: Value = serde_json::from_str(body_text(summary_event)).unwrap();
    assert_eq!(summary["confusion"]["k"], 6);
    assert_eq!(summary["trials"], 30);
    let counts = summary["confusion"]["counts"].as_array().unwrap();
    assert_eq!(counts.len(), 6);
    let total: u64 = counts
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 30);

    // The persisted log re-analyzed offline gives the same bytes.
    let (status, log_text) = http_get(addr, "/sessions/s1/log").await;
    assert_eq!(status, 200);
    let log = SessionLog::from_jsonl(&log_text).unwrap();
    assert_eq!(log.records.len(), 30);
    assert_eq!(summarize(&log).unwrap().to_json(), body_text(summary_event));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("s1.jsonl")).unwrap(),
        log_text
    );

    let (status, index) = http_get(addr, "/sessions").await;
    assert_eq!(status, 200);
    let index: Value = serde_json::from_str(&index).unwrap();
    assert_eq!(index[0]["session_id"], "s1");
    assert_eq!(index[0]["complete"], true);
    assert_eq!(http_get(addr, "/sessions/nope/log").await.0, 404);
}

#[tokio::test]
async fn malformed_control_gets_an_error_and_changes_nothing() {
    let (addr, _dir) = start(false).await;
    let mut ws = connect(addr).await;

    for bad in [
        "{not json",
        r#"{"action":"dance"}"#,
        r#"{"action":"response","response":{"kind":"motor","value":1}}"#,
    ] {
        ws.send(Message::Text(bad.into())).await.unwrap();
        let reply: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
        assert_eq!(reply["type"], "error", "{bad}");
        assert!(reply.get("event_id").is_none());
    }
    let (_, health) = http_get(addr, "/health").await;
    let health: Value = serde_json::from_str(&health).unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["session"]["state"], Value::Null);
    assert_eq!(health["session"]["last_event_id"], Value::Null);

    send(
        &mut ws,
        json!({ "action": "start", "protocol": "intensity", "seed": 1 }),
    )
    .await;
    loop {
        let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
        if v["type"] == "trial_start" {
            break;
        }
    }
    // Out-of-domain answer, then a second start while running.
    send(
        &mut ws,
        json!({ "action": "response", "response": { "kind": "intensity", "value": 9 } }),
    )
    .await;
    assert_eq!(next_reply(&mut ws).await["type"], "error");
    send(
        &mut ws,
        json!({ "action": "start", "protocol": "intensity" }),
    )
    .await;
    assert_eq!(next_reply(&mut ws).await["type"], "error");

    let (_, health) = http_get(addr, "/health").await;
    let health: Value = serde_json::from_str(&health).unwrap();
    assert_eq!(health["session"]["state"], "testing");
    assert_eq!(health["session"]["progress"], json!([0, 30]));
}

#[tokio::test]
async fn observers_see_identical_gapless_streams() {
    let (addr, _dir) = start(false).await;
    let mut driver = connect(addr).await;
    let mut observer = connect(addr).await;
    // Let both subscriptions register before anything is emitted.
    tokio::time::sleep(Duration::from_millis(100)).await;

    let start = json!({ "action": "start", "protocol": "pair-location", "seed": 3 });
    let driven = drive_session(
        &mut driver,
        start,
        |i| json!({ "kind": "pair", "value": [i % 5, 5] }),
    )
    .await;
    let mut watched = Vec::new();
    while watched.len() < driven.len() {
        watched.push(next_text(&mut observer).await);
    }
    assert_eq!(driven, watched);

    let ids: Vec<u64> = driven
        .iter()
        .map(|t| {
            serde_json::from_str::<Value>(t).unwrap()["event_id"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(ids, (ids[0]..ids[0] + ids.len() as u64).collect::<Vec<_>>());
    let kinds: Vec<String> = driven
        .iter()
        .map(|t| {
            serde_json::from_str::<Value>(t).unwrap()["type"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "trial_result").count(), 45);
    assert!(kinds.contains(&"motor_state".to_string()));
}

#[tokio::test]
async fn frames_stream_at_twenty_hertz() {
    let (addr, _dir) = start(true).await;
    let mut ws = connect(addr).await;
    let mut frames = Vec::new();
    let mut last_id = None;
    let t0 = tokio::time::Instant::now();
    while t0.elapsed() < Duration::from_millis(1500) {
        let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
        let id = v["event_id"].as_u64().unwrap();
        if let Some(prev) = last_id {
            assert_eq!(id, prev + 1, "gap in event ids");
        }
        last_id = Some(id);
        if v["type"] == "frame" {
            assert_eq!(v["body"]["values"].as_array().unwrap().len(), 25);
            frames.push(v["body"]["t_ms"].as_u64().unwrap());
        }
    }
    // Consecutive observer frames are five scans (50 ms) apart.
    assert!(frames.len() >= 10, "{} frames", frames.len());
    assert!(frames.windows(2).all(|w| w[1] - w[0] == 50), "{frames:?}");
}

#[tokio::test]
async fn mode_and_threshold_controls_are_acknowledged() {
    let (addr, _dir) = start(false).await;
    let mut ws = connect(addr).await;
    send(&mut ws, json!({ "action": "set_mode", "mode": "palm:3" })).await;
    let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
    assert_eq!(
        (v["type"].as_str(), v["body"]["mode"].as_str()),
        (Some("control"), Some("palm:3"))
    );
    send(
        &mut ws,
        json!({ "action": "set_threshold", "threshold": 0.3 }),
    )
    .await;
    let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
    assert_eq!(v["body"]["threshold"], 0.3);
    send(
        &mut ws,
        json!({ "action": "set_threshold", "threshold": 4.0 }),
    )
    .await;
    let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
    assert_eq!(v["type"], "error");
    send(&mut ws, json!({ "action": "set_mode", "mode": "palm:4" })).await;
    let v: Value = serde_json::from_str(&next_text(&mut ws).await).unwrap();
    assert_eq!(v["type"], "error");
}
