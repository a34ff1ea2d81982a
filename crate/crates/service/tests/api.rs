use std::path::Path;
use std::time::{Duration, Instant};

use aftercast_core::data::write_csv;
use aftercast_core::synthetic::demo_series;
use aftercast_service::{serve_on, AppState, ServiceConfig};
use axum::routing::post;
use axum::{Json, Router};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn config(store: &Path) -> ServiceConfig {
    ServiceConfig {
        listen: "127.0.0.1:0".into(),
        store: store.to_path_buf(),
        ..ServiceConfig::default()
    }
}

async fn start(cfg: ServiceConfig) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::open(cfg).await.unwrap();
    tokio::spawn(serve_on(listener, state, std::future::pending()));
    format!("http://{addr}")
}

async fn stub_llm(status: StatusCode, content: &'static str) -> String {
    let app = Router::new().route(
        "/v1/chat",
        post(move |Json(_): Json<Value>| async move {
            let body = json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] });
            (status, Json(body))
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1/chat")
}

fn demo_csv() -> String {
    write_csv(&demo_series(400, 2, 3)).unwrap()
}

async fn send(req: reqwest::RequestBuilder) -> (StatusCode, Value) {
    let resp = req.send().await.unwrap();
    let status = resp.status();
    let body = resp.json::<Value>().await.unwrap_or(Value::Null);
    (status, body)
}

async fn create(c: &Client, base: &str, cfg: Value) -> String {
    let (status, body) = send(c.post(format!("{base}/sessions")).json(&cfg)).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

async fn upload(c: &Client, base: &str, id: &str) -> (StatusCode, Value) {
    let body = json!({ "csv": demo_csv(), "window": 24, "horizon": 12, "baseline": "persistence" });
    send(c.post(format!("{base}/sessions/{id}/data")).json(&body)).await
}

async fn wait_idle(c: &Client, base: &str, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let (_, doc) = send(c.get(format!("{base}/sessions/{id}"))).await;
        if doc["state"] != "optimizing" {
            return doc;
        }
        assert!(Instant::now() < deadline, "round did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn poll_events(c: &Client, base: &str, id: &str, from: usize) -> Vec<Value> {
    let (status, body) = send(c.get(format!("{base}/sessions/{id}/events?from={from}"))).await;
    assert_eq!(status, StatusCode::OK);
    body["events"].as_array().unwrap().clone()
}

/// Reads an event stream to its `done` event. Returns `(id, data)` of the
/// episode events.
async fn read_stream(c: &Client, url: &str) -> (Vec<(usize, Value)>, Value) {
    let mut resp = c.get(url).header("accept", "text/event-stream").send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut buf = String::new();
    let mut episodes = Vec::new();
    loop {
        let chunk = resp.chunk().await.unwrap().expect("stream ended before done");
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let (mut event, mut id, mut data) = (None, None, String::new());
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse::<usize>().ok();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            match event.as_deref() {
                Some("episode") => episodes.push((id.unwrap(), serde_json::from_str(&data).unwrap())),
                Some("done") => return (episodes, serde_json::from_str(&data).unwrap()),
                _ => {}
            }
        }
    }
}

fn kinds(episode: &Value) -> Vec<String> {
    episode["plan"]["steps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["kind"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_session_creation() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(config(dir.path())).await;
    let c = Client::new();
    let (status, body) = send(c.get(format!("{base}/health"))).await;
    assert_eq!((status, body), (StatusCode::OK, json!({ "status": "ok" })));

    let (status, body) = send(c.post(format!("{base}/sessions"))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["state"], "created");
    let other = create(&c, &base, json!({})).await;
    assert_ne!(body["id"].as_str().unwrap(), other);

    let (status, body) = send(c.post(format!("{base}/sessions")).json(&json!({ "budget": 0 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "invalid_config");
    assert_eq!(body["details"]["field"], "budget");
    assert!(body["message"].as_str().unwrap().contains("budget"));

    let (status, body) = send(c.post(format!("{base}/sessions")).json(&json!({ "strategy": "annealing" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");

    let (status, body) = send(c.get(format!("{base}/sessions/nope"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test(flavor = "multi_thread")]
async fn state_machine_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &base, json!({ "budget": 20 })).await;

    let (status, _) = send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send(c.post(format!("{base}/sessions/{id}/finalize"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send(c.post(format!("{base}/sessions/{id}/feedback")).json(&json!({ "text": "shift by 2 steps" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let bad = json!({ "csv": "a,b\n1,x\n", "window": 2, "horizon": 1 });
    let (status, body) = send(c.post(format!("{base}/sessions/{id}/data")).json(&bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["code"], "invalid_data");
    let (_, doc) = send(c.get(format!("{base}/sessions/{id}"))).await;
    assert_eq!(doc["state"], "created");

    let (status, body) = upload(&c, &base, &id).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["state"], "data_loaded");
    assert_eq!(body["summary"]["rows"], 400);
    assert_eq!(body["summary"]["channels"], 2);
    assert_eq!(body["summary"]["train_windows"], 240 - 36 + 1);
    assert_eq!(body["summary"]["val_windows"], 80 - 36 + 1);
    assert_eq!(body["summary"]["test_windows"], 80 - 36 + 1);

    let (status, _) = upload(&c, &base, &id).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send(c.post(format!("{base}/sessions/{id}/finalize"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = send(c.get(format!("{base}/sessions/{id}/report"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn full_session_with_feedback_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &base, json!({ "strategy": "random", "budget": 50, "seed": 1 })).await;
    assert_eq!(upload(&c, &base, &id).await.0, StatusCode::OK);

    let (status, body) = send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!((body["round"].as_u64(), body["from"].as_u64()), (Some(1), Some(0)));
    let (streamed, done) = read_stream(&c, &format!("{base}/sessions/{id}/events?from=0")).await;
    assert_eq!(done["state"], "awaiting_feedback");
    assert_eq!(streamed.len(), 51);
    assert!(streamed.iter().enumerate().all(|(i, (eid, _))| *eid == i));
    let polled = poll_events(&c, &base, &id, 0).await;
    assert_eq!(polled, streamed.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>());
    assert!(polled.iter().skip(1).any(|e| e["accepted"] == true));
    assert!(polled.iter().all(|e| e["round"] == 1));
    let baseline = polled[0]["val_mse"].as_f64().unwrap();
    for e in polled.iter().filter(|e| e["accepted"] == true) {
        assert!(e["val_mse"].as_f64().unwrap() <= baseline);
        assert_eq!(e["consistent"], true);
    }

    // Resuming from an offset replays only the suffix.
    let (suffix, _) = read_stream(&c, &format!("{base}/sessions/{id}/events?from=48")).await;
    assert_eq!(suffix.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![48, 49, 50]);
    let resumed = c
        .get(format!("{base}/sessions/{id}/events"))
        .header("accept", "text/event-stream")
        .header("last-event-id", "49");
    let text = resumed.send().await.unwrap().text().await.unwrap();
    assert!(text.contains("id: 50") && !text.contains("id: 49"), "{text}");

    let (status, report) = send(c.get(format!("{base}/sessions/{id}/report"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["final"], false);
    assert_eq!(report["split"], "val");
    let interim_m = report["report"]["improvement_m"].as_f64().unwrap();
    assert!(interim_m >= 0.0);

    let (status, body) = send(c.post(format!("{base}/sessions/{id}/feedback")).json(&json!({ "text": "make it pop" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "feedback_rejected");
    assert!(body["details"]["hint"].is_string());
    let (_, doc) = send(c.get(format!("{base}/sessions/{id}"))).await;
    assert_eq!(doc["feedback"], json!([]));
    assert_eq!(doc["state"], "awaiting_feedback");

    let text = "increase values above quantile 80 by 5%";
    let (status, body) = send(c.post(format!("{base}/sessions/{id}/feedback")).json(&json!({ "text": text, "path": "grammar" }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["directive"]["provenance"], "grammar");
    assert_eq!(body["directive"]["parsed"][0]["kind"], "PiecewiseScaleHigh");
    assert_eq!(body["space"]["entries"].as_array().unwrap().len(), 1);

    let (status, body) = send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!((body["round"].as_u64(), body["from"].as_u64()), (Some(2), Some(51)));
    let doc = wait_idle(&c, &base, &id).await;
    assert_eq!(doc["state"], "awaiting_feedback");
    let round2 = poll_events(&c, &base, &id, 51).await;
    assert_eq!(round2.len(), 51);
    assert!(round2.iter().all(|e| e["round"] == 2));
    assert!(round2.iter().skip(1).all(|e| kinds(e) == ["PiecewiseScaleHigh"]));
    let (_, report) = send(c.get(format!("{base}/sessions/{id}/report"))).await;
    assert!(report["report"]["improvement_m"].as_f64().unwrap() >= interim_m);

    let (status, first) = send(c.post(format!("{base}/sessions/{id}/finalize"))).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["per_channel"].as_array().unwrap().len(), 2);
    assert!(first["train_consistent"].is_boolean());
    let (status, again) = send(c.post(format!("{base}/sessions/{id}/finalize"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(again["details"]["report"], first);
    let (_, stored) = send(c.get(format!("{base}/sessions/{id}/report"))).await;
    assert_eq!((stored["final"].clone(), stored["report"].clone()), (json!(true), first.clone()));
    let (status, _) = send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    let outcomes: Vec<Value> = audit.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["result"]["outcome"].clone()).collect();
    assert_eq!(outcomes, vec![json!("rejected"), json!("accepted")]);

    // A second process on the same store sees the finalized session as it was.
    let base2 = start(config(dir.path())).await;
    let (_, restored) = send(c.get(format!("{base2}/sessions/{id}/report"))).await;
    assert_eq!(restored, stored);
    assert_eq!(poll_events(&c, &base2, &id, 0).await.len(), 102);
}

#[tokio::test(flavor = "multi_thread")]
async fn interrupted_round_is_replayed_identically() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &base, json!({ "strategy": "sh-hpo", "budget": 30, "seed": 4 })).await;
    assert_eq!(upload(&c, &base, &id).await.0, StatusCode::OK);
    send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    let before = wait_idle(&c, &base, &id).await;
    let events = poll_events(&c, &base, &id, 0).await;

    // Pretend the process died mid-round: state still optimizing, trace cut short.
    let doc_path = dir.path().join("sessions").join(&id).join("session.json");
    let mut doc: Value = serde_json::from_slice(&std::fs::read(&doc_path).unwrap()).unwrap();
    doc["state"] = json!("optimizing");
    doc["best"] = Value::Null;
    doc["interim_report"] = Value::Null;
    std::fs::write(&doc_path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let trace_path = dir.path().join("sessions").join(&id).join("trace.jsonl");
    let trace = std::fs::read_to_string(&trace_path).unwrap();
    let cut: String = trace.lines().take(7).map(|l| format!("{l}\n")).collect();
    std::fs::write(&trace_path, cut + "{\"episode\": 7, \"rou").unwrap();

    let base2 = start(config(dir.path())).await;
    let after = wait_idle(&c, &base2, &id).await;
    assert_eq!(after["state"], "awaiting_feedback");
    assert_eq!(after["best"], before["best"]);
    assert_eq!(after["interim_report"], before["interim_report"]);
    assert_eq!(poll_events(&c, &base2, &id, 0).await, events);
}

#[tokio::test(flavor = "multi_thread")]
async fn llm_feedback_path() {
    let dir = tempfile::tempdir().unwrap();
    let good = stub_llm(
        StatusCode::OK,
        r#"{"actions": [{"kind": "ScaleAmplitude", "params": {"f_low": 1, "f_high": 3}}]}"#,
    )
    .await;
    let mut cfg = config(dir.path());
    cfg.llm.endpoint = Some(good);
    let base = start(cfg).await;
    let c = Client::new();
    let id = create(&c, &base, json!({ "budget": 12 })).await;
    upload(&c, &base, &id).await;
    send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    wait_idle(&c, &base, &id).await;

    let (status, body) = send(
        c.post(format!("{base}/sessions/{id}/feedback"))
            .json(&json!({ "text": "the swings are a bit too small", "path": "llm" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["directive"]["provenance"], "llm");
    assert_eq!(body["directive"]["parsed"][0]["bounds"], json!([[1.0, 3.0]]));

    // Transport failures are retriable and distinct from rejections.
    let dir2 = tempfile::tempdir().unwrap();
    let mut cfg = config(dir2.path());
    cfg.llm.endpoint = Some(stub_llm(StatusCode::INTERNAL_SERVER_ERROR, "").await);
    let base = start(cfg).await;
    let id = create(&c, &base, json!({ "budget": 12 })).await;
    upload(&c, &base, &id).await;
    send(c.post(format!("{base}/sessions/{id}/optimize"))).await;
    wait_idle(&c, &base, &id).await;
    let (status, body) = send(c.post(format!("{base}/sessions/{id}/feedback")).json(&json!({ "text": "x", "path": "llm" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["code"], "llm_unavailable");
    assert_eq!(body["details"]["retriable"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn shared_token() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.token = Some("letmein".into());
    let base = start(cfg).await;
    let c = Client::new();
    assert_eq!(send(c.get(format!("{base}/health"))).await.0, StatusCode::OK);
    let (status, body) = send(c.post(format!("{base}/sessions"))).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");
    let (status, _) = send(c.post(format!("{base}/sessions")).bearer_auth("letmein")).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = send(c.get(format!("{base}/sessions?access_token=letmein"))).await;
    assert_eq!(status, StatusCode::OK);
}
