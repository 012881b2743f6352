use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{TimeZone, Utc};
use sentinel_core::config::ServiceConfig;
use sentinel_core::pipeline::{MetricsSnapshot, Pipeline, PredictionRecord, QueuePage, ReviewOutcome};
use sentinel_core::sim::{generate_fleet, prepare, run_cycle, simulate, SimScenario};
use sentinel_core::vqa::{ImageDigest, ImageRef, MockScript, TaskKind};
use sentinel_server::{ErrorBody, HttpDriver, ServerHandle};
use serde_json::json;

fn script() -> MockScript {
    let mut s = MockScript::default();
    let clear = ImageDigest::of_bytes(b"clear");
    s.insert(&clear, TaskKind::PlateRecognition, "ABC1234", vec![0.96]).unwrap();
    s.insert(&clear, TaskKind::StateClassification, "Texas", vec![0.99]).unwrap();
    let gh = ImageDigest::of_bytes(b"gh");
    s.insert(&gh, TaskKind::PlateRecognition, "GH345", vec![0.8]).unwrap();
    s.insert(&ImageDigest::of_bytes(b"mid"), TaskKind::PlateRecognition, "ABC1234", vec![0.82]).unwrap();
    s
}

fn start(dir: &Path) -> ServerHandle {
    let path = dir.join("bootstrap.json");
    std::fs::write(&path, serde_json::to_vec(&script()).unwrap()).unwrap();
    let config = ServiceConfig { data_dir: dir.join("state"), bootstrap_script: Some(path), ..ServiceConfig::default() };
    ServerHandle::start(Pipeline::open(config).unwrap(), "127.0.0.1:0").unwrap()
}

fn image(name: &str, quality: f64) -> ImageRef {
    ImageRef::new(name, ImageDigest::of_bytes(name.as_bytes()), 1920, 1080, quality).unwrap()
}

fn recognize_body(name: &str) -> serde_json::Value {
    json!({ "image": image(name, 0.9), "at": Utc.with_ymd_and_hms(2026, 3, 1, 8, 0, 0).unwrap() })
}

#[test]
fn endpoints_round_trip_json() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path());
    let url = server.url();
    let c = reqwest::blocking::Client::new();

    let health: serde_json::Value = c.get(format!("{url}/v1/health")).send().unwrap().json().unwrap();
    assert_eq!(health, json!({ "status": "ok", "active_version": 1 }));

    let post = |path: &str, body: serde_json::Value| c.post(format!("{url}{path}")).json(&body).send().unwrap();
    let clear: PredictionRecord = post("/v1/recognize", recognize_body("clear")).json().unwrap();
    assert_eq!(clear.plate(), Some("ABC1234"));
    let mut queued = Vec::new();
    for name in ["gh", "mid", "nobody"] {
        queued.push(post("/v1/recognize", recognize_body(name)).json::<PredictionRecord>().unwrap().id);
    }

    let bad = post("/v1/recognize", json!({ "image": { "uri": "x" } }));
    assert!(bad.status().is_client_error());

    let page: QueuePage = c.get(format!("{url}/v1/review/queue?limit=2")).send().unwrap().json().unwrap();
    assert_eq!(page.items.iter().map(|p| p.id.clone()).collect::<Vec<_>>(), queued[..2]);
    let cursor = page.next_cursor.unwrap();
    let page: QueuePage = c.get(format!("{url}/v1/review/queue?limit=2&cursor={cursor}")).send().unwrap().json().unwrap();
    assert_eq!(page.items.len(), 1);
    assert_eq!(page.next_cursor, None);
    let r = c.get(format!("{url}/v1/review/queue?cursor=zzz")).send().unwrap();
    assert_eq!(r.status(), 400);

    let fix = json!({ "values": { "plate_recognition": "GHI3456" }, "operator_id": "op" });
    let r = post(&format!("/v1/review/{}/correct", queued[0]), fix.clone());
    assert_eq!(r.status(), 200);
    let outcome: ReviewOutcome = r.json().unwrap();
    assert_eq!(outcome.pending_corrections, 1);
    assert_eq!(post(&format!("/v1/review/{}/correct", queued[0]), fix.clone()).status(), 409);
    assert_eq!(post("/v1/review/p99999999/confirm", json!({})).status(), 404);

    // Same digest and value again from a new prediction: duplicate, item stays.
    let again: PredictionRecord = post("/v1/recognize", recognize_body("gh")).json().unwrap();
    let r = post(&format!("/v1/review/{}/correct", again.id), fix);
    assert_eq!(r.status(), 422);
    let body: ErrorBody = r.json().unwrap();
    assert_eq!(body.outcomes.unwrap().len(), 1);

    assert_eq!(post(&format!("/v1/review/{}/confirm", queued[1]), json!({})).status(), 200);

    let m: MetricsSnapshot = c.get(format!("{url}/v1/metrics")).send().unwrap().json().unwrap();
    assert_eq!(m.predictions, 5);
    assert_eq!(m.pending_corrections, 1);
    assert_eq!(m.queue_length, 2);
    let models: serde_json::Value = c.get(format!("{url}/v1/models")).send().unwrap().json().unwrap();
    assert_eq!(models["current"], 1);
    let r = post("/v1/models/rollback", json!({}));
    assert_eq!(r.status(), 409);
    assert_eq!(c.get(format!("{url}/v1/jobs/job-0001")).send().unwrap().status(), 404);
    server.shutdown().unwrap();
}

#[test]
fn queue_additions_are_pushed_as_server_sent_events() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path());
    let url = server.url();
    let stream = reqwest::blocking::Client::new().get(format!("{url}/v1/events")).send().unwrap();
    assert_eq!(stream.headers()["content-type"], "text/event-stream");

    let c = reqwest::blocking::Client::new();
    let rec: PredictionRecord =
        c.post(format!("{url}/v1/recognize")).json(&recognize_body("gh")).send().unwrap().json().unwrap();
    c.post(format!("{url}/v1/review/{}/confirm", rec.id)).json(&json!({})).send().unwrap();

    let mut seen = Vec::new();
    let mut lines = BufReader::new(stream).lines();
    while seen.len() < 2 {
        let line = lines.next().unwrap().unwrap();
        if let Some(name) = line.strip_prefix("event: ") {
            seen.push(name.to_string());
        } else if let Some(data) = line.strip_prefix("data: ") {
            let v: serde_json::Value = serde_json::from_str(data).unwrap();
            assert_eq!(v["type"], seen.last().unwrap().as_str());
        }
    }
    assert_eq!(seen, ["queue_added", "queue_removed"]);
}

fn scenario() -> SimScenario {
    SimScenario { n_vehicles: 1_500, n_training: 300, probe_size: 100, ..SimScenario::default() }
}

#[test]
fn http_run_matches_in_process_run_byte_for_byte() {
    let s = scenario();
    let local_dir = tempfile::tempdir().unwrap();
    let local = simulate(&s, local_dir.path()).unwrap();
    assert!(!local.jobs.is_empty(), "scenario should retrain at least once");

    let dir = tempfile::tempdir().unwrap();
    let fleet = generate_fleet(&s).unwrap();
    let config = prepare(&s, &fleet, dir.path()).unwrap();
    let server = ServerHandle::start(Pipeline::open(config).unwrap(), "127.0.0.1:0").unwrap();
    let mut driver = HttpDriver::new(&server.url()).unwrap();
    let remote = run_cycle(&s, &fleet, &mut driver).unwrap();
    assert_eq!(local.to_json(), remote.to_json());
}
