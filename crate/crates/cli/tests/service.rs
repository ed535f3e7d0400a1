use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use apmg_cli::artifact::Artifact;
use apmg_cli::server::{router, serve, AppState};
use apmg_core::render::Field;
use apmg_core::{synth_volume, SynthSpec, Volume};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body.to_string())).unwrap();
    let res = router(state.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn as_json(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

fn request_body(id: &str) -> Value {
    json!({
        "request_id": id,
        "camera": {"eye": [1.8, 1.2, 2.6], "look_at": [0, 0, 0], "up": [0, 1, 0], "fov": 40, "width": 32, "height": 24},
        "samples_per_ray": 40,
    })
}

#[tokio::test]
async fn http_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let vol = synth_volume(&SynthSpec::two_blob(12)).unwrap();
    vol.save(dir.path().join("blobs.raw")).unwrap();
    std::fs::write(dir.path().join("orphan.raw"), [0u8; 8]).unwrap();
    let state = AppState::new(dir.path());

    let body = request_body("a").to_string();
    let (s, b) = call(&state, "POST", "/api/render", &body).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(as_json(&b)["error"].is_string());
    assert_eq!(call(&state, "GET", "/api/meta", "").await.0, StatusCode::CONFLICT);

    let (s, b) = call(&state, "GET", "/api/models", "").await;
    assert_eq!(s, StatusCode::OK);
    let list = as_json(&b);
    assert_eq!(list.as_array().unwrap().len(), 1, "{list}");
    assert_eq!(list[0]["path"], "blobs.raw");

    assert_eq!(call(&state, "POST", "/api/load", r#"{"path":"missing.apmg"}"#).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&state, "POST", "/api/load", r#"{"path":"../etc"}"#).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&state, "POST", "/api/load", "{not json").await.0, StatusCode::BAD_REQUEST);

    let (s, b) = call(&state, "POST", "/api/load", r#"{"path":"blobs.raw"}"#).await;
    assert_eq!(s, StatusCode::OK);
    let meta = as_json(&b);
    assert_eq!(meta["kind"], "volume");
    assert_eq!(meta["dims"], json!([12, 12, 12]));
    assert_eq!(as_json(&call(&state, "GET", "/api/meta", "").await.1), meta);

    assert_eq!(call(&state, "POST", "/api/render", "[1,").await.0, StatusCode::BAD_REQUEST);
    let mut bad = request_body("b");
    bad["camera"]["fov"] = json!(0);
    assert_eq!(call(&state, "POST", "/api/render", &bad.to_string()).await.0, StatusCode::BAD_REQUEST);

    let (s, png) = call(&state, "POST", "/api/render", &body).await;
    assert_eq!(s, StatusCode::OK);

    // the command line renders the same bytes
    std::fs::write(dir.path().join("cam.json"), request_body("")["camera"].to_string()).unwrap();
    let out = dir.path().join("cli.png");
    let st = Command::new(env!("CARGO_BIN_EXE_apmg"))
        .args(["render", "--model", dir.path().join("blobs.raw").to_str().unwrap()])
        .args(["--camera", dir.path().join("cam.json").to_str().unwrap(), "--samples", "40"])
        .args(["--out", out.to_str().unwrap()])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(png, std::fs::read(&out).unwrap());

    let stats = as_json(&call(&state, "GET", "/api/stats", "").await.1);
    assert_eq!(stats["frames"], 1);
    assert!(stats["last_points"].as_u64().unwrap() > 0);
    assert!(stats["points_per_sec"].as_f64().unwrap() > 0.0);
}

/// Sleeps on every batch so a render spans many pass boundaries.
struct Slow(Volume);

impl Field for Slow {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]) {
        std::thread::sleep(Duration::from_micros(300));
        self.0.eval(points, out)
    }
    fn value_range(&self) -> (f64, f64) {
        self.0.value_range()
    }
}

async fn next_json<S>(ws: &mut S) -> Value
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn progressive_session_cancels_superseded_render() {
    let state = AppState::new(".");
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state.clone()));

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/progressive")).await.unwrap();
    ws.send(Message::Text(request_body("early").to_string().into())).await.unwrap();
    let m = next_json(&mut ws).await;
    assert_eq!(m["error"], "no artifact loaded");
    assert_eq!(m["request_id"], "early");
    ws.send(Message::Text("nope".into())).await.unwrap();
    assert!(next_json(&mut ws).await["error"].is_string());

    let vol = synth_volume(&SynthSpec::one_blob(12)).unwrap();
    state.set_artifact(Artifact::Custom { dims: [12; 3], field: Arc::new(Slow(vol)) }, "slow");

    let mut first = request_body("first");
    first["batch_size"] = json!(64);
    let mut second = request_body("second");
    second["batch_size"] = json!(64);
    ws.send(Message::Text(first.to_string().into())).await.unwrap();
    // let the first render get going before superseding it
    assert_eq!(next_json(&mut ws).await["request_id"], "first");
    ws.send(Message::Text(second.to_string().into())).await.unwrap();

    let mut first_end = None;
    let mut passes = Vec::new();
    loop {
        let m = next_json(&mut ws).await;
        match m["request_id"].as_str().unwrap() {
            "first" => {
                assert!(passes.is_empty(), "first request still streaming after the second began");
                if m.get("pass_index").is_none() {
                    first_end = Some(m);
                }
            }
            "second" => {
                if m["done"] == true {
                    break;
                }
                assert!(m.get("cancelled").is_none());
                passes.push(m);
            }
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(first_end.unwrap()["cancelled"], true);
    let total = passes[0]["passes"].as_u64().unwrap() as usize;
    assert_eq!(passes.len(), total);
    for (i, p) in passes.iter().enumerate() {
        assert_eq!(p["pass_index"], i);
    }

    let last = base64::engine::general_purpose::STANDARD.decode(passes[total - 1]["png"].as_str().unwrap()).unwrap();
    let (s, png) = call(&state, "POST", "/api/render", &second.to_string()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(last, png);
    ws.close(None).await.unwrap();
}
