use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bcomm_core::atlas::{AtlasConfig, EmbeddingAtlas};
use bcomm_core::checkpoint::{load_checkpoint, save_checkpoint};
use bcomm_core::dataset::save_atlas;
use bcomm_core::envs::{EnvConfig, PredPreyConfig};
use bcomm_core::probes::build_probe_dataset;
use bcomm_core::trainer::{evaluate_policy, init_params, TrainConfig};
use bcomm_core::{AttentionMode, Protocol};
use bcomm_gateway::api::{router, AppState};
use bcomm_gateway::registry::{Registry, ATLAS_FILE};
use bcomm_gateway::GatewayError;
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_checkpoint(root: &Path, id: &str, protocol: Protocol, with_atlas: bool) {
    let env = EnvConfig::PredPrey(PredPreyConfig::default());
    let cfg = TrainConfig { seed: 11, ..TrainConfig::default() };
    let (policy, value) = init_params(&env, protocol, AttentionMode::Learned, &cfg);
    let dir = root.join(id);
    save_checkpoint(&dir, &policy, value.as_ref(), &env, 0, 11).unwrap();
    if with_atlas {
        let pairs: Vec<_> = build_probe_dataset(&policy, &env, 2, 3)
            .unwrap()
            .into_iter()
            .map(|r| (r.observation, r.message))
            .collect();
        let config = AtlasConfig {
            perplexity: 10.0,
            iterations: 150,
            momentum_switch: 75,
            exaggeration_iters: 50,
            ..AtlasConfig::default()
        };
        let atlas = EmbeddingAtlas::build(&pairs, protocol, &config, id).unwrap();
        save_atlas(&dir.join(ATLAS_FILE), &atlas).unwrap();
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    state: Arc<AppState>,
    app: Router,
}

fn fixture(idle: Duration) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    write_checkpoint(&root, "b4", Protocol::bitstring(4), true);
    write_checkpoint(&root, "c4", Protocol::continuous(4), false);
    let state = AppState::new(Registry::new(&root), idle);
    let app = router(state.clone());
    Fixture { _dir: dir, root, state, app }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn checkpoints_and_atlas_are_listed() {
    let f = fixture(Duration::from_secs(60));
    let (status, v) = call(&f.app, "GET", "/checkpoints", None).await;
    assert_eq!(status, StatusCode::OK);
    let mut ids: Vec<_> = v.as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    ids.sort();
    assert_eq!(ids, ["b4", "c4"]);

    let (status, v) = call(&f.app, "GET", "/atlas/b4", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["checkpoint_id"], "b4");
    let entries = v["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        assert!(e["label"].as_u64().unwrap() < 16);
        assert!(e["x"].as_f64().unwrap().is_finite());
    }
    assert!(v["final_kl"].as_f64().unwrap() < v["initial_kl"].as_f64().unwrap());

    for uri in ["/atlas/c4", "/atlas/nope", "/atlas/..", "/sessions/nope"] {
        let (status, v) = call(&f.app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn human_session_plays_a_full_episode() {
    let f = fixture(Duration::from_secs(60));
    let id = create(&f.app, json!({"checkpoint_id": "b4", "seed": 4, "modes": {"0": "human"}})).await;
    let (_, view) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(view["step_index"], 0);
    assert_eq!(view["vocab_size"], 16);
    assert_eq!(view["env"]["env"], "predprey");
    assert_eq!(view["agents"][0]["mode"], "human");
    assert!(view["agents"][1]["recommendation"].is_null());
    assert_eq!(view["agents"].as_array().unwrap().len(), 4);
    for a in view["agents"].as_array().unwrap() {
        assert_eq!(a["projection"]["neighbors"].as_array().unwrap().len(), 5);
    }

    let uri = format!("/sessions/{id}/step");
    let (status, _) = call(&f.app, "POST", &uri, Some(json!({"human_messages": {}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&f.app, "POST", &uri, Some(json!({"human_messages": {"0": 16}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&f.app, "POST", &uri, Some(json!({"human_messages": {"0": 1, "2": 1}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut rewards = 0.0;
    let mut view = view;
    for step in 0..50 {
        let rec = view["agents"][0]["recommendation"]["label"].as_u64().unwrap();
        let hist: u64 = view["agents"][0]["recommendation"]["histogram"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(hist, 5);
        let body = json!({"human_messages": {"0": rec}, "step_index": step});
        let (status, out) = call(&f.app, "POST", &uri, Some(body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{out}");
        assert_eq!(out["step_index"], step);
        assert_eq!(out["state"]["agents"][0]["last"]["message_label"], rec);
        rewards += out["reward"].as_f64().unwrap();
        assert_eq!(out["done"], step == 49);
        // Resubmitting the same step is stale.
        let (status, _) = call(&f.app, "POST", &uri, Some(body)).await;
        assert_eq!(status, StatusCode::CONFLICT);
        view = out["state"].clone();
    }
    assert!((view["cumulative_return"].as_f64().unwrap() - rewards).abs() < 1e-9);
    assert_eq!(view["done"], true);
    let (status, _) = call(&f.app, "POST", &uri, Some(json!({"human_messages": {"0": 0}}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, after) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["cumulative_return"], view["cumulative_return"]);
}

#[tokio::test]
async fn agent_session_matches_evaluation() {
    let f = fixture(Duration::from_secs(60));
    let id = create(&f.app, json!({"checkpoint_id": "c4", "seed": 21})).await;
    let uri = format!("/sessions/{id}/step");
    let mut last = Value::Null;
    for _ in 0..50 {
        let (status, out) = call(&f.app, "POST", &uri, Some(json!({}))).await;
        assert_eq!(status, StatusCode::OK);
        last = out;
    }
    let ck = load_checkpoint(&f.root.join("c4")).unwrap();
    let expected = evaluate_policy(&ck.manifest.env, &ck.policy, 1, 21).unwrap().mean_return;
    assert_eq!(last["cumulative_return"].as_f64().unwrap(), expected);
}

#[tokio::test]
async fn session_requests_are_validated() {
    let f = fixture(Duration::from_secs(60));
    let cases = [
        (json!({"checkpoint_id": "missing"}), StatusCode::NOT_FOUND),
        (json!({"checkpoint_id": "c4", "modes": {"0": "human"}}), StatusCode::BAD_REQUEST),
        (json!({"checkpoint_id": "b4", "modes": ["agent", "agent"]}), StatusCode::BAD_REQUEST),
        (json!({"checkpoint_id": "b4", "modes": {"7": "random"}}), StatusCode::BAD_REQUEST),
        (json!({"checkpoint_id": "b4", "env_overrides": {"vision": 3}}), StatusCode::BAD_REQUEST),
        (json!({"checkpoint_id": "b4", "env_overrides": {"speed": 2}}), StatusCode::BAD_REQUEST),
    ];
    for (body, expected) in cases {
        let (status, v) = call(&f.app, "POST", "/sessions", Some(body.clone())).await;
        assert_eq!(status, expected, "{body}: {v}");
        assert!(v["error"].is_string());
    }
    let id = create(&f.app, json!({"checkpoint_id": "b4", "env_overrides": {"horizon": 7}})).await;
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["horizon"], 7);
}

#[tokio::test]
async fn concurrent_steps_on_one_session_conflict() {
    let f = fixture(Duration::from_secs(60));
    let id = create(&f.app, json!({"checkpoint_id": "b4", "modes": ["random", "agent", "agent", "agent"]})).await;
    let entry = f.state.sessions.get(&id).unwrap();
    let inner = entry.clone();
    let out = entry
        .step(|s| {
            let nested = inner.step(|s2| s2.step(&BTreeMap::new(), None));
            assert!(matches!(nested, Err(GatewayError::Conflict(_))));
            assert!(matches!(inner.view(), Err(GatewayError::Conflict(_))));
            s.step(&BTreeMap::new(), None)
        })
        .unwrap();
    assert_eq!(out.step_index, 0);
    assert_eq!(entry.view().unwrap().step_index, 1);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let f = fixture(Duration::ZERO);
    let id = create(&f.app, json!({"checkpoint_id": "b4"})).await;
    let (status, _) = call(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(f.state.sessions.is_empty());
}

#[tokio::test]
async fn websocket_pushes_every_step() {
    let f = fixture(Duration::from_secs(60));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = f.app.clone();
    let server = tokio::spawn(async move { axum::serve(listener, app).await });

    let id = create(&f.app, json!({"checkpoint_id": "b4", "seed": 8, "modes": {"2": "human"}})).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws"))
        .await
        .unwrap();
    let uri = format!("/sessions/{id}/step");
    let mut reported = 0.0;
    for step in 0..50 {
        let body = json!({"human_messages": {"2": step % 16}, "step_index": step});
        let (status, out) = call(&f.app, "POST", &uri, Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        reported = out["cumulative_return"].as_f64().unwrap();
    }
    let mut pushed = Vec::new();
    while pushed.len() < 50 {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("push within timeout")
            .unwrap()
            .unwrap();
        if let tokio_tungstenite::tungstenite::Message::Text(t) = msg {
            pushed.push(serde_json::from_str::<Value>(&t).unwrap());
        }
    }
    for (k, p) in pushed.iter().enumerate() {
        assert_eq!(p["step_index"], k);
        assert_eq!(p["session_id"], id.as_str());
    }
    assert_eq!(pushed[49]["done"], true);
    assert_eq!(pushed[49]["cumulative_return"].as_f64().unwrap(), reported);

    let (status, _) = call(&f.app, "GET", "/sessions/unknown/ws", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, v) = call(&f.app, "GET", &format!("/sessions/{id}/ws"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    server.abort();
}
