use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lossatlas_core::atlas::bundle::check_envelope;
use lossatlas_core::atlas::{parse_manifest, run_experiment, AtlasBundle, RunOptions};
use lossatlas_service::{router, AppState, ExperimentStatus, ExperimentStore, JobQueue, JobState, StoreError};
use serde_json::Value;
use tower::ServiceExt;

const TINY: &str = r#"
name = "tiny"
metrics = ["accuracy", "loss"]

[task]
kind = "classification"
n = 64
data_seed = 3

[train]
optimizer = "sgd"
learning_rate = 0.1
epochs = 4
batch_size = 16

[analysis]
hessian_k = 2
resolution = 5
mc_grid_points = 5
connector_steps = 3
probe_count = 16

[[configs]]
id = "A"
layer_widths = [2, 6, 2]
activation = "tanh"
seeds = [0, 1]

[[configs]]
id = "B"
layer_widths = [2, 6, 6, 2]
activation = "relu"
residual = true
seeds = [0, 1]
"#;

fn tiny_bundle() -> AtlasBundle {
    let m = parse_manifest(TINY).unwrap();
    run_experiment(&m, &RunOptions::default()).unwrap().0
}

fn app_with_bundle(dir: &std::path::Path) -> (Router, AtlasBundle) {
    let store = ExperimentStore::open(dir).unwrap();
    let bundle = tiny_bundle();
    store.save_bundle(&bundle).unwrap();
    (router(AppState::new(store)), bundle)
}

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, "GET", uri, "").await
}

#[test]
fn save_then_load_round_trips_and_dedups() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::open(dir.path()).unwrap();
    let bundle = tiny_bundle();
    let id = store.save_bundle(&bundle).unwrap();
    assert_eq!(id, bundle.experiment_id);
    assert_eq!(store.load_bundle(&id).unwrap(), bundle);
    assert_eq!(store.save_bundle(&bundle).unwrap(), id);
    assert_eq!(store.list().len(), 1);

    let reopened = ExperimentStore::open(dir.path()).unwrap();
    assert_eq!(reopened.list().len(), 1);
    assert_eq!(reopened.get(&id).unwrap().status, ExperimentStatus::Complete);
    assert_eq!(reopened.load_bundle(&id).unwrap(), bundle);
}

#[test]
fn unknown_id_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::open(dir.path()).unwrap();
    assert!(matches!(store.load_bundle("0123456789abcdef"), Err(StoreError::NotFound(_))));
}

#[test]
fn corrupt_file_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::open(dir.path()).unwrap();
    let bundle = tiny_bundle();
    let id = store.save_bundle(&bundle).unwrap();
    let graph = store.bundle_dir(&id).join("graph.json");
    std::fs::write(&graph, "{\"schema_version\": 1, \"kind\": \"global_graph\", \"data\": 7}").unwrap();
    let err = store.load_bundle(&id).unwrap_err();
    assert!(err.to_string().contains("graph.json"), "{err}");
}

#[test]
fn index_survives_a_missing_bundle_directory() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::open(dir.path()).unwrap();
    let id = store.save_bundle(&tiny_bundle()).unwrap();
    std::fs::remove_dir_all(store.bundle_dir(&id)).unwrap();
    let reopened = ExperimentStore::open(dir.path()).unwrap();
    assert!(reopened.list().is_empty());
}

#[tokio::test]
async fn read_endpoints_serve_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let (app, bundle) = app_with_bundle(dir.path());
    let id = &bundle.experiment_id;

    let (s, list) = get(&app, "/api/experiments").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list["kind"], "experiment_list");
    assert_eq!(list["data"][0]["experiment_id"], id.as_str());
    assert_eq!(list["data"][0]["status"], "complete");

    let (s, index) = get(&app, &format!("/api/experiments/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    check_envelope("bundle_index", &index).unwrap();

    let (s, graph) = get(&app, &format!("/api/experiments/{id}/global")).await;
    assert_eq!(s, StatusCode::OK);
    check_envelope("global_graph", &graph).unwrap();
    assert_eq!(graph["data"]["nodes"].as_array().unwrap().len(), 4);
    assert_eq!(graph["data"]["edges"].as_array().unwrap().len(), 2);

    for (artifact, kind) in [
        ("landscape", "landscape"),
        ("mergetree", "merge_tree"),
        ("persistence", "persistence"),
        ("hessian", "hessian"),
        ("record", "model_record"),
    ] {
        let (s, v) = get(&app, &format!("/api/experiments/{id}/models/A-s0/{artifact}")).await;
        assert_eq!(s, StatusCode::OK, "{artifact}");
        check_envelope(kind, &v).unwrap();
    }
    for (metric, kind) in [("mc", "mode_connectivity"), ("cka", "cka")] {
        let (s, v) = get(&app, &format!("/api/experiments/{id}/pairs/B-s0/B-s1/{metric}")).await;
        assert_eq!(s, StatusCode::OK, "{metric}");
        check_envelope(kind, &v).unwrap();
    }
    // Mode connectivity is only defined within a config group.
    let (s, v) = get(&app, &format!("/api/experiments/{id}/pairs/A-s0/B-s1/cka")).await;
    assert_eq!(s, StatusCode::OK);
    check_envelope("cka", &v).unwrap();
    let (s, _) = get(&app, &format!("/api/experiments/{id}/pairs/A-s0/B-s1/mc")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn pair_order_does_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let (app, bundle) = app_with_bundle(dir.path());
    let id = &bundle.experiment_id;
    for metric in ["mc", "cka"] {
        let (s1, ab) = get(&app, &format!("/api/experiments/{id}/pairs/A-s0/A-s1/{metric}")).await;
        let (s2, ba) = get(&app, &format!("/api/experiments/{id}/pairs/A-s1/A-s0/{metric}")).await;
        assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
        assert_eq!(ab, ba);
    }
}

#[tokio::test]
async fn error_paths_use_documented_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (app, bundle) = app_with_bundle(dir.path());
    let id = &bundle.experiment_id;

    for uri in [
        "/api/nope".to_string(),
        "/".to_string(),
        "/api/experiments/ffffffffffffffff/global".to_string(),
        format!("/api/experiments/{id}/models/Z-s9/landscape"),
        format!("/api/experiments/{id}/models/A-s0/weights"),
        format!("/api/experiments/{id}/pairs/A-s0/A-s1/distance"),
        format!("/api/experiments/{id}/models/..%2F..%2Findex.json/record"),
        "/api/jobs/job-999999".to_string(),
    ] {
        let (s, v) = get(&app, &uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"], "not_found", "{uri}");
    }

    let bad = TINY.replace("epochs = 4", "epochs = -3");
    let (s, v) = call(&app, "POST", "/api/experiments", &bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_manifest");
    assert!(v["fields"].as_array().unwrap().iter().any(|f| f["field"] == "train.epochs"), "{v}");

    let (s, v) = call(&app, "POST", "/api/experiments", "name = ").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(!v["fields"].as_array().unwrap().is_empty());

    std::fs::write(dir.path().join("experiments").join(id).join("graph.json"), "not json").unwrap();
    let (s, v) = get(&app, &format!("/api/experiments/{id}/global")).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(v["error"], "internal");
    assert!(v["error_id"].as_str().is_some_and(|e| !e.is_empty()));
    assert!(!v.to_string().contains("graph.json"));
}

async fn wait_for_job(app: &Router, job_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(300);
    let mut last = -1.0;
    loop {
        let (s, v) = get(app, &format!("/api/jobs/{job_id}")).await;
        assert_eq!(s, StatusCode::OK);
        check_envelope("job", &v).unwrap_or(());
        let progress = v["data"]["progress"].as_f64().unwrap();
        assert!(progress >= last, "progress went from {last} to {progress}");
        last = progress;
        match v["data"]["state"].as_str().unwrap() {
            "complete" | "partial" | "failed" => return v,
            _ => {}
        }
        assert!(Instant::now() < deadline, "job did not finish");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn posted_manifest_runs_to_completion_and_dedups() {
    let dir = tempfile::tempdir().unwrap();
    let store = ExperimentStore::open(dir.path()).unwrap();
    let app = router(AppState::new(store));

    let (s, accepted) = call(&app, "POST", "/api/experiments", TINY).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(accepted["kind"], "job");
    let job_id = accepted["data"]["job_id"].as_str().unwrap().to_string();
    let experiment_id = accepted["data"]["experiment_id"].as_str().unwrap().to_string();

    let done = wait_for_job(&app, &job_id).await;
    assert_eq!(done["data"]["state"], "complete", "{done}");
    assert_eq!(done["data"]["progress"], 1.0);

    let (s, graph) = get(&app, &format!("/api/experiments/{experiment_id}/global")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(graph["data"]["nodes"].as_array().unwrap().len(), 4);

    let (s, again) = call(&app, "POST", "/api/experiments", TINY).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(again["data"]["experiment_id"], experiment_id.as_str());
    assert_eq!(again["data"]["state"], "complete");
    let (_, list) = get(&app, "/api/experiments").await;
    assert_eq!(list["data"].as_array().unwrap().len(), 1);
}

#[test]
fn diverged_models_give_a_partial_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(ExperimentStore::open(dir.path()).unwrap());
    let queue = JobQueue::start(Arc::clone(&store));
    let text = TINY.replace("learning_rate = 0.1", "learning_rate = 1e308");
    let record = queue.submit(parse_manifest(&text).unwrap()).unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    let done = loop {
        let r = queue.get(&record.job_id).unwrap();
        if r.state.is_terminal() {
            break r;
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(done.state, JobState::Partial);
    assert_eq!(done.errors.len(), 4, "{:?}", done.errors);
    assert!(done.errors.iter().all(|e| e.starts_with("train ")));
    assert_eq!(store.get(&record.experiment_id).unwrap().status, ExperimentStatus::Partial);
    let bundle = store.load_bundle(&record.experiment_id).unwrap();
    assert!(bundle.graph.nodes.is_empty());
}
