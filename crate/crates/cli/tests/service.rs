use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use lcbm_cli::service::{router, AppState};
use lcbm_core::data::{SampleSource, TensorSource};
use lcbm_core::{CheckpointMeta, Lcbm, ModelConfig};
use ndarray::Array4;
use serde_json::{json, Value};
use tower::ServiceExt;

const N: usize = 20;

fn state() -> Arc<AppState> {
    let cfg = ModelConfig {
        n_concepts: 4,
        seed: 11,
        ..ModelConfig::tiny()
    };
    let [c, h, w] = cfg.image_shape;
    let model = Lcbm::<f32>::new(cfg).unwrap();
    let images = Array4::from_shape_fn((N, c, h, w), |(i, ch, y, x)| {
        ((i * 7 + ch * 3 + y * 5 + x) % 11) as f32 / 10.0
    });
    let labels = (0..N).map(|i| i % 2).collect();
    let source = TensorSource::new(images, labels, None, 2).unwrap();
    let mut parts: BTreeMap<String, Arc<dyn SampleSource>> = BTreeMap::new();
    parts.insert("train".into(), Arc::new(source.clone()));
    parts.insert("test".into(), Arc::new(source));
    let meta = CheckpointMeta {
        epoch: 0,
        seed: 11,
        metrics: BTreeMap::new(),
    };
    Arc::new(AppState::new(model, "synthetic", "memory", &meta, parts))
}

async fn call(
    state: &Arc<AppState>,
    method: Method,
    uri: &str,
    body: Option<&str>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    call(state, Method::GET, uri, None).await
}

fn assert_error(status: StatusCode, body: &Value, expected: StatusCode) {
    assert_eq!(status, expected, "{body}");
    assert_eq!(body["code"], expected.as_u16());
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn model_summary_lists_splits() {
    let s = state();
    let (status, body) = get(&s, "/model").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["n_concepts"], 4);
    assert_eq!(body["splits"]["test"], N);
}

#[tokio::test]
async fn samples_are_paged() {
    let s = state();
    let (status, body) = get(&s, "/samples?offset=15&limit=10").await;
    assert_eq!(status, StatusCode::OK);
    let items = body["samples"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert_eq!(items[0]["id"], 15);
    assert!(items[0]["thumbnail"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    let (status, body) = get(&s, "/samples?limit=501").await;
    assert_error(status, &body, StatusCode::BAD_REQUEST);
    let (status, body) = get(&s, "/samples?split=nope").await;
    assert_error(status, &body, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn explanation_importances_sum_to_the_score() {
    let s = state();
    for id in [0, 7, 19] {
        let (status, body) = get(&s, &format!("/samples/{id}/explanation")).await;
        assert_eq!(status, StatusCode::OK);
        let total: f64 = body["concepts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["importance"].as_f64().unwrap())
            .sum();
        let score = body["predicted_score"].as_f64().unwrap();
        assert!((total - score).abs() <= 1e-5, "{total} vs {score}");
        assert_eq!(body["concepts"].as_array().unwrap().len(), 4);
        assert!(body["reconstruction_image"]
            .as_str()
            .unwrap()
            .starts_with("data:image/png"));
    }
    let (status, body) = get(&s, "/samples/20/explanation").await;
    assert_error(status, &body, StatusCode::NOT_FOUND);
    let (status, body) = get(&s, "/samples/abc/explanation").await;
    assert_error(status, &body, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn dictionary_returns_sorted_top_entries() {
    let s = state();
    let (status, body) = get(&s, "/dictionary/2").await;
    assert_eq!(status, StatusCode::OK);
    let entries = body["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 7);
    let acts: Vec<f64> = entries
        .iter()
        .map(|e| e["activation"].as_f64().unwrap())
        .collect();
    assert!(acts.windows(2).all(|w| w[0] >= w[1]), "{acts:?}");
    let (_, again) = get(&s, "/dictionary/2?top_k=3").await;
    let first: Vec<&Value> = entries.iter().take(3).map(|e| &e["index"]).collect();
    let second: Vec<&Value> = again["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| &e["index"])
        .collect();
    assert_eq!(first, second);

    let (status, body) = get(&s, "/dictionary/4").await;
    assert_error(status, &body, StatusCode::NOT_FOUND);
    let (status, body) = get(&s, "/dictionary/0?top_k=0").await;
    assert_error(status, &body, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn empty_intervention_is_identical() {
    let s = state();
    let (status, body) = call(
        &s,
        Method::POST,
        "/intervene",
        Some(r#"{"sample_id": 3, "forced": {}}"#),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["identical"], true);
    assert_eq!(body["original"], body["counterfactual"]);
    assert!(body["score_deltas"]
        .as_array()
        .unwrap()
        .iter()
        .all(|d| d.as_f64() == Some(0.0)));
}

#[tokio::test]
async fn forcing_changes_only_requested_concepts() {
    let s = state();
    let req =
        json!({"sample_id": 5, "forced": {"1": "active", "3": "inactive"}, "reconstruct": true});
    let (status, body) = call(&s, Method::POST, "/intervene", Some(&req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let before = body["original"]["concept_scores"].as_array().unwrap();
    let after = body["counterfactual"]["concept_scores"].as_array().unwrap();
    assert_eq!(after[1], 1.0);
    assert_eq!(after[3], 0.0);
    assert_eq!((&after[0], &after[2]), (&before[0], &before[2]));
    assert!(body["counterfactual_reconstruction_image"]
        .as_str()
        .is_some());
    assert_eq!(body["reconstruction_advisory"], true);
}

#[tokio::test]
async fn bad_intervention_requests() {
    let s = state();
    for (body, code) in [
        ("not json", StatusCode::BAD_REQUEST),
        (r#"{"sample_id": 1, "extra": 2}"#, StatusCode::BAD_REQUEST),
        (
            r#"{"sample_id": 1, "forced": {"0": "maybe"}}"#,
            StatusCode::BAD_REQUEST,
        ),
        (r#"{"sample_id": 99}"#, StatusCode::NOT_FOUND),
        (
            r#"{"sample_id": 1, "forced": {"9": "active"}}"#,
            StatusCode::NOT_FOUND,
        ),
    ] {
        let (status, value) = call(&s, Method::POST, "/intervene", Some(body)).await;
        assert_error(status, &value, code);
    }
    let (status, value) = get(&s, "/nowhere").await;
    assert_error(status, &value, StatusCode::NOT_FOUND);
}
