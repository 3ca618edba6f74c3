//! HTTP/JSON inference service over one immutable model snapshot.
//!
//! Routes:
//! - `GET /model`: configuration summary.
//! - `GET /samples?split=test&offset=0&limit=24`: sample ids, labels and thumbnails.
//! - `GET /samples/{id}/explanation?split=test`: explanation plus input and
//!   reconstruction thumbnails.
//! - `GET /dictionary/{concept}?top_k=7&split=train`: top activating samples.
//! - `POST /intervene`: `{sample_id, forced: {index: "active"|"inactive"}}`.
//!
//! Errors are `{code, message}` with status 400, 404 or 500. Images are
//! inlined as PNG data URIs.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lcbm_core::data::SampleSource;
use lcbm_core::interpret::{
    self, render, DictionaryEntry, Explanation, Forcing, InterventionResult, SampleActivation,
};
use lcbm_core::{Error, Lcbm};
use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PAGE: usize = 24;
pub const MAX_PAGE: usize = 500;
/// Dictionaries are ranked once per split up to this depth.
pub const MAX_TOP_K: usize = 64;

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub dataset: String,
    pub checkpoint: String,
    pub epoch: usize,
    pub seed: u64,
    pub n_concepts: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub image_shape: [usize; 3],
    pub prior: f64,
    pub temperature: f64,
    pub parameters: usize,
    pub splits: BTreeMap<String, usize>,
}

type Ranking = std::result::Result<Arc<Vec<Vec<DictionaryEntry>>>, String>;

pub struct AppState {
    model: Lcbm<f32>,
    summary: ModelSummary,
    parts: BTreeMap<String, Arc<dyn SampleSource>>,
    rankings: BTreeMap<String, OnceLock<Ranking>>,
}

impl AppState {
    pub fn new(
        mut model: Lcbm<f32>,
        dataset: &str,
        checkpoint: &str,
        meta: &lcbm_core::CheckpointMeta,
        parts: BTreeMap<String, Arc<dyn SampleSource>>,
    ) -> Self {
        let cfg = model.config().clone();
        let summary = ModelSummary {
            dataset: dataset.to_string(),
            checkpoint: checkpoint.to_string(),
            epoch: meta.epoch,
            seed: meta.seed,
            n_concepts: cfg.n_concepts,
            embedding_dim: cfg.embedding_dim,
            n_classes: cfg.n_classes,
            image_shape: cfg.image_shape,
            prior: cfg.prior,
            temperature: cfg.temperature,
            parameters: model.param_count(),
            splits: parts.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        };
        let rankings = parts.keys().map(|k| (k.clone(), OnceLock::new())).collect();
        Self {
            model,
            summary,
            parts,
            rankings,
        }
    }

    fn part(&self, split: &str) -> Result<&Arc<dyn SampleSource>, ApiError> {
        self.parts
            .get(split)
            .ok_or_else(|| ApiError::not_found(format!("unknown split `{split}`")))
    }

    fn ranking(&self, split: &str) -> Result<Arc<Vec<Vec<DictionaryEntry>>>, ApiError> {
        let source = self.part(split)?;
        let cell = &self.rankings[split];
        let r = cell.get_or_init(|| {
            let top = MAX_TOP_K.min(source.len()).max(1);
            interpret::build_dictionary(&self.model, source.as_ref(), split, top, "service")
                .map(|d| Arc::new(d.concepts))
                .map_err(|e| e.to_string())
        });
        r.clone().map_err(ApiError::internal)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u16,
    pub message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: m.into(),
        }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: m.into(),
        }
    }

    fn internal(m: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: m.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Request(_) | Error::Data(_) => Self::not_found(e.to_string()),
            Error::Config(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.status.as_u16(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Params = Query<BTreeMap<String, String>>;

fn param<T: std::str::FromStr>(
    q: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, ApiError> {
    match q.get(key) {
        Some(v) => v.parse().map_err(|_| {
            ApiError::bad_request(format!("query parameter `{key}` has invalid value `{v}`"))
        }),
        None => Ok(default),
    }
}

fn split_param(q: &BTreeMap<String, String>, default: &str) -> String {
    q.get("split")
        .cloned()
        .unwrap_or_else(|| default.to_string())
}

fn parse_index(raw: &str, what: &str) -> Result<usize, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::bad_request(format!("{what} `{raw}` is not a non-negative integer")))
}

/// PNG data URI of a `(C, H, W)` image.
pub fn data_uri(image: ArrayView3<'_, f32>) -> Result<String, ApiError> {
    let png = render::encode_png(&render::to_rgb(image, 1))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn model_summary(State(state): State<Arc<AppState>>) -> Json<ModelSummary> {
    Json(state.summary.clone())
}

#[derive(Serialize, Deserialize)]
pub struct SampleItem {
    pub id: usize,
    pub label: usize,
    pub thumbnail: String,
}

#[derive(Serialize, Deserialize)]
pub struct SamplePage {
    pub split: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub samples: Vec<SampleItem>,
}

async fn samples(State(state): State<Arc<AppState>>, Query(q): Params) -> ApiResult<SamplePage> {
    let split = split_param(&q, "test");
    let offset = param(&q, "offset", 0usize)?;
    let limit = param(&q, "limit", DEFAULT_PAGE)?;
    if limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!(
            "limit may not exceed {MAX_PAGE}"
        )));
    }
    blocking(move || {
        let source = state.part(&split)?;
        let total = source.len();
        let idx: Vec<usize> =
            (offset.min(total)..(offset.saturating_add(limit)).min(total)).collect();
        let batch = source.batch(&idx)?;
        let samples = idx
            .iter()
            .enumerate()
            .map(|(b, &id)| {
                Ok(SampleItem {
                    id,
                    label: batch.labels[b],
                    thumbnail: data_uri(batch.images.index_axis(ndarray::Axis(0), b))?,
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(Json(SamplePage {
            split,
            total,
            offset,
            limit,
            samples,
        }))
    })
    .await
}

#[derive(Serialize)]
pub struct ExplanationPayload {
    #[serde(flatten)]
    pub explanation: Explanation,
    pub input_image: String,
    pub reconstruction_image: String,
}

async fn explanation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<ExplanationPayload> {
    let id = parse_index(&id, "sample id")?;
    let split = split_param(&q, "test");
    blocking(move || {
        let source = state.part(&split)?;
        let e = interpret::explain_sample(&state.model, source.as_ref(), &split, id)?;
        let input = source.batch(&[id])?.images;
        let input_image = data_uri(input.index_axis(ndarray::Axis(0), 0))?;
        let recon = e
            .reconstruction
            .as_ref()
            .ok_or_else(|| ApiError::internal("explanation lacks a reconstruction"))?;
        let reconstruction_image = data_uri(recon.view())?;
        Ok(Json(ExplanationPayload {
            explanation: e,
            input_image,
            reconstruction_image,
        }))
    })
    .await
}

#[derive(Serialize, Deserialize)]
pub struct DictionaryItem {
    pub index: usize,
    pub label: usize,
    pub activation: f32,
    pub thumbnail: String,
}

#[derive(Serialize, Deserialize)]
pub struct DictionaryPayload {
    pub concept: usize,
    pub split: String,
    pub top_k: usize,
    pub entries: Vec<DictionaryItem>,
}

async fn dictionary(
    State(state): State<Arc<AppState>>,
    Path(concept): Path<String>,
    Query(q): Params,
) -> ApiResult<DictionaryPayload> {
    let concept = parse_index(&concept, "concept")?;
    let top_k = param(&q, "top_k", interpret::DEFAULT_TOP_K)?;
    if top_k == 0 || top_k > MAX_TOP_K {
        return Err(ApiError::bad_request(format!(
            "top_k must lie in 1..={MAX_TOP_K}"
        )));
    }
    if concept >= state.summary.n_concepts {
        return Err(ApiError::not_found(format!(
            "unknown concept {concept}; the model has {}",
            state.summary.n_concepts
        )));
    }
    let split = split_param(&q, "train");
    blocking(move || {
        let ranking = state.ranking(&split)?;
        let source = state.part(&split)?;
        let chosen: Vec<&DictionaryEntry> = ranking[concept].iter().take(top_k).collect();
        let idx: Vec<usize> = chosen.iter().map(|e| e.index).collect();
        let batch = source.batch(&idx)?;
        let entries = chosen
            .iter()
            .enumerate()
            .map(|(b, e)| {
                Ok(DictionaryItem {
                    index: e.index,
                    label: batch.labels[b],
                    activation: e.activation,
                    thumbnail: data_uri(batch.images.index_axis(ndarray::Axis(0), b))?,
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(Json(DictionaryPayload {
            concept,
            split,
            top_k,
            entries,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionRequest {
    pub sample_id: usize,
    #[serde(default)]
    pub forced: Forcing,
    #[serde(default)]
    pub split: Option<String>,
    /// Also return the counterfactual reconstruction.
    #[serde(default)]
    pub reconstruct: bool,
}

#[derive(Serialize)]
pub struct InterventionPayload {
    pub sample_id: usize,
    pub split: String,
    #[serde(flatten)]
    pub result: InterventionResult,
    pub identical: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterfactual_reconstruction_image: Option<String>,
    /// The decoder never saw prototype-substituted embeddings in training.
    pub reconstruction_advisory: bool,
}

async fn intervene(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<InterventionPayload> {
    let req: InterventionRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    blocking(move || {
        let split = req.split.clone().unwrap_or_else(|| "test".to_string());
        let source = state.part(&split)?;
        if req.sample_id >= source.len() {
            return Err(ApiError::not_found(format!(
                "sample {} outside {split} split of {}",
                req.sample_id,
                source.len()
            )));
        }
        let images = source.batch(&[req.sample_id])?.images;
        let act = SampleActivation::encode(&state.model, images.index_axis(ndarray::Axis(0), 0))?;
        let result = interpret::intervene(&state.model, &act, &req.forced, req.reconstruct)?;
        let counterfactual_reconstruction_image = match &result.counterfactual_reconstruction {
            Some(r) => Some(data_uri(r.view())?),
            None => None,
        };
        Ok(Json(InterventionPayload {
            sample_id: req.sample_id,
            split,
            identical: result.original == result.counterfactual,
            result,
            counterfactual_reconstruction_image,
            reconstruction_advisory: true,
        }))
    })
    .await
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/model", get(model_summary))
        .route("/samples", get(samples))
        .route("/samples/{id}/explanation", get(explanation))
        .route("/dictionary/{concept}", get(dictionary))
        .route("/intervene", post(intervene))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
