//! Inference-only HTTP service.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/health` | | `{"status":"ok","models":N}` |
//! | GET | `/models` | | model ids, resolutions and palettes |
//! | POST | `/synthesize` | [`SynthesisRequest`] | `image/png` |
//! | POST | `/interpolate` | [`InterpolationRequest`] | `multipart/mixed` of PNG frames |
//!
//! Errors are JSON `{"error": ..., "index": {"x","y","value"}?}` with 404 for an
//! unknown model, 413 for an oversized label map and 422 for invalid requests.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use histosynth_core::data_model::{denormalize, png_dimensions_from_bytes, ClassPalette, LabelMap, LatentVector};
use histosynth_core::latent::{interpolation_latents, lerp, seed_latent};
use histosynth_core::networks::Generator;
use histosynth_core::training::load_generator;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MULTIPART_BOUNDARY: &str = "histosynth-frame-boundary-7c1f0e";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint_dir: PathBuf,
    pub max_pixels: usize,
    pub max_steps: usize,
    /// Seed used when a request names no latent.
    pub default_seed: u64,
}

pub struct Model {
    pub id: String,
    pub generator: Generator<f32>,
    pub palette: ClassPalette,
}

impl Model {
    pub fn new(id: impl Into<String>, generator: Generator<f32>, palette: Option<ClassPalette>) -> Result<Self, CliError> {
        let palette = match palette {
            Some(p) => p,
            None => ClassPalette::generic(generator.cfg.num_classes)?,
        };
        Ok(Self {
            id: id.into(),
            generator,
            palette,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generator.cfg.resolution
    }

    pub fn num_classes(&self) -> usize {
        self.generator.cfg.num_classes
    }

    /// Hash of parameters and running statistics.
    pub fn digest(&self) -> String {
        format!("{}:{}", self.generator.params.digest(), self.generator.buffers.digest())
    }
}

/// Read-only state shared by all handlers.
pub struct AppState {
    models: BTreeMap<String, Arc<Model>>,
    max_pixels: usize,
    max_steps: usize,
    default_seed: u64,
}

impl AppState {
    pub fn new(models: Vec<Model>, max_pixels: usize, max_steps: usize, default_seed: u64) -> Result<Self, CliError> {
        if models.is_empty() {
            return Err(CliError::Usage("no generator checkpoints to serve".into()));
        }
        if max_pixels == 0 || max_steps < 2 {
            return Err(CliError::Usage("max pixels must be positive and max steps at least 2".into()));
        }
        let mut map = BTreeMap::new();
        for m in models {
            if map.contains_key(&m.id) {
                return Err(CliError::Usage(format!("duplicate model id {}", m.id)));
            }
            map.insert(m.id.clone(), Arc::new(m));
        }
        Ok(Self {
            models: map,
            max_pixels,
            max_steps,
            default_seed,
        })
    }

    /// Every `*.ckpt` generator checkpoint in `dir`, keyed by file stem.
    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, CliError> {
        Self::new(
            load_models(&cfg.checkpoint_dir)?,
            cfg.max_pixels,
            cfg.max_steps,
            cfg.default_seed,
        )
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.models.iter().map(|(k, m)| (k.clone(), m.digest())).collect()
    }

    fn model(&self, id: Option<&str>) -> Result<Arc<Model>, ApiError> {
        match id {
            Some(id) => self
                .models
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{id}`"))),
            None => Ok(self.models.values().next().expect("at least one model").clone()),
        }
    }
}

pub fn load_models(dir: &Path) -> Result<Vec<Model>, CliError> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("ckpt") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut models = Vec::new();
    for p in paths {
        match load_generator(&p) {
            Ok((_, g, palette)) => {
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                log::info!("loaded model {id} from {}", p.display());
                models.push(Model::new(id, g, palette)?);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(models)
}

#[derive(Debug, Serialize)]
pub struct LabelIndex {
    pub x: usize,
    pub y: usize,
    pub value: u8,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<LabelIndex>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: msg.into(),
                index: None,
            },
        }
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }
}

impl From<histosynth_core::Error> for ApiError {
    fn from(e: histosynth_core::Error) -> Self {
        use histosynth_core::Error as E;
        match e {
            E::InvalidLabel { value, x, y, .. } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody {
                    error: e.to_string(),
                    index: Some(LabelIndex { x, y, value }),
                },
            },
            E::Shape(_) | E::Png(_) | E::Range(_) | E::Config(_) => Self::invalid(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

/// Body of `POST /synthesize`. At most one of `seed`, `latent` and
/// `latents` + `t` may be given; with none, the service's default seed is used.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Base64 of an 8-bit grayscale or indexed PNG; pixel value = class.
    pub labels_png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<[Vec<f64>; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

/// Either a seed or an explicit latent.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
}

/// Body of `POST /interpolate`: frames at `t = i / (steps − 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub labels_png: String,
    pub from: LatentSource,
    pub to: LatentSource,
    pub steps: usize,
}

fn latent(v: &[f64]) -> Result<LatentVector, ApiError> {
    Ok(LatentVector::new(v.to_vec())?)
}

fn source_latent(s: &LatentSource) -> Result<LatentVector, ApiError> {
    match (&s.seed, &s.latent) {
        (Some(seed), None) => Ok(seed_latent(*seed)),
        (None, Some(v)) => latent(v),
        _ => Err(ApiError::invalid("each endpoint needs exactly one of `seed` or `latent`")),
    }
}

impl SynthesisRequest {
    fn resolve_latent(&self, default_seed: u64) -> Result<LatentVector, ApiError> {
        let given = [self.seed.is_some(), self.latent.is_some(), self.latents.is_some() || self.t.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given > 1 {
            return Err(ApiError::invalid("give at most one of `seed`, `latent`, `latents` + `t`"));
        }
        if let Some(v) = &self.latent {
            return latent(v);
        }
        match (&self.latents, self.t) {
            (Some([a, b]), Some(t)) => return Ok(lerp(&latent(a)?, &latent(b)?, t)?),
            (None, None) => {}
            _ => return Err(ApiError::invalid("`latents` and `t` go together")),
        }
        Ok(seed_latent(self.seed.unwrap_or(default_seed)))
    }
}

/// Size check before decoding, then full label validation.
fn decode_labels(state: &AppState, model: &Model, b64: &str) -> Result<LabelMap, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::invalid(format!("labels_png is not base64: {e}")))?;
    let (w, h) = png_dimensions_from_bytes(&bytes)?;
    if w.saturating_mul(h) > state.max_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("label map {w}x{h} exceeds {} pixels", state.max_pixels),
        ));
    }
    let m = LabelMap::from_png_bytes(&bytes, model.num_classes())?;
    let r = model.resolution();
    if (w, h) != (r, r) {
        return Err(ApiError::invalid(format!("model `{}` takes {r}x{r} label maps, got {w}x{h}", model.id)));
    }
    Ok(m)
}

fn render(model: &Model, m: &LabelMap, z: &LatentVector) -> Result<Vec<u8>, ApiError> {
    Ok(denormalize(&model.generator.generate(m, z)?).to_png_bytes())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok", "models": s.models.len()}))
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    id: &'a str,
    resolution: usize,
    num_classes: usize,
    palette: &'a ClassPalette,
}

async fn models(State(s): State<Arc<AppState>>) -> Response {
    let list: Vec<ModelInfo> = s
        .models
        .values()
        .map(|m| ModelInfo {
            id: &m.id,
            resolution: m.resolution(),
            num_classes: m.num_classes(),
            palette: &m.palette,
        })
        .collect();
    Json(serde_json::json!({ "models": list })).into_response()
}

async fn synthesize(State(s): State<Arc<AppState>>, Json(req): Json<SynthesisRequest>) -> Result<Response, ApiError> {
    let png = blocking(move || {
        let model = s.model(req.model.as_deref())?;
        let z = req.resolve_latent(s.default_seed)?;
        let m = decode_labels(&s, &model, &req.labels_png)?;
        render(&model, &m, &z)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn interpolate(
    State(s): State<Arc<AppState>>,
    Json(req): Json<InterpolationRequest>,
) -> Result<Response, ApiError> {
    let body = blocking(move || {
        let model = s.model(req.model.as_deref())?;
        if req.steps < 2 || req.steps > s.max_steps {
            return Err(ApiError::invalid(format!("steps must be in 2..={}", s.max_steps)));
        }
        let z1 = source_latent(&req.from)?;
        let z2 = source_latent(&req.to)?;
        let m = decode_labels(&s, &model, &req.labels_png)?;
        let mut body = Vec::new();
        for (i, z) in interpolation_latents(&z1, &z2, req.steps)?.iter().enumerate() {
            let png = render(&model, &m, z)?;
            body.extend_from_slice(
                format!(
                    "--{MULTIPART_BOUNDARY}\r\nContent-Type: image/png\r\nContent-Disposition: inline; filename=\"frame_{i:03}.png\"\r\nContent-Length: {}\r\n\r\n",
                    png.len()
                )
                .as_bytes(),
            );
            body.extend_from_slice(&png);
            body.extend_from_slice(b"\r\n");
        }
        body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
        Ok(body)
    })
    .await?;
    Ok((
        [(
            header::CONTENT_TYPE,
            format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"),
        )],
        body,
    )
        .into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    // base64 inflates by 4/3; leave room for JSON and explicit latents
    let limit = state.max_pixels * 2 + (1 << 20);
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/synthesize", post(synthesize))
        .route("/interpolate", post(interpolate))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> Result<(), CliError> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|e| CliError::Usage(format!("cannot bind {}: {e}", cfg.bind)))?;
    log::info!("listening on {}", cfg.bind);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Usage(format!("server error: {e}")))
}

pub fn serve_blocking(cfg: ServiceConfig) -> Result<(), CliError> {
    tokio::runtime::Runtime::new()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?
        .block_on(serve(cfg))
}
