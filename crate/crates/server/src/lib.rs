//! HTTP front end for a trained surrogate: metadata, field predictions and
//! interval recomputation at an arbitrary confidence level.
//!
//! | route            | body                                   |
//! |------------------|----------------------------------------|
//! | `GET /meta`      | -                                      |
//! | `POST /predict`  | `{"params": [..]}`                     |
//! | `POST /interval` | `{"params": [..], "level": 0.9, "calibrated": true}` |
//!
//! `level` is the target confidence `1 - a`. Grids are flat row-major arrays
//! next to a `grid_shape` field. Floats are written in shortest round-trip
//! form, so parsing a response recovers the exact `f64` values.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use evisurro_core::predict::{interval_field, predict};
use evisurro_core::training::load_checkpoint;
use evisurro_core::{
    CalibrationTable, Checkpoint, Error, FieldPrediction, IntervalField, MiscoverageLevel, ParamRange, Result,
};

/// Checkpoint plus optional calibration table; immutable once built.
#[derive(Debug)]
pub struct ModelBundle {
    checkpoint: Checkpoint,
    table: Option<CalibrationTable>,
}

impl ModelBundle {
    pub fn new(checkpoint: Checkpoint, table: Option<CalibrationTable>) -> Result<Self> {
        if let Some(t) = &table {
            if t.grid_shape() != checkpoint.grid_shape() {
                return Err(Error::Shape(format!(
                    "calibration table grid {:?} does not match checkpoint grid {:?}",
                    t.grid_shape(),
                    checkpoint.grid_shape()
                )));
            }
        }
        Ok(Self { checkpoint, table })
    }

    pub fn load(checkpoint: &std::path::Path, table: Option<&std::path::Path>) -> Result<Self> {
        let ckpt = load_checkpoint(checkpoint)?;
        let table = table.map(CalibrationTable::load).transpose()?;
        Self::new(ckpt, table)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn table(&self) -> Option<&CalibrationTable> {
        self.table.as_ref()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            params: self.checkpoint.param_ranges.clone(),
            grid_shape: self.checkpoint.grid_shape().to_vec(),
            has_calibration: self.table.is_some(),
            calibration_size: self.table.as_ref().map(|t| t.n()),
            calibration_delta: self.table.as_ref().map(|t| t.delta()),
            max_attainable_confidence: self.table.as_ref().map(|t| t.max_attainable_confidence()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub params: Vec<ParamRange>,
    pub grid_shape: Vec<usize>,
    pub has_calibration: bool,
    pub calibration_size: Option<usize>,
    pub calibration_delta: Option<f64>,
    pub max_attainable_confidence: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PredictRequest {
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct IntervalRequest {
    pub params: Vec<f64>,
    /// Target confidence `1 - a`.
    pub level: f64,
    #[serde(default)]
    pub calibrated: bool,
}

/// Coverage band implied by split conformal calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelBound {
    pub guaranteed: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalResponse {
    #[serde(flatten)]
    pub field: IntervalField,
    pub level: f64,
    /// `None` for uncalibrated intervals, which carry no finite-sample guarantee.
    pub achieved_level_bound: Option<LevelBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    details: Vec<FieldIssue>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    fn unprocessable(message: impl Into<String>, details: Vec<FieldIssue>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            details,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Domain { .. } | Error::Config(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}

/// Shared handler state. The bundle slot is filled once loading finishes;
/// until then every endpoint answers 503.
#[derive(Clone, Default)]
pub struct AppState {
    bundle: Arc<OnceLock<ModelBundle>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn loaded(bundle: ModelBundle) -> Self {
        let s = Self::new();
        s.install(bundle);
        s
    }

    /// Installs the bundle; later calls are ignored.
    pub fn install(&self, bundle: ModelBundle) {
        let _ = self.bundle.set(bundle);
    }

    fn get(&self) -> std::result::Result<&ModelBundle, ApiError> {
        self.bundle
            .get()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model bundle is still loading"))
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::unprocessable(
            "request body is not valid",
            vec![FieldIssue {
                field: "body".into(),
                message: e.to_string(),
            }],
        )
    })
}

fn validate_params(ranges: &[ParamRange], params: &[f64]) -> std::result::Result<(), ApiError> {
    if params.len() != ranges.len() {
        return Err(ApiError::unprocessable(
            format!("expected {} parameters, got {}", ranges.len(), params.len()),
            vec![FieldIssue {
                field: "params".into(),
                message: format!("length must be {}", ranges.len()),
            }],
        ));
    }
    let issues: Vec<FieldIssue> = ranges
        .iter()
        .zip(params)
        .enumerate()
        .filter(|(_, (r, &v))| !r.contains(v))
        .map(|(i, (r, &v))| FieldIssue {
            field: format!("params[{i}]"),
            message: format!("{} = {v} lies outside [{}, {}]", r.name, r.min, r.max),
        })
        .collect();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(ApiError::unprocessable("parameters out of range", issues))
    }
}

async fn meta(State(state): State<AppState>) -> std::result::Result<Json<Meta>, ApiError> {
    Ok(Json(state.get()?.meta()))
}

async fn predict_handler(
    State(state): State<AppState>,
    body: Bytes,
) -> std::result::Result<Json<FieldPrediction>, ApiError> {
    let bundle = state.get()?;
    let req: PredictRequest = parse_body(&body)?;
    validate_params(&bundle.checkpoint.param_ranges, &req.params)?;
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || predict(&st.get()?.checkpoint, &req.params).map_err(ApiError::from))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

/// Computes the `/interval` payload; exposed so offline tools can reproduce
/// server output exactly.
pub fn compute_interval(
    bundle: &ModelBundle,
    req: &IntervalRequest,
) -> std::result::Result<IntervalResponse, ApiError> {
    validate_params(&bundle.checkpoint.param_ranges, &req.params)?;
    if !(req.level > 0.0 && req.level < 1.0) {
        return Err(ApiError::unprocessable(
            format!("level must lie in (0, 1), got {}", req.level),
            vec![FieldIssue {
                field: "level".into(),
                message: "confidence level outside (0, 1)".into(),
            }],
        ));
    }
    let miscoverage = MiscoverageLevel::new(1.0 - req.level)?;
    let mut bound = None;
    if req.calibrated {
        let table = bundle.table.as_ref().ok_or_else(|| {
            ApiError::new(
                StatusCode::CONFLICT,
                "calibrated interval requested but no calibration table is loaded",
            )
        })?;
        if !table.is_attainable(miscoverage) {
            return Err(ApiError::unprocessable(
                format!(
                    "confidence {} is unattainable with {} calibration members; max attainable confidence is {}",
                    req.level,
                    table.n(),
                    table.max_attainable_confidence()
                ),
                vec![FieldIssue {
                    field: "level".into(),
                    message: format!("must not exceed {}", table.max_attainable_confidence()),
                }],
            ));
        }
        let (guaranteed, upper) = table.coverage_band(miscoverage);
        bound = Some(LevelBound { guaranteed, upper });
    }
    let field = interval_field(
        &bundle.checkpoint,
        bundle.table.as_ref(),
        &req.params,
        miscoverage,
        req.calibrated,
    )?;
    Ok(IntervalResponse {
        field,
        level: req.level,
        achieved_level_bound: bound,
    })
}

async fn interval_handler(
    State(state): State<AppState>,
    body: Bytes,
) -> std::result::Result<Json<IntervalResponse>, ApiError> {
    state.get()?;
    let req: IntervalRequest = parse_body(&body)?;
    let st = state.clone();
    let out = tokio::task::spawn_blocking(move || compute_interval(st.get()?, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(out))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route")
}

/// CORS policy: `None` sends no CORS headers, `Some("*")` allows any origin.
pub fn router(state: AppState, cors_origin: Option<&str>) -> Result<Router> {
    let app = Router::new()
        .route("/meta", get(meta))
        .route("/predict", post(predict_handler))
        .route("/interval", post(interval_handler))
        .fallback(not_found)
        .with_state(state);
    Ok(match cors_origin {
        None => app,
        Some("*") => app.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any)),
        Some(origin) => {
            let origin =
                HeaderValue::from_str(origin).map_err(|_| Error::Config(format!("invalid CORS origin '{origin}'")))?;
            app.layer(
                CorsLayer::new()
                    .allow_origin(origin)
                    .allow_methods(Any)
                    .allow_headers(Any),
            )
        }
    })
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub checkpoint: PathBuf,
    pub table: Option<PathBuf>,
    pub cors_origin: Option<String>,
}

/// Binds, starts answering (503 until the bundle is loaded), then loads the
/// bundle on a blocking thread. Runs until the listener fails.
pub async fn serve(cfg: ServeConfig) -> std::io::Result<()> {
    let state = AppState::new();
    let app = router(state.clone(), cfg.cors_origin.as_deref()).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    let loader = state.clone();
    let (ckpt, table) = (cfg.checkpoint.clone(), cfg.table.clone());
    let load = tokio::task::spawn_blocking(move || {
        let bundle = ModelBundle::load(&ckpt, table.as_deref())?;
        loader.install(bundle);
        Ok::<_, Error>(())
    });
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    match load.await {
        Ok(Ok(())) => eprintln!("model bundle loaded"),
        Ok(Err(e)) => return Err(std::io::Error::other(e)),
        Err(e) => return Err(std::io::Error::other(e)),
    }
    server.await.map_err(std::io::Error::other)?
}
