//! HTTP service for interactive steering. Models are loaded once and read
//! only; the seed registry is the only mutable state.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use semsteer_core::evaluation::render_strip;
use semsteer_core::models::{ClassLabel, Generator, GeneratorParams, LatentVector, Scorer, ScorerParams};
use semsteer_core::shapeworld::{AttributeId, ShapeClass};
use semsteer_core::steering::SteeringDirection;
use semsteer_core::GrayImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use crate::checkpoint::Checkpoint;
use crate::io;
use crate::pipeline::{check_compatible, seed_latent, PipelineError};

pub const X_SCORE: &str = "x-score";
pub const X_EXTRAPOLATED: &str = "x-extrapolated";

/// Checkpoints served for the lifetime of a session.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: GeneratorParams,
    pub scorer: ScorerParams,
    pub directions: BTreeMap<AttributeId, SteeringDirection>,
}

impl Models {
    /// Checks that every direction was trained against these models.
    pub fn new(
        generator: GeneratorParams,
        scorer: ScorerParams,
        directions: impl IntoIterator<Item = SteeringDirection>,
    ) -> Result<Self, PipelineError> {
        let (gd, sd) = (generator.digest(), scorer.digest());
        let mut map = BTreeMap::new();
        for d in directions {
            check_compatible(&d, &gd, Some(&sd))?;
            map.insert(d.attribute, d);
        }
        Ok(Self {
            generator,
            scorer,
            directions: map,
        })
    }

    /// Loads `generator.smst`, `scorer.smst` and every `direction_*.smst`
    /// found in a pipeline output directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let generator = Checkpoint::load(&dir.join("generator.smst"))?.to_generator()?;
        let scorer = Checkpoint::load(&dir.join("scorer.smst"))?.to_scorer()?;
        let mut directions = Vec::new();
        for a in AttributeId::ALL {
            let path = dir.join(format!("direction_{a}.smst"));
            if path.exists() {
                directions.push(Checkpoint::load(&path)?.to_direction()?);
            }
        }
        Self::new(generator, scorer, directions)
    }
}

/// A registered seed: the latent and class it resolves to.
#[derive(Debug, Clone)]
struct SeedEntry {
    z: LatentVector,
    class: ClassLabel,
}

pub struct AppState {
    models: Models,
    truncation: f64,
    export_dir: PathBuf,
    session_id: String,
    seeds: RwLock<HashMap<u64, SeedEntry>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(models: Models, truncation: f64, export_dir: PathBuf) -> Self {
        let session_id = semsteer_core::ContentDigest::of_tensors(
            models
                .generator
                .tensors()
                .iter()
                .chain(models.scorer.tensors())
                .chain(models.directions.values().map(|d| &d.theta)),
        )
        .to_hex()[..16]
            .to_string();
        Self {
            models,
            truncation,
            export_dir,
            session_id,
            seeds: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type Shared = Arc<AppState>;
type Params = Query<HashMap<String, String>>;

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([HeaderName::from_static(X_SCORE), HeaderName::from_static(X_EXTRAPOLATED)]);
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/seed", post(register_seed))
        .route("/api/render", get(render))
        .route("/api/strip", get(strip))
        .route("/api/export", post(export))
        .layer(cors)
        .with_state(Arc::new(state))
}

pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn meta(State(st): State<Shared>) -> Json<serde_json::Value> {
    let m = &st.models;
    let range = m.directions.values().map(|d| d.training_range).fold(0.0, f64::max);
    Json(json!({
        "session_id": st.session_id,
        "attributes": m.directions.keys().map(|a| a.name()).collect::<Vec<_>>(),
        "classes": ShapeClass::ALL.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "z_dim": m.generator.z_dim(),
        "alpha_training_range": range,
    }))
}

/// A class given by name or index.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ClassRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Deserialize)]
struct SeedRequest {
    class: ClassRef,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct SeedResponse {
    seed_id: u64,
    seed: u64,
    class: &'static str,
}

fn parse_class(c: &ClassRef) -> Result<ShapeClass, ApiError> {
    match c {
        ClassRef::Index(i) => ShapeClass::from_index(*i),
        ClassRef::Name(n) => ShapeClass::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(n)),
    }
    .ok_or_else(|| bad_request(format!("unknown class {c:?}")))
}

async fn register_seed(State(st): State<Shared>, Json(req): Json<SeedRequest>) -> Result<Json<SeedResponse>, ApiError> {
    let class = parse_class(&req.class)?;
    let seed_id = st.next_id.fetch_add(1, Ordering::Relaxed);
    // Without an explicit seed the id picks one, so a session stays replayable.
    let seed = req.seed.unwrap_or(seed_id);
    let z = seed_latent(&st.models.generator, seed, st.truncation).map_err(internal)?;
    st.seeds.write().expect("seed registry lock").insert(
        seed_id,
        SeedEntry {
            z,
            class: ClassLabel(class.index()),
        },
    );
    Ok(Json(SeedResponse {
        seed_id,
        seed,
        class: class.name(),
    }))
}

fn param<'a>(q: &'a HashMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    q.get(key).map(String::as_str).ok_or_else(|| bad_request(format!("missing parameter {key}")))
}

fn lookup_seed(st: &AppState, raw: &str) -> Result<SeedEntry, ApiError> {
    let unknown = || ApiError(StatusCode::NOT_FOUND, format!("unknown seed_id {raw:?}"));
    let id: u64 = raw.parse().map_err(|_| unknown())?;
    st.seeds.read().expect("seed registry lock").get(&id).cloned().ok_or_else(unknown)
}

fn lookup_direction<'a>(st: &'a AppState, raw: &str) -> Result<&'a SteeringDirection, ApiError> {
    let a: AttributeId = raw.parse().map_err(|e: semsteer_core::shapeworld::UnknownAttribute| bad_request(e.to_string()))?;
    st.models
        .directions
        .get(&a)
        .ok_or_else(|| bad_request(format!("no direction loaded for {a}")))
}

/// α as sent by a client: a decimal string parsed to `f64`.
pub fn parse_alpha(raw: &str) -> Result<f64, String> {
    match raw.trim().parse::<f64>() {
        Ok(a) if a.is_finite() => Ok(a),
        _ => Err(format!("alpha {raw:?} is not a finite number")),
    }
}

pub fn parse_alphas(raw: &str) -> Result<Vec<f64>, String> {
    let alphas = raw.split(',').map(parse_alpha).collect::<Result<Vec<_>, _>>()?;
    if alphas.is_empty() {
        return Err("alphas is empty".into());
    }
    Ok(alphas)
}

fn png_response(png: Vec<u8>, extra: Vec<(&'static str, String)>) -> Response {
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    for (k, v) in extra {
        resp.headers_mut()
            .insert(HeaderName::from_static(k), HeaderValue::from_str(&v).expect("ascii header value"));
    }
    resp
}

/// Score of `attribute` on the image a client decodes from the PNG.
fn delivered_score(s: &ScorerParams, img: &GrayImage, attribute: AttributeId) -> Result<f64, ApiError> {
    Ok(s.score(&io::quantized(img)).map_err(internal)?.get(attribute))
}

async fn render(State(st): State<Shared>, Query(q): Params) -> Result<Response, ApiError> {
    let seed = lookup_seed(&st, param(&q, "seed_id")?)?;
    let dir = lookup_direction(&st, param(&q, "attribute")?)?;
    let alpha = parse_alpha(param(&q, "alpha")?).map_err(bad_request)?;
    let img = render_strip(&st.models.generator, dir, &seed.z, seed.class, &[alpha]).map_err(internal)?;
    let score = delivered_score(&st.models.scorer, &img, dir.attribute)?;
    Ok(png_response(
        io::encode_png(&img),
        vec![
            (X_SCORE, format!("{score:?}")),
            (X_EXTRAPOLATED, dir.is_extrapolated(alpha).to_string()),
        ],
    ))
}

async fn strip(State(st): State<Shared>, Query(q): Params) -> Result<Response, ApiError> {
    let seed = lookup_seed(&st, param(&q, "seed_id")?)?;
    let dir = lookup_direction(&st, param(&q, "attribute")?)?;
    let alphas = parse_alphas(param(&q, "alphas")?).map_err(bad_request)?;
    let img = render_strip(&st.models.generator, dir, &seed.z, seed.class, &alphas).map_err(internal)?;
    let extrapolated = alphas.iter().any(|&a| dir.is_extrapolated(a));
    Ok(png_response(io::encode_png(&img), vec![(X_EXTRAPOLATED, extrapolated.to_string())]))
}

#[derive(Debug, Deserialize)]
struct ExportRequest {
    seed_id: serde_json::Value,
    attribute: String,
    alphas: Vec<serde_json::Value>,
}

fn json_alpha(v: &serde_json::Value) -> Result<f64, ApiError> {
    match v {
        serde_json::Value::Number(n) => n.as_f64().filter(|a| a.is_finite()),
        serde_json::Value::String(s) => parse_alpha(s).ok(),
        _ => None,
    }
    .ok_or_else(|| bad_request(format!("alpha {v} is not a finite number")))
}

async fn export(State(st): State<Shared>, Json(req): Json<ExportRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    let id = match &req.seed_id {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let seed = lookup_seed(&st, &id)?;
    let dir = lookup_direction(&st, &req.attribute)?;
    let alphas = req.alphas.iter().map(json_alpha).collect::<Result<Vec<_>, _>>()?;
    if alphas.is_empty() {
        return Err(bad_request("alphas is empty"));
    }
    let g = &st.models.generator;
    let mut scores = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let panel = render_strip(g, dir, &seed.z, seed.class, &[a]).map_err(internal)?;
        scores.push(delivered_score(&st.models.scorer, &panel, dir.attribute)?);
    }
    let img = render_strip(g, dir, &seed.z, seed.class, &alphas).map_err(internal)?;
    let stem = format!("seed{id}_{}", dir.attribute);
    let png_path = st.export_dir.join(format!("{stem}.png"));
    let json_path = st.export_dir.join(format!("{stem}.json"));
    let sidecar = json!({
        "seed_id": id,
        "z": seed.z.0,
        "class": seed.class.0,
        "class_name": ShapeClass::from_index(seed.class.0).map(|c| c.name()),
        "attribute": dir.attribute,
        "alphas": alphas,
        "scores": scores,
        "generator_digest": g.digest(),
        "scorer_digest": st.models.scorer.digest(),
        "direction_digest": semsteer_core::ContentDigest::of_tensors([&dir.theta]),
    });
    io::write_file(&png_path, &io::encode_png(&img)).map_err(internal)?;
    let mut text = serde_json::to_vec_pretty(&sidecar).map_err(internal)?;
    text.push(b'\n');
    io::write_file(&json_path, &text).map_err(internal)?;
    Ok(Json(json!({ "strip": png_path, "sidecar": json_path })))
}
