//! HTTP service over classification sets and operator sessions.
//!
//! A session tracks the objects still in the bin: classify ranks only the
//! remaining candidates (unless `full_set` is requested), confirm removes
//! one, undo puts the latest confirmation back.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/healthz` | liveness and loaded encoder |
//! | POST | `/sets` | upload a set file (multipart field `file` or raw body) |
//! | GET | `/sets`, `/sets/{id}` | set metadata |
//! | GET | `/sets/{id}/thumbnails/{object_id}` | reference render (PNG) |
//! | GET, POST | `/sessions` | list / create `{set_id}` |
//! | GET | `/sessions/{id}` | session state |
//! | POST | `/sessions/{id}/classify` | multipart `image`(s), `agg`, `top_k`, `full_set` |
//! | POST | `/sessions/{id}/confirm` | `{object_id, query_ref?}` |
//! | POST | `/sessions/{id}/undo` | |

pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use protoid::classify::{classify_multiview, AggregationMethod, ClassifyError};
use protoid::encoder::{decode_image, EncoderError, EncoderHandle};
use protoid::prototypes::{decode_set, ClassificationSet};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

pub use store::{HistoryEntry, Session, Store};

pub const TOKEN_ENV: &str = "PROTOID_TOKEN";
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;
const DEFAULT_TOP_K: usize = 5;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    fn internal(m: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, m.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared state. Sets and the encoder never change after insertion; each
/// session sits behind its own lock so mutations are serialized per session.
pub struct AppState {
    store: Store,
    encoder: Option<Arc<EncoderHandle>>,
    token: Option<String>,
    sets: RwLock<BTreeMap<String, Arc<ClassificationSet>>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    /// Opens (or creates) the data folder and reloads its sets and sessions.
    pub fn open(data_dir: &Path, encoder: Option<EncoderHandle>, token: Option<String>) -> std::io::Result<Self> {
        let store = Store::open(data_dir)?;
        let mut sets = BTreeMap::new();
        for p in store.set_files()? {
            match protoid::prototypes::load_set(&p) {
                Ok(s) => {
                    sets.insert(s.set_id.clone(), Arc::new(s));
                }
                Err(e) => eprintln!("skipping set {}: {e}", p.display()),
            }
        }
        let sessions = store
            .load_sessions()?
            .into_iter()
            .filter(|s| sets.contains_key(&s.set_id))
            .map(|s| (s.session_id.clone(), Arc::new(tokio::sync::Mutex::new(s))))
            .collect();
        Ok(AppState {
            store,
            encoder: encoder.map(Arc::new),
            token: token.filter(|t| !t.is_empty()),
            sets: RwLock::new(sets),
            sessions: Mutex::new(sessions),
        })
    }

    /// Validates and stores a set file; re-uploading identical content is
    /// idempotent, a different set under an existing id is a conflict.
    pub fn add_set(&self, bytes: &[u8]) -> ApiResult<(bool, Arc<ClassificationSet>)> {
        let set = decode_set(bytes).map_err(|e| ApiError::bad_request(format!("invalid set file: {e}")))?;
        if !store::valid_id(&set.set_id) {
            return Err(ApiError::bad_request(format!("set id {:?} must match [A-Za-z0-9._-]+", set.set_id)));
        }
        let mut sets = self.sets.write().expect("sets lock");
        if let Some(existing) = sets.get(&set.set_id) {
            let same = existing.prototypes == set.prototypes && existing.encoder_id == set.encoder_id;
            return if same {
                Ok((false, existing.clone()))
            } else {
                Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("a different set with id {} is already loaded", set.set_id),
                ))
            };
        }
        self.store.write_set(&set.set_id, bytes).map_err(ApiError::internal)?;
        let set = Arc::new(set);
        sets.insert(set.set_id.clone(), set.clone());
        Ok((true, set))
    }

    fn set(&self, id: &str) -> ApiResult<Arc<ClassificationSet>> {
        self.sets
            .read()
            .expect("sets lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown set {id}")))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }
}

pub fn app(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sets", get(list_sets).post(upload_set))
        .route("/sets/{id}", get(get_set))
        .route("/sets/{id}/thumbnails/{object_id}", get(thumbnail))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/classify", post(classify))
        .route("/sessions/{id}/confirm", post(confirm))
        .route("/sessions/{id}/undo", post(undo))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn require_token(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &st.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

/// JSON body parsed by hand so every malformed body is a 400.
fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "encoder_loaded": st.encoder.is_some(),
        "encoder_id": st.encoder.as_ref().map(|e| e.encoder_id()),
        "sets": st.sets.read().expect("sets lock").len(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SetMeta {
    pub set_id: String,
    pub encoder_id: String,
    pub dim: usize,
    pub created_at: String,
    pub render_config_digest: String,
    pub n_objects: usize,
    pub object_ids: Vec<String>,
    /// Views per prototype; `None` when prototypes differ.
    pub k: Option<usize>,
}

fn set_meta(s: &ClassificationSet) -> SetMeta {
    let ks: BTreeSet<usize> = s.prototypes.values().map(|p| p.k).collect();
    SetMeta {
        set_id: s.set_id.clone(),
        encoder_id: s.encoder_id.clone(),
        dim: s.dim,
        created_at: s.created_at.clone(),
        render_config_digest: s.render_config_digest.clone(),
        n_objects: s.len(),
        object_ids: s.object_ids(),
        k: if ks.len() == 1 { ks.into_iter().next() } else { None },
    }
}

async fn list_sets(State(st): State<Arc<AppState>>) -> Json<Vec<SetMeta>> {
    Json(st.sets.read().expect("sets lock").values().map(|s| set_meta(s)).collect())
}

async fn get_set(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SetMeta>> {
    let set = st.set(&id)?;
    Ok(Json(set_meta(&set)))
}

async fn upload_set(State(st): State<Arc<AppState>>, req: Request) -> ApiResult<(StatusCode, Json<SetMeta>)> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes = if is_multipart {
        let mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        first_multipart_file(mp).await?
    } else {
        Bytes::from_request(req, &()).await.map_err(|e| ApiError::bad_request(e.body_text()))?
    };
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty upload"));
    }
    let st2 = st.clone();
    let (created, set) = tokio::task::spawn_blocking(move || st2.add_set(&bytes))
        .await
        .map_err(ApiError::internal)??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(set_meta(&set))))
}

/// The `file` part of a multipart upload, or its first part with a file name.
async fn first_multipart_file(mut mp: Multipart) -> ApiResult<Bytes> {
    let mut fallback = None;
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        let named_file = field.name() == Some("file");
        let has_filename = field.file_name().is_some();
        let data = field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
        if named_file {
            return Ok(data);
        }
        if has_filename && fallback.is_none() {
            fallback = Some(data);
        }
    }
    fallback.ok_or_else(|| ApiError::bad_request("multipart upload has no file part"))
}

async fn thumbnail(
    State(st): State<Arc<AppState>>,
    UrlPath((id, object_id)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let set = st.set(&id)?;
    let object_id = object_id.strip_suffix(".png").unwrap_or(&object_id);
    let proto = set
        .get(object_id)
        .ok_or_else(|| ApiError::not_found(format!("set {id} has no object {object_id}")))?;
    let png = proto
        .thumbnail_png
        .clone()
        .ok_or_else(|| ApiError::not_found(format!("no thumbnail stored for {object_id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "max-age=86400")], png).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub set_id: String,
    pub created_at: String,
    pub remaining_count: usize,
    pub confirmed_count: usize,
}

/// Full session state as shown to clients.
#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub set_id: String,
    pub created_at: String,
    pub remaining_count: usize,
    pub remaining_ids: Vec<String>,
    pub confirmed: Vec<HistoryEntry>,
    pub history: Vec<HistoryEntry>,
    pub last_ranking: Option<protoid::classify::RankingRecord>,
}

fn summary(s: &Session) -> SessionSummary {
    SessionSummary {
        session_id: s.session_id.clone(),
        set_id: s.set_id.clone(),
        created_at: s.created_at.clone(),
        remaining_count: s.remaining_ids.len(),
        confirmed_count: s.confirmed().len(),
    }
}

fn view(s: &Session) -> SessionView {
    SessionView {
        session_id: s.session_id.clone(),
        set_id: s.set_id.clone(),
        created_at: s.created_at.clone(),
        remaining_count: s.remaining_ids.len(),
        remaining_ids: s.remaining_ids.iter().cloned().collect(),
        confirmed: s.confirmed().into_iter().cloned().collect(),
        history: s.history.clone(),
        last_ranking: s.last_ranking.clone(),
    }
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let handles: Vec<_> = st.sessions.lock().expect("sessions lock").values().cloned().collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(summary(&*h.lock().await));
    }
    out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.session_id.cmp(&b.session_id)));
    Json(out)
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let h = st.session(&id)?;
    let s = h.lock().await;
    Ok(Json(view(&s)))
}

#[derive(Deserialize)]
struct CreateSession {
    set_id: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateSession = parse_json(&body)?;
    let set = st.set(&req.set_id)?;
    let s = Session::new(uuid::Uuid::new_v4().simple().to_string(), set.set_id.clone(), set.object_ids());
    st.store.write_session(&s).map_err(ApiError::internal)?;
    let v = view(&s);
    st.sessions
        .lock()
        .expect("sessions lock")
        .insert(s.session_id.clone(), Arc::new(tokio::sync::Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(v)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateOut {
    pub object_id: String,
    pub score: f64,
    pub thumbnail_url: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub session_id: String,
    pub set_id: String,
    pub query_ref: String,
    pub method: AggregationMethod,
    pub full_set: bool,
    pub n_images: usize,
    pub remaining_count: usize,
    pub candidates: Vec<CandidateOut>,
}

struct ClassifyForm {
    images: Vec<(String, Bytes)>,
    agg: Option<AggregationMethod>,
    top_k: usize,
    full_set: bool,
}

fn parse_bool(s: &str) -> ApiResult<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        other => Err(ApiError::bad_request(format!("bad boolean {other:?}"))),
    }
}

async fn read_classify_form(mut mp: Multipart) -> ApiResult<ClassifyForm> {
    let mut form = ClassifyForm {
        images: Vec::new(),
        agg: None,
        top_k: DEFAULT_TOP_K,
        full_set: false,
    };
    let malformed = |e: axum::extract::multipart::MultipartError| ApiError::bad_request(e.body_text());
    while let Some(field) = mp.next_field().await.map_err(malformed)? {
        let name = field.name().unwrap_or_default().to_string();
        let file_name = field.file_name().map(str::to_string);
        match name.as_str() {
            "image" | "images" | "image[]" => {
                let data = field.bytes().await.map_err(malformed)?;
                let n = form.images.len();
                form.images.push((file_name.unwrap_or_else(|| format!("image{n}")), data));
            }
            "agg" | "top_k" | "full_set" => {
                let text = field.text().await.map_err(malformed)?;
                match name.as_str() {
                    "agg" => form.agg = Some(text.trim().parse().map_err(|e| ApiError::bad_request(format!("{e}")))?),
                    "top_k" => {
                        form.top_k = text.trim().parse().map_err(|_| ApiError::bad_request(format!("bad top_k {text:?}")))?
                    }
                    _ => form.full_set = parse_bool(&text)?,
                }
            }
            other => return Err(ApiError::bad_request(format!("unexpected form field {other:?}"))),
        }
    }
    if form.images.is_empty() {
        return Err(ApiError::bad_request("no image part in the request"));
    }
    if form.top_k == 0 {
        return Err(ApiError::bad_request("top_k must be at least 1"));
    }
    Ok(form)
}

async fn classify(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    mp: Result<Multipart, MultipartRejection>,
) -> ApiResult<Json<ClassifyResponse>> {
    let handle = st.session(&id)?;
    let mp = mp.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let form = read_classify_form(mp).await?;
    let encoder = st
        .encoder
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no encoder loaded"))?;
    let set_id = handle.lock().await.set_id.clone();
    let set = st.set(&set_id)?;
    if set.encoder_id != encoder.encoder_id() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            format!("set {} needs encoder {}; loaded encoder is {}", set.set_id, set.encoder_id, encoder.encoder_id()),
        ));
    }
    let method = form.agg.unwrap_or(if form.images.len() == 1 {
        AggregationMethod::Single
    } else {
        AggregationMethod::ScoreAverage
    });
    if method == AggregationMethod::Single && form.images.len() != 1 {
        return Err(ApiError::bad_request(format!("agg=single takes one image, got {}", form.images.len())));
    }
    let n_images = form.images.len();
    let query_ref = form.images.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",");
    let images = form.images;
    let set2 = set.clone();
    let ranking = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let decoded = images
            .iter()
            .map(|(name, b)| {
                decode_image(b).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{name}: {e}")))
            })
            .collect::<ApiResult<Vec<_>>>()?;
        classify_multiview(&decoded, &set2, &encoder, method).map_err(|e| match e {
            ClassifyError::Encoder(EncoderError::Decode(_) | EncoderError::Shape { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            ClassifyError::Encoder(EncoderError::External(_)) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
            ClassifyError::EmptySet => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            _ => ApiError::internal(e),
        })
    })
    .await
    .map_err(ApiError::internal)??
    .with_query_ref(query_ref.clone());

    // Pool restriction reads the pool as of now; concurrent confirms may
    // land before or after, never in between.
    let mut s = handle.lock().await;
    let shown = if form.full_set { ranking } else { ranking.restricted(&s.remaining_ids) };
    let record = shown.record(form.top_k);
    s.last_ranking = Some(record.clone());
    st.store.write_session(&s).map_err(ApiError::internal)?;
    let candidates = record
        .candidates
        .into_iter()
        .map(|c| CandidateOut {
            thumbnail_url: set
                .get(&c.object_id)
                .and_then(|p| p.thumbnail_png.as_ref())
                .map(|_| format!("/sets/{}/thumbnails/{}.png", set.set_id, c.object_id)),
            object_id: c.object_id,
            score: c.score,
        })
        .collect();
    Ok(Json(ClassifyResponse {
        session_id: s.session_id.clone(),
        set_id: set.set_id.clone(),
        query_ref,
        method,
        full_set: form.full_set,
        n_images,
        remaining_count: s.remaining_ids.len(),
        candidates,
    }))
}

#[derive(Deserialize)]
struct ConfirmBody {
    object_id: String,
    query_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PoolUpdate {
    pub session_id: String,
    pub object_id: String,
    pub remaining_count: usize,
    pub confirmed_count: usize,
}

async fn confirm(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<PoolUpdate>> {
    let handle = st.session(&id)?;
    let req: ConfirmBody = parse_json(&body)?;
    let mut s = handle.lock().await;
    // The prediction on record is the top candidate of the latest ranking.
    let (query_ref, predicted) = match &s.last_ranking {
        Some(r) => (
            req.query_ref.clone().or_else(|| Some(r.query_ref.clone())),
            r.candidates.first().map(|c| c.object_id.clone()),
        ),
        None => (req.query_ref.clone(), None),
    };
    let mut next = s.clone();
    if !next.confirm(&req.object_id, query_ref, predicted) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("{} is not among the remaining objects", req.object_id),
        ));
    }
    st.store.write_session(&next).map_err(ApiError::internal)?;
    *s = next;
    Ok(Json(PoolUpdate {
        session_id: s.session_id.clone(),
        object_id: req.object_id,
        remaining_count: s.remaining_ids.len(),
        confirmed_count: s.confirmed().len(),
    }))
}

async fn undo(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PoolUpdate>> {
    let handle = st.session(&id)?;
    let mut s = handle.lock().await;
    let mut next = s.clone();
    let restored = next
        .undo()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing to undo"))?;
    st.store.write_session(&next).map_err(ApiError::internal)?;
    *s = next;
    Ok(Json(PoolUpdate {
        session_id: s.session_id.clone(),
        object_id: restored,
        remaining_count: s.remaining_ids.len(),
        confirmed_count: s.confirmed().len(),
    }))
}
