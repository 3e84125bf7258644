//! HTTP JSON API over the datastore, plus the tap stream.
//!
//! Every request carries `Authorization: Bearer <token>`; tokens map to
//! usernames in configuration and grants map usernames to projects. Data
//! without a project is visible to every authenticated user.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, watch};

use crate::datastore::{
    AnnotationTarget, BooleanQuery, Datastore, DatastoreError, Predicate, Scope, TapRecord,
};
use crate::harvester::tool_slug;

/// Grants entry giving a user every project.
pub const ALL_PROJECTS: &str = "*";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSettings {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// token → username
    #[serde(default)]
    pub tokens: BTreeMap<String, String>,
    /// username → project names (`"*"` for all)
    #[serde(default)]
    pub grants: BTreeMap<String, Vec<String>>,
    /// Events a tap subscriber may fall behind before it is dropped.
    #[serde(default = "default_tap_buffer")]
    pub tap_buffer: usize,
    #[serde(default = "default_tap_poll_ms")]
    pub tap_poll_ms: u64,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_tap_buffer() -> usize {
    256
}
fn default_tap_poll_ms() -> u64 {
    20
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: default_bind(),
            tokens: BTreeMap::new(),
            grants: BTreeMap::new(),
            tap_buffer: default_tap_buffer(),
            tap_poll_ms: default_tap_poll_ms(),
        }
    }
}

impl ServiceSettings {
    pub fn validate(&self) -> Result<(), String> {
        self.bind
            .parse::<SocketAddr>()
            .map_err(|e| format!("bind '{}': {e}", self.bind))?;
        if self.tap_buffer == 0 {
            return Err("tap_buffer must be at least 1".into());
        }
        let users: BTreeSet<&str> = self.tokens.values().map(String::as_str).collect();
        if let Some(u) = self.grants.keys().find(|u| !users.contains(u.as_str())) {
            return Err(format!("grants name unknown user '{u}' (no token maps to it)"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into())
    }
    fn forbidden() -> Self {
        ApiError::new(StatusCode::FORBIDDEN, "not authorized for this project")
    }
}

impl From<DatastoreError> for ApiError {
    fn from(e: DatastoreError) -> Self {
        let status = match &e {
            DatastoreError::NotFound(_) | DatastoreError::UnknownTarget(_) => StatusCode::NOT_FOUND,
            DatastoreError::MalformedQuery(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    store: Arc<Datastore>,
    tokens: BTreeMap<String, String>,
    everything: BTreeSet<String>,
    tap: broadcast::Sender<TapRecord>,
    shutdown: watch::Receiver<bool>,
}

/// The authenticated caller and the projects they may see.
pub struct User {
    pub name: String,
    pub scope: Scope,
}

impl FromRequestParts<Arc<AppState>> for User {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
        let name = state
            .tokens
            .get(token.trim())
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))?
            .clone();
        let scope = if state.everything.contains(&name) {
            Scope::All
        } else {
            Scope::Projects(state.store.grants_for(&name)?.into_iter().collect())
        };
        Ok(User { name, scope })
    }
}

impl User {
    fn check(&self, project: Option<i64>) -> ApiResult<()> {
        if self.scope.admits(project) {
            Ok(())
        } else {
            Err(ApiError::forbidden())
        }
    }
}

/// Records the configured grants in the datastore; projects named in grants
/// are created if they do not exist yet.
pub fn sync_grants(store: &Datastore, grants: &BTreeMap<String, Vec<String>>) -> Result<(), DatastoreError> {
    for (user, projects) in grants {
        for p in projects.iter().filter(|p| p.as_str() != ALL_PROJECTS) {
            let id = store.ensure_project(p)?;
            store.grant(user, id)?;
        }
    }
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tools", get(tools))
        .route("/projects", get(projects))
        .route("/samples", get(samples))
        .route("/files", get(files))
        .route("/files/{id}/series", get(series))
        .route("/files/{id}/annotations", get(file_annotations))
        .route("/search", post(search))
        .route("/annotations", post(post_annotation))
        .route("/tap", get(tap))
        .with_state(state)
}

async fn tools(State(st): State<Arc<AppState>>, _user: User) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.store.tools()?))
}

async fn projects(State(st): State<Arc<AppState>>, user: User) -> ApiResult<impl IntoResponse> {
    let rows: Vec<_> = st
        .store
        .projects()?
        .into_iter()
        .filter(|p| user.scope.admits(Some(p.id)))
        .collect();
    Ok(Json(rows))
}

async fn samples(State(st): State<Arc<AppState>>, user: User) -> ApiResult<impl IntoResponse> {
    let rows: Vec<_> = st
        .store
        .samples()?
        .into_iter()
        .filter(|s| user.scope.admits(s.project_id))
        .collect();
    Ok(Json(rows))
}

#[derive(Debug, Deserialize)]
struct FileFilter {
    tool: Option<String>,
    project: Option<String>,
    sample: Option<String>,
    from: Option<String>,
    to: Option<String>,
}

async fn files(
    State(st): State<Arc<AppState>>,
    user: User,
    Query(f): Query<FileFilter>,
) -> ApiResult<impl IntoResponse> {
    let mut parts = Vec::new();
    if let Some(t) = f.tool {
        parts.push(BooleanQuery::atom(Predicate::ToolName(t)));
    }
    if let Some(p) = f.project {
        parts.push(BooleanQuery::atom(Predicate::Project(p)));
    }
    if let Some(s) = f.sample {
        parts.push(BooleanQuery::atom(Predicate::SampleCode(s)));
    }
    if f.from.is_some() || f.to.is_some() {
        parts.push(BooleanQuery::atom(Predicate::DateRange { from: f.from, to: f.to }));
    }
    run_query(&st, &user, BooleanQuery::and(parts)).await
}

async fn search(
    State(st): State<Arc<AppState>>,
    user: User,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    let value: serde_json::Value = if body.iter().all(u8::is_ascii_whitespace) {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed query: {e}")))?
    };
    let query = BooleanQuery::from_json(&value)?;
    run_query(&st, &user, query).await
}

async fn run_query(st: &Arc<AppState>, user: &User, query: BooleanQuery) -> ApiResult<Json<serde_json::Value>> {
    let store = st.store.clone();
    let scope = user.scope.clone();
    let summaries = tokio::task::spawn_blocking(move || {
        let ids = store.evaluate(&query, &scope)?;
        store.file_summaries(&ids)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(serde_json::to_value(summaries).expect("serializable")))
}

#[derive(Debug, Deserialize)]
struct SeriesOptions {
    #[serde(default)]
    lexical: bool,
}

#[derive(Serialize)]
struct SeriesOut {
    aggregate: usize,
    name: String,
    units: String,
    descriptors: Vec<String>,
    values: serde_json::Value,
}

async fn series(
    State(st): State<Arc<AppState>>,
    user: User,
    Path(id): Path<i64>,
    Query(opts): Query<SeriesOptions>,
) -> ApiResult<impl IntoResponse> {
    user.check(st.store.file_project(id)?)?;
    let file = st.store.file(id)?;
    let series: Vec<SeriesOut> = st
        .store
        .file_arrays(id)?
        .into_iter()
        .map(|a| SeriesOut {
            aggregate: a.aggregate_index,
            name: a.name().to_string(),
            units: a.units().to_string(),
            values: if opts.lexical {
                json!(a.lexemes)
            } else {
                json!(a.values)
            },
            descriptors: a.descriptors,
        })
        .collect();
    let metadata: Vec<_> = st
        .store
        .file_metadata(id)?
        .into_iter()
        .map(|(agg, m)| json!({"aggregate": agg, "name": m.name, "value": m.value, "units": m.units, "comments": m.comments}))
        .collect();
    Ok(Json(json!({
        "file_id": id,
        "archive_path": file.archive_path,
        "version": file.version,
        "series": series,
        "metadata": metadata,
    })))
}

async fn file_annotations(
    State(st): State<Arc<AppState>>,
    user: User,
    Path(id): Path<i64>,
) -> ApiResult<impl IntoResponse> {
    user.check(st.store.file_project(id)?)?;
    Ok(Json(st.store.list_annotations(AnnotationTarget::File(id))?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewAnnotation {
    target: AnnotationTarget,
    text: String,
    #[serde(default)]
    links: Vec<String>,
}

async fn post_annotation(
    State(st): State<Arc<AppState>>,
    user: User,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: NewAnnotation = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed annotation: {e}")))?;
    user.check(st.store.target_project(req.target)?)?;
    let id = st.store.annotate(req.target, &user.name, &req.text, &req.links)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

#[derive(Debug, Deserialize)]
struct TapFilter {
    tool: Option<String>,
    project: Option<String>,
}

async fn tap(
    State(st): State<Arc<AppState>>,
    user: User,
    Query(f): Query<TapFilter>,
) -> ApiResult<impl IntoResponse> {
    let project = match &f.project {
        None => None,
        Some(name) => {
            let id = st
                .store
                .project_id(name)?
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown project '{name}'")))?;
            user.check(Some(id))?;
            Some(id)
        }
    };
    let rx = st.tap.subscribe();
    let shutdown = st.shutdown.clone();
    let scope = user.scope;
    let tool = f.tool;
    let admits = move |r: &TapRecord| {
        scope.admits(r.project_id)
            && project.is_none_or(|p| r.project_id == Some(p))
            && tool
                .as_deref()
                .is_none_or(|t| r.tool_name == t || tool_slug(&r.tool_name) == t)
    };
    let stream = futures::stream::unfold((rx, shutdown, admits), |(mut rx, mut shutdown, admits)| async move {
        loop {
            let next = tokio::select! {
                r = rx.recv() => r,
                _ = shutdown.changed() => return None,
            };
            match next {
                Ok(rec) if admits(&rec) => {
                    let ev = Event::default()
                        .event("receipt")
                        .id(rec.id.to_string())
                        .json_data(&rec)
                        .expect("serializable");
                    return Some((Ok::<_, Infallible>(ev), (rx, shutdown, admits)));
                }
                Ok(_) => continue,
                // a consumer that overflowed its buffer is disconnected
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::info!(missed = n, "dropping slow tap subscriber");
                    return None;
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

/// Polls the receipt table and fans new receipts out to subscribers.
async fn dispatch(
    store: Arc<Datastore>,
    tap: broadcast::Sender<TapRecord>,
    poll: Duration,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut cursor = store.last_tap_record_id().unwrap_or(0);
    loop {
        let s = store.clone();
        let batch = tokio::task::spawn_blocking(move || s.tap_records_after(cursor, 512)).await;
        match batch {
            Ok(Ok(records)) => {
                let full = records.len() == 512;
                for r in records {
                    cursor = r.id;
                    // no receivers is fine
                    let _ = tap.send(r);
                }
                if full {
                    continue;
                }
            }
            Ok(Err(e)) => tracing::warn!(error = %e, "tap poll failed"),
            Err(e) => tracing::warn!(error = %e, "tap poll panicked"),
        }
        tokio::select! {
            _ = tokio::time::sleep(poll) => {}
            _ = shutdown.changed() => return,
        }
    }
}

pub struct ServiceHandle {
    local_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    server: Option<tokio::task::JoinHandle<()>>,
    dispatcher: Option<tokio::task::JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.local_addr)
    }

    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        if let Some(s) = self.server.take() {
            let _ = s.await;
        }
        if let Some(d) = self.dispatcher.take() {
            let _ = d.await;
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

/// Binds `settings.bind` (port 0 picks one) and serves until shut down.
pub async fn start(store: Arc<Datastore>, settings: &ServiceSettings) -> std::io::Result<ServiceHandle> {
    sync_grants(&store, &settings.grants).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(&settings.bind).await?;
    let local_addr = listener.local_addr()?;
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let (tap, _) = broadcast::channel(settings.tap_buffer.max(1));
    let everything = settings
        .grants
        .iter()
        .filter(|(_, ps)| ps.iter().any(|p| p == ALL_PROJECTS))
        .map(|(u, _)| u.clone())
        .collect();
    let state = Arc::new(AppState {
        store: store.clone(),
        tokens: settings.tokens.clone(),
        everything,
        tap: tap.clone(),
        shutdown: shutdown_rx.clone(),
    });
    let dispatcher = tokio::spawn(dispatch(
        store,
        tap,
        Duration::from_millis(settings.tap_poll_ms.max(1)),
        shutdown_rx.clone(),
    ));
    let mut stop = shutdown_rx;
    let app = router(state);
    let server = tokio::spawn(async move {
        let graceful = async move {
            let _ = stop.wait_for(|v| *v).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
            tracing::error!(error = %e, "service stopped");
        }
    });
    tracing::info!(%local_addr, "service listening");
    Ok(ServiceHandle {
        local_addr,
        shutdown: shutdown_tx,
        server: Some(server),
        dispatcher: Some(dispatcher),
    })
}
