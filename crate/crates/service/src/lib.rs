//! HTTP service for the thing directory and the legacy bridge.
//!
//! One process serves both surfaces. Bridged entities are registered as
//! Things when their data is ingested and kept alive by the sweeper, so the
//! directory always reflects the bridge store. With a store directory the
//! series and the command log survive restarts; other Things are ephemeral
//! and have to register again.

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::Deserialize;
use serde_json::{json, Value};
use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;
use thingtwin_core::bridge::{
    entity_td, parse_ts, BridgeError, CommandLog, CommandRecord, IngestReport, SeriesStore,
};
use thingtwin_core::registry::{Clock, MembershipEvent, Registry, RegistryError, SystemClock};
use thingtwin_core::td::{parse_td, TdError, TdQuery};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const SERIES_FILE: &str = "series.csv";
pub const COMMANDS_FILE: &str = "commands.jsonl";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub sweep_interval_secs: u64,
    /// Directory holding `series.csv` and `commands.jsonl`. In-memory when unset.
    pub store_dir: Option<PathBuf>,
    /// URL advertised in bridged TDs. Defaults to `http://<bound address>`.
    pub public_url: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            sweep_interval_secs: 10,
            store_dir: None,
            public_url: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, std::io::Error),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared state behind the routes. Registry writes are serialized by its lock.
pub struct AppState {
    registry: Mutex<Registry>,
    store: RwLock<SeriesStore>,
    commands: Mutex<CommandLog>,
    clock: Arc<dyn Clock>,
    base_url: String,
    store_dir: Option<PathBuf>,
}

impl AppState {
    /// Opens the store directory (if any) and registers every stored entity.
    pub fn open(
        store_dir: Option<PathBuf>,
        base_url: String,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let mut store = SeriesStore::new();
        let commands = match &store_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let series = dir.join(SERIES_FILE);
                if series.exists() {
                    store.ingest_csv(&series)?;
                }
                CommandLog::open(dir.join(COMMANDS_FILE))?
            }
            None => CommandLog::in_memory(),
        };
        let mut registry = Registry::new(clock.clone());
        store.register_all(&mut registry, &base_url)?;
        Ok(AppState {
            registry: Mutex::new(registry),
            store: RwLock::new(store),
            commands: Mutex::new(commands),
            clock,
            base_url,
            store_dir,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn registry(&self) -> &Mutex<Registry> {
        &self.registry
    }

    pub fn store(&self) -> &RwLock<SeriesStore> {
        &self.store
    }

    /// Ingests bridge CSV, persists the store and registers new entities.
    pub fn ingest(&self, csv: &[u8]) -> Result<IngestReport, BridgeError> {
        let mut store = self.store.write();
        let mut staged = store.clone();
        let report = staged.ingest_reader(csv)?;
        if let Some(dir) = &self.store_dir {
            let tmp = dir.join(format!("{SERIES_FILE}.tmp"));
            staged.save_csv(&tmp)?;
            std::fs::rename(&tmp, dir.join(SERIES_FILE))?;
        }
        *store = staged;
        let mut registry = self.registry.lock();
        for id in &report.entities {
            let domain = store
                .entities()
                .find(|(e, _)| e == id)
                .map(|(_, d)| d.to_string())
                .unwrap_or_default();
            registry.register(entity_td(id, &domain, &self.base_url))?;
        }
        Ok(report)
    }

    /// Heartbeats bridged entities, then expires stale Things.
    pub fn sweep(&self) -> Vec<MembershipEvent> {
        let store = self.store.read();
        let mut registry = self.registry.lock();
        for (id, domain) in store.entities() {
            if registry.heartbeat(id).is_err() {
                if let Err(e) = registry.register(entity_td(id, domain, &self.base_url)) {
                    tracing::warn!(entity = id, error = %e, "cannot re-register bridged entity");
                }
            }
        }
        let now = self.clock.now();
        registry.liveness_sweep(now)
    }

    pub fn publish(&self, entity: &str, payload: Value) -> Result<u64, ApiError> {
        let known = self.store.read().contains(entity) || self.registry.lock().get(entity).is_some();
        if !known {
            return Err(ApiError::NotFound(format!("unknown entity `{entity}`")));
        }
        let Value::Object(mut obj) = payload else {
            return Err(ApiError::BadRequest("payload must be a JSON object".into()));
        };
        match obj.get("entity_id") {
            None => {
                obj.insert("entity_id".into(), Value::String(entity.to_string()));
            }
            Some(Value::String(id)) if id == entity => {}
            Some(_) => {
                return Err(ApiError::BadRequest(format!(
                    "payload entity_id does not match `{entity}`"
                )))
            }
        }
        let rec = CommandRecord {
            ts: self.clock.now(),
            topic: format!("homeassistant/{entity}/set"),
            payload: Value::Object(obj),
        };
        Ok(self.commands.lock().publish(&rec)?)
    }

    pub fn commands(&self) -> Result<Vec<CommandRecord>, BridgeError> {
        self.commands.lock().records()
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(json!({ "error": msg }))).into_response()
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::ConflictingId(_) => ApiError::Conflict(e.to_string()),
            RegistryError::UnknownThing(_) => ApiError::NotFound(e.to_string()),
            RegistryError::Invalid(_) => ApiError::BadRequest(e.to_string()),
        }
    }
}

impl From<TdError> for ApiError {
    fn from(e: TdError) -> Self {
        ApiError::BadRequest(e.to_string())
    }
}

impl From<BridgeError> for ApiError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::UnknownEntity(_) => ApiError::NotFound(e.to_string()),
            BridgeError::Registry(r) => r.into(),
            BridgeError::Io(_) | BridgeError::Json(_) => ApiError::Internal(e.to_string()),
            _ => ApiError::BadRequest(e.to_string()),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/things", post(register_thing).get(query_things))
        .route("/things/{id}", get(get_thing).delete(delete_thing))
        .route("/things/{id}/heartbeat", post(heartbeat))
        .route("/events", get(events))
        .route("/bridge/ingest", post(ingest))
        .route("/bridge/{entity}/series", get(series))
        .route("/bridge/{entity}/command", put(command))
        .with_state(state)
}

async fn register_thing(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let td = parse_td(&body)?;
    let seq = st.registry.lock().register(td)?;
    Ok((StatusCode::CREATED, Json(json!({ "seq": seq }))))
}

async fn query_things(
    State(st): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<impl IntoResponse, ApiError> {
    let mut q = TdQuery::default();
    for (key, value) in params {
        match key.as_str() {
            "domainTag" => q.domain_tag = Some(value),
            "valueKind" => q.value_kind = Some(value.parse().map_err(ApiError::BadRequest)?),
            "thingType" => q.thing_type = Some(value.parse().map_err(ApiError::BadRequest)?),
            other => return Err(ApiError::BadRequest(format!("unknown filter `{other}`"))),
        }
    }
    Ok(Json(st.registry.lock().query(&q)))
}

async fn get_thing(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    st.registry
        .lock()
        .get_live(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("unknown thing `{id}`")))
}

async fn delete_thing(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    st.registry.lock().deregister(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn heartbeat(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    st.registry.lock().heartbeat(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct EventsParams {
    #[serde(default)]
    since: u64,
}

async fn events(
    State(st): State<Arc<AppState>>,
    Query(p): Query<EventsParams>,
) -> Json<Vec<MembershipEvent>> {
    Json(st.registry.lock().events_since(p.since))
}

async fn ingest(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<IngestReport>, ApiError> {
    Ok(Json(st.ingest(&body)?))
}

#[derive(Deserialize)]
struct SeriesParams {
    from: Option<String>,
    to: Option<String>,
    resample: Option<u32>,
}

fn ts_param(raw: Option<&str>, default: DateTime<Utc>, name: &str) -> Result<DateTime<Utc>, ApiError> {
    match raw {
        None => Ok(default),
        Some(s) => parse_ts(s).ok_or_else(|| ApiError::BadRequest(format!("bad `{name}` timestamp"))),
    }
}

async fn series(
    State(st): State<Arc<AppState>>,
    Path(entity): Path<String>,
    Query(p): Query<SeriesParams>,
) -> Result<impl IntoResponse, ApiError> {
    let store = st.store.read();
    let (first, last) = store
        .span(&entity)
        .ok_or_else(|| ApiError::NotFound(format!("unknown entity `{entity}`")))?;
    let from = ts_param(p.from.as_deref(), first, "from")?;
    let to = ts_param(p.to.as_deref(), last, "to")?;
    Ok(Json(store.read_series(&entity, from, to, p.resample)?))
}

async fn command(
    State(st): State<Arc<AppState>>,
    Path(entity): Path<String>,
    Json(payload): Json<Value>,
) -> Result<impl IntoResponse, ApiError> {
    let offset = st.publish(&entity, payload)?;
    Ok(Json(json!({ "offset": offset })))
}

/// A running service. Dropping it without [`Server::shutdown`] leaves the
/// task running until the runtime stops.
pub struct Server {
    addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        self.handle.await.unwrap_or(Ok(()))
    }
}

/// Binds the listener, loads the store and spawns the server and its sweeper.
pub async fn start(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Server, ServiceError> {
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(|e| ServiceError::Bind(config.listen, e))?;
    let addr = listener.local_addr()?;
    let base_url = config
        .public_url
        .clone()
        .unwrap_or_else(|| format!("http://{addr}"));
    let state = Arc::new(AppState::open(config.store_dir.clone(), base_url, clock)?);
    let (tx, rx) = oneshot::channel::<()>();

    let sweeper_state = state.clone();
    let period = Duration::from_secs(config.sweep_interval_secs.max(1));
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            for ev in sweeper_state.sweep() {
                tracing::info!(thing = %ev.thing_id, seq = ev.seq, "thing expired");
            }
        }
    });

    let app = router(state.clone());
    let handle = tokio::spawn(async move {
        let result = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        sweeper.abort();
        result
    });
    tracing::info!(%addr, "service listening");
    Ok(Server {
        addr,
        state,
        stop: Some(tx),
        handle,
    })
}

/// Runs the service on the system clock until `signal` resolves.
pub async fn serve(config: &ServiceConfig, signal: impl Future<Output = ()>) -> Result<(), ServiceError> {
    let server = start(config, Arc::new(SystemClock)).await?;
    signal.await;
    server.shutdown().await?;
    Ok(())
}
