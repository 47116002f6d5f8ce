//! HTTP+JSON query service over the store and analytics.
//!
//! `/api/*` routes are for staff; `/reports/{id}` serves a job's report to
//! its owner or to staff. Every list endpoint is paginated with
//! `limit`/`offset`. See `API.md` in this crate for the route reference.

pub mod api;
pub mod auth;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hpcmon_core::analytics::{job_summary, job_timeline, DetectorParams, JobSummary, JobTimeline};
use hpcmon_core::model::{JobIndexEntry, MachineCatalog};
use hpcmon_core::report::{render_job_report, ReportDocument};
use hpcmon_store::{SharedStore, Store};
use serde::Serialize;
use tokio::sync::Semaphore;

pub use api::router;
pub use auth::{AuthTable, Principal, Role};

const CACHE_CAP: usize = 512;

/// Error body: `{"error": "...", "field": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            error: msg.into(),
            field: None,
        }
    }

    pub fn field(field: &str, msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST.as_u16(),
            error: msg.into(),
            field: Some(field.to_string()),
        }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, what)
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Everything computed for one job from one store snapshot.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub entry: Option<JobIndexEntry>,
    pub timeline: JobTimeline,
    pub summary: JobSummary,
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Concurrent analyses and renders.
    pub workers: usize,
    /// How often a read-only store looks for newly ingested data.
    pub refresh_every: Option<Duration>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions {
            workers: 4,
            refresh_every: Some(Duration::from_secs(30)),
        }
    }
}

/// Cached report keyed by (last ts, record count) of its job.
type CachedReport = ((i64, usize), Arc<ReportDocument>);

struct Inner {
    store: SharedStore,
    catalog: MachineCatalog,
    params: DetectorParams,
    auth: AuthTable,
    pool: Semaphore,
    /// job id -> (record count, analysis)
    analyses: Mutex<HashMap<String, (usize, Arc<Analysis>)>>,
    /// job id -> ((last ts, record count), report)
    reports: Mutex<HashMap<String, CachedReport>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(
        store: SharedStore,
        catalog: MachineCatalog,
        params: DetectorParams,
        auth: AuthTable,
        workers: usize,
    ) -> Self {
        AppState(Arc::new(Inner {
            store,
            catalog,
            params,
            auth,
            pool: Semaphore::new(workers.max(1)),
            analyses: Mutex::new(HashMap::new()),
            reports: Mutex::new(HashMap::new()),
        }))
    }

    pub fn store(&self) -> &SharedStore {
        &self.0.store
    }

    pub fn catalog(&self) -> &MachineCatalog {
        &self.0.catalog
    }

    pub fn params(&self) -> &DetectorParams {
        &self.0.params
    }

    pub fn auth(&self) -> &AuthTable {
        &self.0.auth
    }

    /// Runs `f` on a blocking thread against one store snapshot, holding a
    /// worker slot so long renders cannot starve other requests.
    pub async fn with_store<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&AppState, &Store) -> Result<T, ApiError> + Send + 'static,
    {
        let _permit = self
            .0
            .pool
            .acquire()
            .await
            .map_err(|_| ApiError::internal("worker pool closed"))?;
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let store = state.0.store.read().unwrap_or_else(|p| p.into_inner());
            f(&state, &store)
        })
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
    }

    /// Timeline and summary of a job, cached until the job gains records.
    pub fn analysis(&self, store: &Store, job_id: &str) -> Result<Arc<Analysis>, ApiError> {
        let count = store.job_record_count(job_id);
        if count == 0 {
            return Err(ApiError::not_found(format!("unknown job {job_id}")));
        }
        if let Some((c, a)) = self
            .0
            .analyses
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(job_id)
        {
            if *c == count {
                return Ok(a.clone());
            }
        }
        let samples = store.job_samples(job_id);
        let timeline = job_timeline(job_id, &samples, &self.0.catalog)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let entry = store.job_entry(job_id, &self.0.catalog);
        let summary = job_summary(&timeline, entry.as_ref(), &self.0.catalog, &self.0.params);
        let a = Arc::new(Analysis {
            entry,
            timeline,
            summary,
        });
        let mut cache = self.0.analyses.lock().unwrap_or_else(|p| p.into_inner());
        if cache.len() >= CACHE_CAP {
            cache.clear();
        }
        cache.insert(job_id.to_string(), (count, a.clone()));
        Ok(a)
    }

    /// Rendered report, cached by the job's last data timestamp.
    pub fn report(
        &self,
        store: &Store,
        job_id: &str,
        generated_at: i64,
    ) -> Result<Arc<ReportDocument>, ApiError> {
        let last_ts = store
            .job_last_ts(job_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown job {job_id}")))?;
        let key = (last_ts, store.job_record_count(job_id));
        if let Some((k, doc)) = self
            .0
            .reports
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(job_id)
        {
            if *k == key {
                return Ok(doc.clone());
            }
        }
        let a = self.analysis(store, job_id)?;
        let spec = a.timeline.spec(&self.0.catalog);
        let doc = Arc::new(render_job_report(
            &a.summary,
            &a.timeline,
            spec,
            generated_at,
        ));
        let mut cache = self.0.reports.lock().unwrap_or_else(|p| p.into_inner());
        if cache.len() >= CACHE_CAP {
            cache.clear();
        }
        cache.insert(job_id.to_string(), (key, doc.clone()));
        Ok(doc)
    }
}

/// Periodically picks up data appended by a separate ingest process.
pub fn spawn_refresh(state: AppState, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let store = state.store().clone();
            let res = tokio::task::spawn_blocking(move || {
                let mut st = store.write().unwrap_or_else(|p| p.into_inner());
                if st.is_read_only() {
                    st.refresh().map(Some)
                } else {
                    Ok(None)
                }
            })
            .await;
            match res {
                Ok(Ok(Some(n))) if n > 0 => log::info!("picked up {n} new records"),
                Ok(Ok(_)) => {}
                Ok(Err(e)) => log::warn!("store refresh: {e}"),
                Err(e) => log::warn!("store refresh task: {e}"),
            }
        }
    })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    opts: &ServiceOptions,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let refresh = opts
        .refresh_every
        .map(|every| spawn_refresh(state.clone(), every));
    let res = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    if let Some(r) = refresh {
        r.abort();
    }
    res
}
