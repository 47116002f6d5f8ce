//! Routes, query parsing and response shapes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use hpcmon_core::analytics::{
    roofline_point, Detector, DetectorFinding, JobSummary, JobTimeline, RooflinePoint, Severity,
};
use hpcmon_core::model::JobIndexEntry;
use hpcmon_store::JobFilter;
use serde::{Deserialize, Serialize};

use crate::auth::Principal;
use crate::{ApiError, AppState};

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/api/jobs", get(jobs))
        .route("/api/facets", get(facets))
        .route("/api/roofline", get(roofline))
        .route("/api/findings", get(findings))
        .route("/api/jobs/{id}/timeline", get(job_timeline))
        .route("/api/jobs/{id}/summary", get(job_summary))
        .route("/api/jobs/{id}/findings", get(job_findings))
        .route("/reports/{id}", get(report))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// One page of a list. `next_offset` is absent on the last page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub next_offset: Option<usize>,
}

impl<T> Page<T> {
    pub fn slice(all: Vec<T>, p: Paging) -> Page<T> {
        let total = all.len();
        let items: Vec<T> = all.into_iter().skip(p.offset).take(p.limit).collect();
        let end = p.offset.saturating_add(items.len());
        Page {
            items,
            total,
            offset: p.offset,
            limit: p.limit,
            next_offset: (end < total).then_some(end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ceiling {
    pub peak_gflops: f64,
    pub peak_bw_gbs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineResponse {
    #[serde(flatten)]
    pub page: Page<RooflinePoint>,
    /// Per node type, per socket.
    pub ceilings: BTreeMap<String, Ceiling>,
}

/// Distinct filter values, for drop-downs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Facets {
    pub clusters: BTreeSet<String>,
    pub partitions: BTreeSet<String>,
    pub users: BTreeSet<String>,
    pub node_types: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paging {
    pub offset: usize,
    pub limit: usize,
}

type Params = HashMap<String, String>;

const JOB_KEYS: &[&str] = &[
    "cluster",
    "user",
    "partition",
    "node_type",
    "from",
    "to",
    "min_core_hours",
];
const PAGE_KEYS: &[&str] = &["limit", "offset"];

fn check_keys(params: &Params, groups: &[&[&str]]) -> Result<(), ApiError> {
    let mut unknown: Vec<&str> = params
        .keys()
        .map(String::as_str)
        .filter(|k| !groups.iter().any(|g| g.contains(k)))
        .collect();
    unknown.sort();
    match unknown.first() {
        Some(k) => Err(ApiError::field(k, format!("unknown query parameter {k:?}"))),
        None => Ok(()),
    }
}

fn parse_num<T: std::str::FromStr>(
    params: &Params,
    key: &str,
    what: &str,
) -> Result<Option<T>, ApiError> {
    params
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::field(key, format!("{key} must be {what}, got {v:?}")))
        })
        .transpose()
}

fn text(params: &Params, key: &str) -> Result<Option<String>, ApiError> {
    match params.get(key) {
        Some(v) if v.is_empty() => Err(ApiError::field(key, format!("{key} must not be empty"))),
        v => Ok(v.cloned()),
    }
}

pub fn parse_paging(params: &Params) -> Result<Paging, ApiError> {
    let limit = parse_num::<usize>(params, "limit", "a positive integer")?.unwrap_or(DEFAULT_LIMIT);
    if limit == 0 || limit > MAX_LIMIT {
        return Err(ApiError::field(
            "limit",
            format!("limit must be between 1 and {MAX_LIMIT}"),
        ));
    }
    let offset = parse_num::<usize>(params, "offset", "a non-negative integer")?.unwrap_or(0);
    Ok(Paging { offset, limit })
}

/// `from`/`to` are epoch seconds; the range is `[from, to)`.
pub fn parse_job_filter(params: &Params) -> Result<JobFilter, ApiError> {
    let from = parse_num::<i64>(params, "from", "epoch seconds")?;
    let to = parse_num::<i64>(params, "to", "epoch seconds")?;
    let time_range = match (from, to) {
        (None, None) => None,
        (f, t) => {
            let (f, t) = (f.unwrap_or(i64::MIN), t.unwrap_or(i64::MAX));
            if f >= t {
                return Err(ApiError::field(
                    "to",
                    format!("time range needs from < to, got [{f}, {t})"),
                ));
            }
            Some((f, t))
        }
    };
    let min_core_hours = parse_num::<f64>(params, "min_core_hours", "a number")?;
    if let Some(m) = min_core_hours {
        if !m.is_finite() || m < 0.0 {
            return Err(ApiError::field(
                "min_core_hours",
                "min_core_hours must be a non-negative number",
            ));
        }
    }
    Ok(JobFilter {
        cluster: text(params, "cluster")?,
        user: text(params, "user")?,
        partition: text(params, "partition")?,
        node_type: text(params, "node_type")?,
        time_range,
        min_core_hours,
    })
}

fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let value = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok());
    state
        .auth()
        .authenticate(value)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token"))
}

fn require_staff(state: &AppState, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let p = authenticate(state, headers)?;
    if !p.is_staff() {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "the API is restricted to staff",
        ));
    }
    Ok(p)
}

fn list(
    state: &AppState,
    store: &hpcmon_store::Store,
    filter: &JobFilter,
) -> Result<Vec<JobIndexEntry>, ApiError> {
    store
        .list_jobs(filter, state.catalog())
        .map_err(|e| ApiError::field("from", e.to_string()))
}

async fn jobs(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<Params>,
) -> Result<Json<Page<JobIndexEntry>>, ApiError> {
    require_staff(&state, &headers)?;
    check_keys(&q, &[JOB_KEYS, PAGE_KEYS])?;
    let (filter, paging) = (parse_job_filter(&q)?, parse_paging(&q)?);
    let all = state
        .with_store(move |st, store| list(st, store, &filter))
        .await?;
    Ok(Json(Page::slice(all, paging)))
}

async fn facets(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<Params>,
) -> Result<Json<Facets>, ApiError> {
    require_staff(&state, &headers)?;
    check_keys(&q, &[JOB_KEYS])?;
    let filter = parse_job_filter(&q)?;
    let all = state
        .with_store(move |st, store| list(st, store, &filter))
        .await?;
    let mut f = Facets::default();
    for e in all {
        f.clusters.insert(e.cluster);
        f.partitions.extend(e.partition);
        f.users.extend(e.user);
        f.node_types.extend(e.node_type);
    }
    Ok(Json(f))
}

async fn roofline(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<Params>,
) -> Result<Json<RooflineResponse>, ApiError> {
    require_staff(&state, &headers)?;
    check_keys(&q, &[JOB_KEYS, PAGE_KEYS])?;
    let (filter, paging) = (parse_job_filter(&q)?, parse_paging(&q)?);
    let ceiling_types: Vec<String> = match &filter.node_type {
        Some(t) => vec![t.clone()],
        None => state.catalog().node_types.keys().cloned().collect(),
    };
    let points = state
        .with_store(move |st, store| {
            let mut points = Vec::new();
            for e in list(st, store, &filter)? {
                let a = st.analysis(store, &e.job_id)?;
                points.extend(roofline_point(&a.timeline, &e));
            }
            Ok(points)
        })
        .await?;
    let ceilings = ceiling_types
        .into_iter()
        .filter_map(|t| {
            let spec = state.catalog().get(&t)?;
            Some((
                t,
                Ceiling {
                    peak_gflops: spec.peak_gflops,
                    peak_bw_gbs: spec.peak_bw_gbs,
                },
            ))
        })
        .collect();
    Ok(Json(RooflineResponse {
        page: Page::slice(points, paging),
        ceilings,
    }))
}

fn severity_rank(s: Severity) -> u8 {
    match s {
        Severity::Warn => 0,
        Severity::Info => 1,
    }
}

/// Warnings first, then most recent window end, then job and detector.
pub fn sort_findings(findings: &mut [DetectorFinding]) {
    findings.sort_by(|a, b| {
        severity_rank(a.severity)
            .cmp(&severity_rank(b.severity))
            .then(b.window.1.cmp(&a.window.1))
            .then(b.window.0.cmp(&a.window.0))
            .then_with(|| a.job_id.cmp(&b.job_id))
            .then(a.detector.cmp(&b.detector))
    });
}

fn parse_detector(v: &str) -> Result<Detector, ApiError> {
    Detector::ALL
        .into_iter()
        .find(|d| d.as_str() == v)
        .ok_or_else(|| {
            let known: Vec<&str> = Detector::ALL.iter().map(|d| d.as_str()).collect();
            ApiError::field(
                "detector",
                format!("unknown detector {v:?}; known: {}", known.join(", ")),
            )
        })
}

fn parse_severity(v: &str) -> Result<Severity, ApiError> {
    match v {
        "warn" => Ok(Severity::Warn),
        "info" => Ok(Severity::Info),
        _ => Err(ApiError::field(
            "severity",
            format!("severity must be warn or info, got {v:?}"),
        )),
    }
}

async fn findings(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<Params>,
) -> Result<Json<Page<DetectorFinding>>, ApiError> {
    require_staff(&state, &headers)?;
    check_keys(&q, &[JOB_KEYS, PAGE_KEYS, &["detector", "severity"]])?;
    let (filter, paging) = (parse_job_filter(&q)?, parse_paging(&q)?);
    let detector = q.get("detector").map(|v| parse_detector(v)).transpose()?;
    let severity = q.get("severity").map(|v| parse_severity(v)).transpose()?;
    let mut all = state
        .with_store(move |st, store| {
            let mut out = Vec::new();
            for e in list(st, store, &filter)? {
                let a = st.analysis(store, &e.job_id)?;
                out.extend(
                    a.summary
                        .findings
                        .iter()
                        .filter(|f| detector.is_none_or(|d| f.detector == d))
                        .filter(|f| severity.is_none_or(|s| f.severity == s))
                        .cloned(),
                );
            }
            Ok(out)
        })
        .await?;
    sort_findings(&mut all);
    Ok(Json(Page::slice(all, paging)))
}

async fn job_timeline(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<JobTimeline>, ApiError> {
    require_staff(&state, &headers)?;
    let a = state
        .with_store(move |st, store| st.analysis(store, &id))
        .await?;
    Ok(Json(a.timeline.clone()))
}

async fn job_summary(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<JobSummary>, ApiError> {
    require_staff(&state, &headers)?;
    let a = state
        .with_store(move |st, store| st.analysis(store, &id))
        .await?;
    Ok(Json(a.summary.clone()))
}

async fn job_findings(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<Params>,
) -> Result<Json<Page<DetectorFinding>>, ApiError> {
    require_staff(&state, &headers)?;
    check_keys(&q, &[PAGE_KEYS])?;
    let paging = parse_paging(&q)?;
    let a = state
        .with_store(move |st, store| st.analysis(store, &id))
        .await?;
    Ok(Json(Page::slice(a.summary.findings.clone(), paging)))
}

fn now_epoch() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Authentication, then existence, then ownership.
async fn report(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let who = authenticate(&state, &headers)?;
    let doc = state
        .with_store(move |st, store| {
            let entry = store
                .job_entry(&id, st.catalog())
                .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
            if !who.may_read_job(entry.user.as_deref()) {
                return Err(ApiError::new(
                    StatusCode::FORBIDDEN,
                    format!("job {id} belongs to another user"),
                ));
            }
            st.report(store, &id, now_epoch())
        })
        .await?;
    let disposition = format!(
        "attachment; filename=\"job-{}.html\"",
        sanitize(&doc.job_id)
    );
    Ok((
        [
            (header::CONTENT_TYPE, "text/html; charset=utf-8".to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        doc.html.clone(),
    )
        .into_response())
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}
