//! Job-level statistics and roofline points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::detect::{run_detectors, DetectorFinding};
use super::timeline::{metric_unit, JobTimeline, Point};
use super::DetectorParams;
use crate::model::{JobIndexEntry, MachineCatalog};

/// Median; the mean of the two central values for an even count.
/// `values` is sorted in place. Panics on an empty slice.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Cross-series statistics at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub ts: i64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

/// Per-timestamp min/median/max over every series with a value there.
pub fn band<'a>(series: impl IntoIterator<Item = &'a [Point]>) -> Vec<BandPoint> {
    let mut at: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for s in series {
        for p in s {
            at.entry(p.ts).or_default().push(p.value);
        }
    }
    at.into_iter()
        .map(|(ts, mut v)| {
            let med = median(&mut v);
            BandPoint {
                ts,
                min: v[0],
                median: med,
                max: v[v.len() - 1],
                count: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub unit: String,
    /// Whole-job time-weighted mean.
    pub avg: Option<f64>,
    pub max: Option<f64>,
    pub band: Vec<BandPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SoftwareFacts {
    pub max_task_count: Option<f64>,
    pub max_thread_count: Option<f64>,
    pub max_distinct_busy_cores: Option<f64>,
    pub peak_rss_kib: Option<f64>,
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub cluster: String,
    pub user: Option<String>,
    pub partition: Option<String>,
    pub node_type: Option<String>,
    pub nodes: Vec<String>,
    pub first_ts: i64,
    pub last_ts: i64,
    pub interval_s: i64,
    pub core_hours: f64,
    /// Derived points and derived gaps over all sockets.
    pub derived_points: usize,
    pub derived_gaps: usize,
    pub metrics: BTreeMap<String, MetricStats>,
    pub totals: BTreeMap<String, f64>,
    pub software: SoftwareFacts,
    pub findings: Vec<DetectorFinding>,
}

fn weighted_avg(points: impl Iterator<Item = Point>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        num += p.value * p.dt;
        den += p.dt;
    }
    (den > 0.0).then(|| num / den)
}

fn series_max(points: impl Iterator<Item = Point>) -> Option<f64> {
    points.map(|p| p.value).reduce(f64::max)
}

/// Job-wide totals of the derived metrics: (flops, bytes, dt, instructions, cycles).
fn derived_sums(tl: &JobTimeline) -> (f64, f64, f64, f64, f64) {
    tl.derived.iter().fold((0.0, 0.0, 0.0, 0.0, 0.0), |acc, d| {
        (
            acc.0 + d.flops,
            acc.1 + d.bytes,
            acc.2 + d.dt,
            acc.3 + d.instructions as f64,
            acc.4 + d.cycles as f64,
        )
    })
}

/// Statistics of every series of the timeline plus detector findings.
/// GFLOP/s and bandwidth averages are time-weighted; intensity and IPC
/// averages are ratios of job totals.
pub fn job_summary(
    tl: &JobTimeline,
    entry: Option<&JobIndexEntry>,
    catalog: &MachineCatalog,
    params: &DetectorParams,
) -> JobSummary {
    let (flops, bytes, dt, instr, cycles) = derived_sums(tl);
    let mut metrics = BTreeMap::new();
    for (name, by_id) in &tl.series {
        let all = || by_id.values().flat_map(|v| v.iter().copied());
        let avg = match name.as_str() {
            "gflops" => (dt > 0.0).then(|| flops / dt / 1e9),
            "bw_gbs" => (dt > 0.0).then(|| bytes / dt / 1e9),
            "intensity" => (bytes > 0.0).then(|| flops / bytes),
            "ipc" => (cycles > 0.0).then(|| instr / cycles),
            _ => weighted_avg(all()),
        };
        metrics.insert(
            name.clone(),
            MetricStats {
                unit: metric_unit(name).to_string(),
                avg,
                max: series_max(all()),
                band: band(by_id.values().map(|v| v.as_slice())),
            },
        );
    }
    let peak = |m: &str| metrics.get(m).and_then(|s: &MetricStats| s.max);
    let software = SoftwareFacts {
        max_task_count: peak("task_count"),
        max_thread_count: peak("thread_count"),
        max_distinct_busy_cores: peak("distinct_busy_cores"),
        peak_rss_kib: peak("rss_gib").map(|g| (g * 1_048_576.0).round()),
        commands: tl.commands.clone(),
    };
    let details = tl.details.as_ref();
    JobSummary {
        job_id: tl.job_id.clone(),
        cluster: tl.cluster.clone(),
        user: details.map(|d| d.user_id.clone()),
        partition: details.map(|d| d.partition.clone()),
        node_type: tl.node_type().map(str::to_string),
        nodes: tl.nodes.clone(),
        first_ts: tl.first_ts,
        last_ts: tl.last_ts,
        interval_s: tl.interval_s,
        core_hours: entry.map(|e| e.core_hours).unwrap_or(0.0),
        derived_points: tl.derived.len(),
        derived_gaps: tl.derived_gaps().len(),
        metrics,
        totals: tl.totals.clone(),
        software,
        findings: run_detectors(tl, catalog, params),
    }
}

/// One job in the roofline overview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub job_id: String,
    pub intensity_avg: f64,
    pub gflops_avg: f64,
    pub bw_avg: f64,
    pub core_hours: f64,
    pub user: Option<String>,
    pub partition: Option<String>,
    pub node_type: Option<String>,
}

/// The job's time-weighted average point. Absent without memory traffic or
/// without core hours.
pub fn roofline_point(tl: &JobTimeline, entry: &JobIndexEntry) -> Option<RooflinePoint> {
    let (flops, bytes, dt, _, _) = derived_sums(tl);
    if !(bytes > 0.0 && dt > 0.0 && entry.core_hours > 0.0) {
        return None;
    }
    Some(RooflinePoint {
        job_id: tl.job_id.clone(),
        intensity_avg: flops / bytes,
        gflops_avg: flops / dt / 1e9,
        bw_avg: bytes / dt / 1e9,
        core_hours: entry.core_hours,
        user: entry.user.clone(),
        partition: entry.partition.clone(),
        node_type: entry
            .node_type
            .clone()
            .or_else(|| tl.node_type().map(str::to_string)),
    })
}
