//! Misuse detectors. All comparisons are strict: a value exactly at its
//! threshold never triggers a finding.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::timeline::JobTimeline;
use super::DetectorParams;
use crate::model::MachineCatalog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Hanging,
    GpuUnused,
    MemUnused,
    LowCores,
}

impl Detector {
    pub const ALL: [Detector; 4] = [
        Detector::Hanging,
        Detector::GpuUnused,
        Detector::MemUnused,
        Detector::LowCores,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Hanging => "hanging",
            Detector::GpuUnused => "gpu_unused",
            Detector::MemUnused => "mem_unused",
            Detector::LowCores => "low_cores",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorFinding {
    pub detector: Detector,
    pub job_id: String,
    pub severity: Severity,
    pub evidence: BTreeMap<String, f64>,
    /// `[t0, t1)`.
    pub window: (i64, i64),
}

fn finding(
    tl: &JobTimeline,
    detector: Detector,
    severity: Severity,
    window: (i64, i64),
    evidence: &[(&str, f64)],
) -> DetectorFinding {
    DetectorFinding {
        detector,
        job_id: tl.job_id.clone(),
        severity,
        evidence: evidence.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        window,
    }
}

/// Whole-job window: from the start of the first measured interval to the
/// last sample.
fn job_window(tl: &JobTimeline) -> (i64, i64) {
    (tl.first_ts - tl.interval_s, tl.last_ts)
}

/// Runs of intervals where every socket is below both floors.
pub fn detect_hanging(tl: &JobTimeline, params: &DetectorParams) -> Vec<DetectorFinding> {
    // Interval (t0, t1) -> (all sockets low, max gflops, max ipc).
    let mut by_interval: BTreeMap<(i64, i64), (bool, f64, f64)> = BTreeMap::new();
    for d in &tl.derived {
        let ipc = d.ipc.unwrap_or(0.0);
        let low = d.gflops < params.gflops_floor && ipc < params.ipc_floor;
        let e = by_interval.entry((d.t0, d.ts)).or_insert((true, 0.0, 0.0));
        e.0 &= low;
        e.1 = e.1.max(d.gflops);
        e.2 = e.2.max(ipc);
    }
    let mut out = Vec::new();
    let mut run: Vec<((i64, i64), f64, f64)> = Vec::new();
    let mut flush = |run: &mut Vec<((i64, i64), f64, f64)>| {
        if run.len() >= params.consecutive {
            let window = (run[0].0 .0, run[run.len() - 1].0 .1);
            let max_g = run.iter().map(|r| r.1).fold(0.0, f64::max);
            let max_i = run.iter().map(|r| r.2).fold(0.0, f64::max);
            out.push(finding(
                tl,
                Detector::Hanging,
                Severity::Warn,
                window,
                &[
                    ("gflops_floor", params.gflops_floor),
                    ("ipc_floor", params.ipc_floor),
                    ("consecutive", params.consecutive as f64),
                    ("intervals", run.len() as f64),
                    ("max_gflops", max_g),
                    ("max_ipc", max_i),
                ],
            ));
        }
        run.clear();
    };
    for (interval, (low, g, i)) in by_interval {
        let contiguous = run.last().is_none_or(|r| r.0 .1 == interval.0);
        if !low || !contiguous {
            flush(&mut run);
        }
        if low {
            run.push((interval, g, i));
        }
    }
    flush(&mut run);
    out
}

pub fn detect_gpu_unused(
    tl: &JobTimeline,
    catalog: &MachineCatalog,
    params: &DetectorParams,
) -> Vec<DetectorFinding> {
    let allocated = tl.details.as_ref().map_or(0, |d| d.gpus_allocated);
    let node_gpus = tl.spec(catalog).gpu_count;
    if allocated == 0 && node_gpus == 0 {
        return Vec::new();
    }
    let util = tl.series.get("gpu_util_pct");
    let mem = tl.series.get("gpu_mem_used_mib");
    let Some(util) = util else { return Vec::new() };
    let max_of = |s: Option<&BTreeMap<String, Vec<super::Point>>>| {
        s.into_iter()
            .flat_map(|m| m.values())
            .flatten()
            .map(|p| p.value)
            .fold(0.0, f64::max)
    };
    let max_util = max_of(Some(util));
    let max_mem = max_of(mem);
    if max_util < params.gpu_util_floor && max_mem < params.gpu_mem_floor_mib {
        vec![finding(
            tl,
            Detector::GpuUnused,
            Severity::Warn,
            job_window(tl),
            &[
                ("gpu_util_floor", params.gpu_util_floor),
                ("gpu_mem_floor_mib", params.gpu_mem_floor_mib),
                ("max_util_pct", max_util),
                ("max_mem_used_mib", max_mem),
                ("gpus_allocated", allocated as f64),
                ("gpus_per_node", node_gpus as f64),
            ],
        )]
    } else {
        Vec::new()
    }
}

pub fn detect_mem_unused(
    tl: &JobTimeline,
    catalog: &MachineCatalog,
    params: &DetectorParams,
) -> Vec<DetectorFinding> {
    let spec = tl.spec(catalog);
    if !spec.large_memory {
        return Vec::new();
    }
    let Some(rss) = tl.series.get("rss_gib") else {
        return Vec::new();
    };
    let peak_gib = rss.values().flatten().map(|p| p.value).fold(0.0, f64::max);
    let peak_kib = (peak_gib * 1_048_576.0).round();
    let threshold_kib = params.mem_fraction * catalog.standard_ram_gib * 1_048_576.0;
    if peak_kib < threshold_kib {
        vec![finding(
            tl,
            Detector::MemUnused,
            Severity::Info,
            job_window(tl),
            &[
                ("mem_fraction", params.mem_fraction),
                ("standard_ram_gib", catalog.standard_ram_gib),
                ("threshold_kib", threshold_kib),
                ("peak_rss_kib", peak_kib),
                ("node_ram_gib", spec.ram_gib),
            ],
        )]
    } else {
        Vec::new()
    }
}

pub fn detect_low_cores(
    tl: &JobTimeline,
    catalog: &MachineCatalog,
    params: &DetectorParams,
) -> Vec<DetectorFinding> {
    let Some(busy) = tl.series.get("distinct_busy_cores") else {
        return Vec::new();
    };
    let max_busy = busy.values().flatten().map(|p| p.value).fold(0.0, f64::max);
    let cores = tl.spec(catalog).cores_per_node() as f64;
    if max_busy < params.core_fraction * cores {
        vec![finding(
            tl,
            Detector::LowCores,
            Severity::Info,
            job_window(tl),
            &[
                ("core_fraction", params.core_fraction),
                ("cores_per_node", cores),
                ("max_busy_cores", max_busy),
            ],
        )]
    } else {
        Vec::new()
    }
}

pub fn run_detectors(
    tl: &JobTimeline,
    catalog: &MachineCatalog,
    params: &DetectorParams,
) -> Vec<DetectorFinding> {
    let mut out = detect_hanging(tl, params);
    out.extend(detect_gpu_unused(tl, catalog, params));
    out.extend(detect_mem_unused(tl, catalog, params));
    out.extend(detect_low_cores(tl, catalog, params));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::timeline::{DerivedMetrics, Point};

    fn timeline(gflops: &[f64]) -> JobTimeline {
        let derived = gflops
            .iter()
            .enumerate()
            .flat_map(|(i, &g)| {
                (0..2).map(move |socket| DerivedMetrics {
                    node: "n1".into(),
                    socket,
                    t0: 600 * i as i64,
                    ts: 600 * (i as i64 + 1),
                    dt: 600.0,
                    gflops: g,
                    bw_gbs: 1.0,
                    intensity: Some(g),
                    ipc: Some(if g > 0.0 { 1.0 } else { 0.0 }),
                    flops: g * 600e9,
                    bytes: 600e9,
                    instructions: 0,
                    cycles: 0,
                    degraded: false,
                })
            })
            .collect();
        JobTimeline {
            job_id: "j".into(),
            cluster: "c".into(),
            details: None,
            nodes: vec!["n1".into()],
            node_types: BTreeMap::from([("n1".to_string(), "cpu".to_string())]),
            first_ts: 0,
            last_ts: 600 * gflops.len() as i64,
            interval_s: 600,
            sample_count: 0,
            derived,
            gaps: Vec::new(),
            series: Default::default(),
            totals: Default::default(),
            commands: Vec::new(),
        }
    }

    #[test]
    fn hanging_window() {
        let tl = timeline(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let f = detect_hanging(&tl, &DetectorParams::default());
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].window, (1200, 4200));
        assert_eq!(f[0].evidence["intervals"], 5.0);
        assert!(detect_hanging(&timeline(&[1.0; 6]), &DetectorParams::default()).is_empty());
        assert!(
            detect_hanging(&timeline(&[1.0, 0.0, 0.0, 1.0]), &DetectorParams::default()).is_empty()
        );
    }

    #[test]
    fn one_busy_socket_clears_hanging() {
        let mut tl = timeline(&[0.0; 5]);
        for d in tl.derived.iter_mut().filter(|d| d.socket == 1) {
            d.gflops = 5.0;
            d.ipc = Some(1.0);
        }
        assert!(detect_hanging(&tl, &DetectorParams::default()).is_empty());
    }

    fn with_series(mut tl: JobTimeline, metric: &str, values: &[f64]) -> JobTimeline {
        let pts = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Point {
                ts: 600 * (i as i64 + 1),
                value: v,
                dt: 600.0,
            })
            .collect();
        tl.series
            .entry(metric.into())
            .or_default()
            .insert("n1".into(), pts);
        tl
    }

    #[test]
    fn low_cores_boundary() {
        let cat = MachineCatalog::builtin();
        let p = DetectorParams::default();
        assert_eq!(
            detect_low_cores(
                &with_series(timeline(&[1.0]), "distinct_busy_cores", &[16.0]),
                &cat,
                &p
            )
            .len(),
            1
        );
        assert!(detect_low_cores(
            &with_series(timeline(&[1.0]), "distinct_busy_cores", &[20.0]),
            &cat,
            &p
        )
        .is_empty());
        assert!(detect_low_cores(
            &with_series(timeline(&[1.0]), "distinct_busy_cores", &[40.0]),
            &cat,
            &p
        )
        .is_empty());
    }

    #[test]
    fn mem_unused_only_on_large_memory_nodes() {
        let cat = MachineCatalog::builtin();
        let p = DetectorParams::default();
        let mut big = with_series(timeline(&[1.0]), "rss_gib", &[10.0]);
        big.node_types.insert("n1".into(), "bigmem".into());
        assert_eq!(detect_mem_unused(&big, &cat, &p).len(), 1);
        let mut full = with_series(timeline(&[1.0]), "rss_gib", &[100.0]);
        full.node_types.insert("n1".into(), "bigmem".into());
        assert!(detect_mem_unused(&full, &cat, &p).is_empty());
        assert!(
            detect_mem_unused(&with_series(timeline(&[1.0]), "rss_gib", &[10.0]), &cat, &p)
                .is_empty()
        );
    }

    #[test]
    fn gpu_unused_cases() {
        let cat = MachineCatalog::builtin();
        let p = DetectorParams::default();
        let mut idle = with_series(timeline(&[1.0]), "gpu_util_pct", &[0.0, 0.0]);
        idle.node_types.insert("n1".into(), "gpu".into());
        let f = detect_gpu_unused(&idle, &cat, &p);
        assert_eq!(f.len(), 1);
        for k in [
            "gpu_util_floor",
            "gpu_mem_floor_mib",
            "max_util_pct",
            "max_mem_used_mib",
        ] {
            assert!(f[0].evidence.contains_key(k));
        }
        let mut used = with_series(timeline(&[1.0]), "gpu_util_pct", &[0.0, 95.0]);
        used.node_types.insert("n1".into(), "gpu".into());
        assert!(detect_gpu_unused(&used, &cat, &p).is_empty());
        let cpu = with_series(timeline(&[1.0]), "gpu_util_pct", &[0.0]);
        assert!(detect_gpu_unused(&cpu, &cat, &p).is_empty());
    }
}
