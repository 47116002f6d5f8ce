//! Per-interval series of one job.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::derive::{flop_count, memory_bytes, CounterId, CounterReading, DeltaTracker};
use super::AnalyticsError;
use crate::model::{JobDetails, MachineCatalog, MachineSpec, MetricSample, Source};

/// Derived values of one socket over one interval `[t0, ts)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub node: String,
    pub socket: u32,
    pub t0: i64,
    pub ts: i64,
    pub dt: f64,
    pub gflops: f64,
    pub bw_gbs: f64,
    pub intensity: Option<f64>,
    pub ipc: Option<f64>,
    pub flops: f64,
    pub bytes: f64,
    pub instructions: u64,
    pub cycles: u64,
    /// Some floating-point events were not counted.
    pub degraded: bool,
}

/// An interval without a derived value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub node: String,
    pub socket: Option<u32>,
    pub source: Source,
    pub t0: i64,
    pub t1: i64,
}

/// One value of a series. `dt` is the interval the value stands for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub ts: i64,
    pub value: f64,
    pub dt: f64,
}

/// Metric name -> series id (`node/s0`, `node/gpu1`, `node`) -> points.
pub type SeriesSet = BTreeMap<String, BTreeMap<String, Vec<Point>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTimeline {
    pub job_id: String,
    pub cluster: String,
    pub details: Option<JobDetails>,
    pub nodes: Vec<String>,
    pub node_types: BTreeMap<String, String>,
    pub first_ts: i64,
    pub last_ts: i64,
    pub interval_s: i64,
    pub sample_count: usize,
    pub derived: Vec<DerivedMetrics>,
    pub gaps: Vec<Gap>,
    pub series: SeriesSet,
    /// Job totals of counter sources: io_bytes_read, io_bytes_written,
    /// net_xmit_bytes, net_rcv_bytes.
    pub totals: BTreeMap<String, f64>,
    /// Distinct command names seen by the software sampler.
    pub commands: Vec<String>,
}

/// Display unit of a series.
pub fn metric_unit(metric: &str) -> &'static str {
    match metric {
        "gflops" => "GFLOP/s",
        "bw_gbs" => "GB/s",
        "intensity" => "FLOP/Byte",
        "ipc" => "instr/cycle",
        "gpu_util_pct" | "numa_imbalance_pct" => "%",
        "gpu_mem_used_mib" => "MiB",
        "io_read_mbs" | "io_write_mbs" | "net_xmit_mbs" | "net_rcv_mbs" => "MB/s",
        "io_ops_per_s" => "1/s",
        "rss_gib" => "GiB",
        _ => "",
    }
}

/// Counter keys of rate series: (source, key, metric, scale to unit).
const RATE_SERIES: &[(Source, &str, &str, f64)] = &[
    (Source::Io, "bytes_read", "io_read_mbs", 1e-6),
    (Source::Io, "bytes_written", "io_write_mbs", 1e-6),
    (Source::Io, "opens", "io_ops_per_s", 1.0),
    (Source::Network, "port_xmit_bytes", "net_xmit_mbs", 1e-6),
    (Source::Network, "port_rcv_bytes", "net_rcv_mbs", 1e-6),
];

const TOTALS: &[(Source, &str, &str)] = &[
    (Source::Io, "bytes_read", "io_bytes_read"),
    (Source::Io, "bytes_written", "io_bytes_written"),
    (Source::Network, "port_xmit_bytes", "net_xmit_bytes"),
    (Source::Network, "port_rcv_bytes", "net_rcv_bytes"),
];

/// Software gauges: (key, metric, scale).
const SOFTWARE_GAUGES: &[(&str, &str, f64)] = &[
    ("task_count", "task_count", 1.0),
    ("thread_count", "thread_count", 1.0),
    ("distinct_busy_cores", "distinct_busy_cores", 1.0),
    ("rss_kib", "rss_gib", 1.0 / 1_048_576.0),
    ("numa_imbalance_pct", "numa_imbalance_pct", 1.0),
];

type SeriesKey = (String, Source, Option<u32>);

fn push(series: &mut SeriesSet, metric: &str, id: String, point: Point) {
    series
        .entry(metric.to_string())
        .or_default()
        .entry(id)
        .or_default()
        .push(point);
}

/// Valid counter deltas of consecutive samples, keyed by (t0, t1).
type PairDeltas = BTreeMap<(i64, i64), BTreeMap<String, u64>>;

fn pair_deltas(
    key: &SeriesKey,
    samples: &[&MetricSample],
    counters: impl Fn(&str) -> bool,
    tracker: &mut DeltaTracker,
    gaps: &mut Vec<Gap>,
) -> Result<PairDeltas, AnalyticsError> {
    let mut out = PairDeltas::new();
    for pair in samples.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let mut deltas = BTreeMap::new();
        let mut valid = true;
        for (name, vb) in &b.values {
            if !counters(name) {
                continue;
            }
            let (Some(va), Some(vb)) = (a.values.get(name).and_then(|v| v.as_u64()), vb.as_u64())
            else {
                continue;
            };
            let id = CounterId {
                node: key.0.clone(),
                source: key.1,
                socket: key.2,
                counter: name.clone(),
            };
            let prev = CounterReading {
                id: id.clone(),
                ts: a.timestamp,
                value: va,
            };
            let curr = CounterReading {
                id,
                ts: b.timestamp,
                value: vb,
            };
            match tracker.delta(&prev, &curr)? {
                Some(d) => {
                    deltas.insert(name.clone(), d);
                }
                None => valid = false,
            }
        }
        if valid {
            out.insert((a.timestamp, b.timestamp), deltas);
        } else {
            gaps.push(Gap {
                node: key.0.clone(),
                socket: key.2,
                source: key.1,
                t0: a.timestamp,
                t1: b.timestamp,
            });
        }
    }
    Ok(out)
}

/// Interval of a job: the agent's `interval_s` fact, else the smallest gap
/// between sample times, else 600 s.
pub fn infer_interval<'a>(samples: impl IntoIterator<Item = &'a MetricSample>) -> i64 {
    let mut fact: Option<i64> = None;
    let mut times = BTreeSet::new();
    for s in samples {
        if s.source == Source::Software {
            if let Some(iv) = s.get_u64("interval_s") {
                fact = Some(fact.map_or(iv as i64, |f: i64| f.min(iv as i64)));
            }
        }
        times.insert(s.timestamp);
    }
    fact.filter(|&f| f > 0)
        .or_else(|| {
            times
                .iter()
                .zip(times.iter().skip(1))
                .map(|(a, b)| b - a)
                .min()
        })
        .unwrap_or(600)
}

/// Builds the derived and raw series of `job_id` from its samples. Samples
/// of other jobs are ignored.
pub fn job_timeline(
    job_id: &str,
    samples: &[MetricSample],
    catalog: &MachineCatalog,
) -> Result<JobTimeline, AnalyticsError> {
    let mine: Vec<&MetricSample> = samples
        .iter()
        .filter(|s| s.job_id() == Some(job_id))
        .collect();
    let Some(first) = mine.first() else {
        return Err(AnalyticsError::NotFound(job_id.to_string()));
    };
    let cluster = first.cluster.clone();
    let details = mine
        .iter()
        .find_map(|s| s.job.as_ref().and_then(|j| j.details.clone()));

    let mut groups: BTreeMap<SeriesKey, Vec<&MetricSample>> = BTreeMap::new();
    for s in &mine {
        groups
            .entry((s.node.clone(), s.source, s.socket))
            .or_default()
            .push(s);
    }
    for list in groups.values_mut() {
        list.sort_by_key(|s| s.timestamp);
        list.dedup_by_key(|s| s.timestamp);
    }

    let nodes: Vec<String> = mine
        .iter()
        .map(|s| s.node.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut node_types = BTreeMap::new();
    for s in &mine {
        if let Some(t) = s.get_text("node_type") {
            node_types
                .entry(s.node.clone())
                .or_insert_with(|| t.to_string());
        }
    }
    for n in &nodes {
        node_types
            .entry(n.clone())
            .or_insert_with(|| catalog.default_node_type.clone());
    }
    let spec_of =
        |node: &str| -> &MachineSpec { catalog.resolve(node_types.get(node).map(String::as_str)) };
    let interval_s = infer_interval(mine.iter().copied());

    let mut tracker = DeltaTracker::new();
    let mut gaps = Vec::new();
    let mut derived = Vec::new();
    let mut series = SeriesSet::new();
    let mut totals: BTreeMap<String, f64> = TOTALS
        .iter()
        .map(|(_, _, t)| (t.to_string(), 0.0))
        .collect();

    // Core and uncore pairs per (node, socket).
    let sockets: BTreeSet<(String, u32)> = groups
        .keys()
        .filter(|(_, src, _)| matches!(src, Source::CpuCore | Source::CpuUncore))
        .filter_map(|(n, _, skt)| skt.map(|s| (n.clone(), s)))
        .collect();
    for (node, socket) in sockets {
        let spec = spec_of(&node);
        let core_key = (node.clone(), Source::CpuCore, Some(socket));
        let unc_key = (node.clone(), Source::CpuUncore, Some(socket));
        let empty = Vec::new();
        let weights = &spec.flop_weights;
        let core = pair_deltas(
            &core_key,
            groups.get(&core_key).unwrap_or(&empty),
            |k| k == "cycles" || k == "instructions" || weights.contains_key(k),
            &mut tracker,
            &mut gaps,
        )?;
        let unc = pair_deltas(
            &unc_key,
            groups.get(&unc_key).unwrap_or(&empty),
            |k| k == "cas_count_rd" || k == "cas_count_wr",
            &mut tracker,
            &mut gaps,
        )?;
        let degraded_at: BTreeSet<i64> = groups
            .get(&core_key)
            .unwrap_or(&empty)
            .iter()
            .filter(|s| s.get_u64("degraded").unwrap_or(0) > 0)
            .map(|s| s.timestamp)
            .collect();
        let intervals: BTreeSet<(i64, i64)> = core.keys().chain(unc.keys()).copied().collect();
        for (t0, t1) in intervals {
            let (Some(c), Some(u)) = (core.get(&(t0, t1)), unc.get(&(t0, t1))) else {
                // One side is missing or was invalid; the other side's gap
                // is recorded already when it was invalid.
                if core.contains_key(&(t0, t1)) != unc.contains_key(&(t0, t1))
                    && !gaps.iter().any(|g| {
                        g.node == node && g.socket == Some(socket) && g.t0 == t0 && g.t1 == t1
                    })
                {
                    gaps.push(Gap {
                        node: node.clone(),
                        socket: Some(socket),
                        source: if core.contains_key(&(t0, t1)) {
                            Source::CpuUncore
                        } else {
                            Source::CpuCore
                        },
                        t0,
                        t1,
                    });
                }
                continue;
            };
            let dt = (t1 - t0) as f64;
            let fp: BTreeMap<String, u64> = c
                .iter()
                .filter(|(k, _)| weights.contains_key(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect();
            let flops = flop_count(&fp, weights)?;
            let bytes = memory_bytes(
                u.get("cas_count_rd").copied().unwrap_or(0),
                u.get("cas_count_wr").copied().unwrap_or(0),
                spec.cacheline_bytes,
            );
            let instructions = c.get("instructions").copied().unwrap_or(0);
            let cycles = c.get("cycles").copied().unwrap_or(0);
            let gflops = flops / dt / 1e9;
            let bw_gbs = bytes / dt / 1e9;
            let m = DerivedMetrics {
                node: node.clone(),
                socket,
                t0,
                ts: t1,
                dt,
                gflops,
                bw_gbs,
                intensity: (bytes > 0.0).then(|| flops / bytes),
                ipc: super::derive::derive_ipc(instructions, cycles),
                flops,
                bytes,
                instructions,
                cycles,
                degraded: degraded_at.contains(&t1),
            };
            let id = format!("{node}/s{socket}");
            push(
                &mut series,
                "gflops",
                id.clone(),
                Point {
                    ts: t1,
                    value: gflops,
                    dt,
                },
            );
            push(
                &mut series,
                "bw_gbs",
                id.clone(),
                Point {
                    ts: t1,
                    value: bw_gbs,
                    dt,
                },
            );
            if let Some(i) = m.intensity {
                push(
                    &mut series,
                    "intensity",
                    id.clone(),
                    Point {
                        ts: t1,
                        value: i,
                        dt,
                    },
                );
            }
            if let Some(i) = m.ipc {
                push(
                    &mut series,
                    "ipc",
                    id,
                    Point {
                        ts: t1,
                        value: i,
                        dt,
                    },
                );
            }
            derived.push(m);
        }
    }

    // Node-level counter sources.
    for source in [Source::Io, Source::Network] {
        for node in &nodes {
            let key = (node.clone(), source, None);
            let Some(list) = groups.get(&key) else {
                continue;
            };
            let deltas = pair_deltas(&key, list, |_| true, &mut tracker, &mut gaps)?;
            for ((t0, t1), d) in deltas {
                let dt = (t1 - t0) as f64;
                for &(src, k, metric, scale) in RATE_SERIES {
                    if src == source {
                        if let Some(v) = d.get(k) {
                            push(
                                &mut series,
                                metric,
                                node.clone(),
                                Point {
                                    ts: t1,
                                    value: *v as f64 / dt * scale,
                                    dt,
                                },
                            );
                        }
                    }
                }
                for &(src, k, total) in TOTALS {
                    if src == source {
                        if let Some(v) = d.get(k) {
                            *totals.get_mut(total).expect("preset") += *v as f64;
                        }
                    }
                }
            }
        }
    }

    // Gauges.
    let gauge_dt = interval_s as f64;
    for node in &nodes {
        if let Some(list) = groups.get(&(node.clone(), Source::Gpu, None)) {
            for s in list {
                for (k, v) in &s.values {
                    let Some(rest) = k.strip_prefix("gpu") else {
                        continue;
                    };
                    let Some((idx, field)) = rest.split_once('_') else {
                        continue;
                    };
                    let metric = match field {
                        "util" => "gpu_util_pct",
                        "mem_used_mib" => "gpu_mem_used_mib",
                        _ => continue,
                    };
                    if let Some(x) = v.as_f64() {
                        push(
                            &mut series,
                            metric,
                            format!("{node}/gpu{idx}"),
                            Point {
                                ts: s.timestamp,
                                value: x,
                                dt: gauge_dt,
                            },
                        );
                    }
                }
            }
        }
        if let Some(list) = groups.get(&(node.clone(), Source::Software, None)) {
            for s in list {
                for &(k, metric, scale) in SOFTWARE_GAUGES {
                    if let Some(x) = s.get_f64(k) {
                        push(
                            &mut series,
                            metric,
                            node.clone(),
                            Point {
                                ts: s.timestamp,
                                value: x * scale,
                                dt: gauge_dt,
                            },
                        );
                    }
                }
            }
        }
    }

    let commands: Vec<String> = mine
        .iter()
        .filter(|s| s.source == Source::Software)
        .filter_map(|s| s.get_text("cmd"))
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    derived.sort_by(|a, b| (&a.node, a.socket, a.ts).cmp(&(&b.node, b.socket, b.ts)));
    gaps.sort_by(|a, b| {
        (&a.node, a.socket, a.source, a.t0).cmp(&(&b.node, b.socket, b.source, b.t0))
    });

    Ok(JobTimeline {
        job_id: job_id.to_string(),
        cluster,
        details,
        first_ts: mine.iter().map(|s| s.timestamp).min().unwrap_or(0),
        last_ts: mine.iter().map(|s| s.timestamp).max().unwrap_or(0),
        interval_s,
        sample_count: mine.len(),
        nodes,
        node_types,
        derived,
        gaps,
        series,
        totals,
        commands,
    })
}

impl JobTimeline {
    /// Most common node type of the job.
    pub fn node_type(&self) -> Option<&str> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in self.node_types.values() {
            *counts.entry(t).or_default() += 1;
        }
        counts.into_iter().max_by_key(|(_, c)| *c).map(|(t, _)| t)
    }

    pub fn spec<'a>(&self, catalog: &'a MachineCatalog) -> &'a MachineSpec {
        catalog.resolve(self.node_type())
    }

    /// Socket intervals without a derived point: (node, socket, t0, t1).
    pub fn derived_gaps(&self) -> Vec<(String, u32, i64, i64)> {
        self.gaps
            .iter()
            .filter_map(|g| Some((g.node.clone(), g.socket?, g.t0, g.t1)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Derived points of one socket in time order.
    pub fn socket_series(&self, node: &str, socket: u32) -> impl Iterator<Item = &DerivedMetrics> {
        let node = node.to_string();
        self.derived
            .iter()
            .filter(move |d| d.node == node && d.socket == socket)
    }
}
