use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::AnalyticsError;
use crate::model::{MachineSpec, Source};

/// Hardware counters are read as 64-bit totals.
pub const COUNTER_WIDTH: u32 = 64;

/// Delta of a cumulative counter between two readings.
///
/// A decrease is taken as a wrap if the corrected delta is below four times
/// the largest delta seen so far for this counter; otherwise it is a reset
/// and the interval is invalid (`None`).
pub fn counter_delta(prev: u64, curr: u64, width: u32, max_seen: Option<u64>) -> Option<u64> {
    if curr >= prev {
        return Some(curr - prev);
    }
    let modulus = 1u128 << width.min(64);
    let corrected = modulus + curr as u128 - prev as u128;
    let limit = 4 * max_seen? as u128;
    (corrected < limit && corrected <= u64::MAX as u128).then_some(corrected as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CounterId {
    pub node: String,
    pub source: Source,
    pub socket: Option<u32>,
    pub counter: String,
}

impl fmt::Display for CounterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.source)?;
        if let Some(s) = self.socket {
            write!(f, "/{s}")?;
        }
        write!(f, "/{}", self.counter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterReading {
    pub id: CounterId,
    pub ts: i64,
    pub value: u64,
}

/// Tracks the largest delta per counter so wraps can be told from resets.
#[derive(Debug, Default, Clone)]
pub struct DeltaTracker {
    max_seen: HashMap<CounterId, u64>,
}

impl DeltaTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn delta(
        &mut self,
        prev: &CounterReading,
        curr: &CounterReading,
    ) -> Result<Option<u64>, AnalyticsError> {
        if prev.id != curr.id {
            return Err(AnalyticsError::CounterMismatch {
                prev: prev.id.to_string(),
                curr: curr.id.to_string(),
            });
        }
        if prev.ts >= curr.ts {
            return Err(AnalyticsError::OutOfOrder {
                prev_ts: prev.ts,
                curr_ts: curr.ts,
            });
        }
        let seen = self.max_seen.get(&curr.id).copied();
        let d = counter_delta(prev.value, curr.value, COUNTER_WIDTH, seen);
        if let Some(d) = d {
            let slot = self.max_seen.entry(curr.id.clone()).or_insert(0);
            *slot = (*slot).max(d);
        }
        Ok(d)
    }
}

/// Total FLOPs of a set of floating-point event deltas.
pub fn flop_count(
    deltas: &BTreeMap<String, u64>,
    weights: &BTreeMap<String, u32>,
) -> Result<f64, AnalyticsError> {
    let mut total = 0.0;
    for (event, &delta) in deltas {
        let w = weights
            .get(event)
            .ok_or_else(|| AnalyticsError::UnknownEvent {
                event: event.clone(),
                known: weights.keys().cloned().collect::<Vec<_>>().join(", "),
            })?;
        total += delta as f64 * *w as f64;
    }
    Ok(total)
}

/// GFLOP/s from event deltas over `dt` seconds.
pub fn derive_flops(
    deltas: &BTreeMap<String, u64>,
    weights: &BTreeMap<String, u32>,
    dt: f64,
) -> Result<f64, AnalyticsError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(AnalyticsError::BadInterval(dt));
    }
    Ok(flop_count(deltas, weights)? / dt / 1e9)
}

pub fn memory_bytes(cas_rd: u64, cas_wr: u64, cacheline_bytes: u32) -> f64 {
    (cas_rd as f64 + cas_wr as f64) * cacheline_bytes as f64
}

/// Memory bandwidth in decimal GB/s from CAS line counts.
pub fn derive_bandwidth(
    cas_rd: u64,
    cas_wr: u64,
    cacheline_bytes: u32,
    dt: f64,
) -> Result<f64, AnalyticsError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(AnalyticsError::BadInterval(dt));
    }
    Ok(memory_bytes(cas_rd, cas_wr, cacheline_bytes) / dt / 1e9)
}

/// FLOP/Byte; absent without memory traffic.
pub fn derive_intensity(gflops: f64, bw_gbs: f64) -> Option<f64> {
    (bw_gbs > 0.0).then(|| gflops / bw_gbs)
}

pub fn derive_ipc(instructions: u64, cycles: u64) -> Option<f64> {
    (cycles > 0).then(|| instructions as f64 / cycles as f64)
}

/// Roofline ceiling at `intensity`.
pub fn attainable_performance(intensity: f64, spec: &MachineSpec) -> f64 {
    spec.peak_gflops.min(intensity * spec.peak_bw_gbs)
}
