use std::collections::BTreeSet;

use crate::model::{core_hours, JobDetails, JobIndexEntry, MachineCatalog, MetricSample, Source};

/// Builds a job index entry incrementally from the job's samples.
#[derive(Debug, Clone)]
pub struct JobAccumulator {
    job_id: String,
    cluster: String,
    details: Option<JobDetails>,
    node_type: Option<String>,
    nodes: BTreeSet<String>,
    first_ts: i64,
    last_ts: i64,
    interval_fact: Option<i64>,
    min_gap: Option<i64>,
    times: BTreeSet<i64>,
}

impl JobAccumulator {
    pub fn new(job_id: &str, cluster: &str) -> Self {
        JobAccumulator {
            job_id: job_id.to_string(),
            cluster: cluster.to_string(),
            details: None,
            node_type: None,
            nodes: BTreeSet::new(),
            first_ts: i64::MAX,
            last_ts: i64::MIN,
            interval_fact: None,
            min_gap: None,
            times: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, s: &MetricSample) {
        if self.details.is_none() {
            self.details = s.job.as_ref().and_then(|j| j.details.clone());
        }
        if s.source == Source::Software {
            if let Some(t) = s.get_text("node_type") {
                self.node_type.get_or_insert_with(|| t.to_string());
            }
            if let Some(iv) = s.get_u64("interval_s").filter(|&v| v > 0) {
                let iv = iv as i64;
                self.interval_fact = Some(self.interval_fact.map_or(iv, |f| f.min(iv)));
            }
        }
        if !self.nodes.contains(&s.node) {
            self.nodes.insert(s.node.clone());
        }
        self.first_ts = self.first_ts.min(s.timestamp);
        self.last_ts = self.last_ts.max(s.timestamp);
        if self.interval_fact.is_none() && self.times.insert(s.timestamp) {
            let before = self
                .times
                .range(..s.timestamp)
                .next_back()
                .map(|p| s.timestamp - p);
            let after = self
                .times
                .range(s.timestamp + 1..)
                .next()
                .map(|n| n - s.timestamp);
            for g in before.into_iter().chain(after) {
                self.min_gap = Some(self.min_gap.map_or(g, |m| m.min(g)));
            }
        }
    }

    pub fn job_id(&self) -> &str {
        &self.job_id
    }

    pub fn last_ts(&self) -> i64 {
        self.last_ts
    }

    pub fn details(&self) -> Option<&JobDetails> {
        self.details.as_ref()
    }

    /// Index entry; cores fall back to whole nodes of the job's node type
    /// when no allocation details were seen.
    pub fn entry(&self, catalog: &MachineCatalog) -> JobIndexEntry {
        let interval_s = self.interval_fact.or(self.min_gap).unwrap_or(600);
        let d = self.details.as_ref();
        let node_count = d.map_or(self.nodes.len() as u32, |d| d.num_nodes);
        let cores = d.map_or_else(
            || node_count * catalog.resolve(self.node_type.as_deref()).cores_per_node(),
            |d| d.cores_allocated,
        );
        JobIndexEntry {
            job_id: self.job_id.clone(),
            cluster: self.cluster.clone(),
            user: d.map(|d| d.user_id.clone()),
            partition: d.map(|d| d.partition.clone()),
            node_type: self.node_type.clone(),
            first_ts: self.first_ts,
            last_ts: self.last_ts,
            node_count,
            cores_allocated: cores,
            gpus_allocated: d.map_or(0, |d| d.gpus_allocated),
            interval_s,
            core_hours: core_hours(cores, self.first_ts, self.last_ts, interval_s),
        }
    }
}
