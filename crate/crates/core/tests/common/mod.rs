#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use hpcmon_core::agent::{Agent, AgentConfig, MemoryEmitter, MockBatch, MockJob};
use hpcmon_core::analytics::{job_timeline, JobAccumulator, JobTimeline};
use hpcmon_core::logline::{decode_line, Reassembler};
use hpcmon_core::model::{JobIndexEntry, MachineCatalog, MetricSample};
use hpcmon_core::sampler::synthetic::{Phase, SyntheticBackend, WorkloadProfile};

pub const IV: i64 = 600;

pub fn catalog() -> MachineCatalog {
    MachineCatalog::builtin()
}

/// Healthy full-node work: 1 GFLOP/s scalar double and 64 GB/s per socket.
pub fn healthy(node_type: &str) -> Phase {
    let spec = catalog().get(node_type).unwrap().clone();
    let gpus = spec.gpu_count as usize;
    Phase {
        fp_events_per_s: BTreeMap::from([("fp_scalar_double".to_string(), 1e9)]),
        instructions_per_s: 4.8e10,
        cycles_per_s: 4.8e10,
        mem_bytes_per_s: 64e9,
        link_bytes_per_s: 1e9,
        gpu_util_pct: vec![80; gpus],
        gpu_mem_used_mib: vec![8000; gpus],
        net_xmit_bytes_per_s: 1e6,
        net_rcv_bytes_per_s: 1e6,
        rss_kib: 100 * 1024 * 1024,
        task_count: spec.cores_per_node() as u64,
        busy_cores: spec.cores_per_node() as u64,
        ..Phase::default()
    }
}

pub fn config(node_type: &str) -> AgentConfig {
    AgentConfig {
        interval_s: IV as u64,
        machine_spec_ref: Some(node_type.into()),
        suspend_flag_path: PathBuf::from("/nonexistent/hpcmon-test/suspend"),
        ..AgentConfig::new("test")
    }
}

/// One job covering the whole node from t=0 onwards.
pub fn whole_node_job(job_id: &str, node: &str, node_type: &str) -> MockJob {
    let spec = catalog().get(node_type).unwrap().clone();
    MockJob {
        job_id: job_id.into(),
        user: "alice".into(),
        partition: "batch".into(),
        nodes: BTreeMap::from([(node.to_string(), spec.cores_per_node())]),
        gpus_per_node: spec.gpu_count,
        start: 0,
        end: None,
    }
}

pub fn agent(
    config: AgentConfig,
    node: &str,
    phase: Phase,
    jobs: Vec<MockJob>,
    emitter: &MemoryEmitter,
) -> Agent {
    let node_type = config.machine_spec_ref.clone().unwrap();
    let spec = catalog().get(&node_type).unwrap().clone();
    let profile = WorkloadProfile::constant("fixture", 0, phase);
    let backend = SyntheticBackend::new(profile, node).with_gpus(spec.gpu_count as usize);
    let batch = MockBatch::new(spec.cores_per_node(), jobs);
    Agent::new(
        config,
        spec,
        node,
        Box::new(backend),
        Some(Box::new(batch)),
        Box::new(emitter.clone()),
    )
    .unwrap()
}

/// Runs a node agent with a synthetic workload for `cycles` deadlines
/// starting at `IV`, returning the emitted lines.
pub fn run_node(
    node: &str,
    node_type: &str,
    phase: Phase,
    jobs: Vec<MockJob>,
    cycles: usize,
) -> Vec<String> {
    let emitter = MemoryEmitter::new();
    let mut a = agent(config(node_type), node, phase, jobs, &emitter);
    for k in 1..=cycles as i64 {
        a.run_cycle(k * IV);
    }
    emitter.lines()
}

pub fn decode_all(lines: &[String]) -> Vec<MetricSample> {
    let mut r = Reassembler::default();
    lines
        .iter()
        .filter_map(|l| r.push(decode_line(l).unwrap()))
        .collect()
}

pub fn analyse(job_id: &str, samples: &[MetricSample]) -> (JobTimeline, JobIndexEntry) {
    let cat = catalog();
    let tl = job_timeline(job_id, samples, &cat).unwrap();
    let mut acc = JobAccumulator::new(job_id, &samples[0].cluster);
    for s in samples.iter().filter(|s| s.job_id() == Some(job_id)) {
        acc.add(s);
    }
    (tl, acc.entry(&cat))
}

/// A single-node job run through agent, codec and analytics.
pub fn job_fixture(node_type: &str, phase: Phase, cycles: usize) -> (JobTimeline, JobIndexEntry) {
    let lines = run_node(
        "n1",
        node_type,
        phase,
        vec![whole_node_job("j1", "n1", node_type)],
        cycles,
    );
    analyse("j1", &decode_all(&lines))
}
