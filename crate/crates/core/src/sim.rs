//! Desk-scale fleet simulation: virtual nodes running real agents against
//! synthetic counters and a mock batch system, on a fast-forwarded clock.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::batch::{MockBatch, MockJob};
use crate::agent::emit::MemoryEmitter;
use crate::agent::{Agent, AgentConfig};
use crate::model::{MachineCatalog, MachineSpec, Source};
use crate::sampler::synthetic::{Phase, SyntheticBackend, WorkloadProfile};
use crate::Error;

/// 2024-01-01T00:00:00Z, a multiple of every common interval.
pub const DEFAULT_START: i64 = 1_704_067_200;
/// Counters start this long before the simulated window, like a node
/// that has been up for a month.
pub const BOOT_LEAD_S: i64 = 30 * 86_400;

/// Never exists, so simulated agents are never suspended by a real flag.
const NO_SUSPEND_FLAG: &str = "/dev/null/hpcmon-sim-suspend";

#[derive(Debug, Clone, PartialEq)]
pub struct SimJob {
    pub job_id: String,
    pub user: String,
    pub partition: String,
    pub profile: String,
    pub nodes: Vec<String>,
    pub start: i64,
    /// Exclusive.
    pub end: i64,
    pub gpus_per_node: u32,
}

/// One emitted line.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimLine {
    pub ts: i64,
    pub node: String,
    pub line: String,
}

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub cluster: String,
    pub node_type: String,
    pub nodes: usize,
    pub hours: f64,
    pub interval_s: u64,
    pub seed: u64,
    pub start: i64,
}

impl Default for FleetOptions {
    fn default() -> Self {
        FleetOptions {
            cluster: "sim".into(),
            node_type: "gpu".into(),
            nodes: 20,
            hours: 24.0,
            interval_s: 600,
            seed: 1,
            start: DEFAULT_START,
        }
    }
}

/// A fully planned simulation.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub cluster: String,
    pub spec: MachineSpec,
    pub nodes: Vec<String>,
    pub interval_s: u64,
    /// First deadline.
    pub start: i64,
    pub cycles: usize,
    pub profiles: BTreeMap<String, Arc<WorkloadProfile>>,
    pub idle_profile: String,
    pub jobs: Vec<SimJob>,
}

fn per_socket_cycles(spec: &MachineSpec) -> f64 {
    spec.cores_per_socket as f64 * 2.4e9
}

fn base_phase(spec: &MachineSpec) -> Phase {
    let gpus = spec.gpu_count as usize;
    Phase {
        duration_s: 3600,
        instructions_per_s: 1.5 * per_socket_cycles(spec),
        cycles_per_s: per_socket_cycles(spec),
        mem_bytes_per_s: 30e9,
        mem_read_fraction: Some(0.7),
        link_bytes_per_s: 4e9,
        gpu_util_pct: vec![85; gpus],
        gpu_mem_used_mib: vec![12_000; gpus],
        net_xmit_bytes_per_s: 200e6,
        net_rcv_bytes_per_s: 200e6,
        io_read_bytes_per_s: 20e6,
        io_write_bytes_per_s: 5e6,
        io_opens_per_s: 2.0,
        rss_kib: 120 * 1024 * 1024,
        task_count: spec.cores_per_node() as u64,
        thread_count: None,
        busy_cores: spec.cores_per_node() as u64,
        numa_imbalance_pct: 3.0,
        ..Phase::default()
    }
}

fn fp(event: &str, events_per_s: f64) -> BTreeMap<String, f64> {
    BTreeMap::from([(event.to_string(), events_per_s)])
}

fn profile(name: &str, seed: u64, command: &str, phases: Vec<Phase>) -> WorkloadProfile {
    WorkloadProfile {
        name: name.into(),
        seed,
        start: 0,
        repeat: false,
        node_jitter: 0.05,
        resets: Vec::new(),
        command: Some(command.into()),
        gpu_mem_total_mib: 16_384,
        packet_bytes: 4096.0,
        io_request_bytes: 1_048_576.0,
        phases,
    }
}

/// The workload mix of the default fleet. Every profile except `idle` is
/// used by jobs.
pub fn builtin_profiles(spec: &MachineSpec, seed: u64) -> BTreeMap<String, Arc<WorkloadProfile>> {
    let base = base_phase(spec);
    let cyc = per_socket_cycles(spec);
    let gpus = spec.gpu_count as usize;
    let setup = Phase {
        duration_s: 1200,
        fp_events_per_s: fp("fp_scalar_double", 0.5e9),
        instructions_per_s: 0.8 * cyc,
        mem_bytes_per_s: 5e9,
        io_read_bytes_per_s: 800e6,
        io_opens_per_s: 40.0,
        gpu_util_pct: vec![5; gpus],
        ..base.clone()
    };
    let mut out = BTreeMap::new();
    let mut add = |p: WorkloadProfile| {
        out.insert(p.name.clone(), Arc::new(p));
    };
    add(profile(
        "compute",
        seed ^ 1,
        "xhpl",
        vec![
            setup.clone(),
            Phase {
                fp_events_per_s: fp("fp_512_packed_double", 50e9),
                instructions_per_s: 2.0 * cyc,
                mem_bytes_per_s: 20e9,
                ..base.clone()
            },
        ],
    ));
    add(profile(
        "stream",
        seed ^ 2,
        "stream_triad",
        vec![Phase {
            fp_events_per_s: fp("fp_256_packed_double", 2e9),
            instructions_per_s: 0.6 * cyc,
            mem_bytes_per_s: 110e9,
            ..base.clone()
        }],
    ));
    add(profile(
        "mixed",
        seed ^ 3,
        "lmp",
        vec![
            setup.clone(),
            Phase {
                fp_events_per_s: BTreeMap::from([
                    ("fp_256_packed_double".to_string(), 10e9),
                    ("fp_scalar_double".to_string(), 20e9),
                ]),
                mem_bytes_per_s: 40e9,
                ..base.clone()
            },
        ],
    ));
    add(profile(
        "hang",
        seed ^ 4,
        "solver",
        vec![
            Phase {
                duration_s: 1800,
                fp_events_per_s: fp("fp_256_packed_double", 8e9),
                mem_bytes_per_s: 40e9,
                ..base.clone()
            },
            Phase {
                instructions_per_s: 0.004 * cyc,
                mem_bytes_per_s: 0.05e9,
                gpu_util_pct: vec![0; gpus],
                net_xmit_bytes_per_s: 1e3,
                net_rcv_bytes_per_s: 1e3,
                io_read_bytes_per_s: 0.0,
                io_write_bytes_per_s: 0.0,
                io_opens_per_s: 0.0,
                ..base.clone()
            },
        ],
    ));
    add(profile(
        "cpu_only",
        seed ^ 5,
        "cp2k.psmp",
        vec![Phase {
            fp_events_per_s: fp("fp_256_packed_double", 15e9),
            mem_bytes_per_s: 50e9,
            gpu_util_pct: vec![0; gpus],
            gpu_mem_used_mib: vec![0; gpus],
            ..base.clone()
        }],
    ));
    add(profile(
        "few_cores",
        seed ^ 6,
        "python3",
        vec![Phase {
            fp_events_per_s: fp("fp_scalar_double", 4e9),
            instructions_per_s: 0.3 * cyc,
            cycles_per_s: 0.3 * cyc,
            mem_bytes_per_s: 6e9,
            task_count: 6,
            busy_cores: 6,
            ..base.clone()
        }],
    ));
    add(profile(
        "small_mem",
        seed ^ 7,
        "gmx_mpi",
        vec![Phase {
            fp_events_per_s: fp("fp_256_packed_single", 30e9),
            mem_bytes_per_s: 25e9,
            rss_kib: 12 * 1024 * 1024,
            ..base.clone()
        }],
    ));
    add(profile(
        "idle",
        seed ^ 8,
        "idle",
        vec![Phase {
            // OS housekeeping touches every FP unit now and then.
            fp_events_per_s: crate::model::default_flop_weights()
                .into_keys()
                .map(|e| (e, 2e5))
                .collect(),
            instructions_per_s: 0.002 * cyc,
            cycles_per_s: 0.01 * cyc,
            mem_bytes_per_s: 0.02e9,
            link_bytes_per_s: 1e6,
            gpu_util_pct: vec![0; gpus],
            gpu_mem_used_mib: vec![0; gpus],
            net_xmit_bytes_per_s: 2e3,
            net_rcv_bytes_per_s: 2e3,
            io_read_bytes_per_s: 1e3,
            io_write_bytes_per_s: 1e3,
            io_opens_per_s: 0.1,
            rss_kib: 2 * 1024 * 1024,
            task_count: 0,
            busy_cores: 0,
            numa_imbalance_pct: 0.0,
            ..base
        }],
    ));
    out
}

const JOB_MIX: &[(&str, u32)] = &[
    ("compute", 4),
    ("stream", 3),
    ("mixed", 4),
    ("hang", 1),
    ("cpu_only", 1),
    ("few_cores", 1),
    ("small_mem", 1),
];

const USERS: &[&str] = &["u01", "u02", "u03", "u04", "u05", "u06", "u07", "u08"];

impl Fleet {
    /// Plans a fleet: nodes are grouped into allocations of 1 to 4 nodes,
    /// and each group runs a sequence of jobs with short idle gaps.
    pub fn generate(opts: &FleetOptions, catalog: &MachineCatalog) -> Result<Fleet, Error> {
        if opts.nodes == 0 {
            return Err(Error::Config("a fleet needs at least one node".into()));
        }
        if opts.hours.is_nan() || opts.hours <= 0.0 || opts.interval_s == 0 {
            return Err(Error::Config("hours and interval must be positive".into()));
        }
        let spec = catalog
            .get(&opts.node_type)
            .ok_or_else(|| Error::Config(format!("unknown node type {:?}", opts.node_type)))?
            .clone();
        let iv = opts.interval_s as i64;
        if opts.start.rem_euclid(iv) != 0 {
            return Err(Error::Config(format!(
                "start {} is not a multiple of the interval",
                opts.start
            )));
        }
        let cycles = ((opts.hours * 3600.0) / opts.interval_s as f64).round() as usize;
        if cycles == 0 {
            return Err(Error::Config(
                "the simulated span is shorter than one interval".into(),
            ));
        }
        let nodes: Vec<String> = (1..=opts.nodes).map(|i| format!("n{i:04}")).collect();
        let end = opts.start + cycles as i64 * iv;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let weights: Vec<(&str, u32)> = JOB_MIX.to_vec();

        let mut planned = Vec::new();
        let mut i = 0;
        while i < nodes.len() {
            let size = rng.gen_range(1..=4).min(nodes.len() - i);
            let group = &nodes[i..i + size];
            i += size;
            // Some jobs were already running when the window opened.
            let mut t = opts.start - rng.gen_range(0..4) * iv;
            while t < end {
                let duration = rng.gen_range(3..=36) * iv;
                let (name, _) = *weights
                    .choose_weighted(&mut rng, |(_, w)| *w)
                    .expect("non-empty mix");
                let user = USERS[rng.gen_range(0..USERS.len())];
                let partition = match (spec.gpu_count > 0, duration > 8 * 3600) {
                    (true, false) => "gpu",
                    (true, true) => "gpu-long",
                    (false, false) => "general",
                    (false, true) => "long",
                };
                planned.push(SimJob {
                    job_id: String::new(),
                    user: user.into(),
                    partition: partition.into(),
                    profile: name.into(),
                    nodes: group.to_vec(),
                    start: t,
                    end: t + duration,
                    gpus_per_node: spec.gpu_count,
                });
                // Busy machines: most allocations follow each other directly.
                let gap = if rng.gen_bool(0.9) {
                    0
                } else {
                    rng.gen_range(1..=2)
                };
                t += duration + gap * iv;
            }
        }
        planned.sort_by(|a, b| (a.start, &a.nodes[0]).cmp(&(b.start, &b.nodes[0])));
        for (n, job) in planned.iter_mut().enumerate() {
            job.job_id = format!("{}", 100_001 + n);
        }
        Ok(Fleet {
            cluster: opts.cluster.clone(),
            profiles: builtin_profiles(&spec, opts.seed),
            spec,
            nodes,
            interval_s: opts.interval_s,
            start: opts.start,
            cycles,
            idle_profile: "idle".into(),
            jobs: planned,
        })
    }

    pub fn deadlines(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.cycles as i64).map(move |k| self.start + k * self.interval_s as i64)
    }

    fn profile(&self, name: &str) -> Result<Arc<WorkloadProfile>, Error> {
        self.profiles
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown profile {name:?}")))
    }

    /// Counter source of one node: idle from boot, each job's profile while
    /// it runs, idle again afterwards.
    pub fn backend(&self, node: &str) -> Result<SyntheticBackend, Error> {
        let idle = self.profile(&self.idle_profile)?;
        let mut schedule = vec![(self.start - BOOT_LEAD_S, idle.clone())];
        for job in self
            .jobs
            .iter()
            .filter(|j| j.nodes.iter().any(|n| n == node))
        {
            schedule.push((job.start, self.profile(&job.profile)?));
            schedule.push((job.end, idle.clone()));
        }
        // A job starting exactly when the previous one ends replaces its idle entry.
        schedule.sort_by_key(|(t, p)| (*t, p.name == self.idle_profile));
        schedule.dedup_by_key(|(t, _)| *t);
        Ok(SyntheticBackend::with_schedule(node, schedule).with_gpus(self.spec.gpu_count as usize))
    }

    pub fn mock_jobs(&self) -> Vec<MockJob> {
        let cores = self.spec.cores_per_node();
        self.jobs
            .iter()
            .map(|j| MockJob {
                job_id: j.job_id.clone(),
                user: j.user.clone(),
                partition: j.partition.clone(),
                nodes: j.nodes.iter().map(|n| (n.clone(), cores)).collect(),
                gpus_per_node: j.gpus_per_node,
                start: j.start,
                end: Some(j.end),
            })
            .collect()
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            interval_s: self.interval_s,
            machine_spec_ref: Some(self.spec.node_type.clone()),
            enabled_sources: Source::ALL.into_iter().collect(),
            suspend_flag_path: PathBuf::from(NO_SUSPEND_FLAG),
            ..AgentConfig::new(&self.cluster)
        }
    }

    /// Runs every node's agent over the window on up to `threads` threads.
    /// The merged output is sorted by (ts, node) and keeps each node's
    /// emission order, so it does not depend on scheduling.
    pub fn run(&self, threads: usize) -> Result<Vec<SimLine>, Error> {
        let batch = Arc::new(self.mock_jobs());
        let chunk = self.nodes.len().div_ceil(threads.max(1)).max(1);
        let results: Vec<Result<Vec<SimLine>, Error>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .nodes
                .chunks(chunk)
                .map(|nodes| {
                    let batch = batch.clone();
                    scope.spawn(move || {
                        let mut out = Vec::new();
                        for node in nodes {
                            out.extend(self.run_node(node, &batch)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("simulation thread panicked".into())))
                })
                .collect()
        });
        let mut lines = Vec::new();
        for r in results {
            lines.extend(r?);
        }
        lines.sort_by(|a, b| (a.ts, &a.node).cmp(&(b.ts, &b.node)));
        Ok(lines)
    }

    fn run_node(&self, node: &str, jobs: &[MockJob]) -> Result<Vec<SimLine>, Error> {
        let mine: Vec<MockJob> = jobs
            .iter()
            .filter(|j| j.nodes.contains_key(node))
            .cloned()
            .collect();
        let emitter = MemoryEmitter::new();
        let mut agent = Agent::new(
            self.agent_config(),
            self.spec.clone(),
            node,
            Box::new(self.backend(node)?),
            Some(Box::new(MockBatch::new(self.spec.cores_per_node(), mine))),
            Box::new(emitter.clone()),
        )?;
        let mut out = Vec::new();
        for deadline in self.deadlines() {
            agent.run_cycle(deadline);
            out.extend(emitter.take().into_iter().map(|line| SimLine {
                ts: deadline,
                node: node.to_string(),
                line,
            }));
        }
        Ok(out)
    }
}

/// Encoded payload accounting; every line counts with its newline.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VolumeStats {
    pub nodes: usize,
    pub cycles: usize,
    pub lines: usize,
    pub total_bytes: u64,
    /// Largest payload of one node in one cycle.
    pub max_node_cycle_bytes: u64,
    pub avg_node_cycle_bytes: f64,
    /// Fleet payload per cycle, averaged over cycles.
    pub avg_cycle_bytes: f64,
}

pub fn volume_stats(lines: &[SimLine]) -> VolumeStats {
    let mut per_node_cycle: BTreeMap<(i64, &str), u64> = BTreeMap::new();
    let mut total = 0u64;
    for l in lines {
        let b = l.line.len() as u64 + 1;
        *per_node_cycle.entry((l.ts, l.node.as_str())).or_default() += b;
        total += b;
    }
    let cycles: BTreeSet<i64> = per_node_cycle.keys().map(|k| k.0).collect();
    let nodes: BTreeSet<&str> = per_node_cycle.keys().map(|k| k.1).collect();
    let cells = per_node_cycle.len().max(1) as f64;
    VolumeStats {
        nodes: nodes.len(),
        cycles: cycles.len(),
        lines: lines.len(),
        total_bytes: total,
        max_node_cycle_bytes: per_node_cycle.values().copied().max().unwrap_or(0),
        avg_node_cycle_bytes: total as f64 / cells,
        avg_cycle_bytes: total as f64 / cycles.len().max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logline::decode_logline;

    fn small() -> Fleet {
        let opts = FleetOptions {
            nodes: 3,
            hours: 3.0,
            ..Default::default()
        };
        Fleet::generate(&opts, &MachineCatalog::builtin()).unwrap()
    }

    #[test]
    fn plan_covers_window() {
        let f = small();
        assert_eq!(f.cycles, 18);
        for node in &f.nodes {
            let mut jobs: Vec<&SimJob> = f.jobs.iter().filter(|j| j.nodes.contains(node)).collect();
            jobs.sort_by_key(|j| j.start);
            assert!(
                jobs.windows(2).all(|w| w[0].end <= w[1].start),
                "overlapping jobs on {node}"
            );
        }
        assert!(Fleet::generate(
            &FleetOptions {
                nodes: 0,
                ..Default::default()
            },
            &MachineCatalog::builtin()
        )
        .is_err());
    }

    #[test]
    fn runs_are_deterministic_and_sorted() {
        let f = small();
        let a = f.run(1).unwrap();
        let b = f.run(3).unwrap();
        assert_eq!(a, b);
        assert!(a
            .windows(2)
            .all(|w| (w[0].ts, &w[0].node) <= (w[1].ts, &w[1].node)));
        for l in &a {
            decode_logline(&l.line).unwrap();
        }
        // Every node emits at least a software line per cycle.
        let sw = a
            .iter()
            .filter(|l| l.line.contains(" src=software"))
            .count();
        assert_eq!(sw, 3 * 18);
        let v = volume_stats(&a);
        assert_eq!((v.nodes, v.cycles, v.lines), (3, 18, a.len()));
        assert_eq!(v.avg_cycle_bytes * 18.0, v.total_bytes as f64);
        assert!(v.max_node_cycle_bytes as f64 >= v.avg_node_cycle_bytes);
    }
}
