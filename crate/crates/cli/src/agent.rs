use std::cell::Cell;
use std::path::PathBuf;

use anyhow::Context;
use hpcmon_core::agent::{
    self, next_deadline, Agent, AgentConfig, BatchAdapter, BatchAdapterKind, Clock, EmitTarget,
    MockBatch, SlurmAdapter, SystemClock,
};
use hpcmon_core::model::MachineCatalog;
use hpcmon_core::sampler::adapters::{HostBackend, SystemRunner};
use hpcmon_core::sampler::synthetic::{SyntheticBackend, WorkloadProfile};
use hpcmon_core::sampler::Backend;

use crate::usage;

#[derive(Debug, clap::Args)]
pub struct AgentArgs {
    /// Agent configuration YAML.
    #[arg(long, env = "HPCMON_CONFIG")]
    pub config: Option<PathBuf>,
    /// Node name; the host name when absent.
    #[arg(long)]
    pub node: Option<String>,
    /// Node type, selecting the catalog entry and `machine_types` overrides.
    #[arg(long)]
    pub node_type: Option<String>,
    /// Cluster name when running without a configuration file.
    #[arg(long, default_value = "local")]
    pub cluster: String,
    /// Read counters from this workload profile instead of the host tools.
    #[arg(long, value_name = "PROFILE")]
    pub simulate: Option<PathBuf>,
    /// Run a single cycle and exit.
    #[arg(long)]
    pub once: bool,
    /// Run this many cycles and exit.
    #[arg(long, conflicts_with = "once")]
    pub cycles: Option<usize>,
    /// Pretend the clock reads this epoch second; cycles then run back to
    /// back without sleeping.
    #[arg(long, value_name = "EPOCH")]
    pub now: Option<i64>,
    /// Write lines to stdout whatever the configured emit target.
    #[arg(long)]
    pub stdout: bool,
}

#[derive(Debug, clap::Args)]
pub struct FlagArgs {
    /// Agent configuration naming the suspend flag file.
    #[arg(long, env = "HPCMON_CONFIG")]
    pub config: Option<PathBuf>,
    /// Suspend flag file; overrides the configuration.
    #[arg(long)]
    pub flag: Option<PathBuf>,
}

/// Fast-forwarded clock: sleeping jumps straight to the deadline.
struct VirtualClock(Cell<i64>);

impl Clock for VirtualClock {
    fn now(&self) -> i64 {
        self.0.get()
    }

    fn sleep_until(&self, t: i64) {
        if t > self.0.get() {
            self.0.set(t);
        }
    }
}

fn host_name() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| std::fs::read_to_string("/etc/hostname"))
        .ok()
        .and_then(|s| s.trim().split('.').next().map(str::to_string))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "localhost".into())
}

pub fn load_config(
    path: Option<&PathBuf>,
    node_type: Option<&str>,
    cluster: &str,
) -> anyhow::Result<AgentConfig> {
    let mut config = match path {
        Some(p) => AgentConfig::load(p, node_type)?,
        None => AgentConfig::new(cluster),
    };
    if path.is_none() {
        config.machine_spec_ref = node_type.map(str::to_string);
        config.validate()?;
    }
    Ok(config)
}

pub fn run(args: AgentArgs) -> anyhow::Result<()> {
    let mut config = load_config(
        args.config.as_ref(),
        args.node_type.as_deref(),
        &args.cluster,
    )?;
    if args.stdout {
        config.emit_target = EmitTarget::Stdout;
    }
    let catalog = match &config.catalog_path {
        Some(p) => MachineCatalog::load(p)?,
        None => MachineCatalog::builtin(),
    };
    let spec = match &config.machine_spec_ref {
        Some(t) => catalog
            .get(t)
            .ok_or_else(|| usage(format!("node type {t:?} is not in the machine catalog")))?
            .clone(),
        None => catalog.resolve(None).clone(),
    };
    let node = args.node.clone().unwrap_or_else(host_name);

    let backend: Box<dyn Backend> = match &args.simulate {
        Some(p) => {
            let profile = WorkloadProfile::load(p)?;
            Box::new(SyntheticBackend::new(profile, &node).with_gpus(spec.gpu_count as usize))
        }
        None => Box::new(HostBackend::system(config.interval_s, config.perf_window_s)),
    };
    let batch: Option<Box<dyn BatchAdapter>> = match config.batch_adapter {
        BatchAdapterKind::Slurm => Some(Box::new(SlurmAdapter::new(Box::new(SystemRunner)))),
        BatchAdapterKind::Mock => {
            let path = config.mock_jobs.as_ref().expect("validated");
            Some(Box::new(MockBatch::load(path)?))
        }
        BatchAdapterKind::None => None,
    };
    let emitter = agent::open_emitter(&config.emit_target, &node)
        .with_context(|| format!("opening emit target {:?}", config.emit_target))?;
    let interval = config.interval_s;
    let mut agent = Agent::new(config, spec, &node, backend, batch, emitter)?;
    for (source, why) in agent.disabled_sources() {
        log::warn!("{source} disabled: {why}");
    }

    let cycles = if args.once { Some(1) } else { args.cycles };
    match args.now {
        Some(now) => {
            let clock = VirtualClock(Cell::new(now));
            // An aligned `now` is itself a deadline.
            let mut deadline = if now.rem_euclid(interval as i64) == 0 {
                now
            } else {
                next_deadline(now, interval)
            };
            let mut done = 0;
            while cycles.is_none_or(|c| done < c) {
                clock.sleep_until(deadline);
                let out = agent.run_cycle(deadline);
                log::debug!(
                    "cycle {deadline}: {:?}, {} lines",
                    out.state,
                    out.lines.len()
                );
                deadline = agent.finish_cycle(deadline, clock.now());
                done += 1;
            }
        }
        None => {
            agent.run_loop(&SystemClock, cycles);
        }
    }
    if agent.pending_lines() > 0 {
        log::warn!("{} lines could not be delivered", agent.pending_lines());
    }
    Ok(())
}

pub fn set_suspended(args: FlagArgs, suspended: bool) -> anyhow::Result<()> {
    let flag = match args.flag {
        Some(f) => f,
        None => load_config(args.config.as_ref(), None, "local")?.suspend_flag_path,
    };
    if suspended {
        agent::suspend(&flag).with_context(|| format!("creating {}", flag.display()))?;
    } else {
        agent::resume(&flag).with_context(|| format!("removing {}", flag.display()))?;
    }
    Ok(())
}
