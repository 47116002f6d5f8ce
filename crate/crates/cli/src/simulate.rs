use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use hpcmon_core::model::MachineCatalog;
use hpcmon_core::sim::{volume_stats, Fleet, FleetOptions, SimLine, VolumeStats, DEFAULT_START};
use hpcmon_store::{IngestStats, Origin, Store};
use serde::Serialize;

use crate::usage;

pub const MIB: f64 = 1_048_576.0;
pub const GIB: f64 = 1_073_741_824.0;

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 20)]
    pub nodes: usize,
    /// Simulated span.
    #[arg(long, default_value_t = 24.0)]
    pub hours: f64,
    /// Number of cycles; overrides --hours.
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Sampling interval in seconds.
    #[arg(long, default_value_t = 600)]
    pub interval: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "gpu")]
    pub node_type: String,
    #[arg(long, default_value = "sim")]
    pub cluster: String,
    /// First deadline, epoch seconds; a multiple of the interval.
    #[arg(long, default_value_t = DEFAULT_START)]
    pub start: i64,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Store to fill; only volume figures are reported when absent.
    #[arg(long, env = "HPCMON_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub nodes: usize,
    pub cycles: usize,
    pub jobs: usize,
    pub volume: VolumeStats,
    pub stored: Option<u64>,
    pub elapsed_s: f64,
}

impl SimulateArgs {
    pub fn fleet_options(&self) -> anyhow::Result<FleetOptions> {
        if self.nodes == 0 {
            return Err(usage("--nodes must be at least 1"));
        }
        if self.interval == 0 {
            return Err(usage("--interval must be positive"));
        }
        let hours = match self.cycles {
            Some(0) => return Err(usage("--cycles must be at least 1")),
            Some(c) => c as f64 * self.interval as f64 / 3600.0,
            None => self.hours,
        };
        if hours.is_nan() || hours <= 0.0 {
            return Err(usage("--hours must be positive"));
        }
        Ok(FleetOptions {
            cluster: self.cluster.clone(),
            node_type: self.node_type.clone(),
            nodes: self.nodes,
            hours,
            interval_s: self.interval,
            seed: self.seed,
            start: self.start,
        })
    }
}

/// Ingests in the merged (ts, node) order with the cycle time as ingest time,
/// so the same lines always produce the same store bytes.
pub fn ingest_sorted(store: &mut Store, lines: &[SimLine]) -> anyhow::Result<IngestStats> {
    for l in lines {
        store.ingest_line_at(&l.line, Origin::File, l.ts)?;
    }
    store.flush()?;
    Ok(store.stats())
}

pub fn simulate(args: &SimulateArgs) -> anyhow::Result<SimulationSummary> {
    let opts = args.fleet_options()?;
    let fleet = Fleet::generate(&opts, &MachineCatalog::builtin())?;
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let started = Instant::now();
    let lines = fleet.run(threads)?;
    let volume = volume_stats(&lines);
    let stored = match &args.data_dir {
        Some(dir) => {
            let mut store =
                Store::open(dir).with_context(|| format!("opening store {}", dir.display()))?;
            if !store.is_empty() {
                return Err(usage(format!(
                    "{} already holds {} records",
                    dir.display(),
                    store.len()
                )));
            }
            let stats = ingest_sorted(&mut store, &lines)?;
            store.close()?;
            Some(stats.stored)
        }
        None => None,
    };
    Ok(SimulationSummary {
        nodes: fleet.nodes.len(),
        cycles: fleet.cycles,
        jobs: fleet.jobs.len(),
        volume,
        stored,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

pub fn run(args: SimulateArgs) -> anyhow::Result<()> {
    let s = simulate(&args)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(());
    }
    let v = &s.volume;
    println!("nodes {}  cycles {}  jobs {}", s.nodes, s.cycles, s.jobs);
    println!("lines {}  bytes {}", v.lines, v.total_bytes);
    println!(
        "per node and cycle: max {} B, avg {:.1} B",
        v.max_node_cycle_bytes, v.avg_node_cycle_bytes
    );
    println!("per cycle: {:.2} MiB", v.avg_cycle_bytes / MIB);
    if let Some(n) = s.stored {
        println!("stored {n} records");
    }
    println!("elapsed {:.2} s", s.elapsed_s);
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct VolumeArgs {
    #[arg(long)]
    pub nodes: u64,
    /// Payload per node per sample: bytes, or with a KiB/MiB suffix.
    #[arg(long, value_parser = parse_size)]
    pub bytes_per_node: u64,
    /// Sampling interval in seconds.
    #[arg(long, default_value_t = 600)]
    pub interval: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeProjection {
    pub bytes_per_sample: u64,
    pub samples_per_day: f64,
    pub bytes_per_day: f64,
    pub mib_per_sample: f64,
    pub gib_per_day: f64,
}

pub fn project_volume(nodes: u64, bytes_per_node: u64, interval_s: u64) -> VolumeProjection {
    let per_sample = nodes * bytes_per_node;
    let samples_per_day = 86_400.0 / interval_s as f64;
    let per_day = per_sample as f64 * samples_per_day;
    VolumeProjection {
        bytes_per_sample: per_sample,
        samples_per_day,
        bytes_per_day: per_day,
        mib_per_sample: per_sample as f64 / MIB,
        gib_per_day: per_day / GIB,
    }
}

pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("not a size: {s:?}"))?;
    let mult = match unit.trim() {
        "" | "B" => 1,
        "K" | "KiB" => 1 << 10,
        "M" | "MiB" => 1 << 20,
        other => return Err(format!("unknown unit {other:?}")),
    };
    n.checked_mul(mult)
        .ok_or_else(|| format!("size {s:?} overflows"))
}

pub fn run_volume(args: VolumeArgs) -> anyhow::Result<()> {
    if args.interval == 0 {
        return Err(usage("--interval must be positive"));
    }
    let p = project_volume(args.nodes, args.bytes_per_node, args.interval);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&p)?);
    } else {
        println!(
            "per sample: {} B = {:.2} MiB",
            p.bytes_per_sample, p.mib_per_sample
        );
        println!(
            "per day ({} samples): {:.2} GiB",
            p.samples_per_day, p.gib_per_day
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("3072"), Ok(3072));
        assert_eq!(parse_size("3KiB"), Ok(3072));
        assert_eq!(parse_size("2M"), Ok(2 << 20));
        assert!(parse_size("3 parsecs").is_err());
        assert!(parse_size("").is_err());
    }

    #[test]
    fn projection() {
        let p = project_volume(4190, 3072, 600);
        assert_eq!(p.bytes_per_sample, 12_871_680);
        assert_eq!(p.samples_per_day, 144.0);
        assert!((p.mib_per_sample - 12.275).abs() < 1e-3);
        assert!((p.gib_per_day - 1.7262).abs() < 1e-3);
        assert_eq!(project_volume(0, 3072, 600).bytes_per_day, 0.0);
    }
}
