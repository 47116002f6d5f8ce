//! The `hpcmon` command: one binary for the node agent, the ingest
//! listeners, the query service, desk-scale simulation and report rendering.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod agent;
pub mod ingest;
pub mod report;
pub mod serve;
pub mod simulate;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use hpcmon_core::analytics::DetectorParams;
use hpcmon_core::model::MachineCatalog;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Bad flags, missing or malformed configuration.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<hpcmon_server::auth::AuthError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<hpcmon_core::Error>() {
            if matches!(
                e,
                hpcmon_core::Error::Config(_) | hpcmon_core::Error::Yaml(_)
            ) {
                return EXIT_USAGE;
            }
        }
    }
    EXIT_RUNTIME
}

#[derive(Debug, Parser)]
#[command(
    name = "hpcmon",
    version,
    about = "Job-level performance monitoring for HPC clusters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the node agent.
    Agent(agent::AgentArgs),
    /// Receive log lines over UDP, TCP or by tailing files into a data directory.
    Ingest(ingest::IngestArgs),
    /// Serve the HTTP+JSON API and report downloads.
    Serve(serve::ServeArgs),
    /// Simulate a fleet of nodes and optionally ingest its output.
    Simulate(simulate::SimulateArgs),
    /// Render one job's report to a file.
    Report(report::ReportArgs),
    /// Project data volume per sample and per day.
    Volume(simulate::VolumeArgs),
    /// Stop metric collection on this node until `resume`.
    Suspend(agent::FlagArgs),
    /// Resume metric collection on this node.
    Resume(agent::FlagArgs),
}

/// Machine catalog and detector thresholds shared by analysis commands.
#[derive(Debug, Clone, clap::Args)]
pub struct AnalysisArgs {
    /// Machine catalog YAML; the built-in catalog when absent.
    #[arg(long, env = "HPCMON_CATALOG")]
    pub catalog: Option<PathBuf>,
    /// Detector threshold YAML; documented defaults when absent.
    #[arg(long, env = "HPCMON_DETECTORS")]
    pub detectors: Option<PathBuf>,
}

impl AnalysisArgs {
    pub fn load(&self) -> anyhow::Result<(MachineCatalog, DetectorParams)> {
        let catalog = match &self.catalog {
            Some(p) => MachineCatalog::load(p)?,
            None => MachineCatalog::builtin(),
        };
        let params = match &self.detectors {
            Some(p) => DetectorParams::load(p)?,
            None => DetectorParams::default(),
        };
        Ok((catalog, params))
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Agent(a) => agent::run(a),
        Command::Ingest(a) => ingest::run(a),
        Command::Serve(a) => serve::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::Report(a) => report::run(a),
        Command::Volume(a) => simulate::run_volume(a),
        Command::Suspend(a) => agent::set_suspended(a, true),
        Command::Resume(a) => agent::set_suspended(a, false),
    }
}

/// Resolves on SIGINT or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
