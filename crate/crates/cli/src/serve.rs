use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::Context;
use hpcmon_server::{serve, AppState, AuthTable, ServiceOptions};
use hpcmon_store::Store;

use crate::{shutdown_signal, usage, AnalysisArgs};

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080", value_name = "HOST:PORT")]
    pub listen: String,
    /// Store directory written by `ingest` or `simulate`.
    #[arg(long, env = "HPCMON_DATA_DIR")]
    pub data_dir: PathBuf,
    /// YAML list of users with bearer tokens and roles.
    #[arg(long, env = "HPCMON_AUTH_FILE")]
    pub auth_file: PathBuf,
    /// Concurrent analyses and report renders.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Seconds between checks for newly ingested data; 0 disables.
    #[arg(long, default_value_t = 30)]
    pub refresh_secs: u64,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

pub fn run(args: ServeArgs) -> anyhow::Result<()> {
    if !args.data_dir.is_dir() {
        return Err(usage(format!(
            "data directory {} does not exist",
            args.data_dir.display()
        )));
    }
    if args.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let auth = AuthTable::load(&args.auth_file)
        .with_context(|| format!("loading {}", args.auth_file.display()))?;
    let (catalog, params) = args.analysis.load()?;
    let store = Store::open_read_only(&args.data_dir)
        .with_context(|| format!("opening store {}", args.data_dir.display()))?;
    log::info!(
        "serving {} records from {}",
        store.len(),
        args.data_dir.display()
    );
    let state = AppState::new(
        Arc::new(RwLock::new(store)),
        catalog,
        params,
        auth,
        args.workers,
    );
    let opts = ServiceOptions {
        workers: args.workers,
        refresh_every: (args.refresh_secs > 0).then(|| Duration::from_secs(args.refresh_secs)),
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.listen)
            .await
            .with_context(|| format!("binding {}", args.listen))?;
        println!("listening on http://{}", listener.local_addr()?);
        serve(listener, state, &opts, shutdown_signal()).await?;
        Ok(())
    })
}
