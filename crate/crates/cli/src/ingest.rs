use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::Context;
use hpcmon_store::listen::{
    listen_tcp, listen_udp, tail_file, LineSink, Listener, StoreSink, TailOptions,
};
use hpcmon_store::Store;

use crate::{shutdown_signal, usage};

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Store directory; created when missing.
    #[arg(long, env = "HPCMON_DATA_DIR")]
    pub data_dir: PathBuf,
    /// UDP syslog address, e.g. 0.0.0.0:5140.
    #[arg(long, value_name = "HOST:PORT")]
    pub udp: Option<String>,
    /// Newline-framed TCP address.
    #[arg(long, value_name = "HOST:PORT")]
    pub tcp: Option<String>,
    /// Files to follow across rotation; repeatable.
    #[arg(long, value_name = "PATH")]
    pub tail: Vec<PathBuf>,
    /// Read tailed files from the beginning instead of the end.
    #[arg(long)]
    pub from_start: bool,
    /// Seconds between flushes to disk.
    #[arg(long, default_value_t = 1.0)]
    pub flush_secs: f64,
    /// Segment size limit in MiB.
    #[arg(long)]
    pub segment_mib: Option<u64>,
}

pub fn run(args: IngestArgs) -> anyhow::Result<()> {
    if args.udp.is_none() && args.tcp.is_none() && args.tail.is_empty() {
        return Err(usage("nothing to ingest: give --udp, --tcp or --tail"));
    }
    if args.flush_secs.is_nan() || args.flush_secs <= 0.0 {
        return Err(usage("--flush-secs must be positive"));
    }
    let mut store = Store::open(&args.data_dir)
        .with_context(|| format!("opening store {}", args.data_dir.display()))?;
    if let Some(mib) = args.segment_mib {
        store.set_segment_limit(mib.max(1) << 20);
    }
    let store = Arc::new(RwLock::new(store));
    let sink: Arc<dyn LineSink> = Arc::new(StoreSink(store.clone()));

    let mut listeners: Vec<Listener> = Vec::new();
    let mut out = std::io::stdout();
    if let Some(addr) = &args.udp {
        let l = listen_udp(addr, sink.clone()).with_context(|| format!("binding udp {addr}"))?;
        writeln!(
            out,
            "listening udp {}",
            l.local_addr().expect("bound socket")
        )?;
        listeners.push(l);
    }
    if let Some(addr) = &args.tcp {
        let l = listen_tcp(addr, sink.clone()).with_context(|| format!("binding tcp {addr}"))?;
        writeln!(
            out,
            "listening tcp {}",
            l.local_addr().expect("bound socket")
        )?;
        listeners.push(l);
    }
    for path in &args.tail {
        let opts = TailOptions {
            from_start: args.from_start,
            ..TailOptions::default()
        };
        let l = tail_file(path, sink.clone(), opts)
            .with_context(|| format!("tailing {}", path.display()))?;
        writeln!(out, "tailing {}", path.display())?;
        listeners.push(l);
    }
    out.flush()?;

    let every = Duration::from_secs_f64(args.flush_secs);
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let stop = shutdown_signal();
        tokio::pin!(stop);
        let mut tick = tokio::time::interval(every);
        loop {
            tokio::select! {
                _ = &mut stop => break,
                _ = tick.tick() => {
                    if let Err(e) = store.write().unwrap_or_else(|p| p.into_inner()).flush() {
                        log::warn!("flush: {e}");
                    }
                }
            }
        }
    });
    for l in listeners {
        l.stop();
    }
    let mut st = store.write().unwrap_or_else(|p| p.into_inner());
    st.flush()?;
    let s = st.stats();
    log::info!(
        "received {} lines: {} stored, {} duplicates, {} partial parts, {} skipped, {} parse errors",
        s.lines_received,
        s.stored,
        s.duplicates,
        s.partial_parts,
        s.skipped,
        s.parse_errors
    );
    Ok(())
}
