use std::path::PathBuf;

use anyhow::{bail, Context};
use hpcmon_core::analytics::{job_summary, job_timeline, DetectorParams};
use hpcmon_core::model::MachineCatalog;
use hpcmon_core::report::{render_job_report, ReportDocument};
use hpcmon_store::Store;

use crate::AnalysisArgs;

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    pub job_id: String,
    #[arg(long, env = "HPCMON_DATA_DIR")]
    pub data_dir: PathBuf,
    /// Output file; `job-<id>.html` when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Generation time printed in the report; now when absent.
    #[arg(long, value_name = "EPOCH")]
    pub timestamp: Option<i64>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

/// Renders `job_id` from `store`; `None` for an unknown job.
pub fn render(
    store: &Store,
    job_id: &str,
    catalog: &MachineCatalog,
    params: &DetectorParams,
    generated_at: i64,
) -> anyhow::Result<Option<ReportDocument>> {
    if !store.has_job(job_id) {
        return Ok(None);
    }
    let samples = store.job_samples(job_id);
    let tl = job_timeline(job_id, &samples, catalog)?;
    let entry = store.job_entry(job_id, catalog);
    let summary = job_summary(&tl, entry.as_ref(), catalog, params);
    Ok(Some(render_job_report(
        &summary,
        &tl,
        tl.spec(catalog),
        generated_at,
    )))
}

pub fn run(args: ReportArgs) -> anyhow::Result<()> {
    let (catalog, params) = args.analysis.load()?;
    let store = Store::open_read_only(&args.data_dir)
        .with_context(|| format!("opening store {}", args.data_dir.display()))?;
    let now = args.timestamp.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    });
    let Some(doc) = render(&store, &args.job_id, &catalog, &params, now)? else {
        bail!("unknown job {}", args.job_id);
    };
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("job-{}.html", args.job_id)));
    std::fs::write(&out, &doc.html).with_context(|| format!("writing {}", out.display()))?;
    if !doc.complete {
        log::warn!("job {} has too little data for a full report", args.job_id);
    }
    println!("{}", out.display());
    Ok(())
}
