//! Self-contained HTML job reports with inline SVG charts.
//!
//! Output is a pure function of its inputs: the same summary, timeline and
//! generation time always produce the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::DateTime;

use crate::analytics::timeline::metric_unit;
use crate::analytics::{
    attainable_performance, band, DetectorFinding, JobSummary, JobTimeline, Point,
};
use crate::model::MachineSpec;

/// Most points drawn per series.
pub const MAX_CHART_POINTS: usize = 2000;

/// Charts in report order: (metric, title).
pub const CHARTS: &[(&str, &str)] = &[
    ("gflops", "Performance"),
    ("bw_gbs", "Memory bandwidth"),
    ("intensity", "Arithmetic intensity"),
    ("ipc", "Instructions per cycle"),
    ("gpu_util_pct", "GPU utilization"),
    ("gpu_mem_used_mib", "GPU memory"),
    ("io_read_mbs", "File system read"),
    ("io_write_mbs", "File system write"),
    ("net_xmit_mbs", "Network transmit"),
    ("net_rcv_mbs", "Network receive"),
    ("rss_gib", "Resident memory"),
    ("task_count", "Tasks"),
];

/// Series with more lines than this are drawn as a min/median/max band.
const MAX_LINES: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportDocument {
    pub job_id: String,
    pub html: String,
    /// False for the not-enough-data document.
    pub complete: bool,
}

/// Min-max decimation: splits the series into buckets and keeps the lowest
/// and highest point of each, in time order. The global extremes survive.
pub fn decimate(points: &[Point], max_points: usize) -> Vec<Point> {
    if points.len() <= max_points || max_points < 2 {
        return points.to_vec();
    }
    let buckets = max_points / 2;
    let mut out = Vec::with_capacity(buckets * 2);
    for b in 0..buckets {
        let lo = b * points.len() / buckets;
        let hi = (b + 1) * points.len() / buckets;
        let chunk = &points[lo..hi];
        if chunk.is_empty() {
            continue;
        }
        let (mut imin, mut imax) = (0, 0);
        for (i, p) in chunk.iter().enumerate() {
            if p.value < chunk[imin].value {
                imin = i;
            }
            if p.value > chunk[imax].value {
                imax = i;
            }
        }
        let (a, b) = (imin.min(imax), imin.max(imax));
        out.push(chunk[a]);
        if b != a {
            out.push(chunk[b]);
        }
    }
    out
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn fmt_time(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.format("%Y-%m-%d %H:%M:%S UTC").to_string())
        .unwrap_or_else(|| ts.to_string())
}

fn num(v: Option<f64>) -> String {
    match v {
        None => "&ndash;".to_string(),
        Some(0.0) => "0".to_string(),
        Some(x) if x.abs() >= 1e6 || x.abs() < 1e-3 => format!("{x:.4e}"),
        Some(x) => format!("{x:.4}"),
    }
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin:1em 0}\
td,th{border:1px solid #bbb;padding:3px 8px;text-align:right}\
th{background:#eee}td.l,th.l{text-align:left}\
.note{color:#666;font-style:italic}.warn{color:#a40}\
svg{background:#fafafa;border:1px solid #ddd;margin:0.5em 0}";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn head(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n",
        esc(title)
    );
}

/// Document for jobs with too little data to derive anything.
pub fn render_not_enough_data(job_id: &str, reason: &str, generated_at: i64) -> ReportDocument {
    let mut html = String::new();
    head(&mut html, &format!("Job {job_id}: not enough data"));
    let _ = write!(
        html,
        "<h1>Job {}</h1>\n<p class=\"note\">Not enough data for a report: {}.</p>\n<p class=\"note\">Generated {}.</p>\n</body>\n</html>\n",
        esc(job_id),
        esc(reason),
        fmt_time(generated_at)
    );
    ReportDocument {
        job_id: job_id.to_string(),
        html,
        complete: false,
    }
}

struct Frame {
    w: f64,
    h: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const PAD_L: f64 = 60.0;
const PAD_R: f64 = 10.0;
const PAD_T: f64 = 10.0;
const PAD_B: f64 = 25.0;

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = if self.x1 > self.x0 {
            self.x1 - self.x0
        } else {
            1.0
        };
        PAD_L + (v - self.x0) / span * (self.w - PAD_L - PAD_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = if self.y1 > self.y0 {
            self.y1 - self.y0
        } else {
            1.0
        };
        self.h - PAD_B - (v - self.y0) / span * (self.h - PAD_T - PAD_B)
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str, width: f64) {
    let mut path = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        if i > 0 {
            path.push(' ');
        }
        let _ = write!(path, "{:.1},{:.1}", frame.x(*x), frame.y(*y));
    }
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{path}\"/>"
    );
}

fn axes(out: &mut String, frame: &Frame, unit: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{PAD_L}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"#444\"/>\
<line x1=\"{PAD_L}\" y1=\"{PAD_T}\" x2=\"{PAD_L}\" y2=\"{b:.1}\" stroke=\"#444\"/>\
<text x=\"4\" y=\"{t:.1}\" font-size=\"10\">{}</text>\
<text x=\"4\" y=\"{b:.1}\" font-size=\"10\">{}</text>\
<text x=\"{PAD_L}\" y=\"{bl:.1}\" font-size=\"10\">{}</text>\
<text x=\"{r:.1}\" y=\"{bl:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>\
<text x=\"{r:.1}\" y=\"{t2:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
        num(Some(frame.y1)),
        num(Some(frame.y0)),
        fmt_time(frame.x0 as i64),
        fmt_time(frame.x1 as i64),
        esc(unit),
        b = frame.h - PAD_B,
        r = frame.w - PAD_R,
        t = PAD_T + 8.0,
        t2 = PAD_T + 8.0,
        bl = frame.h - 8.0,
    );
}

fn chart(
    out: &mut String,
    metric: &str,
    title: &str,
    by_id: Option<&BTreeMap<String, Vec<Point>>>,
) {
    let _ = writeln!(
        out,
        "<h3>{} <small>({})</small></h3>",
        esc(title),
        esc(metric_unit(metric))
    );
    let Some(by_id) = by_id.filter(|m| m.values().any(|v| !v.is_empty())) else {
        let _ = writeln!(
            out,
            "<p class=\"note\">{metric}: not collected for this job.</p>"
        );
        return;
    };
    let all = by_id.values().flatten();
    let (mut x0, mut x1, mut y1) = (i64::MAX, i64::MIN, 0.0f64);
    for p in all {
        x0 = x0.min(p.ts);
        x1 = x1.max(p.ts);
        y1 = y1.max(p.value);
    }
    let frame = Frame {
        w: 720.0,
        h: 200.0,
        x0: x0 as f64,
        x1: x1 as f64,
        y0: 0.0,
        y1: if y1 > 0.0 { y1 * 1.05 } else { 1.0 },
    };
    let _ = writeln!(
        out,
        "<svg width=\"{}\" height=\"{}\" role=\"img\" aria-label=\"{}\">",
        frame.w,
        frame.h,
        esc(metric)
    );
    axes(out, &frame, metric_unit(metric));
    if by_id.len() <= MAX_LINES {
        for (i, (id, pts)) in by_id.iter().enumerate() {
            let dec: Vec<(f64, f64)> = decimate(pts, MAX_CHART_POINTS)
                .iter()
                .map(|p| (p.ts as f64, p.value))
                .collect();
            let color = PALETTE[i % PALETTE.len()];
            polyline(out, &frame, &dec, color, 1.5);
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{}</text>",
                PAD_L + 5.0 + 90.0 * i as f64,
                frame.h - PAD_B - 4.0,
                esc(id)
            );
        }
    } else {
        let b = band(by_id.values().map(|v| v.as_slice()));
        for (pick, color, label) in [
            (0usize, "#1f77b4", "min"),
            (1, "#2ca02c", "median"),
            (2, "#d62728", "max"),
        ] {
            let pts: Vec<Point> = b
                .iter()
                .map(|p| Point {
                    ts: p.ts,
                    value: [p.min, p.median, p.max][pick],
                    dt: 0.0,
                })
                .collect();
            let dec: Vec<(f64, f64)> = decimate(&pts, MAX_CHART_POINTS)
                .iter()
                .map(|p| (p.ts as f64, p.value))
                .collect();
            polyline(out, &frame, &dec, color, 1.5);
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">{label} of {} series</text>",
                PAD_L + 5.0 + 120.0 * pick as f64,
                frame.h - PAD_B - 4.0,
                by_id.len()
            );
        }
    }
    out.push_str("</svg>\n");
}

fn roofline_inset(out: &mut String, summary: &JobSummary, spec: &MachineSpec) {
    let (lx0, lx1) = (-3.0f64, 3.0f64);
    let top = spec.peak_gflops.log10().ceil() + 0.5;
    let frame = Frame {
        w: 360.0,
        h: 240.0,
        x0: lx0,
        x1: lx1,
        y0: -3.0,
        y1: top,
    };
    let _ = writeln!(
        out,
        "<svg width=\"{}\" height=\"{}\" role=\"img\" aria-label=\"roofline\">",
        frame.w, frame.h
    );
    let _ = writeln!(
        out,
        "<line x1=\"{PAD_L}\" y1=\"{b:.1}\" x2=\"{r:.1}\" y2=\"{b:.1}\" stroke=\"#444\"/>\
<line x1=\"{PAD_L}\" y1=\"{PAD_T}\" x2=\"{PAD_L}\" y2=\"{b:.1}\" stroke=\"#444\"/>\
<text x=\"{r:.1}\" y=\"{bl:.1}\" font-size=\"10\" text-anchor=\"end\">FLOP/Byte (log)</text>\
<text x=\"4\" y=\"{t:.1}\" font-size=\"10\">GFLOP/s (log)</text>",
        b = frame.h - PAD_B,
        r = frame.w - PAD_R,
        bl = frame.h - 8.0,
        t = PAD_T + 8.0,
    );
    let ceiling: Vec<(f64, f64)> = (0..=60)
        .map(|i| {
            let lx = lx0 + (lx1 - lx0) * i as f64 / 60.0;
            (lx, attainable_performance(10f64.powf(lx), spec).log10())
        })
        .collect();
    polyline(out, &frame, &ceiling, "#444", 2.0);
    let point = summary
        .metrics
        .get("intensity")
        .and_then(|m| m.avg)
        .zip(summary.metrics.get("gflops").and_then(|m| m.avg));
    match point {
        Some((i, g)) if i > 0.0 && g > 0.0 => {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"6\" fill=\"#d62728\" fill-opacity=\"0.7\"/>",
                frame.x(i.log10().clamp(lx0, lx1)),
                frame.y(g.log10().clamp(frame.y0, frame.y1))
            );
        }
        _ => {
            let _ = writeln!(
                out,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">job point not drawable on log axes</text>",
                PAD_L + 10.0,
                PAD_T + 30.0
            );
        }
    }
    out.push_str("</svg>\n");
    let _ = writeln!(
        out,
        "<p>Ceilings per socket: peak {} GFLOP/s, memory bandwidth {} GB/s, ridge point {} FLOP/Byte.</p>",
        num(Some(spec.peak_gflops)),
        num(Some(spec.peak_bw_gbs)),
        num(Some(spec.ridge_point()))
    );
}

fn findings_section(out: &mut String, findings: &[DetectorFinding]) {
    out.push_str("<h2>Findings</h2>\n");
    if findings.is_empty() {
        out.push_str("<p>No findings.</p>\n");
        return;
    }
    out.push_str("<table>\n<tr><th class=\"l\">Detector</th><th class=\"l\">Severity</th><th class=\"l\">Window</th><th class=\"l\">Evidence</th></tr>\n");
    for f in findings {
        let evidence: Vec<String> = f
            .evidence
            .iter()
            .map(|(k, v)| format!("{}={}", esc(k), num(Some(*v))))
            .collect();
        let _ = writeln!(
            out,
            "<tr><td class=\"l\">{}</td><td class=\"l\">{:?}</td><td class=\"l\">{} &ndash; {}</td><td class=\"l\">{}</td></tr>",
            f.detector,
            f.severity,
            fmt_time(f.window.0),
            fmt_time(f.window.1),
            evidence.join(", ")
        );
    }
    out.push_str("</table>\n");
}

fn socket_table(out: &mut String, tl: &JobTimeline) {
    // (node, socket) -> sums and maxima.
    #[derive(Default)]
    struct Acc {
        flops: f64,
        bytes: f64,
        dt: f64,
        max_g: f64,
        max_b: f64,
        max_i: Option<f64>,
    }
    let mut per: BTreeMap<(String, u32), Acc> = BTreeMap::new();
    for d in &tl.derived {
        let a = per.entry((d.node.clone(), d.socket)).or_default();
        a.flops += d.flops;
        a.bytes += d.bytes;
        a.dt += d.dt;
        a.max_g = a.max_g.max(d.gflops);
        a.max_b = a.max_b.max(d.bw_gbs);
        if let Some(i) = d.intensity {
            a.max_i = Some(a.max_i.map_or(i, |m: f64| m.max(i)));
        }
    }
    out.push_str("<h2>Per-socket averages and maxima</h2>\n<table>\n<tr><th class=\"l\">Node</th><th>Socket</th><th>GFLOP/s avg</th><th>GFLOP/s max</th><th>GB/s avg</th><th>GB/s max</th><th>FLOP/Byte avg</th><th>FLOP/Byte max</th></tr>\n");
    for ((node, socket), a) in &per {
        let _ = writeln!(
            out,
            "<tr><td class=\"l\">{}</td><td>{socket}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            esc(node),
            num(Some(a.flops / a.dt / 1e9)),
            num(Some(a.max_g)),
            num(Some(a.bytes / a.dt / 1e9)),
            num(Some(a.max_b)),
            num((a.bytes > 0.0).then(|| a.flops / a.bytes)),
            num(a.max_i)
        );
    }
    out.push_str("</table>\n");
}

/// Renders the report. A timeline with fewer than two sample times yields
/// the not-enough-data document.
pub fn render_job_report(
    summary: &JobSummary,
    tl: &JobTimeline,
    spec: &MachineSpec,
    generated_at: i64,
) -> ReportDocument {
    if tl.first_ts == tl.last_ts
        || (tl.derived.is_empty() && tl.series.values().all(|m| m.values().all(|v| v.len() < 2)))
    {
        return render_not_enough_data(
            &summary.job_id,
            "fewer than two sampling intervals",
            generated_at,
        );
    }
    let mut out = String::new();
    head(
        &mut out,
        &format!("Job {} performance report", summary.job_id),
    );
    let _ = writeln!(out, "<h1>Job {}</h1>", esc(&summary.job_id));
    out.push_str("<table>\n");
    let rows: Vec<(&str, String)> = vec![
        ("Cluster", esc(&summary.cluster)),
        ("User", esc(summary.user.as_deref().unwrap_or("unknown"))),
        (
            "Partition",
            esc(summary.partition.as_deref().unwrap_or("unknown")),
        ),
        (
            "Node type",
            esc(summary.node_type.as_deref().unwrap_or("unknown")),
        ),
        (
            "Nodes",
            format!(
                "{} ({})",
                summary.nodes.len(),
                esc(&summary.nodes.join(", "))
            ),
        ),
        ("First sample", fmt_time(summary.first_ts)),
        ("Last sample", fmt_time(summary.last_ts)),
        ("Sampling interval", format!("{} s", summary.interval_s)),
        ("Core hours", num(Some(summary.core_hours))),
        (
            "Commands",
            if summary.software.commands.is_empty() {
                "&ndash;".into()
            } else {
                esc(&summary.software.commands.join(", "))
            },
        ),
    ];
    for (k, v) in rows {
        let _ = writeln!(
            out,
            "<tr><th class=\"l\">{k}</th><td class=\"l\">{v}</td></tr>"
        );
    }
    out.push_str("</table>\n");

    out.push_str("<h2>Roofline</h2>\n");
    roofline_inset(&mut out, summary, spec);

    out.push_str("<h2>Summary</h2>\n<table>\n<tr><th class=\"l\">Metric</th><th class=\"l\">Unit</th><th>Average</th><th>Maximum</th></tr>\n");
    for (name, m) in &summary.metrics {
        let _ = writeln!(
            out,
            "<tr><td class=\"l\">{}</td><td class=\"l\">{}</td><td>{}</td><td>{}</td></tr>",
            esc(name),
            esc(&m.unit),
            num(m.avg),
            num(m.max)
        );
    }
    out.push_str("</table>\n<table>\n<tr><th class=\"l\">Total</th><th>Value</th></tr>\n");
    for (name, v) in &summary.totals {
        let _ = writeln!(
            out,
            "<tr><td class=\"l\">{}</td><td>{}</td></tr>",
            esc(name),
            num(Some(*v))
        );
    }
    out.push_str("</table>\n");
    socket_table(&mut out, tl);

    findings_section(&mut out, &summary.findings);

    out.push_str("<h2>Timelines</h2>\n");
    for (metric, title) in CHARTS {
        chart(&mut out, metric, title, tl.series.get(*metric));
    }

    let _ = writeln!(
        out,
        "<h2>Data completeness</h2>\n<p>{} derived intervals, {} gaps (intervals dropped after counter resets or missing samples).</p>\n<p class=\"note\">Generated {}.</p>\n</body>\n</html>",
        summary.derived_points,
        summary.derived_gaps,
        fmt_time(generated_at)
    );
    ReportDocument {
        job_id: summary.job_id.clone(),
        html: out,
        complete: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64]) -> Vec<Point> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| Point {
                ts: i as i64,
                value: v,
                dt: 1.0,
            })
            .collect()
    }

    #[test]
    fn decimation_keeps_extremes_and_bound() {
        let values: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let mut v = values.clone();
        v[4321] = -5.0;
        v[8765] = 5000.0;
        let d = decimate(&series(&v), MAX_CHART_POINTS);
        assert!(d.len() <= MAX_CHART_POINTS);
        assert!(d.iter().any(|p| p.value == -5.0));
        assert!(d.iter().any(|p| p.value == 5000.0));
        assert!(d.windows(2).all(|w| w[0].ts < w[1].ts));
        assert_eq!(decimate(&series(&[1.0, 2.0]), MAX_CHART_POINTS).len(), 2);
    }

    #[test]
    fn escaping() {
        assert_eq!(
            esc("<a href=\"x\">&'"),
            "&lt;a href=&quot;x&quot;&gt;&amp;&#39;"
        );
    }

    #[test]
    fn not_enough_data_document() {
        let doc = render_not_enough_data("j<1>", "one sample", 0);
        assert!(!doc.complete);
        assert!(doc.html.contains("j&lt;1&gt;"));
        assert!(doc.html.contains("Not enough data"));
    }
}
