//! Embedded log-structured store for hpcmd samples.
//!
//! Every accepted sample is appended to a segment file in its canonical line
//! form and kept in memory with indexes by job and by node. Reopening a data
//! directory replays the segments. See [`segment`] for the on-disk layout.

pub mod listen;
pub mod segment;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use hpcmon_core::analytics::JobAccumulator;
use hpcmon_core::encode_canonical;
use hpcmon_core::logline::{decode_line, DecodeError, Decoded, Reassembler};
use hpcmon_core::model::{JobIndexEntry, MachineCatalog, MetricSample, SampleKey, Source};
use serde::{Deserialize, Serialize};

use segment::{
    list_segments, parse_manifest, segment_name, write_manifest, ManifestEntry, SegmentState,
    SegmentWriter, DEFAULT_SEGMENT_LIMIT, FORMAT_FILE, FORMAT_LINE, MANIFEST_FILE, SEGMENT_DIR,
};

pub use segment::dir_checksum;

/// Malformed lines kept for diagnostics.
pub const DIAGNOSTICS_CAP: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} is not an hpcmon data directory")]
    NotAStore(PathBuf),
    #[error("unsupported store format {0:?}")]
    Format(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("store is read-only")]
    ReadOnly,
    #[error("invalid filter: {0}")]
    Filter(String),
}

impl StoreError {
    /// Write failures may go away; the listeners retry these.
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Io(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Udp,
    Socket,
    File,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Udp => "udp",
            Origin::Socket => "socket",
            Origin::File => "file",
        }
    }

    fn parse(s: &str) -> Option<Origin> {
        match s {
            "udp" => Some(Origin::Udp),
            "socket" => Some(Origin::Socket),
            "file" => Some(Origin::File),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub sample: MetricSample,
    pub ingest_time: i64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored,
    /// Same (node, ts, source, socket) as a stored record; the first wins.
    Duplicate,
    /// One part of a split sample; stored once the last part arrives.
    Partial,
    /// No hpcmd marker.
    Skipped,
    ParseError,
}

/// Counters since open. `lines_received` always equals the sum of the rest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub lines_received: u64,
    pub stored: u64,
    pub duplicates: u64,
    pub partial_parts: u64,
    pub skipped: u64,
    pub parse_errors: u64,
}

impl IngestStats {
    pub fn balanced(&self) -> bool {
        self.lines_received
            == self.stored + self.duplicates + self.partial_parts + self.skipped + self.parse_errors
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: String,
    pub error: String,
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFilter {
    pub cluster: Option<String>,
    pub job_id: Option<String>,
    pub node: Option<String>,
    pub source: Option<Source>,
    /// Half-open `[t0, t1)`.
    pub time_range: Option<(i64, i64)>,
    pub partition: Option<String>,
}

fn check_range(range: Option<(i64, i64)>) -> Result<(), StoreError> {
    match range {
        Some((t0, t1)) if t0 >= t1 => Err(StoreError::Filter(format!(
            "time range needs t0 < t1, got [{t0}, {t1})"
        ))),
        _ => Ok(()),
    }
}

impl QueryFilter {
    pub fn job(job_id: &str) -> Self {
        QueryFilter {
            job_id: Some(job_id.to_string()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        check_range(self.time_range)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobFilter {
    pub cluster: Option<String>,
    pub user: Option<String>,
    pub partition: Option<String>,
    pub node_type: Option<String>,
    /// Jobs whose observed span intersects `[t0, t1)`.
    pub time_range: Option<(i64, i64)>,
    pub min_core_hours: Option<f64>,
}

impl JobFilter {
    pub fn validate(&self) -> Result<(), StoreError> {
        check_range(self.time_range)?;
        if let Some(c) = self.min_core_hours {
            if !c.is_finite() || c < 0.0 {
                return Err(StoreError::Filter(format!(
                    "min_core_hours must be a non-negative number, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn matches(&self, e: &JobIndexEntry) -> bool {
        let eq = |want: &Option<String>, have: Option<&str>| {
            want.as_deref().is_none_or(|w| have == Some(w))
        };
        eq(&self.cluster, Some(&e.cluster))
            && eq(&self.user, e.user.as_deref())
            && eq(&self.partition, e.partition.as_deref())
            && eq(&self.node_type, e.node_type.as_deref())
            && self
                .time_range
                .is_none_or(|(t0, t1)| e.first_ts < t1 && e.last_ts >= t0)
            && self.min_core_hours.is_none_or(|m| e.core_hours >= m)
    }
}

fn now_epoch() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn sort_key(r: &StoredRecord) -> (i64, &str, Source, Option<u32>) {
    (
        r.sample.timestamp,
        r.sample.node.as_str(),
        r.sample.source,
        r.sample.socket,
    )
}

pub struct Store {
    dir: PathBuf,
    read_only: bool,
    segment_limit: u64,
    segments: Vec<SegmentState>,
    writer: Option<SegmentWriter>,
    records: Vec<StoredRecord>,
    keys: HashSet<SampleKey>,
    by_job: HashMap<String, Vec<usize>>,
    by_node: HashMap<String, Vec<usize>>,
    jobs: BTreeMap<(String, String), JobAccumulator>,
    reassembler: Reassembler,
    stats: IngestStats,
    diagnostics: VecDeque<Diagnostic>,
}

/// Store shared between listener threads and readers. Writers take the
/// write lock, so ingestion is serialized.
pub type SharedStore = Arc<RwLock<Store>>;

impl Store {
    /// Opens `dir` for writing, creating it when missing or empty.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join(SEGMENT_DIR))?;
        let format = dir.join(FORMAT_FILE);
        if !format.exists() {
            if !list_segments(dir)?.is_empty() {
                return Err(StoreError::NotAStore(dir.to_path_buf()));
            }
            fs::write(&format, format!("{FORMAT_LINE}\n"))?;
        }
        let mut store = Store::load(dir, false)?;
        let (number, path, valid) = match store.segments.last() {
            Some(s) => (s.number, s.path.clone(), s.offset),
            None => {
                let path = dir.join(SEGMENT_DIR).join(segment_name(1));
                store.segments.push(SegmentState::new(1, path.clone()));
                (1, path, 0)
            }
        };
        debug_assert_eq!(store.segments.last().map(|s| s.number), Some(number));
        store.writer = Some(SegmentWriter::open(&path, valid)?);
        store.write_manifest()?;
        Ok(store)
    }

    /// Opens an existing data directory without writing to it.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref();
        if !dir.join(FORMAT_FILE).exists() {
            return Err(StoreError::NotAStore(dir.to_path_buf()));
        }
        Store::load(dir, true)
    }

    fn load(dir: &Path, read_only: bool) -> Result<Store, StoreError> {
        let format = fs::read_to_string(dir.join(FORMAT_FILE))?;
        if format.trim_end() != FORMAT_LINE {
            return Err(StoreError::Format(format.trim_end().to_string()));
        }
        let mut store = Store {
            dir: dir.to_path_buf(),
            read_only,
            segment_limit: DEFAULT_SEGMENT_LIMIT,
            segments: Vec::new(),
            writer: None,
            records: Vec::new(),
            keys: HashSet::new(),
            by_job: HashMap::new(),
            by_node: HashMap::new(),
            jobs: BTreeMap::new(),
            reassembler: Reassembler::default(),
            stats: IngestStats::default(),
            diagnostics: VecDeque::new(),
        };
        store.refresh()?;
        store.verify_manifest()?;
        Ok(store)
    }

    /// Segments whose length matches the manifest must also match its hash.
    fn verify_manifest(&self) -> Result<(), StoreError> {
        let path = self.dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(());
        }
        let entries = parse_manifest(&fs::read_to_string(path)?)?;
        for e in entries {
            let Some(seg) = self
                .segments
                .iter()
                .find(|s| segment_name(s.number) == e.name)
            else {
                return Err(StoreError::Corrupt(format!(
                    "segment {} listed in MANIFEST is missing",
                    e.name
                )));
            };
            let have = seg.manifest_entry();
            if have.bytes == e.bytes && have.sha256 != e.sha256 {
                return Err(StoreError::Corrupt(format!(
                    "segment {} checksum mismatch",
                    e.name
                )));
            }
            if have.bytes < e.bytes {
                return Err(StoreError::Corrupt(format!(
                    "segment {} is shorter than recorded ({} < {})",
                    e.name, have.bytes, e.bytes
                )));
            }
        }
        Ok(())
    }

    /// Picks up records appended to the segments since the last read. A
    /// read-only store uses this to follow a running ingest process.
    pub fn refresh(&mut self) -> Result<usize, StoreError> {
        if !self.read_only && self.writer.is_some() {
            return Ok(0);
        }
        let before = self.records.len();
        for (number, path) in list_segments(&self.dir)? {
            if !self.segments.iter().any(|s| s.number == number) {
                self.segments.push(SegmentState::new(number, path));
            }
        }
        self.segments.sort_by_key(|s| s.number);
        for i in 0..self.segments.len() {
            let (lines, _partial) = self.segments[i].read_new()?;
            let name = segment_name(self.segments[i].number);
            for line in lines {
                let rec =
                    parse_record(&line).map_err(|e| StoreError::Corrupt(format!("{name}: {e}")))?;
                if !self.keys.contains(&rec.sample.key()) {
                    self.index(rec);
                }
            }
        }
        Ok(self.records.len() - before)
    }

    /// Size at which a new segment is started.
    pub fn set_segment_limit(&mut self, bytes: u64) {
        self.segment_limit = bytes.max(1);
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_read_only(&self) -> bool {
        self.read_only
    }

    fn index(&mut self, rec: StoredRecord) {
        let i = self.records.len();
        let s = &rec.sample;
        self.keys.insert(s.key());
        self.by_node.entry(s.node.clone()).or_default().push(i);
        if let Some(job) = s.job_id() {
            self.by_job.entry(job.to_string()).or_default().push(i);
            self.jobs
                .entry((s.cluster.clone(), job.to_string()))
                .or_insert_with(|| JobAccumulator::new(job, &s.cluster))
                .add(s);
        }
        self.records.push(rec);
    }

    /// Ingests one line, stamping it with the current time.
    pub fn ingest_line(&mut self, text: &str, origin: Origin) -> Result<IngestOutcome, StoreError> {
        self.ingest_line_at(text, origin, now_epoch())
    }

    /// Ingests one line. Only storage failures are errors; everything about
    /// the line itself is reported through the outcome and the counters.
    pub fn ingest_line_at(
        &mut self,
        text: &str,
        origin: Origin,
        ingest_time: i64,
    ) -> Result<IngestOutcome, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        let outcome = match decode_line(text) {
            Err(DecodeError::NotOurs) => IngestOutcome::Skipped,
            Err(e) => {
                self.diagnose(text, &e);
                IngestOutcome::ParseError
            }
            Ok(decoded) => {
                let key = match &decoded {
                    Decoded::Complete(s) | Decoded::Part { sample: s, .. } => s.key(),
                };
                if self.keys.contains(&key) {
                    IngestOutcome::Duplicate
                } else {
                    match self.reassembler.push(decoded) {
                        Some(sample) => self.append(sample, origin, ingest_time)?,
                        None => IngestOutcome::Partial,
                    }
                }
            }
        };
        self.stats.lines_received += 1;
        match outcome {
            IngestOutcome::Stored => self.stats.stored += 1,
            IngestOutcome::Duplicate => self.stats.duplicates += 1,
            IngestOutcome::Partial => self.stats.partial_parts += 1,
            IngestOutcome::Skipped => self.stats.skipped += 1,
            IngestOutcome::ParseError => self.stats.parse_errors += 1,
        }
        Ok(outcome)
    }

    fn append(
        &mut self,
        sample: MetricSample,
        origin: Origin,
        ingest_time: i64,
    ) -> Result<IngestOutcome, StoreError> {
        let canonical = match encode_canonical(&sample) {
            Ok(c) => c,
            Err(e) => {
                // Decoded samples always re-encode; keep the accounting honest anyway.
                self.push_diagnostic(Diagnostic {
                    line: sample.node.clone(),
                    error: e.to_string(),
                    offset: None,
                });
                return Ok(IngestOutcome::ParseError);
            }
        };
        let line = format!("{ingest_time} {} {canonical}\n", origin.as_str());
        self.roll_if_full()?;
        let writer = self.writer.as_mut().ok_or(StoreError::ReadOnly)?;
        writer.append(line.as_bytes())?;
        let seg = self
            .segments
            .last_mut()
            .expect("writable store has a segment");
        sha2::Digest::update(&mut seg.hasher, line.as_bytes());
        seg.offset += line.len() as u64;
        seg.records += 1;
        self.index(StoredRecord {
            sample,
            ingest_time,
            origin,
        });
        Ok(IngestOutcome::Stored)
    }

    fn roll_if_full(&mut self) -> Result<(), StoreError> {
        let Some(last) = self.segments.last() else {
            return Ok(());
        };
        if last.offset < self.segment_limit {
            return Ok(());
        }
        if let Some(w) = self.writer.as_mut() {
            w.sync()?;
        }
        let number = last.number + 1;
        let path = self.dir.join(SEGMENT_DIR).join(segment_name(number));
        self.writer = Some(SegmentWriter::open(&path, 0)?);
        self.segments.push(SegmentState::new(number, path));
        self.write_manifest()?;
        Ok(())
    }

    fn diagnose(&mut self, text: &str, e: &DecodeError) {
        let mut line: String = text.chars().take(4096).collect();
        if line.len() < text.len() {
            line.push_str("...");
        }
        self.push_diagnostic(Diagnostic {
            line,
            error: e.to_string(),
            offset: e.offset(),
        });
    }

    fn push_diagnostic(&mut self, d: Diagnostic) {
        if self.diagnostics.len() == DIAGNOSTICS_CAP {
            self.diagnostics.pop_front();
        }
        self.diagnostics.push_back(d);
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let entries: Vec<ManifestEntry> = self
            .segments
            .iter()
            .map(SegmentState::manifest_entry)
            .collect();
        write_manifest(&self.dir, &entries)?;
        Ok(())
    }

    /// Writes buffered records and the manifest to disk.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        if self.read_only {
            return Ok(());
        }
        if let Some(w) = self.writer.as_mut() {
            w.sync()?;
        }
        self.write_manifest()
    }

    pub fn close(mut self) -> Result<(), StoreError> {
        self.flush()?;
        self.writer = None;
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.segments
            .iter()
            .map(SegmentState::manifest_entry)
            .collect()
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Most recent malformed lines, oldest first.
    pub fn diagnostics(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parts waiting for the rest of their sample.
    pub fn pending_parts(&self) -> usize {
        self.reassembler.pending()
    }

    /// Matching records ordered by (ts, node, source, socket).
    pub fn query(&self, filter: &QueryFilter) -> Result<Vec<StoredRecord>, StoreError> {
        filter.validate()?;
        let partition_jobs: Option<HashSet<&str>> = filter.partition.as_ref().map(|p| {
            self.jobs
                .values()
                .filter(|a| a.details().is_some_and(|d| &d.partition == p))
                .map(|a| a.job_id())
                .collect()
        });
        let candidates: Box<dyn Iterator<Item = &StoredRecord>> =
            match (&filter.job_id, &filter.node) {
                (Some(job), _) => Box::new(
                    self.by_job
                        .get(job)
                        .into_iter()
                        .flatten()
                        .map(|&i| &self.records[i]),
                ),
                (None, Some(node)) => Box::new(
                    self.by_node
                        .get(node)
                        .into_iter()
                        .flatten()
                        .map(|&i| &self.records[i]),
                ),
                (None, None) => Box::new(self.records.iter()),
            };
        let mut out: Vec<StoredRecord> = candidates
            .filter(|r| {
                let s = &r.sample;
                filter.cluster.as_ref().is_none_or(|c| &s.cluster == c)
                    && filter
                        .job_id
                        .as_deref()
                        .is_none_or(|j| s.job_id() == Some(j))
                    && filter.node.as_ref().is_none_or(|n| &s.node == n)
                    && filter.source.is_none_or(|src| s.source == src)
                    && filter
                        .time_range
                        .is_none_or(|(t0, t1)| s.timestamp >= t0 && s.timestamp < t1)
                    && partition_jobs
                        .as_ref()
                        .is_none_or(|set| s.job_id().is_some_and(|j| set.contains(j)))
            })
            .cloned()
            .collect();
        out.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
        Ok(out)
    }

    /// Samples of one job, ordered like [`Store::query`].
    pub fn job_samples(&self, job_id: &str) -> Vec<MetricSample> {
        let mut idx: Vec<usize> = self.by_job.get(job_id).cloned().unwrap_or_default();
        idx.sort_by(|&a, &b| sort_key(&self.records[a]).cmp(&sort_key(&self.records[b])));
        idx.into_iter()
            .map(|i| self.records[i].sample.clone())
            .collect()
    }

    /// Records stored for a job; changes whenever the job gains data.
    pub fn job_record_count(&self, job_id: &str) -> usize {
        self.by_job.get(job_id).map_or(0, Vec::len)
    }

    pub fn has_job(&self, job_id: &str) -> bool {
        self.by_job.contains_key(job_id)
    }

    pub fn job_entry(&self, job_id: &str, catalog: &MachineCatalog) -> Option<JobIndexEntry> {
        self.jobs
            .iter()
            .find(|((_, j), _)| j == job_id)
            .map(|(_, acc)| acc.entry(catalog))
    }

    /// Job index, most recently active first, ties by job id.
    pub fn list_jobs(
        &self,
        filter: &JobFilter,
        catalog: &MachineCatalog,
    ) -> Result<Vec<JobIndexEntry>, StoreError> {
        filter.validate()?;
        let mut out: Vec<JobIndexEntry> = self
            .jobs
            .values()
            .map(|a| a.entry(catalog))
            .filter(|e| filter.matches(e))
            .collect();
        out.sort_by(|a, b| {
            b.last_ts
                .cmp(&a.last_ts)
                .then_with(|| a.job_id.cmp(&b.job_id))
        });
        Ok(out)
    }

    /// Latest sample timestamp of a job; part of the report cache key.
    pub fn job_last_ts(&self, job_id: &str) -> Option<i64> {
        self.jobs
            .iter()
            .filter(|((_, j), _)| j == job_id)
            .map(|(_, a)| a.last_ts())
            .max()
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if !self.read_only && self.writer.is_some() {
            if let Err(e) = self.flush() {
                log::error!("flushing store {}: {e}", self.dir.display());
            }
        }
    }
}

fn parse_record(line: &str) -> Result<StoredRecord, String> {
    let mut it = line.splitn(3, ' ');
    let ingest_time = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format!("bad ingest time in {line:?}"))?;
    let origin = it
        .next()
        .and_then(Origin::parse)
        .ok_or_else(|| format!("bad origin in {line:?}"))?;
    let rest = it
        .next()
        .ok_or_else(|| format!("missing sample in {line:?}"))?;
    match decode_line(rest) {
        Ok(Decoded::Complete(sample)) => Ok(StoredRecord {
            sample,
            ingest_time,
            origin,
        }),
        Ok(Decoded::Part { .. }) => Err(format!("stored record is a part: {line:?}")),
        Err(e) => Err(format!("{e}: {line:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "hpcmd v=1 ts=600 cluster=sim node=n001 src=cpu_core skt=0 job=j42 cycles=1000 instructions=1500";

    #[test]
    fn outcomes_and_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = Store::open(dir.path()).unwrap();
        assert_eq!(
            st.ingest_line_at(LINE, Origin::Udp, 1).unwrap(),
            IngestOutcome::Stored
        );
        assert_eq!(
            st.ingest_line_at(LINE, Origin::Udp, 2).unwrap(),
            IngestOutcome::Duplicate
        );
        assert_eq!(
            st.ingest_line_at("kernel: eth0 link up", Origin::Udp, 3)
                .unwrap(),
            IngestOutcome::Skipped
        );
        // Cut inside the last key.
        let cut = &LINE[..LINE.len() - 6];
        assert_eq!(
            st.ingest_line_at(cut, Origin::Udp, 4).unwrap(),
            IngestOutcome::ParseError
        );
        let broken = LINE.replace("cycles=1000", "cycles=10 00");
        assert_eq!(
            st.ingest_line_at(&broken.replace("ts=600", "ts=1200"), Origin::Udp, 5)
                .unwrap(),
            IngestOutcome::ParseError
        );
        let s = st.stats();
        assert!(s.balanced());
        assert_eq!(
            (s.stored, s.duplicates, s.skipped, s.parse_errors),
            (1, 1, 1, 2)
        );
        let d: Vec<_> = st.diagnostics().collect();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].offset, Some(LINE.rfind(' ').unwrap() + 1));
    }

    #[test]
    fn diagnostics_are_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = Store::open(dir.path()).unwrap();
        for i in 0..250 {
            let bad = format!("hpcmd v=1 ts={i} cluster=sim node=n1 src=io =oops");
            assert_eq!(
                st.ingest_line_at(&bad, Origin::File, 0).unwrap(),
                IngestOutcome::ParseError
            );
        }
        assert_eq!(st.diagnostics().count(), DIAGNOSTICS_CAP);
        assert!(st.diagnostics().next().unwrap().line.contains("ts=150 "));
    }

    #[test]
    fn split_sample_is_stored_once_complete() {
        use hpcmon_core::model::Value;
        let mut s = MetricSample::new(600, "sim", "n1", Source::Software);
        for i in 0..200 {
            s.values
                .insert(format!("extra_counter_{i:03}"), Value::Int(i));
        }
        let lines = hpcmon_core::encode_logline(&s).unwrap();
        assert!(lines.len() > 1);
        let dir = tempfile::tempdir().unwrap();
        let mut st = Store::open(dir.path()).unwrap();
        let n = lines.len();
        for (i, l) in lines.iter().enumerate() {
            let out = st.ingest_line_at(l.as_str(), Origin::Socket, 9).unwrap();
            let want = if i + 1 == n {
                IngestOutcome::Stored
            } else {
                IngestOutcome::Partial
            };
            assert_eq!(out, want);
        }
        assert_eq!(st.query(&QueryFilter::default()).unwrap()[0].sample, s);
        assert!(st.stats().balanced());
        drop(st);
        let st = Store::open_read_only(dir.path()).unwrap();
        assert_eq!(st.query(&QueryFilter::default()).unwrap()[0].sample, s);
    }

    #[test]
    fn read_only_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        Store::open(dir.path()).unwrap().close().unwrap();
        let mut ro = Store::open_read_only(dir.path()).unwrap();
        assert!(matches!(
            ro.ingest_line(LINE, Origin::Udp),
            Err(StoreError::ReadOnly)
        ));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            Store::open_read_only(empty.path().join("nope")),
            Err(StoreError::NotAStore(_))
        ));
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let st = Store::open(dir.path()).unwrap();
        let f = QueryFilter {
            time_range: Some((600, 600)),
            ..Default::default()
        };
        assert!(matches!(st.query(&f), Err(StoreError::Filter(_))));
        assert!(st.query(&QueryFilter::job("nothing")).unwrap().is_empty());
        let jf = JobFilter {
            min_core_hours: Some(-1.0),
            ..Default::default()
        };
        assert!(st.list_jobs(&jf, &MachineCatalog::builtin()).is_err());
    }

    #[test]
    fn segments_roll_over() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = Store::open(dir.path()).unwrap();
        st.set_segment_limit(300);
        for ts in 1..=10 {
            let l = LINE.replace("ts=600", &format!("ts={}", ts * 600));
            st.ingest_line_at(&l, Origin::Udp, 0).unwrap();
        }
        assert!(st.manifest().len() > 2);
        assert_eq!(st.manifest().iter().map(|m| m.records).sum::<u64>(), 10);
        st.close().unwrap();
        let st = Store::open(dir.path()).unwrap();
        assert_eq!(st.len(), 10);
    }
}
