//! Key-value log-line codec.
//!
//! ```text
//! hpcmd v=1 ts=<epoch> cluster=<token> node=<token> src=<source> [skt=<int>] [job=<token>] [part=<i>:<n>] (<key>=<value> )*
//! ```
//!
//! Payload keys appear in lexicographic order, so encoding is canonical. Text
//! values are percent-encoded outside `[A-Za-z0-9_.:-]`; a text value that
//! would otherwise read back as a number gets its first byte escaped. A line
//! longer than [`MAX_LINE_BYTES`] is split into parts that repeat the header
//! and carry `part=<i>:<n>`; [`Reassembler`] joins them again.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::OnceLock;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use regex::Regex;
use thiserror::Error;

use crate::model::{
    is_counter_name, is_token, JobContext, JobDetails, MetricSample, ModelError, NodeStateKind,
    SampleKey, Source, Value, JOB_KEY_PREFIX,
};

pub const MARKER: &str = "hpcmd";
pub const WIRE_VERSION: u32 = 1;
pub const MAX_LINE_BYTES: usize = 2048;

const VALUE_ESCAPES: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'_')
    .remove(b'.')
    .remove(b':')
    .remove(b'-');

const JOB_CORES: &str = "job.cores";
const JOB_GPUS: &str = "job.gpus";
const JOB_NODES: &str = "job.nodes";
const JOB_PART: &str = "job.part";
const JOB_START: &str = "job.start";
const JOB_STATE: &str = "job.state";
const JOB_USER: &str = "job.user";
const JOB_KEYS: [&str; 7] = [
    JOB_CORES, JOB_GPUS, JOB_NODES, JOB_PART, JOB_START, JOB_STATE, JOB_USER,
];

/// One encoded line (no trailing newline).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogLine(String);

impl LogLine {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for LogLine {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("key {key} alone needs {bytes} bytes, more than the {limit}-byte line limit")]
    Oversized {
        key: String,
        bytes: usize,
        limit: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    /// No `hpcmd` marker: ordinary syslog traffic.
    #[error("not an hpcmd line")]
    NotOurs,
    #[error("unsupported wire version {version:?} at byte {offset}")]
    UnsupportedVersion { offset: usize, version: String },
    #[error("malformed line at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("line is part {index} of {count}; reassemble before decoding")]
    Continuation { index: u32, count: u32 },
}

impl DecodeError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            DecodeError::UnsupportedVersion { offset, .. }
            | DecodeError::Malformed { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

/// A decoded line: either a whole sample or one part of a split sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Complete(MetricSample),
    Part {
        index: u32,
        count: u32,
        sample: MetricSample,
    },
}

fn encode_text(s: &str) -> String {
    let mut out: String = utf8_percent_encode(s, VALUE_ESCAPES).collect();
    if !out.contains('%') && classify_plain(&out) != PlainKind::Text {
        // Escape the first byte so the value cannot be read back as a number.
        let first = out.as_bytes()[0];
        out = format!("%{first:02X}{}", &out[1..]);
    }
    out
}

fn encode_value(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        // Debug formatting is the shortest representation that parses back to
        // the same f64 and always contains '.' or 'e'.
        Value::Float(f) => format!("{f:?}"),
        Value::Text(s) => encode_text(s),
    }
}

#[derive(Debug, PartialEq)]
enum PlainKind {
    Int,
    Float,
    Text,
}

fn float_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^-?[0-9]+(\.[0-9]+)?([eE]-?[0-9]+)?$").unwrap())
}

fn classify_plain(token: &str) -> PlainKind {
    if token.bytes().all(|b| b.is_ascii_digit()) {
        PlainKind::Int
    } else if float_re().is_match(token) {
        PlainKind::Float
    } else {
        PlainKind::Text
    }
}

/// `job.state` is left out when exclusive, the only state agents attribute
/// metrics in.
fn job_entries(details: &JobDetails) -> Vec<(String, String)> {
    let mut out = vec![
        (JOB_CORES.into(), details.cores_allocated.to_string()),
        (JOB_GPUS.into(), details.gpus_allocated.to_string()),
        (JOB_NODES.into(), details.num_nodes.to_string()),
        (JOB_PART.into(), encode_text(&details.partition)),
        (JOB_START.into(), details.job_start.to_string()),
    ];
    if details.node_state != NodeStateKind::Exclusive {
        out.push((JOB_STATE.into(), details.node_state.as_str().to_string()));
    }
    out.push((JOB_USER.into(), encode_text(&details.user_id)));
    out
}

fn header(sample: &MetricSample) -> String {
    let mut h = format!(
        "{MARKER} v={WIRE_VERSION} ts={} cluster={} node={} src={}",
        sample.timestamp, sample.cluster, sample.node, sample.source
    );
    if let Some(skt) = sample.socket {
        h.push_str(&format!(" skt={skt}"));
    }
    if let Some(job) = &sample.job {
        h.push_str(&format!(" job={}", job.job_id));
    }
    h
}

fn push_entries(line: &mut String, entries: &[&(String, String)]) {
    for (k, v) in entries {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(v);
    }
}

/// Single-line canonical form without the size limit. Used by the store,
/// whose records are reassembled samples.
pub fn encode_canonical(sample: &MetricSample) -> Result<String, EncodeError> {
    sample.validate()?;
    let (head, entries) = prepare(sample);
    let mut line = head;
    push_entries(&mut line, &entries.iter().collect::<Vec<_>>());
    Ok(line)
}

fn prepare(sample: &MetricSample) -> (String, Vec<(String, String)>) {
    let mut entries: Vec<(String, String)> = sample
        .values
        .iter()
        .map(|(k, v)| (k.clone(), encode_value(v)))
        .collect();
    if let Some(details) = sample.job.as_ref().and_then(|j| j.details.as_ref()) {
        entries.extend(job_entries(details));
    }
    entries.sort();
    (header(sample), entries)
}

/// Encodes a sample into one line, or several `part=` lines when the single
/// line would exceed [`MAX_LINE_BYTES`].
pub fn encode_logline(sample: &MetricSample) -> Result<Vec<LogLine>, EncodeError> {
    sample.validate()?;
    let (head, entries) = prepare(sample);
    let total: usize = head.len()
        + entries
            .iter()
            .map(|(k, v)| k.len() + v.len() + 2)
            .sum::<usize>();
    if total <= MAX_LINE_BYTES {
        let mut line = head;
        push_entries(&mut line, &entries.iter().collect::<Vec<_>>());
        return Ok(vec![LogLine(line)]);
    }

    // Job facts go first so they all land in part 1.
    let (job, rest): (Vec<_>, Vec<_>) = entries
        .iter()
        .partition(|(k, _)| k.starts_with(JOB_KEY_PREFIX));
    let ordered: Vec<&(String, String)> = job.into_iter().chain(rest).collect();

    let mut reserve = " part=99:99".len();
    loop {
        let budget = MAX_LINE_BYTES - head.len() - reserve;
        let mut parts: Vec<Vec<&(String, String)>> = vec![Vec::new()];
        let mut used = 0usize;
        for entry in &ordered {
            let need = entry.0.len() + entry.1.len() + 2;
            if need > budget {
                return Err(EncodeError::Oversized {
                    key: entry.0.clone(),
                    bytes: head.len() + reserve + need,
                    limit: MAX_LINE_BYTES,
                });
            }
            if used + need > budget {
                parts.push(Vec::new());
                used = 0;
            }
            parts.last_mut().unwrap().push(entry);
            used += need;
        }
        let count = parts.len();
        let suffix_len = format!(" part={count}:{count}").len();
        if suffix_len > reserve {
            reserve = suffix_len;
            continue;
        }
        return Ok(parts
            .into_iter()
            .enumerate()
            .map(|(i, mut part)| {
                part.sort();
                let mut line = format!("{head} part={}:{count}", i + 1);
                push_entries(&mut line, &part);
                LogLine(line)
            })
            .collect());
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)hpcmd(?:\[[0-9]+\])?:? v=").unwrap())
}

struct Cursor<'a> {
    text: &'a str,
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek_key(&self) -> Option<&'a str> {
        self.tokens
            .get(self.pos)
            .map(|(_, t)| t.split_once('=').map(|(k, _)| k).unwrap_or(t))
    }

    fn end_offset(&self) -> usize {
        self.text.len()
    }

    /// Takes the next token, which must be `key=<value>`.
    fn expect(&mut self, key: &str) -> Result<(usize, &'a str), DecodeError> {
        let Some(&(offset, token)) = self.tokens.get(self.pos) else {
            return Err(DecodeError::Malformed {
                offset: self.end_offset(),
                reason: format!("missing {key}"),
            });
        };
        match token.split_once('=') {
            Some((k, v)) if k == key => {
                self.pos += 1;
                Ok((offset + key.len() + 1, v))
            }
            _ => Err(DecodeError::Malformed {
                offset,
                reason: format!("expected {key}=, found {token:?}"),
            }),
        }
    }
}

fn malformed(offset: usize, reason: impl Into<String>) -> DecodeError {
    DecodeError::Malformed {
        offset,
        reason: reason.into(),
    }
}

fn parse_int<T: std::str::FromStr>(offset: usize, field: &str, v: &str) -> Result<T, DecodeError> {
    if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(
            offset,
            format!("{field} must be a non-negative integer, got {v:?}"),
        ));
    }
    v.parse()
        .map_err(|_| malformed(offset, format!("{field} out of range: {v}")))
}

fn parse_token<'a>(offset: usize, field: &str, v: &'a str) -> Result<&'a str, DecodeError> {
    if is_token(v) {
        Ok(v)
    } else {
        Err(malformed(offset, format!("{field} is not a token: {v:?}")))
    }
}

fn decode_value(offset: usize, raw: &str) -> Result<Value, DecodeError> {
    if raw.is_empty() {
        return Err(malformed(offset, "empty value"));
    }
    if raw.contains('%') {
        if !raw
            .bytes()
            .all(|b| b == b'%' || crate::model::is_token_byte(b))
        {
            return Err(malformed(
                offset,
                format!("invalid character in value {raw:?}"),
            ));
        }
        return percent_decode_str(raw)
            .decode_utf8()
            .map(|s| Value::Text(s.into_owned()))
            .map_err(|_| malformed(offset, "percent-encoded value is not UTF-8"));
    }
    match classify_plain(raw) {
        PlainKind::Int => raw
            .parse::<u64>()
            .map(Value::Int)
            .map_err(|_| malformed(offset, format!("integer exceeds 64 bits: {raw}"))),
        PlainKind::Float => raw
            .parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::Float)
            .ok_or_else(|| malformed(offset, format!("bad decimal {raw}"))),
        PlainKind::Text if is_token(raw) => Ok(Value::Text(raw.to_string())),
        PlainKind::Text => Err(malformed(
            offset,
            format!("invalid character in value {raw:?}"),
        )),
    }
}

/// Locates the `hpcmd` marker, skipping any syslog prefix. Returns the byte
/// offset of the `v=` field.
fn find_body(text: &str) -> Option<usize> {
    marker_re().find(text).map(|m| m.end() - 2)
}

/// Decodes one line, which may be a part of a split sample.
pub fn decode_line(text: &str) -> Result<Decoded, DecodeError> {
    let text = text.trim_end_matches(['\n', '\r']);
    let body_start = find_body(text).ok_or(DecodeError::NotOurs)?;
    let body = &text[body_start..];

    let mut tokens = Vec::new();
    let mut offset = body_start;
    for tok in body.split(' ') {
        if tok.is_empty() {
            return Err(malformed(
                offset,
                "empty field (fields are separated by one space)",
            ));
        }
        tokens.push((offset, tok));
        offset += tok.len() + 1;
    }
    let mut cur = Cursor {
        text,
        tokens,
        pos: 0,
    };

    let (off, v) = cur.expect("v")?;
    if v != WIRE_VERSION.to_string() {
        return Err(DecodeError::UnsupportedVersion {
            offset: off,
            version: v.to_string(),
        });
    }
    let (off, ts) = cur.expect("ts")?;
    let timestamp: i64 = parse_int(off, "ts", ts)?;
    let (off, cluster) = cur.expect("cluster")?;
    let cluster = parse_token(off, "cluster", cluster)?;
    let (off, node) = cur.expect("node")?;
    let node = parse_token(off, "node", node)?;
    let (off, src) = cur.expect("src")?;
    let source: Source = src
        .parse()
        .map_err(|_| malformed(off, format!("unknown source {src:?}")))?;

    let mut sample = MetricSample::new(timestamp, cluster, node, source);
    if cur.peek_key() == Some("skt") {
        let (off, v) = cur.expect("skt")?;
        sample.socket = Some(parse_int(off, "skt", v)?);
    }
    if cur.peek_key() == Some("job") {
        let (off, v) = cur.expect("job")?;
        sample.job = Some(JobContext::id_only(parse_token(off, "job", v)?));
    }
    let mut part = None;
    if cur.peek_key() == Some("part") {
        let (off, v) = cur.expect("part")?;
        let (i, n) = v
            .split_once(':')
            .ok_or_else(|| malformed(off, "part must be <index>:<count>"))?;
        let i: u32 = parse_int(off, "part index", i)?;
        let n: u32 = parse_int(off, "part count", n)?;
        if i == 0 || i > n || n < 2 {
            return Err(malformed(off, format!("bad part {i}:{n}")));
        }
        part = Some((i, n));
    }

    let mut job_fields: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    while let Some(&(off, token)) = cur.tokens.get(cur.pos) {
        cur.pos += 1;
        let (key, raw) = token
            .split_once('=')
            .ok_or_else(|| malformed(off, format!("expected key=value, found {token:?}")))?;
        let voff = off + key.len() + 1;
        if key.starts_with(JOB_KEY_PREFIX) {
            if !JOB_KEYS.contains(&key) {
                return Err(malformed(off, format!("unknown job field {key}")));
            }
            if job_fields.insert(key, (voff, raw)).is_some() {
                return Err(malformed(off, format!("duplicate key {key}")));
            }
            continue;
        }
        if !is_counter_name(key) {
            return Err(malformed(off, format!("invalid key {key:?}")));
        }
        let value = decode_value(voff, raw)?;
        if sample.values.insert(key.to_string(), value).is_some() {
            return Err(malformed(off, format!("duplicate key {key}")));
        }
    }

    if !job_fields.is_empty() {
        let job_off = job_fields.values().next().map(|(o, _)| *o).unwrap_or(0);
        let Some(job) = sample.job.as_mut() else {
            return Err(malformed(job_off, "job fields without job="));
        };
        if JOB_KEYS
            .iter()
            .any(|k| *k != JOB_STATE && !job_fields.contains_key(k))
        {
            return Err(malformed(job_off, "incomplete job fields"));
        }
        let text_field = |key: &str| -> Result<String, DecodeError> {
            let (off, raw) = job_fields[key];
            match decode_value(off, raw)? {
                Value::Text(s) => Ok(s),
                _ => Err(malformed(off, format!("{key} must be text"))),
            }
        };
        let int_field = |key: &str| -> Result<u32, DecodeError> {
            let (off, raw) = job_fields[key];
            parse_int(off, key, raw)
        };
        let (start_off, start_raw) = job_fields[JOB_START];
        let node_state = match job_fields.get(JOB_STATE) {
            None => NodeStateKind::Exclusive,
            Some(&(off, raw)) => raw
                .parse::<NodeStateKind>()
                .map_err(|_| malformed(off, format!("unknown node state {raw:?}")))?,
        };
        job.details = Some(JobDetails {
            user_id: text_field(JOB_USER)?,
            partition: text_field(JOB_PART)?,
            num_nodes: int_field(JOB_NODES)?,
            cores_allocated: int_field(JOB_CORES)?,
            gpus_allocated: int_field(JOB_GPUS)?,
            node_state,
            job_start: parse_int(start_off, JOB_START, start_raw)?,
        });
    }

    sample
        .validate()
        .map_err(|e| malformed(body_start, e.to_string()))?;

    Ok(match part {
        None => Decoded::Complete(sample),
        Some((index, count)) => Decoded::Part {
            index,
            count,
            sample,
        },
    })
}

/// Decodes a single self-contained line.
pub fn decode_logline(text: &str) -> Result<MetricSample, DecodeError> {
    match decode_line(text)? {
        Decoded::Complete(s) => Ok(s),
        Decoded::Part { index, count, .. } => Err(DecodeError::Continuation { index, count }),
    }
}

#[derive(Debug, Default)]
struct PendingParts {
    count: u32,
    parts: BTreeMap<u32, MetricSample>,
}

/// Joins `part=` lines back into whole samples. Incomplete groups are evicted
/// oldest-first beyond `capacity`.
#[derive(Debug)]
pub struct Reassembler {
    capacity: usize,
    pending: HashMap<(String, SampleKey), PendingParts>,
    order: VecDeque<(String, SampleKey)>,
    evicted: u64,
}

impl Default for Reassembler {
    fn default() -> Self {
        Reassembler::new(4096)
    }
}

impl Reassembler {
    pub fn new(capacity: usize) -> Self {
        Reassembler {
            capacity: capacity.max(1),
            pending: HashMap::new(),
            order: VecDeque::new(),
            evicted: 0,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Feeds one decoded line; returns the whole sample once every part of
    /// its group has arrived.
    pub fn push(&mut self, decoded: Decoded) -> Option<MetricSample> {
        let (index, count, sample) = match decoded {
            Decoded::Complete(s) => return Some(s),
            Decoded::Part {
                index,
                count,
                sample,
            } => (index, count, sample),
        };
        let id = (sample.cluster.clone(), sample.key());
        if !self.pending.contains_key(&id) {
            if self.pending.len() >= self.capacity {
                while let Some(old) = self.order.pop_front() {
                    if self.pending.remove(&old).is_some() {
                        self.evicted += 1;
                        break;
                    }
                }
            }
            self.order.push_back(id.clone());
        }
        let entry = self.pending.entry(id.clone()).or_default();
        entry.count = count;
        entry.parts.insert(index, sample);
        if entry.parts.len() as u32 != entry.count {
            return None;
        }
        let group = self.pending.remove(&id)?;
        self.order.retain(|k| k != &id);
        let mut parts = group.parts.into_values();
        let mut merged = parts.next()?;
        for p in parts {
            merged.values.extend(p.values);
        }
        Some(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_sample() -> MetricSample {
        let mut s = MetricSample::new(600, "sim", "n001", Source::CpuCore);
        s.socket = Some(0);
        s.job = Some(JobContext::id_only("j42"));
        s.values.insert("cycles".into(), Value::Int(1000));
        s.values.insert("instructions".into(), Value::Int(1500));
        s
    }

    #[test]
    fn encode_hand_built_line() {
        let lines = encode_logline(&example_sample()).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(
            lines[0].as_str(),
            "hpcmd v=1 ts=600 cluster=sim node=n001 src=cpu_core skt=0 job=j42 cycles=1000 instructions=1500"
        );
        assert_eq!(decode_logline(lines[0].as_str()).unwrap(), example_sample());
    }

    #[test]
    fn empty_payload_is_header_only() {
        let s = MetricSample::new(1200, "sim", "n002", Source::Io);
        let line = encode_logline(&s).unwrap().remove(0);
        assert_eq!(
            line.as_str(),
            "hpcmd v=1 ts=1200 cluster=sim node=n002 src=io"
        );
        assert!(decode_logline(line.as_str()).unwrap().values.is_empty());
    }

    #[test]
    fn decode_with_syslog_prefix() {
        let s = decode_logline(
            "<13>Jan 1 00:10:00 n001 hpcmd v=1 ts=600 cluster=sim node=n001 src=software mem_rss_kib=1024",
        )
        .unwrap();
        assert_eq!(s.source, Source::Software);
        assert_eq!(s.values.len(), 1);
        assert_eq!(s.get_u64("mem_rss_kib"), Some(1024));
        assert_eq!(s.timestamp, 600);
    }

    #[test]
    fn decode_rfc5424_and_tagged_prefixes() {
        let a = decode_logline(
            "<14>1 2024-01-01T00:10:00Z n001 hpcmd 77 - - hpcmd v=1 ts=600 cluster=sim node=n001 src=io",
        )
        .unwrap();
        assert_eq!(a.node, "n001");
        let b = decode_logline(
            "Jan  1 00:10:00 n001 hpcmd[77]: v=1 ts=600 cluster=sim node=n001 src=io",
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_is_not_ours() {
        assert_eq!(
            decode_logline("random noise line"),
            Err(DecodeError::NotOurs)
        );
        assert_eq!(
            decode_logline("kernel: hpcmdx v=1 ts=600"),
            Err(DecodeError::NotOurs)
        );
    }

    #[test]
    fn unknown_version() {
        let err = decode_logline("hpcmd v=2 ts=600 cluster=sim node=n001 src=io").unwrap_err();
        assert_eq!(
            err,
            DecodeError::UnsupportedVersion {
                offset: 8,
                version: "2".into()
            }
        );
    }

    #[test]
    fn truncated_line_reports_offset() {
        let full = "hpcmd v=1 ts=600 cluster=sim node=n001 src=cpu_core skt=0 cycles=1";
        let cut = &full[..48];
        let err = decode_logline(cut).unwrap_err();
        assert_eq!(err.offset(), Some(43));
        let err = decode_logline("hpcmd v=1 ts=600 cluster=sim").unwrap_err();
        assert_eq!(err.offset(), Some(28));
    }

    #[test]
    fn malformed_tokens() {
        let base = "hpcmd v=1 ts=600 cluster=sim node=n001 src=io";
        for (suffix, offset) in [
            (" novalue", 46),
            (" a=1 a=2", 50),
            (" bad-key=1", 46),
            ("  a=1", 46),
            (" a=x y", 50),
            (" a=18446744073709551616", 48),
        ] {
            let err = decode_logline(&format!("{base}{suffix}")).unwrap_err();
            assert_eq!(err.offset(), Some(offset), "{suffix:?}: {err}");
        }
    }

    #[test]
    fn numeric_looking_text_survives() {
        let mut s = MetricSample::new(600, "sim", "n1", Source::Software);
        s.values.insert("cmd".into(), Value::Text("1.5".into()));
        s.values
            .insert("path".into(), Value::Text("/a b=c%d".into()));
        s.values.insert("gauge".into(), Value::Float(1.0));
        s.values.insert("big".into(), Value::Float(1e21));
        let line = encode_logline(&s).unwrap().remove(0);
        assert!(line.as_str().contains("cmd=%31.5"));
        assert!(line.as_str().contains("gauge=1.0"));
        assert_eq!(decode_logline(line.as_str()).unwrap(), s);
    }

    #[test]
    fn job_details_round_trip() {
        let mut s = example_sample();
        s.job = Some(JobContext::with_details(
            "j42",
            JobDetails {
                user_id: "alice smith".into(),
                partition: "general".into(),
                num_nodes: 2,
                cores_allocated: 80,
                gpus_allocated: 0,
                node_state: NodeStateKind::Exclusive,
                job_start: 0,
            },
        ));
        let line = encode_logline(&s).unwrap().remove(0);
        assert!(line.as_str().contains(" job.user=alice%20smith"));
        assert_eq!(decode_logline(line.as_str()).unwrap(), s);
        let partial = line.as_str().replace(" job.gpus=0", "");
        assert!(decode_logline(&partial).is_err());
    }

    #[test]
    fn oversized_sample_splits_and_reassembles() {
        let mut s = example_sample();
        for i in 0..200 {
            s.values
                .insert(format!("counter_{i:03}"), Value::Int(u64::MAX - i));
        }
        let lines = encode_logline(&s).unwrap();
        assert!(lines.len() > 1);
        let mut r = Reassembler::default();
        let mut out = None;
        for l in lines.iter().rev() {
            assert!(l.len() <= MAX_LINE_BYTES);
            assert!(decode_logline(l.as_str()).is_err());
            out = r.push(decode_line(l.as_str()).unwrap());
        }
        assert_eq!(out.unwrap(), s);
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn single_huge_value_is_rejected() {
        let mut s = example_sample();
        s.values.insert("cmd".into(), Value::Text("x".repeat(3000)));
        assert!(matches!(
            encode_logline(&s),
            Err(EncodeError::Oversized { .. })
        ));
    }

    #[test]
    fn invalid_samples_are_rejected() {
        let mut s = example_sample();
        s.node = "n 1".into();
        assert!(encode_logline(&s).is_err());
        let mut s = example_sample();
        s.values.insert("x".into(), Value::Float(f64::NAN));
        assert!(encode_logline(&s).is_err());
    }
}
