//! On-disk layout.
//!
//! ```text
//! <data-dir>/FORMAT                 "hpcmon-store 1"
//! <data-dir>/MANIFEST               one line per segment
//! <data-dir>/segments/seg-NNNNNN.log
//! ```
//!
//! A segment line is `<ingest_time> <origin> <canonical hpcmd line>`. Segments
//! are append-only; a new one starts once the current one passes the size
//! limit. MANIFEST lines read
//! `segment seg-000001.log records=<n> bytes=<n> sha256=<hex>` and are
//! rewritten on every flush.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::StoreError;

pub const FORMAT_FILE: &str = "FORMAT";
pub const MANIFEST_FILE: &str = "MANIFEST";
pub const SEGMENT_DIR: &str = "segments";
pub const FORMAT_LINE: &str = "hpcmon-store 1";
pub const DEFAULT_SEGMENT_LIMIT: u64 = 64 * 1024 * 1024;

pub fn segment_name(n: u32) -> String {
    format!("seg-{n:06}.log")
}

fn segment_number(name: &str) -> Option<u32> {
    name.strip_prefix("seg-")?
        .strip_suffix(".log")?
        .parse()
        .ok()
}

/// Segment files in `dir`, in order.
pub fn list_segments(dir: &Path) -> io::Result<Vec<(u32, PathBuf)>> {
    let seg_dir = dir.join(SEGMENT_DIR);
    let mut out = Vec::new();
    if !seg_dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&seg_dir)? {
        let entry = entry?;
        if let Some(n) = entry.file_name().to_str().and_then(segment_number) {
            out.push((n, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!(
            "segment {} records={} bytes={} sha256={}",
            self.name, self.records, self.bytes, self.sha256
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, StoreError> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.is_empty() || line == FORMAT_LINE {
            continue;
        }
        let bad = || StoreError::Corrupt(format!("MANIFEST line {}: {line:?}", no + 1));
        let mut it = line.split(' ');
        if it.next() != Some("segment") {
            return Err(bad());
        }
        let name = it.next().ok_or_else(bad)?.to_string();
        let mut field = |key: &str| -> Result<String, StoreError> {
            it.next()
                .and_then(|t| t.strip_prefix(key))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let records = field("records=")?.parse().map_err(|_| bad())?;
        let bytes = field("bytes=")?.parse().map_err(|_| bad())?;
        let sha256 = field("sha256=")?;
        out.push(ManifestEntry {
            name,
            records,
            bytes,
            sha256,
        });
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> io::Result<()> {
    let mut text = String::new();
    text.push_str(FORMAT_LINE);
    text.push('\n');
    for e in entries {
        text.push_str(&e.line());
        text.push('\n');
    }
    let tmp = dir.join("MANIFEST.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, dir.join(MANIFEST_FILE))
}

/// Read side of one segment: complete lines past the last position.
#[derive(Clone)]
pub struct SegmentState {
    pub number: u32,
    pub path: PathBuf,
    pub offset: u64,
    pub records: u64,
    pub hasher: Sha256,
}

impl SegmentState {
    pub fn new(number: u32, path: PathBuf) -> Self {
        SegmentState {
            number,
            path,
            offset: 0,
            records: 0,
            hasher: Sha256::new(),
        }
    }

    pub fn manifest_entry(&self) -> ManifestEntry {
        ManifestEntry {
            name: segment_name(self.number),
            records: self.records,
            bytes: self.offset,
            sha256: hex::encode(self.hasher.clone().finalize()),
        }
    }

    /// Reads complete lines appended since the last call. Returns the lines
    /// and the length of a trailing partial line, if any.
    pub fn read_new(&mut self) -> io::Result<(Vec<String>, u64)> {
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.offset))?;
        let mut reader = BufReader::new(f);
        let mut lines = Vec::new();
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                return Ok((lines, 0));
            }
            if buf.last() != Some(&b'\n') {
                return Ok((lines, n as u64));
            }
            self.hasher.update(&buf);
            self.offset += n as u64;
            self.records += 1;
            let text = String::from_utf8(buf[..n - 1].to_vec())
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            lines.push(text);
        }
    }
}

/// Append side of the current segment.
pub struct SegmentWriter {
    out: BufWriter<File>,
}

impl SegmentWriter {
    /// Opens for append, cutting off a partial trailing line left by a crash.
    pub fn open(path: &Path, valid_len: u64) -> io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(path)?;
        if file.metadata()?.len() != valid_len {
            log::warn!(
                "truncating {} to {valid_len} bytes (partial trailing line)",
                path.display()
            );
            file.set_len(valid_len)?;
        }
        let mut file = file;
        file.seek(SeekFrom::End(0))?;
        Ok(SegmentWriter {
            out: BufWriter::with_capacity(1 << 16, file),
        })
    }

    pub fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.out.write_all(line)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

/// SHA-256 over every regular file below `dir`, relative paths included.
/// Used to check that a reader left the directory untouched.
pub fn dir_checksum(dir: &Path) -> io::Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).unwrap_or(&path).to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        buf.clear();
        File::open(dir.join(&rel))?.read_to_end(&mut buf)?;
        h.update((buf.len() as u64).to_le_bytes());
        h.update(&buf);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let e = ManifestEntry {
            name: segment_name(3),
            records: 10,
            bytes: 1234,
            sha256: "ab".repeat(32),
        };
        let text = format!("{FORMAT_LINE}\n{}\n", e.line());
        assert_eq!(parse_manifest(&text).unwrap(), vec![e]);
        assert!(parse_manifest("segment x records=1").is_err());
    }

    #[test]
    fn read_new_holds_partial_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(segment_name(1));
        fs::write(&path, "a\nb\npart").unwrap();
        let mut s = SegmentState::new(1, path.clone());
        let (lines, partial) = s.read_new().unwrap();
        assert_eq!(lines, vec!["a", "b"]);
        assert_eq!((s.offset, partial), (4, 4));
        fs::write(&path, "a\nb\npartial\n").unwrap();
        assert_eq!(s.read_new().unwrap().0, vec!["partial"]);
        assert_eq!(s.records, 3);
    }

    #[test]
    fn segment_names_sort() {
        assert_eq!(segment_name(12), "seg-000012.log");
        assert_eq!(segment_number("seg-000012.log"), Some(12));
        assert_eq!(segment_number("seg-x.log"), None);
    }
}
