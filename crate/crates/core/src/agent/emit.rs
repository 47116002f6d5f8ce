//! Where encoded lines go.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::UdpSocket;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use chrono::DateTime;
use serde::{Deserialize, Serialize};

fn default_syslog_socket() -> PathBuf {
    PathBuf::from("/dev/log")
}

/// Configured destination of agent output, written as a map with a `kind`
/// key, e.g. `{kind: udp_syslog, host: logs, port: 514}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmitTarget {
    Stdout,
    File {
        path: PathBuf,
    },
    UdpSyslog {
        host: String,
        port: u16,
    },
    LocalSyslogSocket {
        #[serde(default = "default_syslog_socket")]
        path: PathBuf,
    },
}

impl Default for EmitTarget {
    fn default() -> Self {
        EmitTarget::LocalSyslogSocket {
            path: default_syslog_socket(),
        }
    }
}

pub trait Emitter: Send {
    /// Sends one line. `ts` is the cycle timestamp, used for syslog framing.
    fn emit(&mut self, ts: i64, line: &str) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// RFC 3164 framing: facility user, severity info, tag `hpcmd`.
pub fn syslog_frame(ts: i64, host: &str, line: &str) -> String {
    let stamp = DateTime::from_timestamp(ts, 0)
        .map(|d| d.format("%b %e %H:%M:%S").to_string())
        .unwrap_or_else(|| "Jan  1 00:00:00".to_string());
    // The line already starts with the marker, which doubles as the tag.
    format!("<14>{stamp} {host} {line}")
}

pub struct StdoutEmitter;

impl Emitter for StdoutEmitter {
    fn emit(&mut self, _ts: i64, line: &str) -> io::Result<()> {
        let mut out = io::stdout().lock();
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()
    }
}

/// Appends plain lines to a file, reopening after errors.
pub struct FileEmitter {
    path: PathBuf,
    file: Option<File>,
}

impl FileEmitter {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileEmitter {
            path: path.into(),
            file: None,
        }
    }
}

impl Emitter for FileEmitter {
    fn emit(&mut self, _ts: i64, line: &str) -> io::Result<()> {
        if self.file.is_none() {
            self.file = Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&self.path)?,
            );
        }
        let file = self.file.as_mut().expect("opened above");
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        let res = file.write_all(&buf);
        if res.is_err() {
            self.file = None;
        }
        res
    }
}

pub struct UdpSyslogEmitter {
    socket: UdpSocket,
    dest: String,
    host: String,
}

impl UdpSyslogEmitter {
    pub fn new(host: &str, port: u16, node: &str) -> io::Result<Self> {
        Ok(UdpSyslogEmitter {
            socket: UdpSocket::bind("0.0.0.0:0")?,
            dest: format!("{host}:{port}"),
            host: node.to_string(),
        })
    }
}

impl Emitter for UdpSyslogEmitter {
    fn emit(&mut self, ts: i64, line: &str) -> io::Result<()> {
        self.socket
            .send_to(syslog_frame(ts, &self.host, line).as_bytes(), &self.dest)
            .map(|_| ())
    }
}

#[cfg(unix)]
pub struct LocalSyslogEmitter {
    socket: std::os::unix::net::UnixDatagram,
    path: PathBuf,
    host: String,
}

#[cfg(unix)]
impl LocalSyslogEmitter {
    pub fn new(path: impl Into<PathBuf>, node: &str) -> io::Result<Self> {
        Ok(LocalSyslogEmitter {
            socket: std::os::unix::net::UnixDatagram::unbound()?,
            path: path.into(),
            host: node.to_string(),
        })
    }
}

#[cfg(unix)]
impl Emitter for LocalSyslogEmitter {
    fn emit(&mut self, ts: i64, line: &str) -> io::Result<()> {
        self.socket
            .send_to(syslog_frame(ts, &self.host, line).as_bytes(), &self.path)
            .map(|_| ())
    }
}

/// Collects lines in memory. Clones share the buffer.
#[derive(Clone, Default)]
pub struct MemoryEmitter {
    lines: Arc<Mutex<Vec<String>>>,
    failing: Arc<Mutex<bool>>,
}

impl MemoryEmitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.lock().expect("emitter lock").clone()
    }

    pub fn take(&self) -> Vec<String> {
        std::mem::take(&mut *self.lines.lock().expect("emitter lock"))
    }

    /// While set, every emit fails.
    pub fn set_failing(&self, failing: bool) {
        *self.failing.lock().expect("emitter lock") = failing;
    }
}

impl Emitter for MemoryEmitter {
    fn emit(&mut self, _ts: i64, line: &str) -> io::Result<()> {
        if *self.failing.lock().expect("emitter lock") {
            return Err(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "emit target down",
            ));
        }
        self.lines
            .lock()
            .expect("emitter lock")
            .push(line.to_string());
        Ok(())
    }
}

pub fn open_emitter(target: &EmitTarget, node: &str) -> io::Result<Box<dyn Emitter>> {
    Ok(match target {
        EmitTarget::Stdout => Box::new(StdoutEmitter),
        EmitTarget::File { path } => Box::new(FileEmitter::new(path)),
        EmitTarget::UdpSyslog { host, port } => Box::new(UdpSyslogEmitter::new(host, *port, node)?),
        #[cfg(unix)]
        EmitTarget::LocalSyslogSocket { path } => Box::new(LocalSyslogEmitter::new(path, node)?),
        #[cfg(not(unix))]
        EmitTarget::LocalSyslogSocket { .. } => {
            return Err(io::Error::new(
                io::ErrorKind::Unsupported,
                "no local syslog socket",
            ))
        }
    })
}
