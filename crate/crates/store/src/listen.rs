//! Line receivers: UDP syslog, newline-framed TCP and file tailing.
//!
//! Each receiver runs on its own threads and hands every complete line to a
//! [`LineSink`] exactly once. Storage errors are retried with backoff until
//! the listener is stopped.

use std::fs::File;
use std::io::{self, ErrorKind, Read, Seek, SeekFrom};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::{Origin, SharedStore, StoreError};

const READ_TIMEOUT: Duration = Duration::from_millis(100);
const BACKOFF_START: Duration = Duration::from_millis(10);
const BACKOFF_MAX: Duration = Duration::from_secs(2);

pub trait LineSink: Send + Sync {
    fn accept(&self, line: &str, origin: Origin) -> Result<(), StoreError>;
}

/// Feeds lines into a shared store.
pub struct StoreSink(pub SharedStore);

impl LineSink for StoreSink {
    fn accept(&self, line: &str, origin: Origin) -> Result<(), StoreError> {
        let mut store = self.0.write().unwrap_or_else(|p| p.into_inner());
        store.ingest_line(line, origin).map(|_| ())
    }
}

fn deliver(sink: &dyn LineSink, line: &str, origin: Origin, stop: &AtomicBool) {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.is_empty() {
        return;
    }
    let mut wait = BACKOFF_START;
    loop {
        match sink.accept(line, origin) {
            Ok(()) => return,
            Err(e) if e.is_retriable() && !stop.load(Ordering::Relaxed) => {
                log::warn!("ingest failed, retrying in {wait:?}: {e}");
                thread::sleep(wait);
                wait = (wait * 2).min(BACKOFF_MAX);
            }
            Err(e) => {
                log::error!("dropping line: {e}");
                return;
            }
        }
    }
}

/// Splits complete lines off the front of `buf`, leaving a partial tail.
fn drain_lines(buf: &mut Vec<u8>, mut f: impl FnMut(&str)) {
    let mut start = 0;
    while let Some(pos) = buf[start..].iter().position(|&b| b == b'\n') {
        f(&String::from_utf8_lossy(&buf[start..start + pos]));
        start += pos + 1;
    }
    buf.drain(..start);
}

/// Running receiver. Dropping it stops the threads.
pub struct Listener {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    local_addr: Option<SocketAddr>,
}

impl Listener {
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    /// Flag that stops the listener when set; for signal handlers.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is set by someone else.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Receives syslog datagrams; each may hold one or more lines.
pub fn listen_udp(addr: &str, sink: Arc<dyn LineSink>) -> io::Result<Listener> {
    let socket = UdpSocket::bind(addr)?;
    socket.set_read_timeout(Some(READ_TIMEOUT))?;
    let local = socket.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let t = thread::Builder::new()
        .name("udp-listener".into())
        .spawn(move || {
            let mut buf = vec![0u8; 65536];
            while !flag.load(Ordering::Relaxed) {
                match socket.recv_from(&mut buf) {
                    Ok((n, _)) => {
                        let text = String::from_utf8_lossy(&buf[..n]);
                        for line in text.split('\n') {
                            deliver(sink.as_ref(), line, Origin::Udp, &flag);
                        }
                    }
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                    Err(e) => {
                        log::warn!("udp receive: {e}");
                        thread::sleep(READ_TIMEOUT);
                    }
                }
            }
        })?;
    Ok(Listener {
        stop,
        threads: vec![t],
        local_addr: Some(local),
    })
}

/// Accepts stream connections carrying newline-terminated lines.
pub fn listen_tcp(addr: &str, sink: Arc<dyn LineSink>) -> io::Result<Listener> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let t = thread::Builder::new()
        .name("tcp-listener".into())
        .spawn(move || {
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let (sink, flag) = (sink.clone(), flag.clone());
                        let spawned = thread::Builder::new()
                            .name(format!("tcp-{peer}"))
                            .spawn(move || serve_stream(stream, sink.as_ref(), &flag));
                        match spawned {
                            Ok(h) => conns.push(h),
                            Err(e) => log::error!("spawning connection thread: {e}"),
                        }
                        conns.retain(|h| !h.is_finished());
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(20))
                    }
                    Err(e) => {
                        log::warn!("tcp accept: {e}");
                        thread::sleep(READ_TIMEOUT);
                    }
                }
            }
            for h in conns {
                let _ = h.join();
            }
        })?;
    Ok(Listener {
        stop,
        threads: vec![t],
        local_addr: Some(local),
    })
}

fn serve_stream(mut stream: TcpStream, sink: &dyn LineSink, stop: &AtomicBool) {
    if let Err(e) = stream
        .set_nonblocking(false)
        .and_then(|_| stream.set_read_timeout(Some(READ_TIMEOUT)))
    {
        log::warn!("configuring connection: {e}");
        return;
    }
    let mut buf = Vec::new();
    let mut chunk = [0u8; 16384];
    while !stop.load(Ordering::Relaxed) {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                drain_lines(&mut buf, |l| deliver(sink, l, Origin::Socket, stop));
            }
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                ) => {}
            Err(e) => {
                log::warn!("tcp read: {e}");
                break;
            }
        }
    }
    // The peer closed the stream, so an unterminated tail is a whole line.
    if !buf.is_empty() {
        deliver(sink, &String::from_utf8_lossy(&buf), Origin::Socket, stop);
    }
}

#[derive(Debug, Clone)]
pub struct TailOptions {
    pub poll: Duration,
    /// Read existing content on the first open instead of starting at the end.
    pub from_start: bool,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions {
            poll: Duration::from_millis(200),
            from_start: true,
        }
    }
}

#[cfg(unix)]
fn file_id(meta: &std::fs::Metadata) -> (u64, u64) {
    use std::os::unix::fs::MetadataExt;
    (meta.dev(), meta.ino())
}

#[cfg(not(unix))]
fn file_id(_meta: &std::fs::Metadata) -> (u64, u64) {
    (0, 0)
}

struct Tail {
    path: PathBuf,
    file: Option<(File, (u64, u64))>,
    pos: u64,
    buf: Vec<u8>,
    first_open: bool,
    from_start: bool,
}

impl Tail {
    fn read_available(&mut self, sink: &dyn LineSink, stop: &AtomicBool) -> io::Result<()> {
        let Some((file, _)) = self.file.as_mut() else {
            return Ok(());
        };
        let mut chunk = Vec::new();
        let n = file.read_to_end(&mut chunk)?;
        self.pos += n as u64;
        self.buf.extend_from_slice(&chunk);
        drain_lines(&mut self.buf, |l| deliver(sink, l, Origin::File, stop));
        Ok(())
    }

    fn step(&mut self, sink: &dyn LineSink, stop: &AtomicBool) -> io::Result<()> {
        if self.file.is_none() {
            let mut f = match File::open(&self.path) {
                Ok(f) => f,
                Err(e) if e.kind() == ErrorKind::NotFound => return Ok(()),
                Err(e) => return Err(e),
            };
            let id = file_id(&f.metadata()?);
            self.pos = if self.first_open && !self.from_start {
                f.seek(SeekFrom::End(0))?
            } else {
                0
            };
            self.first_open = false;
            self.file = Some((f, id));
        }
        self.read_available(sink, stop)?;

        let current = match std::fs::metadata(&self.path) {
            Ok(m) => Some(m),
            Err(e) if e.kind() == ErrorKind::NotFound => None,
            Err(e) => return Err(e),
        };
        let open_id = self.file.as_ref().map(|(_, id)| *id);
        match current {
            Some(m) if Some(file_id(&m)) == open_id => {
                if m.len() < self.pos {
                    log::info!("{} truncated, reading from the start", self.path.display());
                    if !self.buf.is_empty() {
                        log::warn!("discarding {} bytes of a partial line", self.buf.len());
                        self.buf.clear();
                    }
                    if let Some((f, _)) = self.file.as_mut() {
                        f.seek(SeekFrom::Start(0))?;
                    }
                    self.pos = 0;
                    self.read_available(sink, stop)?;
                }
            }
            _ => {
                // Replaced or removed: finish the old file, then follow the path.
                self.read_available(sink, stop)?;
                if !self.buf.is_empty() {
                    let rest = String::from_utf8_lossy(&self.buf).into_owned();
                    self.buf.clear();
                    deliver(sink, &rest, Origin::File, stop);
                }
                log::info!("{} rotated, reopening", self.path.display());
                self.file = None;
                self.pos = 0;
            }
        }
        Ok(())
    }
}

/// Follows `path` across truncation and replacement. A partial last line is
/// held until its newline arrives.
pub fn tail_file(path: &Path, sink: Arc<dyn LineSink>, opts: TailOptions) -> io::Result<Listener> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let mut tail = Tail {
        path: path.to_path_buf(),
        file: None,
        pos: 0,
        buf: Vec::new(),
        first_open: true,
        from_start: opts.from_start,
    };
    let t = thread::Builder::new()
        .name("file-tail".into())
        .spawn(move || loop {
            let stopping = flag.load(Ordering::Relaxed);
            if let Err(e) = tail.step(sink.as_ref(), &flag) {
                log::warn!("tailing {}: {e}", tail.path.display());
                tail.file = None;
            }
            if stopping {
                break;
            }
            thread::sleep(opts.poll);
        })?;
    Ok(Listener {
        stop,
        threads: vec![t],
        local_addr: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drain_keeps_partial_tail() {
        let mut buf = b"a\nb\r\nc".to_vec();
        let mut got = Vec::new();
        drain_lines(&mut buf, |l| got.push(l.to_string()));
        assert_eq!(got, vec!["a", "b\r"]);
        assert_eq!(buf, b"c");
    }

    struct Flaky {
        fails: std::sync::Mutex<u32>,
        got: std::sync::Mutex<Vec<String>>,
    }

    impl LineSink for Flaky {
        fn accept(&self, line: &str, _: Origin) -> Result<(), StoreError> {
            let mut f = self.fails.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(StoreError::Io(io::Error::other("disk full")));
            }
            self.got.lock().unwrap().push(line.to_string());
            Ok(())
        }
    }

    #[test]
    fn retriable_errors_are_retried() {
        let sink = Flaky {
            fails: std::sync::Mutex::new(3),
            got: Default::default(),
        };
        deliver(&sink, "x\n", Origin::File, &AtomicBool::new(false));
        assert_eq!(*sink.got.lock().unwrap(), vec!["x"]);
    }
}
