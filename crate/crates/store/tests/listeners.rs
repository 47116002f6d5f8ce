use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::{TcpStream, UdpSocket};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use hpcmon_store::listen::{listen_tcp, listen_udp, tail_file, LineSink, StoreSink, TailOptions};
use hpcmon_store::{Origin, QueryFilter, Store, StoreError};

#[derive(Default)]
struct Recorder(Mutex<Vec<(String, Origin)>>);

impl LineSink for Recorder {
    fn accept(&self, line: &str, origin: Origin) -> Result<(), StoreError> {
        self.0.lock().unwrap().push((line.to_string(), origin));
        Ok(())
    }
}

impl Recorder {
    fn lines(&self) -> Vec<String> {
        self.0
            .lock()
            .unwrap()
            .iter()
            .map(|(l, _)| l.clone())
            .collect()
    }

    fn wait_for(&self, n: usize) -> Vec<String> {
        let deadline = Instant::now() + Duration::from_secs(5);
        while self.0.lock().unwrap().len() < n && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
        self.lines()
    }
}

fn hpcmd(i: usize) -> String {
    format!(
        "hpcmd v=1 ts={} cluster=sim node=n001 src=io bytes_read={i}",
        600 * (i + 1)
    )
}

fn fast() -> TailOptions {
    TailOptions {
        poll: Duration::from_millis(20),
        from_start: true,
    }
}

#[test]
fn udp_ten_lines_ten_calls() {
    let rec = Arc::new(Recorder::default());
    let l = listen_udp("127.0.0.1:0", rec.clone()).unwrap();
    let tx = UdpSocket::bind("127.0.0.1:0").unwrap();
    for i in 0..10 {
        let framed = format!("<14>Jan 15 10:00:00 n001 {}", hpcmd(i));
        tx.send_to(framed.as_bytes(), l.local_addr().unwrap())
            .unwrap();
    }
    let got = rec.wait_for(10);
    l.stop();
    assert_eq!(got.len(), 10);
    assert!(rec.0.lock().unwrap().iter().all(|(_, o)| *o == Origin::Udp));
}

#[test]
fn udp_into_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RwLock::new(Store::open(dir.path()).unwrap()));
    let l = listen_udp("127.0.0.1:0", Arc::new(StoreSink(store.clone()))).unwrap();
    let tx = UdpSocket::bind("127.0.0.1:0").unwrap();
    for i in 0..10 {
        tx.send_to(hpcmd(i).as_bytes(), l.local_addr().unwrap())
            .unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while store.read().unwrap().len() < 10 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    l.stop();
    let st = store.read().unwrap();
    assert_eq!(st.query(&QueryFilter::default()).unwrap().len(), 10);
    assert!(st.stats().balanced());
}

#[test]
fn tcp_newline_framing() {
    let rec = Arc::new(Recorder::default());
    let l = listen_tcp("127.0.0.1:0", rec.clone()).unwrap();
    let mut s = TcpStream::connect(l.local_addr().unwrap()).unwrap();
    s.write_all(format!("{}\n{}", hpcmd(0), &hpcmd(1)[..10]).as_bytes())
        .unwrap();
    s.flush().unwrap();
    std::thread::sleep(Duration::from_millis(100));
    s.write_all(format!("{}\n", &hpcmd(1)[10..]).as_bytes())
        .unwrap();
    drop(s);
    let got = rec.wait_for(2);
    l.stop();
    assert_eq!(got, vec![hpcmd(0), hpcmd(1)]);
}

#[test]
fn tail_survives_rename_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hpcmd.log");
    let rec = Arc::new(Recorder::default());
    let l = tail_file(&path, rec.clone(), fast()).unwrap();

    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .unwrap();
    for i in 0..5 {
        writeln!(f, "{}", hpcmd(i)).unwrap();
    }
    rec.wait_for(5);
    // Written after the tailer's last read, right before rotation.
    for i in 5..8 {
        writeln!(f, "{}", hpcmd(i)).unwrap();
    }
    fs::rename(&path, dir.path().join("hpcmd.log.1")).unwrap();
    let mut g = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .unwrap();
    for i in 8..12 {
        writeln!(g, "{}", hpcmd(i)).unwrap();
    }
    let got = rec.wait_for(12);
    l.stop();
    assert_eq!(got, (0..12).map(hpcmd).collect::<Vec<_>>());
}

#[test]
fn tail_survives_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hpcmd.log");
    fs::write(&path, format!("{}\n{}\n", hpcmd(0), hpcmd(1))).unwrap();
    let rec = Arc::new(Recorder::default());
    let l = tail_file(&path, rec.clone(), fast()).unwrap();
    rec.wait_for(2);
    fs::write(&path, format!("{}\n", hpcmd(2))).unwrap();
    let got = rec.wait_for(3);
    l.stop();
    assert_eq!(got, vec![hpcmd(0), hpcmd(1), hpcmd(2)]);
}

#[test]
fn tail_holds_partial_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hpcmd.log");
    let line = hpcmd(0);
    fs::write(&path, &line[..20]).unwrap();
    let rec = Arc::new(Recorder::default());
    let l = tail_file(&path, rec.clone(), fast()).unwrap();
    std::thread::sleep(Duration::from_millis(150));
    assert!(rec.lines().is_empty());
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{}", &line[20..]).unwrap();
    let got = rec.wait_for(1);
    l.stop();
    assert_eq!(got, vec![line]);
}

#[test]
fn tail_from_end_skips_existing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hpcmd.log");
    fs::write(&path, format!("{}\n", hpcmd(0))).unwrap();
    let rec = Arc::new(Recorder::default());
    let opts = TailOptions {
        from_start: false,
        ..fast()
    };
    let l = tail_file(&path, rec.clone(), opts).unwrap();
    std::thread::sleep(Duration::from_millis(100));
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{}", hpcmd(1)).unwrap();
    let got = rec.wait_for(1);
    l.stop();
    assert_eq!(got, vec![hpcmd(1)]);
}

#[test]
fn bind_failure_is_an_error() {
    let held = UdpSocket::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    assert!(listen_udp(&addr, Arc::new(Recorder::default())).is_err());
}
