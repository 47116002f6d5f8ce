use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use hpcmon_core::logline::decode_logline;
use hpcmon_core::model::{MachineCatalog, Source};
use hpcmon_store::{JobFilter, Store};

fn hpcmon() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hpcmon"));
    for var in [
        "HPCMON_CONFIG",
        "HPCMON_DATA_DIR",
        "HPCMON_AUTH_FILE",
        "HPCMON_CATALOG",
        "HPCMON_DETECTORS",
    ] {
        c.env_remove(var);
    }
    c.env("RUST_LOG", "warn");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../config")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    hpcmon().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulated_store(dir: &Path, nodes: &str, cycles: &str, seed: &str) -> Output {
    run(&[
        "simulate",
        "--nodes",
        nodes,
        "--cycles",
        cycles,
        "--seed",
        seed,
        "--threads",
        "2",
        "--data-dir",
        p(dir),
        "--json",
    ])
}

/// Spawns a long-running command and returns it with its first stdout line
/// that starts with `prefix`.
#[allow(clippy::zombie_processes)] // callers terminate the child
fn spawn_until(cmd: &mut Command, prefix: &str) -> (Child, String) {
    let mut child = cmd
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    loop {
        line.clear();
        if out.read_line(&mut line).unwrap() == 0 {
            let status = child.wait().unwrap();
            panic!("exited with {status} before printing {prefix:?}");
        }
        if let Some(rest) = line.trim().strip_prefix(prefix) {
            let rest = rest.to_string();
            std::thread::spawn(move || std::io::copy(&mut out, &mut std::io::sink()));
            return (child, rest);
        }
    }
}

fn terminate(mut child: Child) -> std::process::ExitStatus {
    let pid = child.id().to_string();
    assert!(Command::new("kill")
        .args(["-TERM", &pid])
        .status()
        .unwrap()
        .success());
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            return status;
        }
        assert!(Instant::now() < deadline, "process ignored SIGTERM");
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn http_get(addr: &str, path: &str, token: Option<&str>) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    let auth = token
        .map(|t| format!("Authorization: Bearer {t}\r\n"))
        .unwrap_or_default();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\n{auth}Connection: close\r\n\r\n"
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp.split(' ').nth(1).unwrap().parse().unwrap();
    let body = resp
        .split_once("\r\n\r\n")
        .map(|(_, b)| b.to_string())
        .unwrap_or_default();
    (status, body)
}

#[test]
fn agent_once_prints_one_cycle() {
    let o = run(&[
        "agent",
        "--config",
        p(&config("agent-mock.yml")),
        "--node",
        "node01",
        "--simulate",
        p(&config("profile-busy.yml")),
        "--once",
        "--now",
        "600",
    ]);
    assert!(o.status.success(), "{o:?}");
    let samples: Vec<_> = stdout(&o)
        .lines()
        .map(|l| decode_logline(l).unwrap())
        .collect();
    assert!(samples
        .iter()
        .all(|s| s.timestamp == 600 && s.job_id() == Some("1001")));
    let sources: std::collections::BTreeSet<Source> = samples.iter().map(|s| s.source).collect();
    assert_eq!(sources.len(), 5, "{sources:?}");
    assert!(stdout(&o).len() <= 3072);

    // node02 holds part of a job only.
    let o = run(&[
        "agent",
        "--config",
        p(&config("agent-mock.yml")),
        "--node",
        "node02",
        "--simulate",
        p(&config("profile-busy.yml")),
        "--cycles",
        "10",
        "--now",
        "600",
    ]);
    assert!(o.status.success());
    let lines: Vec<_> = stdout(&o)
        .lines()
        .map(|l| decode_logline(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 10);
    assert!(lines
        .iter()
        .all(|s| s.job.is_none() && s.get_text("state") == Some("shared")));
}

#[test]
fn agent_configuration_errors_exit_2() {
    let o = run(&["agent", "--config", "/nonexistent/agent.yml", "--once"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("agent.yml");
    std::fs::write(&bad, "interval_s: 600\ncluster: x\nbogus: 1\n").unwrap();
    assert_eq!(
        run(&["agent", "--config", p(&bad), "--once"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["agent", "--node-type", "quantum", "--once"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["agent", "--frobnicate"]).status.code(), Some(2));
}

#[test]
fn suspend_and_resume_toggle_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("suspend");
    let cfg = dir.path().join("agent.yml");
    std::fs::write(
        &cfg,
        format!(
            "cluster: demo\nmachine_spec_ref: cpu\nemit_target: {{kind: stdout}}\nbatch_adapter: mock\nmock_jobs: {}\nsuspend_flag_path: {}\n",
            config("mock-jobs.yml").display(),
            flag.display()
        ),
    )
    .unwrap();
    let cycle = || {
        let o = run(&[
            "agent",
            "--config",
            p(&cfg),
            "--node",
            "node01",
            "--simulate",
            p(&config("profile-busy.yml")),
            "--once",
            "--now",
            "1200",
        ]);
        assert!(o.status.success());
        stdout(&o)
            .lines()
            .map(|l| decode_logline(l).unwrap())
            .collect::<Vec<_>>()
    };
    assert!(run(&["suspend", "--config", p(&cfg)]).status.success());
    assert!(flag.exists());
    let s = cycle();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].get_text("state"), Some("suspended"));
    assert!(run(&["resume", "--flag", p(&flag)]).status.success());
    assert!(!flag.exists());
    assert!(cycle().len() > 1);
}

#[test]
fn simulate_fills_a_store_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = simulated_store(a.path(), "20", "144", "7");
    assert!(o.status.success(), "{o:?}");
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["nodes"], 20);
    assert_eq!(summary["cycles"], 144);
    assert!(summary["volume"]["max_node_cycle_bytes"].as_u64().unwrap() <= 3072);
    let stored = summary["stored"].as_u64().unwrap();
    assert!(stored > 0);
    let store = Store::open_read_only(a.path()).unwrap();
    assert_eq!(store.len() as u64, stored);

    assert!(simulated_store(b.path(), "20", "144", "7").status.success());
    let manifest = |d: &Path| std::fs::read(d.join("MANIFEST")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    assert_eq!(
        hpcmon_store::dir_checksum(a.path()).unwrap(),
        hpcmon_store::dir_checksum(b.path()).unwrap()
    );

    // A store is never filled twice.
    assert_eq!(
        simulated_store(a.path(), "20", "1", "7").status.code(),
        Some(2)
    );
    assert_eq!(run(&["simulate", "--nodes", "0"]).status.code(), Some(2));
    assert_eq!(run(&["simulate", "--cycles", "0"]).status.code(), Some(2));
}

#[test]
fn report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulated_store(dir.path(), "4", "24", "3").status.success());
    let store = Store::open_read_only(dir.path()).unwrap();
    let jobs = store
        .list_jobs(&JobFilter::default(), &MachineCatalog::builtin())
        .unwrap();
    let job = &jobs[0].job_id;
    let out = tempfile::tempdir().unwrap();
    let render = |name: &str| {
        let path = out.path().join(name);
        let o = run(&[
            "report",
            job,
            "--data-dir",
            p(dir.path()),
            "--out",
            p(&path),
            "--timestamp",
            "1704100000",
        ]);
        assert!(o.status.success(), "{o:?}");
        assert_eq!(stdout(&o).trim(), p(&path));
        std::fs::read(path).unwrap()
    };
    let first = render("a.html");
    assert_eq!(first, render("b.html"));
    let html = String::from_utf8(first).unwrap();
    assert!(html.contains(job.as_str()));
    assert!(
        !html.contains("http://") && !html.contains("https://") && !html.contains("<script src")
    );

    let o = run(&[
        "report",
        "no-such-job",
        "--data-dir",
        p(dir.path()),
        "--out",
        p(&out.path().join("x.html")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.path().join("x.html").exists());
}

#[test]
fn volume_projection() {
    let o = run(&[
        "volume",
        "--nodes",
        "4190",
        "--bytes-per-node",
        "3KiB",
        "--json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["bytes_per_sample"], 12_871_680);
    assert!((v["mib_per_sample"].as_f64().unwrap() - 12.275).abs() < 1e-3);
    assert!((v["gib_per_day"].as_f64().unwrap() - 1.726).abs() < 1e-3);
    let o = run(&[
        "volume",
        "--nodes",
        "0",
        "--bytes-per-node",
        "3072",
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["bytes_per_day"], 0.0);
    assert_eq!(
        run(&["volume", "--nodes", "1", "--bytes-per-node", "3 parsecs"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn serve_answers_until_terminated() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulated_store(dir.path(), "3", "12", "5").status.success());
    let before = hpcmon_store::dir_checksum(dir.path()).unwrap();
    let (child, addr) = spawn_until(
        hpcmon().args([
            "serve",
            "--listen",
            "127.0.0.1:0",
            "--data-dir",
            p(dir.path()),
            "--auth-file",
            p(&config("auth.yml")),
            "--detectors",
            p(&config("detectors.yml")),
        ]),
        "listening on http://",
    );
    let (status, body) = http_get(&addr, "/api/jobs", Some("change-me-ops"));
    assert_eq!(status, 200, "{body}");
    let page: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert!(page["total"].as_u64().unwrap() > 0, "{page}");
    assert_eq!(http_get(&addr, "/api/jobs", None).0, 401);
    assert_eq!(http_get(&addr, "/api/jobs", Some("change-me-alice")).0, 403);
    assert!(terminate(child).success());
    assert_eq!(hpcmon_store::dir_checksum(dir.path()).unwrap(), before);
}

#[test]
fn serve_configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let auth = dir.path().join("auth.yml");
    std::fs::write(&auth, "users: [{name: a, token: t}]\n").unwrap();
    let missing = dir.path().join("nope");
    let o = run(&[
        "serve",
        "--data-dir",
        p(&missing),
        "--auth-file",
        p(&config("auth.yml")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "serve",
        "--listen",
        "127.0.0.1:0",
        "--data-dir",
        p(dir.path()),
        "--auth-file",
        p(&auth),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_over_tcp_until_terminated() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("store");
    let (child, addr) = spawn_until(
        hpcmon().args([
            "ingest",
            "--data-dir",
            p(&data),
            "--tcp",
            "127.0.0.1:0",
            "--flush-secs",
            "0.2",
        ]),
        "listening tcp ",
    );
    let o = run(&[
        "agent",
        "--config",
        p(&config("agent-mock.yml")),
        "--node",
        "node01",
        "--simulate",
        p(&config("profile-busy.yml")),
        "--cycles",
        "3",
        "--now",
        "600",
    ]);
    let lines = stdout(&o);
    let count = lines.lines().count();
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(lines.as_bytes()).unwrap();
    s.write_all(lines.as_bytes()).unwrap();
    s.write_all(b"not a metric line\n").unwrap();
    drop(s);
    std::thread::sleep(Duration::from_millis(500));
    assert!(terminate(child).success());

    let store = Store::open_read_only(&data).unwrap();
    assert_eq!(store.len(), count);
    assert!(store.has_job("1001"));
}

#[test]
fn ingest_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["ingest", "--data-dir", p(dir.path())]).status.code(),
        Some(2)
    );
    let o = run(&[
        "ingest",
        "--data-dir",
        p(dir.path()),
        "--udp",
        "127.0.0.1:99999",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
