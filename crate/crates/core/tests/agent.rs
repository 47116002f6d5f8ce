mod common;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};

use common::*;
use hpcmon_core::agent::{
    next_deadline, resume, suspend, Clock, CycleState, MemoryEmitter, MockJob,
};
use hpcmon_core::model::{MetricSample, Source};
use proptest::prelude::*;

struct VirtualClock {
    now: Cell<i64>,
    jitter: i64,
}

impl Clock for VirtualClock {
    fn now(&self) -> i64 {
        self.now.get()
    }

    fn sleep_until(&self, t: i64) {
        self.now.set(self.now.get().max(t) + self.jitter);
    }
}

fn is_heartbeat(s: &MetricSample) -> bool {
    s.source == Source::Software && s.job.is_none() && s.get_text("state").is_some()
}

#[test]
fn exclusive_cycle_covers_every_source_within_3_kib() {
    for node_type in ["cpu", "gpu", "bigmem"] {
        let emitter = MemoryEmitter::new();
        let mut a = agent(
            config(node_type),
            "n1",
            healthy(node_type),
            vec![whole_node_job("j1", "n1", node_type)],
            &emitter,
        );
        for k in 1..=3 {
            let out = a.run_cycle(k * IV);
            assert_eq!(out.state, CycleState::Exclusive);
            let bytes: usize = out.lines.iter().map(|l| l.len() + 1).sum();
            assert!(bytes <= 3072, "{node_type}: {bytes} bytes");
            let samples = decode_all(&out.lines);
            let sources: BTreeSet<Source> = samples.iter().map(|s| s.source).collect();
            let mut want: BTreeSet<Source> = Source::ALL.into_iter().collect();
            if node_type != "gpu" {
                want.remove(&Source::Gpu);
            }
            assert_eq!(sources, want, "{node_type}");
            assert!(samples
                .iter()
                .all(|s| s.job_id() == Some("j1") && s.timestamp == k * IV));
        }
    }
}

#[test]
fn shared_node_only_sends_heartbeats() {
    let half = |id: &str| MockJob {
        nodes: BTreeMap::from([("n1".to_string(), 20)]),
        ..whole_node_job(id, "n1", "cpu")
    };
    let lines = run_node("n1", "cpu", healthy("cpu"), vec![half("a"), half("b")], 10);
    let samples = decode_all(&lines);
    assert_eq!(samples.len(), 10);
    for s in &samples {
        assert!(is_heartbeat(s), "{s:?}");
        assert_eq!(s.get_text("state"), Some("shared"));
    }
}

#[test]
fn partial_allocation_counts_as_shared() {
    let job = MockJob {
        nodes: BTreeMap::from([("n1".to_string(), 39)]),
        ..whole_node_job("a", "n1", "cpu")
    };
    let samples = decode_all(&run_node("n1", "cpu", healthy("cpu"), vec![job], 3));
    assert!(samples.iter().all(is_heartbeat));
}

#[test]
fn idle_node_and_job_boundaries() {
    let job = MockJob {
        start: 2 * IV,
        end: Some(4 * IV),
        ..whole_node_job("j1", "n1", "cpu")
    };
    let samples = decode_all(&run_node("n1", "cpu", healthy("cpu"), vec![job], 5));
    let by_ts = |ts: i64| {
        samples
            .iter()
            .filter(move |s| s.timestamp == ts)
            .collect::<Vec<_>>()
    };
    for ts in [IV, 4 * IV, 5 * IV] {
        let got = by_ts(ts);
        assert_eq!(got.len(), 1, "{ts}");
        assert_eq!(got[0].get_text("state"), Some("idle"));
    }
    for ts in [2 * IV, 3 * IV] {
        assert!(by_ts(ts).iter().all(|s| s.job_id() == Some("j1")), "{ts}");
    }
}

#[test]
fn suspend_flag_gates_collection() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flags/suspend");
    let cfg = hpcmon_core::agent::AgentConfig {
        suspend_flag_path: flag.clone(),
        ..config("cpu")
    };
    let emitter = MemoryEmitter::new();
    let mut a = agent(
        cfg,
        "n1",
        healthy("cpu"),
        vec![whole_node_job("j1", "n1", "cpu")],
        &emitter,
    );

    suspend(&flag).unwrap();
    let out = a.run_cycle(IV);
    assert_eq!(out.state, CycleState::Suspended);
    let samples = decode_all(&out.lines);
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].get_text("state"), Some("suspended"));

    resume(&flag).unwrap();
    resume(&flag).unwrap();
    let out = a.run_cycle(2 * IV);
    assert_eq!(out.state, CycleState::Exclusive);
    assert!(decode_all(&out.lines)
        .iter()
        .all(|s| s.job_id() == Some("j1")));
}

#[test]
fn retry_buffer_is_bounded_and_drains() {
    let emitter = MemoryEmitter::new();
    let mut a = agent(
        config("cpu"),
        "n1",
        healthy("cpu"),
        vec![whole_node_job("j1", "n1", "cpu")],
        &emitter,
    );
    emitter.set_failing(true);
    let mut last = None;
    for k in 1..=200 {
        let out = a.run_cycle(k * IV);
        assert!(out.buffered <= 1000);
        assert_eq!(out.delivered, 0);
        last = Some(out);
    }
    let last = last.unwrap();
    assert_eq!(last.buffered, 1000);
    assert!(last.dropped_total > 0);
    emitter.set_failing(false);
    let out = a.run_cycle(201 * IV);
    assert_eq!(out.buffered, 0);
    assert_eq!(out.delivered, 1000 + out.lines.len());
    // The newest buffered lines survive, in order.
    let got = decode_all(&emitter.lines());
    let ts: Vec<i64> = got.iter().map(|s| s.timestamp).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*ts.last().unwrap(), 201 * IV);
}

fn fleet_deadlines(starts: &[i64], jitter: i64, cycles: usize) -> Vec<Vec<i64>> {
    starts
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let node = format!("n{i:03}");
            let emitter = MemoryEmitter::new();
            let mut a = agent(
                config("cpu"),
                &node,
                healthy("cpu"),
                vec![whole_node_job("j", &node, "cpu")],
                &emitter,
            );
            let clock = VirtualClock {
                now: Cell::new(start),
                jitter,
            };
            let outs = a.run_loop(&clock, Some(cycles));
            let emitted: BTreeSet<i64> = decode_all(&emitter.lines())
                .iter()
                .map(|s| s.timestamp)
                .collect();
            let deadlines: Vec<i64> = outs.iter().map(|o| o.deadline).collect();
            assert_eq!(emitted, deadlines.iter().copied().collect());
            deadlines
        })
        .collect()
}

const BASE: i64 = 1_700_000_400;

#[test]
fn fifty_agents_share_every_deadline() {
    let per_node = fleet_deadlines(&[BASE; 50], 0, 4);
    let want: Vec<i64> = (1..=4).map(|k| BASE + k * IV).collect();
    assert!(per_node.iter().all(|d| *d == want));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn start_offsets_do_not_break_alignment(offsets in proptest::collection::vec(1i64..IV, 50), jitter in 0i64..30) {
        let starts: Vec<i64> = offsets.iter().map(|o| BASE + o).collect();
        let per_node = fleet_deadlines(&starts, jitter, 3);
        let want: Vec<i64> = (1..=3).map(|k| BASE + k * IV).collect();
        for d in per_node {
            prop_assert_eq!(&d, &want);
        }
    }

    #[test]
    fn deadlines_are_the_next_aligned_instant(now in -1_000_000_000i64..4_000_000_000, iv in 1u64..86_400) {
        let d = next_deadline(now, iv);
        prop_assert!(d > now && d - now <= iv as i64);
        prop_assert_eq!(d.rem_euclid(iv as i64), 0);
    }
}
