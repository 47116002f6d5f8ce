use std::collections::BTreeMap;

use hpcmon_core::logline::{
    decode_line, encode_canonical, encode_logline, Decoded, Reassembler, MAX_LINE_BYTES,
};
use hpcmon_core::model::{JobContext, JobDetails, MetricSample, NodeStateKind, Source, Value};
use proptest::prelude::*;

fn token() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.:-]{1,12}"
}

fn counter_name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.]{0,15}".prop_filter("reserved", |s| {
        !["v", "ts", "cluster", "node", "src", "skt", "job", "part"].contains(&s.as_str())
            && !s.starts_with("job.")
    })
}

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<u64>().prop_map(Value::Int),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(Value::Float),
        (-1e6f64..1e6).prop_map(Value::Float),
        "\\PC{1,24}".prop_map(Value::Text),
        "[0-9][0-9.e-]{0,8}".prop_map(Value::Text),
    ]
}

fn details(ts: i64) -> impl Strategy<Value = JobDetails> {
    (
        token(),
        token(),
        1u32..5000,
        1u32..200_000,
        0u32..64,
        prop_oneof![
            Just(NodeStateKind::Exclusive),
            Just(NodeStateKind::Shared),
            Just(NodeStateKind::Idle)
        ],
        0..=ts,
    )
        .prop_map(
            |(
                user_id,
                partition,
                num_nodes,
                cores_allocated,
                gpus_allocated,
                node_state,
                job_start,
            )| JobDetails {
                user_id,
                partition,
                num_nodes,
                cores_allocated,
                gpus_allocated,
                node_state,
                job_start,
            },
        )
}

fn sample(max_values: usize) -> impl Strategy<Value = MetricSample> {
    (
        0i64..4_000_000_000,
        token(),
        token(),
        proptest::sample::select(Source::ALL.to_vec()),
    )
        .prop_flat_map(move |(ts, cluster, node, source)| {
            let socket = if source.per_socket() {
                (0u32..8).prop_map(Some).boxed()
            } else {
                Just(None).boxed()
            };
            let job = proptest::option::of((token(), proptest::option::of(details(ts))));
            (
                Just((ts, cluster, node, source)),
                socket,
                proptest::collection::btree_map(counter_name(), value(), 0..max_values),
                job,
            )
        })
        .prop_map(
            |((ts, cluster, node, source), socket, values, job)| MetricSample {
                timestamp: ts,
                cluster,
                node,
                source,
                socket,
                values,
                job: job.map(|(job_id, details)| JobContext { job_id, details }),
            },
        )
}

fn round_trip(s: &MetricSample) -> MetricSample {
    let lines = encode_logline(s).unwrap();
    let mut r = Reassembler::default();
    let mut out = None;
    for l in &lines {
        assert!(l.len() <= MAX_LINE_BYTES, "line of {} bytes", l.len());
        assert!(out.is_none(), "sample complete before its last part");
        out = r.push(decode_line(l.as_str()).unwrap());
    }
    assert_eq!(r.pending(), 0);
    out.expect("all parts delivered")
}

proptest! {
    #[test]
    fn decode_inverts_encode(s in sample(40)) {
        prop_assert_eq!(round_trip(&s), s);
    }

    #[test]
    fn oversized_samples_split_and_rejoin(s in sample(400)) {
        prop_assert_eq!(round_trip(&s), s);
    }

    #[test]
    fn encoding_is_canonical(s in sample(40)) {
        // Rebuild the value map in reverse insertion order.
        let mut rebuilt = s.clone();
        rebuilt.values = BTreeMap::new();
        for (k, v) in s.values.iter().rev() {
            rebuilt.values.insert(k.clone(), v.clone());
        }
        let again = round_trip(&s);
        let line = encode_canonical(&s).unwrap();
        prop_assert_eq!(&encode_canonical(&rebuilt).unwrap(), &line);
        prop_assert_eq!(&encode_canonical(&again).unwrap(), &line);
        prop_assert_eq!(encode_logline(&again).unwrap(), encode_logline(&s).unwrap());
    }

    #[test]
    fn parts_may_arrive_in_any_order(s in sample(400), seed in any::<u64>()) {
        let mut lines = encode_logline(&s).unwrap();
        let n = lines.len();
        for i in 0..n {
            lines.swap(i, (seed as usize).wrapping_add(i * 7919) % n);
        }
        let mut r = Reassembler::default();
        let got: Vec<_> = lines.iter().filter_map(|l| r.push(decode_line(l.as_str()).unwrap())).collect();
        prop_assert_eq!(got, vec![s]);
    }
}

#[test]
fn hand_built_line() {
    let mut s = MetricSample::new(600, "sim", "n001", Source::CpuCore);
    s.socket = Some(0);
    s.job = Some(JobContext::id_only("j42"));
    s.values.insert("instructions".into(), Value::Int(1500));
    s.values.insert("cycles".into(), Value::Int(1000));
    let lines = encode_logline(&s).unwrap();
    assert_eq!(lines.len(), 1);
    assert_eq!(
        lines[0].as_str(),
        "hpcmd v=1 ts=600 cluster=sim node=n001 src=cpu_core skt=0 job=j42 cycles=1000 instructions=1500"
    );
    assert_eq!(
        decode_line(lines[0].as_str()).unwrap(),
        Decoded::Complete(s)
    );
}

#[test]
fn syslog_prefix_is_tolerated() {
    let line = "<13>Jan 1 00:10:00 n001 hpcmd v=1 ts=600 cluster=sim node=n001 src=software mem_rss_kib=1024";
    let Decoded::Complete(s) = decode_line(line).unwrap() else {
        panic!("split sample")
    };
    assert_eq!(s.source, Source::Software);
    assert_eq!(s.values.len(), 1);
    assert_eq!(s.get_u64("mem_rss_kib"), Some(1024));
}

#[test]
fn text_with_separators_stays_one_token() {
    let mut s = MetricSample::new(600, "sim", "n001", Source::Software);
    s.values
        .insert("cmd".into(), Value::Text("a b=c %d".into()));
    s.values.insert("digits".into(), Value::Text("42".into()));
    let line = encode_canonical(&s).unwrap();
    assert_eq!(line.split(' ').count(), 8);
    assert_eq!(round_trip(&s), s);
}
