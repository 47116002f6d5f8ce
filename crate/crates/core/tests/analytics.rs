mod common;

use std::collections::BTreeMap;

use common::*;
use hpcmon_core::analytics::{
    band, counter_delta, job_summary, median, roofline_point, run_detectors, Detector,
    DetectorParams, Point, Severity,
};
use hpcmon_core::sampler::Phase;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn findings(node_type: &str, phase: Phase, cycles: usize) -> Vec<Detector> {
    let (tl, _) = job_fixture(node_type, phase, cycles);
    run_detectors(&tl, &catalog(), &DetectorParams::default())
        .into_iter()
        .map(|f| f.detector)
        .collect()
}

#[test]
fn constant_rate_job_derives_closed_form_values() {
    let (tl, entry) = job_fixture("cpu", healthy("cpu"), 6);
    // Six samples per socket give five derived intervals.
    assert_eq!(tl.derived.len(), 2 * 5);
    for d in &tl.derived {
        assert!(rel(d.gflops, 1.0) < 1e-9, "{d:?}");
        assert!(rel(d.bw_gbs, 64.0) < 1e-9, "{d:?}");
        assert!(rel(d.intensity.unwrap(), 0.015625) < 1e-9, "{d:?}");
        assert!(rel(d.ipc.unwrap(), 1.0) < 1e-9, "{d:?}");
    }
    let p = roofline_point(&tl, &entry).unwrap();
    assert!(rel(p.intensity_avg, 0.015625) < 1e-9);
    assert!(rel(p.gflops_avg, 1.0) < 1e-9);
    assert!(rel(p.gflops_avg / p.bw_avg, p.intensity_avg) < 1e-9);

    let s = job_summary(&tl, Some(&entry), &catalog(), &DetectorParams::default());
    for m in ["gflops", "bw_gbs"] {
        let st = &s.metrics[m];
        assert_eq!(st.avg, st.max, "{m}");
    }
}

#[test]
fn healthy_job_raises_nothing() {
    assert!(findings("gpu", healthy("gpu"), 6).is_empty());
    assert!(findings(
        "bigmem",
        Phase {
            rss_kib: 600 << 20,
            ..healthy("bigmem")
        },
        6
    )
    .is_empty());
}

#[test]
fn hanging_job_is_flagged_once() {
    let idle = Phase {
        busy_cores: 40,
        gpu_util_pct: vec![50; 2],
        ..Phase::default()
    };
    let (tl, _) = job_fixture(
        "gpu",
        Phase {
            gpu_mem_used_mib: vec![4000; 2],
            ..idle
        },
        6,
    );
    let f = run_detectors(&tl, &catalog(), &DetectorParams::default());
    assert_eq!(f.len(), 1, "{f:?}");
    assert_eq!(f[0].detector, Detector::Hanging);
    assert_eq!(f[0].severity, Severity::Warn);
    assert_eq!(f[0].evidence["intervals"], 5.0);
    for k in ["gflops_floor", "ipc_floor", "consecutive"] {
        assert!(f[0].evidence.contains_key(k), "{k}");
    }
}

#[test]
fn hanging_needs_three_intervals() {
    let idle = Phase {
        busy_cores: 40,
        ..Phase::default()
    };
    // Three samples give two intervals.
    assert!(findings("cpu", idle.clone(), 3).is_empty());
    assert_eq!(findings("cpu", idle, 4), vec![Detector::Hanging]);
}

#[test]
fn hanging_floor_is_strict() {
    // 1e7 scalar double per second is exactly the 0.01 GFLOP/s floor.
    let at_floor = Phase {
        fp_events_per_s: BTreeMap::from([("fp_scalar_double".to_string(), 1e7)]),
        busy_cores: 40,
        ..Phase::default()
    };
    assert!(findings("cpu", at_floor, 6).is_empty());
    let below = Phase {
        fp_events_per_s: BTreeMap::from([("fp_scalar_double".to_string(), 0.9e7)]),
        busy_cores: 40,
        ..Phase::default()
    };
    assert_eq!(findings("cpu", below, 6), vec![Detector::Hanging]);
}

#[test]
fn unused_gpus() {
    let base = healthy("gpu");
    let idle = Phase {
        gpu_util_pct: vec![0, 0],
        gpu_mem_used_mib: vec![0, 0],
        ..base.clone()
    };
    assert_eq!(findings("gpu", idle, 4), vec![Detector::GpuUnused]);
    // Either floor reached keeps the GPU counted as used.
    let util_at = Phase {
        gpu_util_pct: vec![1, 1],
        gpu_mem_used_mib: vec![0, 0],
        ..base.clone()
    };
    assert!(findings("gpu", util_at, 4).is_empty());
    let mem_at = Phase {
        gpu_util_pct: vec![0, 0],
        gpu_mem_used_mib: vec![256, 256],
        ..base.clone()
    };
    assert!(findings("gpu", mem_at, 4).is_empty());
    let mem_below = Phase {
        gpu_util_pct: vec![0, 0],
        gpu_mem_used_mib: vec![255, 255],
        ..base
    };
    assert_eq!(findings("gpu", mem_below, 4), vec![Detector::GpuUnused]);
}

#[test]
fn unused_large_memory() {
    let base = healthy("bigmem");
    // 0.25 * 192 GiB = 48 GiB.
    let at = 48u64 << 20;
    assert!(findings(
        "bigmem",
        Phase {
            rss_kib: at,
            ..base.clone()
        },
        4
    )
    .is_empty());
    let f = {
        let (tl, _) = job_fixture(
            "bigmem",
            Phase {
                rss_kib: at - 1,
                ..base.clone()
            },
            4,
        );
        run_detectors(&tl, &catalog(), &DetectorParams::default())
    };
    assert_eq!(f.len(), 1, "{f:?}");
    assert_eq!(f[0].detector, Detector::MemUnused);
    assert_eq!(f[0].severity, Severity::Info);
    assert_eq!(f[0].evidence["threshold_kib"], at as f64);
    // Standard nodes are never flagged for memory.
    assert!(findings(
        "cpu",
        Phase {
            rss_kib: 1024,
            ..healthy("cpu")
        },
        4
    )
    .is_empty());
}

#[test]
fn few_busy_cores() {
    let base = healthy("cpu");
    assert!(findings(
        "cpu",
        Phase {
            busy_cores: 20,
            ..base.clone()
        },
        4
    )
    .is_empty());
    let f = {
        let (tl, _) = job_fixture(
            "cpu",
            Phase {
                busy_cores: 19,
                ..base
            },
            4,
        );
        run_detectors(&tl, &catalog(), &DetectorParams::default())
    };
    assert_eq!(f.len(), 1, "{f:?}");
    assert_eq!(f[0].detector, Detector::LowCores);
    assert_eq!(f[0].evidence["max_busy_cores"], 19.0);
}

#[test]
fn gpu_floor_is_monotone() {
    let (tl, _) = job_fixture(
        "gpu",
        Phase {
            gpu_util_pct: vec![3, 40],
            gpu_mem_used_mib: vec![0, 0],
            ..healthy("gpu")
        },
        4,
    );
    let count = |floor: f64| {
        let p = DetectorParams {
            gpu_util_floor: floor,
            ..DetectorParams::default()
        };
        run_detectors(&tl, &catalog(), &p)
            .iter()
            .filter(|f| f.detector == Detector::GpuUnused)
            .count()
    };
    let mut last = 0;
    for floor in [0.0, 1.0, 3.0, 3.5, 10.0, 40.0, 41.0, 100.0] {
        let n = count(floor);
        assert!(n >= last, "floor {floor}: {n} < {last}");
        last = n;
    }
    assert!(last > 0);
}

#[test]
fn one_derived_point_per_sample_pair() {
    let (tl, _) = job_fixture("cpu", healthy("cpu"), 7);
    for (node, socket) in [("n1", 0), ("n1", 1)] {
        assert_eq!(tl.socket_series(node, socket).count(), 6);
    }
    assert!(tl.gaps.is_empty());
}

fn brute(series: &[Vec<Point>]) -> BTreeMap<i64, (f64, f64, f64, usize)> {
    let mut at: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for s in series {
        for p in s {
            at.entry(p.ts).or_default().push(p.value);
        }
    }
    at.into_iter()
        .map(|(ts, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            };
            (ts, (v[0], med, v[n - 1], n))
        })
        .collect()
}

fn series_set() -> impl Strategy<Value = Vec<Vec<Point>>> {
    proptest::collection::vec(
        proptest::collection::btree_map(0i64..50, -1e3f64..1e3, 0..50).prop_map(|m| {
            m.into_iter()
                .map(|(t, value)| Point {
                    ts: t * 600,
                    value,
                    dt: 600.0,
                })
                .collect()
        }),
        1..=20,
    )
}

proptest! {
    #[test]
    fn band_matches_sorting(series in series_set()) {
        let got = band(series.iter().map(Vec::as_slice));
        let want = brute(&series);
        prop_assert_eq!(got.len(), want.len());
        for b in got {
            let (lo, med, hi, n) = want[&b.ts];
            prop_assert_eq!((b.min, b.median, b.max, b.count), (lo, med, hi, n));
            prop_assert!(b.min <= b.median && b.median <= b.max);
        }
    }

    #[test]
    fn counter_delta_handles_wrap(prev in any::<u64>(), step in 0u64..1 << 40, width in prop_oneof![Just(48u32), Just(64u32)]) {
        let modulus: u128 = 1u128 << width;
        let prev = (prev as u128 % modulus) as u64;
        let curr = ((prev as u128 + step as u128) % modulus) as u64;
        prop_assert_eq!(counter_delta(prev, curr, width, Some(step.max(1))), Some(step));
        if curr < prev {
            // Without a delta history a decrease reads as a reset.
            prop_assert_eq!(counter_delta(prev, curr, width, None), None);
            // A wrapped delta far above the history is a reset too.
            prop_assert_eq!(counter_delta(prev, curr, width, Some(step / 8)), None);
        }
    }
}

#[test]
fn even_count_median_averages_the_middle_pair() {
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
}
