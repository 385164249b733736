use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use meshnoc::cannon::{self, Mode};
use meshnoc::perf::{
    self, calibrate, estimate_time, mflops, BenchmarkReport, CalibrationPoint, CostParams, FreeParams, Measurement,
    ModelError,
};
use meshnoc::{Device, DeviceConfig, TrafficStats};
use proptest::prelude::*;

fn stats(mode: Mode, n: usize) -> TrafficStats {
    // counters are seed-independent; cache them since debug builds simulate slowly
    static CACHE: OnceLock<Mutex<HashMap<(Mode, usize), TrafficStats>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(st) = cache.lock().unwrap().get(&(mode, n)) {
        return *st;
    }
    let mut dev = Device::new(DeviceConfig::default()).unwrap();
    let (a, b) = cannon::seeded_inputs(n, 42);
    let st = cannon::run_cannon(&mut dev, mode, n, 4, &a, &b)
        .unwrap()
        .record
        .stats
        .aggregate;
    cache.lock().unwrap().insert((mode, n), st);
    st
}

fn model_mflops(st: &TrafficStats, params: &CostParams) -> f64 {
    mflops(st.flops, estimate_time(st, params, 16).unwrap())
}

fn points(params_local: Option<f64>) -> ([CalibrationPoint; 2], CostParams) {
    let mut params = CostParams::default();
    if let Some(l) = params_local {
        params.local_word_cost_cycles = l;
    }
    let pt = |n, target_mflops| CalibrationPoint {
        stats: stats(Mode::Reference, n),
        pes: 16,
        target_mflops,
    };
    ([pt(128, 794.0), pt(32, 218.0)], params)
}

#[test]
fn defaults_are_the_calibrated_fit() {
    let (pts, base) = points(None);
    let fitted = calibrate(&base, &pts, FreeParams::GlobalAndLocal).unwrap();
    let d = CostParams::default();
    assert!((fitted.global_word_cost_cycles / d.global_word_cost_cycles - 1.0).abs() < 1e-12);
    assert!((fitted.local_word_cost_cycles / d.local_word_cost_cycles - 1.0).abs() < 1e-12);
    assert_eq!(fitted.round_overhead_cycles, d.round_overhead_cycles);
}

#[test]
fn fit_without_a_local_term_needs_negative_overhead() {
    let (pts, base) = points(Some(0.0));
    match calibrate(&base, &pts, FreeParams::GlobalAndRound).unwrap_err() {
        ModelError::NonPositive {
            second_value,
            first_value,
            ..
        } => {
            assert!(first_value > 0.0);
            assert!(second_value < 0.0, "overhead {second_value}");
        }
        other => panic!("expected NonPositive, got {other:?}"),
    }
}

#[test]
fn overhead_fit_with_local_term_recovers_the_fixed_overhead() {
    // fitting (global, round) with the calibrated local cost held lands back on 1000 cycles
    let (pts, base) = points(None);
    let fitted = calibrate(&base, &pts, FreeParams::GlobalAndRound).unwrap();
    assert!((fitted.round_overhead_cycles - 1000.0).abs() < 1e-6);
}

#[test]
fn closed_form_speedup_without_local_or_noc_costs() {
    let params = CostParams {
        local_word_cost_cycles: 0.0,
        hop_word_cost_cycles: 0.0,
        round_overhead_cycles: 0.0,
        ..CostParams::default()
    };
    let g = params.global_word_cost_cycles;
    for n in [32usize, 64, 128] {
        let r = stats(Mode::Reference, n);
        let h = stats(Mode::Hybrid, n);
        let t_ref = estimate_time(&r, &params, 16).unwrap();
        let t_hyb = estimate_time(&h, &params, 16).unwrap();
        let (nf, p) = (n as f64, 4.0);
        let flop_cycles = 2.0 * nf.powi(3) / (16.0 * params.flops_per_cycle_per_core);
        let want = (flop_cycles + (2.0 * p + 1.0) * nf * nf * g) / (flop_cycles + 3.0 * nf * nf * g);
        assert!((t_ref / t_hyb / want - 1.0).abs() < 1e-12, "n={n}");
    }
}

#[test]
fn sensitivity_table_in_the_guide_is_current() {
    let table = [
        (0.0, [2.79, 2.64, 2.40]),
        (1000.0, [2.53, 2.52, 2.30]),
        (2000.0, [2.32, 2.41, 2.20]),
    ];
    let sizes = [32, 64, 128];
    let hybrid: Vec<_> = sizes.iter().map(|&n| stats(Mode::Hybrid, n)).collect();
    let reference: Vec<_> = sizes.iter().map(|&n| stats(Mode::Reference, n)).collect();
    for (o, speedups) in table {
        let (pts, mut base) = points(None);
        base.round_overhead_cycles = o;
        let fitted = calibrate(&base, &pts, FreeParams::GlobalAndLocal).unwrap();
        for k in 0..3 {
            let s = model_mflops(&hybrid[k], &fitted) / model_mflops(&reference[k], &fitted);
            assert!((s - speedups[k]).abs() < 0.005, "o={o} n={}: {s}", sizes[k]);
        }
    }
}

#[test]
fn hop_sensitivity_table_in_the_guide_is_current() {
    let table = [
        (0.0, [2.55, 2.54, 2.31]),
        (1.0, [2.53, 2.52, 2.30]),
        (4.0, [2.47, 2.46, 2.25]),
        (16.0, [2.26, 2.26, 2.09]),
    ];
    for (h, speedups) in table {
        let params = CostParams {
            hop_word_cost_cycles: h,
            ..CostParams::default()
        };
        // the reference kernel has no mesh traffic, so the fit does not move
        let (pts, _) = points(None);
        let refit = calibrate(&params, &pts, FreeParams::GlobalAndLocal).unwrap();
        assert!((refit.global_word_cost_cycles / params.global_word_cost_cycles - 1.0).abs() < 1e-12);
        for (k, n) in [32, 64, 128].into_iter().enumerate() {
            let s = model_mflops(&stats(Mode::Hybrid, n), &params) / model_mflops(&stats(Mode::Reference, n), &params);
            assert!((s - speedups[k]).abs() < 0.005, "h={h} n={n}: {s}");
        }
    }
}

#[test]
fn report_pairs_and_speedups() {
    let params = CostParams::default();
    let m = |mode, n| Measurement {
        mode,
        n,
        p: 4,
        pes: 16,
        stats: stats(mode, n),
    };
    let pairs = [(m(Mode::Reference, 32), m(Mode::Hybrid, 32))];
    let rows = perf::report(&pairs, &params).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].speedup, 1.0);
    assert_eq!(rows[1].speedup, rows[1].mflops / rows[0].mflops);
    let single = BenchmarkReport::new(&pairs[0].1, &params).unwrap();
    assert_eq!(single.mflops, rows[1].mflops);
    assert!(perf::report(&[(pairs[0].1, pairs[0].0)], &params).is_err());
}

fn arb_stats() -> impl Strategy<Value = TrafficStats> {
    (
        0u64..1 << 30,
        0u64..1 << 24,
        0u64..1 << 24,
        0u64..1 << 24,
        0u64..1 << 28,
        0u64..64,
        0u64..64,
    )
        .prop_map(|(flops, gr, gw, hops, local, barriers, rounds)| TrafficStats {
            flops,
            global_read_words: gr,
            global_write_words: gw,
            remote_words: hops / 2,
            remote_word_hops: hops,
            local_words: local,
            barriers,
            rounds,
        })
}

proptest! {
    #[test]
    fn time_is_monotone_in_every_modeled_counter(base in arb_stats(), field in 0usize..7, bump in 1u64..1 << 20) {
        let params = CostParams::default();
        let mut more = base;
        match field {
            0 => more.flops += bump,
            1 => more.global_read_words += bump,
            2 => more.global_write_words += bump,
            3 => more.remote_word_hops += bump,
            4 => more.local_words += bump,
            5 => more.barriers += bump,
            _ => more.rounds += bump,
        }
        let t0 = estimate_time(&base, &params, 16).unwrap();
        let t1 = estimate_time(&more, &params, 16).unwrap();
        prop_assert!(t1 > t0);
    }

    #[test]
    fn time_is_monotone_in_every_cycle_cost(base in arb_stats(), key in 2usize..6, bump in 1e-3f64..100.0) {
        // clock rate and flops per cycle are throughputs: raising them must lower time
        let mut st = base;
        st.flops += 1;
        st.global_read_words += 1;
        st.local_words += 1;
        st.remote_word_hops += 1;
        st.rounds += 1;
        let params = CostParams::default();
        let name = CostParams::KEYS[key];
        let mut more = params;
        more.set(name, params.get(name).unwrap() + bump);
        prop_assert!(estimate_time(&st, &more, 16).unwrap() > estimate_time(&st, &params, 16).unwrap(), "{}", name);
        for rate in ["clock_hz", "flops_per_cycle_per_core"] {
            let mut faster = params;
            faster.set(rate, params.get(rate).unwrap() * (1.0 + bump));
            prop_assert!(estimate_time(&st, &faster, 16).unwrap() < estimate_time(&st, &params, 16).unwrap());
        }
    }

    #[test]
    fn time_is_linear_in_the_counters(a in arb_stats(), b in arb_stats()) {
        let params = CostParams::default();
        let mut sum = a;
        sum += &b;
        let (ta, tb, ts) = (
            estimate_time(&a, &params, 16).unwrap(),
            estimate_time(&b, &params, 16).unwrap(),
            // barriers and rounds add when summed by hand
            estimate_time(&TrafficStats { barriers: a.barriers + b.barriers, rounds: a.rounds + b.rounds, ..sum }, &params, 16).unwrap(),
        );
        prop_assert!((ts - (ta + tb)).abs() <= 1e-9 * ts.max(1e-12));
    }

    #[test]
    fn calibration_reproduces_its_targets(t_big in 300.0f64..3000.0, ratio in 0.15f64..0.6) {
        let (pts, base) = points(None);
        let pts = [
            CalibrationPoint { target_mflops: t_big, ..pts[0] },
            CalibrationPoint { target_mflops: t_big * ratio, ..pts[1] },
        ];
        if let Ok(fit) = calibrate(&base, &pts, FreeParams::GlobalAndLocal) {
            for pt in &pts {
                let got = model_mflops(&pt.stats, &fit);
                prop_assert!((got / pt.target_mflops - 1.0).abs() < 1e-9);
            }
            prop_assert!(fit.global_word_cost_cycles > 0.0 && fit.local_word_cost_cycles > 0.0);
        }
    }
}
