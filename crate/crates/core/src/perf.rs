//! Linear cost model turning launch counters into time and MFLOPS.
//!
//! For a launch over `P` PEs the modeled cycle count is
//!
//! ```text
//! cycles = flops / (P · flops_per_cycle_per_core)
//!        + (global reads + global writes) · global_word_cost_cycles
//!        + (local_words / P) · local_word_cost_cycles
//!        + (remote_word_hops / P) · hop_word_cost_cycles
//!        + (barriers + rounds) · round_overhead_cycles
//! ```
//!
//! Compute, local and NoC terms are spread over the PEs. Off-chip traffic is
//! not: all PEs share one off-chip link, so global words are serialized.
//! Host staging of buffers is outside the modeled region.
//!
//! The model is linear in every cost parameter, so any two of them can be
//! fitted exactly to two measured points ([`calibrate`]).

use thiserror::Error;

use crate::cannon::Mode;
pub use crate::stats::TrafficStats;

/// Published Cannon throughput on the 16-core device, MFLOPS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredRow {
    pub n: usize,
    pub reference_mflops: f64,
    pub hybrid_mflops: f64,
    pub speedup: f64,
}

pub const MEASURED: [MeasuredRow; 3] = [
    MeasuredRow {
        n: 32,
        reference_mflops: 218.0,
        hybrid_mflops: 504.0,
        speedup: 2.3,
    },
    MeasuredRow {
        n: 64,
        reference_mflops: 424.0,
        hybrid_mflops: 1000.0,
        speedup: 2.4,
    },
    MeasuredRow {
        n: 128,
        reference_mflops: 794.0,
        hybrid_mflops: 1817.0,
        speedup: 2.3,
    },
];

pub fn measured(n: usize) -> Option<MeasuredRow> {
    MEASURED.iter().copied().find(|r| r.n == n)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("cost parameter `{name}` = {value} is invalid ({reason})")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("calibration system is singular (determinant {det:e})")]
    Singular { det: f64 },
    #[error(
        "calibration produced non-positive parameters: {first} = {first_value}, {second} = {second_value} \
         (fit cycles {targets:?}, fixed cycles {fixed:?})"
    )]
    NonPositive {
        first: &'static str,
        first_value: f64,
        second: &'static str,
        second_value: f64,
        targets: [f64; 2],
        fixed: [f64; 2],
    },
    #[error("calibration target {0} MFLOPS must be positive and finite")]
    BadTarget(f64),
    #[error("cannot pair runs: {0}")]
    Pairing(String),
}

/// Cycle costs of the modeled device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub clock_hz: f64,
    pub flops_per_cycle_per_core: f64,
    /// Cycles per word of off-chip traffic.
    pub global_word_cost_cycles: f64,
    /// Cycles per word of local-arena traffic on one core.
    pub local_word_cost_cycles: f64,
    /// Cycles per word per mesh hop.
    pub hop_word_cost_cycles: f64,
    /// Fixed cycles per barrier and per compute round.
    pub round_overhead_cycles: f64,
}

impl Default for CostParams {
    /// 600 MHz, 2 flops/cycle/core (19.2 GFLOPS over 16 cores), a 1-cycle
    /// hop, 1000 cycles per round, and the global and local word costs that
    /// [`calibrate`] fits to the 32×32 and 128×128 reference runs on a 4×4
    /// grid under those fixed values.
    fn default() -> Self {
        Self {
            clock_hz: 6.0e8,
            flops_per_cycle_per_core: 2.0,
            global_word_cost_cycles: 18.286_249_695_896_96,
            local_word_cost_cycles: 0.831_455_666_459_163_8,
            hop_word_cost_cycles: 1.0,
            round_overhead_cycles: 1000.0,
        }
    }
}

impl CostParams {
    pub const KEYS: [&'static str; 6] = [
        "clock_hz",
        "flops_per_cycle_per_core",
        "global_word_cost_cycles",
        "local_word_cost_cycles",
        "hop_word_cost_cycles",
        "round_overhead_cycles",
    ];

    pub fn get(&self, key: &str) -> Option<f64> {
        Some(match key {
            "clock_hz" => self.clock_hz,
            "flops_per_cycle_per_core" => self.flops_per_cycle_per_core,
            "global_word_cost_cycles" => self.global_word_cost_cycles,
            "local_word_cost_cycles" => self.local_word_cost_cycles,
            "hop_word_cost_cycles" => self.hop_word_cost_cycles,
            "round_overhead_cycles" => self.round_overhead_cycles,
            _ => return None,
        })
    }

    /// Set a parameter by name; returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: f64) -> bool {
        let slot = match key {
            "clock_hz" => &mut self.clock_hz,
            "flops_per_cycle_per_core" => &mut self.flops_per_cycle_per_core,
            "global_word_cost_cycles" => &mut self.global_word_cost_cycles,
            "local_word_cost_cycles" => &mut self.local_word_cost_cycles,
            "hop_word_cost_cycles" => &mut self.hop_word_cost_cycles,
            "round_overhead_cycles" => &mut self.round_overhead_cycles,
            _ => return false,
        };
        *slot = value;
        true
    }

    /// Clock and issue rate must be positive; cycle costs non-negative.
    pub fn validate(&self) -> Result<(), ModelError> {
        for key in Self::KEYS {
            let value = self.get(key).unwrap_or(f64::NAN);
            let rate = matches!(key, "clock_hz" | "flops_per_cycle_per_core");
            if !value.is_finite() {
                return Err(ModelError::InvalidParam {
                    name: key,
                    value,
                    reason: "not finite",
                });
            }
            if rate && value <= 0.0 {
                return Err(ModelError::InvalidParam {
                    name: key,
                    value,
                    reason: "must be positive",
                });
            }
            if value < 0.0 {
                return Err(ModelError::InvalidParam {
                    name: key,
                    value,
                    reason: "must be non-negative",
                });
            }
        }
        Ok(())
    }
}

/// Per-term cycle counts for one launch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CycleBreakdown {
    pub compute: f64,
    pub global: f64,
    pub local: f64,
    pub noc: f64,
    pub overhead: f64,
}

impl CycleBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.global + self.local + self.noc + self.overhead
    }
}

pub fn breakdown(stats: &TrafficStats, params: &CostParams, pes: usize) -> Result<CycleBreakdown, ModelError> {
    params.validate()?;
    let pes = pes.max(1) as f64;
    Ok(CycleBreakdown {
        compute: stats.flops as f64 / (pes * params.flops_per_cycle_per_core),
        global: stats.global_words() as f64 * params.global_word_cost_cycles,
        local: stats.local_words as f64 / pes * params.local_word_cost_cycles,
        noc: stats.remote_word_hops as f64 / pes * params.hop_word_cost_cycles,
        overhead: (stats.barriers + stats.rounds) as f64 * params.round_overhead_cycles,
    })
}

/// Modeled seconds for a launch over `pes` PEs.
pub fn estimate_time(stats: &TrafficStats, params: &CostParams, pes: usize) -> Result<f64, ModelError> {
    Ok(breakdown(stats, params, pes)?.total() / params.clock_hz)
}

pub fn mflops(flops: u64, seconds: f64) -> f64 {
    flops as f64 / seconds / 1e6
}

/// The pair of parameters [`calibrate`] solves for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeParams {
    /// Off-chip word cost and local word cost.
    GlobalAndLocal,
    /// Off-chip word cost and fixed per-round overhead.
    GlobalAndRound,
}

impl FreeParams {
    fn names(self) -> (&'static str, &'static str) {
        match self {
            FreeParams::GlobalAndLocal => ("global_word_cost_cycles", "local_word_cost_cycles"),
            FreeParams::GlobalAndRound => ("global_word_cost_cycles", "round_overhead_cycles"),
        }
    }
}

/// A launch with the throughput it should be modeled at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub stats: TrafficStats,
    pub pes: usize,
    pub target_mflops: f64,
}

/// Fit the two `free` parameters so both points are modeled at exactly
/// their target MFLOPS. Other parameters are held at their values in
/// `params`.
pub fn calibrate(
    params: &CostParams,
    points: &[CalibrationPoint; 2],
    free: FreeParams,
) -> Result<CostParams, ModelError> {
    params.validate()?;
    let (first, second) = free.names();

    // cycles(point) = fixed + x·coef_x + y·coef_y, linear in the unknowns
    let mut zeroed = *params;
    zeroed.set(first, 0.0);
    zeroed.set(second, 0.0);
    let unit = |key: &str| {
        let mut u = CostParams {
            global_word_cost_cycles: 0.0,
            local_word_cost_cycles: 0.0,
            hop_word_cost_cycles: 0.0,
            round_overhead_cycles: 0.0,
            ..*params
        };
        u.set(key, 1.0);
        u
    };
    let (unit_x, unit_y) = (unit(first), unit(second));

    let mut rows = [[0.0; 2]; 2];
    let mut rhs = [0.0; 2];
    let mut targets = [0.0; 2];
    let mut fixed = [0.0; 2];
    for (k, pt) in points.iter().enumerate() {
        if !(pt.target_mflops.is_finite() && pt.target_mflops > 0.0) {
            return Err(ModelError::BadTarget(pt.target_mflops));
        }
        let target = pt.stats.flops as f64 / (pt.target_mflops * 1e6) * params.clock_hz;
        let base = breakdown(&pt.stats, &zeroed, pt.pes)?.total();
        let compute = breakdown(&pt.stats, &unit_x, pt.pes)?.compute;
        rows[k] = [
            breakdown(&pt.stats, &unit_x, pt.pes)?.total() - compute,
            breakdown(&pt.stats, &unit_y, pt.pes)?.total() - compute,
        ];
        rhs[k] = target - base;
        targets[k] = target;
        fixed[k] = base;
    }

    let det = rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0];
    let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if det.abs() <= 1e-12 * scale * scale {
        return Err(ModelError::Singular { det });
    }
    let x = (rhs[0] * rows[1][1] - rows[0][1] * rhs[1]) / det;
    let y = (rows[0][0] * rhs[1] - rhs[0] * rows[1][0]) / det;
    if !(x > 0.0 && y > 0.0) {
        return Err(ModelError::NonPositive {
            first,
            first_value: x,
            second,
            second_value: y,
            targets,
            fixed,
        });
    }
    let mut fitted = *params;
    fitted.set(first, x);
    fitted.set(second, y);
    Ok(fitted)
}

/// One launch's counters, tagged with what produced them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    pub pes: usize,
    pub stats: TrafficStats,
}

/// Modeled performance of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkReport {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    pub stats: TrafficStats,
    pub est_time_s: f64,
    pub mflops: f64,
    /// MFLOPS relative to the reference run of the same size.
    pub speedup: f64,
}

impl BenchmarkReport {
    pub fn new(m: &Measurement, params: &CostParams) -> Result<Self, ModelError> {
        let est_time_s = estimate_time(&m.stats, params, m.pes)?;
        Ok(Self {
            mode: m.mode,
            n: m.n,
            p: m.p,
            stats: m.stats,
            est_time_s,
            mflops: mflops(2 * (m.n as u64).pow(3), est_time_s),
            speedup: 1.0,
        })
    }
}

/// Reports for `(reference, hybrid)` pairs, in input order, reference first.
pub fn report(pairs: &[(Measurement, Measurement)], params: &CostParams) -> Result<Vec<BenchmarkReport>, ModelError> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (reference, hybrid) in pairs {
        if reference.mode != Mode::Reference || hybrid.mode != Mode::Hybrid {
            return Err(ModelError::Pairing(format!(
                "expected (reference, hybrid), got ({}, {})",
                reference.mode, hybrid.mode
            )));
        }
        if (reference.n, reference.p) != (hybrid.n, hybrid.p) {
            return Err(ModelError::Pairing(format!(
                "reference n={} p={} vs hybrid n={} p={}",
                reference.n, reference.p, hybrid.n, hybrid.p
            )));
        }
        let r = BenchmarkReport::new(reference, params)?;
        let mut h = BenchmarkReport::new(hybrid, params)?;
        h.speedup = h.mflops / r.mflops;
        out.push(r);
        out.push(h);
    }
    Ok(out)
}
