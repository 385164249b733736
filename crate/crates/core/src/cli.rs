//! Benchmark driver behind the `meshnoc` binary.
//!
//! Runs the reference and hybrid Cannon kernels over a list of matrix sizes,
//! checks each product against the host, and reports modeled performance as
//! a table or as CSV.
//!
//! Settings come from three layers, later ones winning: built-in defaults,
//! a flat `key = value` params file (`--params`, or `MESHNOC_PARAMS`), and
//! command-line flags. The params file holds run settings (`sizes`, `grid`,
//! `mode`, `seed`, `output`) and cost-model parameters; `--calibrate`
//! writes the fitted cost parameters back into it.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cannon::{self, Mode};
use crate::mesh::DeviceConfig;
use crate::offload::Device;
use crate::perf::{self, BenchmarkReport, CalibrationPoint, CostParams, FreeParams, Measurement};
use crate::shmem::{write_trace_csv, TraceRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const PARAMS_ENV: &str = "MESHNOC_PARAMS";

/// Per-element relative error allowed against the host product.
pub const VERIFY_TOLERANCE: f64 = 1e-4;

/// Matrix sizes used for calibration: `(n, reference MFLOPS)`.
pub const CALIBRATION_POINTS: [(usize, f64); 2] = [(128, 794.0), (32, 218.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeSel {
    Reference,
    Hybrid,
    Both,
}

impl ModeSel {
    fn includes(self, mode: Mode) -> bool {
        matches!(
            (self, mode),
            (ModeSel::Both, _) | (ModeSel::Reference, Mode::Reference) | (ModeSel::Hybrid, Mode::Hybrid)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "meshnoc",
    version,
    about = "Cannon matrix-multiply benchmark on a simulated 2D-mesh coprocessor"
)]
pub struct Args {
    /// Matrix sizes, comma separated [default: 32,64,128]
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Grid dimension p; the kernels run on p×p PEs [default: 4]
    #[arg(long)]
    pub grid: Option<usize>,
    /// Kernels to run [default: both]
    #[arg(long, value_enum)]
    pub mode: Option<ModeSel>,
    /// Seed for the input matrices [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit the off-chip and local word costs to the reference MFLOPS at 128 and 32
    #[arg(long)]
    pub calibrate: bool,
    /// Params file (key = value); falls back to $MESHNOC_PARAMS
    #[arg(long, value_name = "PATH")]
    pub params: Option<PathBuf>,
    /// Write the SHMEM call trace of every launch as CSV
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Report format [default: table]
    #[arg(long, value_enum)]
    pub output: Option<OutputFormat>,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sizes: Vec<usize>,
    pub grid: usize,
    pub mode: ModeSel,
    pub seed: u64,
    pub calibrate: bool,
    pub params_file: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub output: OutputFormat,
    pub params: CostParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sizes: vec![32, 64, 128],
            grid: 4,
            mode: ModeSel::Both,
            seed: 42,
            calibrate: false,
            params_file: None,
            trace: None,
            output: OutputFormat::Table,
            params: CostParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, device: &DeviceConfig) -> Result<(), String> {
        if self.sizes.is_empty() {
            return Err("no matrix sizes given".into());
        }
        let p = self.grid;
        let mut problems = Vec::new();
        if p == 0 {
            problems.push("grid must be at least 1".to_string());
        } else {
            if p * p > device.pes() {
                problems.push(format!(
                    "a {p}x{p} grid needs {} PEs but the device has {}",
                    p * p,
                    device.pes()
                ));
            }
            for &n in &self.sizes {
                if n == 0 || n % p != 0 {
                    problems.push(format!("grid {p} does not divide matrix size {n}"));
                }
            }
            if self.calibrate {
                for (n, _) in CALIBRATION_POINTS {
                    if n % p != 0 {
                        problems.push(format!("calibration size {n} is not divisible by grid {p}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// A parsed params file: ordered `key = value` entries. Blank lines and
/// lines starting with `#` are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamsFile {
    entries: Vec<(String, String)>,
}

impl ParamsFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value, got `{line}`", lineno + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(format!("line {}: empty key", lineno + 1));
            }
            match entries.iter_mut().find(|(key, _)| *key == k) {
                Some(slot) => slot.1 = v,
                None => entries.push((k, v)),
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: String) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_params(&mut self, params: &CostParams) {
        for key in CostParams::KEYS {
            self.set(key, format!("{}", params.get(key).unwrap_or_default()));
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Overlay this file's settings on `cfg`.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), String> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        for (k, v) in &self.entries {
            match k.as_str() {
                "sizes" => {
                    cfg.sizes = v
                        .split(',')
                        .map(|s| parse("sizes", s.trim()))
                        .collect::<Result<_, _>>()?
                }
                "grid" => cfg.grid = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "mode" => cfg.mode = ModeSel::from_str(v, true).map_err(|_| format!("invalid mode `{v}`"))?,
                "output" => {
                    cfg.output = OutputFormat::from_str(v, true).map_err(|_| format!("invalid output `{v}`"))?
                }
                key if CostParams::KEYS.contains(&key) => {
                    cfg.params.set(key, parse(key, v)?);
                }
                other => return Err(format!("unknown key `{other}`")),
            }
        }
        Ok(())
    }
}

/// One CSV report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub n: usize,
    pub p: usize,
    pub mode: String,
    pub flops: u64,
    pub global_read_words: u64,
    pub global_write_words: u64,
    pub remote_words: u64,
    pub remote_word_hops: u64,
    pub barriers: u64,
    pub est_time_s: f64,
    pub mflops: f64,
    pub speedup: f64,
}

impl From<&BenchmarkReport> for CsvRow {
    fn from(r: &BenchmarkReport) -> Self {
        Self {
            n: r.n,
            p: r.p,
            mode: r.mode.to_string(),
            flops: r.stats.flops,
            global_read_words: r.stats.global_read_words,
            global_write_words: r.stats.global_write_words,
            remote_words: r.stats.remote_words,
            remote_word_hops: r.stats.remote_word_hops,
            barriers: r.stats.barriers,
            est_time_s: r.est_time_s,
            mflops: r.mflops,
            speedup: r.speedup,
        }
    }
}

pub fn write_csv<W: Write>(out: W, reports: &[BenchmarkReport]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table<W: Write>(mut out: W, reports: &[BenchmarkReport], params: &CostParams) -> io::Result<()> {
    writeln!(
        out,
        "{:>5} {:>2} {:<9} {:>10} {:>9} {:>8} {:>8} {:>9} {:>3} {:>11} {:>8} {:>7} {:>8}",
        "n",
        "p",
        "mode",
        "flops",
        "gl_read",
        "gl_write",
        "remote",
        "word_hops",
        "bar",
        "est_time_s",
        "MFLOPS",
        "speedup",
        "hw"
    )?;
    for r in reports {
        let hw = perf::measured(r.n)
            .filter(|_| r.p == 4)
            .map(|m| match r.mode {
                Mode::Reference => m.reference_mflops,
                Mode::Hybrid => m.hybrid_mflops,
            })
            .map_or_else(|| "-".to_string(), |v| format!("{v:.0}"));
        writeln!(
            out,
            "{:>5} {:>2} {:<9} {:>10} {:>9} {:>8} {:>8} {:>9} {:>3} {:>11.4e} {:>8.1} {:>6.2}x {:>8}",
            r.n,
            r.p,
            r.mode.as_str(),
            r.stats.flops,
            r.stats.global_read_words,
            r.stats.global_write_words,
            r.stats.remote_words,
            r.stats.remote_word_hops,
            r.stats.barriers,
            r.est_time_s,
            r.mflops,
            r.speedup,
            hw
        )?;
    }
    writeln!(
        out,
        "model: {:.0} MHz, {} flops/cycle/core, off-chip {:.4} cyc/word, local {:.4} cyc/word, \
         {} cyc/word/hop, {} cyc/round; host staging excluded",
        params.clock_hz / 1e6,
        params.flops_per_cycle_per_core,
        params.global_word_cost_cycles,
        params.local_word_cost_cycles,
        params.hop_word_cost_cycles,
        params.round_overhead_cycles
    )?;
    writeln!(out, "hw: MFLOPS measured on the 16-core device (4x4 grid only)")
}

/// Build the run configuration from flags, the params file and defaults.
pub fn resolve(args: &Args, env_params: Option<PathBuf>) -> Result<RunConfig, String> {
    let mut cfg = RunConfig {
        calibrate: args.calibrate,
        trace: args.trace.clone(),
        params_file: args.params.clone().or(env_params),
        ..RunConfig::default()
    };
    if let Some(path) = cfg.params_file.clone() {
        match fs::read_to_string(&path) {
            Ok(text) => {
                let file = ParamsFile::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                file.apply(&mut cfg).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            // calibration creates the file
            Err(e) if e.kind() == io::ErrorKind::NotFound && cfg.calibrate => {}
            Err(e) => return Err(format!("cannot read params file {}: {e}", path.display())),
        }
    }
    if let Some(sizes) = &args.sizes {
        cfg.sizes = sizes.clone();
    }
    if let Some(grid) = args.grid {
        cfg.grid = grid;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(output) = args.output {
        cfg.output = output;
    }
    cfg.params.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

struct Failure(String);

fn execute_checked(
    device: &mut Device,
    mode: Mode,
    n: usize,
    p: usize,
    seed: u64,
    trace: &mut Vec<TraceRecord>,
) -> Result<Measurement, Failure> {
    let (a, b) = cannon::seeded_inputs(n, seed);
    let run = cannon::run_cannon(device, mode, n, p, &a, &b)
        .map_err(|e| Failure(format!("{mode} n={n} p={p}: launch failed: {e}")))?;
    let want = cannon::host_matmul(&a, &b, n);
    let (err, idx) = cannon::max_relative_error(&run.c, &want);
    if err > VERIFY_TOLERANCE {
        return Err(Failure(format!(
            "{mode} n={n} p={p}: verification failed: worst relative error {err:.3e} at ({}, {}): got {} expected {}",
            idx / n,
            idx % n,
            run.c[idx],
            want[idx]
        )));
    }
    trace.extend(run.record.trace.iter().copied());
    Ok(Measurement {
        mode,
        n,
        p,
        pes: run.record.work_items,
        stats: run.record.stats.aggregate,
    })
}

/// Fit the word costs to the reference throughput at the calibration sizes.
fn calibrate_params(device: &mut Device, cfg: &RunConfig) -> Result<CostParams, Failure> {
    let mut scratch = Vec::new();
    let mut points = Vec::new();
    for (n, target) in CALIBRATION_POINTS {
        let m = execute_checked(device, Mode::Reference, n, cfg.grid, cfg.seed, &mut scratch)?;
        points.push(CalibrationPoint {
            stats: m.stats,
            pes: m.pes,
            target_mflops: target,
        });
    }
    perf::calibrate(&cfg.params, &[points[0], points[1]], FreeParams::GlobalAndLocal)
        .map_err(|e| Failure(format!("calibration failed: {e}")))
}

fn save_params(path: &Path, params: &CostParams) -> Result<(), Failure> {
    let mut file = match fs::read_to_string(path) {
        Ok(text) => ParamsFile::parse(&text).map_err(Failure)?,
        Err(_) => ParamsFile::default(),
    };
    file.set_params(params);
    fs::write(path, file.render()).map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))
}

/// Execute a resolved configuration, writing the report to `out`.
pub fn execute(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match execute_inner(cfg, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_FAILURE
        }
    }
}

fn execute_inner(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let mut device = Device::new(DeviceConfig::default()).map_err(|e| Failure(e.to_string()))?;
    let mut params = cfg.params;
    if cfg.calibrate {
        params = calibrate_params(&mut device, cfg)?;
        let _ = writeln!(
            err,
            "calibrated: global_word_cost_cycles = {}, local_word_cost_cycles = {}",
            params.global_word_cost_cycles, params.local_word_cost_cycles
        );
        if let Some(path) = &cfg.params_file {
            save_params(path, &params)?;
        }
    }

    device.set_tracing(cfg.trace.is_some());
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    for &n in &cfg.sizes {
        // the reference run is the speedup baseline even when not reported
        let reference = execute_checked(&mut device, Mode::Reference, n, cfg.grid, cfg.seed, &mut trace)?;
        let baseline = BenchmarkReport::new(&reference, &params).map_err(|e| Failure(e.to_string()))?;
        if cfg.mode.includes(Mode::Reference) {
            reports.push(baseline);
        }
        if cfg.mode.includes(Mode::Hybrid) {
            let hybrid = execute_checked(&mut device, Mode::Hybrid, n, cfg.grid, cfg.seed, &mut trace)?;
            let mut row = BenchmarkReport::new(&hybrid, &params).map_err(|e| Failure(e.to_string()))?;
            row.speedup = row.mflops / baseline.mflops;
            reports.push(row);
        }
    }

    if let Some(path) = &cfg.trace {
        let file = fs::File::create(path).map_err(|e| Failure(format!("cannot create {}: {e}", path.display())))?;
        write_trace_csv(io::BufWriter::new(file), &trace)
            .map_err(|e| Failure(format!("cannot write {}: {e}", path.display())))?;
    }

    match cfg.output {
        OutputFormat::Csv => write_csv(out, &reports).map_err(|e| Failure(e.to_string())),
        OutputFormat::Table => write_table(out, &reports, &params).map_err(|e| Failure(e.to_string())),
    }
}

/// Parse `argv`, resolve settings and run. Returns the process exit code.
pub fn run<I, T>(argv: I, env_params: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    let cfg = match resolve(&args, env_params) {
        Ok(c) => c,
        Err(msg) => {
            let _ = writeln!(err, "usage error: {msg}");
            return EXIT_USAGE;
        }
    };
    if let Err(msg) = cfg.validate(&DeviceConfig::default()) {
        let _ = writeln!(err, "usage error: {msg}");
        return EXIT_USAGE;
    }
    execute(&cfg, out, err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(argv: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut full = vec!["meshnoc"];
        full.extend_from_slice(argv);
        let code = run(full, None, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn params_file_parsing() {
        let f = ParamsFile::parse("# comment\n\ngrid = 2\nsizes=8, 16\nhop_word_cost_cycles = 2.5\ngrid=4\n").unwrap();
        let mut cfg = RunConfig::default();
        f.apply(&mut cfg).unwrap();
        assert_eq!(cfg.grid, 4);
        assert_eq!(cfg.sizes, vec![8, 16]);
        assert_eq!(cfg.params.hop_word_cost_cycles, 2.5);
        assert!(ParamsFile::parse("novalue\n").is_err());
        let bad = ParamsFile::parse("colour = blue\n").unwrap();
        assert!(bad.apply(&mut cfg).unwrap_err().contains("unknown key"));
    }

    #[test]
    fn params_render_round_trips() {
        let mut f = ParamsFile::parse("seed = 7\n").unwrap();
        let p = CostParams {
            global_word_cost_cycles: 0.1 + 0.2,
            ..CostParams::default()
        };
        f.set_params(&p);
        let again = ParamsFile::parse(&f.render()).unwrap();
        let mut cfg = RunConfig::default();
        again.apply(&mut cfg).unwrap();
        assert_eq!(cfg.params, p);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_grid_is_a_usage_error() {
        let (code, _, err) = run_capture(&["--grid", "5", "--sizes", "32"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("25 PEs"), "{err}");
        assert!(err.contains("does not divide"), "{err}");
        let (code, _, _) = run_capture(&["--mode", "sideways"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn tile_overflow_is_a_launch_failure() {
        let (code, _, err) = run_capture(&["--grid", "2", "--sizes", "128", "--mode", "hybrid"]);
        assert_eq!(code, EXIT_FAILURE);
        assert!(err.contains("symmetric heap exhausted"), "{err}");
    }
}
