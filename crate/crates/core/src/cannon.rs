//! Cannon's matrix multiply `C = A × B` on a `p × p` PE grid, written two
//! ways:
//!
//! * [`REFERENCE_KERNEL`]: every round each PE reads the A and B tiles it
//!   needs straight from global memory. No inter-PE communication.
//! * [`HYBRID_KERNEL`]: each PE reads its pre-skewed A and B tiles once, then
//!   shifts A left and B up through the symmetric heap with `put` and
//!   `barrier_all`, re-using on-chip data.
//!
//! Matrices are row-major `n × n` single precision, `s = n / p` is the tile
//! size, and PE `(i, j)` computes C tile `(i, j)`. In round `r` both kernels
//! multiply A tile `(i, (i + j + r) mod p)` by B tile `((i + j + r) mod p, j)`
//! with the same loop order, so their outputs are bit-identical.

use crate::error::{DeviceError, Result};
use crate::kernel::{ArgKind, KernelArg, KernelContext};
use crate::mesh::{bytes_to_words, GridCoord, PeId, WORD_BYTES};
use crate::offload::{BufferHandle, Device, KernelDescriptor, LaunchRecord};
use crate::shmem::SymAddr;

pub const REFERENCE_KERNEL: &str = "cannon_reference";
pub const HYBRID_KERNEL: &str = "cannon_hybrid";

/// Barriers the hybrid kernel issues besides its `p - 1` shift barriers.
/// Puts are deferred to barriers, so the receive buffers need no setup
/// synchronization.
pub const HYBRID_SETUP_BARRIERS: u64 = 0;

/// Symmetric-heap tiles each kernel allocates.
pub const REFERENCE_TILES: usize = 3;
/// Active and receive tiles for A and B, plus C.
pub const HYBRID_TILES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Reference,
    Hybrid,
}

impl Mode {
    pub fn kernel_name(self) -> &'static str {
        match self {
            Mode::Reference => REFERENCE_KERNEL,
            Mode::Hybrid => HYBRID_KERNEL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reference => "reference",
            Mode::Hybrid => "hybrid",
        }
    }

    pub fn tiles(self) -> usize {
        match self {
            Mode::Reference => REFERENCE_TILES,
            Mode::Hybrid => HYBRID_TILES,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An `n × n` multiply over a `p × p` work-group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CannonProblem {
    pub n: usize,
    pub p: usize,
    pub a: BufferHandle,
    pub b: BufferHandle,
    pub c: BufferHandle,
}

impl CannonProblem {
    /// Tile dimension `n / p`.
    pub fn s(&self) -> usize {
        self.n / self.p
    }

    pub fn work_items(&self) -> usize {
        self.p * self.p
    }

    pub fn args(&self) -> [KernelArg; 5] {
        [
            KernelArg::Buffer(self.a),
            KernelArg::Buffer(self.b),
            KernelArg::Buffer(self.c),
            KernelArg::Scalar(self.n as u32),
            KernelArg::Scalar(self.p as u32),
        ]
    }

    fn from_ctx(ctx: &mut KernelContext<'_>) -> Result<Self> {
        let a = ctx.arg_buffer(0)?;
        let b = ctx.arg_buffer(1)?;
        let c = ctx.arg_buffer(2)?;
        let n = ctx.arg_scalar(3)? as usize;
        let p = ctx.arg_scalar(4)? as usize;
        let problem = Self { n, p, a, b, c };
        let r = problem.check(ctx.n_pes());
        ctx.track(r)?;
        Ok(problem)
    }

    fn check(&self, n_pes: usize) -> Result<()> {
        let bad = |detail: String| Err(DeviceError::BadArgument { index: 3, detail });
        if self.p == 0 || self.n == 0 || !self.n.is_multiple_of(self.p) {
            return bad(format!("grid {} must divide matrix size {}", self.p, self.n));
        }
        if self.p * self.p != n_pes {
            return bad(format!(
                "grid {0}x{0} needs {1} work-items, launched {n_pes}",
                self.p,
                self.p * self.p
            ));
        }
        let bytes = self.n * self.n * WORD_BYTES;
        for buf in [self.a, self.b, self.c] {
            if buf.size() < bytes {
                return bad(format!("buffer {} holds {} bytes, need {bytes}", buf.id(), buf.size()));
            }
        }
        Ok(())
    }

    /// Byte offset in a matrix buffer of row `r` of tile `(ti, tj)`.
    fn tile_row_offset(&self, ti: usize, tj: usize, r: usize) -> usize {
        let s = self.s();
        ((ti * s + r) * self.n + tj * s) * WORD_BYTES
    }
}

/// Tiles PE `(i, j)` holds after the initial skew: A row `i` rotated left
/// by `i`, B column `j` rotated up by `j`.
pub fn skew_source(i: usize, j: usize, p: usize) -> (GridCoord, GridCoord) {
    let k = (i + j) % p;
    (GridCoord::new(i, k), GridCoord::new(k, j))
}

/// `c += a · b` for row-major `s × s` tiles, in i-k-j order.
pub fn mm_accum(c: &mut [f32], a: &[f32], b: &[f32], s: usize) {
    assert!(c.len() >= s * s && a.len() >= s * s && b.len() >= s * s);
    for i in 0..s {
        let c_row = &mut c[i * s..(i + 1) * s];
        for k in 0..s {
            let aik = a[i * s + k];
            let b_row = &b[k * s..(k + 1) * s];
            for (cij, bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
}

/// Local operand words the i-k-j loop moves for one `s × s` tile multiply:
/// one A load per `(i, k)`, then a B load, C load and C store per
/// multiply-add.
pub fn mm_local_words(s: usize) -> u64 {
    let s = s as u64;
    s * s + 3 * s * s * s
}

/// Multiply-accumulate tiles resident in the caller's symmetric heap.
/// Charges `2 s³` flops and [`mm_local_words`] local words.
pub fn local_mm_accum(ctx: &mut KernelContext<'_>, c: SymAddr, a: SymAddr, b: SymAddr, s: usize) -> Result<()> {
    let span = s * s * WORD_BYTES;
    let r = (|| {
        let a = bytes_to_words(&ctx.read_own_raw(a.0, span)?);
        let b = bytes_to_words(&ctx.read_own_raw(b.0, span)?);
        ctx.with_own_arena_mut(c.0, span, |bytes| {
            let mut tile = bytes_to_words(bytes);
            mm_accum(&mut tile, &a, &b, s);
            for (dst, w) in bytes.chunks_exact_mut(WORD_BYTES).zip(&tile) {
                dst.copy_from_slice(&w.to_le_bytes());
            }
        })
    })();
    ctx.track(r)?;
    let s64 = s as u64;
    ctx.add_flops(2 * s64 * s64 * s64);
    ctx.add_local_words(mm_local_words(s));
    Ok(())
}

fn my_coord(ctx: &KernelContext<'_>, p: usize) -> (usize, usize) {
    let pe = ctx.my_pe().index();
    (pe / p, pe % p)
}

fn load_tile(
    ctx: &mut KernelContext<'_>,
    problem: &CannonProblem,
    buf: BufferHandle,
    tile: GridCoord,
    dest: SymAddr,
) -> Result<()> {
    let s = problem.s();
    for r in 0..s {
        let src = problem.tile_row_offset(tile.row, tile.col, r);
        ctx.global_to_local(buf, src, dest.0 + r * s * WORD_BYTES, s)?;
    }
    Ok(())
}

fn store_c_tile(ctx: &mut KernelContext<'_>, problem: &CannonProblem, c: SymAddr) -> Result<()> {
    let s = problem.s();
    let (i, j) = my_coord(ctx, problem.p);
    for r in 0..s {
        let dst = problem.tile_row_offset(i, j, r);
        ctx.local_to_global(c.0 + r * s * WORD_BYTES, problem.c, dst, s)?;
    }
    Ok(())
}

/// Global-memory-only Cannon: each round re-reads both operand tiles.
pub fn cannon_reference_kernel(ctx: &mut KernelContext<'_>) -> Result<()> {
    let problem = CannonProblem::from_ctx(ctx)?;
    let (p, s) = (problem.p, problem.s());
    let tile_bytes = s * s * WORD_BYTES;
    // all tiles are allocated before any traffic or compute
    let a = ctx.shm_alloc(tile_bytes)?;
    let b = ctx.shm_alloc(tile_bytes)?;
    let c = ctx.shm_alloc(tile_bytes)?;
    let (i, j) = my_coord(ctx, p);
    for r in 0..p {
        let k = (i + j + r) % p;
        load_tile(ctx, &problem, problem.a, GridCoord::new(i, k), a)?;
        load_tile(ctx, &problem, problem.b, GridCoord::new(k, j), b)?;
        local_mm_accum(ctx, c, a, b, s)?;
        ctx.record_round();
    }
    store_c_tile(ctx, &problem, c)
}

/// Cannon with on-chip re-use: one pre-skewed load, then `p - 1` shifts of
/// A left and B up into double-buffered receive tiles.
pub fn cannon_hybrid_kernel(ctx: &mut KernelContext<'_>) -> Result<()> {
    let problem = CannonProblem::from_ctx(ctx)?;
    let (p, s) = (problem.p, problem.s());
    let tile_bytes = s * s * WORD_BYTES;
    let a_tiles = [ctx.shm_alloc(tile_bytes)?, ctx.shm_alloc(tile_bytes)?];
    let b_tiles = [ctx.shm_alloc(tile_bytes)?, ctx.shm_alloc(tile_bytes)?];
    let c = ctx.shm_alloc(tile_bytes)?;

    // work-item w runs on device PE w; hop costs follow the physical mesh
    let (i, j) = my_coord(ctx, p);
    let left = PeId(i * p + (j + p - 1) % p);
    let up = PeId(((i + p - 1) % p) * p + j);

    let (a_src, b_src) = skew_source(i, j, p);
    load_tile(ctx, &problem, problem.a, a_src, a_tiles[0])?;
    load_tile(ctx, &problem, problem.b, b_src, b_tiles[0])?;

    let words = s * s;
    let mut cur = 0;
    for _ in 1..p {
        local_mm_accum(ctx, c, a_tiles[cur], b_tiles[cur], s)?;
        ctx.record_round();
        ctx.put(a_tiles[1 - cur], a_tiles[cur].0, words, left)?;
        ctx.put(b_tiles[1 - cur], b_tiles[cur].0, words, up)?;
        ctx.barrier_all()?;
        cur = 1 - cur;
    }
    local_mm_accum(ctx, c, a_tiles[cur], b_tiles[cur], s)?;
    ctx.record_round();
    store_c_tile(ctx, &problem, c)
}

/// Register both Cannon kernels on a device.
pub fn register_kernels(device: &mut Device) -> Result<()> {
    let params = vec![
        ArgKind::Buffer,
        ArgKind::Buffer,
        ArgKind::Buffer,
        ArgKind::Scalar,
        ArgKind::Scalar,
    ];
    for (name, entry) in [
        (
            REFERENCE_KERNEL,
            cannon_reference_kernel as fn(&mut KernelContext<'_>) -> Result<()>,
        ),
        (HYBRID_KERNEL, cannon_hybrid_kernel),
    ] {
        if !device.has_kernel(name) {
            device.register(KernelDescriptor::new(name, params.clone(), entry))?;
        }
    }
    Ok(())
}

/// Output of one host-driven Cannon run.
#[derive(Debug, Clone)]
pub struct CannonRun {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    pub c: Vec<f32>,
    pub record: LaunchRecord,
}

/// Stage `a` and `b` into fresh buffers, run one kernel and read back C.
/// The device's buffers are reset first.
pub fn run_cannon(device: &mut Device, mode: Mode, n: usize, p: usize, a: &[f32], b: &[f32]) -> Result<CannonRun> {
    assert_eq!(a.len(), n * n, "A must be n x n");
    assert_eq!(b.len(), n * n, "B must be n x n");
    register_kernels(device)?;
    device.reset();
    let bytes = n * n * WORD_BYTES;
    let problem = CannonProblem {
        n,
        p,
        a: device.create_buffer(bytes)?,
        b: device.create_buffer(bytes)?,
        c: device.create_buffer(bytes)?,
    };
    device.write_buffer(&problem.a, 0, a)?;
    device.write_buffer(&problem.b, 0, b)?;
    let record = device.enqueue_kernel(mode.kernel_name(), problem.work_items(), &problem.args())?;
    let c = device.read_buffer_all(&problem.c)?;
    Ok(CannonRun { mode, n, p, c, record })
}

/// Seeded 32-bit linear congruential generator (multiplier 1664525,
/// increment 1013904223). Each value keeps the top 24 bits of the state, so
/// it is an exact `f32` in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u32,
}

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self {
            state: (seed ^ (seed >> 32)) as u32,
        }
    }

    pub fn next_f32(&mut self) -> f32 {
        self.state = self.state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
        (self.state >> 8) as f32 / (1u32 << 24) as f32
    }
}

/// A and B for a benchmark run: A takes the first `n²` draws of the seeded
/// generator and B the next `n²`.
pub fn seeded_inputs(n: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = Lcg::new(seed);
    let a = (0..n * n).map(|_| rng.next_f32()).collect();
    let b = (0..n * n).map(|_| rng.next_f32()).collect();
    (a, b)
}

/// Host product used to verify device results, accumulated in `f64`.
pub fn host_matmul(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let acc: f64 = (0..n).map(|k| a[i * n + k] as f64 * b[k * n + j] as f64).sum();
            c[i * n + j] = acc as f32;
        }
    }
    c
}

/// Largest per-element relative error of `got` against `want`, with the
/// index where it occurs.
pub fn max_relative_error(got: &[f32], want: &[f32]) -> (f64, usize) {
    got.iter()
        .zip(want)
        .enumerate()
        .map(|(idx, (&g, &w))| {
            let (g, w) = (g as f64, w as f64);
            let err = if w == 0.0 { g.abs() } else { ((g - w) / w).abs() };
            (err, idx)
        })
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skew_sources() {
        assert_eq!(skew_source(0, 0, 4), (GridCoord::new(0, 0), GridCoord::new(0, 0)));
        assert_eq!(skew_source(1, 0, 4), (GridCoord::new(1, 1), GridCoord::new(1, 0)));
        assert_eq!(skew_source(2, 3, 4), (GridCoord::new(2, 1), GridCoord::new(1, 3)));
    }

    #[test]
    fn tile_products() {
        let id = [1.0, 0.0, 0.0, 1.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_accum(&mut c, &id, &b, 2);
        assert_eq!(c, b);

        let mut c = [0.0; 4];
        mm_accum(&mut c, &[1.0, 2.0, 3.0, 4.0], &b, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        let mut c = [1.5, -2.0, 3.0, 0.25];
        mm_accum(&mut c, &[0.0; 4], &b, 2);
        assert_eq!(c, [1.5, -2.0, 3.0, 0.25]);
    }

    #[test]
    fn lcg_is_reproducible_and_in_unit_interval() {
        let (a1, b1) = seeded_inputs(8, 42);
        let (a2, b2) = seeded_inputs(8, 42);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
        assert!(a1.iter().chain(&b1).all(|&v| (0.0..1.0).contains(&v)));
        assert_ne!(seeded_inputs(8, 43).0, a1);
    }

    #[test]
    fn relative_error_picks_worst_element() {
        let (err, idx) = max_relative_error(&[1.0, 2.2, 3.0], &[1.0, 2.0, 3.0]);
        assert_eq!(idx, 1);
        assert!((err - 0.1).abs() < 1e-6);
    }
}
