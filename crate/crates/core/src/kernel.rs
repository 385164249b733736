//! The per-PE view of a running kernel.

use std::sync::Arc;

use crate::engine::{lock, LaunchShared};
use crate::error::{DeviceError, Result};
use crate::mesh::{bytes_to_words, check_aligned, words_to_bytes, DeviceConfig, PeId, WORD_BYTES};
use crate::offload::BufferHandle;
use crate::shmem::TraceRecord;
use crate::stats::TrafficStats;

/// Device function executed once per PE.
pub type KernelFn = Arc<dyn Fn(&mut KernelContext<'_>) -> Result<()> + Send + Sync>;

/// Declared kind of a kernel parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Buffer,
    Scalar,
}

/// A bound kernel argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelArg {
    Buffer(BufferHandle),
    /// One 32-bit word.
    Scalar(u32),
}

impl KernelArg {
    pub fn kind(&self) -> ArgKind {
        match self {
            KernelArg::Buffer(_) => ArgKind::Buffer,
            KernelArg::Scalar(_) => ArgKind::Scalar,
        }
    }
}

/// One PE's handle on the launch: identity, arguments, its local arena,
/// global memory and the SHMEM runtime (see [`crate::shmem`]).
///
/// Every memory operation that fails also poisons the launch, so a kernel
/// that swallows an error still reports it from `enqueue_kernel`.
pub struct KernelContext<'a> {
    pub(crate) pe: PeId,
    pub(crate) shared: &'a LaunchShared,
    args: &'a [KernelArg],
    pub(crate) stats: TrafficStats,
    pub(crate) trace: Vec<TraceRecord>,
    pub(crate) heap_top: usize,
    pub(crate) epoch: u64,
    fault: Option<DeviceError>,
}

impl<'a> KernelContext<'a> {
    pub(crate) fn new(pe: PeId, shared: &'a LaunchShared, args: &'a [KernelArg]) -> Self {
        Self {
            pe,
            shared,
            args,
            stats: TrafficStats::default(),
            trace: Vec::new(),
            heap_top: 0,
            epoch: 0,
            fault: None,
        }
    }

    pub(crate) fn take_fault(&mut self) -> Option<DeviceError> {
        self.fault.take()
    }

    pub(crate) fn into_parts(self) -> (TrafficStats, Vec<TraceRecord>) {
        (self.stats, self.trace)
    }

    /// Record the first runtime error of this PE and pass it on.
    pub(crate) fn track<T>(&mut self, r: Result<T>) -> Result<T> {
        if let Err(e) = &r {
            if self.fault.is_none() && *e != DeviceError::Aborted {
                self.fault = Some(e.clone());
            }
        }
        r
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.shared.cfg
    }

    /// Counters accrued by this PE so far.
    pub fn stats(&self) -> &TrafficStats {
        &self.stats
    }

    /// Current barrier epoch, starting at 0.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn args(&self) -> &[KernelArg] {
        self.args
    }

    pub fn arg_buffer(&mut self, index: usize) -> Result<BufferHandle> {
        let r = match self.args.get(index) {
            Some(KernelArg::Buffer(b)) => Ok(*b),
            Some(KernelArg::Scalar(_)) => Err(DeviceError::BadArgument {
                index,
                detail: "expected a buffer, found a scalar".into(),
            }),
            None => Err(DeviceError::BadArgument {
                index,
                detail: "missing".into(),
            }),
        };
        self.track(r)
    }

    pub fn arg_scalar(&mut self, index: usize) -> Result<u32> {
        let r = match self.args.get(index) {
            Some(KernelArg::Scalar(v)) => Ok(*v),
            Some(KernelArg::Buffer(_)) => Err(DeviceError::BadArgument {
                index,
                detail: "expected a scalar, found a buffer".into(),
            }),
            None => Err(DeviceError::BadArgument {
                index,
                detail: "missing".into(),
            }),
        };
        self.track(r)
    }

    /// Add floating-point operations to this PE's counters.
    pub fn add_flops(&mut self, flops: u64) {
        self.stats.flops += flops;
    }

    /// Charge local-arena word traffic that did not go through
    /// [`local_read`](Self::local_read) / [`local_write`](Self::local_write).
    pub fn add_local_words(&mut self, words: u64) {
        self.stats.local_words += words;
    }

    /// Mark the end of one compute round.
    pub fn record_round(&mut self) {
        self.stats.rounds += 1;
    }

    // ---- local arena ----

    pub fn local_read(&mut self, offset: usize, span: usize) -> Result<Vec<u8>> {
        let r = self.read_own_raw(offset, span);
        let r = self.track(r)?;
        self.stats.local_words += (span / WORD_BYTES) as u64;
        Ok(r)
    }

    pub fn local_write(&mut self, offset: usize, data: &[u8]) -> Result<()> {
        let r = self.with_own_arena_mut(offset, data.len(), |dst| dst.copy_from_slice(data));
        self.track(r)?;
        self.stats.local_words += (data.len() / WORD_BYTES) as u64;
        Ok(())
    }

    pub fn local_read_words(&mut self, offset: usize, nwords: usize) -> Result<Vec<f32>> {
        Ok(bytes_to_words(&self.local_read(offset, nwords * WORD_BYTES)?))
    }

    pub fn local_write_words(&mut self, offset: usize, words: &[f32]) -> Result<()> {
        self.local_write(offset, &words_to_bytes(words))
    }

    /// Uncharged read of the caller's own arena.
    pub(crate) fn read_own_raw(&self, offset: usize, span: usize) -> Result<Vec<u8>> {
        let local = lock(&self.shared.locals[self.pe.0]);
        Ok(local.read(offset, span)?.to_vec())
    }

    /// Uncharged mutable access to the caller's own arena. Before the first
    /// write of an epoch into the symmetric heap, the committed heap is
    /// preserved so remote gets keep observing pre-epoch contents.
    pub(crate) fn with_own_arena_mut<R>(
        &self,
        offset: usize,
        span: usize,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R> {
        let mut snap = lock(&self.shared.snapshots[self.pe.0]);
        let mut local = lock(&self.shared.locals[self.pe.0]);
        local.read(offset, span)?;
        if span > 0 && offset < local.sym_heap_bytes() && snap.is_none() {
            *snap = Some(local.sym_heap().to_vec());
        }
        Ok(f(local.slice_mut(offset, span)?))
    }

    // ---- global memory ----

    fn resolve(&self, buf: BufferHandle, offset: usize, span: usize) -> Result<usize> {
        if !self.shared.buffers.contains(&buf) {
            return Err(DeviceError::StaleBuffer(buf.id()));
        }
        check_aligned(offset, span)?;
        buf.checked_range(offset, span)
    }

    fn check_global_hazard(&self, base: usize, span: usize, writing: bool) -> Result<()> {
        let mut writers = lock(&self.shared.global_writes);
        if writers.is_empty() && !writing {
            return Ok(());
        }
        let epoch = self.epoch;
        for word in base / WORD_BYTES..(base + span) / WORD_BYTES {
            match writers.get(&word) {
                Some(&other) if other != self.pe => {
                    return Err(DeviceError::GlobalRace {
                        offset: word * WORD_BYTES,
                        first: other.min(self.pe),
                        second: other.max(self.pe),
                        epoch,
                    });
                }
                _ => {
                    if writing {
                        writers.insert(word, self.pe);
                    }
                }
            }
        }
        Ok(())
    }

    /// Read `nwords` words of a global buffer starting at byte `offset`.
    pub fn global_read(&mut self, buf: BufferHandle, offset: usize, nwords: usize) -> Result<Vec<f32>> {
        let span = nwords * WORD_BYTES;
        let r = (|| {
            let base = self.resolve(buf, offset, span)?;
            self.check_global_hazard(base, span, false)?;
            let global = lock(&self.shared.global);
            Ok(bytes_to_words(global.read(base, span)?))
        })();
        let words = self.track(r)?;
        self.stats.global_read_words += nwords as u64;
        Ok(words)
    }

    /// Write words into a global buffer starting at byte `offset`.
    pub fn global_write(&mut self, buf: BufferHandle, offset: usize, words: &[f32]) -> Result<()> {
        let span = words.len() * WORD_BYTES;
        let r = (|| {
            let base = self.resolve(buf, offset, span)?;
            self.check_global_hazard(base, span, true)?;
            let mut global = lock(&self.shared.global);
            global.write(base, &words_to_bytes(words))
        })();
        self.track(r)?;
        self.stats.global_write_words += words.len() as u64;
        Ok(())
    }

    /// Copy words from a global buffer into the caller's arena.
    pub fn global_to_local(
        &mut self,
        buf: BufferHandle,
        offset: usize,
        local_offset: usize,
        nwords: usize,
    ) -> Result<()> {
        let words = self.global_read(buf, offset, nwords)?;
        self.local_write_words(local_offset, &words)
    }

    /// Copy words from the caller's arena into a global buffer.
    pub fn local_to_global(
        &mut self,
        local_offset: usize,
        buf: BufferHandle,
        offset: usize,
        nwords: usize,
    ) -> Result<()> {
        let words = self.local_read_words(local_offset, nwords)?;
        self.global_write(buf, offset, &words)
    }
}
