//! Device-side PGAS runtime nested inside a kernel.
//!
//! Each launch gets a fresh SHMEM job: the symmetric heap starts empty and
//! everything allocated from it disappears when the kernel exits. Memory
//! follows phase semantics:
//!
//! * `put` stages a payload against the target PE. The target sees it only
//!   after the next `barrier_all`.
//! * `get` from another PE observes that PE's heap as committed at the last
//!   barrier. Writes made during the current epoch (by anyone) are not
//!   visible to it. A get from the caller's own heap reads its live memory.
//! * Two different PEs staging overlapping bytes on the same target within
//!   one epoch is a write race and fails the launch.
//! * At a barrier the staged puts are applied in ascending source-PE order,
//!   each source's puts in program order.

use std::fmt;
use std::io;

use crate::engine::lock;
use crate::error::{DeviceError, Result};
use crate::kernel::KernelContext;
use crate::mesh::{check_aligned, hop_distance, PeId, WORD_BYTES};

/// Offset into the symmetric heap; addresses the same storage on every PE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymAddr(pub usize);

impl SymAddr {
    pub fn offset(self) -> usize {
        self.0
    }

    /// The address `bytes` further into the heap.
    pub fn advance(self, bytes: usize) -> SymAddr {
        SymAddr(self.0 + bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceOp {
    Put,
    Get,
    Barrier,
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceOp::Put => "put",
            TraceOp::Get => "get",
            TraceOp::Barrier => "barrier",
        })
    }
}

/// One SHMEM call. `src_pe` is the issuing PE and `dst_pe` its peer, so a
/// get moves data from `dst_pe` to `src_pe`. Barrier records carry the
/// arriving PE in both fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub epoch: u64,
    pub op: TraceOp,
    pub src_pe: usize,
    pub dst_pe: usize,
    pub offset: usize,
    pub nwords: usize,
}

pub const TRACE_HEADER: &str = "epoch,op,src_pe,dst_pe,offset,nwords";

impl TraceRecord {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.op, self.src_pe, self.dst_pe, self.offset, self.nwords
        )
    }
}

/// Write trace records as CSV, header first.
pub fn write_trace_csv<W: io::Write>(mut out: W, records: &[TraceRecord]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub(crate) struct StagedPut {
    pub source: PeId,
    pub target: PeId,
    pub offset: usize,
    pub payload: Vec<u8>,
}

/// Launch-wide SHMEM state.
#[derive(Debug)]
pub(crate) struct ShmemShared {
    pub epoch: u64,
    pending: Vec<StagedPut>,
    alloc_logs: Vec<Vec<usize>>,
}

impl ShmemShared {
    pub fn new(n_pes: usize) -> Self {
        Self {
            epoch: 0,
            pending: Vec::new(),
            alloc_logs: vec![Vec::new(); n_pes],
        }
    }

    fn stage(&mut self, put: StagedPut) -> Result<()> {
        let end = put.offset + put.payload.len();
        for other in &self.pending {
            if other.target == put.target
                && other.source != put.source
                && other.offset < end
                && put.offset < other.offset + other.payload.len()
            {
                let lo = other.offset.max(put.offset);
                let hi = end.min(other.offset + other.payload.len());
                return Err(DeviceError::WriteRace {
                    target: put.target,
                    offset: lo,
                    span: hi - lo,
                    first: other.source.min(put.source),
                    second: other.source.max(put.source),
                    epoch: self.epoch,
                });
            }
        }
        self.pending.push(put);
        Ok(())
    }

    pub fn drain_pending(&mut self) -> Vec<StagedPut> {
        let mut puts = std::mem::take(&mut self.pending);
        puts.sort_by_key(|p| p.source);
        puts
    }

    /// Every PE must have issued the same allocation sequence.
    pub fn check_collective_allocs(&self) -> Result<()> {
        let Some(first) = self.alloc_logs.first() else {
            return Ok(());
        };
        for (pe, log) in self.alloc_logs.iter().enumerate().skip(1) {
            if log != first {
                return Err(DeviceError::CollectiveMismatch(format!(
                    "PE {pe} allocated {log:?} but PE 0 allocated {first:?} by epoch {}",
                    self.epoch
                )));
            }
        }
        Ok(())
    }
}

impl KernelContext<'_> {
    pub fn my_pe(&self) -> PeId {
        self.pe
    }

    /// Number of PEs in this launch (the work-group size).
    pub fn n_pes(&self) -> usize {
        self.shared.n_pes
    }

    fn trace(&mut self, op: TraceOp, dst: PeId, offset: usize, nwords: usize) {
        if self.shared.tracing {
            self.trace.push(TraceRecord {
                epoch: self.epoch,
                op,
                src_pe: self.pe.0,
                dst_pe: dst.0,
                offset,
                nwords,
            });
        }
    }

    fn check_peer(&self, pe: PeId) -> Result<()> {
        if pe.0 >= self.shared.n_pes {
            return Err(DeviceError::PeOutOfBounds {
                pe: pe.0,
                pes: self.shared.n_pes,
            });
        }
        Ok(())
    }

    fn check_heap_range(&self, owner: PeId, addr: SymAddr, span: usize) -> Result<()> {
        check_aligned(addr.0, span)?;
        let limit = self.shared.cfg.sym_heap_bytes;
        if addr.0 < limit && addr.0 + span <= limit {
            Ok(())
        } else {
            Err(DeviceError::ArenaFault {
                pe: owner,
                offset: addr.0,
                span,
                limit,
            })
        }
    }

    /// Collective allocation from the symmetric heap. All PEs must request
    /// the same sizes in the same order; the returned region is zeroed.
    pub fn shm_alloc(&mut self, size: usize) -> Result<SymAddr> {
        let r = self.shm_alloc_inner(size);
        self.track(r)
    }

    fn shm_alloc_inner(&mut self, size: usize) -> Result<SymAddr> {
        if !size.is_multiple_of(WORD_BYTES) {
            return Err(DeviceError::BadAllocSize(size));
        }
        let remaining = self.shared.cfg.sym_heap_bytes - self.heap_top;
        if size > remaining {
            return Err(DeviceError::HeapExhausted {
                pe: self.pe,
                requested: size,
                remaining,
            });
        }
        let addr = SymAddr(self.heap_top);
        if size > 0 {
            self.with_own_arena_mut(addr.0, size, |region| region.fill(0))?;
        }
        self.heap_top += size;
        lock(&self.shared.shmem).alloc_logs[self.pe.0].push(size);
        Ok(addr)
    }

    /// Bytes of symmetric heap allocated so far in this launch.
    pub fn heap_used(&self) -> usize {
        self.heap_top
    }

    /// Stage `nwords` words from the caller's arena at `src_offset` into
    /// `dest` on `target`. Visible to the target after the next barrier.
    pub fn put(&mut self, dest: SymAddr, src_offset: usize, nwords: usize, target: PeId) -> Result<()> {
        let r = self.put_inner(dest, src_offset, nwords, target);
        self.track(r)
    }

    fn put_inner(&mut self, dest: SymAddr, src_offset: usize, nwords: usize, target: PeId) -> Result<()> {
        self.check_peer(target)?;
        let span = nwords * WORD_BYTES;
        self.check_heap_range(target, dest, span)?;
        let payload = self.read_own_raw(src_offset, span)?;
        let hops = hop_distance(self.pe, target, &self.shared.cfg)?;
        if span > 0 {
            lock(&self.shared.shmem).stage(StagedPut {
                source: self.pe,
                target,
                offset: dest.0,
                payload,
            })?;
        }
        self.stats.remote_words += nwords as u64;
        self.stats.remote_word_hops += (nwords * hops) as u64;
        self.trace(TraceOp::Put, target, dest.0, nwords);
        Ok(())
    }

    /// Copy `nwords` words from `src` on `source` into the caller's arena at
    /// `dest_offset`.
    pub fn get(&mut self, dest_offset: usize, src: SymAddr, nwords: usize, source: PeId) -> Result<()> {
        let r = self.get_inner(dest_offset, src, nwords, source);
        self.track(r)
    }

    fn get_inner(&mut self, dest_offset: usize, src: SymAddr, nwords: usize, source: PeId) -> Result<()> {
        self.check_peer(source)?;
        let span = nwords * WORD_BYTES;
        self.check_heap_range(source, src, span)?;
        let data = if source == self.pe {
            self.read_own_raw(src.0, span)?
        } else {
            let snap = lock(&self.shared.snapshots[source.0]);
            match snap.as_ref() {
                Some(committed) => committed[src.0..src.0 + span].to_vec(),
                None => lock(&self.shared.locals[source.0]).read(src.0, span)?.to_vec(),
            }
        };
        self.with_own_arena_mut(dest_offset, span, |dst| dst.copy_from_slice(&data))?;
        let hops = hop_distance(self.pe, source, &self.shared.cfg)?;
        self.stats.remote_words += nwords as u64;
        self.stats.remote_word_hops += (nwords * hops) as u64;
        self.trace(TraceOp::Get, source, src.0, nwords);
        Ok(())
    }

    /// Collective barrier. Commits all staged puts before any PE continues.
    pub fn barrier_all(&mut self) -> Result<()> {
        self.trace(TraceOp::Barrier, self.pe, 0, 0);
        self.stats.barriers += 1;
        let r = self.shared.arrive(self.pe.0);
        self.track(r)?;
        self.epoch += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(source: usize, target: usize, offset: usize, words: usize) -> StagedPut {
        StagedPut {
            source: PeId(source),
            target: PeId(target),
            offset,
            payload: vec![0; words * WORD_BYTES],
        }
    }

    #[test]
    fn staging_detects_cross_source_overlap_only() {
        let mut sh = ShmemShared::new(8);
        sh.stage(put(2, 5, 0, 4)).unwrap();
        // same source may overwrite itself
        sh.stage(put(2, 5, 4, 4)).unwrap();
        // adjacent, disjoint
        sh.stage(put(3, 5, 32, 1)).unwrap();
        // same offset on a different target
        sh.stage(put(3, 6, 0, 4)).unwrap();
        let err = sh.stage(put(3, 5, 12, 1)).unwrap_err();
        assert_eq!(
            err,
            DeviceError::WriteRace {
                target: PeId(5),
                offset: 12,
                span: 4,
                first: PeId(2),
                second: PeId(3),
                epoch: 0
            }
        );
    }

    #[test]
    fn drain_orders_by_source_and_keeps_program_order() {
        let mut sh = ShmemShared::new(4);
        sh.stage(put(3, 0, 0, 1)).unwrap();
        sh.stage(put(1, 0, 8, 1)).unwrap();
        sh.stage(put(1, 0, 4, 1)).unwrap();
        let order: Vec<_> = sh.drain_pending().iter().map(|p| (p.source.0, p.offset)).collect();
        assert_eq!(order, vec![(1, 8), (1, 4), (3, 0)]);
        assert!(sh.drain_pending().is_empty());
    }

    #[test]
    fn trace_csv_layout() {
        let mut out = Vec::new();
        let rec = TraceRecord {
            epoch: 2,
            op: TraceOp::Put,
            src_pe: 1,
            dst_pe: 0,
            offset: 4096,
            nwords: 1024,
        };
        write_trace_csv(&mut out, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,op,src_pe,dst_pe,offset,nwords\n2,put,1,0,4096,1024\n"
        );
    }
}
