//! Launch engine: runs one kernel body per PE as a phase-parallel job.
//!
//! Every PE body runs on its own thread, but the engine decides which PEs
//! may execute during a phase (the interval between two barriers). With a
//! sequential [`Schedule`] exactly one PE runs at a time in the chosen order;
//! with [`Schedule::Concurrent`] all PEs of the phase run at once. Remote
//! effects are committed only at barriers, so every schedule produces the
//! same memory contents and counters.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DeviceError, Result};
use crate::kernel::{KernelArg, KernelContext, KernelFn};
use crate::mesh::{DeviceConfig, GlobalStore, LocalStore, PeId};
use crate::offload::BufferHandle;
use crate::shmem::{ShmemShared, TraceRecord};
use crate::stats::TrafficStats;

/// Order in which PEs execute within a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// One PE at a time, ascending PE id.
    #[default]
    InOrder,
    /// One PE at a time, descending PE id.
    Reverse,
    /// One PE at a time, in a per-phase permutation drawn from the seed.
    Shuffled(u64),
    /// All PEs of a phase run simultaneously on their own threads.
    Concurrent,
}

impl Schedule {
    fn order(self, epoch: u64, mut ready: Vec<usize>) -> Vec<usize> {
        match self {
            Schedule::InOrder | Schedule::Concurrent => ready,
            Schedule::Reverse => {
                ready.reverse();
                ready
            }
            Schedule::Shuffled(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                ready.shuffle(&mut rng);
                ready
            }
        }
    }
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PeState {
    Ready,
    Running,
    AtBarrier,
    Done,
}

struct SchedState {
    state: Vec<PeState>,
    permit: Vec<bool>,
    results: Vec<Option<Result<()>>>,
    abort: bool,
}

/// Memory and synchronization state shared by the PEs of one launch.
pub(crate) struct LaunchShared {
    pub cfg: DeviceConfig,
    pub n_pes: usize,
    pub locals: Vec<Mutex<LocalStore>>,
    /// Committed copy of a PE's symmetric heap, taken on the owner's first
    /// write of the current epoch. Remote gets read from it when present.
    pub snapshots: Vec<Mutex<Option<Vec<u8>>>>,
    pub global: Mutex<GlobalStore>,
    /// Global word index -> writing PE, for the current epoch.
    pub global_writes: Mutex<HashMap<usize, PeId>>,
    pub buffers: Vec<BufferHandle>,
    pub shmem: Mutex<ShmemShared>,
    pub tracing: bool,
    sched: Mutex<SchedState>,
    wake: Condvar,
}

/// Device memory handed back after a launch, whatever its outcome.
pub(crate) struct Reclaimed {
    pub locals: Vec<LocalStore>,
    pub global: GlobalStore,
}

pub(crate) struct LaunchOutput {
    pub per_pe: Vec<TrafficStats>,
    pub trace: Vec<TraceRecord>,
}

impl LaunchShared {
    pub fn new(
        cfg: DeviceConfig,
        n_pes: usize,
        locals: Vec<LocalStore>,
        global: GlobalStore,
        buffers: Vec<BufferHandle>,
        tracing: bool,
    ) -> Self {
        let total = locals.len();
        Self {
            cfg,
            n_pes,
            locals: locals.into_iter().map(Mutex::new).collect(),
            snapshots: (0..total).map(|_| Mutex::new(None)).collect(),
            global: Mutex::new(global),
            global_writes: Mutex::new(HashMap::new()),
            buffers,
            shmem: Mutex::new(ShmemShared::new(n_pes)),
            tracing,
            sched: Mutex::new(SchedState {
                state: vec![PeState::Ready; n_pes],
                permit: vec![false; n_pes],
                results: vec![None; n_pes],
                abort: false,
            }),
            wake: Condvar::new(),
        }
    }

    pub fn into_memory(self) -> Reclaimed {
        Reclaimed {
            locals: self
                .locals
                .into_iter()
                .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()))
                .collect(),
            global: self.global.into_inner().unwrap_or_else(|e| e.into_inner()),
        }
    }

    fn wait_permit(&self, pe: usize) -> Result<()> {
        let mut s = lock(&self.sched);
        while !s.permit[pe] && !s.abort {
            s = self.wake.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        if s.abort {
            Err(DeviceError::Aborted)
        } else {
            Ok(())
        }
    }

    /// Called by a PE at `barrier_all`: yields the PE until the engine
    /// commits the barrier and schedules the next phase.
    pub fn arrive(&self, pe: usize) -> Result<()> {
        {
            let mut s = lock(&self.sched);
            s.state[pe] = PeState::AtBarrier;
            s.permit[pe] = false;
        }
        self.wake.notify_all();
        self.wait_permit(pe)
    }

    fn finish(&self, pe: usize, result: Result<()>) {
        {
            let mut s = lock(&self.sched);
            s.state[pe] = PeState::Done;
            s.permit[pe] = false;
            s.results[pe] = Some(result);
        }
        self.wake.notify_all();
    }

    fn abort(&self) {
        lock(&self.sched).abort = true;
        self.wake.notify_all();
    }

    fn grant(&self, pes: &[usize]) {
        {
            let mut s = lock(&self.sched);
            for &pe in pes {
                s.permit[pe] = true;
                s.state[pe] = PeState::Running;
            }
        }
        self.wake.notify_all();
    }

    fn wait_idle(&self, pes: &[usize]) {
        let mut s = lock(&self.sched);
        while pes.iter().any(|&pe| s.state[pe] == PeState::Running) {
            s = self.wake.wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn run_phase(&self, schedule: Schedule, epoch: u64) {
        let ready: Vec<usize> = {
            let s = lock(&self.sched);
            (0..self.n_pes).filter(|&pe| s.state[pe] == PeState::Ready).collect()
        };
        match schedule {
            Schedule::Concurrent => {
                self.grant(&ready);
                self.wait_idle(&ready);
            }
            _ => {
                for pe in schedule.order(epoch, ready) {
                    self.grant(&[pe]);
                    self.wait_idle(&[pe]);
                }
            }
        }
    }

    /// Decide what follows a completed phase.
    fn after_phase(&self, epoch: u64) -> Result<bool> {
        let s = lock(&self.sched);
        // first genuine failure by PE id wins; Aborted is only a consequence
        let failure = s
            .results
            .iter()
            .flatten()
            .filter_map(|r| r.as_ref().err())
            .find(|e| **e != DeviceError::Aborted);
        if let Some(e) = failure {
            return Err(e.clone());
        }
        let done: Vec<PeId> = (0..self.n_pes)
            .filter(|&pe| s.state[pe] == PeState::Done)
            .map(PeId)
            .collect();
        if done.len() == self.n_pes {
            return Ok(true);
        }
        if !done.is_empty() {
            return Err(DeviceError::Deadlock { epoch, missing: done });
        }
        debug_assert!(s.state.iter().all(|&st| st == PeState::AtBarrier));
        Ok(false)
    }

    fn mark_ready(&self) {
        let mut s = lock(&self.sched);
        for st in s.state.iter_mut() {
            if *st == PeState::AtBarrier {
                *st = PeState::Ready;
            }
        }
    }

    fn drive(&self, schedule: Schedule) -> Result<()> {
        let mut epoch = 0;
        loop {
            self.run_phase(schedule, epoch);
            if self.after_phase(epoch)? {
                // kernel exit acts as a final synchronization point
                return self.commit_epoch();
            }
            self.commit_epoch()?;
            self.mark_ready();
            epoch += 1;
        }
    }

    /// Commit staged puts, verify collective allocations and open the next
    /// epoch.
    fn commit_epoch(&self) -> Result<()> {
        let mut sh = lock(&self.shmem);
        sh.check_collective_allocs()?;
        for put in sh.drain_pending() {
            let mut target = lock(&self.locals[put.target.0]);
            target.write(put.offset, &put.payload)?;
        }
        sh.epoch += 1;
        drop(sh);
        for snap in &self.snapshots {
            *lock(snap) = None;
        }
        lock(&self.global_writes).clear();
        Ok(())
    }
}

/// Run `entry` on PEs `0..shared.n_pes` to completion.
pub(crate) fn run_launch(
    shared: &LaunchShared,
    entry: &KernelFn,
    args: &[KernelArg],
    schedule: Schedule,
) -> Result<LaunchOutput> {
    let (outcome, outputs) = thread::scope(|scope| {
        let handles: Vec<_> = (0..shared.n_pes)
            .map(|pe| scope.spawn(move || pe_main(shared, pe, entry, args)))
            .collect();
        let outcome = shared.drive(schedule);
        if outcome.is_err() {
            shared.abort();
        }
        let outputs: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("PE thread panicked outside kernel body"))
            .collect();
        (outcome, outputs)
    });
    outcome?;

    let mut per_pe = Vec::with_capacity(outputs.len());
    let mut trace = Vec::new();
    for (stats, records) in outputs {
        per_pe.push(stats);
        trace.extend(records);
    }
    // per-PE traces are in program order; a stable sort interleaves them by
    // epoch then issuing PE
    trace.sort_by_key(|r| (r.epoch, r.src_pe));
    Ok(LaunchOutput { per_pe, trace })
}

fn pe_main(shared: &LaunchShared, pe: usize, entry: &KernelFn, args: &[KernelArg]) -> (TrafficStats, Vec<TraceRecord>) {
    let mut ctx = KernelContext::new(PeId(pe), shared, args);
    let result = match shared.wait_permit(pe) {
        Err(e) => Err(e),
        Ok(()) => catch_unwind(AssertUnwindSafe(|| entry(&mut ctx))).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "non-string panic payload".into());
            Err(DeviceError::KernelPanic { pe: PeId(pe), message })
        }),
    };
    let result = match ctx.take_fault() {
        Some(fault) => Err(fault),
        None => result,
    };
    let (stats, trace) = ctx.into_parts();
    shared.finish(pe, result);
    (stats, trace)
}
