//! Host-side offload runtime: global buffers, kernel registration, and
//! enqueue of a kernel over a single work-group of PEs.
//!
//! One work-item runs on one PE, so the work-group can never be larger than
//! the core count. Host buffer transfers are staging outside the modeled
//! kernel time and are not counted in [`TrafficStats`](crate::TrafficStats).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::engine::{run_launch, LaunchShared, Schedule};
use crate::error::{DeviceError, Result};
use crate::kernel::{ArgKind, KernelArg, KernelContext, KernelFn};
use crate::mesh::{
    bytes_to_words, check_aligned, words_to_bytes, DeviceConfig, GlobalStore, LocalStore, PeId, WORD_BYTES,
};
use crate::shmem::TraceRecord;
use crate::stats::LaunchStats;

/// A region of global memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferHandle {
    id: u32,
    base: usize,
    size: usize,
}

impl BufferHandle {
    pub fn id(&self) -> u32 {
        self.id
    }

    /// Byte offset into global memory.
    pub fn base(&self) -> usize {
        self.base
    }

    /// Size in bytes.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn words(&self) -> usize {
        self.size / WORD_BYTES
    }

    /// Absolute global address of `[offset, offset + span)` in this buffer.
    pub(crate) fn checked_range(&self, offset: usize, span: usize) -> Result<usize> {
        match offset.checked_add(span) {
            Some(end) if end <= self.size => Ok(self.base + offset),
            _ => Err(DeviceError::BufferBounds {
                buffer: self.id,
                offset,
                span,
                size: self.size,
            }),
        }
    }
}

/// A registered device function and its parameter list.
#[derive(Clone)]
pub struct KernelDescriptor {
    pub name: String,
    pub params: Vec<ArgKind>,
    pub entry: KernelFn,
}

impl KernelDescriptor {
    pub fn new<F>(name: impl Into<String>, params: Vec<ArgKind>, entry: F) -> Self
    where
        F: Fn(&mut KernelContext<'_>) -> Result<()> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            params,
            entry: Arc::new(entry),
        }
    }
}

impl fmt::Debug for KernelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelDescriptor")
            .field("name", &self.name)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

/// Result of a completed launch.
#[derive(Debug, Clone)]
pub struct LaunchRecord {
    pub kernel: String,
    pub work_items: usize,
    pub args: Vec<KernelArg>,
    pub schedule: Schedule,
    pub stats: LaunchStats,
    /// SHMEM call trace; empty unless tracing is enabled on the device.
    pub trace: Vec<TraceRecord>,
}

/// The simulated coprocessor as seen from the host.
pub struct Device {
    cfg: DeviceConfig,
    global: GlobalStore,
    locals: Vec<LocalStore>,
    buffers: Vec<BufferHandle>,
    next_base: usize,
    next_id: u32,
    kernels: BTreeMap<String, KernelDescriptor>,
    schedule: Schedule,
    tracing: bool,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("cfg", &self.cfg)
            .field("buffers", &self.buffers)
            .field("kernels", &self.kernels.keys().collect::<Vec<_>>())
            .field("schedule", &self.schedule)
            .finish_non_exhaustive()
    }
}

impl Device {
    /// A device with zeroed memory and no buffers or kernels.
    pub fn new(cfg: DeviceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            global: GlobalStore::new(cfg.global_mem_bytes),
            locals: (0..cfg.pes()).map(|pe| LocalStore::new(PeId(pe), &cfg)).collect(),
            buffers: Vec::new(),
            next_base: 0,
            next_id: 0,
            kernels: BTreeMap::new(),
            schedule: Schedule::default(),
            tracing: false,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    /// Schedule used by [`enqueue_kernel`](Self::enqueue_kernel).
    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.schedule = schedule;
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.tracing = on;
    }

    /// Host view of a PE's local arena, for inspection between launches.
    pub fn local_store(&self, pe: PeId) -> Result<&LocalStore> {
        self.locals.get(pe.0).ok_or(DeviceError::PeOutOfBounds {
            pe: pe.0,
            pes: self.cfg.pes(),
        })
    }

    /// Bump-allocate a zeroed global buffer.
    pub fn create_buffer(&mut self, size: usize) -> Result<BufferHandle> {
        if size == 0 || !size.is_multiple_of(WORD_BYTES) {
            return Err(DeviceError::BadAllocSize(size));
        }
        let available = self.cfg.global_mem_bytes - self.next_base;
        if size > available {
            return Err(DeviceError::GlobalExhausted {
                requested: size,
                available,
            });
        }
        let buf = BufferHandle {
            id: self.next_id,
            base: self.next_base,
            size,
        };
        self.global.fill(buf.base, size, 0)?;
        self.next_base += size;
        self.next_id += 1;
        self.buffers.push(buf);
        Ok(buf)
    }

    /// Release every buffer and zero all device memory. Registered kernels
    /// are kept.
    pub fn reset(&mut self) {
        self.buffers.clear();
        self.next_base = 0;
        self.global = GlobalStore::new(self.cfg.global_mem_bytes);
        self.locals = (0..self.cfg.pes())
            .map(|pe| LocalStore::new(PeId(pe), &self.cfg))
            .collect();
    }

    fn live(&self, buf: &BufferHandle) -> Result<()> {
        if self.buffers.contains(buf) {
            Ok(())
        } else {
            Err(DeviceError::StaleBuffer(buf.id))
        }
    }

    /// Host write of words into a buffer at byte `offset`.
    pub fn write_buffer(&mut self, buf: &BufferHandle, offset: usize, data: &[f32]) -> Result<()> {
        self.live(buf)?;
        let span = data.len() * WORD_BYTES;
        check_aligned(offset, span)?;
        let base = buf.checked_range(offset, span)?;
        self.global.write(base, &words_to_bytes(data))
    }

    /// Host read of `nwords` words from a buffer at byte `offset`.
    pub fn read_buffer(&self, buf: &BufferHandle, offset: usize, nwords: usize) -> Result<Vec<f32>> {
        self.live(buf)?;
        let span = nwords * WORD_BYTES;
        check_aligned(offset, span)?;
        let base = buf.checked_range(offset, span)?;
        Ok(bytes_to_words(self.global.read(base, span)?))
    }

    /// The whole buffer as words.
    pub fn read_buffer_all(&self, buf: &BufferHandle) -> Result<Vec<f32>> {
        self.read_buffer(buf, 0, buf.words())
    }

    pub fn register(&mut self, kernel: KernelDescriptor) -> Result<()> {
        if self.kernels.contains_key(&kernel.name) {
            return Err(DeviceError::DuplicateKernel(kernel.name));
        }
        self.kernels.insert(kernel.name.clone(), kernel);
        Ok(())
    }

    pub fn has_kernel(&self, name: &str) -> bool {
        self.kernels.contains_key(name)
    }

    pub fn enqueue_kernel(&mut self, kernel: &str, work_items: usize, args: &[KernelArg]) -> Result<LaunchRecord> {
        self.enqueue_kernel_with(kernel, work_items, args, self.schedule)
    }

    /// Run `kernel` on PEs `0..work_items` with an explicit PE schedule.
    ///
    /// Each launch carries its own SHMEM job: the symmetric heap is empty on
    /// entry and nothing allocated or staged survives the launch.
    pub fn enqueue_kernel_with(
        &mut self,
        kernel: &str,
        work_items: usize,
        args: &[KernelArg],
        schedule: Schedule,
    ) -> Result<LaunchRecord> {
        let desc = self
            .kernels
            .get(kernel)
            .ok_or_else(|| DeviceError::UnknownKernel(kernel.to_string()))?;
        if work_items == 0 {
            return Err(DeviceError::EmptyWorkGroup);
        }
        if work_items > self.cfg.pes() {
            return Err(DeviceError::TooManyWorkItems {
                work_items,
                pes: self.cfg.pes(),
            });
        }
        check_signature(desc, args)?;
        for arg in args {
            if let KernelArg::Buffer(b) = arg {
                self.live(b)?;
            }
        }
        let entry = desc.entry.clone();
        let name = desc.name.clone();

        let shared = LaunchShared::new(
            self.cfg,
            work_items,
            std::mem::take(&mut self.locals),
            std::mem::replace(&mut self.global, GlobalStore::new(0)),
            self.buffers.clone(),
            self.tracing,
        );
        let outcome = run_launch(&shared, &entry, args, schedule);
        let memory = shared.into_memory();
        self.locals = memory.locals;
        self.global = memory.global;
        let out = outcome?;

        Ok(LaunchRecord {
            kernel: name,
            work_items,
            args: args.to_vec(),
            schedule,
            stats: LaunchStats::from_per_pe(out.per_pe),
            trace: out.trace,
        })
    }
}

fn check_signature(desc: &KernelDescriptor, args: &[KernelArg]) -> Result<()> {
    let mismatch = |detail: String| {
        Err(DeviceError::Signature {
            kernel: desc.name.clone(),
            detail,
        })
    };
    if args.len() != desc.params.len() {
        return mismatch(format!("expected {} arguments, got {}", desc.params.len(), args.len()));
    }
    for (i, (arg, want)) in args.iter().zip(&desc.params).enumerate() {
        if arg.kind() != *want {
            return mismatch(format!("argument {i} is {:?}, expected {want:?}", arg.kind()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device() -> Device {
        Device::new(DeviceConfig::default()).unwrap()
    }

    #[test]
    fn first_buffer_starts_at_zero_and_buffers_are_disjoint() {
        let mut d = device();
        let a = d.create_buffer(4).unwrap();
        assert_eq!(a.base(), 0);
        let b = d.create_buffer(64).unwrap();
        assert!(b.base() >= a.base() + a.size());
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn allocation_failures() {
        let mut d = device();
        let total = d.config().global_mem_bytes;
        assert_eq!(
            d.create_buffer(total + 4).unwrap_err(),
            DeviceError::GlobalExhausted {
                requested: total + 4,
                available: total
            }
        );
        assert!(matches!(d.create_buffer(0), Err(DeviceError::BadAllocSize(0))));
        assert!(matches!(d.create_buffer(6), Err(DeviceError::BadAllocSize(6))));
        d.create_buffer(total).unwrap();
        assert!(matches!(
            d.create_buffer(4),
            Err(DeviceError::GlobalExhausted { available: 0, .. })
        ));
        d.reset();
        assert_eq!(d.create_buffer(total).unwrap().base(), 0);
    }

    #[test]
    fn buffer_round_trip_and_bounds() {
        let mut d = device();
        let b = d.create_buffer(16).unwrap();
        d.write_buffer(&b, 0, &[1.0, 2.0]).unwrap();
        assert_eq!(d.read_buffer(&b, 0, 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(d.read_buffer_all(&b).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            d.read_buffer(&b, 16, 1),
            Err(DeviceError::BufferBounds { .. })
        ));
        assert!(matches!(
            d.write_buffer(&b, 12, &[1.0, 2.0]),
            Err(DeviceError::BufferBounds { .. })
        ));
        d.write_buffer(&b, 8, &[]).unwrap();
        assert_eq!(d.read_buffer_all(&b).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(d.read_buffer(&b, 2, 1), Err(DeviceError::Alignment { .. })));
    }

    #[test]
    fn released_buffers_are_stale() {
        let mut d = device();
        let b = d.create_buffer(16).unwrap();
        d.reset();
        assert_eq!(d.read_buffer(&b, 0, 1).unwrap_err(), DeviceError::StaleBuffer(b.id()));
    }

    #[test]
    fn launch_validation() {
        let mut d = device();
        d.register(KernelDescriptor::new("noop", vec![ArgKind::Scalar], |_| Ok(())))
            .unwrap();
        assert!(matches!(
            d.register(KernelDescriptor::new("noop", vec![], |_| Ok(()))),
            Err(DeviceError::DuplicateKernel(_))
        ));
        assert_eq!(
            d.enqueue_kernel("noop", 17, &[KernelArg::Scalar(0)]).unwrap_err(),
            DeviceError::TooManyWorkItems {
                work_items: 17,
                pes: 16
            }
        );
        assert_eq!(
            d.enqueue_kernel("noop", 0, &[KernelArg::Scalar(0)]).unwrap_err(),
            DeviceError::EmptyWorkGroup
        );
        assert!(matches!(
            d.enqueue_kernel("missing", 1, &[]),
            Err(DeviceError::UnknownKernel(_))
        ));
        assert!(matches!(
            d.enqueue_kernel("noop", 1, &[]),
            Err(DeviceError::Signature { .. })
        ));
        let b = d.create_buffer(4).unwrap();
        assert!(matches!(
            d.enqueue_kernel("noop", 1, &[KernelArg::Buffer(b)]),
            Err(DeviceError::Signature { .. })
        ));
        let rec = d.enqueue_kernel("noop", 16, &[KernelArg::Scalar(0)]).unwrap();
        assert_eq!(rec.stats.pes(), 16);
        assert_eq!(rec.stats.aggregate, Default::default());
    }
}
