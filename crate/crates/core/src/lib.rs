//! A deterministic simulator of a 2D-mesh many-core coprocessor with two
//! nested runtimes:
//!
//! * a host-side offload API ([`Device`]) that manages global buffers and
//!   enqueues registered kernels over a single work-group of PEs, and
//! * a device-side SHMEM-style PGAS API ([`KernelContext::shm_alloc`],
//!   [`put`](KernelContext::put), [`get`](KernelContext::get),
//!   [`barrier_all`](KernelContext::barrier_all)) that exists only for the
//!   lifetime of one kernel launch.
//!
//! On top of these, [`cannon`] implements Cannon's matrix multiply twice
//! (global-memory-only and put/barrier with on-chip re-use) and [`perf`]
//! converts the counted traffic into modeled time and MFLOPS.
//!
//! ```
//! use meshnoc::{cannon, Device, DeviceConfig};
//!
//! let mut device = Device::new(DeviceConfig::default())?;
//! let (a, b) = cannon::seeded_inputs(32, 42);
//! let run = cannon::run_cannon(&mut device, cannon::Mode::Hybrid, 32, 4, &a, &b)?;
//! let stats = run.record.stats.aggregate;
//! assert_eq!(stats.global_read_words, 2 * 32 * 32);
//! assert_eq!(stats.remote_words, 2 * 32 * 32 * 3);
//! # Ok::<(), meshnoc::DeviceError>(())
//! ```
//!
//! The `book/` directory next to the workspace explains the machine model,
//! memory semantics and cost model in prose; its Rust snippets are compiled
//! and run as doctests of this crate.

pub mod cannon;
pub mod cli;
mod engine;
pub mod error;
pub mod kernel;
pub mod mesh;
pub mod offload;
pub mod perf;
pub mod shmem;
pub mod stats;

pub use engine::Schedule;
pub use error::{DeviceError, Result};
pub use kernel::{ArgKind, KernelArg, KernelContext, KernelFn};
pub use mesh::{coord_of, hop_distance, pe_of, DeviceConfig, GlobalStore, GridCoord, LocalStore, PeId, WORD_BYTES};
pub use offload::{BufferHandle, Device, KernelDescriptor, LaunchRecord};
pub use perf::{CostParams, TrafficStats};
pub use shmem::{SymAddr, TraceOp, TraceRecord};
pub use stats::LaunchStats;

// The guide's chapters, compiled so their snippets run under `cargo test`.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/machine.md")]
    pub mod machine {}
    #[doc = include_str!("../../../book/src/offload.md")]
    pub mod offload {}
    #[doc = include_str!("../../../book/src/shmem.md")]
    pub mod shmem {}
    #[doc = include_str!("../../../book/src/cannon.md")]
    pub mod cannon {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    pub mod cost_model {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
