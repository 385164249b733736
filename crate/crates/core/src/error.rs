use thiserror::Error;

use crate::mesh::PeId;

/// Errors raised by the simulated device, the offload runtime and the
/// SHMEM runtime.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("invalid device configuration: {0}")]
    InvalidConfig(String),

    #[error("coordinate ({row}, {col}) outside {rows}x{cols} grid")]
    CoordOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("PE {pe} outside device of {pes} PEs")]
    PeOutOfBounds { pe: usize, pes: usize },

    #[error("arena fault on PE {pe}: access [{offset}, {offset}+{span}) outside {limit} bytes")]
    ArenaFault {
        pe: PeId,
        offset: usize,
        span: usize,
        limit: usize,
    },

    #[error("global memory fault: access [{offset}, {offset}+{span}) outside {limit} bytes")]
    GlobalFault { offset: usize, span: usize, limit: usize },

    #[error("misaligned access at byte {offset} (span {span}); word size is {word} bytes")]
    Alignment { offset: usize, span: usize, word: usize },

    #[error("buffer access [{offset}, {offset}+{span}) outside buffer {buffer} of {size} bytes")]
    BufferBounds {
        buffer: u32,
        offset: usize,
        span: usize,
        size: usize,
    },

    #[error("unknown or released buffer {0}")]
    StaleBuffer(u32),

    #[error("global allocation of {requested} bytes failed: {available} bytes available")]
    GlobalExhausted { requested: usize, available: usize },

    #[error("invalid allocation size {0}: must be a positive multiple of the word size")]
    BadAllocSize(usize),

    #[error("kernel `{0}` is already registered")]
    DuplicateKernel(String),

    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),

    #[error("kernel `{kernel}` signature mismatch: {detail}")]
    Signature { kernel: String, detail: String },

    #[error(
        "launch rejected: {work_items} work-items exceed the {pes} physical cores \
         (the work-group size is bounded by the core count)"
    )]
    TooManyWorkItems { work_items: usize, pes: usize },

    #[error("launch rejected: work-group size must be at least 1")]
    EmptyWorkGroup,

    #[error("symmetric heap exhausted on PE {pe}: requested {requested} bytes, {remaining} remaining")]
    HeapExhausted {
        pe: PeId,
        requested: usize,
        remaining: usize,
    },

    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),

    #[error(
        "write race on PE {target}: bytes [{offset}, {offset}+{span}) staged by PE {first} and PE {second} in epoch {epoch}"
    )]
    WriteRace {
        target: PeId,
        offset: usize,
        span: usize,
        first: PeId,
        second: PeId,
        epoch: u64,
    },

    #[error("global memory race at byte {offset} between PE {first} and PE {second} in epoch {epoch}")]
    GlobalRace {
        offset: usize,
        first: PeId,
        second: PeId,
        epoch: u64,
    },

    #[error("deadlock in epoch {epoch}: PEs {missing:?} returned without reaching the barrier")]
    Deadlock { epoch: u64, missing: Vec<PeId> },

    #[error("PE {pe} panicked: {message}")]
    KernelPanic { pe: PeId, message: String },

    #[error("kernel argument {index}: {detail}")]
    BadArgument { index: usize, detail: String },

    #[error("kernel failed on PE {pe}: {detail}")]
    KernelFailure { pe: PeId, detail: String },

    #[error("launch aborted")]
    Aborted,
}

pub type Result<T, E = DeviceError> = std::result::Result<T, E>;
