//! The simulated coprocessor: a `rows x cols` mesh of processing elements,
//! each owning a fixed-size local arena, plus one off-chip global store.
//!
//! PEs are numbered row-major. The mesh has no wraparound links, so the
//! distance between two PEs is their Manhattan distance on the grid.

use std::fmt;

use crate::error::{DeviceError, Result};

/// Bytes per machine word. The device computes in single precision.
pub const WORD_BYTES: usize = 4;

/// Shape and memory budget of a simulated device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    pub rows: usize,
    pub cols: usize,
    /// Bytes of local memory per PE.
    pub local_mem_bytes: usize,
    /// Bytes at the base of every local arena reserved for the symmetric heap.
    pub sym_heap_bytes: usize,
    /// Bytes of off-chip global memory.
    pub global_mem_bytes: usize,
}

impl Default for DeviceConfig {
    /// A 16-core device with 32 KB of local memory per core.
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            local_mem_bytes: 32 * 1024,
            sym_heap_bytes: 24 * 1024,
            global_mem_bytes: 32 * 1024 * 1024,
        }
    }
}

impl DeviceConfig {
    /// A default-sized device with a different grid shape.
    pub fn with_grid(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Self::default()
        }
    }

    pub fn word_bytes(&self) -> usize {
        WORD_BYTES
    }

    /// Number of PEs on the device.
    pub fn pes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DeviceError::InvalidConfig(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("grid {}x{} must be non-empty", self.rows, self.cols));
        }
        if self.sym_heap_bytes > self.local_mem_bytes {
            return bad(format!(
                "symmetric heap ({} B) larger than local memory ({} B)",
                self.sym_heap_bytes, self.local_mem_bytes
            ));
        }
        for (name, v) in [
            ("local_mem_bytes", self.local_mem_bytes),
            ("sym_heap_bytes", self.sym_heap_bytes),
            ("global_mem_bytes", self.global_mem_bytes),
        ] {
            if v % WORD_BYTES != 0 {
                return bad(format!("{name} = {v} is not a multiple of {WORD_BYTES}"));
            }
        }
        Ok(())
    }
}

/// Linear, row-major PE number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeId(pub usize);

impl PeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for PeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Position of a PE on the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

impl GridCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

pub fn pe_of(coord: GridCoord, cfg: &DeviceConfig) -> Result<PeId> {
    if coord.row >= cfg.rows || coord.col >= cfg.cols {
        return Err(DeviceError::CoordOutOfBounds {
            row: coord.row,
            col: coord.col,
            rows: cfg.rows,
            cols: cfg.cols,
        });
    }
    Ok(PeId(coord.row * cfg.cols + coord.col))
}

pub fn coord_of(pe: PeId, cfg: &DeviceConfig) -> Result<GridCoord> {
    check_pe(pe, cfg)?;
    Ok(GridCoord {
        row: pe.0 / cfg.cols,
        col: pe.0 % cfg.cols,
    })
}

/// Mesh hops between two PEs. There are no torus links: a logical wrap from
/// column 0 to column `cols - 1` travels the whole row.
pub fn hop_distance(a: PeId, b: PeId, cfg: &DeviceConfig) -> Result<usize> {
    let ca = coord_of(a, cfg)?;
    let cb = coord_of(b, cfg)?;
    Ok(ca.row.abs_diff(cb.row) + ca.col.abs_diff(cb.col))
}

fn check_pe(pe: PeId, cfg: &DeviceConfig) -> Result<()> {
    if pe.0 >= cfg.pes() {
        return Err(DeviceError::PeOutOfBounds {
            pe: pe.0,
            pes: cfg.pes(),
        });
    }
    Ok(())
}

pub(crate) fn check_aligned(offset: usize, span: usize) -> Result<()> {
    if !offset.is_multiple_of(WORD_BYTES) || !span.is_multiple_of(WORD_BYTES) {
        return Err(DeviceError::Alignment {
            offset,
            span,
            word: WORD_BYTES,
        });
    }
    Ok(())
}

/// One PE's local memory. The symmetric heap occupies
/// `[0, sym_heap_bytes)`; the remainder is PE-private.
#[derive(Debug, Clone)]
pub struct LocalStore {
    owner: PeId,
    sym_heap_bytes: usize,
    bytes: Vec<u8>,
}

impl LocalStore {
    pub fn new(owner: PeId, cfg: &DeviceConfig) -> Self {
        Self {
            owner,
            sym_heap_bytes: cfg.sym_heap_bytes,
            bytes: vec![0; cfg.local_mem_bytes],
        }
    }

    pub fn owner(&self) -> PeId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn sym_heap_bytes(&self) -> usize {
        self.sym_heap_bytes
    }

    fn check(&self, offset: usize, span: usize) -> Result<()> {
        check_aligned(offset, span)?;
        let len = self.bytes.len();
        // the offset itself must address the arena, even for empty spans
        if offset < len && offset.checked_add(span).is_some_and(|end| end <= len) {
            Ok(())
        } else {
            Err(DeviceError::ArenaFault {
                pe: self.owner,
                offset,
                span,
                limit: len,
            })
        }
    }

    pub fn read(&self, offset: usize, span: usize) -> Result<&[u8]> {
        self.check(offset, span)?;
        Ok(&self.bytes[offset..offset + span])
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) -> Result<()> {
        self.check(offset, data.len())?;
        self.bytes[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn slice_mut(&mut self, offset: usize, span: usize) -> Result<&mut [u8]> {
        self.check(offset, span)?;
        Ok(&mut self.bytes[offset..offset + span])
    }

    pub(crate) fn sym_heap(&self) -> &[u8] {
        &self.bytes[..self.sym_heap_bytes]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Off-chip memory shared by the host and every PE.
#[derive(Debug, Clone)]
pub struct GlobalStore {
    bytes: Vec<u8>,
}

impl GlobalStore {
    pub fn new(size: usize) -> Self {
        Self { bytes: vec![0; size] }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn check(&self, offset: usize, span: usize) -> Result<()> {
        check_aligned(offset, span)?;
        match offset.checked_add(span) {
            Some(end) if end <= self.bytes.len() => Ok(()),
            _ => Err(DeviceError::GlobalFault {
                offset,
                span,
                limit: self.bytes.len(),
            }),
        }
    }

    pub fn read(&self, offset: usize, span: usize) -> Result<&[u8]> {
        self.check(offset, span)?;
        Ok(&self.bytes[offset..offset + span])
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) -> Result<()> {
        self.check(offset, data.len())?;
        self.bytes[offset..offset + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn fill(&mut self, offset: usize, span: usize, value: u8) -> Result<()> {
        self.check(offset, span)?;
        self.bytes[offset..offset + span].fill(value);
        Ok(())
    }
}

/// Little-endian encoding of single-precision words.
pub fn words_to_bytes(words: &[f32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn bytes_to_words(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(WORD_BYTES)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg4() -> DeviceConfig {
        DeviceConfig::default()
    }

    #[test]
    fn pe_numbering_is_row_major() {
        let cfg = cfg4();
        assert_eq!(pe_of(GridCoord::new(0, 0), &cfg).unwrap(), PeId(0));
        assert_eq!(pe_of(GridCoord::new(3, 3), &cfg).unwrap(), PeId(15));
        assert_eq!(pe_of(GridCoord::new(1, 2), &cfg).unwrap(), PeId(6));
        assert_eq!(coord_of(PeId(0), &cfg).unwrap(), GridCoord::new(0, 0));
        assert_eq!(coord_of(PeId(6), &cfg).unwrap(), GridCoord::new(1, 2));
        assert_eq!(coord_of(PeId(15), &cfg).unwrap(), GridCoord::new(3, 3));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let cfg = cfg4();
        assert!(matches!(
            pe_of(GridCoord::new(4, 0), &cfg),
            Err(DeviceError::CoordOutOfBounds { .. })
        ));
        assert!(matches!(
            coord_of(PeId(16), &cfg),
            Err(DeviceError::PeOutOfBounds { pe: 16, pes: 16 })
        ));
        assert!(hop_distance(PeId(0), PeId(16), &cfg).is_err());
    }

    #[test]
    fn hops_without_torus() {
        let cfg = cfg4();
        assert_eq!(hop_distance(PeId(5), PeId(5), &cfg).unwrap(), 0);
        assert_eq!(hop_distance(PeId(0), PeId(15), &cfg).unwrap(), 6);
        // logical left wrap of row 0 crosses the full row
        assert_eq!(hop_distance(PeId(0), PeId(3), &cfg).unwrap(), 3);
    }

    #[test]
    fn numbering_round_trips_and_hops_form_a_metric() {
        for (rows, cols) in [(1, 1), (1, 7), (3, 5), (4, 4), (8, 8)] {
            let cfg = DeviceConfig::with_grid(rows, cols);
            let p = cfg.pes();
            for id in 0..p {
                let c = coord_of(PeId(id), &cfg).unwrap();
                assert_eq!(pe_of(c, &cfg).unwrap(), PeId(id));
            }
            for r in 0..rows {
                for c in 0..cols {
                    let g = GridCoord::new(r, c);
                    assert_eq!(coord_of(pe_of(g, &cfg).unwrap(), &cfg).unwrap(), g);
                }
            }
            let d = |a: usize, b: usize| hop_distance(PeId(a), PeId(b), &cfg).unwrap();
            for a in 0..p {
                for b in 0..p {
                    assert_eq!(d(a, b), d(b, a));
                    assert_eq!(d(a, b) == 0, a == b);
                    for c in 0..p {
                        assert!(d(a, c) <= d(a, b) + d(b, c));
                    }
                }
            }
        }
    }

    #[test]
    fn local_store_bounds_and_alignment() {
        let cfg = cfg4();
        let mut ls = LocalStore::new(PeId(3), &cfg);
        ls.write(8, &words_to_bytes(&[1.5, -2.0])).unwrap();
        assert_eq!(bytes_to_words(ls.read(8, 8).unwrap()), vec![1.5, -2.0]);
        assert_eq!(ls.read(0, 0).unwrap(), &[] as &[u8]);

        let err = ls.read(cfg.local_mem_bytes, 4).unwrap_err();
        assert_eq!(
            err,
            DeviceError::ArenaFault {
                pe: PeId(3),
                offset: cfg.local_mem_bytes,
                span: 4,
                limit: cfg.local_mem_bytes
            }
        );
        assert!(matches!(
            ls.read(cfg.local_mem_bytes, 0),
            Err(DeviceError::ArenaFault { .. })
        ));
        assert!(matches!(ls.read(2, 4), Err(DeviceError::Alignment { .. })));
        assert!(matches!(
            ls.write(cfg.local_mem_bytes - 4, &[0; 8]),
            Err(DeviceError::ArenaFault { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(DeviceConfig::default().validate().is_ok());
        let mut c = DeviceConfig::default();
        c.sym_heap_bytes = c.local_mem_bytes + 4;
        assert!(c.validate().is_err());
        let c = DeviceConfig {
            global_mem_bytes: 10,
            ..DeviceConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(DeviceConfig::with_grid(0, 4).validate().is_err());
    }
}
