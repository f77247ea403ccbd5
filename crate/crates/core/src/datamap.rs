//! Intra-block data layout.
//!
//! GEMM blocks are weight stationary: each kernel replica is a `bx × by`
//! tile, replicas tiled row-major, with every weight's bits in adjacent
//! columns (MSB leftmost). Logic blocks are input stationary: elements sit
//! in a leaf row and each level of a knockout tournament gets its own row
//! below. Residual blocks keep one row per bit-plane under the GEMM columns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitMatrix;
use crate::floorplan::Placement;
use crate::lowering::FbId;
use crate::quant::{ceil_log2, to_twos};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatamapError {
    #[error("FB{fb_id}: {message}")]
    SizeMismatch { fb_id: FbId, message: String },
    #[error("capacity exceeded: {given} elements for {capacity} leaves")]
    Capacity { given: usize, capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TournamentLayout {
    pub p: usize,
    pub b: usize,
    pub levels: usize,
    pub leaf_columns: usize,
    /// Slot count per level, leaves first.
    pub slots: Vec<usize>,
}

pub fn plan_tournament(p: usize, b: usize) -> TournamentLayout {
    assert!(
        p >= 1 && b >= 1,
        "tournament needs at least one element and one bit"
    );
    let levels = ceil_log2(p) as usize;
    let slots = (0..=levels).map(|l| p.div_ceil(1 << l)).collect();
    TournamentLayout {
        p,
        b,
        levels,
        leaf_columns: p * b,
        slots,
    }
}

/// Slot at `level` either plays a match between two slots one level up, or
/// receives a bye and forwards one slot unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feed {
    Match(usize, usize),
    Bye(usize),
}

impl TournamentLayout {
    /// Rows of one tournament tile.
    pub fn rows(&self) -> usize {
        self.levels + 1
    }

    pub fn feed(&self, level: usize, index: usize) -> Feed {
        assert!(level >= 1 && level <= self.levels && index < self.slots[level]);
        let above = self.slots[level - 1];
        if 2 * index + 1 < above {
            Feed::Match(2 * index, 2 * index + 1)
        } else {
            Feed::Bye(2 * index)
        }
    }

    pub fn matches(&self) -> usize {
        self.p - 1
    }

    /// Cell `(row, col)` of the first bit of a slot, following byes back to
    /// where the value is stored.
    pub fn slot_cell(&self, level: usize, index: usize) -> (usize, usize) {
        if level == 0 {
            return (0, index * self.b);
        }
        match self.feed(level, index) {
            Feed::Match(..) => (level, index * self.b),
            Feed::Bye(src) => self.slot_cell(level - 1, src),
        }
    }

    /// Cells holding data in one tile: leaves plus one winner per match.
    pub fn mapped_cells(&self) -> usize {
        (self.p + self.matches()) * self.b
    }

    pub fn role_at(&self, row: usize, col: usize) -> CellRole {
        let (index, bit_col) = (col / self.b, col % self.b);
        let bit = (self.b - 1 - bit_col) as u32;
        if row == 0 {
            return if index < self.p {
                CellRole::InputBit { elem: index, bit }
            } else {
                CellRole::Unused
            };
        }
        if row <= self.levels
            && index < self.slots[row]
            && matches!(self.feed(row, index), Feed::Match(..))
        {
            CellRole::TournamentSlot {
                level: row,
                index,
                bit,
            }
        } else {
            CellRole::Unused
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellRole {
    WeightBit {
        k: usize,
        r: usize,
        s: usize,
        c: usize,
        bit: u32,
    },
    InputBit {
        elem: usize,
        bit: u32,
    },
    TournamentSlot {
        level: usize,
        index: usize,
        bit: u32,
    },
    Unused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataflow {
    WeightStationary,
    InputStationary,
}

impl Dataflow {
    pub fn name(self) -> &'static str {
        match self {
            Dataflow::WeightStationary => "weight-stationary",
            Dataflow::InputStationary => "input-stationary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TileLayout {
    /// `rows` unrolled kernel rows starting at `row_offset`, `channels`
    /// output channels of `bits_w` columns each.
    Weights {
        rows: usize,
        row_offset: usize,
        channels: usize,
        bits_w: u32,
        kh: usize,
        kw: usize,
    },
    Tournament(TournamentLayout),
    /// One row per residual bit-plane; a channel's bit sits in the first of
    /// its `bits_w` columns.
    Residual {
        bits: u32,
        channels: usize,
        bits_w: u32,
    },
}

impl TileLayout {
    pub fn tile(&self) -> (usize, usize) {
        match self {
            TileLayout::Weights {
                rows,
                channels,
                bits_w,
                ..
            } => (*rows, channels * *bits_w as usize),
            TileLayout::Tournament(t) => (t.rows(), t.leaf_columns),
            TileLayout::Residual {
                bits,
                channels,
                bits_w,
            } => (*bits as usize, channels * *bits_w as usize),
        }
    }

    pub fn dataflow(&self) -> Dataflow {
        match self {
            TileLayout::Weights { .. } => Dataflow::WeightStationary,
            _ => Dataflow::InputStationary,
        }
    }

    pub fn tile_mapped_cells(&self) -> usize {
        match self {
            TileLayout::Weights { .. } => {
                let (r, c) = self.tile();
                r * c
            }
            TileLayout::Tournament(t) => t.mapped_cells(),
            TileLayout::Residual { bits, channels, .. } => *bits as usize * channels,
        }
    }

    pub fn role_in_tile(&self, row: usize, col: usize) -> CellRole {
        match self {
            TileLayout::Weights {
                row_offset,
                bits_w,
                kh,
                kw,
                ..
            } => {
                let bw = *bits_w as usize;
                let g = row_offset + row;
                CellRole::WeightBit {
                    k: col / bw,
                    c: g / (kh * kw),
                    r: (g / kw) % kh,
                    s: g % kw,
                    bit: (bw - 1 - col % bw) as u32,
                }
            }
            TileLayout::Tournament(t) => t.role_at(row, col),
            TileLayout::Residual { bits_w, .. } => {
                if col.is_multiple_of(*bits_w as usize) {
                    CellRole::InputBit {
                        elem: col / *bits_w as usize,
                        bit: row as u32,
                    }
                } else {
                    CellRole::Unused
                }
            }
        }
    }
}

/// Cell roles of one placed block; computed on demand from the tile layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAssignment {
    pub fb_id: FbId,
    pub placement: Placement,
    pub layout: TileLayout,
}

impl CellAssignment {
    pub fn new(placement: Placement, layout: TileLayout) -> Result<Self, DatamapError> {
        let (tr, tc) = layout.tile();
        let (nr, nc) = placement.extent;
        if tr == 0 || tc == 0 || nr % tr != 0 || nc % tc != 0 {
            return Err(DatamapError::SizeMismatch {
                fb_id: placement.fb_id,
                message: format!("{nr}x{nc} block is not a whole number of {tr}x{tc} tiles"),
            });
        }
        Ok(Self {
            fb_id: placement.fb_id,
            placement,
            layout,
        })
    }

    pub fn dataflow(&self) -> Dataflow {
        self.layout.dataflow()
    }

    /// Replica grid `(rows, cols)`.
    pub fn replicas(&self) -> (usize, usize) {
        let (tr, tc) = self.layout.tile();
        (self.placement.extent.0 / tr, self.placement.extent.1 / tc)
    }

    pub fn replica_count(&self) -> usize {
        let (a, b) = self.replicas();
        a * b
    }

    /// Region of replica `i` (row-major over the replica grid).
    pub fn replica_region(&self, i: usize) -> Placement {
        let (tr, tc) = self.layout.tile();
        let cols = self.replicas().1;
        let (rr, cc) = (i / cols, i % cols);
        Placement {
            fb_id: self.fb_id,
            origin: (
                self.placement.origin.0 + rr * tr,
                self.placement.origin.1 + cc * tc,
            ),
            extent: (tr, tc),
        }
    }

    /// Replica index and role of an absolute cell; `None` outside the block.
    pub fn role_at(&self, row: usize, col: usize) -> Option<(usize, CellRole)> {
        if !self.placement.contains(row, col) {
            return None;
        }
        let (tr, tc) = self.layout.tile();
        let (lr, lc) = (row - self.placement.origin.0, col - self.placement.origin.1);
        let replica = (lr / tr) * self.replicas().1 + lc / tc;
        Some((replica, self.layout.role_in_tile(lr % tr, lc % tc)))
    }

    pub fn mapped_cells(&self) -> usize {
        self.replica_count() * self.layout.tile_mapped_cells()
    }
}

/// Kernel slice for one GEMM tile: `values[k * rows + row]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTile {
    pub rows: usize,
    pub channels: usize,
    pub bits_w: u32,
    pub values: Vec<i64>,
}

impl KernelTile {
    pub fn get(&self, k: usize, row: usize) -> i64 {
        self.values[k * self.rows + row]
    }
}

/// Bits of one kernel tile; every replica of the block holds this pattern.
pub fn map_weights(
    assignment: &CellAssignment,
    kernel: &KernelTile,
) -> Result<BitMatrix, DatamapError> {
    let TileLayout::Weights {
        rows,
        channels,
        bits_w,
        ..
    } = assignment.layout
    else {
        return Err(DatamapError::SizeMismatch {
            fb_id: assignment.fb_id,
            message: "not a weight-stationary block".into(),
        });
    };
    if (kernel.rows, kernel.channels, kernel.bits_w) != (rows, channels, bits_w)
        || kernel.values.len() != rows * channels
    {
        return Err(DatamapError::SizeMismatch {
            fb_id: assignment.fb_id,
            message: format!(
                "kernel {}x{} at {} bits for tile {rows}x{channels} at {bits_w} bits",
                kernel.rows, kernel.channels, kernel.bits_w
            ),
        });
    }
    let bw = bits_w as usize;
    Ok(BitMatrix::from_fn(rows, channels * bw, |r, col| {
        let code = to_twos(kernel.get(col / bw, r), bits_w);
        let bit = bw - 1 - col % bw;
        code >> bit & 1 == 1
    }))
}

/// Inverse of [`map_weights`].
pub fn read_weights(bits: &BitMatrix, bits_w: u32) -> KernelTile {
    let bw = bits_w as usize;
    let (rows, channels) = (bits.rows(), bits.cols() / bw);
    let mut values = vec![0i64; rows * channels];
    for k in 0..channels {
        for r in 0..rows {
            let mut code = 0u32;
            for j in 0..bw {
                code = code << 1 | bits.get(r, k * bw + j) as u32;
            }
            values[k * rows + r] = if bits_w == 1 {
                code as i64
            } else {
                crate::quant::from_twos(code, bits_w)
            };
        }
    }
    KernelTile {
        rows,
        channels,
        bits_w,
        values,
    }
}

/// Bits of one tournament tile with `codes` (unsigned, `b` bits each) on
/// the leaf row; winner rows start cleared.
pub fn map_inputs(layout: &TournamentLayout, codes: &[u32]) -> Result<BitMatrix, DatamapError> {
    if codes.len() > layout.p {
        return Err(DatamapError::Capacity {
            given: codes.len(),
            capacity: layout.p,
        });
    }
    let b = layout.b;
    Ok(BitMatrix::from_fn(
        layout.rows(),
        layout.leaf_columns,
        |r, col| r == 0 && col / b < codes.len() && codes[col / b] >> (b - 1 - col % b) & 1 == 1,
    ))
}

/// Bits of one residual tile: row `t` carries bit `t` of each channel's
/// two's-complement residual in the channel's first column.
pub fn map_residual(residual: &[i64], bits: u32, bits_w: u32) -> BitMatrix {
    let bw = bits_w as usize;
    BitMatrix::from_fn(bits as usize, residual.len() * bw, |t, col| {
        col % bw == 0 && to_twos(residual[col / bw], bits) >> t & 1 == 1
    })
}
