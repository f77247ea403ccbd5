//! Crossbar state machine under the block activation scheme.
//!
//! Cells hold one bit. Each cycle a set of block operations drives the word
//! and bit line segments of their regions to one of the third-voltage levels;
//! a cell switches only when the voltage across it reaches the set (or reset)
//! threshold. Line segments are configured per block, so blocks in disjoint
//! regions never share a driver; the single write port limits the array to
//! one write-active block per cycle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitMatrix;
use crate::floorplan::Placement;
use crate::lowering::FbId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Gnd,
    V13,
    V23,
    Vset,
    Vreset,
}

impl Level {
    /// Line voltage in thirds of the set voltage.
    pub fn thirds(self) -> i32 {
        match self {
            Level::Gnd => 0,
            Level::V13 => 1,
            Level::V23 => 2,
            Level::Vset => 3,
            Level::Vreset => -3,
        }
    }
}

const SET_THRESHOLD: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasKind {
    /// Write one column (offset within the region); `bits` has one entry per
    /// region row.
    WriteColumn {
        col: usize,
        bits: Vec<bool>,
    },
    /// Bit-serial read: one input bit per region row.
    ReadRegion {
        input: Vec<bool>,
    },
    Reset,
    /// Stateful in-array logic: `outputs` (offsets within the region) take
    /// the gate-evaluated `values` computed from the `operands` cells.
    /// Operand and output cells occupy different rows.
    LogicStep {
        operands: Vec<(usize, usize)>,
        outputs: Vec<(usize, usize)>,
        values: Vec<bool>,
    },
}

impl BasKind {
    pub fn name(&self) -> &'static str {
        match self {
            BasKind::WriteColumn { .. } => "write",
            BasKind::ReadRegion { .. } => "read",
            BasKind::Reset => "reset",
            BasKind::LogicStep { .. } => "logic",
        }
    }

    fn uses_write_port(&self) -> bool {
        matches!(self, BasKind::WriteColumn { .. } | BasKind::Reset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasOp {
    pub kind: BasKind,
    pub region: Placement,
}

impl BasOp {
    pub fn fb_id(&self) -> FbId {
        self.region.fb_id
    }

    /// Word-line level for each region row and bit-line level for each
    /// region column.
    pub fn drive(&self) -> (Vec<Level>, Vec<Level>) {
        let (nr, nc) = self.region.extent;
        match &self.kind {
            BasKind::WriteColumn { col, bits } => {
                let wl = bits
                    .iter()
                    .map(|&b| if b { Level::Vset } else { Level::V23 })
                    .collect();
                let bl = (0..nc)
                    .map(|c| if c == *col { Level::Gnd } else { Level::V13 })
                    .collect();
                (wl, bl)
            }
            BasKind::ReadRegion { input } => {
                let wl = input
                    .iter()
                    .map(|&b| if b { Level::V23 } else { Level::V13 })
                    .collect();
                (wl, vec![Level::V13; nc])
            }
            BasKind::Reset => (vec![Level::Vreset; nr], vec![Level::Gnd; nc]),
            BasKind::LogicStep {
                operands, outputs, ..
            } => {
                let mut wl = vec![Level::V13; nr];
                for &(r, _) in operands {
                    wl[r] = Level::V23;
                }
                for &(r, _) in outputs {
                    wl[r] = Level::Vset;
                }
                (wl, vec![Level::V13; nc])
            }
        }
    }

    /// Cells this op switches or senses in its cycle.
    pub fn activated_cells(&self) -> usize {
        let (nr, nc) = self.region.extent;
        match &self.kind {
            BasKind::WriteColumn { .. } => nr,
            BasKind::ReadRegion { .. } | BasKind::Reset => nr * nc,
            BasKind::LogicStep {
                operands, outputs, ..
            } => operands.len() + outputs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrossbarError {
    #[error("voltage conflict between FB{a} and FB{b} on {line}")]
    Conflict { a: FbId, b: FbId, line: String },
    #[error("more than one write-active block in a cycle (FB{a}, FB{b})")]
    DoubleWrite { a: FbId, b: FbId },
    #[error("region of FB{fb_id} exceeds the {rows}x{cols} array")]
    OutOfBounds {
        fb_id: FbId,
        rows: usize,
        cols: usize,
    },
    #[error("malformed op on FB{fb_id}: {message}")]
    Malformed { fb_id: FbId, message: String },
    #[error("half-selected cell ({row}, {col}) would switch")]
    Disturb { row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadOutput {
    pub fb_id: FbId,
    /// One current sum per region column.
    pub sums: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CycleOutcome {
    pub reads: Vec<ReadOutput>,
    pub activated_cells: usize,
    /// Bitline sums that exceeded the ADC range.
    pub saturated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarState {
    pub cells: BitMatrix,
    pub adc_bits: u32,
    /// Segment drives of the last applied cycle, for inspection and dumps.
    #[serde(skip)]
    pub last_drives: Vec<(FbId, Vec<Level>, Vec<Level>)>,
    pub cycle: u64,
}

impl CrossbarState {
    pub fn new(rows: usize, cols: usize, adc_bits: u32) -> Self {
        Self {
            cells: BitMatrix::new(rows, cols),
            adc_bits,
            last_drives: Vec::new(),
            cycle: 0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cells.rows(), self.cells.cols())
    }

    pub fn adc_max(&self) -> u32 {
        (1u32 << self.adc_bits) - 1
    }

    fn validate(&self, op: &BasOp) -> Result<(), CrossbarError> {
        let (rows, cols) = self.dims();
        let (er, ec) = op.region.end();
        let fb_id = op.fb_id();
        if er > rows || ec > cols || op.region.extent.0 == 0 || op.region.extent.1 == 0 {
            return Err(CrossbarError::OutOfBounds { fb_id, rows, cols });
        }
        let (nr, nc) = op.region.extent;
        let bad = |message: String| Err(CrossbarError::Malformed { fb_id, message });
        match &op.kind {
            BasKind::WriteColumn { col, bits } => {
                if *col >= nc || bits.len() != nr {
                    return bad(format!(
                        "write of column {col} with {} bits into {nr}x{nc}",
                        bits.len()
                    ));
                }
            }
            BasKind::ReadRegion { input } => {
                if input.len() != nr {
                    return bad(format!("{} input bits for {nr} rows", input.len()));
                }
            }
            BasKind::Reset => {}
            BasKind::LogicStep {
                operands,
                outputs,
                values,
            } => {
                if values.len() != outputs.len()
                    || outputs
                        .iter()
                        .chain(operands)
                        .any(|&(r, c)| r >= nr || c >= nc)
                {
                    return bad("logic step outside its region".into());
                }
                if outputs.iter().any(|o| operands.iter().any(|i| i.0 == o.0)) {
                    return bad("logic output shares a row with an operand".into());
                }
            }
        }
        Ok(())
    }

    /// Apply one cycle of concurrent block operations.
    pub fn apply_cycle(&mut self, ops: &[BasOp]) -> Result<CycleOutcome, CrossbarError> {
        for op in ops {
            self.validate(op)?;
        }
        let writers: Vec<&BasOp> = ops.iter().filter(|o| o.kind.uses_write_port()).collect();
        if writers.len() > 1 {
            return Err(CrossbarError::DoubleWrite {
                a: writers[0].fb_id(),
                b: writers[1].fb_id(),
            });
        }
        let drives: Vec<(Vec<Level>, Vec<Level>)> = ops.iter().map(BasOp::drive).collect();
        for a in 0..ops.len() {
            for b in a + 1..ops.len() {
                check_shared_segments(&ops[a], &drives[a], &ops[b], &drives[b])?;
            }
        }

        let mut out = CycleOutcome::default();
        for (op, (wl, bl)) in ops.iter().zip(&drives) {
            out.activated_cells += op.activated_cells();
            let (r0, c0) = op.region.origin;
            match &op.kind {
                BasKind::ReadRegion { input } => {
                    let mask = self.cells.row_mask(op.region.rows(), |r| input[r - r0]);
                    let sums: Vec<u32> = op
                        .region
                        .cols()
                        .map(|c| self.cells.masked_popcount(c, &mask))
                        .collect();
                    let adc_max = self.adc_max();
                    out.saturated += sums.iter().filter(|&&s| s > adc_max).count();
                    out.reads.push(ReadOutput {
                        fb_id: op.fb_id(),
                        sums,
                    });
                }
                BasKind::LogicStep {
                    outputs, values, ..
                } => {
                    for (&(r, c), &v) in outputs.iter().zip(values) {
                        self.cells.set(r0 + r, c0 + c, v);
                    }
                }
                BasKind::WriteColumn { .. } | BasKind::Reset => self.switch_cells(op, wl, bl)?,
            }
        }
        self.last_drives = ops
            .iter()
            .zip(drives)
            .map(|(o, (w, b))| (o.fb_id(), w, b))
            .collect();
        self.cycle += 1;
        Ok(out)
    }

    /// Threshold rule: a cell sets at `V_wl − V_bl ≥ Vset` and resets at
    /// `≤ −Vset`; everything in between is half-selected and keeps its state.
    fn switch_cells(
        &mut self,
        op: &BasOp,
        wl: &[Level],
        bl: &[Level],
    ) -> Result<(), CrossbarError> {
        let (r0, c0) = op.region.origin;
        let wl_max = wl.iter().map(|l| l.thirds()).max().unwrap();
        let wl_min = wl.iter().map(|l| l.thirds()).min().unwrap();
        let target = match &op.kind {
            BasKind::WriteColumn { col, .. } => Some(*col),
            _ => None,
        };
        for (dc, b) in bl.iter().enumerate() {
            let v = b.thirds();
            if wl_max - v < SET_THRESHOLD && wl_min - v > -SET_THRESHOLD {
                continue;
            }
            for (dr, w) in wl.iter().enumerate() {
                let across = w.thirds() - v;
                let value = if across >= SET_THRESHOLD {
                    true
                } else if across <= -SET_THRESHOLD {
                    false
                } else {
                    continue;
                };
                if target.is_some_and(|t| t != dc) {
                    return Err(CrossbarError::Disturb {
                        row: r0 + dr,
                        col: c0 + dc,
                    });
                }
                self.cells.set(r0 + dr, c0 + dc, value);
            }
        }
        Ok(())
    }
}

fn overlap(a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> std::ops::Range<usize> {
    a.start.max(b.start)..a.end.min(b.end)
}

/// Two blocks share a line segment only where their regions intersect.
fn check_shared_segments(
    a: &BasOp,
    (awl, abl): &(Vec<Level>, Vec<Level>),
    b: &BasOp,
    (bwl, bbl): &(Vec<Level>, Vec<Level>),
) -> Result<(), CrossbarError> {
    let rows = overlap(a.region.rows(), b.region.rows());
    let cols = overlap(a.region.cols(), b.region.cols());
    if rows.is_empty() || cols.is_empty() {
        return Ok(());
    }
    let conflict = |line: String| CrossbarError::Conflict {
        a: a.fb_id(),
        b: b.fb_id(),
        line,
    };
    for r in rows {
        if awl[r - a.region.origin.0] != bwl[r - b.region.origin.0] {
            return Err(conflict(format!("WL{r}")));
        }
    }
    for c in cols {
        if abl[c - a.region.origin.1] != bbl[c - b.region.origin.1] {
            return Err(conflict(format!("BL{c}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteCycles {
    pub write: u64,
    pub reset: u64,
}

impl WriteCycles {
    pub fn total(&self) -> u64 {
        self.write + self.reset
    }
}

/// Program a region column by column, after a reset cycle when
/// `include_reset` is set. Without the reset only '1' bits are guaranteed,
/// so callers skipping it must start from a cleared region.
pub fn write_fb(
    state: &mut CrossbarState,
    region: Placement,
    bits: &BitMatrix,
    include_reset: bool,
) -> Result<WriteCycles, CrossbarError> {
    if (bits.rows(), bits.cols()) != region.extent {
        return Err(CrossbarError::Malformed {
            fb_id: region.fb_id,
            message: format!(
                "{}x{} bits for a {}x{} region",
                bits.rows(),
                bits.cols(),
                region.extent.0,
                region.extent.1
            ),
        });
    }
    let mut reset = 0;
    if include_reset {
        state.apply_cycle(&[BasOp {
            kind: BasKind::Reset,
            region,
        }])?;
        reset = 1;
    }
    for col in 0..region.extent.1 {
        let column = (0..region.extent.0).map(|r| bits.get(r, col)).collect();
        state.apply_cycle(&[BasOp {
            kind: BasKind::WriteColumn { col, bits: column },
            region,
        }])?;
    }
    Ok(WriteCycles {
        write: region.extent.1 as u64,
        reset,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GemmOutput {
    /// One value per group of `bits_w` columns.
    pub values: Vec<i64>,
    pub cycles: u64,
    pub saturated: usize,
    pub adc_conversions: u64,
}

/// Bit-serial matrix-vector product over a weight-stationary region.
///
/// Input bits stream LSB first, one read cycle each; the per-column sums are
/// recombined by shift-and-add, with the sign bit of both operands weighted
/// negatively (two's complement). One-bit weights are unsigned `{0, 1}`.
pub fn gemm_bitserial(
    state: &mut CrossbarState,
    region: Placement,
    input: &[i64],
    bits_in: u32,
    bits_w: u32,
) -> Result<GemmOutput, CrossbarError> {
    let (nr, nc) = region.extent;
    if input.len() != nr || nc % bits_w as usize != 0 {
        return Err(CrossbarError::Malformed {
            fb_id: region.fb_id,
            message: format!(
                "{} inputs for {nr} rows, {nc} columns at {bits_w} bits",
                input.len()
            ),
        });
    }
    let outputs = nc / bits_w as usize;
    let mut values = vec![0i64; outputs];
    let mut saturated = 0;
    for t in 0..bits_in {
        let bits: Vec<bool> = input.iter().map(|&x| (x >> t) & 1 == 1).collect();
        let res = state.apply_cycle(&[BasOp {
            kind: BasKind::ReadRegion { input: bits },
            region,
        }])?;
        saturated += res.saturated;
        let sums = &res.reads[0].sums;
        let in_weight = if t == bits_in - 1 {
            -(1i64 << t)
        } else {
            1i64 << t
        };
        for (k, v) in values.iter_mut().enumerate() {
            for j in 0..bits_w as usize {
                let place = bits_w as usize - 1 - j;
                let w_weight = if j == 0 && bits_w > 1 {
                    -(1i64 << place)
                } else {
                    1i64 << place
                };
                *v += in_weight * w_weight * sums[k * bits_w as usize + j] as i64;
            }
        }
    }
    Ok(GemmOutput {
        values,
        cycles: bits_in as u64,
        saturated,
        adc_conversions: bits_in as u64 * nc as u64,
    })
}

/// Read a region back bit by bit through one-hot word-line reads.
pub fn read_back(state: &mut CrossbarState, region: Placement) -> Result<BitMatrix, CrossbarError> {
    let (nr, nc) = region.extent;
    let mut m = BitMatrix::new(nr, nc);
    for r in 0..nr {
        let input = (0..nr).map(|i| i == r).collect();
        let res = state.apply_cycle(&[BasOp {
            kind: BasKind::ReadRegion { input },
            region,
        }])?;
        for (c, &s) in res.reads[0].sums.iter().enumerate() {
            m.set(r, c, s == 1);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(fb_id: FbId, origin: (usize, usize), extent: (usize, usize)) -> Placement {
        Placement {
            fb_id,
            origin,
            extent,
        }
    }

    #[test]
    fn empty_cycle_is_identity() {
        let mut s = CrossbarState::new(4, 4, 9);
        s.cells.set(1, 2, true);
        let before = s.cells.clone();
        let out = s.apply_cycle(&[]).unwrap();
        assert_eq!(out.activated_cells, 0);
        assert_eq!(s.cells, before);
    }

    #[test]
    fn side_by_side_write_and_read_is_legal() {
        // 4x4 array, FB1 = columns 0..2, FB2 = columns 2..4, both all rows.
        let mut s = CrossbarState::new(4, 4, 9);
        let fb1 = region(1, (0, 0), (4, 2));
        let fb2 = region(2, (0, 2), (4, 2));
        s.apply_cycle(&[BasOp {
            kind: BasKind::Reset,
            region: fb1,
        }])
        .unwrap();
        let write = BasOp {
            kind: BasKind::WriteColumn {
                col: 0,
                bits: vec![true, false, true, false],
            },
            region: fb1,
        };
        let read = BasOp {
            kind: BasKind::ReadRegion {
                input: vec![true; 4],
            },
            region: fb2,
        };
        let out = s.apply_cycle(&[write, read]).unwrap();
        assert_eq!(out.activated_cells, 4 + 8);
        assert!(s.cells.get(0, 0) && !s.cells.get(1, 0) && s.cells.get(2, 0));
        assert!(
            !s.cells.get(0, 1),
            "non-target column of the written block is untouched"
        );
    }

    #[test]
    fn two_writes_in_one_cycle_rejected() {
        let mut s = CrossbarState::new(4, 4, 9);
        let a = BasOp {
            kind: BasKind::WriteColumn {
                col: 0,
                bits: vec![true; 4],
            },
            region: region(1, (0, 0), (4, 2)),
        };
        let b = BasOp {
            kind: BasKind::WriteColumn {
                col: 0,
                bits: vec![true; 4],
            },
            region: region(2, (0, 2), (4, 2)),
        };
        assert!(matches!(
            s.apply_cycle(&[a, b]),
            Err(CrossbarError::DoubleWrite { .. })
        ));
    }

    #[test]
    fn overlapping_regions_with_different_levels_conflict() {
        let mut s = CrossbarState::new(4, 4, 9);
        let a = BasOp {
            kind: BasKind::ReadRegion {
                input: vec![true; 4],
            },
            region: region(1, (0, 0), (4, 2)),
        };
        let b = BasOp {
            kind: BasKind::ReadRegion {
                input: vec![false; 2],
            },
            region: region(2, (0, 1), (2, 2)),
        };
        assert!(matches!(
            s.apply_cycle(&[a, b]),
            Err(CrossbarError::Conflict { .. })
        ));
    }

    #[test]
    fn write_cycles_follow_column_count() {
        let mut s = CrossbarState::new(512, 512, 9);
        let full = region(1, (0, 0), (512, 512));
        let c = write_fb(&mut s, full, &BitMatrix::new(512, 512), true).unwrap();
        assert_eq!((c.write, c.total()), (512, 513));
        let small = region(2, (0, 0), (4, 2));
        assert_eq!(
            write_fb(&mut s, small, &BitMatrix::new(4, 2), true)
                .unwrap()
                .total(),
            3
        );
        let one = region(3, (0, 0), (1, 1));
        assert_eq!(
            write_fb(&mut s, one, &BitMatrix::new(1, 1), false)
                .unwrap()
                .total(),
            1
        );
    }

    #[test]
    fn write_then_read_round_trip() {
        let mut s = CrossbarState::new(8, 8, 9);
        let r = region(1, (2, 3), (5, 4));
        let bits = BitMatrix::from_fn(5, 4, |i, j| (i * 7 + j * 3) % 4 == 1);
        s.cells = BitMatrix::from_fn(8, 8, |_, _| true);
        write_fb(&mut s, r, &bits, true).unwrap();
        assert_eq!(read_back(&mut s, r).unwrap(), bits);
        assert!(
            s.cells.get(0, 0) && s.cells.get(7, 7),
            "outside cells keep their state"
        );
    }

    #[test]
    fn identity_gemm() {
        let mut s = CrossbarState::new(2, 2, 9);
        let r = region(1, (0, 0), (2, 2));
        write_fb(&mut s, r, &BitMatrix::from_fn(2, 2, |i, j| i == j), true).unwrap();
        let out = gemm_bitserial(&mut s, r, &[3, 5], 4, 1).unwrap();
        assert_eq!(out.values, vec![3, 5]);
        assert_eq!(out.cycles, 4);
    }

    #[test]
    fn saturation_reported_beyond_adc_range() {
        let mut s = CrossbarState::new(512, 1, 9);
        s.cells = BitMatrix::from_fn(512, 1, |_, _| true);
        let r = region(1, (0, 0), (512, 1));
        let out = s
            .apply_cycle(&[BasOp {
                kind: BasKind::ReadRegion {
                    input: vec![true; 512],
                },
                region: r,
            }])
            .unwrap();
        assert_eq!(out.reads[0].sums, vec![512]);
        assert_eq!(out.saturated, 1);
    }
}
