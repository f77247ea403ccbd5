//! Relative positioning (sequence pair), size balancing and packing of
//! functional blocks inside one crossbar array.
//!
//! Coordinates are `(row, col)`; rows grow downwards, so "below" means a
//! larger row origin.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowering::{FbId, FbRequirement};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePair {
    pub seq1: Vec<FbId>,
    pub seq2: Vec<FbId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Below,
    Above,
}

impl SequencePair {
    pub fn is_valid(&self) -> bool {
        let mut a = self.seq1.clone();
        let mut b = self.seq2.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b && a.windows(2).all(|w| w[0] != w[1])
    }

    /// Where `a` sits relative to `b`.
    pub fn relation(&self, a: FbId, b: FbId) -> Relation {
        let pos = |s: &[FbId], id| s.iter().position(|&x| x == id).expect("id in sequence");
        let a_first_1 = pos(&self.seq1, a) < pos(&self.seq1, b);
        let a_first_2 = pos(&self.seq2, a) < pos(&self.seq2, b);
        match (a_first_1, a_first_2) {
            (true, true) => Relation::LeftOf,
            (false, false) => Relation::RightOf,
            (false, true) => Relation::Below,
            (true, false) => Relation::Above,
        }
    }
}

impl fmt::Display for SequencePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:?}, {:?})", self.seq1, self.seq2)
    }
}

fn insert_left_of(seq: &mut Vec<FbId>, id: FbId, anchor: FbId) {
    let at = seq
        .iter()
        .position(|&x| x == anchor)
        .expect("anchor in sequence");
    seq.insert(at, id);
}

/// Relative positioning. A block that accumulates with an earlier block is
/// placed directly below it. Any other block is appended to `seq1` and, in
/// the default literal mode, inserted just left of the previous rightmost
/// block in `seq2` (which stacks it below); `canonical` appends it to `seq2`
/// instead, putting it to the right.
pub fn position_fbs(fbs: &[FbRequirement], canonical: bool) -> SequencePair {
    let mut sp = SequencePair {
        seq1: Vec::with_capacity(fbs.len()),
        seq2: Vec::with_capacity(fbs.len()),
    };
    for (n, fb) in fbs.iter().enumerate() {
        let i = fb.fb_id;
        if n == 0 {
            sp.seq1.push(i);
            sp.seq2.push(i);
            continue;
        }
        let partner = fb
            .accumulates_with
            .filter(|j| fbs[..n].iter().any(|f| f.fb_id == *j));
        if let Some(j) = partner {
            sp.seq1.push(i);
            insert_left_of(&mut sp.seq2, i, j);
        } else {
            let k = *sp.seq1.last().unwrap();
            sp.seq1.push(i);
            if canonical {
                sp.seq2.push(i);
            } else {
                insert_left_of(&mut sp.seq2, i, k);
            }
        }
    }
    sp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbShape {
    pub fb_id: FbId,
    pub nx: usize,
    pub ny: usize,
}

impl FbShape {
    pub fn replicas(&self, fb: &FbRequirement) -> (usize, usize) {
        (self.nx / fb.bx, self.ny / fb.by)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceOptions {
    /// Measure successor intake in the predecessor's op width, as the
    /// throughput inequality is literally written.
    pub literal_index: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    FitsArray { fb_id: FbId },
    RowSum,
    ColumnSum,
    Throughput { producer: FbId, consumer: FbId },
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::FitsArray { fb_id } => write!(f, "FB{fb_id} op tile fits the array"),
            Constraint::RowSum => write!(f, "sum of nx <= array rows"),
            Constraint::ColumnSum => write!(f, "sum of ny <= array columns"),
            Constraint::Throughput { producer, consumer } => {
                write!(f, "throughput FB{producer} -> FB{consumer}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FloorplanError {
    #[error("infeasible: {constraint} violated ({detail})")]
    Infeasible {
        constraint: Constraint,
        detail: String,
    },
    #[error(
        "placement overflows the {rows}x{cols} array: FB{fb_id} ends at ({end_row}, {end_col})"
    )]
    Overflow {
        fb_id: FbId,
        end_row: usize,
        end_col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("sequence pair and shapes disagree: {0}")]
    Inconsistent(String),
}

fn index_of(fbs: &[FbRequirement], id: FbId) -> usize {
    fbs.iter()
        .position(|f| f.fb_id == id)
        .expect("partner FB exists")
}

/// Shape of a mirror block, fixed by its partner: same columns, and one
/// `bx`-row band per row replica of the partner.
fn mirror_shape(fb: &FbRequirement, partner: &FbRequirement, p: (usize, usize)) -> (usize, usize) {
    (fb.bx * (p.0 / partner.bx), p.1)
}

/// Smallest legal `ny` for chain member `i` given its predecessor's shape.
fn min_ny(
    fbs: &[FbRequirement],
    shapes: &[(usize, usize)],
    i: usize,
    prev: Option<usize>,
    opts: BalanceOptions,
) -> usize {
    let fb = &fbs[i];
    let Some(p) = prev else { return fb.by };
    let pf = &fbs[p];
    let prod = (shapes[p].0 / pf.bx) * (shapes[p].1 / pf.by);
    let denom = if opts.literal_index { pf.by } else { fb.by };
    let need = prod * denom;
    need.div_ceil(fb.by).max(1) * fb.by
}

/// Index of the previous non-mirror block before `i`.
fn chain_prev(fbs: &[FbRequirement], i: usize) -> Option<usize> {
    (0..i).rev().find(|&j| !fbs[j].is_mirror())
}

/// Fill `shapes[from..]` with the minimal sizes compatible with the prefix.
fn complete_minimal(
    fbs: &[FbRequirement],
    shapes: &mut [(usize, usize)],
    from: usize,
    opts: BalanceOptions,
) {
    for i in from..fbs.len() {
        let fb = &fbs[i];
        shapes[i] = match fb.accumulates_with {
            Some(j) => {
                let p = index_of(fbs, j);
                mirror_shape(fb, &fbs[p], shapes[p])
            }
            None => (fb.bx, min_ny(fbs, shapes, i, chain_prev(fbs, i), opts)),
        };
    }
}

/// Re-evaluate every balancing constraint on a full assignment.
pub fn check_constraints(
    fbs: &[FbRequirement],
    shapes: &[FbShape],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<(), FloorplanError> {
    let dims: Vec<(usize, usize)> = shapes.iter().map(|s| (s.nx, s.ny)).collect();
    check_dims(fbs, &dims, array, opts)
}

fn check_dims(
    fbs: &[FbRequirement],
    shapes: &[(usize, usize)],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<(), FloorplanError> {
    let (arr_x, arr_y) = array;
    for (fb, &(nx, ny)) in fbs.iter().zip(shapes) {
        if nx == 0 || ny == 0 || nx > arr_x || ny > arr_y || nx % fb.bx != 0 || ny % fb.by != 0 {
            return Err(FloorplanError::Infeasible {
                constraint: Constraint::FitsArray { fb_id: fb.fb_id },
                detail: format!(
                    "nx={nx} ny={ny} for op tile {}x{} in {arr_x}x{arr_y}",
                    fb.bx, fb.by
                ),
            });
        }
    }
    let rows: usize = shapes.iter().map(|s| s.0).sum();
    if rows > arr_x {
        return Err(FloorplanError::Infeasible {
            constraint: Constraint::RowSum,
            detail: format!("{rows} > {arr_x}"),
        });
    }
    let cols: usize = fbs
        .iter()
        .zip(shapes)
        .filter(|(f, _)| !f.is_mirror())
        .map(|(_, s)| s.1)
        .sum();
    if cols > arr_y {
        return Err(FloorplanError::Infeasible {
            constraint: Constraint::ColumnSum,
            detail: format!("{cols} > {arr_y}"),
        });
    }
    for i in 0..fbs.len() {
        let fb = &fbs[i];
        if let Some(j) = fb.accumulates_with {
            let p = index_of(fbs, j);
            let want = mirror_shape(fb, &fbs[p], shapes[p]);
            if shapes[i] != want {
                return Err(FloorplanError::Infeasible {
                    constraint: Constraint::FitsArray { fb_id: fb.fb_id },
                    detail: format!("mirror of FB{j} must be {}x{}", want.0, want.1),
                });
            }
            continue;
        }
        if let Some(p) = chain_prev(fbs, i) {
            let need = min_ny(fbs, shapes, i, Some(p), opts);
            if shapes[i].1 < need {
                return Err(FloorplanError::Infeasible {
                    constraint: Constraint::Throughput {
                        producer: fbs[p].fb_id,
                        consumer: fb.fb_id,
                    },
                    detail: format!("ny={} < {need}", shapes[i].1),
                });
            }
        }
    }
    Ok(())
}

/// Largest `m` in `lo..=hi` with `ok(m)`, assuming `ok` is monotone
/// (true up to some point, false after).
fn max_true(lo: usize, hi: usize, ok: impl Fn(usize) -> bool) -> Option<usize> {
    if hi < lo || !ok(lo) {
        return None;
    }
    let (mut lo, mut hi) = (lo, hi);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Some(lo)
}

/// Greedy size balancing: blocks in order take the largest `nx`, then the
/// largest `ny` (both multiples of the op tile) for which the remaining
/// blocks can still be completed at their minimal sizes. Mirror blocks are
/// sized by their partner and excluded from the column sum and the
/// throughput chain.
pub fn balance_sizes(
    fbs: &[FbRequirement],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<Vec<FbShape>, FloorplanError> {
    let (arr_x, arr_y) = array;
    for fb in fbs {
        if fb.bx > arr_x || fb.by > arr_y {
            return Err(FloorplanError::Infeasible {
                constraint: Constraint::FitsArray { fb_id: fb.fb_id },
                detail: format!("op tile {}x{} exceeds {arr_x}x{arr_y}", fb.bx, fb.by),
            });
        }
    }
    let mut shapes = vec![(0, 0); fbs.len()];
    complete_minimal(fbs, &mut shapes, 0, opts);
    check_dims(fbs, &shapes, array, opts)?;

    for i in 0..fbs.len() {
        let fb = &fbs[i];
        if fb.is_mirror() {
            // Already derived from its partner by the last completion.
            continue;
        }
        let lo_ny = shapes[i].1;
        let feasible = |nx: usize, ny: usize| {
            let mut trial = shapes.clone();
            trial[i] = (nx, ny);
            complete_minimal(fbs, &mut trial, i + 1, opts);
            check_dims(fbs, &trial, array, opts).is_ok()
        };
        let rx = max_true(1, arr_x / fb.bx, |m| feasible(m * fb.bx, lo_ny))
            .expect("minimal completion is feasible");
        let nx = rx * fb.bx;
        let ry = max_true(lo_ny / fb.by, arr_y / fb.by, |m| feasible(nx, m * fb.by))
            .expect("minimal ny is feasible");
        shapes[i] = (nx, ry * fb.by);
        complete_minimal(fbs, &mut shapes, i + 1, opts);
    }
    debug_assert!(check_dims(fbs, &shapes, array, opts).is_ok());
    Ok(fbs
        .iter()
        .zip(&shapes)
        .map(|(f, &(nx, ny))| FbShape {
            fb_id: f.fb_id,
            nx,
            ny,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub fb_id: FbId,
    pub origin: (usize, usize),
    pub extent: (usize, usize),
}

impl Placement {
    pub fn end(&self) -> (usize, usize) {
        (self.origin.0 + self.extent.0, self.origin.1 + self.extent.1)
    }

    pub fn cells(&self) -> usize {
        self.extent.0 * self.extent.1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let end = self.end();
        row >= self.origin.0 && row < end.0 && col >= self.origin.1 && col < end.1
    }

    pub fn overlaps(&self, other: &Placement) -> bool {
        let (a, b) = (self.end(), other.end());
        self.origin.0 < b.0 && other.origin.0 < a.0 && self.origin.1 < b.1 && other.origin.1 < a.1
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.origin.0..self.origin.0 + self.extent.0
    }

    pub fn cols(&self) -> std::ops::Range<usize> {
        self.origin.1..self.origin.1 + self.extent.1
    }
}

/// Longest-path packing of a sequence pair.
pub fn realize_placement(
    sp: &SequencePair,
    shapes: &[FbShape],
    array: (usize, usize),
) -> Result<Vec<Placement>, FloorplanError> {
    if !sp.is_valid() {
        return Err(FloorplanError::Inconsistent(format!(
            "{sp} is not a pair of permutations"
        )));
    }
    let shape_of = |id: FbId| {
        shapes
            .iter()
            .find(|s| s.fb_id == id)
            .ok_or_else(|| FloorplanError::Inconsistent(format!("no shape for FB{id}")))
    };
    let n = sp.seq1.len();
    let pos2: std::collections::HashMap<FbId, usize> =
        sp.seq2.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    // Visiting in seq1 order guarantees every block left of or above the
    // current one has already been placed.
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    for (a_idx, &a) in sp.seq1.iter().enumerate() {
        let s = shape_of(a)?;
        let mut row = 0;
        let mut col = 0;
        for (b_idx, pb) in placed.iter().enumerate() {
            debug_assert!(b_idx < a_idx);
            if pos2[&pb.fb_id] < pos2[&a] {
                col = col.max(pb.end().1);
            } else {
                row = row.max(pb.end().0);
            }
        }
        placed.push(Placement {
            fb_id: a,
            origin: (row, col),
            extent: (s.nx, s.ny),
        });
    }
    for p in &placed {
        let (er, ec) = p.end();
        if er > array.0 || ec > array.1 {
            return Err(FloorplanError::Overflow {
                fb_id: p.fb_id,
                end_row: er,
                end_col: ec,
                rows: array.0,
                cols: array.1,
            });
        }
    }
    placed.sort_by_key(|p| p.fb_id);
    Ok(placed)
}

/// Complete floorplan of one array.
pub fn floorplan(
    fbs: &[FbRequirement],
    array: (usize, usize),
    canonical: bool,
    opts: BalanceOptions,
) -> Result<(SequencePair, Vec<FbShape>, Vec<Placement>), FloorplanError> {
    let sp = position_fbs(fbs, canonical);
    let shapes = balance_sizes(fbs, array, opts)?;
    let placements = realize_placement(&sp, &shapes, array)?;
    Ok((sp, shapes, placements))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;

    fn fb(id: FbId, bx: usize, by: usize) -> FbRequirement {
        FbRequirement::new(id, LayerKind::Conv, bx, by, 1, id)
    }

    fn shape(id: FbId, nx: usize, ny: usize) -> FbShape {
        FbShape { fb_id: id, nx, ny }
    }

    #[test]
    fn single_fb_sequence() {
        let sp = position_fbs(&[fb(1, 9, 16)], false);
        assert_eq!(sp.seq1, vec![1]);
        assert_eq!(sp.seq2, vec![1]);
    }

    #[test]
    fn accumulative_fb_goes_below() {
        let mut res = fb(2, 8, 16);
        res.op_kind = LayerKind::Res;
        res.accumulates_with = Some(1);
        let sp = position_fbs(&[fb(1, 9, 16), res], false);
        assert_eq!(sp.seq2, vec![2, 1]);
        assert_eq!(sp.relation(2, 1), Relation::Below);
    }

    #[test]
    fn accumulative_chain_reverses_seq2() {
        let mut fbs = vec![fb(1, 2, 2), fb(2, 2, 2), fb(3, 2, 2)];
        fbs[1].accumulates_with = Some(1);
        fbs[2].accumulates_with = Some(2);
        let sp = position_fbs(&fbs, false);
        assert_eq!(sp.seq1, vec![1, 2, 3]);
        assert_eq!(sp.seq2, vec![3, 2, 1]);
        assert_eq!(sp.relation(3, 2), Relation::Below);
    }

    #[test]
    fn independent_fbs_literal_and_canonical() {
        let fbs = [fb(1, 2, 2), fb(2, 2, 2), fb(3, 2, 2)];
        let lit = position_fbs(&fbs, false);
        assert_eq!(lit.seq1, vec![1, 2, 3]);
        assert_eq!(lit.relation(2, 1), Relation::Below);
        let can = position_fbs(&fbs, true);
        assert_eq!(can.seq2, vec![1, 2, 3]);
        assert_eq!(can.relation(3, 2), Relation::RightOf);
        let shapes = [shape(1, 2, 2), shape(2, 2, 2), shape(3, 2, 2)];
        for sp in [lit, can] {
            let p = realize_placement(&sp, &shapes, (8, 8)).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert!(!p[a].overlaps(&p[b]));
                }
            }
        }
    }

    #[test]
    fn hand_packed_pairs() {
        let shapes = [shape(1, 4, 4), shape(2, 4, 4)];
        let right = SequencePair {
            seq1: vec![1, 2],
            seq2: vec![1, 2],
        };
        assert_eq!(
            realize_placement(&right, &shapes, (8, 8)).unwrap()[1].origin,
            (0, 4)
        );
        let below = SequencePair {
            seq1: vec![1, 2],
            seq2: vec![2, 1],
        };
        assert_eq!(
            realize_placement(&below, &shapes, (8, 8)).unwrap()[1].origin,
            (4, 0)
        );
    }

    #[test]
    fn full_array_exact_fit_and_overflow() {
        let sp = SequencePair {
            seq1: vec![1],
            seq2: vec![1],
        };
        let p = realize_placement(&sp, &[shape(1, 8, 8)], (8, 8)).unwrap();
        assert_eq!(p[0].origin, (0, 0));
        assert!(matches!(
            realize_placement(&sp, &[shape(1, 9, 8)], (8, 8)),
            Err(FloorplanError::Overflow { .. })
        ));
    }

    #[test]
    fn single_conv_fills_the_array() {
        let s = balance_sizes(&[fb(1, 9, 16)], (512, 512), BalanceOptions::default()).unwrap();
        assert_eq!((s[0].nx, s[0].ny), (504, 512));
    }

    #[test]
    fn oversize_pair_is_infeasible_on_rows() {
        let err = balance_sizes(
            &[fb(1, 300, 4), fb(2, 300, 4)],
            (512, 512),
            BalanceOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                FloorplanError::Infeasible {
                    constraint: Constraint::RowSum,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn throughput_bound_on_consumer() {
        // Producer fixed at 4 parallel ops: 2 row replicas x 2 column replicas.
        let fbs = [fb(1, 4, 4), fb(2, 2, 8)];
        let shapes = [(8, 8), (0, 0)];
        assert_eq!(
            min_ny(&fbs, &shapes, 1, Some(0), BalanceOptions::default()),
            32
        );
        let lit = min_ny(
            &fbs,
            &shapes,
            1,
            Some(0),
            BalanceOptions {
                literal_index: true,
            },
        );
        assert_eq!(lit, 16);
    }

    #[test]
    fn max_true_finds_boundary() {
        assert_eq!(max_true(1, 10, |m| m <= 7), Some(7));
        assert_eq!(max_true(3, 10, |_| true), Some(10));
        assert_eq!(max_true(1, 10, |_| false), None);
    }
}
