//! In-array logic: compare-and-select tournaments and the softmax unit.
//!
//! Comparisons are evaluated as NOR-only netlists (the stateful-logic
//! primitive available in the array) over operand bits read from the cells;
//! the selected winner is written into its slot by a logic step.

use serde::{Deserialize, Serialize};

use crate::bits::BitMatrix;
use crate::crossbar::{BasKind, BasOp, CrossbarError, CrossbarState};
use crate::datamap::{map_inputs, plan_tournament, Feed, TournamentLayout};
use crate::floorplan::Placement;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogicCost {
    /// Compare cycles per 2-bit digit.
    pub cmp_cycles_per_2bits: u64,
    pub sel_cycles: u64,
}

impl Default for LogicCost {
    fn default() -> Self {
        Self {
            cmp_cycles_per_2bits: 11,
            sel_cycles: 5,
        }
    }
}

impl LogicCost {
    pub fn cmp(&self, b: usize) -> u64 {
        b.div_ceil(2) as u64 * self.cmp_cycles_per_2bits
    }

    pub fn per_match(&self, b: usize) -> u64 {
        self.cmp(b) + self.sel_cycles
    }

    pub fn tournament(&self, layout: &TournamentLayout) -> u64 {
        layout.matches() as u64 * self.per_match(layout.b)
    }
}

/// NOR gate network with a gate counter.
#[derive(Debug, Default)]
pub struct NorNet {
    pub gates: u64,
}

impl NorNet {
    pub fn nor(&mut self, a: bool, b: bool) -> bool {
        self.gates += 1;
        !(a || b)
    }

    pub fn not(&mut self, a: bool) -> bool {
        self.nor(a, a)
    }

    pub fn or(&mut self, a: bool, b: bool) -> bool {
        let n = self.nor(a, b);
        self.not(n)
    }

    pub fn and(&mut self, a: bool, b: bool) -> bool {
        let (na, nb) = (self.not(a), self.not(b));
        self.nor(na, nb)
    }

    pub fn xor(&mut self, a: bool, b: bool) -> bool {
        let o = self.or(a, b);
        let n = self.and(a, b);
        let nn = self.not(n);
        self.and(o, nn)
    }

    /// `a >= b` for MSB-first bit vectors of equal length.
    pub fn ge(&mut self, a: &[bool], b: &[bool]) -> bool {
        let (mut decided, mut a_wins) = (false, false);
        for (&ai, &bi) in a.iter().zip(b) {
            let diff = self.xor(ai, bi);
            let open = self.not(decided);
            let first = self.and(open, diff);
            let win_here = self.and(first, ai);
            a_wins = self.or(a_wins, win_here);
            decided = self.or(decided, diff);
        }
        let tie = self.not(decided);
        self.or(a_wins, tie)
    }

    /// Multiplexer: `a` when `sel`, else `b`.
    pub fn select(&mut self, sel: bool, a: &[bool], b: &[bool]) -> Vec<bool> {
        let nsel = self.not(sel);
        a.iter()
            .zip(b)
            .map(|(&ai, &bi)| {
                let x = self.and(sel, ai);
                let y = self.and(nsel, bi);
                self.or(x, y)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TournamentMode {
    Max,
    Relu,
    SoftmaxMax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TournamentOutcome {
    pub winner: u32,
    pub cycles: u64,
    pub gates: u64,
    /// Leaf codes, returned for the softmax unit.
    pub elements: Option<Vec<u32>>,
}

fn read_code(cells: &BitMatrix, origin: (usize, usize), at: (usize, usize), b: usize) -> Vec<bool> {
    (0..b)
        .map(|i| cells.get(origin.0 + at.0, origin.1 + at.1 + i))
        .collect()
}

fn to_code(bits: &[bool]) -> u32 {
    bits.iter().fold(0, |acc, &x| acc << 1 | x as u32)
}

/// Play the tournament stored in `tile` (one tournament tile: leaf row plus
/// one row per level). For ReLU the zero operand must already be a leaf.
pub fn run_tournament(
    state: &mut CrossbarState,
    tile: Placement,
    layout: &TournamentLayout,
    mode: TournamentMode,
    cost: LogicCost,
) -> Result<TournamentOutcome, CrossbarError> {
    if tile.extent != (layout.rows(), layout.leaf_columns) {
        return Err(CrossbarError::Malformed {
            fb_id: tile.fb_id,
            message: format!(
                "tile {:?} does not match a {}x{} tournament",
                tile.extent,
                layout.rows(),
                layout.leaf_columns
            ),
        });
    }
    let b = layout.b;
    let mut net = NorNet::default();
    for level in 1..=layout.levels {
        for index in 0..layout.slots[level] {
            let Feed::Match(i, j) = layout.feed(level, index) else {
                continue;
            };
            let (ca, cb) = (
                layout.slot_cell(level - 1, i),
                layout.slot_cell(level - 1, j),
            );
            let a = read_code(&state.cells, tile.origin, ca, b);
            let bb = read_code(&state.cells, tile.origin, cb, b);
            let sel = net.ge(&a, &bb);
            let values = net.select(sel, &a, &bb);
            let operands = (0..b)
                .flat_map(|k| [(ca.0, ca.1 + k), (cb.0, cb.1 + k)])
                .collect();
            let outputs = (0..b).map(|k| (level, index * b + k)).collect();
            state.apply_cycle(&[BasOp {
                kind: BasKind::LogicStep {
                    operands,
                    outputs,
                    values,
                },
                region: tile,
            }])?;
        }
    }
    let top = layout.slot_cell(layout.levels, 0);
    let winner = to_code(&read_code(&state.cells, tile.origin, top, b));
    let elements = (mode == TournamentMode::SoftmaxMax).then(|| {
        (0..layout.p)
            .map(|e| to_code(&read_code(&state.cells, tile.origin, (0, e * b), b)))
            .collect()
    });
    Ok(TournamentOutcome {
        winner,
        cycles: cost.tournament(layout),
        gates: net.gates,
        elements,
    })
}

/// Tournament over `codes` on a scratch array sized to one tile.
pub fn tournament_max(
    codes: &[u32],
    b: usize,
    mode: TournamentMode,
    cost: LogicCost,
) -> TournamentOutcome {
    let layout = plan_tournament(codes.len(), b);
    let mut state = CrossbarState::new(layout.rows(), layout.leaf_columns, 9);
    let tile = Placement {
        fb_id: 0,
        origin: (0, 0),
        extent: (layout.rows(), layout.leaf_columns),
    };
    state.cells = map_inputs(&layout, codes).expect("codes fit their own layout");
    run_tournament(&mut state, tile, &layout, mode, cost)
        .expect("scratch tournament is well-formed")
}

pub const LUT_ENTRIES: usize = 1 << 10;
/// Largest exponent magnitude the exp table spans.
pub const LUT_RANGE_CAP: f64 = 16.0;
/// Table entries are stored with this many fractional bits.
const LUT_FRAC_BITS: i32 = 16;

/// Linearly interpolated lookup table over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    pub lo: f64,
    pub hi: f64,
    pub table: Vec<f64>,
}

impl Lut {
    pub fn build(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> Self {
        let step = (hi - lo) / (LUT_ENTRIES - 1) as f64;
        let q = (2f64).powi(LUT_FRAC_BITS);
        let table = (0..LUT_ENTRIES)
            .map(|i| (f(lo + i as f64 * step) * q).round() / q)
            .collect();
        Self { lo, hi, table }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(self.lo, self.hi);
        let pos = (x - self.lo) / (self.hi - self.lo) * (LUT_ENTRIES - 1) as f64;
        let i = (pos.floor() as usize).min(LUT_ENTRIES - 2);
        let frac = pos - i as f64;
        self.table[i] * (1.0 - frac) + self.table[i + 1] * frac
    }
}

/// `exp(x_i − x_max − log Σ exp(x_j − x_max))` through exp/log tables whose
/// range is fitted to the inputs. Inputs are fixed point with `frac_bits`.
pub fn softmax_with_max(elems: &[i64], max: i64, frac_bits: u32) -> Vec<f64> {
    assert!(!elems.is_empty(), "softmax of an empty vector");
    if elems.len() == 1 {
        return vec![1.0];
    }
    let scale = (1u64 << frac_bits) as f64;
    let gaps: Vec<f64> = elems.iter().map(|&e| (e - max) as f64 / scale).collect();
    let n = elems.len() as f64;
    let widest = gaps.iter().cloned().fold(0.0, f64::min).abs();
    let span = (widest + n.ln()).clamp(1e-6, LUT_RANGE_CAP);
    let exp = Lut::build(-span, 0.0, f64::exp);
    let log = Lut::build(1.0, n, f64::ln);
    let total: f64 = gaps
        .iter()
        .map(|&g| if g < -span { 0.0 } else { exp.eval(g) })
        .sum();
    let lse = log.eval(total);
    gaps.iter()
        .map(|&g| {
            if g - lse < -span {
                0.0
            } else {
                exp.eval(g - lse)
            }
        })
        .collect()
}

/// Softmax with the maximum found by an in-array tournament over the
/// offset-binary codes of `elems` (`bits` wide).
pub fn softmax_eval(
    elems: &[i64],
    bits: u32,
    frac_bits: u32,
    cost: LogicCost,
) -> (Vec<f64>, TournamentOutcome) {
    let codes: Vec<u32> = elems
        .iter()
        .map(|&e| crate::quant::to_offset(e, bits))
        .collect();
    let t = tournament_max(&codes, bits as usize, TournamentMode::SoftmaxMax, cost);
    let max = crate::quant::from_offset(t.winner, bits);
    (softmax_with_max(elems, max, frac_bits), t)
}
