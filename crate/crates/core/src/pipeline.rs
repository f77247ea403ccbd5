//! Cycle-level pipeline model of the blocks sharing an array.
//!
//! A GEMM block processes output positions in *waves*: one wave evaluates
//! one position per replica, streaming `bits_in` input bits; each bit needs
//! every read column converted, `adc_columns_per_cycle` per cycle. The
//! first non-GEMM block ingests a wave's results through `ny/by` parallel
//! intake lanes, one position (all channels) per lane in `b` write cycles.
//! Results wait in a double-buffered output register, so wave `w + 1` may
//! start only after the ingest of wave `w − 1` finished; any wait is a
//! stall. Once every input of a tournament (pooling window, ReLU pair,
//! softmax vector) has arrived, its compare-and-select steps run without
//! further back-pressure. Groups of layers run one after another, with the
//! activations moved through the tile buffer in between.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::datamap::TileLayout;
use crate::logic::LogicCost;
use crate::lowering::{act_bits, FbId, FbOp};
use crate::model::ModelGraph;
use crate::plan::{ImaMapping, MappingPlan, PlannedFb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LoadInput,
    Compute,
    WriteOutput,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::LoadInput => "load_input",
            Phase::Compute => "compute",
            Phase::WriteOutput => "write_output",
        }
    }
}

/// One busy interval of a block. `granule` numbers the block's work items
/// (waves for a GEMM, input batches for the others).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbTask {
    pub ima: usize,
    pub fb_id: FbId,
    pub phase: Phase,
    pub granule: usize,
    pub start: u64,
    pub end: u64,
    /// Cells activated in each cycle of the interval.
    pub activated_cells: u64,
    /// Task of the same array whose end this one waits for.
    pub after: Option<TaskRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskRef {
    pub fb_id: FbId,
    pub phase: Phase,
    pub granule: usize,
}

impl FbTask {
    pub fn cycles(&self) -> u64 {
        self.end - self.start
    }
}

/// Countable events; energy is their cost-weighted sum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventCounts {
    pub cell_reads: u64,
    pub cell_writes: u64,
    pub dac_drives: u64,
    /// Bitline conversions, keyed by the side length of the converting array.
    pub adc_conversions: BTreeMap<usize, u64>,
    pub sna_ops: u64,
    pub controller_cycles: u64,
    pub register_bytes: u64,
    pub edram_bytes: u64,
    pub digital_ops: u64,
    pub lut_lookups: u64,
    pub logic_gates: u64,
}

impl AddAssign<&EventCounts> for EventCounts {
    fn add_assign(&mut self, o: &EventCounts) {
        self.cell_reads += o.cell_reads;
        self.cell_writes += o.cell_writes;
        self.dac_drives += o.dac_drives;
        for (k, v) in &o.adc_conversions {
            *self.adc_conversions.entry(*k).or_default() += v;
        }
        self.sna_ops += o.sna_ops;
        self.controller_cycles += o.controller_cycles;
        self.register_bytes += o.register_bytes;
        self.edram_bytes += o.edram_bytes;
        self.digital_ops += o.digital_ops;
        self.lut_lookups += o.lut_lookups;
        self.logic_gates += o.logic_gates;
    }
}

impl EventCounts {
    pub fn adc_total(&self) -> u64 {
        self.adc_conversions.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub adc_columns_per_cycle: usize,
    pub logic: LogicCost,
    pub softmax_cycles_per_class: u64,
    pub movement_bytes_per_cycle: u64,
    /// Side length of the simulated array (selects the ADC resolution).
    pub array_side: usize,
}

impl TimingModel {
    pub fn from_config(cfg: &HardwareConfig) -> Self {
        Self {
            adc_columns_per_cycle: cfg.adc_columns_per_cycle,
            logic: cfg.logic_cost(),
            softmax_cycles_per_class: cfg.softmax_cycles_per_class,
            movement_bytes_per_cycle: cfg.movement_bytes_per_cycle,
            array_side: cfg.array_rows.max(cfg.array_cols),
        }
    }

    /// Cycles to evaluate one bit-serial pass reading `columns` bitlines.
    pub fn gemm_wave_cycles(&self, bits_in: u32, columns: usize) -> u64 {
        bits_in as u64 * columns.div_ceil(self.adc_columns_per_cycle).max(1) as u64
    }

    pub fn movement_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.movement_bytes_per_cycle)
    }
}

/// NOR gates evaluated by one compare-and-select on `b`-bit operands.
pub fn gates_per_match(b: usize) -> u64 {
    // ge: 20 per bit plus the tie term; select: 8 per bit plus the inverter.
    28 * b as u64 + 4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImaTrace {
    pub ima: usize,
    pub group: usize,
    pub start: u64,
    pub end: u64,
    /// Cycles GEMM waves waited for the output register to drain.
    pub stall_cycles: u64,
    /// Stalls excluding the first and last wave.
    pub steady_stall_cycles: u64,
    pub tasks: Vec<FbTask>,
    pub events: EventCounts,
    /// `(cycle, n)`: the first `n` output positions of this array's last
    /// block are complete at `cycle`.
    pub outputs: Vec<(u64, usize)>,
}

impl ImaTrace {
    /// Σ over cycles of activated cells, each block clamped to its region.
    pub fn activated_cell_cycles(&self, ima: &ImaMapping) -> u128 {
        self.activated_in(ima, 0, u64::MAX)
    }

    /// Activated cell-cycles within `[from, to)`.
    pub fn activated_in(&self, ima: &ImaMapping, from: u64, to: u64) -> u128 {
        let mut per_fb: BTreeMap<FbId, Vec<(u64, i128)>> = BTreeMap::new();
        for t in &self.tasks {
            let (s, e) = (t.start.max(from), t.end.min(to));
            if t.activated_cells == 0 || e <= s {
                continue;
            }
            let ev = per_fb.entry(t.fb_id).or_default();
            ev.push((s, t.activated_cells as i128));
            ev.push((e, -(t.activated_cells as i128)));
        }
        let mut total = 0u128;
        for (fb, mut ev) in per_fb {
            let cap = ima.fb(fb).placement().cells() as i128;
            ev.sort_unstable();
            let (mut level, mut prev) = (0i128, 0u64);
            for (time, delta) in ev {
                total += level.min(cap) as u128 * (time - prev) as u128;
                level += delta;
                prev = time;
            }
        }
        total
    }

    /// Cycles during which the block has at least one task.
    pub fn busy_cycles(&self, fb_id: FbId) -> u64 {
        let mut iv: Vec<(u64, u64)> = self
            .tasks
            .iter()
            .filter(|t| t.fb_id == fb_id && t.phase != Phase::WriteOutput)
            .map(|t| (t.start, t.end))
            .collect();
        union_length(&mut iv)
    }
}

fn union_length(iv: &mut [(u64, u64)]) -> u64 {
    iv.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(u64, u64)> = None;
    for &(s, e) in iv.iter() {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    total + cur.map_or(0, |(s, e)| e - s)
}

/// Input positions `[.., end)` of a block became available at `ready`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Batch {
    ready: u64,
    end: usize,
    from: TaskRef,
}

fn tournament_of(fb: &PlannedFb) -> &crate::datamap::TournamentLayout {
    match &fb.layout {
        TileLayout::Tournament(t) => t,
        other => panic!("FB{} is not a tournament block: {other:?}", fb.fb_id),
    }
}

/// Input positions, output positions and the channels a stage handles.
fn stage_extent(fb: &PlannedFb, graph: &ModelGraph) -> (usize, usize, usize) {
    match &fb.op {
        FbOp::Pool {
            layer, channels, ..
        }
        | FbOp::Relu { layer, channels } => (
            graph.layers[*layer].in_shape.positions(),
            graph.out_shapes[*layer].positions(),
            channels.len(),
        ),
        FbOp::Softmax { layer } => {
            let s = graph.layers[*layer].in_shape;
            (s.positions(), 1, s.channels)
        }
        FbOp::Gemm { .. } | FbOp::Residual { .. } => unreachable!("not a stage block"),
    }
}

/// Last input position an output position of a stage depends on.
fn last_needed(fb: &PlannedFb, graph: &ModelGraph, out_pos: usize) -> usize {
    match &fb.op {
        FbOp::Pool { layer, .. } => {
            let l = &graph.layers[*layer];
            let w = l.window.unwrap();
            let out_w = graph.out_shapes[*layer].width;
            let (oy, ox) = (out_pos / out_w, out_pos % out_w);
            (oy * w.stride + w.ph - 1) * l.in_shape.width + ox * w.stride + w.pw - 1
        }
        FbOp::Relu { .. } => out_pos,
        FbOp::Softmax { layer } => graph.layers[*layer].in_shape.positions() - 1,
        FbOp::Gemm { .. } | FbOp::Residual { .. } => unreachable!("not a stage block"),
    }
}

struct ImaBuilder<'a> {
    ima: &'a ImaMapping,
    graph: &'a ModelGraph,
    tm: &'a TimingModel,
    tasks: Vec<FbTask>,
    events: EventCounts,
}

impl ImaBuilder<'_> {
    fn task(
        &mut self,
        fb_id: FbId,
        phase: Phase,
        granule: usize,
        start: u64,
        cycles: u64,
        activated: u64,
        after: Option<TaskRef>,
    ) -> u64 {
        let end = start + cycles;
        self.tasks.push(FbTask {
            ima: self.ima.ima,
            fb_id,
            phase,
            granule,
            start,
            end,
            activated_cells: activated,
            after,
        });
        end
    }

    /// Ingest (unless the caller already did) and tournament tasks of one
    /// stage; returns the batches of outputs it produces.
    fn run_stage(&mut self, fb: &PlannedFb, batches: &[Batch], ingest: bool) -> Vec<Batch> {
        let t = tournament_of(fb).clone();
        let (n_in, n_out, kc) = stage_extent(fb, self.graph);
        let lanes = fb.replicas().1.max(1);
        let b = t.b as u64;
        let logic_cycles = self.tm.logic.tournament(&t)
            + if matches!(fb.op, FbOp::Softmax { .. }) {
                n_in as u64 * kc as u64 * self.tm.softmax_cycles_per_class
            } else {
                0
            };
        let cells = fb.extent.0 as u64 * fb.extent.1 as u64;
        let mut out = Vec::new();
        let (mut consumed, mut done, mut ingest_free) = (0usize, 0usize, 0u64);
        for (i, batch) in batches.iter().enumerate() {
            let count = batch.end.min(n_in) - consumed;
            consumed = batch.end.min(n_in);
            let arrived = if ingest {
                let start = batch.ready.max(ingest_free);
                let cycles = count.div_ceil(lanes) as u64 * b;
                let active = count.min(lanes) as u64 * fb.extent.0 as u64;
                ingest_free = self.task(
                    fb.fb_id,
                    Phase::LoadInput,
                    i,
                    start,
                    cycles,
                    active.min(cells),
                    Some(batch.from),
                );
                self.events.cell_writes += (count * kc) as u64 * b;
                self.events.register_bytes += ((count * kc) as u64 * b).div_ceil(8);
                ingest_free
            } else {
                batch.ready
            };
            let mut newly = 0;
            while done + newly < n_out && last_needed(fb, self.graph, done + newly) < consumed {
                newly += 1;
            }
            if newly == 0 {
                continue;
            }
            let tournaments = (newly * kc) as u64;
            let active = (tournaments * 3 * b).min(cells);
            let after = if ingest {
                TaskRef {
                    fb_id: fb.fb_id,
                    phase: Phase::LoadInput,
                    granule: i,
                }
            } else {
                batch.from
            };
            let end = self.task(
                fb.fb_id,
                Phase::Compute,
                i,
                arrived,
                logic_cycles,
                active,
                Some(after),
            );
            self.events.logic_gates += tournaments * t.matches() as u64 * gates_per_match(t.b);
            if matches!(fb.op, FbOp::Softmax { .. }) {
                // exp per class for the sum, one log, exp per class for the output.
                self.events.lut_lookups += 2 * (n_in * kc) as u64 + 1;
            }
            done += newly;
            out.push(Batch {
                ready: end,
                end: done,
                from: TaskRef {
                    fb_id: fb.fb_id,
                    phase: Phase::Compute,
                    granule: i,
                },
            });
        }
        out
    }

    /// GEMM waves coupled with the first stage's ingest (back-pressure).
    fn run_gemm(&mut self, start: u64) -> (Vec<Batch>, u64, u64) {
        let ima = self.ima;
        let g = ima.gemm().expect("array holds a GEMM");
        let FbOp::Gemm {
            layer, channels, ..
        } = &g.op
        else {
            unreachable!()
        };
        let l = &self.graph.layers[*layer];
        let n = self.graph.out_shapes[*layer].positions();
        let p = g.replica_count();
        let kc = channels.len();
        let side = self.tm.array_side;
        let res = ima
            .fbs
            .iter()
            .find(|f| matches!(f.op, FbOp::Residual { .. }));
        let first = ima
            .final_chunk
            .then(|| stage_blocks(ima).into_iter().next())
            .flatten();
        let mut ingest_ends: Vec<u64> = Vec::new();
        let mut batches = Vec::new();
        let (mut t, mut stall, mut steady) = (start, 0u64, 0u64);
        let waves = n.div_ceil(p);
        for w in 0..waves {
            let pw = p.min(n - w * p);
            let cols = pw * g.by;
            let cycles = self.tm.gemm_wave_cycles(l.bits_in, cols);
            let per_cycle = (g.bx * cols.min(self.tm.adc_columns_per_cycle)) as u64;
            let mut gref = TaskRef {
                fb_id: g.fb_id,
                phase: Phase::Compute,
                granule: w,
            };
            let mut e = self.task(g.fb_id, Phase::Compute, w, t, cycles, per_cycle, None);
            let bits = l.bits_in as u64;
            self.events.cell_reads += bits * (pw * g.bx * g.by) as u64;
            self.events.dac_drives += bits * (pw * g.bx) as u64;
            *self.events.adc_conversions.entry(side).or_default() += bits * cols as u64;
            self.events.sna_ops += bits * cols as u64;
            self.events.register_bytes +=
                (bits * (pw * g.bx) as u64).div_ceil(8) + (bits * (pw * kc) as u64).div_ceil(8);
            if let Some(r) = res {
                // The residual tile is written column by column (one data
                // column per channel and used column replica) while the GEMM
                // reads, then read one bit-plane row at a time through the
                // shared bitlines and ADCs.
                let rb = match r.layout {
                    TileLayout::Residual { bits, .. } => bits as u64,
                    _ => unreachable!(),
                };
                let col_reps = g.replicas().1;
                let (col_used, row_used) = (pw.min(col_reps), pw.div_ceil(col_reps));
                let write = 1 + (col_used * kc) as u64;
                let read_cols = col_used * kc;
                let read =
                    rb * row_used as u64 * read_cols.div_ceil(self.tm.adc_columns_per_cycle) as u64;
                let wr = self.task(
                    r.fb_id,
                    Phase::LoadInput,
                    w,
                    t,
                    write,
                    (r.bx * row_used) as u64,
                    None,
                );
                let rs = e.max(wr);
                let rref = TaskRef {
                    fb_id: r.fb_id,
                    phase: Phase::Compute,
                    granule: w,
                };
                e = self.task(
                    r.fb_id,
                    Phase::Compute,
                    w,
                    rs,
                    read,
                    read_cols.min(self.tm.adc_columns_per_cycle) as u64,
                    Some(gref),
                );
                gref = rref;
                self.events.cell_writes += rb * (pw * kc) as u64;
                self.events.cell_reads += rb * (pw * kc) as u64;
                *self.events.adc_conversions.entry(side).or_default() += rb * (pw * kc) as u64;
                self.events.sna_ops += rb * (pw * kc) as u64;
            }
            if !ima.final_chunk {
                // Partial sums travel to the array holding the final chunk.
                self.events.register_bytes += 4 * (pw * kc) as u64;
            }
            let next = match first {
                Some(fb) => {
                    let lanes = fb.replicas().1.max(1);
                    let b = tournament_of(fb).b as u64;
                    let s = e.max(ingest_ends.last().copied().unwrap_or(0));
                    let cycles = pw.div_ceil(lanes) as u64 * b;
                    let active = (pw.min(lanes) * fb.extent.0) as u64;
                    let ie =
                        self.task(fb.fb_id, Phase::LoadInput, w, s, cycles, active, Some(gref));
                    self.events.cell_writes += (pw * kc) as u64 * b;
                    batches.push(Batch {
                        ready: ie,
                        end: (w * p + pw).min(n),
                        from: TaskRef {
                            fb_id: fb.fb_id,
                            phase: Phase::LoadInput,
                            granule: w,
                        },
                    });
                    let free = if w >= 1 { ingest_ends[w - 1] } else { 0 };
                    ingest_ends.push(ie);
                    e.max(free)
                }
                None => {
                    batches.push(Batch {
                        ready: e,
                        end: (w * p + pw).min(n),
                        from: gref,
                    });
                    e
                }
            };
            if w + 1 < waves {
                stall += next - e;
                if w >= 1 && w + 2 < waves {
                    steady += next - e;
                }
            }
            t = next;
        }
        (batches, stall, steady)
    }
}

/// Non-GEMM, non-mirror blocks in chain order.
fn stage_blocks(ima: &ImaMapping) -> Vec<&PlannedFb> {
    let mut v: Vec<&PlannedFb> = ima
        .fbs
        .iter()
        .filter(|f| !matches!(f.op, FbOp::Gemm { .. } | FbOp::Residual { .. }))
        .collect();
    v.sort_by_key(|f| f.fb_id);
    v
}

/// Schedule one array starting at cycle `start`. An array without a GEMM
/// takes its inputs from `feed` (see [`ImaTrace::outputs`]), or all at
/// `start` when there is none.
pub fn schedule_ima(
    ima: &ImaMapping,
    graph: &ModelGraph,
    tm: &TimingModel,
    start: u64,
    feed: Option<&[(u64, usize)]>,
) -> ImaTrace {
    let mut bld = ImaBuilder {
        ima,
        graph,
        tm,
        tasks: Vec::new(),
        events: EventCounts::default(),
    };
    let stages = if ima.final_chunk {
        stage_blocks(ima)
    } else {
        Vec::new()
    };
    let (mut batches, stall, steady, skip_first_ingest) = if ima.gemm().is_some() {
        let (b, s, st) = bld.run_gemm(start);
        (b, s, st, true)
    } else {
        // Inputs from another array or the tile buffer; no local producer.
        let from = TaskRef {
            fb_id: 0,
            phase: Phase::LoadInput,
            granule: 0,
        };
        let n = stages.first().map_or(0, |f| stage_extent(f, graph).0);
        let batches = match feed {
            Some(f) => f
                .iter()
                .map(|&(ready, end)| Batch {
                    ready: ready.max(start),
                    end,
                    from,
                })
                .collect(),
            None => vec![Batch {
                ready: start,
                end: n,
                from,
            }],
        };
        (batches, 0, 0, false)
    };
    for (i, fb) in stages.iter().enumerate() {
        batches = bld.run_stage(fb, &batches, !(i == 0 && skip_first_ingest));
    }
    let end = bld.tasks.iter().map(|t| t.end).max().unwrap_or(start);
    bld.events.controller_cycles += end - start;
    bld.tasks
        .sort_by_key(|t| (t.start, t.fb_id, t.phase, t.granule));
    let outputs = batches.iter().map(|b| (b.ready, b.end)).collect();
    ImaTrace {
        ima: ima.ima,
        group: ima.group,
        start,
        end,
        stall_cycles: stall,
        steady_stall_cycles: steady,
        tasks: bld.tasks,
        events: bld.events,
        outputs,
    }
}

/// Availability of a tensor produced piecewise by several arrays: the
/// first `n` positions are ready once every producer has emitted them.
fn merge_outputs(producers: &[&ImaTrace]) -> Vec<(u64, usize)> {
    let mut ends: Vec<usize> = producers
        .iter()
        .flat_map(|t| t.outputs.iter().map(|o| o.1))
        .collect();
    ends.sort_unstable();
    ends.dedup();
    ends.iter()
        .map(|&n| {
            let ready = producers
                .iter()
                .map(|t| {
                    t.outputs
                        .iter()
                        .find(|o| o.1 >= n)
                        .or(t.outputs.last())
                        .map_or(0, |o| o.0)
                })
                .max()
                .unwrap_or(0);
            (ready, n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpan {
    pub group: usize,
    pub start: u64,
    /// All arrays of the group finished.
    pub compute_end: u64,
    /// Outputs moved out through the tile buffer.
    pub end: u64,
    pub movement_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub imas: Vec<ImaTrace>,
    pub groups: Vec<GroupSpan>,
    pub total_cycles: u64,
    /// Events outside the arrays (activation movement).
    pub movement: EventCounts,
}

fn bytes_of(elements: usize, bits: u32) -> u64 {
    (elements as u64 * bits as u64).div_ceil(8)
}

/// Schedule every group of a plan back to back.
pub fn simulate_timing(plan: &MappingPlan, graph: &ModelGraph, tm: &TimingModel) -> PipelineTrace {
    let mut movement = EventCounts::default();
    let input_bytes = bytes_of(graph.input_shape().len(), graph.layers[0].bits_in);
    movement.edram_bytes += input_bytes;
    let mut t = tm.movement_cycles(input_bytes);
    let mut imas = Vec::new();
    let mut groups = Vec::new();
    for g in &plan.groups {
        // Residual operands are fetched from the tile buffer before the
        // group starts.
        let residual: u64 = g
            .layers
            .iter()
            .filter_map(|&i| {
                graph.layers[i].residual_source.map(|src| {
                    bytes_of(
                        graph.out_shapes[i].len(),
                        act_bits(graph, graph.index_of(src).unwrap()),
                    )
                })
            })
            .sum();
        movement.edram_bytes += residual;
        let start = t + tm.movement_cycles(residual);
        // GEMM arrays first; stage-only arrays of the group consume their
        // streamed outputs.
        let mut traces: Vec<ImaTrace> = plan
            .imas_of(g.index)
            .filter(|i| i.gemm().is_some())
            .map(|ima| schedule_ima(ima, graph, tm, start, None))
            .collect();
        let feed = (!traces.is_empty()).then(|| merge_outputs(&traces.iter().collect::<Vec<_>>()));
        for ima in plan.imas_of(g.index).filter(|i| i.gemm().is_none()) {
            traces.push(schedule_ima(ima, graph, tm, start, feed.as_deref()));
        }
        traces.sort_by_key(|t| t.ima);
        let compute_end = traces.iter().map(|tr| tr.end).max().unwrap_or(start);
        let last = g.last();
        let bytes = bytes_of(graph.out_shapes[last].len(), act_bits(graph, last));
        let end = compute_end + tm.movement_cycles(bytes);
        movement.edram_bytes += bytes;
        for (tr, ima) in traces.iter_mut().zip(plan.imas_of(g.index)) {
            if !ima.final_chunk {
                continue;
            }
            let fb = stage_blocks(ima)
                .last()
                .map(|f| f.fb_id)
                .or(ima.gemm().map(|f| f.fb_id))
                .unwrap();
            tr.tasks.push(FbTask {
                ima: ima.ima,
                fb_id: fb,
                phase: Phase::WriteOutput,
                granule: 0,
                start: compute_end,
                end,
                activated_cells: 0,
                after: None,
            });
        }
        groups.push(GroupSpan {
            group: g.index,
            start,
            compute_end,
            end,
            movement_bytes: bytes,
        });
        imas.extend(traces);
        t = end;
    }
    PipelineTrace {
        imas,
        groups,
        total_cycles: t,
        movement,
    }
}

impl PipelineTrace {
    pub fn events(&self) -> EventCounts {
        let mut e = self.movement.clone();
        for tr in &self.imas {
            e += &tr.events;
        }
        e
    }

    pub fn stall_cycles(&self) -> u64 {
        self.imas.iter().map(|t| t.stall_cycles).sum()
    }

    pub fn steady_stall_cycles(&self) -> u64 {
        self.imas.iter().map(|t| t.steady_stall_cycles).sum()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &FbTask> {
        self.imas.iter().flat_map(|t| t.tasks.iter())
    }

    /// Fraction of non-GEMM busy cycles that overlap GEMM activity on the
    /// same array.
    pub fn overlap_fraction(&self, plan: &MappingPlan) -> f64 {
        let (mut both, mut logic) = (0u64, 0u64);
        for tr in &self.imas {
            let ima = &plan.imas[tr.ima];
            let is_gemm =
                |id: FbId| matches!(ima.fb(id).op, FbOp::Gemm { .. } | FbOp::Residual { .. });
            let pick = |gemm: bool| -> Vec<(u64, u64)> {
                tr.tasks
                    .iter()
                    .filter(|t| t.phase != Phase::WriteOutput && is_gemm(t.fb_id) == gemm)
                    .map(|t| (t.start, t.end))
                    .collect()
            };
            let (mut g, mut l) = (pick(true), pick(false));
            let lg = union_length(&mut g);
            let ll = union_length(&mut l);
            let mut all: Vec<(u64, u64)> = g.iter().chain(&l).copied().collect();
            both += lg + ll - union_length(&mut all);
            logic += ll;
        }
        if logic == 0 {
            0.0
        } else {
            both as f64 / logic as f64
        }
    }

    /// Σ over cycles of activated cells, each block clamped to its region.
    pub fn activated_cell_cycles(&self, plan: &MappingPlan) -> u128 {
        self.imas
            .iter()
            .map(|tr| tr.activated_cell_cycles(&plan.imas[tr.ima]))
            .sum()
    }

    /// Per-array activated cells at one cycle (clamped per block).
    pub fn activated_at(&self, plan: &MappingPlan, ima: usize, cycle: u64) -> u64 {
        let Some(tr) = self.imas.iter().find(|t| t.ima == ima) else {
            return 0;
        };
        let mut per_fb: BTreeMap<FbId, u64> = BTreeMap::new();
        for t in tr
            .tasks
            .iter()
            .filter(|t| t.start <= cycle && cycle < t.end)
        {
            *per_fb.entry(t.fb_id).or_default() += t.activated_cells;
        }
        per_fb
            .iter()
            .map(|(fb, &v)| v.min(plan.imas[ima].fb(*fb).placement().cells() as u64))
            .sum()
    }

    /// Every dependent task starts no earlier than the task it waits for.
    pub fn check_causality(&self) -> Result<(), String> {
        for tr in &self.imas {
            let ends: std::collections::HashMap<TaskRef, u64> = tr
                .tasks
                .iter()
                .map(|t| {
                    (
                        TaskRef {
                            fb_id: t.fb_id,
                            phase: t.phase,
                            granule: t.granule,
                        },
                        t.end,
                    )
                })
                .collect();
            for t in &tr.tasks {
                let Some(dep) = t.after else { continue };
                if dep.fb_id == 0 {
                    continue;
                }
                let Some(&end) = ends.get(&dep) else {
                    return Err(format!(
                        "array {}: FB{} waits for missing task {dep:?}",
                        tr.ima, t.fb_id
                    ));
                };
                if t.start < end {
                    return Err(format!(
                        "array {}: FB{} {} #{} starts at {} before FB{} {} #{} ends at {end}",
                        tr.ima,
                        t.fb_id,
                        t.phase.name(),
                        t.granule,
                        t.start,
                        dep.fb_id,
                        dep.phase.name(),
                        dep.granule
                    ));
                }
            }
        }
        Ok(())
    }

    /// Interval rows: `start,end,ima,group,fb_id,op,phase,granule,activated_cells`.
    pub fn to_csv(&self, plan: &MappingPlan) -> String {
        let mut out = String::from("start,end,ima,group,fb_id,op,phase,granule,activated_cells\n");
        for tr in &self.imas {
            for t in &tr.tasks {
                let op = plan.imas[tr.ima].fb(t.fb_id).op_kind;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    t.start,
                    t.end,
                    tr.ima,
                    tr.group,
                    t.fb_id,
                    op,
                    t.phase.name(),
                    t.granule,
                    t.activated_cells
                ));
            }
        }
        out
    }

    /// One row per active block per cycle in `[from, to)`:
    /// `cycle,ima,fb_id,phase,activated_cells`.
    pub fn cycle_rows(&self, from: u64, to: u64) -> String {
        let mut rows: Vec<(u64, usize, FbId, Phase, u64)> = Vec::new();
        for t in self.tasks() {
            let (s, e) = (t.start.max(from), t.end.min(to));
            for c in s..e {
                rows.push((c, t.ima, t.fb_id, t.phase, t.activated_cells));
            }
        }
        rows.sort_unstable();
        let mut out = String::from("cycle,ima,fb_id,phase,activated_cells\n");
        for (c, ima, fb, ph, a) in rows {
            out.push_str(&format!("{c},{ima},{fb},{},{a}\n", ph.name()));
        }
        out
    }
}

/// Cycles of the first-stage block relative to its GEMM on one array.
pub fn stage_to_gemm_ratio(trace: &ImaTrace, ima: &ImaMapping) -> Option<f64> {
    let g = ima.gemm()?;
    let s = stage_blocks(ima).into_iter().next()?;
    Some(trace.busy_cycles(s.fb_id) as f64 / trace.busy_cycles(g.fb_id) as f64)
}
