//! Functional execution of a mapping plan on crossbar state.
//!
//! Every GEMM chunk is programmed into its array and evaluated bit-serially
//! through the ADCs; partial sums of row chunks are added digitally.
//! Residual additions go through the mirror block under the GEMM columns,
//! and ReLU, max pooling and the softmax maximum are knockout tournaments
//! played in the logic blocks' cells.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitMatrix;
use crate::config::{ConfigError, HardwareConfig};
use crate::crossbar::{gemm_bitserial, write_fb, BasKind, BasOp, CrossbarError, CrossbarState};
use crate::datamap::{map_inputs, map_weights, DatamapError, KernelTile, TileLayout};
use crate::floorplan::Placement;
use crate::logic::{run_tournament, softmax_with_max, LogicCost, TournamentMode};
use crate::lowering::FbOp;
use crate::model::{LayerKind, ModelGraph};
use crate::plan::{ImaMapping, MappingPlan, PlannedFb};
use crate::quant::{
    ceil_log2, from_offset, requant_shift, requantize, softmax_frac_bits, to_offset, to_twos,
};
use crate::reference::{unrolled_input, weight_at, InferenceOutput, ModelWeights, Tensor};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Crossbar(#[from] CrossbarError),
    #[error(transparent)]
    Datamap(#[from] DatamapError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("plan does not cover layer {layer}: {message}")]
    Coverage { layer: u32, message: String },
}

/// Array-level operation counts of one functional run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub write_cycles: u64,
    pub read_cycles: u64,
    pub logic_steps: u64,
    pub tournaments: u64,
    /// Bitline sums clipped by the ADC; non-zero means results may differ
    /// from the integer reference.
    pub adc_saturations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutput {
    pub output: InferenceOutput,
    pub activations: Vec<Tensor>,
    pub stats: ExecStats,
}

struct Executor<'a> {
    graph: &'a ModelGraph,
    weights: &'a ModelWeights,
    plan: &'a MappingPlan,
    adc_bits: u32,
    include_reset: bool,
    cost: LogicCost,
    acts: Vec<Option<Tensor>>,
    probs: Option<Vec<f64>>,
    stats: ExecStats,
}

/// `tile` repeated over the whole block.
fn tiled(tile: &BitMatrix, extent: (usize, usize)) -> BitMatrix {
    let (tr, tc) = (tile.rows(), tile.cols());
    BitMatrix::from_fn(extent.0, extent.1, |r, c| tile.get(r % tr, c % tc))
}

impl Executor<'_> {
    fn input_of(&self, layer: usize) -> &Tensor {
        let p = self.graph.producer(layer).expect("layer has a producer");
        self.acts[p].as_ref().expect("producer ran earlier")
    }

    fn new_state(&self) -> CrossbarState {
        CrossbarState::new(self.plan.array.0, self.plan.array.1, self.adc_bits)
    }

    fn program(
        &mut self,
        state: &mut CrossbarState,
        region: Placement,
        bits: &BitMatrix,
    ) -> Result<(), ExecError> {
        let w = write_fb(state, region, bits, self.include_reset)?;
        self.stats.write_cycles += w.total();
        Ok(())
    }

    /// Run the GEMM chunk of one array, adding into the layer accumulator
    /// `acc[k * positions + pos]`; a residual mirror adds into `residual`.
    fn run_gemm(
        &mut self,
        ima: &ImaMapping,
        state: &mut CrossbarState,
        input: &Tensor,
        acc: &mut [i64],
        residual: &mut [i64],
    ) -> Result<(), ExecError> {
        let g = ima.gemm().expect("array holds a GEMM");
        let FbOp::Gemm {
            layer,
            channels,
            rows,
        } = &g.op
        else {
            unreachable!()
        };
        let l = &self.graph.layers[*layer];
        let w = self.weights.gemm(*layer);
        let kernel = KernelTile {
            rows: rows.len(),
            channels: channels.len(),
            bits_w: l.bits_w,
            values: channels
                .clone()
                .flat_map(|k| rows.clone().map(move |r| weight_at(l, w, k, r)))
                .collect(),
        };
        let asg = g.assignment();
        let tile = map_weights(&asg, &kernel)?;
        self.program(state, g.placement(), &tiled(&tile, g.extent))?;

        let res = ima
            .fbs
            .iter()
            .find(|f| matches!(f.op, FbOp::Residual { .. }));
        let positions = self.graph.out_shapes[*layer].positions();
        let shift = requant_shift(l.gemm_rows(), l.bits_w);
        let replicas = asg.replica_count();
        for pos in 0..positions {
            let x = unrolled_input(l, input, pos);
            let region = asg.replica_region(pos % replicas);
            let out = gemm_bitserial(state, region, &x[rows.clone()], l.bits_in, l.bits_w)?;
            self.stats.read_cycles += out.cycles;
            self.stats.adc_saturations += out.saturated as u64;
            for (i, k) in channels.clone().enumerate() {
                acc[k * positions + pos] += out.values[i];
            }
            if let Some(r) = res {
                let values =
                    self.residual_through_mirror(state, r, g, pos % replicas, pos, shift)?;
                for (i, k) in channels.clone().enumerate() {
                    residual[k * positions + pos] += values[i];
                }
            }
        }
        Ok(())
    }

    /// Write the residual of one output position into the mirror band of
    /// GEMM replica `replica` and read it back bit-plane by bit-plane; the
    /// shift-and-add weights each plane by `2^(plane + shift)` so the
    /// requantizing shift later yields `(acc >> shift) + residual`.
    fn residual_through_mirror(
        &mut self,
        state: &mut CrossbarState,
        mirror: &PlannedFb,
        gemm: &PlannedFb,
        replica: usize,
        pos: usize,
        shift: u32,
    ) -> Result<Vec<i64>, ExecError> {
        let (
            FbOp::Residual {
                source, channels, ..
            },
            TileLayout::Residual { bits, bits_w, .. },
        ) = (&mirror.op, &mirror.layout)
        else {
            unreachable!()
        };
        let residual = self.acts[*source]
            .as_ref()
            .expect("residual source ran earlier");
        let positions = residual.shape.positions();
        let bw = *bits_w as usize;
        let cols = gemm.replicas().1;
        let band = Placement {
            fb_id: mirror.fb_id,
            origin: (
                mirror.origin.0 + (replica / cols) * *bits as usize,
                mirror.origin.1 + (replica % cols) * gemm.by,
            ),
            extent: (*bits as usize, gemm.by),
        };
        state.apply_cycle(&[BasOp {
            kind: BasKind::Reset,
            region: band,
        }])?;
        self.stats.write_cycles += 1;
        for (i, k) in channels.clone().enumerate() {
            let code = to_twos(residual.data[k * positions + pos], *bits);
            let column = (0..*bits).map(|t| code >> t & 1 == 1).collect();
            state.apply_cycle(&[BasOp {
                kind: BasKind::WriteColumn {
                    col: i * bw,
                    bits: column,
                },
                region: band,
            }])?;
            self.stats.write_cycles += 1;
        }
        let mut out = vec![0i64; channels.len()];
        for t in 0..*bits {
            let input = (0..*bits).map(|u| u == t).collect();
            let read = state.apply_cycle(&[BasOp {
                kind: BasKind::ReadRegion { input },
                region: band,
            }])?;
            self.stats.read_cycles += 1;
            self.stats.adc_saturations += read.saturated as u64;
            let weight = if t == bits - 1 {
                -(1i64 << (t + shift))
            } else {
                1i64 << (t + shift)
            };
            for (i, v) in out.iter_mut().enumerate() {
                *v += weight * read.reads[0].sums[i * bw] as i64;
            }
        }
        Ok(out)
    }

    /// Play one tournament over `values` in replica tile `replica`.
    fn tournament(
        &mut self,
        state: &mut CrossbarState,
        fb: &PlannedFb,
        replica: usize,
        values: &[i64],
        mode: TournamentMode,
    ) -> Result<(i64, Option<Vec<u32>>), ExecError> {
        let TileLayout::Tournament(layout) = &fb.layout else {
            unreachable!()
        };
        let b = layout.b as u32;
        let codes: Vec<u32> = values.iter().map(|&v| to_offset(v, b)).collect();
        let region = fb.assignment().replica_region(replica);
        let bits = map_inputs(layout, &codes)?;
        self.program(state, region, &bits)?;
        let t = run_tournament(state, region, layout, mode, self.cost)?;
        self.stats.tournaments += 1;
        self.stats.logic_steps += layout.matches() as u64;
        Ok((from_offset(t.winner, b), t.elements))
    }

    fn run_stage(&mut self, state: &mut CrossbarState, fb: &PlannedFb) -> Result<(), ExecError> {
        let replicas = fb.replica_count();
        let mut next = 0usize;
        match &fb.op {
            FbOp::Relu { layer, channels } => {
                let src = self.input_of(*layer).clone();
                let mut out = self.acts[*layer]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.out_shapes[*layer]));
                let n = src.shape.positions();
                for k in channels.clone() {
                    for pos in 0..n {
                        let x = src.data[k * n + pos];
                        let (v, _) = self.tournament(
                            state,
                            fb,
                            next % replicas,
                            &[x, 0],
                            TournamentMode::Relu,
                        )?;
                        next += 1;
                        out.data[k * n + pos] = v;
                    }
                }
                self.acts[*layer] = Some(out);
            }
            FbOp::Pool {
                layer,
                relu,
                channels,
            } => {
                let l = &self.graph.layers[*layer];
                let win = l.window.unwrap();
                // With a fused ReLU the block reads whichever of the pair
                // comes first and writes both layers' outputs.
                let first = relu.map_or(*layer, |r| r.min(*layer));
                let src = self.input_of(first).clone();
                let shape = self.graph.out_shapes[*layer];
                let mut out = self.acts[*layer]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(shape));
                let mut relu_out = relu.map(|r| {
                    self.acts[r]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(self.graph.out_shapes[r]))
                });
                for k in channels.clone() {
                    for oy in 0..shape.height {
                        for ox in 0..shape.width {
                            let mut leaves = Vec::with_capacity(win.elements() + 1);
                            for dy in 0..win.ph {
                                for dx in 0..win.pw {
                                    leaves.push(src.get(
                                        k,
                                        oy * win.stride + dy,
                                        ox * win.stride + dx,
                                    ));
                                }
                            }
                            if relu.is_some() {
                                leaves.push(0);
                            }
                            let mode = if relu.is_some() {
                                TournamentMode::Relu
                            } else {
                                TournamentMode::Max
                            };
                            let (v, _) =
                                self.tournament(state, fb, next % replicas, &leaves, mode)?;
                            next += 1;
                            out.set(k, oy, ox, v);
                        }
                    }
                    if let Some(t) = relu_out.as_mut() {
                        // ReLU placed before the pool: its own output is the
                        // clamped input, produced as the leaf row is written.
                        let n = t.shape.positions();
                        if relu.unwrap() < *layer {
                            for pos in 0..n {
                                t.data[k * n + pos] = src.data[k * n + pos].max(0);
                            }
                        } else {
                            for pos in 0..n {
                                t.data[k * n + pos] = out.data[k * n + pos];
                            }
                        }
                    }
                }
                if let (Some(r), Some(t)) = (relu, relu_out) {
                    self.acts[*r] = Some(t);
                }
                self.acts[*layer] = Some(out);
            }
            FbOp::Softmax { layer } => {
                let src = self.input_of(*layer).clone();
                let (max, _) =
                    self.tournament(state, fb, 0, &src.data, TournamentMode::SoftmaxMax)?;
                let frac = softmax_frac_bits(self.graph.layers[*layer].bits_in);
                self.probs = Some(softmax_with_max(&src.data, max, frac));
                self.acts[*layer] = Some(src);
            }
            FbOp::Gemm { .. } | FbOp::Residual { .. } => unreachable!("not a stage block"),
        }
        Ok(())
    }
}

/// Run one inference through the plan's arrays.
pub fn simulate_inference(
    plan: &MappingPlan,
    graph: &ModelGraph,
    weights: &ModelWeights,
    input: &Tensor,
    cfg: &HardwareConfig,
) -> Result<ExecOutput, ExecError> {
    let side = plan.array.0.max(plan.array.1);
    // Array sizes without a configured ADC get one just wide enough.
    let adc_bits = cfg
        .adc_bits_for(side)
        .unwrap_or_else(|_| ceil_log2(plan.array.0 + 1));
    let mut ex = Executor {
        graph,
        weights,
        plan,
        adc_bits,
        include_reset: cfg.include_reset,
        cost: cfg.logic_cost(),
        acts: vec![None; graph.layers.len()],
        probs: None,
        stats: ExecStats::default(),
    };
    for group in &plan.groups {
        let imas: Vec<&ImaMapping> = plan.imas_of(group.index).collect();
        let mut states: Vec<CrossbarState> = imas.iter().map(|_| ex.new_state()).collect();
        if let Some(gemm) = group.gemm(graph) {
            let l = &graph.layers[gemm];
            let src = match graph.producer(gemm) {
                Some(p) => ex.acts[p].clone().expect("producer ran earlier"),
                None => input.clone(),
            };
            let out_shape = graph.out_shapes[gemm];
            let mut acc = vec![0i64; out_shape.len()];
            let mut residual = vec![0i64; out_shape.len()];
            let res_layer = group
                .layers
                .iter()
                .copied()
                .find(|&i| graph.layers[i].kind == LayerKind::Res);
            let mut covered = vec![0usize; out_shape.channels];
            for (ima, state) in imas.iter().zip(states.iter_mut()) {
                let Some(FbOp::Gemm { channels, rows, .. }) = ima.gemm().map(|g| &g.op) else {
                    continue;
                };
                for k in channels.clone() {
                    covered[k] += rows.len();
                }
                ex.run_gemm(ima, state, &src, &mut acc, &mut residual)?;
            }
            if let Some(k) = covered.iter().position(|&c| c != l.gemm_rows()) {
                return Err(ExecError::Coverage {
                    layer: l.id,
                    message: format!("channel {k} sums {} of {} rows", covered[k], l.gemm_rows()),
                });
            }
            let shift = requant_shift(l.gemm_rows(), l.bits_w);
            ex.acts[gemm] = Some(Tensor::from_vec(
                out_shape,
                acc.iter()
                    .map(|&a| requantize(a, shift, l.bits_in))
                    .collect(),
            ));
            if let Some(r) = res_layer {
                let bits = graph.layers[r].bits_in;
                let data = acc
                    .iter()
                    .zip(&residual)
                    .map(|(&a, &r)| requantize(a + r, shift, bits))
                    .collect();
                ex.acts[r] = Some(Tensor::from_vec(out_shape, data));
            }
        }
        for (ima, state) in imas.iter().zip(states.iter_mut()) {
            if !ima.final_chunk {
                continue;
            }
            let mut stages: Vec<&PlannedFb> = ima
                .fbs
                .iter()
                .filter(|f| !matches!(f.op, FbOp::Gemm { .. } | FbOp::Residual { .. }))
                .collect();
            stages.sort_by_key(|f| f.fb_id);
            for fb in stages {
                ex.run_stage(state, fb)?;
            }
        }
    }
    let activations: Vec<Tensor> = ex
        .acts
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            a.ok_or_else(|| ExecError::Coverage {
                layer: graph.layers[i].id,
                message: "no block computes it".into(),
            })
        })
        .collect::<Result<_, _>>()?;
    let output = match ex.probs {
        Some(p) if graph.layers.last().unwrap().kind == LayerKind::Softmax => {
            InferenceOutput::Probabilities(p)
        }
        _ => InferenceOutput::Activations(activations.last().unwrap().clone()),
    };
    Ok(ExecOutput {
        output,
        activations,
        stats: ex.stats,
    })
}
