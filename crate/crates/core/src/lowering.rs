//! Lowering of layers to functional-block requirements.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamap::{plan_tournament, TileLayout};
use crate::floorplan::{balance_sizes, BalanceOptions, Constraint, FloorplanError};
use crate::model::{LayerId, LayerKind, ModelGraph};

pub type FbId = u32;

/// Size demand of one functional block: each op instance needs a `bx × by`
/// cell tile, and the layer needs `ops_per_layer` instances in total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbRequirement {
    pub fb_id: FbId,
    pub op_kind: LayerKind,
    pub bx: usize,
    pub by: usize,
    pub ops_per_layer: usize,
    /// Partner GEMM block whose bitlines this block shares (Res only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulates_with: Option<FbId>,
    pub layer: LayerId,
    /// A ReLU folded into this Max block.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fused_relu: bool,
}

impl FbRequirement {
    pub fn new(
        fb_id: FbId,
        op_kind: LayerKind,
        bx: usize,
        by: usize,
        ops_per_layer: usize,
        layer: LayerId,
    ) -> Self {
        Self {
            fb_id,
            op_kind,
            bx,
            by,
            ops_per_layer,
            accumulates_with: None,
            layer,
            fused_relu: false,
        }
    }

    pub fn is_mirror(&self) -> bool {
        self.accumulates_with.is_some()
    }
}

/// What a placed block computes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum FbOp {
    /// Rows `rows` of the unrolled weights for output channels `channels`.
    Gemm {
        layer: usize,
        channels: Range<usize>,
        rows: Range<usize>,
    },
    /// Residual add on the partner GEMM's bitlines.
    Residual {
        layer: usize,
        source: usize,
        channels: Range<usize>,
    },
    /// Max pooling, optionally with a folded ReLU (`relu` is that layer).
    Pool {
        layer: usize,
        relu: Option<usize>,
        channels: Range<usize>,
    },
    Relu {
        layer: usize,
        channels: Range<usize>,
    },
    Softmax {
        layer: usize,
    },
}

impl FbOp {
    /// Graph index of the last layer whose output this block produces.
    pub fn output_layer(&self) -> usize {
        match self {
            FbOp::Gemm { layer, .. }
            | FbOp::Residual { layer, .. }
            | FbOp::Relu { layer, .. }
            | FbOp::Softmax { layer } => *layer,
            FbOp::Pool { layer, relu, .. } => relu.map_or(*layer, |r| r.max(*layer)),
        }
    }

    pub fn channels(&self) -> Option<Range<usize>> {
        match self {
            FbOp::Gemm { channels, .. }
            | FbOp::Residual { channels, .. }
            | FbOp::Pool { channels, .. }
            | FbOp::Relu { channels, .. } => Some(channels.clone()),
            FbOp::Softmax { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoweredFb {
    pub req: FbRequirement,
    pub op: FbOp,
    pub layout: TileLayout,
}

/// Layers executed together: one GEMM layer and the non-GEMM layers that
/// directly follow it (or a run of non-GEMM layers with no GEMM).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub index: usize,
    pub layers: Vec<usize>,
}

impl LayerGroup {
    pub fn gemm(&self, graph: &ModelGraph) -> Option<usize> {
        self.layers
            .first()
            .copied()
            .filter(|&i| graph.layers[i].kind.is_gemm())
    }

    pub fn last(&self) -> usize {
        *self.layers.last().unwrap()
    }
}

/// Blocks sharing one array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImaPlan {
    pub ima: usize,
    pub group: usize,
    /// Holds the last row chunk of its GEMM, where partial sums from the
    /// group's other row chunks are added and the non-GEMM stages run.
    pub final_chunk: bool,
    pub fbs: Vec<LoweredFb>,
}

impl ImaPlan {
    pub fn requirements(&self) -> Vec<FbRequirement> {
        self.fbs.iter().map(|f| f.req.clone()).collect()
    }

    pub fn gemm(&self) -> Option<&LoweredFb> {
        self.fbs.iter().find(|f| matches!(f.op, FbOp::Gemm { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoweredModel {
    pub groups: Vec<LayerGroup>,
    pub imas: Vec<ImaPlan>,
}

impl LoweredModel {
    pub fn imas_of(&self, group: usize) -> impl Iterator<Item = &ImaPlan> {
        self.imas.iter().filter(move |i| i.group == group)
    }
}

#[derive(Debug, Error)]
pub enum LoweringError {
    #[error(transparent)]
    Floorplan(#[from] FloorplanError),
    #[error("layer {layer}: {message}")]
    Unsupported { layer: LayerId, message: String },
}

/// Bit width of the activations a layer produces.
pub fn act_bits(graph: &ModelGraph, idx: usize) -> u32 {
    let layer = &graph.layers[idx];
    match layer.kind {
        LayerKind::Conv | LayerKind::Fc | LayerKind::Res => layer.bits_in,
        _ => match graph.producer(idx) {
            Some(p) => act_bits(graph, p),
            None => layer.bits_in,
        },
    }
}

fn input_bits(graph: &ModelGraph, idx: usize) -> u32 {
    match graph.producer(idx) {
        Some(p) => act_bits(graph, p),
        None => graph.layers[idx].bits_in,
    }
}

pub fn group_layers(graph: &ModelGraph) -> Vec<LayerGroup> {
    let mut groups: Vec<LayerGroup> = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let joins = !layer.kind.is_gemm()
            && groups
                .last()
                .is_some_and(|g| graph.producer(i) == Some(g.last()))
            && (layer.kind != LayerKind::Res || groups.last().unwrap().layers.len() == 1);
        if joins {
            groups.last_mut().unwrap().layers.push(i);
        } else {
            groups.push(LayerGroup {
                index: groups.len(),
                layers: vec![i],
            });
        }
    }
    groups
}

/// Non-GEMM stage of a group before sizing: which layers it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Stage {
    Residual { layer: usize },
    Pool { layer: usize, relu: Option<usize> },
    Relu { layer: usize },
    Softmax { layer: usize },
}

fn stages(graph: &ModelGraph, layers: &[usize]) -> Vec<Stage> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let idx = layers[i];
        let next = layers.get(i + 1).map(|&n| (n, graph.layers[n].kind));
        let stage = match graph.layers[idx].kind {
            LayerKind::Res => Stage::Residual { layer: idx },
            LayerKind::Softmax => Stage::Softmax { layer: idx },
            LayerKind::Relu => match next {
                Some((n, LayerKind::Max)) => {
                    i += 1;
                    Stage::Pool {
                        layer: n,
                        relu: Some(idx),
                    }
                }
                _ => Stage::Relu { layer: idx },
            },
            LayerKind::Max => match next {
                Some((n, LayerKind::Relu)) => {
                    i += 1;
                    Stage::Pool {
                        layer: idx,
                        relu: Some(n),
                    }
                }
                _ => Stage::Pool {
                    layer: idx,
                    relu: None,
                },
            },
            LayerKind::Conv | LayerKind::Fc => unreachable!("GEMM layers open their own group"),
        };
        out.push(stage);
        i += 1;
    }
    out
}

fn stage_fb(
    graph: &ModelGraph,
    stage: &Stage,
    fb_id: FbId,
    gemm: Option<(FbId, u32)>,
    channels: Range<usize>,
) -> LoweredFb {
    let kc = channels.len();
    match *stage {
        Stage::Residual { layer } => {
            let l = &graph.layers[layer];
            let (partner, bits_w) = gemm.expect("Res follows its GEMM");
            let source = graph.index_of(l.residual_source.unwrap()).unwrap();
            let bits = act_bits(graph, source).max(l.bits_in);
            let layout = TileLayout::Residual {
                bits,
                channels: kc,
                bits_w,
            };
            let (bx, by) = layout.tile();
            let mut req = FbRequirement::new(
                fb_id,
                LayerKind::Res,
                bx,
                by,
                graph.out_shapes[layer].positions(),
                l.id,
            );
            req.accumulates_with = Some(partner);
            LoweredFb {
                req,
                op: FbOp::Residual {
                    layer,
                    source,
                    channels,
                },
                layout,
            }
        }
        Stage::Pool { layer, relu } => {
            let l = &graph.layers[layer];
            let first = relu.map_or(layer, |r| r.min(layer));
            let b = input_bits(graph, first) as usize;
            let p = l.window.unwrap().elements() + relu.is_some() as usize;
            let layout = TileLayout::Tournament(plan_tournament(p, b));
            let (bx, by) = layout.tile();
            let ops = graph.out_shapes[layer].positions() * kc;
            let mut req = FbRequirement::new(fb_id, LayerKind::Max, bx, by, ops, l.id);
            req.fused_relu = relu.is_some();
            LoweredFb {
                req,
                op: FbOp::Pool {
                    layer,
                    relu,
                    channels,
                },
                layout,
            }
        }
        Stage::Relu { layer } => {
            let l = &graph.layers[layer];
            let layout =
                TileLayout::Tournament(plan_tournament(2, input_bits(graph, layer) as usize));
            let (bx, by) = layout.tile();
            let ops = graph.out_shapes[layer].positions() * kc;
            LoweredFb {
                req: FbRequirement::new(fb_id, LayerKind::Relu, bx, by, ops, l.id),
                op: FbOp::Relu { layer, channels },
                layout,
            }
        }
        Stage::Softmax { layer } => {
            let l = &graph.layers[layer];
            let layout = TileLayout::Tournament(plan_tournament(
                l.in_shape.len(),
                input_bits(graph, layer) as usize,
            ));
            let (bx, by) = layout.tile();
            LoweredFb {
                req: FbRequirement::new(fb_id, LayerKind::Softmax, bx, by, 1, l.id),
                op: FbOp::Softmax { layer },
                layout,
            }
        }
    }
}

fn gemm_fb(
    graph: &ModelGraph,
    layer: usize,
    fb_id: FbId,
    channels: Range<usize>,
    rows: Range<usize>,
) -> LoweredFb {
    let l = &graph.layers[layer];
    let k = l.kernel.unwrap();
    let (kh, kw) = if l.kind == LayerKind::Fc {
        (1, 1)
    } else {
        (k.kh, k.kw)
    };
    let layout = TileLayout::Weights {
        rows: rows.len(),
        row_offset: rows.start,
        channels: channels.len(),
        bits_w: l.bits_w,
        kh,
        kw,
    };
    let (bx, by) = layout.tile();
    let req = FbRequirement::new(
        fb_id,
        l.kind,
        bx,
        by,
        graph.out_shapes[layer].positions(),
        l.id,
    );
    LoweredFb {
        req,
        op: FbOp::Gemm {
            layer,
            channels,
            rows,
        },
        layout,
    }
}

/// Blocks of an array holding a GEMM chunk followed by `stages`.
fn chunk_fbs(
    graph: &ModelGraph,
    gemm: usize,
    stages: &[Stage],
    channels: Range<usize>,
    rows: Range<usize>,
) -> Vec<LoweredFb> {
    let mut fbs = vec![gemm_fb(graph, gemm, 1, channels.clone(), rows)];
    let partner = Some((1, graph.layers[gemm].bits_w));
    for (i, st) in stages.iter().enumerate() {
        fbs.push(stage_fb(
            graph,
            st,
            i as FbId + 2,
            partner,
            channels.clone(),
        ));
    }
    fbs
}

fn requirements(fbs: &[LoweredFb]) -> Vec<FbRequirement> {
    fbs.iter().map(|f| f.req.clone()).collect()
}

/// Split `total` GEMM rows so the last chunk fits `cap_final` rows and the
/// others fit `cap`, using as few chunks as possible and balancing them.
pub fn split_rows(total: usize, cap_final: usize, cap: usize) -> Option<Vec<Range<usize>>> {
    if cap_final == 0 || cap == 0 {
        return None;
    }
    if total <= cap_final {
        return Some(vec![0..total]);
    }
    let n = 1 + (total - cap_final).div_ceil(cap);
    let last = total.div_ceil(n).min(cap_final);
    let rest = total - last;
    let m = n - 1;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..m {
        let len = rest / m + usize::from(i < rest % m);
        out.push(start..start + len);
        start += len;
    }
    out.push(start..total);
    Some(out)
}

/// Split `total` channels into the fewest chunks of at most `max`, evenly.
pub fn split_even(total: usize, max: usize) -> Vec<Range<usize>> {
    let n = total.div_ceil(max);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = total / n + usize::from(i < total % n);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Row chunks and the largest feasible channel chunk for a GEMM followed
/// by `stages` on the final array.
fn plan_gemm(
    graph: &ModelGraph,
    gemm: usize,
    stages: &[Stage],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<(Vec<Range<usize>>, usize), LoweringError> {
    let l = &graph.layers[gemm];
    let (arr_x, arr_y) = array;
    let probe = chunk_fbs(graph, gemm, stages, 0..1, 0..1);
    let stage_rows: usize = probe[1..].iter().map(|f| f.req.bx).sum();
    let rows =
        split_rows(l.gemm_rows(), arr_x.saturating_sub(stage_rows), arr_x).ok_or_else(|| {
            FloorplanError::Infeasible {
                constraint: Constraint::RowSum,
                detail: format!(
                    "non-GEMM blocks after layer {} need {stage_rows} of {arr_x} rows",
                    l.id
                ),
            }
        })?;
    let last = rows.last().unwrap().clone();
    let kmax = l.out_channels().min(arr_y / l.bits_w as usize);
    let fits = |k: usize| {
        balance_sizes(
            &requirements(&chunk_fbs(graph, gemm, stages, 0..k, last.clone())),
            array,
            opts,
        )
    };
    if kmax == 0 {
        return Err(fits(1).unwrap_err().into());
    }
    match (1..=kmax).rev().find(|&k| fits(k).is_ok()) {
        Some(k) => Ok((rows, k)),
        None => Err(fits(1).unwrap_err().into()),
    }
}

type Chunks = Vec<(Vec<LoweredFb>, bool)>;

fn stage_only(graph: &ModelGraph, st: &[Stage], channels: usize) -> Vec<LoweredFb> {
    st.iter()
        .enumerate()
        .map(|(i, s)| stage_fb(graph, s, i as FbId + 1, None, 0..channels))
        .collect()
}

/// Stages share arrays with the final row chunk of each channel chunk.
fn fused_chunks(
    graph: &ModelGraph,
    gemm: usize,
    st: &[Stage],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<Chunks, LoweringError> {
    let k_total = graph.layers[gemm].out_channels();
    let softmax_at = st.iter().position(|s| matches!(s, Stage::Softmax { .. }));
    let (rows, kmax, split_at) = match (plan_gemm(graph, gemm, st, array, opts), softmax_at) {
        (Ok((rows, k)), _) if k >= k_total => (rows, k, st.len()),
        (Ok((rows, k)), None) => (rows, k, st.len()),
        (Err(e), None) => return Err(e),
        (_, Some(at)) => {
            // The softmax needs every class on one array: give it its own.
            let (rows, k) = plan_gemm(graph, gemm, &st[..at], array, opts)?;
            (rows, k, at)
        }
    };
    let mut out = Vec::new();
    // Partial-sum chunks hold only the GEMM, so they take as many channels
    // as the columns allow; the final chunk shares its array with the
    // stage blocks.
    let (final_rows, partial_rows) = rows.split_last().unwrap();
    let k_full = k_total.min(array.1 / graph.layers[gemm].bits_w as usize);
    for r in partial_rows {
        for channels in split_even(k_total, k_full) {
            out.push((vec![gemm_fb(graph, gemm, 1, channels, r.clone())], false));
        }
    }
    for channels in split_even(k_total, kmax) {
        out.push((
            chunk_fbs(graph, gemm, &st[..split_at], channels, final_rows.clone()),
            true,
        ));
    }
    if split_at < st.len() {
        let fbs = stage_only(graph, &st[split_at..], k_total);
        balance_sizes(&requirements(&fbs), array, opts)?;
        out.push((fbs, true));
    }
    Ok(out)
}

/// Every GEMM chunk fills whole arrays; one more array holds all stages
/// for every channel. `None` when that layout does not apply or fit.
fn split_chunks(
    graph: &ModelGraph,
    gemm: usize,
    st: &[Stage],
    array: (usize, usize),
    opts: BalanceOptions,
) -> Option<Chunks> {
    if st.is_empty() || st.iter().any(|s| matches!(s, Stage::Residual { .. })) {
        return None;
    }
    let l = &graph.layers[gemm];
    let k_full = l.out_channels().min(array.1 / l.bits_w as usize);
    if k_full == 0 {
        return None;
    }
    let rows = split_rows(l.gemm_rows(), array.0, array.0)?;
    let mut out = Vec::new();
    for r in &rows {
        for channels in split_even(l.out_channels(), k_full) {
            out.push((vec![gemm_fb(graph, gemm, 1, channels, r.clone())], false));
        }
    }
    let fbs = stage_only(graph, st, l.out_channels());
    balance_sizes(&requirements(&fbs), array, opts).ok()?;
    out.push((fbs, true));
    Some(out)
}

/// Lower a model to per-array block lists.
pub fn lower_to_fbs(
    graph: &ModelGraph,
    array: (usize, usize),
    opts: BalanceOptions,
) -> Result<LoweredModel, LoweringError> {
    let groups = group_layers(graph);
    let mut imas = Vec::new();
    for g in &groups {
        let mut push = |fbs: Vec<LoweredFb>, final_chunk: bool| {
            imas.push(ImaPlan {
                ima: imas.len(),
                group: g.index,
                final_chunk,
                fbs,
            });
        };
        let Some(gemm) = g.gemm(graph) else {
            let st = stages(graph, &g.layers);
            let c = graph.layers[g.layers[0]].in_shape.channels;
            let fbs: Vec<LoweredFb> = st
                .iter()
                .enumerate()
                .map(|(i, s)| stage_fb(graph, s, i as FbId + 1, None, 0..c))
                .collect();
            balance_sizes(&requirements(&fbs), array, opts)?;
            push(fbs, true);
            continue;
        };
        let st = stages(graph, &g.layers[1..]);
        // Fewer arrays wins, ties go to fused; split also rescues groups
        // whose stages leave no columns for even one fused channel.
        let chosen = match (
            fused_chunks(graph, gemm, &st, array, opts),
            split_chunks(graph, gemm, &st, array, opts),
        ) {
            (Ok(fused), Some(split)) if split.len() < fused.len() => split,
            (Ok(fused), _) => fused,
            (Err(_), Some(split)) => split,
            (Err(e), None) => return Err(e),
        };
        for (fbs, final_chunk) in chosen {
            push(fbs, final_chunk);
        }
    }
    Ok(LoweredModel { groups, imas })
}
