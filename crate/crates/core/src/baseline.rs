//! GEMM-only reference accelerator: weights statically mapped onto fixed
//! size arrays with multi-bit cells, every non-GEMM layer executed by the
//! tile's digital units, every layer output moved through the tile buffer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::HardwareConfig;
use crate::lowering::{act_bits, group_layers};
use crate::model::{LayerKind, LayerSpec, ModelGraph};
use crate::pipeline::EventCounts;

pub const ARRAY_SIZES: [usize; 3] = [128, 256, 512];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Every layer on square arrays of one size.
    Static(usize),
    /// Per layer, the size with the highest spatial utilization.
    MultiSize,
}

impl BaselineKind {
    pub fn name(&self) -> String {
        match self {
            BaselineKind::Static(a) => format!("static-{a}"),
            BaselineKind::MultiSize => "multi-size".into(),
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "multi-size" {
            return Ok(BaselineKind::MultiSize);
        }
        s.strip_prefix("static-")
            .and_then(|a| a.parse::<usize>().ok())
            .filter(|a| *a > 0)
            .map(BaselineKind::Static)
            .ok_or_else(|| format!("unknown baseline `{s}` (expected static-<size> or multi-size)"))
    }
}

/// Tiling of one GEMM weight matrix onto `size × size` arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmTiling {
    pub size: usize,
    pub rows: usize,
    /// Cell columns: output channels times cells per weight.
    pub cols: usize,
}

impl GemmTiling {
    pub fn new(layer: &LayerSpec, size: usize, cell_bits: u32) -> Self {
        let per_weight = layer.bits_w.div_ceil(cell_bits) as usize;
        Self {
            size,
            rows: layer.gemm_rows(),
            cols: layer.out_channels() * per_weight,
        }
    }

    pub fn row_tiles(&self) -> usize {
        self.rows.div_ceil(self.size)
    }

    pub fn col_tiles(&self) -> usize {
        self.cols.div_ceil(self.size)
    }

    pub fn arrays(&self) -> usize {
        self.row_tiles() * self.col_tiles()
    }

    pub fn mapped_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn spatial_utilization(&self) -> f64 {
        self.mapped_cells() as f64 / (self.arrays() * self.size * self.size) as f64
    }

    /// Cycles per output position: input bits stream one per cycle and the
    /// widest array converts its columns `adc` at a time.
    pub fn cycles_per_position(&self, bits_in: u32, adc: usize) -> u64 {
        bits_in as u64 * self.cols.min(self.size).div_ceil(adc) as u64
    }
}

/// Highest spatial utilization among `sizes`; ties go to the larger size.
pub fn best_tiling(layer: &LayerSpec, sizes: &[usize], cell_bits: u32) -> GemmTiling {
    let mut best: Option<GemmTiling> = None;
    for &s in sizes {
        let t = GemmTiling::new(layer, s, cell_bits);
        best = match best {
            Some(b) if b.spatial_utilization() > t.spatial_utilization() => Some(b),
            Some(b) if b.spatial_utilization() == t.spatial_utilization() && b.size > t.size => {
                Some(b)
            }
            _ => Some(t),
        };
    }
    best.expect("at least one size")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLayer {
    pub index: usize,
    pub id: u32,
    pub kind: LayerKind,
    pub start: u64,
    pub end: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiling: Option<GemmTiling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineGroup {
    pub group: usize,
    pub start: u64,
    pub end: u64,
    pub size: usize,
    pub arrays: usize,
    pub spatial_utilization: f64,
    pub temporal_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: String,
    pub layers: Vec<BaselineLayer>,
    pub groups: Vec<BaselineGroup>,
    pub total_cycles: u64,
    pub events: EventCounts,
    /// Arrays allocated per array size.
    pub arrays_by_size: BTreeMap<usize, usize>,
    pub activated_cell_cycles: u128,
}

impl BaselineReport {
    pub fn total_cells(&self) -> usize {
        self.arrays_by_size.iter().map(|(s, n)| s * s * n).sum()
    }
}

pub fn run_baseline(
    graph: &ModelGraph,
    cfg: &HardwareConfig,
    kind: &BaselineKind,
) -> BaselineReport {
    let adc = cfg.adc_columns_per_cycle;
    let d = &cfg.digital;
    let move_cycles = |bytes: u64| bytes.div_ceil(cfg.movement_bytes_per_cycle);
    let lane_cycles = |ops: u64, per: u64| (ops * per).div_ceil(d.lanes);
    let mut events = EventCounts::default();
    let mut arrays_by_size: BTreeMap<usize, usize> = BTreeMap::new();
    let mut layers = Vec::with_capacity(graph.layers.len());
    let mut activated: Vec<u128> = vec![0; graph.layers.len()];

    let input_bytes =
        (graph.input_shape().len() as u64 * graph.layers[0].bits_in as u64).div_ceil(8);
    events.edram_bytes += input_bytes;
    let mut t = move_cycles(input_bytes);

    for (i, l) in graph.layers.iter().enumerate() {
        let start = t;
        let out = graph.out_shapes[i];
        let in_bits = match graph.producer(i) {
            Some(p) => act_bits(graph, p),
            None => l.bits_in,
        } as u64;
        let mut tiling = None;
        let compute = match l.kind {
            LayerKind::Conv | LayerKind::Fc => {
                let tl = match kind {
                    BaselineKind::Static(a) => GemmTiling::new(l, *a, cfg.baseline_cell_bits),
                    BaselineKind::MultiSize => best_tiling(l, &ARRAY_SIZES, cfg.baseline_cell_bits),
                };
                *arrays_by_size.entry(tl.size).or_default() += tl.arrays();
                let n = out.positions() as u64;
                let bits = l.bits_in as u64;
                let conversions = n * bits * (tl.cols * tl.row_tiles()) as u64;
                events.cell_reads += n * bits * tl.mapped_cells() as u64;
                events.dac_drives += n * bits * (tl.rows * tl.col_tiles()) as u64;
                *events.adc_conversions.entry(tl.size).or_default() += conversions;
                events.sna_ops += conversions;
                events.register_bytes += n * (tl.rows as u64 * bits).div_ceil(8)
                    + n * (out.channels as u64 * bits).div_ceil(8);
                activated[i] = n as u128 * bits as u128 * tl.mapped_cells() as u128;
                tiling = Some(tl);
                n * tl.cycles_per_position(l.bits_in, adc)
            }
            LayerKind::Relu => {
                let ops = out.len() as u64;
                events.digital_ops += ops;
                lane_cycles(ops, d.compare_cycles)
            }
            LayerKind::Max => {
                let w = l.window.unwrap();
                let ops = out.len() as u64 * (w.elements() as u64 - 1);
                events.digital_ops += ops;
                lane_cycles(ops, d.compare_cycles)
            }
            LayerKind::Res => {
                let ops = out.len() as u64;
                events.digital_ops += ops;
                // The residual operand is fetched from the tile buffer.
                let bytes = (ops * in_bits).div_ceil(8);
                events.edram_bytes += bytes;
                lane_cycles(ops, d.add_cycles) + move_cycles(bytes)
            }
            LayerKind::Softmax => {
                let n = l.in_shape.len() as u64;
                events.digital_ops += 3 * n;
                lane_cycles(n, d.compare_cycles) + n * d.softmax_cycles_per_class
            }
        };
        let bytes = (out.len() as u64 * act_bits(graph, i) as u64).div_ceil(8);
        events.edram_bytes += bytes;
        t = start + compute + move_cycles(bytes);
        events.controller_cycles += t - start;
        layers.push(BaselineLayer {
            index: i,
            id: l.id,
            kind: l.kind,
            start,
            end: t,
            tiling,
        });
    }

    let mut groups = Vec::new();
    for g in group_layers(graph) {
        let Some(tl) = layers[g.layers[0]].tiling else {
            continue;
        };
        let start = layers[g.layers[0]].start;
        let end = layers[g.last()].end;
        let cells = (tl.arrays() * tl.size * tl.size) as f64;
        groups.push(BaselineGroup {
            group: g.index,
            start,
            end,
            size: tl.size,
            arrays: tl.arrays(),
            spatial_utilization: tl.spatial_utilization(),
            temporal_utilization: activated[g.layers[0]] as f64 / ((end - start) as f64 * cells),
        });
    }
    BaselineReport {
        name: kind.name(),
        layers,
        groups,
        total_cycles: t,
        events,
        arrays_by_size,
        activated_cell_cycles: activated.iter().sum(),
    }
}
