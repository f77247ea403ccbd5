//! Plain integer reference inference.
//!
//! Straight nested-loop implementations of every layer kind, written
//! independently of the crossbar path so the simulator can be checked
//! against them.

use serde::{Deserialize, Serialize};

use crate::model::{LayerKind, LayerSpec, ModelGraph, Shape};
use crate::quant::{clamp_signed, requant_shift, requantize, softmax_frac_bits};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<i64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<i64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data does not match shape {shape}"
        );
        Self { shape, data }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> i64 {
        self.data[self.index(c, y, x)]
    }

    /// Zero outside the spatial bounds.
    #[inline]
    pub fn get_padded(&self, c: usize, y: isize, x: isize) -> i64 {
        if y < 0 || x < 0 || y as usize >= self.shape.height || x as usize >= self.shape.width {
            0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: i64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }
}

/// Integer weights per layer; `None` for layers without weights.
///
/// Conv weights are stored `[k][c][r][s]`; FC weights `[k][i]` over the
/// flattened input. Either way a row of the unrolled GEMM matrix for output
/// channel `k` is `weights[k * rows .. (k + 1) * rows]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub layers: Vec<Option<Vec<i64>>>,
}

impl ModelWeights {
    pub fn gemm(&self, idx: usize) -> &[i64] {
        self.layers[idx].as_deref().expect("GEMM layer has weights")
    }
}

/// Weight of output channel `k` at unrolled row `row`.
#[inline]
pub fn weight_at(layer: &LayerSpec, weights: &[i64], k: usize, row: usize) -> i64 {
    weights[k * layer.gemm_rows() + row]
}

/// Unrolled input column of a Conv/FC layer at output position `pos`
/// (row order `(c, r, s)`, zero padding).
pub fn unrolled_input(layer: &LayerSpec, input: &Tensor, pos: usize) -> Vec<i64> {
    match layer.kind {
        LayerKind::Fc => input.data.clone(),
        LayerKind::Conv => {
            let k = layer.kernel.unwrap();
            let out_w = (input.shape.width + 2 * k.pad - k.kw) / k.stride + 1;
            let (oy, ox) = (pos / out_w, pos % out_w);
            let mut v = Vec::with_capacity(layer.gemm_rows());
            for c in 0..input.shape.channels {
                for r in 0..k.kh {
                    for s in 0..k.kw {
                        let y = (oy * k.stride + r) as isize - k.pad as isize;
                        let x = (ox * k.stride + s) as isize - k.pad as isize;
                        v.push(input.get_padded(c, y, x));
                    }
                }
            }
            v
        }
        _ => panic!("unrolled_input on a non-GEMM layer"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InferenceOutput {
    Activations(Tensor),
    Probabilities(Vec<f64>),
}

impl InferenceOutput {
    pub fn argmax(&self) -> usize {
        match self {
            InferenceOutput::Activations(t) => argmax_by(&t.data, |a, b| a.cmp(b)),
            InferenceOutput::Probabilities(p) => argmax_by(p, |a, b| a.total_cmp(b)),
        }
    }
}

fn argmax_by<T>(v: &[T], cmp: impl Fn(&T, &T) -> std::cmp::Ordering) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if cmp(&v[i], &v[best]) == std::cmp::Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Double-precision softmax of `x / 2^frac_bits`.
pub fn softmax_f64(elems: &[i64], frac_bits: u32) -> Vec<f64> {
    let scale = (1u64 << frac_bits) as f64;
    let xs: Vec<f64> = elems.iter().map(|&e| e as f64 / scale).collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Intermediate results of the reference run.
pub struct ReferenceRun {
    pub activations: Vec<Tensor>,
    pub accumulators: Vec<Option<Tensor>>,
    pub output: InferenceOutput,
}

pub fn reference_inference(
    graph: &ModelGraph,
    weights: &ModelWeights,
    input: &Tensor,
) -> InferenceOutput {
    reference_run(graph, weights, input).output
}

pub fn reference_run(graph: &ModelGraph, weights: &ModelWeights, input: &Tensor) -> ReferenceRun {
    assert_eq!(input.shape, graph.input_shape(), "input shape");
    let n = graph.layers.len();
    let mut acts: Vec<Tensor> = Vec::with_capacity(n);
    let mut accs: Vec<Option<Tensor>> = Vec::with_capacity(n);
    let mut probs = None;
    for (i, layer) in graph.layers.iter().enumerate() {
        let src = match graph.producer(i) {
            Some(p) => &acts[p],
            None => input,
        };
        let out_shape = graph.out_shapes[i];
        let (act, acc) = match layer.kind {
            LayerKind::Conv | LayerKind::Fc => {
                let w = weights.gemm(i);
                let rows = layer.gemm_rows();
                let shift = requant_shift(rows, layer.bits_w);
                let mut acc = Tensor::zeros(out_shape);
                let mut act = Tensor::zeros(out_shape);
                for pos in 0..out_shape.positions() {
                    let (oy, ox) = (pos / out_shape.width, pos % out_shape.width);
                    for k in 0..out_shape.channels {
                        let mut sum = 0i64;
                        match layer.kind {
                            LayerKind::Fc => {
                                for (r, &x) in src.data.iter().enumerate() {
                                    sum += weight_at(layer, w, k, r) * x;
                                }
                            }
                            _ => {
                                let kern = layer.kernel.unwrap();
                                for c in 0..src.shape.channels {
                                    for r in 0..kern.kh {
                                        for s in 0..kern.kw {
                                            let y =
                                                (oy * kern.stride + r) as isize - kern.pad as isize;
                                            let x =
                                                (ox * kern.stride + s) as isize - kern.pad as isize;
                                            let row = (c * kern.kh + r) * kern.kw + s;
                                            sum += weight_at(layer, w, k, row)
                                                * src.get_padded(c, y, x);
                                        }
                                    }
                                }
                            }
                        }
                        acc.set(k, oy, ox, sum);
                        act.set(k, oy, ox, requantize(sum, shift, layer.bits_in));
                    }
                }
                (act, Some(acc))
            }
            LayerKind::Relu => {
                let data = src.data.iter().map(|&v| v.max(0)).collect();
                (Tensor::from_vec(out_shape, data), None)
            }
            LayerKind::Max => {
                let win = layer.window.unwrap();
                let mut out = Tensor::zeros(out_shape);
                for c in 0..out_shape.channels {
                    for oy in 0..out_shape.height {
                        for ox in 0..out_shape.width {
                            let mut m = i64::MIN;
                            for dy in 0..win.ph {
                                for dx in 0..win.pw {
                                    m = m.max(src.get(
                                        c,
                                        oy * win.stride + dy,
                                        ox * win.stride + dx,
                                    ));
                                }
                            }
                            out.set(c, oy, ox, m);
                        }
                    }
                }
                (out, None)
            }
            LayerKind::Res => {
                let p = graph.producer(i).unwrap();
                let producer = &graph.layers[p];
                let acc = accs[p].as_ref().expect("Res follows a GEMM layer");
                let shift = requant_shift(producer.gemm_rows(), producer.bits_w);
                let ri = graph.index_of(layer.residual_source.unwrap()).unwrap();
                let residual = &acts[ri];
                let data = acc
                    .data
                    .iter()
                    .zip(&residual.data)
                    .map(|(&a, &r)| clamp_signed((a >> shift) + r, layer.bits_in))
                    .collect();
                (Tensor::from_vec(out_shape, data), None)
            }
            LayerKind::Softmax => {
                probs = Some(softmax_f64(&src.data, softmax_frac_bits(layer.bits_in)));
                (src.clone(), None)
            }
        };
        acts.push(act);
        accs.push(acc);
    }
    let output = match probs {
        Some(p) if graph.layers.last().unwrap().kind == LayerKind::Softmax => {
            InferenceOutput::Probabilities(p)
        }
        _ => InferenceOutput::Activations(acts.last().unwrap().clone()),
    };
    ReferenceRun {
        activations: acts,
        accumulators: accs,
        output,
    }
}
