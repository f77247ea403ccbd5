//! Seeded synthetic weights, inputs and small random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Kernel, LayerKind, LayerSpec, ModelGraph, Shape, Window};
use crate::quant::{signed_range, weight_range};
use crate::reference::{ModelWeights, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_weights(graph: &ModelGraph, rng: &mut impl Rng) -> ModelWeights {
    let layers = graph
        .layers
        .iter()
        .map(|l| {
            l.kind.is_gemm().then(|| {
                let (lo, hi) = weight_range(l.bits_w);
                (0..l.gemm_rows() * l.out_channels())
                    .map(|_| rng.gen_range(lo..=hi))
                    .collect()
            })
        })
        .collect();
    ModelWeights { layers }
}

pub fn random_input(graph: &ModelGraph, rng: &mut impl Rng) -> Tensor {
    let shape = graph.input_shape();
    let (lo, hi) = signed_range(graph.layers[0].bits_in);
    Tensor::from_vec(
        shape,
        (0..shape.len()).map(|_| rng.gen_range(lo..=hi)).collect(),
    )
}

/// Weights and input for `graph` from one seed.
pub fn workload(graph: &ModelGraph, seed: u64) -> (ModelWeights, Tensor) {
    let mut r = rng(seed);
    let w = random_weights(graph, &mut r);
    let x = random_input(graph, &mut r);
    (w, x)
}

fn spec(id: u32, kind: LayerKind, in_shape: Shape, bits: u32) -> LayerSpec {
    LayerSpec {
        id,
        kind,
        in_shape,
        kernel: None,
        window: None,
        residual_source: None,
        input: None,
        bits_in: bits,
        bits_w: bits,
    }
}

/// A small Conv → {ReLU, Max, Conv+Res} → [FC → [Softmax]] network that
/// fits a 128×128 array, for randomized end-to-end checks.
pub fn random_toy_model(rng: &mut impl Rng) -> ModelGraph {
    let bits = rng.gen_range(3..=6u32);
    let c = rng.gen_range(1..=3usize);
    let hw = rng.gen_range(4..=8usize);
    let mut layers = Vec::new();
    let mut shape = Shape::new(c, hw, hw);
    let mut id = 1;

    let k = rng.gen_range(1..=3usize);
    let out_channels = rng.gen_range(1..=4usize);
    let pad = if k > 1 { rng.gen_range(0..=1usize) } else { 0 };
    let mut conv = spec(id, LayerKind::Conv, shape, bits);
    conv.kernel = Some(Kernel {
        out_channels,
        kh: k,
        kw: k,
        stride: 1,
        pad,
    });
    let conv_out = crate::model::output_shape(&conv).expect("toy conv shape");
    layers.push(conv);
    shape = conv_out;
    id += 1;

    match rng.gen_range(0..4u32) {
        0 => {
            // Conv → ReLU → Max
            layers.push(spec(id, LayerKind::Relu, shape, bits));
            id += 1;
            push_max(&mut layers, &mut shape, id, bits, rng);
        }
        1 => push_max(&mut layers, &mut shape, id, bits, rng),
        2 => {
            // Residual with an identity-shaped source: a second conv reads
            // the first conv's output and adds it back.
            let mut conv2 = spec(id, LayerKind::Conv, shape, bits);
            conv2.kernel = Some(Kernel {
                out_channels: shape.channels,
                kh: 1,
                kw: 1,
                stride: 1,
                pad: 0,
            });
            layers.push(conv2);
            let mut res = spec(id + 1, LayerKind::Res, shape, bits);
            res.residual_source = Some(1);
            layers.push(res);
            id += 1;
        }
        _ => layers.push(spec(id, LayerKind::Relu, shape, bits)),
    }
    id += 1;

    if rng.gen_bool(0.5) {
        let mut fc = spec(id, LayerKind::Fc, shape.flattened(), bits);
        let classes = rng.gen_range(2..=6usize);
        fc.kernel = Some(Kernel {
            out_channels: classes,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
        });
        layers.push(fc);
        if rng.gen_bool(0.5) {
            layers.push(spec(
                id + 1,
                LayerKind::Softmax,
                Shape::new(classes, 1, 1),
                bits,
            ));
        }
    }
    ModelGraph::new("toy-random", layers).expect("random toy model is well-formed")
}

fn push_max(
    layers: &mut Vec<LayerSpec>,
    shape: &mut Shape,
    id: u32,
    bits: u32,
    rng: &mut impl Rng,
) {
    let side = shape.height.min(shape.width);
    let p = rng.gen_range(1..=side.min(3));
    let stride = rng.gen_range(1..=p);
    let mut max = spec(id, LayerKind::Max, *shape, bits);
    max.window = Some(Window {
        ph: p,
        pw: p,
        stride,
    });
    *shape = crate::model::output_shape(&max).expect("toy pool shape");
    layers.push(max);
}
