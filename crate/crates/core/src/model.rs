//! CNN model descriptions: parsing, validation and shape inference.
//!
//! A model file is a JSON document with a `version` tag (`"v1"`), a model
//! `name`, and an ordered list of layers. Each layer consumes the output of
//! the layer listed before it unless `input` names another producer.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type LayerId = u32;

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    #[serde(rename = "FC")]
    Fc,
    Max,
    #[serde(rename = "ReLU")]
    Relu,
    Res,
    Softmax,
}

impl LayerKind {
    /// Layers that run as a GEMM on a weight-stationary block.
    pub fn is_gemm(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::Fc => "FC",
            LayerKind::Max => "Max",
            LayerKind::Relu => "ReLU",
            LayerKind::Res => "Res",
            LayerKind::Softmax => "Softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tensor shape in (channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flattened(&self) -> Shape {
        Shape::new(self.len(), 1, 1)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

impl From<[usize; 3]> for Shape {
    fn from(v: [usize; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kernel {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub kh: usize,
    #[serde(default = "one")]
    pub kw: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub ph: usize,
    pub pw: usize,
    pub stride: usize,
}

impl Window {
    pub fn elements(&self) -> usize {
        self.ph * self.pw
    }
}

fn one() -> usize {
    1
}

fn eight() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    pub in_shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_source: Option<LayerId>,
    /// Producer layer; defaults to the previous layer in file order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<LayerId>,
    #[serde(default = "eight")]
    pub bits_in: u32,
    #[serde(default = "eight")]
    pub bits_w: u32,
}

impl LayerSpec {
    /// Rows of the unrolled weight matrix (R·S·C for Conv, flattened input for FC).
    pub fn gemm_rows(&self) -> usize {
        match (self.kind, self.kernel) {
            (LayerKind::Conv, Some(k)) => k.kh * k.kw * self.in_shape.channels,
            (LayerKind::Fc, Some(_)) => self.in_shape.len(),
            _ => 0,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel
            .map(|k| k.out_channels)
            .unwrap_or(self.in_shape.channels)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: String,
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("layer {layer}: {message}")]
    Shape { layer: LayerId, message: String },
    #[error("layer {layer}: {kind} layers are not supported here ({message})")]
    Unsupported {
        layer: LayerId,
        kind: LayerKind,
        message: String,
    },
}

fn shape_err(layer: LayerId, message: impl Into<String>) -> ModelError {
    ModelError::Shape {
        layer,
        message: message.into(),
    }
}

/// A validated, topologically ordered layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub out_shapes: Vec<Shape>,
    /// (producer id, consumer id); residual edges included.
    pub edges: Vec<(LayerId, LayerId)>,
    producers: Vec<Option<usize>>,
}

pub fn parse_model(text: &str) -> Result<ModelGraph, ModelError> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
    if file.version != SCHEMA_VERSION {
        return Err(ModelError::Schema(format!(
            "unsupported version {:?}, expected {SCHEMA_VERSION:?}",
            file.version
        )));
    }
    ModelGraph::new(file.name, file.layers)
}

pub fn output_shape(layer: &LayerSpec) -> Result<Shape, ModelError> {
    let s = layer.in_shape;
    let id = layer.id;
    match layer.kind {
        LayerKind::Conv => {
            let k = layer
                .kernel
                .ok_or_else(|| shape_err(id, "Conv layer needs a kernel"))?;
            if k.kh == 0 || k.kw == 0 || k.stride == 0 || k.out_channels == 0 {
                return Err(shape_err(
                    id,
                    "kernel dimensions and stride must be positive",
                ));
            }
            let h = s.height + 2 * k.pad;
            let w = s.width + 2 * k.pad;
            if h < k.kh || w < k.kw {
                return Err(shape_err(
                    id,
                    format!("kernel {}x{} larger than padded input {h}x{w}", k.kh, k.kw),
                ));
            }
            Ok(Shape::new(
                k.out_channels,
                (h - k.kh) / k.stride + 1,
                (w - k.kw) / k.stride + 1,
            ))
        }
        LayerKind::Fc => {
            let k = layer
                .kernel
                .ok_or_else(|| shape_err(id, "FC layer needs a kernel"))?;
            if k.out_channels == 0 {
                return Err(shape_err(id, "FC out_channels must be positive"));
            }
            Ok(Shape::new(k.out_channels, 1, 1))
        }
        LayerKind::Max => {
            let w = layer
                .window
                .ok_or_else(|| shape_err(id, "Max layer needs a window"))?;
            if w.ph == 0 || w.pw == 0 || w.stride == 0 {
                return Err(shape_err(
                    id,
                    "window dimensions and stride must be positive",
                ));
            }
            if s.height < w.ph || s.width < w.pw {
                return Err(shape_err(
                    id,
                    format!("window {}x{} larger than input {s}", w.ph, w.pw),
                ));
            }
            Ok(Shape::new(
                s.channels,
                (s.height - w.ph) / w.stride + 1,
                (s.width - w.pw) / w.stride + 1,
            ))
        }
        LayerKind::Relu | LayerKind::Res | LayerKind::Softmax => Ok(s),
    }
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::Schema("model has no layers".into()));
        }
        let mut out_shapes: Vec<Shape> = Vec::with_capacity(layers.len());
        let mut producers = Vec::with_capacity(layers.len());
        let mut edges = Vec::new();
        let index_of = |id: LayerId, upto: usize| layers[..upto].iter().position(|l| l.id == id);

        for (i, layer) in layers.iter().enumerate() {
            let id = layer.id;
            if layers[..i].iter().any(|l| l.id == id) {
                return Err(ModelError::Schema(format!("duplicate layer id {id}")));
            }
            if layer.bits_in == 0 || layer.bits_w == 0 {
                return Err(shape_err(id, "bits_in and bits_w must be at least 1"));
            }
            if layer.bits_in > 16 || layer.bits_w > 16 {
                return Err(shape_err(id, "bit widths above 16 are not supported"));
            }
            if layer.in_shape.is_empty() {
                return Err(shape_err(id, "in_shape must be positive"));
            }
            match layer.kind {
                LayerKind::Conv | LayerKind::Fc if layer.kernel.is_none() => {
                    return Err(ModelError::Schema(format!(
                        "layer {id}: {} requires `kernel`",
                        layer.kind
                    )))
                }
                LayerKind::Max if layer.window.is_none() => {
                    return Err(ModelError::Schema(format!(
                        "layer {id}: Max requires `window`"
                    )))
                }
                LayerKind::Res if layer.residual_source.is_none() => {
                    return Err(ModelError::Schema(format!(
                        "layer {id}: Res requires `residual_source`"
                    )))
                }
                _ => {}
            }
            if layer.kind != LayerKind::Res && layer.residual_source.is_some() {
                return Err(ModelError::Schema(format!(
                    "layer {id}: residual_source is only valid on Res layers"
                )));
            }

            let producer = match layer.input {
                Some(src) => Some(index_of(src, i).ok_or_else(|| {
                    shape_err(id, format!("input layer {src} does not precede this layer"))
                })?),
                None if i == 0 => None,
                None => Some(i - 1),
            };
            if let Some(p) = producer {
                let produced = out_shapes[p];
                let accepts = layer.in_shape == produced
                    || (layer.kind == LayerKind::Fc && layer.in_shape == produced.flattened());
                if !accepts {
                    return Err(shape_err(
                        id,
                        format!(
                            "in_shape {} does not match producer {} output {produced}",
                            layer.in_shape, layers[p].id
                        ),
                    ));
                }
                edges.push((layers[p].id, id));
            }
            if layer.kind == LayerKind::Res {
                let src = layer.residual_source.unwrap();
                let si = index_of(src, i).ok_or_else(|| {
                    shape_err(
                        id,
                        format!("residual_source {src} does not precede this layer"),
                    )
                })?;
                if out_shapes[si] != layer.in_shape {
                    return Err(shape_err(
                        id,
                        format!(
                            "residual_source {src} shape {} does not match {}",
                            out_shapes[si], layer.in_shape
                        ),
                    ));
                }
                match producer {
                    Some(p) if layers[p].kind.is_gemm() => {}
                    _ => {
                        return Err(ModelError::Unsupported {
                            layer: id,
                            kind: LayerKind::Res,
                            message: "a Res layer must directly consume a Conv or FC output".into(),
                        })
                    }
                }
                edges.push((src, id));
            }
            if layer.kind == LayerKind::Softmax && layer.in_shape.is_empty() {
                return Err(shape_err(id, "softmax needs at least one element"));
            }
            let out = output_shape(layer)?;
            if out.is_empty() {
                return Err(shape_err(id, "output shape is empty"));
            }
            out_shapes.push(out);
            producers.push(producer);
        }
        Ok(Self {
            name: name.into(),
            layers,
            out_shapes,
            edges,
            producers,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.layers[0].in_shape
    }

    pub fn output_shape(&self) -> Shape {
        *self.out_shapes.last().unwrap()
    }

    pub fn index_of(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Index of the layer feeding `idx`; `None` for the model input.
    pub fn producer(&self, idx: usize) -> Option<usize> {
        self.producers[idx]
    }

    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        let id = self.layers[idx].id;
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter(|(p, _)| *p == id)
            .filter_map(|(_, c)| self.index_of(*c))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            version: SCHEMA_VERSION.into(),
            name: self.name.clone(),
            layers: self.layers.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    /// Content hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(&self.to_file()).expect("model serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }
}

/// Models shipped with the crate.
pub mod benchmarks {
    use super::{parse_model, ModelGraph};

    pub const ALEXNET_CIFAR: &str = include_str!("../models/alexnet-cifar.json");
    pub const VGG16_CIFAR: &str = include_str!("../models/vgg16-cifar.json");
    pub const RESNET18_CIFAR: &str = include_str!("../models/resnet18-cifar.json");
    pub const TOY_CONV_RELU_MAX: &str = include_str!("../models/toy-conv-relu-max.json");

    pub const NAMES: [&str; 4] = [
        "alexnet-cifar",
        "vgg16-cifar",
        "resnet18-cifar",
        "toy-conv-relu-max",
    ];

    pub fn source(name: &str) -> Option<&'static str> {
        Some(match name {
            "alexnet-cifar" => ALEXNET_CIFAR,
            "vgg16-cifar" => VGG16_CIFAR,
            "resnet18-cifar" => RESNET18_CIFAR,
            "toy-conv-relu-max" => TOY_CONV_RELU_MAX,
            _ => return None,
        })
    }

    pub fn load(name: &str) -> Option<ModelGraph> {
        source(name).map(|s| parse_model(s).expect("shipped model is valid"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(
        id: LayerId,
        in_shape: Shape,
        k: usize,
        r: usize,
        stride: usize,
        pad: usize,
    ) -> LayerSpec {
        LayerSpec {
            id,
            kind: LayerKind::Conv,
            in_shape,
            kernel: Some(Kernel {
                out_channels: k,
                kh: r,
                kw: r,
                stride,
                pad,
            }),
            window: None,
            residual_source: None,
            input: None,
            bits_in: 8,
            bits_w: 8,
        }
    }

    #[test]
    fn single_conv_output_shape() {
        let g = ModelGraph::new("t", vec![conv(1, Shape::new(1, 8, 8), 2, 3, 1, 0)]).unwrap();
        assert_eq!(g.out_shapes[0], Shape::new(2, 6, 6));
        assert!(g.edges.is_empty());
    }

    #[test]
    fn parses_json_with_defaults() {
        let text = r#"{"version":"v1","name":"m","layers":[
            {"id":1,"kind":"Conv","in_shape":[1,8,8],"kernel":{"out_channels":2,"kh":3,"kw":3}},
            {"id":2,"kind":"ReLU","in_shape":[2,6,6]},
            {"id":3,"kind":"Max","in_shape":[2,6,6],"window":{"ph":2,"pw":2,"stride":2}}]}"#;
        let g = parse_model(text).unwrap();
        assert_eq!(g.output_shape(), Shape::new(2, 3, 3));
        assert_eq!(g.edges, vec![(1, 2), (2, 3)]);
        assert_eq!(g.layers[0].bits_w, 8);
    }

    #[test]
    fn rejects_wrong_version_and_missing_fields() {
        let bad_version = r#"{"version":"v0","name":"m","layers":[]}"#;
        assert!(matches!(
            parse_model(bad_version),
            Err(ModelError::Schema(_))
        ));
        let missing_kernel =
            r#"{"version":"v1","name":"m","layers":[{"id":1,"kind":"Conv","in_shape":[1,4,4]}]}"#;
        assert!(matches!(
            parse_model(missing_kernel),
            Err(ModelError::Schema(_))
        ));
        let typo = r#"{"version":"v1","name":"m","layers":[{"id":1,"kind":"Conv","in_shape":[1,4,4],"kernal":{}}]}"#;
        assert!(matches!(parse_model(typo), Err(ModelError::Schema(_))));
    }

    #[test]
    fn residual_shape_mismatch_is_reported_with_layer_id() {
        let s = Shape::new(1, 8, 8);
        let mut res = LayerSpec {
            id: 3,
            kind: LayerKind::Res,
            in_shape: Shape::new(2, 6, 6),
            kernel: None,
            window: None,
            residual_source: Some(1),
            input: None,
            bits_in: 8,
            bits_w: 8,
        };
        let layers = vec![
            conv(1, s, 2, 1, 1, 0),
            conv(2, Shape::new(2, 8, 8), 2, 3, 1, 0),
            res.clone(),
        ];
        match ModelGraph::new("t", layers) {
            Err(ModelError::Shape { layer, .. }) => assert_eq!(layer, 3),
            other => panic!("unexpected {other:?}"),
        }
        res.residual_source = Some(9);
        let layers = vec![conv(1, s, 2, 3, 1, 0), res];
        assert!(ModelGraph::new("t", layers).is_err());
    }

    #[test]
    fn producer_shape_mismatch_is_rejected() {
        let layers = vec![
            conv(1, Shape::new(1, 8, 8), 2, 3, 1, 0),
            conv(2, Shape::new(3, 6, 6), 2, 3, 1, 0),
        ];
        assert!(matches!(
            ModelGraph::new("t", layers),
            Err(ModelError::Shape { layer: 2, .. })
        ));
    }

    #[test]
    fn fc_accepts_flattened_input() {
        let fc = LayerSpec {
            id: 2,
            kind: LayerKind::Fc,
            in_shape: Shape::new(72, 1, 1),
            kernel: Some(Kernel {
                out_channels: 10,
                kh: 1,
                kw: 1,
                stride: 1,
                pad: 0,
            }),
            window: None,
            residual_source: None,
            input: None,
            bits_in: 8,
            bits_w: 8,
        };
        let g = ModelGraph::new("t", vec![conv(1, Shape::new(1, 8, 8), 2, 3, 1, 0), fc]).unwrap();
        assert_eq!(g.layers[1].gemm_rows(), 72);
        assert_eq!(g.output_shape(), Shape::new(10, 1, 1));
    }

    #[test]
    fn shipped_alexnet_has_expected_layer_mix() {
        let g = benchmarks::load("alexnet-cifar").unwrap();
        assert_eq!(g.count_kind(LayerKind::Conv), 5);
        assert_eq!(g.count_kind(LayerKind::Max), 3);
        assert_eq!(g.count_kind(LayerKind::Fc), 3);
        assert_eq!(g.count_kind(LayerKind::Softmax), 1);
        assert!(g.count_kind(LayerKind::Relu) >= 5);
        assert_eq!(g.input_shape(), Shape::new(3, 32, 32));
        assert_eq!(g.output_shape(), Shape::new(10, 1, 1));
    }

    #[test]
    fn shipped_models_parse_and_round_trip() {
        for name in benchmarks::NAMES {
            let g = benchmarks::load(name).unwrap();
            let again = parse_model(&g.to_json()).unwrap();
            assert_eq!(g.fingerprint(), again.fingerprint(), "{name}");
        }
    }
}
