//! Architecture builders: the multi-scale DMCNN, the BrassicaNet seed
//! classifier, BeanNet and a micro depthwise-separable net, plus the JSON
//! build manifest describing every node.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::resize;
use crate::error::{Error, Result};
use crate::image::{stack, Image};
use crate::layers::{Architecture, ArchitectureBuilder, Graph, Op, Padding};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Dmcnn,
    Brassicanet,
    Beannet,
    MicroDsnet,
}

impl ModelName {
    pub const ALL: [ModelName; 4] = [
        ModelName::Dmcnn,
        ModelName::Brassicanet,
        ModelName::Beannet,
        ModelName::MicroDsnet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Dmcnn => "dmcnn",
            ModelName::Brassicanet => "brassicanet",
            ModelName::Beannet => "beannet",
            ModelName::MicroDsnet => "micro_dsnet",
        }
    }

    /// Number of stride-2 pools between the input and the deepest feature map.
    fn pool_depth(self) -> u32 {
        match self {
            ModelName::Dmcnn => 5,
            ModelName::Brassicanet => 4,
            ModelName::Beannet => 5,
            ModelName::MicroDsnet => 3,
        }
    }

    pub fn default_scales(self) -> Vec<(usize, usize)> {
        match self {
            ModelName::Dmcnn => vec![(224, 224), (256, 256), (128, 128)],
            ModelName::Brassicanet | ModelName::Beannet => vec![(128, 128)],
            ModelName::MicroDsnet => vec![(32, 32)],
        }
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            ModelName::Dmcnn | ModelName::Brassicanet => 0.5,
            ModelName::Beannet => 0.3,
            ModelName::MicroDsnet => 0.0,
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model `{s}` (expected dmcnn, brassicanet, beannet or micro_dsnet)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: ModelName,
    pub num_classes: usize,
    /// `(H, W)` of each input stream; only the DMCNN takes more than one.
    pub input_scales: Vec<(usize, usize)>,
    /// Scales convolution channel counts; dense widths are fixed.
    pub width_multiplier: f64,
    /// Main dropout rate (the head dropouts of DMCNN, the dense dropout of
    /// BrassicaNet and BeanNet). Ignored by the micro net.
    pub dropout: f64,
    pub channels: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(name: ModelName, num_classes: usize) -> Self {
        ModelSpec {
            name,
            num_classes,
            input_scales: name.default_scales(),
            width_multiplier: 1.0,
            dropout: name.default_dropout(),
            channels: 3,
            seed: 0,
        }
    }

    pub fn with_scales(mut self, scales: Vec<(usize, usize)>) -> Self {
        self.input_scales = scales;
        self
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::invalid(format!(
                "width_multiplier must be in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("input channels must be positive"));
        }
        if self.input_scales.is_empty() {
            return Err(Error::invalid("at least one input scale is required"));
        }
        if self.name != ModelName::Dmcnn && self.input_scales.len() != 1 {
            return Err(Error::invalid(format!(
                "{} takes exactly one input scale, got {}",
                self.name,
                self.input_scales.len()
            )));
        }
        let min = 1usize << self.name.pool_depth();
        for &(h, w) in &self.input_scales {
            if h < min || w < min {
                return Err(Error::invalid(format!(
                    "scale {h}x{w} is too small for {}: both extents must be at least {min}",
                    self.name
                )));
            }
            if self.name == ModelName::Brassicanet && h != w {
                return Err(Error::invalid(format!(
                    "brassicanet needs a square input, got {h}x{w}"
                )));
            }
        }
        Ok(())
    }

    fn width(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

fn conv(filters: usize, k: usize) -> Op {
    Op::Conv2d {
        filters,
        kernel: [k, k],
        stride: 1,
        padding: Padding::Same,
    }
}

fn pool2() -> Op {
    Op::MaxPool2d {
        window: [2, 2],
        stride: [2, 2],
    }
}

/// Name of the input node for a scale.
pub fn input_name(h: usize, w: usize) -> String {
    format!("input_{h}x{w}")
}

/// Appends `nodes` as a chain starting from `from`; returns the last id.
fn chain(b: &mut ArchitectureBuilder, from: usize, nodes: Vec<(String, Op)>) -> Result<usize> {
    let mut last = from;
    for (name, op) in nodes {
        last = b.add(name, op, &[last])?;
    }
    Ok(last)
}

const DMCNN_KERNELS: [usize; 4] = [7, 5, 3, 3];
const DMCNN_CHANNELS: [usize; 4] = [32, 64, 128, 256];
const DMCNN_BRANCH1_UNITS: usize = 64;
const DMCNN_BRANCH1_DROPOUT: f64 = 0.25;

fn dmcnn_arch(spec: &ModelSpec) -> Result<Architecture> {
    let mut b = ArchitectureBuilder::new();
    let mut streams = Vec::new();
    for &(h, w) in &spec.input_scales {
        let p = format!("s{h}x{w}");
        let input = b.input(input_name(h, w), &[spec.channels, h, w])?;
        let mut x = input;
        let mut stages = Vec::new();
        for (i, (&k, &c)) in DMCNN_KERNELS.iter().zip(&DMCNN_CHANNELS).enumerate() {
            let s = i + 1;
            x = chain(
                &mut b,
                x,
                vec![
                    (format!("{p}.conv{s}"), conv(spec.width(c), k)),
                    (format!("{p}.bn{s}"), Op::batch_norm()),
                    (format!("{p}.relu{s}"), Op::Relu),
                    (format!("{p}.pool{s}"), pool2()),
                ],
            )?;
            stages.push(x);
        }
        let branch1 = chain(
            &mut b,
            stages[0],
            vec![
                (format!("{p}.b1.gap"), Op::GlobalAvgPool),
                (
                    format!("{p}.b1.dense"),
                    Op::Dense {
                        units: DMCNN_BRANCH1_UNITS,
                    },
                ),
                (
                    format!("{p}.b1.dropout"),
                    Op::Dropout {
                        rate: DMCNN_BRANCH1_DROPOUT,
                    },
                ),
            ],
        )?;
        let mut merged = vec![branch1];
        for (j, &stage) in stages.iter().enumerate().skip(1) {
            let br = j + 1;
            merged.push(chain(
                &mut b,
                stage,
                vec![
                    (format!("{p}.b{br}.pool"), pool2()),
                    (format!("{p}.b{br}.flatten"), Op::Flatten),
                ],
            )?);
        }
        let cat = b.add(format!("{p}.concat"), Op::Concat, &merged)?;
        let head = chain(
            &mut b,
            cat,
            vec![
                (format!("{p}.fc1"), Op::Dense { units: 256 }),
                (format!("{p}.fc1_bn"), Op::batch_norm()),
                (format!("{p}.fc1_relu"), Op::Relu),
                (format!("{p}.fc2"), Op::Dense { units: 128 }),
                (format!("{p}.fc2_bn"), Op::batch_norm()),
                (format!("{p}.fc2_relu"), Op::Relu),
                (format!("{p}.drop1"), Op::Dropout { rate: spec.dropout }),
                (format!("{p}.drop2"), Op::Dropout { rate: spec.dropout }),
            ],
        )?;
        streams.push(head);
    }
    let fused = if streams.len() > 1 {
        b.add("fuse", Op::Concat, &streams)?
    } else {
        streams[0]
    };
    let out = chain(
        &mut b,
        fused,
        vec![
            (
                "classifier".into(),
                Op::Dense {
                    units: spec.num_classes,
                },
            ),
            ("softmax".into(), Op::Softmax),
        ],
    )?;
    b.build(out)
}

fn brassicanet_arch(spec: &ModelSpec) -> Result<Architecture> {
    let (h, w) = spec.input_scales[0];
    let mut b = ArchitectureBuilder::new();
    let input = b.input(input_name(h, w), &[spec.channels, h, w])?;
    let mut nodes = Vec::new();
    for (i, (filters, k)) in [(64, 5), (256, 3), (256, 3), (256, 3)].into_iter().enumerate() {
        let s = i + 1;
        nodes.push((format!("conv{s}"), conv(spec.width(filters), k)));
        nodes.push((format!("relu{s}"), Op::Relu));
        nodes.push((format!("pool{s}"), pool2()));
    }
    nodes.extend([
        ("conv5".to_string(), conv(spec.width(128), 3)),
        ("relu5".into(), Op::Relu),
        ("flatten".into(), Op::Flatten),
        ("fc1".into(), Op::Dense { units: 512 }),
        ("fc1_relu".into(), Op::Relu),
        ("fc2".into(), Op::Dense { units: 512 }),
        ("fc2_relu".into(), Op::Relu),
        ("dropout".into(), Op::Dropout { rate: spec.dropout }),
        (
            "classifier".into(),
            Op::Dense {
                units: spec.num_classes,
            },
        ),
        ("softmax".into(), Op::Softmax),
    ]);
    let out = chain(&mut b, input, nodes)?;
    b.build(out)
}

fn beannet_arch(spec: &ModelSpec) -> Result<Architecture> {
    let (h, w) = spec.input_scales[0];
    let mut b = ArchitectureBuilder::new();
    let input = b.input(input_name(h, w), &[spec.channels, h, w])?;
    let mut nodes = Vec::new();
    for s in 1..=5 {
        nodes.push((format!("conv{s}"), conv(spec.width(10), 3)));
        nodes.push((format!("relu{s}"), Op::Relu));
        nodes.push((format!("pool{s}"), pool2()));
    }
    nodes.extend([
        ("flatten".to_string(), Op::Flatten),
        ("fc1".into(), Op::Dense { units: 64 }),
        ("fc1_relu".into(), Op::Relu),
        ("dropout".into(), Op::Dropout { rate: spec.dropout }),
        (
            "classifier".into(),
            Op::Dense {
                units: spec.num_classes,
            },
        ),
        ("softmax".into(), Op::Softmax),
    ]);
    let out = chain(&mut b, input, nodes)?;
    b.build(out)
}

fn micro_dsnet_arch(spec: &ModelSpec) -> Result<Architecture> {
    let (h, w) = spec.input_scales[0];
    let mut b = ArchitectureBuilder::new();
    let input = b.input(input_name(h, w), &[spec.channels, h, w])?;
    let stem = spec.width(8);
    let mut nodes = vec![("stem".to_string(), conv(stem, 3))];
    for s in 1..=3 {
        nodes.push((
            format!("ds{s}"),
            Op::DepthwiseSepConv {
                filters: stem << s,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
            },
        ));
        nodes.push((format!("bn{s}"), Op::batch_norm()));
        nodes.push((format!("relu{s}"), Op::Relu));
        nodes.push((format!("pool{s}"), pool2()));
    }
    nodes.extend([
        ("gap".to_string(), Op::GlobalAvgPool),
        (
            "classifier".into(),
            Op::Dense {
                units: spec.num_classes,
            },
        ),
        ("softmax".into(), Op::Softmax),
    ]);
    let out = chain(&mut b, input, nodes)?;
    b.build(out)
}

/// Validates `spec` and assembles its architecture without allocating
/// parameters.
pub fn build_architecture(spec: &ModelSpec) -> Result<Architecture> {
    spec.validate()?;
    match spec.name {
        ModelName::Dmcnn => dmcnn_arch(spec),
        ModelName::Brassicanet => brassicanet_arch(spec),
        ModelName::Beannet => beannet_arch(spec),
        ModelName::MicroDsnet => micro_dsnet_arch(spec),
    }
}

pub fn build(spec: &ModelSpec) -> Result<Graph> {
    Graph::new(build_architecture(spec)?, spec.seed)
}

fn build_named(spec: &ModelSpec, name: ModelName) -> Result<Graph> {
    if spec.name != name {
        return Err(Error::invalid(format!(
            "spec describes {}, not {name}",
            spec.name
        )));
    }
    build(spec)
}

pub fn build_dmcnn(spec: &ModelSpec) -> Result<Graph> {
    build_named(spec, ModelName::Dmcnn)
}

pub fn build_brassicanet(spec: &ModelSpec) -> Result<Graph> {
    build_named(spec, ModelName::Brassicanet)
}

pub fn build_beannet(spec: &ModelSpec) -> Result<Graph> {
    build_named(spec, ModelName::Beannet)
}

pub fn build_micro_dsnet(spec: &ModelSpec) -> Result<Graph> {
    build_named(spec, ModelName::MicroDsnet)
}

/// Turns images into one `(N, C, H, W)` batch per input node, resizing to
/// each node's extents and expanding grayscale to RGB when needed.
pub fn batch_inputs(arch: &Architecture, images: &[&Image]) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (_, node) in arch.input_nodes() {
        let Op::Input { shape } = &node.op else {
            unreachable!("input_nodes yields input ops")
        };
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(format!(
                "input `{}` is not an image input: {shape:?}",
                node.name
            )));
        };
        let mut prepared = Vec::with_capacity(images.len());
        for img in images {
            let img = match (img.channels(), c) {
                (a, b) if a == b => (*img).clone(),
                (1, 3) => img.to_rgb(),
                (a, b) => {
                    return Err(Error::shape(format!(
                        "input `{}` takes {b}-channel images, got {a} channels",
                        node.name
                    )))
                }
            };
            prepared.push(if (img.height(), img.width()) == (h, w) {
                img
            } else {
                resize(&img, h, w)?
            });
        }
        let refs: Vec<&Image> = prepared.iter().collect();
        out.push((node.name.clone(), stack(&refs)?));
    }
    Ok(out)
}

/// Borrowed view of [`batch_inputs`] output, as [`Graph::forward`] takes it.
pub fn as_feed(inputs: &[(String, Tensor)]) -> Vec<(&str, &Tensor)> {
    inputs.iter().map(|(n, t)| (n.as_str(), t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestNode {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// Everything needed to audit a built model: the spec, every node with its
/// output shape and parameter count, and the totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub layer_count: usize,
    pub param_count: usize,
    pub softmax_nodes: usize,
    pub nodes: Vec<ManifestNode>,
}

impl Manifest {
    pub fn from_architecture(spec: &ModelSpec, arch: &Architecture) -> Self {
        let nodes: Vec<ManifestNode> = arch
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| ManifestNode {
                name: n.name.clone(),
                op: n.op.clone(),
                inputs: n
                    .inputs
                    .iter()
                    .map(|&j| arch.nodes()[j].name.clone())
                    .collect(),
                output_shape: arch.shapes()[i].clone(),
                params: arch.node_param_count(i),
            })
            .collect();
        Manifest {
            spec: spec.clone(),
            layer_count: nodes.len(),
            param_count: arch.param_count(),
            softmax_nodes: nodes.iter().filter(|n| n.op == Op::Softmax).count(),
            nodes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Manifest for `spec`, computed from shapes alone.
pub fn manifest(spec: &ModelSpec) -> Result<Manifest> {
    Ok(Manifest::from_architecture(spec, &build_architecture(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brassicanet_layer_count() {
        let m = manifest(&ModelSpec::new(ModelName::Brassicanet, 10)).unwrap();
        assert!([23, 24].contains(&m.layer_count));
        assert_eq!(m.nodes.last().unwrap().output_shape, vec![10]);
    }

    #[test]
    fn dmcnn_three_scales_one_softmax() {
        let m = manifest(&ModelSpec::new(ModelName::Dmcnn, 10)).unwrap();
        assert_eq!(m.softmax_nodes, 1);
        let inputs = m.nodes.iter().filter(|n| matches!(n.op, Op::Input { .. })).count();
        assert_eq!(inputs, 3);
    }

    #[test]
    fn small_scales_rejected_with_the_scale_named() {
        let spec = ModelSpec::new(ModelName::Dmcnn, 4).with_scales(vec![(16, 16)]);
        let err = build_architecture(&spec).unwrap_err().to_string();
        assert!(err.contains("16x16"), "{err}");
        let spec = ModelSpec::new(ModelName::Beannet, 3).with_scales(vec![(16, 16)]);
        assert!(build_architecture(&spec).is_err());
        assert!(build_architecture(&ModelSpec::new(ModelName::Beannet, 1)).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in ModelName::ALL {
            assert_eq!(m.as_str().parse::<ModelName>().unwrap(), m);
        }
        assert!("vgg16".parse::<ModelName>().is_err());
    }
}
