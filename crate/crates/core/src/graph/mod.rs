//! Layer-graph intermediate representation with shape inference.

mod roadnet;

pub use roadnet::{build_roadnet_rt, RoadNetConfig};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
    /// Whether the layer carries a per-output-channel bias tensor.
    pub bias: bool,
}

impl ConvAttrs {
    pub fn standard(kernel: usize, stride: usize, out_channels: usize) -> Self {
        Self { kernel, stride, dilation: 1, out_channels, mode: ConvMode::Standard, bias: false }
    }

    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Self {
        Self { kernel, stride, dilation: 1, out_channels: channels, mode: ConvMode::Depthwise, bias: false }
    }

    pub fn pointwise(out_channels: usize) -> Self {
        Self { kernel: 1, stride: 1, dilation: 1, out_channels, mode: ConvMode::Pointwise, bias: false }
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        Self { dilation, ..self }
    }

    pub fn with_bias(self, bias: bool) -> Self {
        Self { bias, ..self }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    /// Input extent covered by one kernel application: `D*(K-1)+1`.
    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Dims of the weight tensor as `[out, ky, kx, in]`.
    pub fn weight_dims(&self, in_channels: usize) -> Vec<usize> {
        match self.mode {
            ConvMode::Depthwise => vec![self.out_channels, self.kernel, self.kernel, 1],
            _ => vec![self.out_channels, self.kernel, self.kernel, in_channels],
        }
    }

    pub fn weight_count(&self, in_channels: usize) -> usize {
        self.weight_dims(in_channels).iter().product()
    }
}

/// Bilinear resize factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum ResizeScale {
    Half,
    Eight,
}

impl ResizeScale {
    pub fn factor(self) -> f64 {
        match self {
            ResizeScale::Half => 0.5,
            ResizeScale::Eight => 8.0,
        }
    }

    pub fn apply(self, n: usize) -> usize {
        ((n as f64 * self.factor()).round() as usize).max(1)
    }
}

impl From<ResizeScale> for f64 {
    fn from(s: ResizeScale) -> f64 {
        s.factor()
    }
}

impl TryFrom<f64> for ResizeScale {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, String> {
        if v == 0.5 {
            Ok(ResizeScale::Half)
        } else if v == 8.0 {
            Ok(ResizeScale::Eight)
        } else {
            Err(format!("unsupported resize scale {v} (expected 0.5 or 8)"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs")]
pub enum LayerKind {
    Conv2D(ConvAttrs),
    BatchNorm,
    ReLU,
    Sigmoid,
    GlobalAvgPool,
    BilinearResize { scale: ResizeScale },
    ElemAdd,
    ElemMul,
    Concat,
}

impl LayerKind {
    pub const NAMES: [&'static str; 9] =
        ["Conv2D", "BatchNorm", "ReLU", "Sigmoid", "GlobalAvgPool", "BilinearResize", "ElemAdd", "ElemMul", "Concat"];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2D(_) => "Conv2D",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::ReLU => "ReLU",
            LayerKind::Sigmoid => "Sigmoid",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::BilinearResize { .. } => "BilinearResize",
            LayerKind::ElemAdd => "ElemAdd",
            LayerKind::ElemMul => "ElemMul",
            LayerKind::Concat => "Concat",
        }
    }

    pub fn conv(&self) -> Option<&ConvAttrs> {
        match self {
            LayerKind::Conv2D(a) => Some(a),
            _ => None,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            LayerKind::ElemAdd | LayerKind::ElemMul => n == 2,
            LayerKind::Concat => n >= 1,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<String>) -> Self {
        Self { name: name.into(), kind, inputs }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub dims: Dims,
}

/// Per-port dims keyed by graph-input or node name.
pub type ShapeMap = BTreeMap<String, Dims>;

/// Acyclic layer graph. Node names share one namespace with graph inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<String>,
}

impl NetworkGraph {
    /// Builds a graph and checks names, references, arity, and acyclicity.
    pub fn new(inputs: Vec<GraphInput>, nodes: Vec<Node>, outputs: Vec<String>) -> Result<Self> {
        let g = Self { inputs, nodes, outputs };
        g.check_structure()?;
        g.topo_order()?;
        Ok(g)
    }

    pub fn empty() -> Self {
        Self { inputs: Vec::new(), nodes: Vec::new(), outputs: Vec::new() }
    }

    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn into_parts(self) -> (Vec<GraphInput>, Vec<Node>, Vec<String>) {
        (self.inputs, self.nodes, self.outputs)
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn is_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name)
    }

    /// Names of nodes consuming `name`, in node order.
    pub fn consumers(&self, name: &str) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == name)).collect()
    }

    /// Consumer map for every port, built once.
    pub fn consumer_map(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                map.entry(i.as_str()).or_default().push(n.name.as_str());
            }
        }
        map
    }

    fn check_structure(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self.inputs.iter().map(|i| &i.name).chain(self.nodes.iter().map(|n| &n.name)) {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        for i in &self.inputs {
            i.dims.validate()?;
        }
        for n in &self.nodes {
            if !n.kind.arity_ok(n.inputs.len()) {
                return Err(Error::InvalidLayer {
                    node: n.name.clone(),
                    detail: format!("{} cannot take {} inputs", n.kind.name(), n.inputs.len()),
                });
            }
            for i in &n.inputs {
                if !seen.contains(i.as_str()) {
                    return Err(Error::UnknownInput { node: n.name.clone(), input: i.clone() });
                }
            }
            if let LayerKind::Conv2D(a) = &n.kind {
                check_conv_attrs(&n.name, a)?;
            }
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                return Err(Error::UnknownInput { node: "<outputs>".into(), input: o.clone() });
            }
        }
        Ok(())
    }

    /// Producer-before-consumer order; among ready nodes the smallest name
    /// goes first.
    pub fn topo_order(&self) -> Result<Vec<&Node>> {
        let index: HashMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        let mut pending = vec![0usize; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                if let Some(&p) = index.get(inp.as_str()) {
                    pending[i] += 1;
                    users[p].push(i);
                }
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = pending
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| (self.nodes[i].name.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(&self.nodes[i]);
            for &u in &users[i] {
                pending[u] -= 1;
                if pending[u] == 0 {
                    ready.insert((self.nodes[u].name.as_str(), u));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck =
                pending.iter().enumerate().filter(|(_, &d)| d > 0).map(|(i, _)| self.nodes[i].name.clone()).collect();
            return Err(Error::Cycle(stuck));
        }
        Ok(order)
    }

    pub fn input_dims(&self) -> ShapeMap {
        self.inputs.iter().map(|i| (i.name.clone(), i.dims)).collect()
    }

    /// Shape inference from the declared input dims.
    pub fn infer_shapes(&self) -> Result<ShapeMap> {
        self.infer_shapes_with(&self.input_dims())
    }

    /// Shape inference with explicit input dims; entries override declared
    /// dims of the same name.
    pub fn infer_shapes_with(&self, input_dims: &ShapeMap) -> Result<ShapeMap> {
        let mut shapes = self.input_dims();
        for (k, v) in input_dims {
            v.validate()?;
            shapes.insert(k.clone(), *v);
        }
        for node in self.topo_order()? {
            let ins: Vec<Dims> = node
                .inputs
                .iter()
                .map(|i| shapes.get(i).copied().ok_or_else(|| Error::MissingInput(i.clone())))
                .collect::<Result<_>>()?;
            let out = infer_node(node, &ins)?;
            shapes.insert(node.name.clone(), out);
        }
        Ok(shapes)
    }

    /// Full validation: structure, acyclicity, and end-to-end shapes.
    pub fn validate(&self) -> Result<ShapeMap> {
        self.check_structure()?;
        self.infer_shapes()
    }

    /// Channel count entering each node's first input.
    pub fn in_channels(&self, shapes: &ShapeMap, node: &Node) -> usize {
        node.inputs.first().and_then(|i| shapes.get(i)).map_or(0, |d| d.channels)
    }
}

fn check_conv_attrs(name: &str, a: &ConvAttrs) -> Result<()> {
    let bad = |detail: &str| Err(Error::InvalidLayer { node: name.to_string(), detail: detail.into() });
    if a.kernel == 0 || a.kernel.is_multiple_of(2) {
        return bad("kernel size must be odd and positive");
    }
    if a.stride == 0 || a.dilation == 0 || a.out_channels == 0 {
        return bad("stride, dilation and out_channels must be at least 1");
    }
    if a.mode == ConvMode::Pointwise && (a.kernel != 1 || a.dilation != 1) {
        return bad("pointwise convolution requires K = 1 and D = 1");
    }
    Ok(())
}

/// Same-padding output extent.
pub fn same_out(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Leading zero-padding for same-padded sliding windows.
pub fn same_pad_before(n: usize, stride: usize, extent: usize) -> usize {
    let out = same_out(n, stride);
    let total = ((out - 1) * stride + extent).saturating_sub(n);
    total / 2
}

fn infer_node(node: &Node, ins: &[Dims]) -> Result<Dims> {
    let mismatch = |detail: String| Error::ShapeMismatch { node: node.name.clone(), detail };
    let first = ins[0];
    Ok(match &node.kind {
        LayerKind::Conv2D(a) => {
            if a.mode == ConvMode::Depthwise && a.out_channels != first.channels {
                return Err(mismatch(format!(
                    "depthwise conv needs out_channels = in_channels ({} vs {})",
                    a.out_channels, first.channels
                )));
            }
            Dims::new(same_out(first.height, a.stride), same_out(first.width, a.stride), a.out_channels)
        }
        LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::Sigmoid => first,
        LayerKind::GlobalAvgPool => Dims::new(1, 1, first.channels),
        LayerKind::BilinearResize { scale } => {
            Dims::new(scale.apply(first.height), scale.apply(first.width), first.channels)
        }
        LayerKind::ElemAdd => {
            if ins[0] != ins[1] {
                return Err(mismatch(format!("ElemAdd operands {} and {}", ins[0], ins[1])));
            }
            first
        }
        LayerKind::ElemMul => {
            let (a, b) = (ins[0], ins[1]);
            let vector = |d: Dims| d.height == 1 && d.width == 1;
            if a == b || (a.channels == b.channels && vector(b)) {
                a
            } else if a.channels == b.channels && vector(a) {
                b
            } else {
                return Err(mismatch(format!("ElemMul operands {a} and {b} do not broadcast")));
            }
        }
        LayerKind::Concat => {
            let mut channels = 0;
            for d in ins {
                if d.height != first.height || d.width != first.width {
                    return Err(mismatch(format!("Concat operands {first} and {d}")));
                }
                channels += d.channels;
            }
            first.with_channels(channels)
        }
    })
}

/// Incremental graph construction; every helper returns the new node's name.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, dims: Dims) -> String {
        self.inputs.push(GraphInput { name: name.into(), dims });
        name.into()
    }

    pub fn node(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.nodes.push(Node::new(name, kind, inputs.iter().map(|s| s.to_string()).collect()));
        name.into()
    }

    pub fn conv(&mut self, name: &str, input: &str, attrs: ConvAttrs) -> String {
        self.node(name, LayerKind::Conv2D(attrs), &[input])
    }

    /// Conv followed by BatchNorm and ReLU, named `name`, `name_bn`, `name_relu`.
    pub fn conv_bn_relu(&mut self, name: &str, input: &str, attrs: ConvAttrs) -> String {
        let c = self.conv(name, input, attrs);
        let b = self.node(&format!("{name}_bn"), LayerKind::BatchNorm, &[&c]);
        self.node(&format!("{name}_relu"), LayerKind::ReLU, &[&b])
    }

    pub fn finish(self, outputs: &[&str]) -> Result<NetworkGraph> {
        NetworkGraph::new(self.inputs, self.nodes, outputs.iter().map(|s| s.to_string()).collect())
    }
}
