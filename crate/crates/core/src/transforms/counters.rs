//! Parameter and multiply-accumulate counters.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{ConvAttrs, ConvMode, LayerKind, NetworkGraph, Node, ShapeMap};

/// Weights of one convolution, excluding bias:
/// standard `K^2*M*N`, depthwise `K^2*M`, pointwise `M*N`.
pub fn conv_weight_params(a: &ConvAttrs, in_channels: usize) -> u64 {
    let k2 = (a.kernel * a.kernel) as u64;
    let (m, n) = (in_channels as u64, a.out_channels as u64);
    match a.mode {
        ConvMode::Standard => k2 * m * n,
        ConvMode::Depthwise => k2 * m,
        ConvMode::Pointwise => m * n,
    }
}

/// Weight ratio of a depthwise-separable pair to the standard conv it
/// replaces: `1/N + 1/K^2`.
pub fn separable_ratio(kernel: usize, out_channels: usize) -> f64 {
    1.0 / out_channels as f64 + 1.0 / (kernel * kernel) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub rows: Vec<LayerCount>,
}

impl CountReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&LayerCount> {
        self.rows.iter().find(|r| r.layer == layer)
    }
}

pub(crate) fn node_count(node: &Node, shapes: &ShapeMap) -> LayerCount {
    let in_ch = node.inputs.first().and_then(|i| shapes.get(i)).map_or(0, |d| d.channels);
    let out = shapes.get(&node.name).copied();
    let (params, macs) = match &node.kind {
        LayerKind::Conv2D(a) => {
            let w = conv_weight_params(a, in_ch);
            let bias = if a.bias { a.out_channels as u64 } else { 0 };
            let pixels = out.map_or(0, |d| d.pixels() as u64);
            (w + bias, pixels * w)
        }
        LayerKind::BatchNorm => (2 * in_ch as u64, 0),
        _ => (0, 0),
    };
    LayerCount { layer: node.name.clone(), kind: node.kind.name().to_string(), params, macs }
}

/// Per-layer parameter and MAC counts for every parameterized node, using the
/// graph's declared input dims.
pub fn count(g: &NetworkGraph) -> Result<CountReport> {
    let shapes = g.infer_shapes()?;
    Ok(count_with_shapes(g, &shapes))
}

pub fn count_with_shapes(g: &NetworkGraph, shapes: &ShapeMap) -> CountReport {
    let rows = g.nodes().iter().map(|n| node_count(n, shapes)).filter(|r| r.params > 0 || r.macs > 0).collect();
    CountReport { rows }
}

pub fn count_params(g: &NetworkGraph) -> Result<u64> {
    Ok(count(g)?.total_params())
}

pub fn count_macs(g: &NetworkGraph, input_dims: &ShapeMap) -> Result<u64> {
    let shapes = g.infer_shapes_with(input_dims)?;
    Ok(count_with_shapes(g, &shapes).total_macs())
}
