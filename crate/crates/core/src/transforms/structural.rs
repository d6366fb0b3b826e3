//! Shape-preserving rewrites that replace one conv with a chain of
//! hardware-friendly convs. The last node of each chain keeps the original
//! name, so downstream references stay valid.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::{diff_report, PassOutput};
use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, ConvMode, LayerKind, NetworkGraph, Node, ShapeMap};

/// Input extent seen by one output of a conv chain, accounting for strides
/// and dilation: `1 + sum((k_eff - 1) * jump)`.
pub fn receptive_field(chain: &[ConvAttrs]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for a in chain {
        rf += (a.effective_kernel() - 1) * jump;
        jump *= a.stride;
    }
    rf
}

/// Receptive field of `end` relative to the tensor `start`, following first
/// inputs backwards through single-input layers.
pub fn chain_receptive_field(g: &NetworkGraph, start: &str, end: &str) -> Result<usize> {
    let mut chain = Vec::new();
    let mut cur = end.to_string();
    while cur != start {
        let n = g.node(&cur).ok_or_else(|| Error::InvalidOperand(format!("`{start}` is not upstream of `{end}`")))?;
        match &n.kind {
            LayerKind::Conv2D(a) => chain.push(*a),
            LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::Sigmoid => {}
            other => {
                return Err(Error::Unsupported {
                    node: n.name.clone(),
                    detail: format!("{} in conv chain", other.name()),
                })
            }
        }
        cur = n.inputs[0].clone();
    }
    chain.reverse();
    Ok(receptive_field(&chain))
}

struct Namer {
    taken: HashSet<String>,
}

impl Namer {
    fn new(g: &NetworkGraph) -> Self {
        let taken = g.inputs().iter().map(|i| i.name.clone()).chain(g.nodes().iter().map(|n| n.name.clone())).collect();
        Self { taken }
    }

    fn fresh(&mut self, base: String) -> String {
        let mut name = base.clone();
        let mut i = 2;
        while self.taken.contains(&name) {
            name = format!("{base}_{i}");
            i += 1;
        }
        self.taken.insert(name.clone());
        name
    }
}

/// Replacement for one node: a list of convs applied in sequence. When
/// `activate` is set every conv but the last is followed by BatchNorm and ReLU.
struct Chain {
    convs: Vec<ConvAttrs>,
    suffix: &'static str,
    activate: bool,
}

enum Decision {
    Keep,
    Warn(String),
    Replace(Chain, Option<String>),
}

fn rewrite(
    pass: &str,
    g: &NetworkGraph,
    mut decide: impl FnMut(&Node, &ConvAttrs, usize) -> Decision,
) -> Result<PassOutput> {
    let shapes: ShapeMap = g.infer_shapes()?;
    let mut namer = Namer::new(g);
    let mut warnings = Vec::new();
    let mut origin = BTreeMap::new();
    let mut touched = BTreeSet::new();
    let mut nodes = Vec::with_capacity(g.nodes().len());
    for n in g.nodes() {
        let LayerKind::Conv2D(a) = &n.kind else {
            nodes.push(n.clone());
            continue;
        };
        let chain = match decide(n, a, g.in_channels(&shapes, n)) {
            Decision::Keep => None,
            Decision::Warn(w) => {
                warnings.push(w);
                None
            }
            Decision::Replace(c, w) => {
                warnings.extend(w);
                Some(c)
            }
        };
        let Some(chain) = chain else {
            nodes.push(n.clone());
            continue;
        };
        let mut prev = n.inputs[0].clone();
        let last = chain.convs.len() - 1;
        for (i, attrs) in chain.convs.iter().enumerate() {
            if i == last {
                nodes.push(Node::new(n.name.clone(), LayerKind::Conv2D(*attrs), vec![prev.clone()]));
                touched.insert(n.name.clone());
                break;
            }
            let conv = if !chain.activate {
                namer.fresh(format!("{}_{}", n.name, chain.suffix))
            } else {
                namer.fresh(format!("{}_{}{}", n.name, chain.suffix, i + 1))
            };
            nodes.push(Node::new(conv.clone(), LayerKind::Conv2D(*attrs), vec![prev]));
            let mut added = vec![conv.clone()];
            prev = conv.clone();
            if chain.activate {
                let bn = namer.fresh(format!("{conv}_bn"));
                let relu = namer.fresh(format!("{conv}_relu"));
                nodes.push(Node::new(bn.clone(), LayerKind::BatchNorm, vec![conv]));
                nodes.push(Node::new(relu.clone(), LayerKind::ReLU, vec![bn.clone()]));
                prev = relu.clone();
                added.extend([bn, relu]);
            }
            for x in added {
                origin.insert(x.clone(), n.name.clone());
                touched.insert(x);
            }
        }
    }
    let graph = NetworkGraph::new(g.inputs().to_vec(), nodes, g.outputs().to_vec())?;
    let after_shapes = graph.infer_shapes()?;
    for (name, d) in &shapes {
        if after_shapes.get(name) != Some(d) {
            return Err(Error::ShapeMismatch {
                node: name.clone(),
                detail: format!("{pass} changed the output shape"),
            });
        }
    }
    let report = diff_report(pass, g, &shapes, &graph, &after_shapes, &origin, warnings);
    Ok(PassOutput { graph, report, touched })
}

/// Replaces each standard 7×7 conv (C_i→C_o, stride S) by a 3×3 stride-S
/// conv C_i→C_o and two 3×3 convs C_o→C_o. Other kernel sizes outside
/// {1, 3} are reported and left alone.
pub fn decompose_large_kernel(g: &NetworkGraph) -> Result<PassOutput> {
    rewrite("large-kernel", g, |n, a, _| match (a.kernel, a.mode, a.dilation) {
        (1 | 3, _, _) => Decision::Keep,
        (7, ConvMode::Standard, 1) => {
            let first = ConvAttrs::standard(3, a.stride, a.out_channels);
            let rest = ConvAttrs::standard(3, 1, a.out_channels);
            Decision::Replace(
                Chain { convs: vec![first, rest, rest.with_bias(a.bias)], suffix: "k", activate: true },
                None,
            )
        }
        _ => Decision::Warn(format!(
            "{}: {:?} conv with K={} D={} unsupported, left untouched",
            n.name, a.mode, a.kernel, a.dilation
        )),
    })
}

/// Replaces each 3×3 conv of dilation r > 1 with r cascaded undilated 3×3
/// convs of the same mode; the stride moves to the first of them.
pub fn replace_dilated(g: &NetworkGraph) -> Result<PassOutput> {
    rewrite("dilated", g, |n, a, _| {
        let r = a.dilation;
        if r == 1 {
            return Decision::Keep;
        }
        if a.kernel != 3 {
            return Decision::Warn(format!("{}: dilated K={} unsupported, left untouched", n.name, a.kernel));
        }
        let base = ConvAttrs { dilation: 1, bias: false, ..*a };
        let mut convs = vec![base];
        convs.extend((1..r).map(|_| base.with_stride(1)));
        convs[r - 1].bias = a.bias;
        let warn = (r >= 8).then(|| format!("{}: dilation {r} becomes {r} cascaded convs", n.name));
        Decision::Replace(Chain { convs, suffix: "d", activate: true }, warn)
    })
}

/// Splits each standard 3×3 conv with at least 16 input channels into a
/// depthwise 3×3 (stride and dilation kept) and a pointwise 1×1.
pub fn to_depthwise_separable(g: &NetworkGraph) -> Result<PassOutput> {
    rewrite("depthwise-separable", g, |_, a, cin| {
        if a.mode != ConvMode::Standard || a.kernel != 3 || cin < 16 {
            return Decision::Keep;
        }
        let dw = ConvAttrs::depthwise(3, a.stride, cin).with_dilation(a.dilation);
        let pw = ConvAttrs::pointwise(a.out_channels).with_bias(a.bias);
        Decision::Replace(Chain { convs: vec![dw, pw], suffix: "dw", activate: false }, None)
    })
}
