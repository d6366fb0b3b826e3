//! Float reference executor; the ground truth every other path is checked
//! against.

pub mod ops;

pub use ops::{
    batch_norm, bilinear_resize, concat, conv2d_f64, conv2d_naive, elem_add, elem_mul, global_avg_pool, relu,
    resize_to, sigmoid, sigmoid_scalar,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph};
use crate::io::WeightContainer;
use crate::tensor::Tensor;
use crate::weights::{bias_name, bn_scale_name, bn_shift_name, fetch, weight_name};

/// Output tensor of every node, keyed by node name.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub values: BTreeMap<String, Tensor>,
}

impl ExecutionTrace {
    pub fn get(&self, node: &str) -> Option<&Tensor> {
        self.values.get(node)
    }

    /// Output tensors in the graph's output order.
    pub fn outputs<'a>(&'a self, g: &'a NetworkGraph) -> impl Iterator<Item = &'a Tensor> + 'a {
        g.outputs().iter().filter_map(|o| self.values.get(o))
    }
}

/// Runs `g` on named inputs.
pub fn run_float(
    g: &NetworkGraph,
    weights: &WeightContainer,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<ExecutionTrace> {
    let mut input_dims = BTreeMap::new();
    for gi in g.inputs() {
        let t = inputs.get(&gi.name).ok_or_else(|| Error::MissingInput(gi.name.clone()))?;
        input_dims.insert(gi.name.clone(), t.dims());
    }
    let shapes = g.infer_shapes_with(&input_dims)?;
    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    for node in g.topo_order()? {
        let arg = |i: usize| -> &Tensor {
            let name = &node.inputs[i];
            values.get(name).or_else(|| inputs.get(name)).expect("topological order guarantees inputs")
        };
        let out = match &node.kind {
            LayerKind::Conv2D(a) => {
                let x = arg(0);
                let w = fetch(weights, &node.name, &weight_name(&node.name), &a.weight_dims(x.dims().channels))?;
                let b = if a.bias {
                    Some(fetch(weights, &node.name, &bias_name(&node.name), &[a.out_channels])?)
                } else {
                    None
                };
                conv2d_naive(x, w, b, a)?
            }
            LayerKind::BatchNorm => {
                let x = arg(0);
                let c = x.dims().channels;
                let s = fetch(weights, &node.name, &bn_scale_name(&node.name), &[c])?;
                let t = fetch(weights, &node.name, &bn_shift_name(&node.name), &[c])?;
                batch_norm(x, s, t)?
            }
            LayerKind::ReLU => relu(arg(0)),
            LayerKind::Sigmoid => sigmoid(arg(0)),
            LayerKind::GlobalAvgPool => global_avg_pool(arg(0)),
            LayerKind::BilinearResize { scale } => bilinear_resize(arg(0), *scale)?,
            LayerKind::ElemAdd => elem_add(arg(0), arg(1))?,
            LayerKind::ElemMul => elem_mul(arg(0), arg(1))?,
            LayerKind::Concat => {
                let parts: Vec<&Tensor> = (0..node.inputs.len()).map(arg).collect();
                concat(&parts)?
            }
        };
        debug_assert_eq!(out.dims(), shapes[&node.name]);
        values.insert(node.name.clone(), out);
    }
    Ok(ExecutionTrace { values })
}

/// Convenience wrapper for graphs with a single input.
pub fn run_float_single(g: &NetworkGraph, weights: &WeightContainer, input: Tensor) -> Result<ExecutionTrace> {
    let name = match g.inputs() {
        [only] => only.name.clone(),
        _ => return Err(Error::InvalidOperand("graph must have exactly one input".into())),
    };
    run_float(g, weights, &BTreeMap::from([(name, input)]))
}
