//! Parameter tensor naming and deterministic seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph, Node, ShapeMap};
use crate::io::{StoredTensor, WeightContainer};

pub fn weight_name(node: &str) -> String {
    format!("{node}.weight")
}

pub fn bias_name(node: &str) -> String {
    format!("{node}.bias")
}

pub fn bn_scale_name(node: &str) -> String {
    format!("{node}.scale")
}

pub fn bn_shift_name(node: &str) -> String {
    format!("{node}.shift")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub node: String,
    pub tensor: String,
    pub dims: Vec<usize>,
    pub role: ParamRole,
    /// Fan-in used for weight initialization.
    pub fan_in: usize,
}

/// Parameter tensors a node needs, with their dims.
pub fn node_params(node: &Node, shapes: &ShapeMap) -> Vec<ParamSpec> {
    let in_ch = node.inputs.first().and_then(|i| shapes.get(i)).map_or(0, |d| d.channels);
    let spec = |tensor: String, dims: Vec<usize>, role, fan_in| ParamSpec {
        node: node.name.clone(),
        tensor,
        dims,
        role,
        fan_in,
    };
    match &node.kind {
        LayerKind::Conv2D(a) => {
            let dims = a.weight_dims(in_ch);
            let fan_in = dims[1..].iter().product();
            let mut v = vec![spec(weight_name(&node.name), dims, ParamRole::ConvWeight, fan_in)];
            if a.bias {
                v.push(spec(bias_name(&node.name), vec![a.out_channels], ParamRole::ConvBias, fan_in));
            }
            v
        }
        LayerKind::BatchNorm => vec![
            spec(bn_scale_name(&node.name), vec![in_ch], ParamRole::BnScale, 1),
            spec(bn_shift_name(&node.name), vec![in_ch], ParamRole::BnShift, 1),
        ],
        _ => Vec::new(),
    }
}

pub fn graph_params(g: &NetworkGraph) -> Result<Vec<ParamSpec>> {
    let shapes = g.infer_shapes()?;
    Ok(g.nodes().iter().flat_map(|n| node_params(n, &shapes)).collect())
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Draws one parameter tensor. The stream depends only on `seed` and the
/// tensor name, so re-initializing a renamed or reshaped layer never shifts
/// the values of any other layer.
pub fn init_param(p: &ParamSpec, seed: u64) -> StoredTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&p.tensor));
    let n: usize = p.dims.iter().product();
    let data: Vec<f32> = match p.role {
        ParamRole::ConvWeight => {
            let bound = (6.0 / p.fan_in.max(1) as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        ParamRole::ConvBias => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        ParamRole::BnScale => (0..n).map(|_| rng.gen_range(0.8..1.2)).collect(),
        ParamRole::BnShift => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    };
    StoredTensor::f32(p.dims.clone(), data)
}

pub fn init_weights(g: &NetworkGraph, seed: u64) -> Result<WeightContainer> {
    let mut c = WeightContainer::new();
    for p in graph_params(g)? {
        c.insert(p.tensor.clone(), init_param(&p, seed))?;
    }
    Ok(c)
}

/// Container holding exactly the tensors `g` needs: existing float tensors
/// with matching dims are kept, everything else is freshly initialized.
pub fn reconcile_weights(g: &NetworkGraph, weights: &WeightContainer, seed: u64) -> Result<WeightContainer> {
    let mut c = WeightContainer::new();
    for p in graph_params(g)? {
        let t = match weights.get(&p.tensor) {
            Some(t) if t.dims == p.dims && t.as_f32().is_some() => t.clone(),
            _ => init_param(&p, seed),
        };
        c.insert(p.tensor.clone(), t)?;
    }
    Ok(c)
}

/// Fetches a float tensor and checks its dims.
pub fn fetch<'a>(weights: &'a WeightContainer, node: &str, tensor: &str, dims: &[usize]) -> Result<&'a [f32]> {
    let t = weights
        .get(tensor)
        .ok_or_else(|| Error::MissingWeight { node: node.to_string(), tensor: tensor.to_string() })?;
    if t.dims != dims {
        return Err(Error::WeightShape { tensor: tensor.to_string(), expected: dims.to_vec(), actual: t.dims.clone() });
    }
    t.as_f32().ok_or_else(|| Error::WeightType(tensor.to_string()))
}
