//! Batch-norm folding into the preceding convolution.

use std::collections::{BTreeMap, HashSet};

use super::{diff_report, PassReport};
use crate::error::Result;
use crate::graph::{LayerKind, NetworkGraph, Node};
use crate::io::{StoredTensor, WeightContainer};
use crate::weights::{bias_name, bn_scale_name, bn_shift_name, fetch, weight_name};

#[derive(Debug, Clone)]
pub struct FoldOutput {
    pub graph: NetworkGraph,
    pub weights: WeightContainer,
    pub report: PassReport,
}

/// Absorbs each BatchNorm into the convolution feeding it:
/// `W' = s * W` per output channel and `b' = s * b + t`.
///
/// A BatchNorm is folded only when its input is a conv that has no other
/// consumer and is not a graph output; anything else stays in place with a
/// warning. Consumers of a folded BN are rewired to the conv.
pub fn fold_batch_norm(g: &NetworkGraph, weights: &WeightContainer) -> Result<FoldOutput> {
    let shapes = g.infer_shapes()?;
    let consumers = g.consumer_map();
    let mut warnings = Vec::new();
    // bn name -> conv name
    let mut folds: BTreeMap<String, String> = BTreeMap::new();
    for n in g.nodes() {
        if !matches!(n.kind, LayerKind::BatchNorm) {
            continue;
        }
        let src = &n.inputs[0];
        let conv = g.node(src).filter(|p| matches!(p.kind, LayerKind::Conv2D(_)));
        let sole = consumers.get(src.as_str()).is_some_and(|c| c.len() == 1);
        match conv {
            Some(c) if sole && !g.outputs().contains(&c.name) => {
                folds.insert(n.name.clone(), c.name.clone());
            }
            Some(_) => warnings.push(format!("{}: preceding conv `{src}` has other consumers; left in place", n.name)),
            None => warnings.push(format!("{}: no directly preceding conv; left in place", n.name)),
        }
    }

    let mut w = weights.clone();
    let folded_convs: HashSet<&str> = folds.values().map(String::as_str).collect();
    let rewire = |s: &String| folds.get(s).cloned().unwrap_or_else(|| s.clone());
    let mut nodes = Vec::with_capacity(g.nodes().len());
    for n in g.nodes() {
        if folds.contains_key(&n.name) {
            continue;
        }
        let mut kind = n.kind;
        if let LayerKind::Conv2D(a) = &mut kind {
            if folded_convs.contains(n.name.as_str()) {
                let bn = folds.iter().find(|(_, c)| *c == &n.name).map(|(b, _)| b).expect("fold recorded");
                let cin = g.in_channels(&shapes, n);
                let wd = a.weight_dims(cin);
                let co = a.out_channels;
                let kw = fetch(weights, &n.name, &weight_name(&n.name), &wd)?;
                let s = fetch(weights, bn, &bn_scale_name(bn), &[co])?;
                let t = fetch(weights, bn, &bn_shift_name(bn), &[co])?;
                let b = if a.bias { Some(fetch(weights, &n.name, &bias_name(&n.name), &[co])?) } else { None };
                let per_out = kw.len() / co;
                let new_w: Vec<f32> =
                    kw.iter().enumerate().map(|(i, &v)| (s[i / per_out] as f64 * v as f64) as f32).collect();
                let new_b: Vec<f32> =
                    (0..co).map(|o| (s[o] as f64 * b.map_or(0.0, |b| b[o] as f64) + t[o] as f64) as f32).collect();
                w.set(weight_name(&n.name), StoredTensor::f32(wd, new_w));
                w.set(bias_name(&n.name), StoredTensor::f32(vec![co], new_b));
                w.remove(&bn_scale_name(bn));
                w.remove(&bn_shift_name(bn));
                a.bias = true;
            }
        }
        nodes.push(Node::new(n.name.clone(), kind, n.inputs.iter().map(rewire).collect()));
    }
    let outputs = g.outputs().iter().map(rewire).collect();
    let graph = NetworkGraph::new(g.inputs().to_vec(), nodes, outputs)?;
    let after_shapes = graph.infer_shapes()?;
    let origin = BTreeMap::new();
    let report = diff_report("bn-fold", g, &shapes, &graph, &after_shapes, &origin, warnings);
    Ok(FoldOutput { graph, weights: w, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::float_exec::run_float_single;
    use crate::graph::{ConvAttrs, GraphBuilder};
    use crate::tensor::{Dims, Tensor};
    use crate::weights::init_weights;

    fn conv_bn(attrs: ConvAttrs, dims: Dims) -> NetworkGraph {
        let mut b = GraphBuilder::new();
        b.input("x", dims);
        b.conv("c", "x", attrs);
        b.node("bn", LayerKind::BatchNorm, &["c"]);
        b.finish(&["bn"]).unwrap()
    }

    #[test]
    fn scalar_example() {
        let g = conv_bn(ConvAttrs::pointwise(1).with_bias(true), Dims::new(1, 1, 1));
        let mut w = WeightContainer::new();
        w.insert("c.weight", StoredTensor::f32(vec![1, 1, 1, 1], vec![2.0])).unwrap();
        w.insert("c.bias", StoredTensor::f32(vec![1], vec![1.0])).unwrap();
        w.insert("bn.scale", StoredTensor::f32(vec![1], vec![0.5])).unwrap();
        w.insert("bn.shift", StoredTensor::f32(vec![1], vec![0.25])).unwrap();
        let out = fold_batch_norm(&g, &w).unwrap();
        assert_eq!(out.weights.get("c.weight").unwrap().as_f32().unwrap(), &[1.0]);
        assert_eq!(out.weights.get("c.bias").unwrap().as_f32().unwrap(), &[0.75]);
        assert_eq!(out.graph.outputs(), &["c".to_string()]);
        assert!(out.weights.get("bn.scale").is_none());
        assert_eq!(out.report.rows.iter().find(|r| r.layer == "bn").unwrap().params_after, 0);
    }

    #[test]
    fn identity_bn_leaves_output_unchanged() {
        let dims = Dims::new(8, 8, 4);
        let g = conv_bn(ConvAttrs::standard(3, 1, 4), dims);
        let mut w = init_weights(&g, 2).unwrap();
        w.set("bn.scale", StoredTensor::f32(vec![4], vec![1.0; 4]));
        w.set("bn.shift", StoredTensor::f32(vec![4], vec![0.0; 4]));
        let out = fold_batch_norm(&g, &w).unwrap();
        assert!(out.graph.nodes().iter().all(|n| !matches!(n.kind, LayerKind::BatchNorm)));
        let x = Tensor::from_fn(dims, |y, xx, c| ((y * 7 + xx * 3 + c) % 5) as f32 - 2.0);
        let a = run_float_single(&g, &w, x.clone()).unwrap();
        let b = run_float_single(&out.graph, &out.weights, x).unwrap();
        assert_eq!(a.get("bn").unwrap(), b.get("c").unwrap());
    }

    #[test]
    fn shared_conv_is_not_folded() {
        let mut b = GraphBuilder::new();
        b.input("x", Dims::new(4, 4, 2));
        b.conv("c", "x", ConvAttrs::pointwise(2));
        b.node("bn", LayerKind::BatchNorm, &["c"]);
        b.node("r", LayerKind::ReLU, &["c"]);
        b.node("bn2", LayerKind::BatchNorm, &["x"]);
        let g = b.finish(&["bn", "r", "bn2"]).unwrap();
        let w = init_weights(&g, 0).unwrap();
        let out = fold_batch_norm(&g, &w).unwrap();
        assert_eq!(out.graph, g);
        assert_eq!(out.report.warnings.len(), 2);
        assert!(out.weights.bit_eq(&w));
    }

    #[test]
    fn consumers_are_rewired() {
        let mut b = GraphBuilder::new();
        b.input("x", Dims::new(6, 6, 3));
        b.conv_bn_relu("a", "x", ConvAttrs::standard(3, 2, 8));
        b.conv_bn_relu("b", "a_relu", ConvAttrs::depthwise(3, 1, 8));
        let g = b.finish(&["b_relu"]).unwrap();
        let w = init_weights(&g, 9).unwrap();
        let out = fold_batch_norm(&g, &w).unwrap();
        assert_eq!(out.graph.node("a_relu").unwrap().inputs, vec!["a".to_string()]);
        assert!(out.graph.node("b").unwrap().kind.conv().unwrap().bias);
        assert_eq!(out.report.params_before() - out.report.params_after(), 16);
    }
}
