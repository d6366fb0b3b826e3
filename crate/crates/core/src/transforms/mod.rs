//! Hardware-oriented graph passes: batch-norm folding, kernel decomposition,
//! depthwise-separable substitution, and a channel-alignment audit.

mod counters;
mod fold;
mod structural;

pub use counters::{
    conv_weight_params, count, count_macs, count_params, count_with_shapes, separable_ratio, CountReport, LayerCount,
};
pub use fold::{fold_batch_norm, FoldOutput};
pub use structural::{
    chain_receptive_field, decompose_large_kernel, receptive_field, replace_dilated, to_depthwise_separable,
};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::Result;
use crate::graph::{LayerKind, NetworkGraph, ShapeMap};
use crate::io::WeightContainer;
use crate::weights::{graph_params, reconcile_weights};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: String,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: String,
    pub rows: Vec<LayerDelta>,
    pub warnings: Vec<String>,
}

impl PassReport {
    pub fn new(pass: impl Into<String>) -> Self {
        Self { pass: pass.into(), rows: Vec::new(), warnings: Vec::new() }
    }

    pub fn params_before(&self) -> u64 {
        self.rows.iter().map(|r| r.params_before).sum()
    }

    pub fn params_after(&self) -> u64 {
        self.rows.iter().map(|r| r.params_after).sum()
    }

    pub fn macs_before(&self) -> u64 {
        self.rows.iter().map(|r| r.macs_before).sum()
    }

    pub fn macs_after(&self) -> u64 {
        self.rows.iter().map(|r| r.macs_after).sum()
    }

    /// Rows whose counts differ.
    pub fn changed(&self) -> impl Iterator<Item = &LayerDelta> {
        self.rows.iter().filter(|r| r.params_before != r.params_after || r.macs_before != r.macs_after)
    }

    /// Aligned plain-text table of changed rows plus totals and warnings.
    pub fn render_text(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![[
            "layer".into(),
            "params_before".into(),
            "params_after".into(),
            "macs_before".into(),
            "macs_after".into(),
        ]];
        for r in self.changed() {
            rows.push([
                r.layer.clone(),
                r.params_before.to_string(),
                r.params_after.to_string(),
                r.macs_before.to_string(),
                r.macs_after.to_string(),
            ]);
        }
        rows.push([
            "TOTAL".into(),
            self.params_before().to_string(),
            self.params_after().to_string(),
            self.macs_before().to_string(),
            self.macs_after().to_string(),
        ]);
        let mut width = [0usize; 5];
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = format!("pass: {}\n", self.pass);
        for r in &rows {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                r[0],
                r[1],
                r[2],
                r[3],
                r[4],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2],
                w3 = width[3],
                w4 = width[4]
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Result of a structural pass.
#[derive(Debug, Clone)]
pub struct PassOutput {
    pub graph: NetworkGraph,
    pub report: PassReport,
    /// Nodes of the new graph whose parameters no longer correspond to the
    /// old ones and must be re-initialized.
    pub touched: BTreeSet<String>,
}

/// Per-layer before/after counts. Nodes of `after` are attributed to
/// `origin[name]` when present, otherwise to themselves.
pub(crate) fn diff_report(
    pass: &str,
    before: &NetworkGraph,
    before_shapes: &ShapeMap,
    after: &NetworkGraph,
    after_shapes: &ShapeMap,
    origin: &BTreeMap<String, String>,
    warnings: Vec<String>,
) -> PassReport {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, LayerDelta> = BTreeMap::new();
    let mut slot = |layer: &str, order: &mut Vec<String>| -> String {
        if !acc.contains_key(layer) {
            order.push(layer.to_string());
            acc.insert(
                layer.to_string(),
                LayerDelta {
                    layer: layer.to_string(),
                    params_before: 0,
                    params_after: 0,
                    macs_before: 0,
                    macs_after: 0,
                },
            );
        }
        layer.to_string()
    };
    let mut b_counts = Vec::new();
    for n in before.nodes() {
        let c = counters::node_count(n, before_shapes);
        if c.params > 0 || c.macs > 0 {
            let k = slot(&n.name, &mut order);
            b_counts.push((k, c));
        }
    }
    let mut a_counts = Vec::new();
    for n in after.nodes() {
        let c = counters::node_count(n, after_shapes);
        if c.params > 0 || c.macs > 0 {
            let key = origin.get(&n.name).map_or(n.name.as_str(), String::as_str);
            let k = slot(key, &mut order);
            a_counts.push((k, c));
        }
    }
    for (k, c) in b_counts {
        let d = acc.get_mut(&k).expect("slot created");
        d.params_before += c.params;
        d.macs_before += c.macs;
    }
    for (k, c) in a_counts {
        let d = acc.get_mut(&k).expect("slot created");
        d.params_after += c.params;
        d.macs_after += c.macs;
    }
    let rows = order.into_iter().map(|k| acc.remove(&k).expect("slot created")).collect();
    PassReport { pass: pass.to_string(), rows, warnings }
}

/// Warns on every conv whose in- or out-channels are not a multiple of
/// `lane_width`. Channels that come straight from a graph input, or feed a
/// graph output through channel-preserving layers only, are exempt.
pub fn check_channel_alignment(g: &NetworkGraph, lane_width: usize) -> Result<PassReport> {
    let shapes = g.infer_shapes()?;
    let mut report = PassReport::new("channel-alignment");
    if lane_width <= 1 {
        return Ok(report);
    }
    let consumers = g.consumer_map();
    let outputs: BTreeSet<&str> = g.outputs().iter().map(String::as_str).collect();
    let passthrough = |k: &LayerKind| {
        matches!(k, LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::Sigmoid | LayerKind::BilinearResize { .. })
    };
    let from_input = |name: &str| {
        let mut cur = name.to_string();
        loop {
            if g.is_input(&cur) {
                return true;
            }
            match g.node(&cur) {
                Some(n) if passthrough(&n.kind) => cur = n.inputs[0].clone(),
                _ => return false,
            }
        }
    };
    let to_output = |name: &str| {
        let mut stack = vec![name];
        let mut reached = false;
        while let Some(cur) = stack.pop() {
            if outputs.contains(cur) {
                reached = true;
            }
            for &c in consumers.get(cur).map(Vec::as_slice).unwrap_or(&[]) {
                match g.node(c) {
                    Some(n) if passthrough(&n.kind) => stack.push(c),
                    _ => return false,
                }
            }
        }
        reached
    };
    for n in g.nodes() {
        let LayerKind::Conv2D(a) = &n.kind else { continue };
        let cin = g.in_channels(&shapes, n);
        if !cin.is_multiple_of(lane_width) && !from_input(&n.inputs[0]) {
            report.warnings.push(format!("{}: {cin} input channels not a multiple of {lane_width}", n.name));
        }
        if a.out_channels % lane_width != 0 && !to_output(&n.name) {
            report
                .warnings
                .push(format!("{}: {} output channels not a multiple of {lane_width}", n.name, a.out_channels));
        }
    }
    Ok(report)
}

/// Result of the full pass pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub graph: NetworkGraph,
    pub weights: WeightContainer,
    pub reports: Vec<PassReport>,
}

fn drop_touched(g: &NetworkGraph, weights: &WeightContainer, touched: &BTreeSet<String>) -> Result<WeightContainer> {
    let mut w = weights.clone();
    for p in graph_params(g)? {
        if touched.contains(&p.node) {
            w.remove(&p.tensor);
        }
    }
    Ok(w)
}

/// Runs large-kernel decomposition, dilated replacement, depthwise-separable
/// substitution, then batch-norm folding. Parameters of rewritten layers are
/// re-initialized from `seed`.
pub fn run_pipeline(g: &NetworkGraph, weights: &WeightContainer, seed: u64) -> Result<PipelineOutput> {
    let passes: [fn(&NetworkGraph) -> Result<PassOutput>; 3] =
        [decompose_large_kernel, replace_dilated, to_depthwise_separable];
    let mut graph = g.clone();
    let mut w = reconcile_weights(&graph, weights, seed)?;
    let mut reports = Vec::new();
    for pass in passes {
        let out = pass(&graph)?;
        w = reconcile_weights(&out.graph, &drop_touched(&out.graph, &w, &out.touched)?, seed)?;
        graph = out.graph;
        reports.push(out.report);
    }
    let folded = fold_batch_norm(&graph, &w)?;
    reports.push(folded.report);
    Ok(PipelineOutput { graph: folded.graph, weights: folded.weights, reports })
}

/// Whole-network parameter totals of `g` as built and with every eligible
/// 3×3 conv made depthwise separable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeparableComparison {
    pub standard_params: u64,
    pub separable_params: u64,
}

impl SeparableComparison {
    pub fn factor(&self) -> f64 {
        self.standard_params as f64 / self.separable_params as f64
    }
}

pub fn separable_comparison(g: &NetworkGraph) -> Result<SeparableComparison> {
    let separable = to_depthwise_separable(g)?.graph;
    Ok(SeparableComparison { standard_params: count_params(g)?, separable_params: count_params(&separable)? })
}
