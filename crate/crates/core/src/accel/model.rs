//! Whole-network integer execution on the modeled datapath.

use std::collections::{BTreeMap, BTreeSet};

use super::engines::{conv, QConvLayer};
use super::lut::SigmoidLut;
use super::qops::{concat_q, elem_add_q, elem_mul_q, global_avg_pool_q, relu_q};
use crate::error::{Error, Result};
use crate::float_exec::{bilinear_resize, run_float};
use crate::graph::{ConvMode, LayerKind, NetworkGraph, Node};
use crate::io::{StoredTensor, TensorData, WeightContainer};
use crate::quant::{calibrate_max_abs, quantize, BitWidth, QTensor, QuantSpec, MAX_SCALE_EXP};
use crate::tensor::Tensor;
use crate::weights::{bias_name, fetch, weight_name};

/// Prefix of the empty container entries that carry activation formats.
pub const ACT_PREFIX: &str = "act:";

pub fn act_name(node: &str) -> String {
    format!("{ACT_PREFIX}{node}")
}

/// Which nodes run on the host processor and what the datapath returns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSplit {
    /// Resizes applied to a graph input before it is sent to the device.
    pub host_inputs: BTreeSet<String>,
    /// Resizes applied to device results before they become graph outputs.
    pub host_outputs: BTreeSet<String>,
    /// Device tensors handed back to the host, one per graph output.
    pub device_outputs: Vec<String>,
}

/// Rejects constructs the datapath lacks and splits host from device work.
pub fn check_datapath(g: &NetworkGraph) -> Result<DeviceSplit> {
    let unsupported = |n: &Node, detail: &str| Err(Error::Unsupported { node: n.name.clone(), detail: detail.into() });
    let mut host_inputs = BTreeSet::new();
    let mut host_outputs = BTreeSet::new();
    for n in g.nodes() {
        match &n.kind {
            LayerKind::BatchNorm => return unsupported(n, "BatchNorm must be folded before quantization"),
            LayerKind::Conv2D(a) => {
                if a.dilation != 1 {
                    return unsupported(n, "dilated convolution");
                }
                if a.kernel != 1 && a.kernel != 3 {
                    return unsupported(n, "kernel size other than 1 or 3");
                }
                if a.mode == ConvMode::Depthwise && a.kernel != 3 {
                    return unsupported(n, "depthwise kernel other than 3x3");
                }
            }
            LayerKind::BilinearResize { .. } => {
                if g.is_input(&n.inputs[0]) {
                    host_inputs.insert(n.name.clone());
                } else if g.outputs().contains(&n.name) && g.consumers(&n.name).is_empty() {
                    host_outputs.insert(n.name.clone());
                } else {
                    return unsupported(n, "resize inside the device graph");
                }
            }
            _ => {}
        }
    }
    let device_outputs = g
        .outputs()
        .iter()
        .map(|o| if host_outputs.contains(o) { g.node(o).expect("output node").inputs[0].clone() } else { o.clone() })
        .collect();
    Ok(DeviceSplit { host_inputs, host_outputs, device_outputs })
}

/// Integer outputs of every device node plus the quantized device inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTrace {
    pub values: BTreeMap<String, QTensor>,
}

impl QuantTrace {
    pub fn get(&self, name: &str) -> Option<&QTensor> {
        self.values.get(name)
    }
}

/// A transformed graph with integer weights and per-tensor formats.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    graph: NetworkGraph,
    bit_width: BitWidth,
    split: DeviceSplit,
    specs: BTreeMap<String, QuantSpec>,
    layers: BTreeMap<String, QConvLayer>,
    float_bias: BTreeMap<String, Vec<f32>>,
    /// Convs whose only consumer is a ReLU; the PW/DW output stage clamps.
    fused_relu: BTreeSet<String>,
    lut: SigmoidLut,
}

fn fused_relus(g: &NetworkGraph) -> BTreeSet<String> {
    let consumers = g.consumer_map();
    g.nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::Conv2D(_)) && !g.outputs().contains(&n.name))
        .filter(|n| {
            consumers
                .get(n.name.as_str())
                .is_some_and(|c| c.len() == 1 && matches!(g.node(c[0]).map(|x| &x.kind), Some(LayerKind::ReLU)))
        })
        .map(|n| n.name.clone())
        .collect()
}

fn spec_with_floor(max_abs: f32, bw: BitWidth, floor: i32, node: &str) -> Result<QuantSpec> {
    let mut spec = calibrate_max_abs(max_abs, bw);
    spec.scale_exp = spec.scale_exp.max(floor);
    if spec.scale_exp > MAX_SCALE_EXP {
        return Err(Error::InvalidConfig(format!(
            "`{node}` needs scale exponent {} beyond the format",
            spec.scale_exp
        )));
    }
    Ok(spec)
}

fn bias_to_acc(bias: &[f32], acc_exp: i32) -> Vec<i64> {
    bias.iter().map(|&b| (b as f64 * 2f64.powi(-acc_exp)).round() as i64).collect()
}

fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

impl QuantizedModel {
    /// Post-training calibration: runs the float graph on `samples`, sizes
    /// every activation format from the observed max |x|, and quantizes the
    /// weights per tensor.
    pub fn calibrate(
        g: &NetworkGraph,
        weights: &WeightContainer,
        samples: &[BTreeMap<String, Tensor>],
        bit_width: BitWidth,
    ) -> Result<Self> {
        let split = check_datapath(g)?;
        if samples.is_empty() {
            return Err(Error::InvalidOperand("calibration needs at least one sample".into()));
        }
        let mut peak: BTreeMap<String, f32> = BTreeMap::new();
        let mut track = |name: &str, t: &Tensor| {
            let m = peak.entry(name.to_string()).or_insert(0.0);
            *m = m.max(t.max_abs());
        };
        for s in samples {
            for (name, t) in s {
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite);
                }
                track(name, t);
            }
            for (name, t) in &run_float(g, weights, s)?.values {
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite);
                }
                track(name, t);
            }
        }
        let shapes = g.infer_shapes()?;
        let fused_relu = fused_relus(g);
        let mut specs = BTreeMap::new();
        let mut layers = BTreeMap::new();
        let mut float_bias = BTreeMap::new();
        let peak_of = |n: &str| peak.get(n).copied().unwrap_or(0.0);
        for gi in g.inputs() {
            specs.insert(gi.name.clone(), calibrate_max_abs(peak_of(&gi.name), bit_width));
        }
        for n in g.topo_order()? {
            if split.host_outputs.contains(&n.name) {
                continue;
            }
            let in_spec = |i: usize| -> QuantSpec { specs[&n.inputs[i]] };
            let spec = match &n.kind {
                LayerKind::BilinearResize { .. } => calibrate_max_abs(peak_of(&n.name), bit_width),
                LayerKind::Conv2D(a) => {
                    let cin = g.in_channels(&shapes, n);
                    let wf = fetch(weights, &n.name, &weight_name(&n.name), &a.weight_dims(cin))?;
                    let w_spec = calibrate_max_abs(max_abs(wf), bit_width);
                    let wq: Vec<i32> = wf.iter().map(|&v| w_spec.quantize_value(v)).collect();
                    let input = in_spec(0);
                    let acc_exp = input.scale_exp + w_spec.scale_exp;
                    let bias = if a.bias {
                        let b = fetch(weights, &n.name, &bias_name(&n.name), &[a.out_channels])?.to_vec();
                        let acc = bias_to_acc(&b, acc_exp);
                        float_bias.insert(n.name.clone(), b);
                        Some(acc)
                    } else {
                        None
                    };
                    layers.insert(
                        n.name.clone(),
                        QConvLayer { attrs: *a, in_channels: cin, in_spec: input, w_spec, weights: wq, bias },
                    );
                    let target = if fused_relu.contains(&n.name) {
                        peak_of(&g.consumers(&n.name)[0].name)
                    } else {
                        peak_of(&n.name)
                    };
                    spec_with_floor(target, bit_width, acc_exp, &n.name)?
                }
                LayerKind::ReLU => in_spec(0),
                LayerKind::Sigmoid => QuantSpec::probability(),
                LayerKind::GlobalAvgPool => calibrate_max_abs(peak_of(&n.name), bit_width),
                LayerKind::ElemAdd => spec_with_floor(
                    peak_of(&n.name),
                    bit_width,
                    in_spec(0).scale_exp.min(in_spec(1).scale_exp),
                    &n.name,
                )?,
                LayerKind::ElemMul => {
                    spec_with_floor(peak_of(&n.name), bit_width, in_spec(0).scale_exp + in_spec(1).scale_exp, &n.name)?
                }
                LayerKind::Concat => {
                    let coarse = (0..n.inputs.len()).map(|i| in_spec(i).scale_exp).max().expect("concat has inputs");
                    spec_with_floor(peak_of(&n.name), bit_width, coarse, &n.name)?
                }
                LayerKind::BatchNorm => unreachable!("rejected by check_datapath"),
            };
            specs.insert(n.name.clone(), spec);
        }
        Ok(Self { graph: g.clone(), bit_width, split, specs, layers, float_bias, fused_relu, lut: SigmoidLut::new() })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn bit_width(&self) -> BitWidth {
        self.bit_width
    }

    pub fn split(&self) -> &DeviceSplit {
        &self.split
    }

    pub fn spec(&self, name: &str) -> Option<QuantSpec> {
        self.specs.get(name).copied()
    }

    pub fn specs(&self) -> &BTreeMap<String, QuantSpec> {
        &self.specs
    }

    pub fn layer(&self, name: &str) -> Option<&QConvLayer> {
        self.layers.get(name)
    }

    /// Integer weights, float biases, and one empty `act:<name>` entry per
    /// stored activation format.
    pub fn to_container(&self) -> Result<WeightContainer> {
        let mut c = WeightContainer::new();
        let stored = |spec: QuantSpec, data: &[i32], dims: Vec<usize>| -> StoredTensor {
            let data = match self.bit_width {
                BitWidth::W8 => TensorData::I8(data.iter().map(|&v| v as i8).collect()),
                BitWidth::W16 => TensorData::I16(data.iter().map(|&v| v as i16).collect()),
            };
            StoredTensor { dims, scale_exp: spec.scale_exp as i8, data }
        };
        for n in self.graph.nodes() {
            if let Some(l) = self.layers.get(&n.name) {
                c.insert(weight_name(&n.name), stored(l.w_spec, &l.weights, l.attrs.weight_dims(l.in_channels)))?;
                if let Some(b) = self.float_bias.get(&n.name) {
                    c.insert(bias_name(&n.name), StoredTensor::f32(vec![b.len()], b.clone()))?;
                }
            }
        }
        let derived =
            |name: &str| self.graph.node(name).is_some_and(|n| matches!(n.kind, LayerKind::ReLU | LayerKind::Sigmoid));
        for (name, spec) in &self.specs {
            if !derived(name) {
                c.insert(act_name(name), stored(*spec, &[], vec![0]))?;
            }
        }
        Ok(c)
    }

    /// Rebuilds a model from [`to_container`](Self::to_container) output.
    pub fn from_container(g: &NetworkGraph, c: &WeightContainer) -> Result<Self> {
        let split = check_datapath(g)?;
        let shapes = g.infer_shapes()?;
        let bit_width = c
            .iter()
            .find_map(|(_, t)| match t.data {
                TensorData::I8(_) => Some(BitWidth::W8),
                TensorData::I16(_) => Some(BitWidth::W16),
                TensorData::F32(_) => None,
            })
            .ok_or_else(|| Error::InvalidConfig("container holds no integer tensors".into()))?;
        let act = |name: &str| -> Result<QuantSpec> {
            let t = c
                .get(&act_name(name))
                .ok_or_else(|| Error::MissingWeight { node: name.to_string(), tensor: act_name(name) })?;
            QuantSpec::new(bit_width, t.scale_exp as i32)
        };
        let mut specs = BTreeMap::new();
        for gi in g.inputs() {
            specs.insert(gi.name.clone(), act(&gi.name)?);
        }
        let mut layers = BTreeMap::new();
        let mut float_bias = BTreeMap::new();
        for n in g.topo_order()? {
            if split.host_outputs.contains(&n.name) {
                continue;
            }
            let spec = match &n.kind {
                LayerKind::ReLU => specs[&n.inputs[0]],
                LayerKind::Sigmoid => QuantSpec::probability(),
                _ => act(&n.name)?,
            };
            if let LayerKind::Conv2D(a) = &n.kind {
                let cin = g.in_channels(&shapes, n);
                let wn = weight_name(&n.name);
                let t = c.get(&wn).ok_or_else(|| Error::MissingWeight { node: n.name.clone(), tensor: wn.clone() })?;
                let dims = a.weight_dims(cin);
                if t.dims != dims {
                    return Err(Error::WeightShape { tensor: wn, expected: dims, actual: t.dims.clone() });
                }
                let weights = t.data.to_i32().ok_or_else(|| Error::WeightType(wn.clone()))?;
                let w_spec = QuantSpec::new(bit_width, t.scale_exp as i32)?;
                let in_spec = specs[&n.inputs[0]];
                let bias = if a.bias {
                    let b = fetch(c, &n.name, &bias_name(&n.name), &[a.out_channels])?.to_vec();
                    let acc = bias_to_acc(&b, in_spec.scale_exp + w_spec.scale_exp);
                    float_bias.insert(n.name.clone(), b);
                    Some(acc)
                } else {
                    None
                };
                layers
                    .insert(n.name.clone(), QConvLayer { attrs: *a, in_channels: cin, in_spec, w_spec, weights, bias });
            }
            specs.insert(n.name.clone(), spec);
        }
        Ok(Self {
            graph: g.clone(),
            bit_width,
            split,
            specs,
            layers,
            float_bias,
            fused_relu: fused_relus(g),
            lut: SigmoidLut::new(),
        })
    }

    /// Host resizes and quantizes the inputs, then every device node runs in
    /// topological order.
    pub fn run(&self, inputs: &BTreeMap<String, Tensor>) -> Result<QuantTrace> {
        let mut input_dims = BTreeMap::new();
        for gi in self.graph.inputs() {
            let t = inputs.get(&gi.name).ok_or_else(|| Error::MissingInput(gi.name.clone()))?;
            input_dims.insert(gi.name.clone(), t.dims());
        }
        self.graph.infer_shapes_with(&input_dims)?;
        let mut values: BTreeMap<String, QTensor> = BTreeMap::new();
        for gi in self.graph.inputs() {
            values.insert(gi.name.clone(), quantize(&inputs[&gi.name], self.specs[&gi.name]));
        }
        for n in self.graph.topo_order()? {
            if self.split.host_outputs.contains(&n.name) {
                continue;
            }
            let spec = self.specs[&n.name];
            let arg = |i: usize| -> &QTensor { &values[&n.inputs[i]] };
            let out = match &n.kind {
                LayerKind::BilinearResize { scale } => quantize(&bilinear_resize(&inputs[&n.inputs[0]], *scale)?, spec),
                LayerKind::Conv2D(_) => {
                    let layer = &self.layers[&n.name];
                    conv(arg(0), layer, spec, self.fused_relu.contains(&n.name))?
                }
                LayerKind::ReLU if self.fused_relu.contains(&n.inputs[0]) => arg(0).clone(),
                LayerKind::ReLU => relu_q(arg(0)),
                LayerKind::Sigmoid => self.lut.apply(arg(0)),
                LayerKind::GlobalAvgPool => global_avg_pool_q(arg(0), spec)?,
                LayerKind::ElemAdd => elem_add_q(arg(0), arg(1), spec)?,
                LayerKind::ElemMul => elem_mul_q(arg(0), arg(1), spec)?,
                LayerKind::Concat => {
                    let parts: Vec<&QTensor> = (0..n.inputs.len()).map(arg).collect();
                    concat_q(&parts, spec)?
                }
                LayerKind::BatchNorm => unreachable!("rejected by check_datapath"),
            };
            values.insert(n.name.clone(), out);
        }
        Ok(QuantTrace { values })
    }

    /// Device outputs of a run, in graph-output order.
    pub fn outputs<'a>(&'a self, trace: &'a QuantTrace) -> impl Iterator<Item = &'a QTensor> + 'a {
        self.split.device_outputs.iter().filter_map(|o| trace.get(o))
    }
}

/// Single-input convenience: returns the first device output (for the
/// reference network, the 1/8-resolution probability map).
pub fn run_quantized(model: &QuantizedModel, image: &Tensor) -> Result<QTensor> {
    let name = match model.graph().inputs() {
        [only] => only.name.clone(),
        _ => return Err(Error::InvalidOperand("graph must have exactly one input".into())),
    };
    let mut trace = model.run(&BTreeMap::from([(name, image.clone())]))?;
    let first =
        model.split.device_outputs.first().ok_or_else(|| Error::InvalidOperand("graph has no outputs".into()))?;
    trace.values.remove(first).ok_or_else(|| Error::InvalidOperand(format!("output `{first}` was not produced")))
}
