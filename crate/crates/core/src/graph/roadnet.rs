//! Reference two-branch road-segmentation network.

use serde::{Deserialize, Serialize};

use super::{ConvAttrs, GraphBuilder, LayerKind, NetworkGraph, ResizeScale};
use crate::error::{Error, Result};
use crate::tensor::Dims;

pub const LANE_WIDTH: usize = 32;

/// Channel widths and geometry of the reference network. Hidden widths must be
/// multiples of 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Stem kernel of the context branch (7 mirrors the ResNet18 stem).
    pub stem_kernel: usize,
    pub stem_channels: usize,
    /// Output widths of the two residual modules; the first one has stride 2.
    pub residual_channels: [usize; 2],
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub spatial_channels: [usize; 4],
    pub spatial_strides: [usize; 4],
    pub fusion_channels: usize,
}

impl Default for RoadNetConfig {
    fn default() -> Self {
        Self {
            input_height: 280,
            input_width: 960,
            input_channels: 3,
            stem_kernel: 7,
            stem_channels: 32,
            residual_channels: [64, 128],
            aspp_rates: vec![2, 4, 8, 16],
            aspp_channels: 32,
            spatial_channels: [32, 32, 64, 64],
            spatial_strides: [2, 2, 2, 1],
            fusion_channels: 32,
        }
    }
}

impl RoadNetConfig {
    pub fn input_dims(&self) -> Dims {
        Dims::new(self.input_height, self.input_width, self.input_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let mut hidden = vec![
            ("stem_channels", self.stem_channels),
            ("aspp_channels", self.aspp_channels),
            ("fusion_channels", self.fusion_channels),
        ];
        hidden.extend(self.residual_channels.iter().map(|&c| ("residual_channels", c)));
        hidden.extend(self.spatial_channels.iter().map(|&c| ("spatial_channels", c)));
        for (field, c) in hidden {
            if c == 0 || c % LANE_WIDTH != 0 {
                return Err(Error::InvalidConfig(format!("{field} = {c} is not a positive multiple of {LANE_WIDTH}")));
            }
        }
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidConfig("input dims must be positive".into()));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("stem_kernel must be odd".into()));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::InvalidConfig("aspp_rates must be non-empty and positive".into()));
        }
        if self.spatial_strides.contains(&0) {
            return Err(Error::InvalidConfig("spatial strides must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the reference graph.
///
/// Context branch: half-size resize, stem conv, two post-activation residual
/// modules, ASPP, and the global attention gate. Spatial branch: four 3x3
/// convs. The branches meet in the fusion module at 1/8 resolution; a 1x1
/// head, sigmoid, and x8 bilinear resize produce the probability map.
pub fn build_roadnet_rt(cfg: &RoadNetConfig) -> Result<NetworkGraph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let image = b.input("image", cfg.input_dims());

    // Context branch
    let down = b.node("ctx_down", LayerKind::BilinearResize { scale: ResizeScale::Half }, &[&image]);
    let mut x = b.conv_bn_relu("ctx_stem", &down, ConvAttrs::standard(cfg.stem_kernel, 2, cfg.stem_channels));
    let mut channels = cfg.stem_channels;
    for (i, &out) in cfg.residual_channels.iter().enumerate() {
        let stride = if i == 0 { 2 } else { 1 };
        x = residual_module(&mut b, &format!("res{}", i + 1), &x, channels, out, stride);
        channels = out;
    }
    let mut branches = Vec::new();
    for &rate in &cfg.aspp_rates {
        let attrs = ConvAttrs::standard(3, 1, cfg.aspp_channels).with_dilation(rate);
        branches.push(b.conv_bn_relu(&format!("aspp_r{rate}"), &x, attrs));
    }
    let refs: Vec<&str> = branches.iter().map(String::as_str).collect();
    let aspp = b.node("aspp_cat", LayerKind::Concat, &refs);
    let aspp_channels = cfg.aspp_channels * cfg.aspp_rates.len();
    let pool = b.node("gam_pool", LayerKind::GlobalAvgPool, &[&aspp]);
    let gate = b.conv("gam_conv", &pool, ConvAttrs::pointwise(aspp_channels).with_bias(true));
    let gate = b.node("gam_sigmoid", LayerKind::Sigmoid, &[&gate]);
    let context = b.node("gam_mul", LayerKind::ElemMul, &[&aspp, &gate]);

    // Spatial branch
    let mut s = image.clone();
    for (i, (&c, &stride)) in cfg.spatial_channels.iter().zip(&cfg.spatial_strides).enumerate() {
        s = b.conv_bn_relu(&format!("sp{}", i + 1), &s, ConvAttrs::standard(3, stride, c));
    }

    // Feature fusion
    let cat = b.node("ffm_cat", LayerKind::Concat, &[&context, &s]);
    let fused = b.conv_bn_relu("ffm_conv", &cat, ConvAttrs::standard(3, 1, cfg.fusion_channels));
    let pool = b.node("ffm_pool", LayerKind::GlobalAvgPool, &[&fused]);
    let att = b.conv("ffm_att1", &pool, ConvAttrs::pointwise(cfg.fusion_channels).with_bias(true));
    let att = b.node("ffm_att1_relu", LayerKind::ReLU, &[&att]);
    let att = b.conv("ffm_att2", &att, ConvAttrs::pointwise(cfg.fusion_channels).with_bias(true));
    let att = b.node("ffm_sigmoid", LayerKind::Sigmoid, &[&att]);
    let gated = b.node("ffm_mul", LayerKind::ElemMul, &[&fused, &att]);
    let fused = b.node("ffm_add", LayerKind::ElemAdd, &[&fused, &gated]);

    // Head
    let head = b.conv("head", &fused, ConvAttrs::pointwise(1).with_bias(true));
    let prob = b.node("head_sigmoid", LayerKind::Sigmoid, &[&head]);
    let up = b.node("head_up", LayerKind::BilinearResize { scale: ResizeScale::Eight }, &[&prob]);

    let g = b.finish(&[&up])?;
    g.validate()?;
    Ok(g)
}

/// Post-activation basic block: conv-bn-relu, conv-bn, shortcut add, relu.
fn residual_module(
    b: &mut GraphBuilder,
    name: &str,
    input: &str,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> String {
    let a = b.conv_bn_relu(&format!("{name}_a"), input, ConvAttrs::standard(3, stride, out_channels));
    let conv_b = b.conv(&format!("{name}_b"), &a, ConvAttrs::standard(3, 1, out_channels));
    let main = b.node(&format!("{name}_b_bn"), LayerKind::BatchNorm, &[&conv_b]);
    let shortcut = if stride == 1 && in_channels == out_channels {
        input.to_string()
    } else {
        let p = b.conv(&format!("{name}_proj"), input, ConvAttrs::pointwise(out_channels).with_stride(stride));
        b.node(&format!("{name}_proj_bn"), LayerKind::BatchNorm, &[&p])
    };
    let sum = b.node(&format!("{name}_add"), LayerKind::ElemAdd, &[&main, &shortcut]);
    b.node(&format!("{name}_relu"), LayerKind::ReLU, &[&sum])
}
