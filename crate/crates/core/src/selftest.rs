//! Seeded equivalence checks runnable from the command line: datapath vs a
//! direct integer convolution, batch-norm folding, the sigmoid table, and
//! format round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::accel::{self, QConvLayer, SigmoidLut};
use crate::error::{Error, Result};
use crate::float_exec::run_float;
use crate::graph::{same_out, same_pad_before, ConvAttrs, ConvMode, GraphBuilder, LayerKind};
use crate::io::{StoredTensor, TensorData, WeightContainer};
use crate::metrics::{confusion, derive};
use crate::quant::{check_accumulator, round_shift, BitWidth, QTensor, QuantSpec};
use crate::tensor::{Dims, Tensor};
use crate::transforms::fold_batch_norm;
use crate::weights::init_weights;

/// Convolution as a plain loop nest over integers, independent of the line
/// buffer and engine code.
pub fn direct_conv_q(x: &QTensor, l: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<QTensor> {
    let a = &l.attrs;
    let d = x.dims();
    let k = a.kernel;
    let ext = a.effective_kernel();
    let (oh, ow) = (same_out(d.height, a.stride), same_out(d.width, a.stride));
    let (pt, pl) = (same_pad_before(d.height, a.stride, ext), same_pad_before(d.width, a.stride, ext));
    let shift = out_spec.scale_exp - l.in_spec.scale_exp - l.w_spec.scale_exp;
    let shift = u32::try_from(shift).map_err(|_| Error::NegativeShift(shift))?;
    let cin = d.channels;
    let mut out = Vec::with_capacity(oh * ow * a.out_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..a.out_channels {
                let mut acc: i64 = l.bias.as_ref().map_or(0, |b| b[o]);
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * a.stride + ky * a.dilation) as isize - pt as isize;
                        let ix = (ox * a.stride + kx * a.dilation) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                            continue;
                        }
                        let (iy, ix) = (iy as usize, ix as usize);
                        match a.mode {
                            ConvMode::Depthwise => {
                                acc += x.get(iy, ix, o) as i64 * l.weights[(o * k + ky) * k + kx] as i64;
                            }
                            _ => {
                                for c in 0..cin {
                                    let w = l.weights[((o * k + ky) * k + kx) * cin + c];
                                    acc += x.get(iy, ix, c) as i64 * w as i64;
                                }
                            }
                        }
                    }
                }
                check_accumulator(acc, l.in_spec.bit_width)?;
                let q = out_spec.saturate(round_shift(acc, shift));
                out.push(if relu { q.max(0) } else { q });
            }
        }
    }
    QTensor::new(Dims::new(oh, ow, a.out_channels), out_spec, out)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerLimits {
    pub max_height: usize,
    pub max_width: usize,
    pub max_channels: usize,
}

/// A random depthwise, pointwise, or stem layer with an input and an output
/// format that keeps the accumulator in range.
pub fn random_layer_case(rng: &mut impl Rng, limits: LayerLimits) -> (QTensor, QConvLayer, QuantSpec, bool) {
    let bw = if rng.gen_bool(0.75) { BitWidth::W8 } else { BitWidth::W16 };
    let h = rng.gen_range(1..=limits.max_height);
    let w = rng.gen_range(1..=limits.max_width);
    let mut cin = rng.gen_range(1..=limits.max_channels);
    let cout = rng.gen_range(1..=limits.max_channels);
    let stride = rng.gen_range(1..=2);
    let attrs = match rng.gen_range(0..4) {
        0 => ConvAttrs::depthwise(3, stride, cin),
        1 => ConvAttrs::pointwise(cout),
        2 => ConvAttrs::pointwise(cout).with_stride(stride),
        _ => {
            cin = 3;
            ConvAttrs::standard(3, 2, cout)
        }
    }
    .with_bias(rng.gen_bool(0.5));
    let spec = |e| QuantSpec::new(bw, e).expect("exponent in range");
    let in_spec = spec(rng.gen_range(-8..0));
    let w_spec = spec(rng.gen_range(-10..-4));
    let weights = (0..attrs.weight_count(cin)).map(|_| rng.gen_range(w_spec.qmin()..=w_spec.qmax())).collect();
    let bias = attrs.bias.then(|| (0..attrs.out_channels).map(|_| rng.gen_range(-5000..5000)).collect());
    let x_data = (0..h * w * cin).map(|_| rng.gen_range(in_spec.qmin()..=in_spec.qmax())).collect();
    let x = QTensor::new(Dims::new(h, w, cin), in_spec, x_data).expect("generated in range");
    let out = spec(in_spec.scale_exp + w_spec.scale_exp + rng.gen_range(0..8));
    let relu = rng.gen_bool(0.5);
    (x, QConvLayer { attrs, in_channels: cin, in_spec, w_spec, weights, bias }, out, relu)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                format!("{status}  {:<14} {:>5} cases  {}\n", c.name, c.cases, c.detail)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfTestConfig {
    pub seed: u64,
    pub layer_cases: usize,
    pub fold_cases: usize,
    pub format_cases: usize,
}

impl Default for SelfTestConfig {
    fn default() -> Self {
        Self { seed: 0, layer_cases: 200, fold_cases: 30, format_cases: 200 }
    }
}

fn check_layers(cfg: &SelfTestConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let limits = LayerLimits { max_height: 20, max_width: 40, max_channels: 64 };
    let mut failures = 0;
    let mut first = String::new();
    for i in 0..cfg.layer_cases {
        let (x, l, out, relu) = random_layer_case(&mut rng, limits);
        let ok = match (accel::conv(&x, &l, out, relu), direct_conv_q(&x, &l, out, relu)) {
            (Ok(a), Ok(b)) => a == b,
            (Err(_), Err(_)) => true,
            _ => false,
        };
        if !ok {
            failures += 1;
            if first.is_empty() {
                first = format!("first mismatch at case {i} ({:?} {})", l.attrs.mode, x.dims());
            }
        }
    }
    Check { name: "engines".into(), cases: cfg.layer_cases, failures, detail: first }
}

/// Largest relative deviation of folded vs unfolded outputs, with a unit floor
/// on the denominator.
pub fn fold_case_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = rng.gen_range(1..12);
    let cout = rng.gen_range(1..12);
    let dims = Dims::new(rng.gen_range(1..10), rng.gen_range(1..10), cin);
    let attrs = match rng.gen_range(0..3) {
        0 => ConvAttrs::standard(3, rng.gen_range(1..3), cout),
        1 => ConvAttrs::pointwise(cout),
        _ => ConvAttrs::depthwise(3, 1, cin),
    }
    .with_bias(rng.gen_bool(0.5));
    let mut b = GraphBuilder::new();
    b.input("x", dims);
    b.conv("c", "x", attrs);
    b.node("c_bn", LayerKind::BatchNorm, &["c"]);
    b.node("y", LayerKind::ReLU, &["c_bn"]);
    let g = b.finish(&["y"])?;
    let w = init_weights(&g, rng.gen())?;
    let folded = fold_batch_norm(&g, &w)?;
    let x = Tensor::from_fn(dims, |_, _, _| rng.gen_range(-1.0..1.0));
    let inputs = BTreeMap::from([("x".to_string(), x)]);
    let a = run_float(&g, &w, &inputs)?;
    let b = run_float(&folded.graph, &folded.weights, &inputs)?;
    let (ya, yb) = (a.get("y").expect("output"), b.get("y").expect("output"));
    Ok(ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(p, q)| (*p as f64 - *q as f64).abs() / (p.abs() as f64).max(1.0))
        .fold(0.0, f64::max))
}

fn check_fold(cfg: &SelfTestConfig) -> Check {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..cfg.fold_cases {
        match fold_case_error(cfg.seed.wrapping_add(i as u64)) {
            Ok(e) if e <= 1e-5 => worst = worst.max(e),
            Ok(e) => {
                worst = worst.max(e);
                failures += 1;
            }
            Err(_) => failures += 1,
        }
    }
    Check { name: "bn-fold".into(), cases: cfg.fold_cases, failures, detail: format!("max rel err {worst:.2e}") }
}

fn check_lut() -> Check {
    let lut = SigmoidLut::new();
    let err = lut.max_center_error();
    let monotone = lut.table().windows(2).all(|w| w[0] <= w[1]);
    let failures = usize::from(err > 1.0 / 64.0) + usize::from(!monotone);
    Check { name: "sigmoid-lut".into(), cases: 256, failures, detail: format!("max err {err:.5}, monotone {monotone}") }
}

fn check_formats(cfg: &SelfTestConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut failures = 0;
    for _ in 0..cfg.format_cases {
        let mut c = WeightContainer::new();
        for t in 0..rng.gen_range(0..6) {
            let dims: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..5)).collect();
            let n: usize = dims.iter().product();
            let stored = match rng.gen_range(0..3) {
                0 => StoredTensor::f32(dims, (0..n).map(|_| rng.gen::<f32>()).collect()),
                1 => StoredTensor {
                    dims,
                    scale_exp: rng.gen_range(-24..=8),
                    data: TensorData::I8((0..n).map(|_| rng.gen()).collect()),
                },
                _ => StoredTensor {
                    dims,
                    scale_exp: rng.gen_range(-24..=8),
                    data: TensorData::I16((0..n).map(|_| rng.gen()).collect()),
                },
            };
            c.insert(format!("t{t}"), stored).expect("unique names");
        }
        let ok = c
            .to_bytes()
            .ok()
            .and_then(|bytes| WeightContainer::from_bytes(&bytes).ok())
            .is_some_and(|back| back.bit_eq(&c));
        failures += usize::from(!ok);
    }
    Check { name: "container".into(), cases: cfg.format_cases, failures, detail: String::new() }
}

fn check_metrics() -> Check {
    let m = confusion(&[true, true, false, false], &[true, false, false, false]).map(|c| derive(&c));
    let ok = m.is_ok_and(|m| {
        m.precision == 0.5 && m.recall == 1.0 && m.f1 == 2.0 / 3.0 && m.fpr == 1.0 / 3.0 && m.iou == 0.5
    });
    Check { name: "metrics".into(), cases: 1, failures: usize::from(!ok), detail: String::new() }
}

pub fn run_selftest(cfg: &SelfTestConfig) -> SelfTestReport {
    SelfTestReport {
        checks: vec![check_layers(cfg), check_fold(cfg), check_lut(), check_formats(cfg), check_metrics()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let cfg = SelfTestConfig { seed: 3, layer_cases: 40, fold_cases: 10, format_cases: 20 };
        let r = run_selftest(&cfg);
        assert!(r.passed(), "{}", r.render_text());
        assert_eq!(r.checks.len(), 5);
    }

    #[test]
    fn direct_oracle_hand_case() {
        // 1×3 input, 1 channel, all-ones 3×3 depthwise at stride 1.
        let s = QuantSpec::new(BitWidth::W8, 0).unwrap();
        let x = QTensor::new(Dims::new(1, 3, 1), s, vec![1, 2, 3]).unwrap();
        let l = QConvLayer {
            attrs: ConvAttrs::depthwise(3, 1, 1),
            in_channels: 1,
            in_spec: s,
            w_spec: s,
            weights: vec![1; 9],
            bias: None,
        };
        assert_eq!(direct_conv_q(&x, &l, s, false).unwrap().data(), &[3, 6, 5]);
    }
}
