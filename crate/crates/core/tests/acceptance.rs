//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! the process exits nonzero if any fails.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use roadnet_core::accel::{conv, run_quantized, QConvLayer, QuantizedModel, SigmoidLut};
use roadnet_core::float_exec::run_float;
use roadnet_core::graph::{
    build_roadnet_rt, ConvAttrs, ConvMode, GraphBuilder, LayerKind, NetworkGraph, RoadNetConfig,
};
use roadnet_core::io::{parse_pnm, ImageBuffer, StoredTensor, TensorData, WeightContainer};
use roadnet_core::metrics::{derive, maxf, sweep, ConfusionCounts, THRESHOLDS};
use roadnet_core::perf::{buffer_words, estimate, weight_bram_blocks, HardwareConfig};
use roadnet_core::quant::{dequantize, BitWidth, QTensor, QuantSpec};
use roadnet_core::selftest::{fold_case_error, random_layer_case, LayerLimits};
use roadnet_core::transforms::{
    conv_weight_params, decompose_large_kernel, replace_dilated, run_pipeline, separable_comparison, separable_ratio,
};
use roadnet_core::weights::{graph_params, init_weights, ParamRole};
use roadnet_core::{Dims, Tensor};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// 1. datapath vs dequantized float convolution

/// `round(x)` half away from zero, matching `f64::round`.
fn saturate(v: f64, spec: QuantSpec) -> i32 {
    v.round().clamp(spec.qmin() as f64, spec.qmax() as f64) as i32
}

/// Reference result of a quantized conv layer, computed in real-valued
/// arithmetic on dequantized operands. Powers of two keep every product and
/// partial sum exact in f64 for the ranges generated here. `None` when the
/// accumulator leaves the hardware width.
fn oracle_conv(x: &QTensor, l: &QConvLayer, out: QuantSpec, relu: bool) -> Option<Vec<i32>> {
    let a = &l.attrs;
    let d = x.dims();
    let (k, s) = (a.kernel, a.stride);
    let (oh, ow) = (d.height.div_ceil(s), d.width.div_ceil(s));
    let pad = |n: usize, o: usize| (((o - 1) * s + k).saturating_sub(n) / 2) as isize;
    let (pt, pl) = (pad(d.height, oh), pad(d.width, ow));
    let xs = l.in_spec.step();
    let ws = l.w_spec.step();
    let acc_step = xs * ws;
    let limit = 2f64.powi(l.accumulator_width().accumulator_bits() as i32 - 1);
    let mut y = Vec::with_capacity(oh * ow * a.out_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..a.out_channels {
                let mut sum = l.bias.as_ref().map_or(0.0, |b| b[o] as f64 * acc_step);
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - pt;
                        let ix = (ox * s + kx) as isize - pl;
                        if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                            continue;
                        }
                        let (iy, ix) = (iy as usize, ix as usize);
                        let chans: Vec<(usize, usize)> = match a.mode {
                            ConvMode::Depthwise => vec![(o, (o * k + ky) * k + kx)],
                            _ => (0..d.channels).map(|c| (c, ((o * k + ky) * k + kx) * d.channels + c)).collect(),
                        };
                        for (c, wi) in chans {
                            sum += x.get(iy, ix, c) as f64 * xs * (l.weights[wi] as f64 * ws);
                        }
                    }
                }
                let raw = sum / acc_step;
                if raw >= limit || raw < -limit {
                    return None;
                }
                let q = saturate(sum / out.step(), out);
                y.push(if relu { q.max(0) } else { q });
            }
        }
    }
    Some(y)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce55);
    let limits = LayerLimits { max_height: 35, max_width: 120, max_channels: 64 };
    let mut kinds = BTreeMap::new();
    let mut mismatches = 0;
    let cases = 1000;
    for _ in 0..cases {
        let (x, l, out, relu) = random_layer_case(&mut rng, limits);
        let kind = match (l.attrs.mode, l.attrs.kernel) {
            (ConvMode::Depthwise, _) => "dw",
            (ConvMode::Standard, _) => "stem",
            _ => "pw",
        };
        *kinds.entry(kind).or_insert(0) += 1;
        let ok = match (conv(&x, &l, out, relu), oracle_conv(&x, &l, out, relu)) {
            (Ok(y), Some(r)) => y.data() == r.as_slice(),
            (Err(_), None) => true,
            _ => false,
        };
        mismatches += usize::from(!ok);
    }
    let secs = start.elapsed();
    let all_kinds = ["dw", "pw", "stem"].iter().all(|k| kinds.get(k).copied().unwrap_or(0) > 0);
    outcome(
        mismatches == 0 && all_kinds && secs < Duration::from_secs(60),
        format!("{cases} layers {kinds:?}, {mismatches} mismatches, {:.1}s (limit 60s)", secs.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 2. batch-norm folding

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut errors = 0;
    for seed in 0..100 {
        match fold_case_error(1000 + seed) {
            Ok(e) => worst = worst.max(e),
            Err(_) => errors += 1,
        }
    }
    outcome(errors == 0 && worst <= 1e-5, format!("100 graphs, max rel err {worst:.2e} (limit 1e-5), {errors} errors"))
}

// ---------------------------------------------------------------------------
// 3. counters

fn single_conv(attrs: ConvAttrs, dims: Dims) -> NetworkGraph {
    let mut b = GraphBuilder::new();
    b.input("x", dims);
    b.conv("c", "x", attrs);
    b.finish(&["c"]).unwrap()
}

/// Conv weight count of a graph summed from its parameter tensors.
fn conv_weight_total(g: &NetworkGraph) -> u64 {
    graph_params(g)
        .unwrap()
        .iter()
        .filter(|p| p.role == ParamRole::ConvWeight)
        .map(|p| p.dims.iter().product::<usize>() as u64)
        .sum()
}

fn criterion_3() -> Outcome {
    let (k, m, n) = (3usize, 32usize, 64usize);
    let standard = conv_weight_params(&ConvAttrs::standard(k, 1, n), m);
    let separable =
        conv_weight_params(&ConvAttrs::depthwise(k, 1, m), m) + conv_weight_params(&ConvAttrs::pointwise(n), m);
    let ratio = separable_ratio(k, n);
    let eq_ok = standard == 18_432
        && separable == 2_336
        && ratio == 1.0 / 64.0 + 1.0 / 9.0
        && Ratio::new(separable, standard) == Ratio::new(1, 64) + Ratio::new(1, 9);

    let big = single_conv(ConvAttrs::standard(7, 1, 64), Dims::new(16, 16, 32));
    let before = conv_weight_total(&big);
    let after = conv_weight_total(&decompose_large_kernel(&big).unwrap().graph);
    let decomp_ok = before == 100_352 && after == 92_160;

    let mut dilated_ok = true;
    for (ci, co) in [(16u64, 32u64), (32, 32), (8, 64)] {
        let g = single_conv(ConvAttrs::standard(3, 1, co as usize).with_dilation(3), Dims::new(12, 12, ci as usize));
        let out = replace_dilated(&g).unwrap().graph;
        let no_dilation = out.nodes().iter().all(|n| n.kind.conv().is_none_or(|a| a.dilation == 1));
        dilated_ok &= no_dilation && conv_weight_total(&out) == 9 * ci * co + 18 * co * co;
    }

    let reference = build_roadnet_rt(&RoadNetConfig::default()).unwrap();
    let cmp = separable_comparison(&reference).unwrap();
    let factor = cmp.factor();
    outcome(
        eq_ok && decomp_ok && dilated_ok && (4.0..=8.0).contains(&factor),
        format!(
            "18432/2336/(1/64+1/9) {}, 7x7 {before}->{after}, dilated {}, factor {factor:.2} ({} -> {}; reference 5.64, band [4, 8])",
            if eq_ok { "ok" } else { "WRONG" },
            if dilated_ok { "ok" } else { "WRONG" },
            cmp.standard_params,
            cmp.separable_params,
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. throughput arithmetic

fn deployable_reference(seed: u64) -> (NetworkGraph, WeightContainer) {
    let g = build_roadnet_rt(&RoadNetConfig::default()).unwrap();
    let w = init_weights(&g, seed).unwrap();
    let out = run_pipeline(&g, &w, seed).unwrap();
    (out.graph, out.weights)
}

fn criterion_4() -> Outcome {
    let (g, _) = deployable_reference(0);
    let hw = HardwareConfig::default();
    let config_ok = hw.clock_hz == 250_000_000 && hw.buffer_count == 8;
    let r = estimate(&g, &hw, BitWidth::W8).unwrap();
    let cycles = r.total_cycles as u128;
    let fps = Ratio::new(hw.clock_hz as u128, cycles);
    let gops = Ratio::new(2 * r.macs as u128 * hw.clock_hz as u128, cycles * 1_000_000_000);
    let reference = Ratio::new(1967u128, 10);
    let in_band = fps * 2 >= reference && fps <= reference * 2;
    let as_f = |r: Ratio<u128>| *r.numer() as f64 / *r.denom() as f64;
    outcome(
        config_ok && r.fps() == fps && r.gops() == gops && in_band,
        format!(
            "{} cycles, {:.1} fps (reference 196.7, band [98.35, 393.4]), {:.1} GOPS (reference 331), exact rationals {}",
            r.total_cycles,
            as_f(fps),
            as_f(gops),
            if r.fps() == fps && r.gops() == gops { "ok" } else { "WRONG" },
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. buffer sizing

fn criterion_5() -> Outcome {
    let words = buffer_words(120, 35, 3, 32);
    let blocks = weight_bram_blocks(133_870, BitWidth::W8, &HardwareConfig::default());
    // (120+3-1)*(35+3-1)*32 and ceil(133870*8/36864) by hand.
    let expect_words = 122 * 37 * 32;
    let expect_blocks = (133_870u64 * 8).div_ceil(36_864);
    outcome(
        words == 144_448 && words == expect_words && blocks == 30 && blocks == expect_blocks,
        format!("buffer words {words} (expect 144448), int8 weight blocks {blocks} (expect 30)"),
    )
}

// ---------------------------------------------------------------------------
// 6. float vs int8 on the full-size reference network

fn synthetic(dims: Dims, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Node whose output the host upsamples, i.e. the device-side probability map.
fn device_output(g: &NetworkGraph) -> String {
    let out = g.node(&g.outputs()[0]).unwrap();
    match out.kind {
        LayerKind::BilinearResize { .. } => out.inputs[0].clone(),
        _ => out.name.clone(),
    }
}

/// Seeded weights drawn from `±1/sqrt(fan_in)` instead of the He bound
/// `±sqrt(6/fan_in)`: the He draw has no normalization, so activations grow
/// about 1.4x per layer and the deepest branches reach the thousands.
fn small_magnitude(g: &NetworkGraph, mut w: WeightContainer) -> WeightContainer {
    let shrink = 1.0 / 6f32.sqrt();
    for p in graph_params(g).unwrap().into_iter().filter(|p| p.role == ParamRole::ConvWeight) {
        let t = w.get(&p.tensor).unwrap();
        let data = t.as_f32().unwrap().iter().map(|v| v * shrink).collect();
        w.set(p.tensor.clone(), StoredTensor::f32(p.dims.clone(), data));
    }
    w
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (g, w) = deployable_reference(7);
    let w = small_magnitude(&g, w);
    let input = g.inputs()[0].clone();
    let prob_node = device_output(&g);
    let feed = |t: Tensor| BTreeMap::from([(input.name.clone(), t)]);
    let calib: Vec<_> = (0..4).map(|i| feed(synthetic(input.dims, 100 + i))).collect();
    let model = QuantizedModel::calibrate(&g, &w, &calib, BitWidth::W8).unwrap();

    let (mut diff, mut pixels, mut positive) = (0.0f64, 0usize, 0usize);
    let (mut worst_mean, mut min_agree, mut map_ok) = (0.0f64, 1.0f64, true);
    for i in 0..10 {
        let img = synthetic(input.dims, 200 + i);
        let pf = run_float(&g, &w, &feed(img.clone())).unwrap().get(&prob_node).unwrap().clone();
        let pq = dequantize(&run_quantized(&model, &img).unwrap());
        map_ok &= pf.dims() == Dims::new(35, 120, 1) && pq.dims() == pf.dims();
        let n = pf.data().len();
        let d: f64 = pf.data().iter().zip(pq.data()).map(|(a, b)| (a - b).abs() as f64).sum();
        let agree = pf.data().iter().zip(pq.data()).filter(|(a, b)| (**a > 0.5) == (**b > 0.5)).count();
        positive += pf.data().iter().filter(|p| **p > 0.5).count();
        diff += d;
        pixels += n;
        worst_mean = worst_mean.max(d / n as f64);
        min_agree = min_agree.min(agree as f64 / n as f64);
    }
    let secs = start.elapsed();
    let mean = diff / pixels as f64;
    outcome(
        map_ok && worst_mean <= 0.05 && min_agree >= 0.98 && secs < Duration::from_secs(120),
        format!(
            "10 images, mean |dp| {mean:.4} (worst image {worst_mean:.4}, limit 0.05), min mask agreement {:.2}% (limit 98%), float road fraction {:.1}%, {:.1}s (limit 120s)",
            min_agree * 100.0,
            100.0 * positive as f64 / pixels as f64,
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. metrics

fn direct_metrics(c: &ConfusionCounts) -> [f64; 6] {
    let r = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let p = r(c.tp, c.tp + c.fp);
    let rec = r(c.tp, c.tp + c.fn_);
    let f1 = if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
    [p, rec, f1, r(c.fp, c.fp + c.tn), r(c.fn_, c.tp + c.fn_), r(c.tp, c.tp + c.fp + c.fn_)]
}

fn brute_maxf(prob: &[f32], gt: &[bool]) -> f64 {
    (0..THRESHOLDS)
        .map(|k| {
            let t = k as f64 / 256.0;
            let mut c = ConfusionCounts::default();
            for (&p, &g) in prob.iter().zip(gt) {
                match (p as f64 > t, g) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            direct_metrics(&c)[2]
        })
        .fold(0.0, f64::max)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut derive_bad = 0;
    for i in 0..1000 {
        // Every tenth case exercises zero denominators.
        let hi = if i % 10 == 0 { 2 } else { 1_000_000 };
        let c = ConfusionCounts {
            tp: rng.gen_range(0..hi),
            fp: rng.gen_range(0..hi),
            fn_: rng.gen_range(0..hi),
            tn: rng.gen_range(0..hi),
        };
        let m = derive(&c);
        derive_bad += usize::from([m.precision, m.recall, m.f1, m.fpr, m.fnr, m.iou] != direct_metrics(&c));
    }
    let mut maxf_bad = 0;
    for _ in 0..100 {
        let prob: Vec<f32> = (0..256).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.4)).collect();
        maxf_bad += usize::from(maxf(&sweep(&prob, &gt).unwrap()) != brute_maxf(&prob, &gt));
    }
    let c = ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 };
    let m = derive(&c);
    let worked = m.precision == 0.5 && m.recall == 1.0 && m.f1 == 2.0 / 3.0 && m.fpr == 1.0 / 3.0 && m.iou == 0.5;
    outcome(
        derive_bad == 0 && maxf_bad == 0 && worked,
        format!(
            "derive mismatches {derive_bad}/1000, maxf mismatches {maxf_bad}/100, 2x2 case {}",
            if worked { "exact" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. sigmoid table

fn criterion_8() -> Outcome {
    let lut = SigmoidLut::new();
    let table = lut.table();
    let err = (0..table.len())
        .map(|i| {
            let x = -8.0 + i as f64 / 16.0;
            (table[i] as f64 / 256.0 - 1.0 / (1.0 + (-x).exp())).abs()
        })
        .fold(0.0, f64::max);
    let monotone = table.windows(2).all(|w| w[0] <= w[1]);
    outcome(
        err <= 1.0 / 64.0 && monotone,
        format!("max bin-centre error {err:.5} (limit {:.5}), monotone {monotone}", 1.0 / 64.0),
    )
}

// ---------------------------------------------------------------------------
// 9. format fuzz

fn mutate(rng: &mut impl Rng, base: &[u8]) -> Vec<u8> {
    let mut b = base.to_vec();
    match rng.gen_range(0..5) {
        0 => b.truncate(rng.gen_range(0..base.len())),
        1 => {
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..b.len());
                b[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        2 => {
            let i = rng.gen_range(0..b.len());
            b[i] = rng.gen();
            b.truncate(rng.gen_range(i..=base.len()));
        }
        3 => {
            let i = rng.gen_range(0..=b.len());
            let extra: Vec<u8> = (0..rng.gen_range(1..16)).map(|_| rng.gen()).collect();
            b.splice(i..i, extra);
        }
        _ => {
            // Large length and dimension fields.
            let i = rng.gen_range(0..b.len().saturating_sub(4).max(1));
            for j in i..(i + 4).min(b.len()) {
                b[j] = 0xff;
            }
        }
    }
    b
}

fn sample_container(rng: &mut impl Rng) -> Vec<u8> {
    let mut c = WeightContainer::new();
    for t in 0..rng.gen_range(1..4) {
        let dims: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
        let n: usize = dims.iter().product();
        let stored = if rng.gen_bool(0.5) {
            StoredTensor::f32(dims, (0..n).map(|_| rng.gen()).collect())
        } else {
            StoredTensor { dims, scale_exp: -6, data: TensorData::I8((0..n).map(|_| rng.gen()).collect()) }
        };
        c.insert(format!("layer{t}.weight"), stored).unwrap();
    }
    c.to_bytes().unwrap()
}

fn sample_ppm(rng: &mut impl Rng) -> Vec<u8> {
    let (w, h) = (rng.gen_range(1..6), rng.gen_range(1..6));
    ImageBuffer::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap().to_pnm_bytes()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut panics, mut rejected) = (0, 0);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..10_000 {
        let base = if i % 2 == 0 { sample_container(&mut rng) } else { sample_ppm(&mut rng) };
        let bytes = mutate(&mut rng, &base);
        let r = catch_unwind(AssertUnwindSafe(|| {
            if i % 2 == 0 {
                WeightContainer::from_bytes(&bytes).is_err()
            } else {
                parse_pnm(&bytes).is_err()
            }
        }));
        match r {
            Ok(err) => rejected += usize::from(err),
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(hook);
    outcome(
        panics == 0,
        format!("10000 mutated files (5000 container, 5000 PPM), {rejected} rejected cleanly, {panics} panics"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("oracle bit-exactness", criterion_1),
        ("batch-norm folding", criterion_2),
        ("counter parity", criterion_3),
        ("throughput arithmetic", criterion_4),
        ("buffer sizing", criterion_5),
        ("end-to-end int8 budget", criterion_6),
        ("metrics oracle", criterion_7),
        ("sigmoid table", criterion_8),
        ("format fuzz", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        failed += usize::from(!o.pass);
        println!("{} {}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
