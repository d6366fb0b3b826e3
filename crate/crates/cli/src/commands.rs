use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use roadnet_core::graph::{build_roadnet_rt, RoadNetConfig};
use roadnet_core::io::{render_overlay, save_graph, save_pgm, save_ppm, save_weights, ImageBuffer};
use roadnet_core::metrics::{confusion, derive, summarize, sweep, ConfusionCounts, EvalSummary, Metrics, PrCurve};
use roadnet_core::perf::{estimate, HardwareConfig};
use roadnet_core::quant::BitWidth;
use roadnet_core::selftest::{run_selftest, SelfTestConfig};
use roadnet_core::transforms::{check_channel_alignment, count, run_pipeline, separable_comparison, PassReport};
use roadnet_core::weights::init_weights;
use roadnet_core::Tensor;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::host::*;

/// Published totals of the standard and depthwise-separable networks.
const REFERENCE_PARAMS: (u64, u64) = (756_032, 133_870);
const REFERENCE_FACTOR: &str = "5.64";
const REFERENCE_FPS: &str = "196.7";
const REFERENCE_GOPS: u64 = 331;
const REFERENCE_DSP: u64 = 1560;
const REFERENCE_BRAM: u64 = 1340;
pub const REPORT_FILE: &str = "report.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::at(dir)(e.into()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::at(path)(e.into()))
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn bit_width(p: IntPrecision) -> BitWidth {
    match p {
        IntPrecision::Int8 => BitWidth::W8,
        IntPrecision::Int16 => BitWidth::W16,
    }
}

pub fn info(args: &InfoArgs) -> CliResult<()> {
    let graph = match &args.model {
        Some(p) => roadnet_core::io::load_graph(p).map_err(CliError::at(p))?,
        None => build_roadnet_rt(&RoadNetConfig::default())?,
    };
    let counts = count(&graph)?;
    let alignment = check_channel_alignment(&graph, args.lanes)?;
    let separable = separable_comparison(&graph)?;
    let passes: Option<Vec<PassReport>> =
        match args.model.as_ref().and_then(|p| p.parent()).map(|d| d.join(REPORT_FILE)) {
            Some(path) if path.exists() => {
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::at(&path)(e.into()))?;
                Some(serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?)
            }
            _ => None,
        };
    if args.json {
        let v = serde_json::json!({
            "layers": counts.rows,
            "total_params": counts.total_params(),
            "total_macs": counts.total_macs(),
            "alignment_warnings": alignment.warnings,
            "standard_params": separable.standard_params,
            "separable_params": separable.separable_params,
            "separable_factor": separable.factor(),
            "passes": passes,
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        return Ok(());
    }
    let mut out = String::new();
    let w = counts.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "{:<w$}  {:<14}  {:>10}  {:>14}", "layer", "kind", "params", "macs");
    for r in &counts.rows {
        let _ = writeln!(out, "{:<w$}  {:<14}  {:>10}  {:>14}", r.layer, r.kind, r.params, r.macs);
    }
    let _ = writeln!(out, "total params      {}", counts.total_params());
    let _ = writeln!(out, "total MACs/frame  {}", counts.total_macs());
    let _ = writeln!(out, "standard params   {}  (reference {})", separable.standard_params, REFERENCE_PARAMS.0);
    let _ = writeln!(out, "separable params  {}  (reference {})", separable.separable_params, REFERENCE_PARAMS.1);
    let _ = writeln!(out, "reduction factor  {:.2}  (reference {REFERENCE_FACTOR})", separable.factor());
    for warning in &alignment.warnings {
        let _ = writeln!(out, "warning: {warning}");
    }
    for p in passes.iter().flatten() {
        out.push('\n');
        out.push_str(&p.render_text());
    }
    print!("{out}");
    Ok(())
}

pub fn transform(args: &TransformArgs) -> CliResult<()> {
    let (graph, weights) = load_model(&args.model, false)?;
    let out = run_pipeline(&graph, &weights, args.model.seed)?;
    create_dir(&args.out)?;
    let gpath = args.out.join("graph.json");
    save_graph(&gpath, &out.graph).map_err(CliError::at(&gpath))?;
    let wpath = args.out.join("weights.rnrt");
    save_weights(&wpath, &out.weights).map_err(CliError::at(&wpath))?;
    write_json(&args.out.join(REPORT_FILE), &out.reports)?;
    for r in &out.reports {
        println!("{}", r.render_text());
    }
    println!("wrote {} and {}", gpath.display(), wpath.display());
    Ok(())
}

fn calibration_images(
    dir: Option<&PathBuf>,
    dims: roadnet_core::Dims,
    fallback: &[PathBuf],
    seed: u64,
    count: usize,
) -> CliResult<Vec<Tensor>> {
    let paths = match dir {
        Some(d) => list_images(d, "ppm")?,
        None if !fallback.is_empty() => fallback.to_vec(),
        None => return Ok(synthetic_images(dims, count, seed)),
    };
    if paths.is_empty() {
        return Err(CliError::Invalid("no PPM calibration images found".into()));
    }
    paths.iter().map(|p| preprocess(&load_image(p)?, dims)).collect()
}

pub fn quantize(args: &QuantizeArgs) -> CliResult<()> {
    let (graph, weights) = load_model(&args.model, true)?;
    if is_quantized(&weights) {
        return Err(CliError::Invalid("weights are already fixed point".into()));
    }
    let dims = graph.inputs().first().map(|i| i.dims).ok_or_else(|| CliError::Invalid("model has no input".into()))?;
    let images = calibration_images(args.calib_dir.as_ref(), dims, &[], args.model.seed, args.calib_count.max(1))?;
    let model = calibrate(&graph, &weights, &images, bit_width(args.precision))?;
    create_dir(&args.out)?;
    let gpath = args.out.join("graph.json");
    save_graph(&gpath, &graph).map_err(CliError::at(&gpath))?;
    let wpath = args.out.join("quantized.rnrt");
    save_weights(&wpath, &model.to_container()?).map_err(CliError::at(&wpath))?;
    println!(
        "calibrated {} activation formats on {} image(s), {}",
        model.specs().len(),
        images.len(),
        model.bit_width()
    );
    println!("wrote {} and {}", gpath.display(), wpath.display());
    Ok(())
}

fn predictor(
    model: &ModelArgs,
    precision: Precision,
    calib_dir: Option<&PathBuf>,
    fallback: &[PathBuf],
) -> CliResult<Predictor> {
    let (graph, weights) = load_model(model, true)?;
    Predictor::new(graph, weights, precision, |dims| calibration_images(calib_dir, dims, fallback, model.seed, 4))
}

pub fn run(args: &RunArgs) -> CliResult<()> {
    check_threshold(args.threshold)?;
    let p = predictor(&args.model, args.precision, args.calib_dir.as_ref(), &args.images)?;
    create_dir(&args.out)?;
    for path in &args.images {
        let img = load_image(path)?;
        let prob = p.predict(&img)?;
        let mask = threshold_mask(&prob, args.threshold);
        let d = img.dims();
        let name = stem(path);
        let mpath = args.out.join(format!("{name}_mask.pgm"));
        save_pgm(&mpath, &ImageBuffer::gray_from_mask(d.width, d.height, &mask)?).map_err(CliError::at(&mpath))?;
        let opath = args.out.join(format!("{name}_overlay.ppm"));
        let rgb = if d.channels == 3 { img } else { gray_to_rgb(&img)? };
        save_ppm(&opath, &render_overlay(&rgb, &mask, None)?).map_err(CliError::at(&opath))?;
        let road = mask.iter().filter(|&&m| m).count();
        println!("{}: road {:.2}% -> {}", path.display(), 100.0 * road as f64 / mask.len() as f64, mpath.display());
    }
    Ok(())
}

fn gray_to_rgb(img: &ImageBuffer) -> CliResult<ImageBuffer> {
    let d = img.dims();
    let data = (0..d.pixels()).flat_map(|i| img.rgb(i)).collect();
    Ok(ImageBuffer::new(d.width, d.height, 3, data)?)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    images: usize,
    threshold: f64,
    counts: ConfusionCounts,
    at_threshold: Metrics,
    summary: EvalSummary,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    check_threshold(args.threshold)?;
    let images = list_images(&args.data.join("images"), "ppm")?;
    if images.is_empty() {
        return Err(CliError::Invalid(format!("no PPM images under {}", args.data.join("images").display())));
    }
    let pairs: Vec<(PathBuf, PathBuf)> = images
        .into_iter()
        .map(|p| {
            let gt = args.data.join("gt").join(format!("{}.pgm", stem(&p)));
            (p, gt)
        })
        .collect();
    if let Some((_, gt)) = pairs.iter().find(|(_, gt)| !gt.exists()) {
        return Err(CliError::Io {
            path: gt.clone(),
            source: roadnet_core::Error::MissingInput("ground-truth mask".into()),
        });
    }
    let fallback: Vec<PathBuf> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let p = predictor(&args.model, args.precision, args.calib_dir.as_ref(), &fallback)?;
    let per_image: Vec<CliResult<(PrCurve, ConfusionCounts)>> = pairs
        .par_iter()
        .map(|(ip, gp)| {
            let img = load_image(ip)?;
            let gt_img = load_image(gp)?;
            let gt = gt_img.to_mask();
            let prob = p.predict(&img)?;
            if gt_img.dims().height != img.dims().height || gt_img.dims().width != img.dims().width {
                return Err(CliError::Invalid(format!("{}: mask size differs from image", gp.display())));
            }
            let c = prob.dims().channels;
            let probs: Vec<f32> = prob.data().chunks(c).map(|px| px[0]).collect();
            let curve = sweep(&probs, &gt)?;
            let counts = confusion(&threshold_mask(&prob, args.threshold), &gt)?;
            Ok((curve, counts))
        })
        .collect();
    let mut curve = PrCurve::default();
    let mut counts = ConfusionCounts::default();
    for r in per_image {
        let (c, n) = r?;
        curve.merge(&c);
        counts += n;
    }
    let report = EvalReport {
        images: pairs.len(),
        threshold: args.threshold,
        counts,
        at_threshold: derive(&counts),
        summary: summarize(&curve),
    };
    let m = &report.at_threshold;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    println!("images {}  (pooled counts, image plane)", report.images);
    println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "MaxF", "AP", "PRE", "REC", "FPR", "FNR", "IOU");
    println!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        pct(report.summary.maxf),
        pct(report.summary.ap),
        pct(m.precision),
        pct(m.recall),
        pct(m.fpr),
        pct(m.fnr),
        pct(m.iou)
    );
    println!(
        "PRE/REC/FPR/FNR/IOU at threshold {}; MaxF at threshold {:.4}",
        args.threshold, report.summary.best_threshold
    );
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

pub fn estimate_cmd(args: &EstimateArgs) -> CliResult<()> {
    let graph = match &args.model {
        Some(p) => roadnet_core::io::load_graph(p).map_err(CliError::at(p))?,
        None => {
            let g = build_roadnet_rt(&RoadNetConfig::default())?;
            run_pipeline(&g, &init_weights(&g, 0)?, 0)?.graph
        }
    };
    let defaults = HardwareConfig::default();
    let hw = HardwareConfig {
        clock_hz: args.clock_hz.unwrap_or(defaults.clock_hz),
        buffer_count: args.buffers.unwrap_or(defaults.buffer_count),
        bus_bytes_per_cycle: args.bus_bytes.unwrap_or(defaults.bus_bytes_per_cycle),
        ..defaults
    };
    hw.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let report = estimate(&graph, &hw, bit_width(args.precision))?;
    let mut json = report.to_json();
    json["reference"] = serde_json::json!({
        "fps": REFERENCE_FPS, "gops": REFERENCE_GOPS, "dsp": REFERENCE_DSP, "bram": REFERENCE_BRAM,
    });
    if args.json {
        println!("{}", serde_json::to_string_pretty(&json).expect("json"));
    } else {
        print!("{}", report.render_text());
        println!(
            "reference design: {REFERENCE_FPS} fps, {REFERENCE_GOPS} GOPS, {REFERENCE_DSP} DSP, {REFERENCE_BRAM} BRAM"
        );
        println!(
            "unmodeled gap: {} DSP, {} BRAM",
            REFERENCE_DSP as i64 - report.dsp as i64,
            REFERENCE_BRAM as i64 - report.bram as i64
        );
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("estimate.json"), &json)?;
    }
    Ok(())
}

pub fn selftest(args: &SelftestArgs) -> CliResult<()> {
    let cfg = SelfTestConfig { seed: args.seed, layer_cases: args.cases, ..SelfTestConfig::default() };
    let report = run_selftest(&cfg);
    print!("{}", report.render_text());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::SelfTest)
    }
}
