//! Host-side duties: model loading, input resize, output upsampling, and
//! thresholding around either executor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use roadnet_core::accel::{run_quantized, QuantizedModel, ACT_PREFIX};
use roadnet_core::float_exec::{bilinear_resize, resize_to, run_float_single};
use roadnet_core::graph::{build_roadnet_rt, LayerKind, NetworkGraph, RoadNetConfig};
use roadnet_core::io::{load_graph, load_pnm, load_weights, ImageBuffer, WeightContainer};
use roadnet_core::quant::{dequantize, BitWidth};
use roadnet_core::transforms::run_pipeline;
use roadnet_core::weights::init_weights;
use roadnet_core::{Dims, Tensor};

use crate::args::{ModelArgs, Precision};
use crate::error::{CliError, CliResult};

/// Loads `--model`/`--weights`, falling back to the reference network. With
/// `transformed`, the fallback graph is the deployable (transformed) one.
pub fn load_model(args: &ModelArgs, transformed: bool) -> CliResult<(NetworkGraph, WeightContainer)> {
    let (graph, seeded) = match &args.model {
        Some(p) => {
            let g = load_graph(p).map_err(CliError::at(p))?;
            let w = if args.weights.is_none() { Some(init_weights(&g, args.seed)?) } else { None };
            (g, w)
        }
        None => {
            let g = build_roadnet_rt(&RoadNetConfig::default())?;
            let w = init_weights(&g, args.seed)?;
            if transformed {
                let out = run_pipeline(&g, &w, args.seed)?;
                (out.graph, Some(out.weights))
            } else {
                (g, Some(w))
            }
        }
    };
    let weights = match &args.weights {
        Some(p) => load_weights(p).map_err(CliError::at(p))?,
        None => seeded.expect("seeded weights exist when none are given"),
    };
    Ok((graph, weights))
}

pub fn is_quantized(w: &WeightContainer) -> bool {
    w.names().any(|n| n.starts_with(ACT_PREFIX))
}

fn single_input(g: &NetworkGraph) -> CliResult<(String, Dims)> {
    match g.inputs() {
        [only] => Ok((only.name.clone(), only.dims)),
        _ => Err(CliError::Invalid("model must have exactly one input".into())),
    }
}

/// Image scaled to `[0, 1]` and bilinearly resized to the network input.
pub fn preprocess(img: &ImageBuffer, dims: Dims) -> CliResult<Tensor> {
    if img.dims().channels != dims.channels {
        return Err(CliError::Invalid(format!(
            "image has {} channels, model expects {}",
            img.dims().channels,
            dims.channels
        )));
    }
    let t = img.to_tensor();
    if t.dims() == dims {
        return Ok(t);
    }
    Ok(resize_to(&t, dims.height, dims.width)?)
}

/// PPM files of a directory, sorted by name.
pub fn list_images(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::at(dir)(e.into()))?;
    let mut out: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == ext)).collect();
    out.sort();
    Ok(out)
}

pub fn load_image(p: &Path) -> CliResult<ImageBuffer> {
    load_pnm(p).map_err(CliError::at(p))
}

/// Uniform random images of the given dims.
pub fn synthetic_images(dims: Dims, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::from_fn(dims, |_, _, _| rng.gen_range(0.0..1.0))).collect()
}

pub fn calibrate(
    g: &NetworkGraph,
    w: &WeightContainer,
    images: &[Tensor],
    bit_width: BitWidth,
) -> CliResult<QuantizedModel> {
    let (name, _) = single_input(g)?;
    let samples: Vec<BTreeMap<String, Tensor>> =
        images.iter().map(|t| BTreeMap::from([(name.clone(), t.clone())])).collect();
    Ok(QuantizedModel::calibrate(g, w, &samples, bit_width)?)
}

pub enum Predictor {
    Float { graph: NetworkGraph, weights: WeightContainer },
    Fixed(Box<QuantizedModel>),
}

impl Predictor {
    /// Float weights run as-is for `float32`. For fixed point, a quantized
    /// container is used directly; float weights are calibrated on
    /// `calib` first.
    pub fn new(
        graph: NetworkGraph,
        weights: WeightContainer,
        precision: Precision,
        calib: impl FnOnce(Dims) -> CliResult<Vec<Tensor>>,
    ) -> CliResult<Self> {
        let bw = match precision {
            Precision::Float32 => {
                if is_quantized(&weights) {
                    return Err(CliError::Invalid("weights are fixed point; use --precision int8 or int16".into()));
                }
                return Ok(Predictor::Float { graph, weights });
            }
            Precision::Int8 => BitWidth::W8,
            Precision::Int16 => BitWidth::W16,
        };
        if is_quantized(&weights) {
            let m = QuantizedModel::from_container(&graph, &weights)?;
            if m.bit_width() != bw {
                return Err(CliError::Invalid(format!("weights are {}, requested {bw}", m.bit_width())));
            }
            return Ok(Predictor::Fixed(Box::new(m)));
        }
        let (_, dims) = single_input(&graph)?;
        let images = calib(dims)?;
        eprintln!("calibrating {bw} formats on {} image(s)", images.len());
        Ok(Predictor::Fixed(Box::new(calibrate(&graph, &weights, &images, bw)?)))
    }

    fn graph(&self) -> &NetworkGraph {
        match self {
            Predictor::Float { graph, .. } => graph,
            Predictor::Fixed(m) => m.graph(),
        }
    }

    /// Road probability at the image's own resolution.
    pub fn predict(&self, img: &ImageBuffer) -> CliResult<Tensor> {
        let (_, dims) = single_input(self.graph())?;
        let input = preprocess(img, dims)?;
        let prob = match self {
            Predictor::Float { graph, weights } => {
                let trace = run_float_single(graph, weights, input)?;
                let out = trace.outputs(graph).next().ok_or_else(|| CliError::Invalid("model has no output".into()))?;
                out.clone()
            }
            Predictor::Fixed(m) => {
                let mut t = dequantize(&run_quantized(m, &input)?);
                for n in m.graph().nodes().iter().filter(|n| m.split().host_outputs.contains(&n.name)) {
                    if let LayerKind::BilinearResize { scale } = n.kind {
                        t = bilinear_resize(&t, scale)?;
                    }
                }
                t
            }
        };
        let d = img.dims();
        let prob = if prob.dims().height == d.height && prob.dims().width == d.width {
            prob
        } else {
            resize_to(&prob, d.height, d.width)?
        };
        Ok(prob.map(|p| p.clamp(0.0, 1.0)))
    }
}

/// Road where the first channel is strictly above `threshold`.
pub fn threshold_mask(prob: &Tensor, threshold: f64) -> Vec<bool> {
    let c = prob.dims().channels;
    prob.data().chunks(c).map(|px| px[0] as f64 > threshold).collect()
}

pub fn check_threshold(t: f64) -> CliResult<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(CliError::Usage(format!("--threshold must lie in (0, 1), got {t}")));
    }
    Ok(())
}
