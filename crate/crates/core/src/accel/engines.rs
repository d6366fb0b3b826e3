//! Depthwise and pointwise compute engines and the convolutions built on them.

use super::linebuf::stream_group;
use super::LANES;
use crate::error::{Error, Result};
use crate::graph::{same_out, same_pad_before, ConvAttrs, ConvMode};
use crate::quant::{check_accumulator, requant_shift, round_shift, BitWidth, QTensor, QuantSpec};
use crate::tensor::Dims;

/// Multipliers per depthwise lane (one 3×3 kernel).
pub const DW_TAPS: usize = 9;

/// 32 lanes, each a 9-multiplier array feeding an adder tree.
#[derive(Debug, Clone)]
pub struct DwEngine {
    kernels: [[i32; DW_TAPS]; LANES],
}

impl Default for DwEngine {
    fn default() -> Self {
        Self { kernels: [[0; DW_TAPS]; LANES] }
    }
}

impl DwEngine {
    pub const LANES: usize = LANES;
    pub const MULTIPLIERS_PER_LANE: usize = DW_TAPS;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&mut self, lane: usize, kernel: &[i32]) {
        self.kernels[lane].copy_from_slice(kernel);
    }

    pub fn clear(&mut self) {
        self.kernels = [[0; DW_TAPS]; LANES];
    }

    /// One window (`[tap][lane]`) through all lanes.
    #[inline]
    pub fn step(&self, window: &[i32]) -> [i64; LANES] {
        let mut acc = [0i64; LANES];
        for (t, taps) in window.chunks_exact(LANES).enumerate() {
            for lane in 0..LANES {
                acc[lane] += taps[lane] as i64 * self.kernels[lane][t] as i64;
            }
        }
        acc
    }
}

/// 32×32 multiplier grid computing one vector-matrix product per step.
#[derive(Debug, Clone)]
pub struct PwEngine {
    /// `[out lane][in lane]`.
    block: Vec<i32>,
}

impl Default for PwEngine {
    fn default() -> Self {
        Self { block: vec![0; LANES * LANES] }
    }
}

impl PwEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load_block(&mut self, block: &[i32]) {
        self.block.copy_from_slice(block);
    }

    /// Adds `block * v` into `acc`.
    #[inline]
    pub fn step(&self, v: &[i32], acc: &mut [i64; LANES]) {
        for (o, row) in self.block.chunks_exact(LANES).enumerate() {
            let mut s = 0i64;
            for (w, x) in row.iter().zip(v) {
                s += *w as i64 * *x as i64;
            }
            acc[o] += s;
        }
    }
}

/// Integer conv layer ready for the datapath.
#[derive(Debug, Clone, PartialEq)]
pub struct QConvLayer {
    pub attrs: ConvAttrs,
    pub in_channels: usize,
    pub in_spec: QuantSpec,
    pub w_spec: QuantSpec,
    /// `[out][ky][kx][in]` (depthwise `[c][ky][kx][1]`).
    pub weights: Vec<i32>,
    /// Bias at the accumulator scale `in_spec + w_spec`.
    pub bias: Option<Vec<i64>>,
}

impl QConvLayer {
    pub fn accumulator_width(&self) -> BitWidth {
        if self.in_spec.bit_width == BitWidth::W16 || self.w_spec.bit_width == BitWidth::W16 {
            BitWidth::W16
        } else {
            BitWidth::W8
        }
    }

    fn check_input(&self, input: &QTensor) -> Result<()> {
        if input.spec() != self.in_spec {
            return Err(Error::InvalidOperand(format!(
                "input format {} but layer expects {}",
                input.spec(),
                self.in_spec
            )));
        }
        if input.dims().channels != self.in_channels {
            return Err(Error::InvalidOperand(format!(
                "input has {} channels but layer expects {}",
                input.dims().channels,
                self.in_channels
            )));
        }
        let expect = self.attrs.weight_count(self.in_channels);
        if self.weights.len() != expect {
            return Err(Error::InvalidOperand(format!("expected {expect} weights, got {}", self.weights.len())));
        }
        if self.bias.as_ref().is_some_and(|b| b.len() != self.attrs.out_channels) {
            return Err(Error::InvalidOperand("bias length differs from out_channels".into()));
        }
        Ok(())
    }

    fn out_dims(&self, d: Dims) -> Dims {
        Dims::new(same_out(d.height, self.attrs.stride), same_out(d.width, self.attrs.stride), self.attrs.out_channels)
    }
}

/// Bias add, width check, shift, saturate, optional ReLU.
struct OutputStage {
    shift: u32,
    spec: QuantSpec,
    relu: bool,
    width: BitWidth,
}

impl OutputStage {
    fn new(layer: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<Self> {
        Ok(Self {
            shift: requant_shift(layer.in_spec, layer.w_spec, out_spec)?,
            spec: out_spec,
            relu,
            width: layer.accumulator_width(),
        })
    }

    #[inline]
    fn apply(&self, acc: i64, bias: i64) -> Result<i32> {
        let v = check_accumulator(acc + bias, self.width)?;
        let q = self.spec.saturate(round_shift(v, self.shift));
        Ok(if self.relu { q.max(0) } else { q })
    }
}

/// Depthwise 3×3 on the DW engine, one 32-channel group at a time.
pub fn dw_conv(input: &QTensor, layer: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<QTensor> {
    layer.check_input(input)?;
    let a = &layer.attrs;
    if a.mode != ConvMode::Depthwise || a.kernel != 3 || a.dilation != 1 {
        return Err(Error::InvalidOperand("DW engine runs undilated 3x3 depthwise convs only".into()));
    }
    let stage = OutputStage::new(layer, out_spec, relu)?;
    let od = layer.out_dims(input.dims());
    let c = od.channels;
    let mut out = vec![0i32; od.len()];
    let mut engine = DwEngine::new();
    let mut err = None;
    for c0 in (0..c).step_by(LANES) {
        let live = LANES.min(c - c0);
        engine.clear();
        for lane in 0..live {
            engine.load(lane, &layer.weights[(c0 + lane) * DW_TAPS..][..DW_TAPS]);
        }
        stream_group(input, c0, LANES, 3, a.stride, &mut |y, x, window| {
            if err.is_some() {
                return;
            }
            let acc = engine.step(window);
            for lane in 0..live {
                let bias = layer.bias.as_ref().map_or(0, |b| b[c0 + lane]);
                match stage.apply(acc[lane], bias) {
                    Ok(q) => out[od.index(y, x, c0 + lane)] = q,
                    Err(e) => err = Some(e),
                }
            }
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    QTensor::new(od, out_spec, out)
}

/// Weight matrix `[out][f]` cut into 32×32 blocks, indexed `[in group][out group]`.
struct BlockedMatrix {
    in_groups: usize,
    out_groups: usize,
    blocks: Vec<Vec<i32>>,
}

impl BlockedMatrix {
    fn new(rows: usize, cols: usize, w: &[i32]) -> Self {
        let in_groups = cols.div_ceil(LANES);
        let out_groups = rows.div_ceil(LANES);
        let mut blocks = Vec::with_capacity(in_groups * out_groups);
        for ig in 0..in_groups {
            for og in 0..out_groups {
                let mut b = vec![0i32; LANES * LANES];
                for o in 0..LANES.min(rows - og * LANES) {
                    for i in 0..LANES.min(cols - ig * LANES) {
                        b[o * LANES + i] = w[(og * LANES + o) * cols + ig * LANES + i];
                    }
                }
                blocks.push(b);
            }
        }
        Self { in_groups, out_groups, blocks }
    }
}

/// Runs padded vectors (length `in_groups * 32`) through the PW engine,
/// accumulating over input groups before the single output stage.
struct PwPipeline<'a> {
    matrix: BlockedMatrix,
    engines: Vec<PwEngine>,
    layer: &'a QConvLayer,
    stage: OutputStage,
}

impl<'a> PwPipeline<'a> {
    fn new(layer: &'a QConvLayer, cols: usize, out_spec: QuantSpec, relu: bool) -> Result<Self> {
        let matrix = BlockedMatrix::new(layer.attrs.out_channels, cols, &layer.weights);
        let engines = matrix
            .blocks
            .iter()
            .map(|b| {
                let mut e = PwEngine::new();
                e.load_block(b);
                e
            })
            .collect();
        Ok(Self { matrix, engines, layer, stage: OutputStage::new(layer, out_spec, relu)? })
    }

    fn run(&self, v: &[i32], out: &mut [i32]) -> Result<()> {
        let co = self.layer.attrs.out_channels;
        for og in 0..self.matrix.out_groups {
            let mut acc = [0i64; LANES];
            for ig in 0..self.matrix.in_groups {
                self.engines[ig * self.matrix.out_groups + og].step(&v[ig * LANES..][..LANES], &mut acc);
            }
            for (lane, &a) in acc.iter().enumerate().take(co - og * LANES) {
                let o = og * LANES + lane;
                let bias = self.layer.bias.as_ref().map_or(0, |b| b[o]);
                out[o] = self.stage.apply(a, bias)?;
            }
        }
        Ok(())
    }
}

/// Pointwise conv on the PW engine. Strided 1×1 convs sample the input grid.
pub fn pw_conv(input: &QTensor, layer: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<QTensor> {
    layer.check_input(input)?;
    let a = &layer.attrs;
    if a.kernel != 1 || a.dilation != 1 || a.mode == ConvMode::Depthwise {
        return Err(Error::InvalidOperand("PW engine runs 1x1 convs only".into()));
    }
    let d = input.dims();
    let od = layer.out_dims(d);
    let cin = layer.in_channels;
    let pipe = PwPipeline::new(layer, cin, out_spec, relu)?;
    let py = same_pad_before(d.height, a.stride, 1) as isize;
    let px = same_pad_before(d.width, a.stride, 1) as isize;
    let mut v = vec![0i32; pipe.matrix.in_groups * LANES];
    let mut out = vec![0i32; od.len()];
    for y in 0..od.height {
        for x in 0..od.width {
            let iy = (y * a.stride) as isize - py;
            let ix = (x * a.stride) as isize - px;
            if iy >= 0 && ix >= 0 && (iy as usize) < d.height && (ix as usize) < d.width {
                let base = d.index(iy as usize, ix as usize, 0);
                v[..cin].copy_from_slice(&input.data()[base..base + cin]);
            } else {
                v[..cin].fill(0);
            }
            let o = od.index(y, x, 0);
            pipe.run(&v, &mut out[o..o + od.channels])?;
        }
    }
    QTensor::new(od, out_spec, out)
}

/// Standard K×K conv: line-buffer windows over all input channels are
/// flattened `[ky][kx][c]`, zero-padded to whole 32-lane groups, and pushed
/// through the PW engine.
pub fn std_conv(input: &QTensor, layer: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<QTensor> {
    layer.check_input(input)?;
    let a = &layer.attrs;
    if a.mode != ConvMode::Standard || a.dilation != 1 {
        return Err(Error::InvalidOperand("flattened path runs undilated standard convs only".into()));
    }
    let cin = layer.in_channels;
    let flat = a.kernel * a.kernel * cin;
    let pipe = PwPipeline::new(layer, flat, out_spec, relu)?;
    let od = layer.out_dims(input.dims());
    let mut v = vec![0i32; pipe.matrix.in_groups * LANES];
    let mut out = vec![0i32; od.len()];
    let mut err = None;
    stream_group(input, 0, cin, a.kernel, a.stride, &mut |y, x, window| {
        if err.is_some() {
            return;
        }
        v[..flat].copy_from_slice(window);
        let o = od.index(y, x, 0);
        if let Err(e) = pipe.run(&v, &mut out[o..o + od.channels]) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    QTensor::new(od, out_spec, out)
}

/// Routes a conv to the engine that implements it.
pub fn conv(input: &QTensor, layer: &QConvLayer, out_spec: QuantSpec, relu: bool) -> Result<QTensor> {
    match layer.attrs.mode {
        ConvMode::Depthwise => dw_conv(input, layer, out_spec, relu),
        ConvMode::Pointwise => pw_conv(input, layer, out_spec, relu),
        ConvMode::Standard if layer.attrs.kernel == 1 => pw_conv(input, layer, out_spec, relu),
        ConvMode::Standard => std_conv(input, layer, out_spec, relu),
    }
}
