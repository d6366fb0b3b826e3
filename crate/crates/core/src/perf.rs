//! Analytic cost model: tiling, buffer residency, cycles, throughput, and
//! DSP/BRAM estimates.

use num_rational::Ratio;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{ConvMode, LayerKind, NetworkGraph, ShapeMap};
use crate::quant::BitWidth;
use crate::tensor::Dims;
use crate::transforms::count_with_shapes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HardwareConfig {
    pub clock_hz: u64,
    pub lane_width: usize,
    pub dw_mults: usize,
    pub pw_mults: usize,
    pub buffer_count: usize,
    pub buffer_dims: Dims,
    pub bus_bytes_per_cycle: u64,
    pub int8_mults_per_dsp: usize,
    pub int16_mults_per_dsp: usize,
    pub bram_bits_per_block: u64,
    /// DSPs spent outside the multiplier arrays.
    pub dsp_overhead: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            clock_hz: 250_000_000,
            lane_width: 32,
            dw_mults: 32 * 9,
            pw_mults: 32 * 32,
            buffer_count: 8,
            buffer_dims: Dims::new(35, 120, 32),
            bus_bytes_per_cycle: 16,
            int8_mults_per_dsp: 2,
            int16_mults_per_dsp: 1,
            bram_bits_per_block: 36_864,
            dsp_overhead: 0,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.clock_hz,
            self.lane_width as u64,
            self.dw_mults as u64,
            self.pw_mults as u64,
            self.buffer_count as u64,
            self.bus_bytes_per_cycle,
            self.int8_mults_per_dsp as u64,
            self.int16_mults_per_dsp as u64,
            self.bram_bits_per_block,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("hardware parameters must be positive".into()));
        }
        self.buffer_dims.validate()?;
        if self.buffer_dims.channels != self.lane_width {
            return Err(Error::InvalidConfig("buffer channel depth must equal the lane width".into()));
        }
        if self.buffer_count < 3 {
            return Err(Error::InvalidConfig("need at least 3 buffers (two ping-pong plus one resident)".into()));
        }
        Ok(())
    }

    fn mults_per_dsp(&self, bw: BitWidth) -> usize {
        match bw {
            BitWidth::W8 => self.int8_mults_per_dsp,
            BitWidth::W16 => self.int16_mults_per_dsp,
        }
    }
}

/// On-chip words for a W×H×C tile with a K×K halo: `(W+K-1)(H+K-1)C`.
pub fn buffer_words(w: usize, h: usize, k: usize, c: usize) -> u64 {
    ((w + k - 1) * (h + k - 1) * c) as u64
}

fn tiles_for(d: Dims, hw: &HardwareConfig) -> u64 {
    let b = hw.buffer_dims;
    (d.height.div_ceil(b.height) * d.width.div_ceil(b.width) * d.channels.div_ceil(b.channels)) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorTiles {
    pub dims: Dims,
    pub tiles: u64,
    /// Step that writes it; `None` for host-produced tensors.
    pub produced_at: Option<usize>,
    /// Small enough to sit in `buffer_count - 2` buffers.
    pub fits: bool,
    /// Handed back to the host, so always written out.
    pub to_host: bool,
    /// Never touches DDR: fits and is read only by the following step.
    pub resident: bool,
    /// Produced on the host (graph inputs and input-side resizes).
    pub host: bool,
}

/// Execution order and buffer residency of every stored tensor.
///
/// A ReLU fused into its producing conv is written at the conv's step and
/// the conv result itself is never stored. A concat is an alias for its
/// parts and occupies no storage of its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TileSchedule {
    /// Device nodes in execution order; fused ReLUs and concats excluded.
    pub order: Vec<String>,
    /// Stored tensors only.
    pub tensors: BTreeMap<String, TensorTiles>,
    /// Logical value -> stored tensors holding it.
    pub storage: BTreeMap<String, Vec<String>>,
    /// ReLUs folded into the output stage of their conv.
    pub fused: BTreeSet<String>,
    /// Resizes of device results done on the host.
    pub host_outputs: BTreeSet<String>,
    pub buffer_count: usize,
}

impl TileSchedule {
    pub fn spilled(&self) -> impl Iterator<Item = (&str, &TensorTiles)> {
        self.tensors.iter().filter(|(_, t)| !t.resident && !t.host).map(|(n, t)| (n.as_str(), t))
    }

    /// Whether step `step` reads stored tensor `name` straight from a buffer.
    pub fn on_chip(&self, name: &str, step: usize) -> bool {
        let t = &self.tensors[name];
        t.fits && !t.to_host && t.produced_at.is_some_and(|p| p + 1 == step)
    }

    /// Stored tensor written when `node` runs, if any.
    pub fn written_by(&self, node: &str) -> Option<&str> {
        match self.storage.get(node)?.as_slice() {
            [one] if self.tensors.contains_key(one) && !self.tensors[one].host => Some(one.as_str()),
            _ => None,
        }
    }
}

/// ReLUs whose input is a conv feeding nothing else.
pub fn fused_relus(g: &NetworkGraph) -> BTreeSet<String> {
    g.nodes()
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::ReLU))
        .filter(|n| {
            g.node(&n.inputs[0]).is_some_and(|p| matches!(p.kind, LayerKind::Conv2D(_)))
                && g.consumers(&n.inputs[0]).len() == 1
                && !g.outputs().contains(&n.inputs[0])
        })
        .map(|n| n.name.clone())
        .collect()
}

/// Partitions every map into buffer-sized tiles and decides residency.
///
/// A map that fits in `buffer_count - 2` buffers (two are kept for ping-pong
/// streaming) is handed to the very next step on chip. It is also written to
/// DDR whenever any other step reads it. Graph inputs, host resizes, and
/// anything handed back to the host always go through DDR.
pub fn tile_plan(g: &NetworkGraph, shapes: &ShapeMap, hw: &HardwareConfig) -> Result<TileSchedule> {
    hw.validate()?;
    let mut host: BTreeSet<String> = g.inputs().iter().map(|i| i.name.clone()).collect();
    let mut host_outputs = BTreeSet::new();
    for n in g.nodes() {
        if let LayerKind::BilinearResize { .. } = n.kind {
            if g.is_input(&n.inputs[0]) {
                host.insert(n.name.clone());
            } else if g.outputs().contains(&n.name) && g.consumers(&n.name).is_empty() {
                host_outputs.insert(n.name.clone());
            }
        }
    }
    let fused = fused_relus(g);
    let fused_by: BTreeMap<&str, &str> =
        fused.iter().map(|r| (g.node(r).expect("fused relu exists").inputs[0].as_str(), r.as_str())).collect();

    let mut storage: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for h in &host {
        storage.insert(h.clone(), vec![h.clone()]);
    }
    let mut order = Vec::new();
    for n in g.topo_order()? {
        if host.contains(&n.name) || host_outputs.contains(&n.name) {
            continue;
        }
        let stored = match n.kind {
            LayerKind::Concat => n.inputs.iter().flat_map(|i| storage[i].clone()).collect(),
            _ if fused.contains(&n.name) => vec![n.name.clone()],
            _ => vec![fused_by.get(n.name.as_str()).map_or(n.name.clone(), |r| r.to_string())],
        };
        storage.insert(n.name.clone(), stored);
        if !fused.contains(&n.name) && !matches!(n.kind, LayerKind::Concat) {
            order.push(n.name.clone());
        }
    }

    let mut forced: BTreeSet<&str> = BTreeSet::new();
    for o in g.outputs().iter().filter(|o| !host_outputs.contains(*o)) {
        forced.extend(storage[o].iter().map(String::as_str));
    }
    for h in &host_outputs {
        let src = &g.node(h).expect("host output node").inputs[0];
        forced.extend(storage[src].iter().map(String::as_str));
    }

    let mut produced: BTreeMap<&str, usize> = BTreeMap::new();
    let mut readers: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (i, name) in order.iter().enumerate() {
        if let [one] = storage[name].as_slice() {
            produced.insert(one, i);
        }
        for inp in &g.node(name).expect("ordered node exists").inputs {
            for s in &storage[inp] {
                readers.entry(s).or_default().insert(i);
            }
        }
    }
    let budget = (hw.buffer_count - 2) as u64;
    let mut tensors = BTreeMap::new();
    for name in host.iter().map(String::as_str).chain(produced.keys().copied()) {
        let dims = shapes.get(name).copied().ok_or_else(|| Error::MissingInput(name.to_string()))?;
        let tiles = tiles_for(dims, hw);
        let produced_at = produced.get(name).copied();
        let to_host = forced.contains(name);
        let fits = produced_at.is_some() && tiles <= budget;
        let resident = fits
            && !to_host
            && readers.get(name).is_some_and(|r| r.len() == 1 && r.contains(&(produced_at.unwrap() + 1)));
        tensors.insert(
            name.to_string(),
            TensorTiles { dims, tiles, produced_at, fits, to_host, resident, host: host.contains(name) },
        );
    }
    Ok(TileSchedule { order, tensors, storage, fused, host_outputs, buffer_count: hw.buffer_count })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: String,
    pub compute: u64,
    pub transfer: u64,
    pub effective: u64,
    pub ddr_bytes: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub clock_hz: u64,
    pub bit_width: BitWidth,
    pub total_cycles: u64,
    pub macs: u64,
    pub ddr_bytes: u64,
    pub dsp: u64,
    pub bram: u64,
}

/// Exact decimal rendering of a non-negative rational, rounded half up.
pub fn format_ratio(r: Ratio<u128>, places: u32) -> String {
    let scale = 10u128.pow(places);
    let scaled = (r * scale + Ratio::new(1, 2)).floor().to_integer();
    if places == 0 {
        return scaled.to_string();
    }
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = places as usize)
}

impl CostReport {
    pub fn compute_cycles(&self) -> u64 {
        self.layers.iter().map(|l| l.compute).sum()
    }

    pub fn transfer_cycles(&self) -> u64 {
        self.layers.iter().map(|l| l.transfer).sum()
    }

    /// `clock_hz / total_cycles`, exact.
    pub fn fps(&self) -> Ratio<u128> {
        Ratio::new(self.clock_hz as u128, self.total_cycles.max(1) as u128)
    }

    /// `2 * MACs * fps / 1e9`, exact.
    pub fn gops(&self) -> Ratio<u128> {
        self.fps() * (2 * self.macs as u128) / 1_000_000_000u128
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cost model: one group-pixel per cycle per engine; ops = 2 x MACs");
        let w = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            out,
            "{:<w$}  {:<14}  {:>10}  {:>10}  {:>10}  {:>12}  {:>12}",
            "layer", "kind", "compute", "transfer", "effective", "ddr_bytes", "macs"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<w$}  {:<14}  {:>10}  {:>10}  {:>10}  {:>12}  {:>12}",
                l.layer, l.kind, l.compute, l.transfer, l.effective, l.ddr_bytes, l.macs
            );
        }
        let _ = writeln!(out, "total cycles   {}", self.total_cycles);
        let _ = writeln!(out, "compute cycles {}", self.compute_cycles());
        let _ = writeln!(out, "transfer cyc.  {}", self.transfer_cycles());
        let _ = writeln!(out, "MACs/frame     {}", self.macs);
        let _ = writeln!(out, "DDR bytes      {}", self.ddr_bytes);
        let _ = writeln!(out, "fps            {} @ {} Hz", format_ratio(self.fps(), 1), self.clock_hz);
        let _ = writeln!(out, "GOPS           {}", format_ratio(self.gops(), 1));
        let _ = writeln!(out, "DSP            {} ({})", self.dsp, self.bit_width);
        let _ = writeln!(out, "BRAM           {} ({})", self.bram, self.bit_width);
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "layers": self.layers,
            "clock_hz": self.clock_hz,
            "bit_width": self.bit_width,
            "total_cycles": self.total_cycles,
            "compute_cycles": self.compute_cycles(),
            "transfer_cycles": self.transfer_cycles(),
            "macs": self.macs,
            "ddr_bytes": self.ddr_bytes,
            "fps": format_ratio(self.fps(), 1),
            "gops": format_ratio(self.gops(), 1),
            "dsp": self.dsp,
            "bram": self.bram,
        })
    }
}

fn groups(c: usize, lanes: usize) -> u64 {
    c.div_ceil(lanes) as u64
}

/// Cycle, traffic, and throughput estimate for `g` under `plan`.
pub fn estimate_cycles(
    g: &NetworkGraph,
    shapes: &ShapeMap,
    plan: &TileSchedule,
    hw: &HardwareConfig,
    bit_width: BitWidth,
) -> Result<CostReport> {
    hw.validate()?;
    let lanes = hw.lane_width;
    let value_bytes = (bit_width.bits() / 8) as u64;
    let counts = count_with_shapes(g, shapes);
    let mut layers = Vec::with_capacity(plan.order.len());
    for (step, name) in plan.order.iter().enumerate() {
        let n = g.node(name).expect("planned node exists");
        let out = shapes[name];
        let input = shapes[&n.inputs[0]];
        let pixels = out.pixels() as u64;
        let compute = match &n.kind {
            LayerKind::Conv2D(a) => {
                let fill = |k: usize| {
                    let w_tile = input.width.min(hw.buffer_dims.width);
                    tiles_for(input, hw) * ((k - 1) * w_tile + k) as u64
                };
                match a.mode {
                    ConvMode::Depthwise => pixels * groups(out.channels, lanes) + fill(a.effective_kernel()),
                    ConvMode::Pointwise => pixels * groups(input.channels, lanes) * groups(out.channels, lanes),
                    ConvMode::Standard if a.kernel == 1 => {
                        pixels * groups(input.channels, lanes) * groups(out.channels, lanes)
                    }
                    ConvMode::Standard => {
                        pixels * groups(a.kernel * a.kernel * input.channels, lanes) * groups(out.channels, lanes)
                            + fill(a.effective_kernel())
                    }
                }
            }
            LayerKind::Concat => 0,
            LayerKind::GlobalAvgPool => input.pixels() as u64 * groups(input.channels, lanes),
            _ => pixels * groups(out.channels, lanes),
        };
        let mut bytes = 0u64;
        for inp in &n.inputs {
            for s in &plan.storage[inp] {
                let t = &plan.tensors[s];
                if !plan.on_chip(s, step) {
                    bytes += t.dims.len() as u64 * value_bytes;
                }
            }
        }
        if let Some(w) = plan.written_by(name) {
            if !plan.tensors[w].resident {
                bytes += plan.tensors[w].dims.len() as u64 * value_bytes;
            }
        }
        let row = counts.get(name);
        bytes += row.map_or(0, |r| r.params) * value_bytes;
        let transfer = bytes.div_ceil(hw.bus_bytes_per_cycle);
        layers.push(LayerCost {
            layer: name.clone(),
            kind: n.kind.name().to_string(),
            compute,
            transfer,
            effective: compute.max(transfer),
            ddr_bytes: bytes,
            macs: row.map_or(0, |r| r.macs),
        });
    }
    let params = counts.total_params();
    let (dsp, bram) = resource_estimate(hw, bit_width, params);
    Ok(CostReport {
        total_cycles: layers.iter().map(|l| l.effective).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        ddr_bytes: layers.iter().map(|l| l.ddr_bytes).sum(),
        layers,
        clock_hz: hw.clock_hz,
        bit_width,
        dsp,
        bram,
    })
}

/// Shape inference, tiling, and cycle estimate in one call.
pub fn estimate(g: &NetworkGraph, hw: &HardwareConfig, bit_width: BitWidth) -> Result<CostReport> {
    let shapes = g.infer_shapes()?;
    let plan = tile_plan(g, &shapes, hw)?;
    estimate_cycles(g, &shapes, &plan, hw, bit_width)
}

/// Weight-store blocks for `params` values.
pub fn weight_bram_blocks(params: u64, bit_width: BitWidth, hw: &HardwareConfig) -> u64 {
    (params * bit_width.bits() as u64).div_ceil(hw.bram_bits_per_block)
}

/// `(dsp, bram)`: packed multipliers plus overhead, and feature-map buffers
/// plus the weight store.
pub fn resource_estimate(hw: &HardwareConfig, bit_width: BitWidth, params: u64) -> (u64, u64) {
    let mults = hw.dw_mults + hw.pw_mults;
    let dsp = mults.div_ceil(hw.mults_per_dsp(bit_width)) as u64 + hw.dsp_overhead as u64;
    let b = hw.buffer_dims;
    let fmap_bits = hw.buffer_count as u64 * buffer_words(b.width, b.height, 3, b.channels) * bit_width.bits() as u64;
    let bram = fmap_bits.div_ceil(hw.bram_bits_per_block) + weight_bram_blocks(params, bit_width, hw);
    (dsp, bram)
}
