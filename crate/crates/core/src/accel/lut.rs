//! 256-entry sigmoid table.

use crate::float_exec::sigmoid_scalar;
use crate::quant::{round_shift, QTensor, QuantSpec};

pub const LUT_SIZE: usize = 256;
/// Table inputs cover `[-8, 8)` in steps of 1/16.
pub const LUT_MIN: f64 = -8.0;
pub const LUT_STEP_LOG2: i32 = -4;

/// Entry `i` holds `round(256 * sigmoid(-8 + i/16))`, capped at 255, so the
/// output is a UINT8 probability at scale 2^-8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigmoidLut {
    table: [u8; LUT_SIZE],
}

impl Default for SigmoidLut {
    fn default() -> Self {
        Self::new()
    }
}

impl SigmoidLut {
    pub fn new() -> Self {
        let mut table = [0u8; LUT_SIZE];
        for (i, e) in table.iter_mut().enumerate() {
            let p = 1.0 / (1.0 + (-Self::center(i)).exp());
            *e = (p * 256.0).round().min(255.0) as u8;
        }
        Self { table }
    }

    pub fn table(&self) -> &[u8; LUT_SIZE] {
        &self.table
    }

    /// Input value at the centre of bin `i`.
    pub fn center(i: usize) -> f64 {
        LUT_MIN + i as f64 / 16.0
    }

    /// Bin of the fixed-point value `q * 2^scale_exp`: `round((x + 8) * 16)`
    /// computed with shifts only, clamped to the table.
    #[inline]
    pub fn index(q: i32, scale_exp: i32) -> usize {
        let shift = scale_exp - LUT_STEP_LOG2;
        let steps = if shift >= 0 { (q as i64) << shift.min(40) } else { round_shift(q as i64, (-shift) as u32) };
        (steps + 128).clamp(0, LUT_SIZE as i64 - 1) as usize
    }

    #[inline]
    pub fn lookup(&self, q: i32, scale_exp: i32) -> i32 {
        self.table[Self::index(q, scale_exp)] as i32
    }

    /// Applies the table element-wise; the result uses the probability format.
    pub fn apply(&self, t: &QTensor) -> QTensor {
        let e = t.spec().scale_exp;
        let data = t.data().iter().map(|&q| self.lookup(q, e)).collect();
        QTensor::new(t.dims(), QuantSpec::probability(), data).expect("table entries fit UINT8")
    }

    /// Largest deviation from the exact sigmoid over the bin centres.
    pub fn max_center_error(&self) -> f64 {
        (0..LUT_SIZE)
            .map(|i| (self.table[i] as f64 / 256.0 - sigmoid_scalar(Self::center(i) as f32) as f64).abs())
            .fold(0.0, f64::max)
    }
}

pub fn sigmoid_lut(q: i32, spec: QuantSpec) -> i32 {
    SigmoidLut::new().lookup(q, spec.scale_exp)
}
