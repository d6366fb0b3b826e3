//! Symmetric power-of-two fixed-point quantization.
//!
//! A stored integer `q` with scale exponent `e` represents `q * 2^e`. The zero
//! point is always 0, so every rescale between formats is a pure shift.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

pub const MIN_SCALE_EXP: i32 = -24;
pub const MAX_SCALE_EXP: i32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitWidth {
    #[serde(rename = "int8")]
    W8,
    #[serde(rename = "int16")]
    W16,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::W8 => 8,
            BitWidth::W16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitWidth::W8),
            16 => Ok(BitWidth::W16),
            other => Err(Error::UnsupportedBitWidth(other)),
        }
    }

    /// Accumulator width of the multiply-accumulate datapath for this operand
    /// width. INT8 products accumulate in 32 bits; INT16 products need the
    /// 48-bit DSP accumulator.
    pub fn accumulator_bits(self) -> u32 {
        match self {
            BitWidth::W8 => 32,
            BitWidth::W16 => 48,
        }
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "int{}", self.bits())
    }
}

/// Per-tensor quantization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_width: BitWidth,
    pub scale_exp: i32,
    /// Unsigned formats hold `[0, 2^bits - 1]`; only the sigmoid table output
    /// uses one.
    #[serde(default)]
    pub unsigned: bool,
}

impl QuantSpec {
    pub fn new(bit_width: BitWidth, scale_exp: i32) -> Result<Self> {
        let spec = Self { bit_width, scale_exp, unsigned: false };
        spec.validate()?;
        Ok(spec)
    }

    /// UINT8 probability format produced by the sigmoid table (scale 2^-8).
    pub const fn probability() -> Self {
        Self { bit_width: BitWidth::W8, scale_exp: -8, unsigned: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_SCALE_EXP..=MAX_SCALE_EXP).contains(&self.scale_exp) {
            return Err(Error::ScaleExpOutOfRange(self.scale_exp));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        if self.unsigned {
            0
        } else {
            -(1 << (self.bit_width.bits() - 1))
        }
    }

    pub fn qmax(&self) -> i32 {
        if self.unsigned {
            (1 << self.bit_width.bits()) - 1
        } else {
            (1 << (self.bit_width.bits() - 1)) - 1
        }
    }

    pub fn step(&self) -> f64 {
        pow2(self.scale_exp)
    }

    #[inline]
    pub fn saturate(&self, v: i64) -> i32 {
        v.clamp(self.qmin() as i64, self.qmax() as i64) as i32
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        let scaled = x as f64 * pow2(-self.scale_exp);
        // `as` saturates and maps NaN to 0.
        self.saturate(scaled.round() as i64)
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        (q as f64 * self.step()) as f32
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.unsigned { "u" } else { "" };
        write!(f, "{sign}{}@2^{}", self.bit_width, self.scale_exp)
    }
}

#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Integer feature map with a shared quantization format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    dims: Dims,
    spec: QuantSpec,
    data: Vec<i32>,
}

impl QTensor {
    pub fn new(dims: Dims, spec: QuantSpec, data: Vec<i32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::DataLength { expected: dims.len(), actual: data.len() });
        }
        if let Some(&v) = data.iter().find(|&&v| v < spec.qmin() || v > spec.qmax()) {
            return Err(Error::OutOfRange { value: v as i64, spec });
        }
        Ok(Self { dims, spec, data })
    }

    pub fn zeros(dims: Dims, spec: QuantSpec) -> Self {
        Self { dims, spec, data: vec![0; dims.len()] }
    }

    pub(crate) fn from_raw(dims: Dims, spec: QuantSpec, data: Vec<i32>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self { dims, spec, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> i32 {
        self.data[self.dims.index(y, x, c)]
    }
}

/// Wide integer lattice holding raw sums of products before requantization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulator {
    pub dims: Dims,
    pub data: Vec<i64>,
}

/// Checks an accumulator value against the datapath width for `bw` operands.
#[inline]
pub fn check_accumulator(v: i64, bw: BitWidth) -> Result<i64> {
    let bits = bw.accumulator_bits();
    let limit = 1i64 << (bits - 1);
    if v >= limit || v < -limit {
        return Err(Error::AccumulatorOverflow { value: v, bits });
    }
    Ok(v)
}

/// Largest-resolution format under which no element of `t` saturates.
///
/// Picks the smallest exponent `e` in `[-24, 8]` with `max|t| / 2^e <= qmax`.
/// An all-zero tensor maps to `e = 0`.
pub fn calibrate(t: &Tensor, bit_width: BitWidth) -> Result<QuantSpec> {
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(calibrate_max_abs(t.max_abs(), bit_width))
}

pub fn calibrate_max_abs(max_abs: f32, bit_width: BitWidth) -> QuantSpec {
    let qmax = ((1i64 << (bit_width.bits() - 1)) - 1) as f64;
    let scale_exp = if max_abs == 0.0 {
        0
    } else {
        (MIN_SCALE_EXP..=MAX_SCALE_EXP).find(|&e| max_abs as f64 * pow2(-e) <= qmax).unwrap_or(MAX_SCALE_EXP)
    };
    QuantSpec { bit_width, scale_exp, unsigned: false }
}

pub fn quantize(t: &Tensor, spec: QuantSpec) -> QTensor {
    let data = t.data().iter().map(|&x| spec.quantize_value(x)).collect();
    QTensor::from_raw(t.dims(), spec, data)
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let spec = q.spec();
    let data = q.data().iter().map(|&v| spec.dequantize_value(v)).collect();
    Tensor::new(q.dims(), data).expect("dims already validated")
}

/// `v / 2^shift` rounded half away from zero.
#[inline]
pub fn round_shift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    if shift >= 64 {
        return 0;
    }
    let v = v as i128;
    let half = 1i128 << (shift - 1);
    let r = if v >= 0 { (v + half) >> shift } else { -((-v + half) >> shift) };
    r as i64
}

/// `num / den` rounded half away from zero, `den > 0`.
#[inline]
pub fn round_div(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let (n, d) = (num as i128, den as i128);
    let r = if n >= 0 { (2 * n + d) / (2 * d) } else { -((-2 * n + d) / (2 * d)) };
    r as i64
}

/// Shift that maps an accumulator at scale `in + w` onto `out`.
pub fn requant_shift(in_spec: QuantSpec, w_spec: QuantSpec, out_spec: QuantSpec) -> Result<u32> {
    let shift = out_spec.scale_exp - in_spec.scale_exp - w_spec.scale_exp;
    u32::try_from(shift).map_err(|_| Error::NegativeShift(shift))
}

pub fn requantize(acc: &Accumulator, in_spec: QuantSpec, w_spec: QuantSpec, out_spec: QuantSpec) -> Result<QTensor> {
    let shift = requant_shift(in_spec, w_spec, out_spec)?;
    let data = acc.data.iter().map(|&a| out_spec.saturate(round_shift(a, shift))).collect();
    Ok(QTensor::from_raw(acc.dims, out_spec, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f32]) -> Tensor {
        Tensor::new(Dims::new(1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn spec8(e: i32) -> QuantSpec {
        QuantSpec::new(BitWidth::W8, e).unwrap()
    }

    /// Scans every exponent and keeps the smallest one that does not saturate.
    fn calibrate_scan(max_abs: f64, bits: u32) -> i32 {
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let mut best = None;
        for e in (MIN_SCALE_EXP..=MAX_SCALE_EXP).rev() {
            if max_abs / 2f64.powi(e) <= qmax {
                best = Some(e);
            }
        }
        best.unwrap_or(MAX_SCALE_EXP)
    }

    #[test]
    fn calibrate_examples() {
        assert_eq!(calibrate_scan(0.5, 8), -7);
        assert_eq!(calibrate(&t1(&[0.25, -0.5]), BitWidth::W8).unwrap().scale_exp, -7);
        assert_eq!(calibrate(&t1(&[0.0, 0.0]), BitWidth::W8).unwrap().scale_exp, 0);
        assert_eq!(calibrate(&t1(&[127.0]), BitWidth::W8).unwrap().scale_exp, 0);
        assert_eq!(calibrate(&t1(&[127.5]), BitWidth::W8).unwrap().scale_exp, 1);
        assert_eq!(calibrate(&t1(&[0.5]), BitWidth::W16).unwrap().scale_exp, calibrate_scan(0.5, 16));
    }

    #[test]
    fn calibrate_rejects_non_finite() {
        assert!(matches!(calibrate(&t1(&[1.0, f32::NAN]), BitWidth::W8), Err(Error::NonFinite)));
        assert!(matches!(calibrate(&t1(&[f32::INFINITY]), BitWidth::W8), Err(Error::NonFinite)));
    }

    #[test]
    fn calibrate_clamps_huge_values_to_max_exp() {
        let spec = calibrate(&t1(&[1.0e9]), BitWidth::W8).unwrap();
        assert_eq!(spec.scale_exp, MAX_SCALE_EXP);
    }

    #[test]
    fn quantize_examples() {
        let s = spec8(-5);
        assert_eq!(s.quantize_value(0.5), 16);
        assert_eq!(s.quantize_value(10.0), 127);
        assert_eq!(s.quantize_value(-10.0), -128);
        assert_eq!(s.quantize_value(-0.046875), -2);
        assert_eq!(s.quantize_value(0.046875), 2);
    }

    #[test]
    fn dequantize_examples() {
        let q = QTensor::new(Dims::new(1, 3, 1), spec8(-5), vec![16, 0, -3]).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.5, 0.0, -0.09375]);
        let q = QTensor::new(Dims::new(1, 1, 1), spec8(0), vec![-128]).unwrap();
        assert_eq!(dequantize(&q).data(), &[-128.0]);
    }

    #[test]
    fn qtensor_rejects_out_of_range() {
        let err = QTensor::new(Dims::new(1, 1, 1), spec8(0), vec![128]).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { value: 128, .. }));
        assert!(QTensor::new(Dims::new(1, 1, 1), QuantSpec::probability(), vec![255]).is_ok());
    }

    #[test]
    fn requantize_examples() {
        let acc = Accumulator { dims: Dims::new(1, 4, 1), data: vec![640, 48, 1 << 20, -48] };
        let out = requantize(&acc, spec8(-5), spec8(-5), spec8(-5)).unwrap();
        assert_eq!(out.data(), &[20, 2, 127, -2]);
    }

    #[test]
    fn requantize_rejects_negative_shift() {
        let acc = Accumulator { dims: Dims::new(1, 1, 1), data: vec![1] };
        let err = requantize(&acc, spec8(-2), spec8(-2), spec8(-5)).unwrap_err();
        assert!(matches!(err, Error::NegativeShift(-1)));
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_shift(3, 1), 2);
        assert_eq!(round_shift(-3, 1), -2);
        assert_eq!(round_shift(5, 2), 1);
        assert_eq!(round_shift(6, 2), 2);
        assert_eq!(round_div(5, 2), 3);
        assert_eq!(round_div(-5, 2), -3);
        assert_eq!(round_div(7, 3), 2);
        assert_eq!(round_div(-8, 3), -3);
    }

    #[test]
    fn accumulator_width_check() {
        assert!(check_accumulator(i32::MAX as i64, BitWidth::W8).is_ok());
        assert!(check_accumulator(i32::MAX as i64 + 1, BitWidth::W8).is_err());
        assert!(check_accumulator(i32::MAX as i64 + 1, BitWidth::W16).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_error_bounded(e in -12i32..4, frac in -1.0f64..1.0) {
                let s = spec8(e);
                let x = (frac * 127.0 * 2f64.powi(e)) as f32;
                let back = s.dequantize_value(s.quantize_value(x));
                prop_assert!(((back - x).abs() as f64) <= 2f64.powi(e - 1) + 1e-12);
            }

            #[test]
            fn requantize_of_dequantized_is_identity(e in -20i32..8, q in -128i32..=127) {
                let s = spec8(e);
                prop_assert_eq!(s.quantize_value(s.dequantize_value(q)), q);
            }

            #[test]
            fn calibrated_spec_never_saturates(values in prop::collection::vec(-1000.0f32..1000.0, 1..64)) {
                let t = t1(&values);
                let spec = calibrate(&t, BitWidth::W8).unwrap();
                for &v in &values {
                    let q = spec.quantize_value(v) as f64;
                    prop_assert!(q.abs() <= 127.0);
                    prop_assert!((v as f64 * 2f64.powi(-spec.scale_exp)).abs() <= 127.0);
                }
            }

            #[test]
            fn quantize_is_monotone(a in -10.0f32..10.0, b in -10.0f32..10.0, e in -10i32..2) {
                let s = spec8(e);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(s.quantize_value(lo) <= s.quantize_value(hi));
            }

            #[test]
            fn round_shift_matches_float(v in -1_000_000i64..1_000_000, shift in 0u32..16) {
                let exact = v as f64 / 2f64.powi(shift as i32);
                prop_assert_eq!(round_shift(v, shift), exact.round() as i64);
            }
        }
    }
}
