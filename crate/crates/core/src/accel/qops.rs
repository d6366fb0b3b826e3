//! Integer auxiliary layers: pooling, element-wise add/multiply, concat, ReLU.

use crate::error::{Error, Result};
use crate::quant::{round_div, round_shift, QTensor, QuantSpec};
use crate::tensor::Dims;

/// Shift that moves a value at `from` onto the coarser-or-equal scale `to`.
fn down_shift(from: i32, to: i32) -> Result<u32> {
    u32::try_from(to - from).map_err(|_| Error::NegativeShift(to - from))
}

pub fn relu_q(t: &QTensor) -> QTensor {
    let data = t.data().iter().map(|&v| v.max(0)).collect();
    QTensor::new(t.dims(), t.spec(), data).expect("clamping keeps values in range")
}

/// Mean over H×W per channel: integer sum, then one rounding on the way to
/// `out_spec`.
pub fn global_avg_pool_q(t: &QTensor, out_spec: QuantSpec) -> Result<QTensor> {
    let d = t.dims();
    let n = d.pixels() as i64;
    let diff = t.spec().scale_exp - out_spec.scale_exp;
    let mut sums = vec![0i64; d.channels];
    for (i, &v) in t.data().iter().enumerate() {
        sums[i % d.channels] += v as i64;
    }
    let data = sums
        .into_iter()
        .map(|s| {
            let v = if diff >= 0 { round_div(s << diff, n) } else { round_div(s, n << -diff) };
            out_spec.saturate(v)
        })
        .collect();
    QTensor::new(Dims::new(1, 1, d.channels), out_spec, data)
}

/// Aligns both operands to the finer scale, adds, then shifts to `out_spec`.
pub fn elem_add_q(a: &QTensor, b: &QTensor, out_spec: QuantSpec) -> Result<QTensor> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidOperand(format!("ElemAdd operands {} and {}", a.dims(), b.dims())));
    }
    let (ea, eb) = (a.spec().scale_exp, b.spec().scale_exp);
    let fine = ea.min(eb);
    let shift = down_shift(fine, out_spec.scale_exp)?;
    let (la, lb) = ((ea - fine) as u32, (eb - fine) as u32);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| out_spec.saturate(round_shift(((x as i64) << la) + ((y as i64) << lb), shift)))
        .collect();
    QTensor::new(a.dims(), out_spec, data)
}

/// Product at scale `e_a + e_b`, shifted to `out_spec`. A 1×1×C operand is
/// broadcast over the other's H×W.
pub fn elem_mul_q(a: &QTensor, b: &QTensor, out_spec: QuantSpec) -> Result<QTensor> {
    let (da, db) = (a.dims(), b.dims());
    let vector = |d: Dims| d.height == 1 && d.width == 1;
    let (big, small) = if da == db || (vector(db) && da.channels == db.channels) {
        (a, b)
    } else if vector(da) && da.channels == db.channels {
        (b, a)
    } else {
        return Err(Error::InvalidOperand(format!("ElemMul operands {da} and {db} do not broadcast")));
    };
    let shift = down_shift(a.spec().scale_exp + b.spec().scale_exp, out_spec.scale_exp)?;
    let c = big.dims().channels;
    let broadcast = small.dims() != big.dims();
    let data = big
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = if broadcast { small.data()[i % c] } else { small.data()[i] };
            out_spec.saturate(round_shift(x as i64 * y as i64, shift))
        })
        .collect();
    QTensor::new(big.dims(), out_spec, data)
}

/// Channel concatenation; each part is shifted onto `out_spec`, which must
/// be at least as coarse as every part.
pub fn concat_q(parts: &[&QTensor], out_spec: QuantSpec) -> Result<QTensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidOperand("concat of nothing".into()))?.dims();
    let mut channels = 0;
    let mut shifts = Vec::with_capacity(parts.len());
    for p in parts {
        let d = p.dims();
        if d.height != first.height || d.width != first.width {
            return Err(Error::InvalidOperand(format!("Concat operands {first} and {d}")));
        }
        channels += d.channels;
        shifts.push(down_shift(p.spec().scale_exp, out_spec.scale_exp)?);
    }
    let od = first.with_channels(channels);
    let mut data = Vec::with_capacity(od.len());
    for px in 0..first.pixels() {
        for (p, &s) in parts.iter().zip(&shifts) {
            let c = p.dims().channels;
            data.extend(p.data()[px * c..(px + 1) * c].iter().map(|&v| out_spec.saturate(round_shift(v as i64, s))));
        }
    }
    QTensor::new(od, out_spec, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize, BitWidth};
    use crate::tensor::Tensor;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn s8(e: i32) -> QuantSpec {
        QuantSpec::new(BitWidth::W8, e).unwrap()
    }

    fn q(dims: Dims, spec: QuantSpec, data: Vec<i32>) -> QTensor {
        QTensor::new(dims, spec, data).unwrap()
    }

    #[test]
    fn pool_rounds_once() {
        // Mean of 1, 2, 2, 2 is 1.75 -> 2 at the same scale.
        let t = q(Dims::new(2, 2, 1), s8(0), vec![1, 2, 2, 2]);
        assert_eq!(global_avg_pool_q(&t, s8(0)).unwrap().data(), &[2]);
        // Mean 1.75 at a finer output scale 2^-2 is exactly 7.
        assert_eq!(global_avg_pool_q(&t, s8(-2)).unwrap().data(), &[7]);
        let neg = q(Dims::new(1, 2, 1), s8(0), vec![-1, -2]);
        assert_eq!(global_avg_pool_q(&neg, s8(0)).unwrap().data(), &[-2]);
    }

    #[test]
    fn gate_at_top_entry_scales_by_255_over_256() {
        let x = q(Dims::new(2, 3, 2), s8(-4), vec![-128, -7, 0, 1, 100, 127, 3, -3, 64, -64, 5, 9]);
        let gate = q(Dims::new(1, 1, 2), QuantSpec::probability(), vec![255, 255]);
        let y = elem_mul_q(&x, &gate, s8(-4)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b as i64, round_div(*a as i64 * 255, 256));
        }
    }

    #[test]
    fn negative_shift_is_rejected() {
        let a = q(Dims::new(1, 1, 1), s8(-3), vec![1]);
        assert!(matches!(elem_mul_q(&a, &a, s8(-7)), Err(Error::NegativeShift(-1))));
        assert!(matches!(concat_q(&[&a], s8(-4)), Err(Error::NegativeShift(-1))));
    }

    /// Float oracle: dequantize, apply the op in f64, quantize once.
    fn oracle(values: impl Iterator<Item = f64>, spec: QuantSpec) -> Vec<i32> {
        values
            .map(|v| {
                let scaled = v * 2f64.powi(-spec.scale_exp);
                spec.saturate(scaled.round() as i64)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn add_and_mul_match_float_oracle(
            vals in proptest::collection::vec((-128i32..128, -128i32..128), 1..40),
            ea in -8i32..2, eb in -8i32..2, bump in 0i32..4,
        ) {
            let n = vals.len();
            let dims = Dims::new(1, n, 1);
            let a = q(dims, s8(ea), vals.iter().map(|v| v.0).collect());
            let b = q(dims, s8(eb), vals.iter().map(|v| v.1).collect());
            let fa = dequantize(&a);
            let fb = dequantize(&b);
            let add_spec = s8(ea.min(eb) + bump);
            let got = elem_add_q(&a, &b, add_spec).unwrap();
            let want = oracle(fa.data().iter().zip(fb.data()).map(|(x, y)| *x as f64 + *y as f64), add_spec);
            prop_assert_eq!(got.data(), &want[..]);
            let mul_spec = s8(ea + eb + bump);
            let got = elem_mul_q(&a, &b, mul_spec).unwrap();
            let want = oracle(fa.data().iter().zip(fb.data()).map(|(x, y)| *x as f64 * *y as f64), mul_spec);
            prop_assert_eq!(got.data(), &want[..]);
        }

        #[test]
        fn pool_and_concat_match_float_oracle(
            vals in proptest::collection::vec(-128i32..128, 12),
            e in -8i32..2, out in -10i32..4,
        ) {
            let t = q(Dims::new(2, 3, 2), s8(e), vals.clone());
            let f = dequantize(&t);
            let spec = s8(out);
            let got = global_avg_pool_q(&t, spec).unwrap();
            let means = (0..2).map(|c| (0..6).map(|p| f.data()[p * 2 + c] as f64).sum::<f64>() / 6.0);
            prop_assert_eq!(got.data(), &oracle(means, spec)[..]);

            let coarse = s8(e.max(out));
            let got = concat_q(&[&t, &t], coarse).unwrap();
            let parts: Vec<f64> = (0..6).flat_map(|p| {
                let px = [f.data()[p * 2] as f64, f.data()[p * 2 + 1] as f64];
                [px[0], px[1], px[0], px[1]]
            }).collect();
            prop_assert_eq!(got.data(), &oracle(parts.into_iter(), coarse)[..]);
            let back = quantize(&Tensor::new(got.dims(), dequantize(&got).into_data()).unwrap(), coarse);
            prop_assert_eq!(back.data(), got.data());
        }
    }
}
