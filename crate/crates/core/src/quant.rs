//! Per-tensor affine int8 quantization: `real = scale * (q - zero_point)`.
//!
//! All arithmetic that produces an integer goes through
//! [`round_half_away`] in f64 so results do not depend on the platform's
//! float rounding mode or FMA contraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("quantization scale must be positive, got {scale}")));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::InvalidArgument(format!("zero point {zero_point} outside int8")));
        }
        Ok(Self { scale, zero_point })
    }

    /// Parameters covering `[min, max]`, widened to contain zero.
    pub fn from_range(min: f32, max: f32) -> Self {
        let lo = f64::from(min.min(0.0));
        let hi = f64::from(max.max(0.0));
        if hi == lo {
            // only reachable for an all-zero range
            return Self { scale: 1.0 / 127.0, zero_point: 0 };
        }
        let scale = round_up_f32((hi - lo) / 255.0);
        let zero_point = (round_half_away(f64::from(QMIN) - lo / f64::from(scale)) as i32).clamp(QMIN, QMAX);
        Self { scale, zero_point }
    }

    /// Parameters for a tensor whose elements all equal `v`.
    pub fn for_constant(v: f32) -> Self {
        Self { scale: v.abs().max(1.0) / 127.0, zero_point: 0 }
    }

    pub fn quantize_value(&self, v: f32) -> i8 {
        self.requantize(f64::from(v))
    }

    /// Nearest grid value for a real number.
    pub fn requantize(&self, real: f64) -> i8 {
        let q = round_half_away(real / f64::from(self.scale)) + f64::from(self.zero_point);
        q.clamp(f64::from(QMIN), f64::from(QMAX)) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f32 {
        (f64::from(self.scale) * f64::from(i32::from(q) - self.zero_point)) as f32
    }

    pub fn real(&self, q: i8) -> f64 {
        f64::from(self.scale) * f64::from(i32::from(q) - self.zero_point)
    }
}

/// Rounds halfway cases away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Smallest f32 not below `x`.
fn round_up_f32(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) < x {
        f.next_up()
    } else {
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    qp: QuantParams,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i8>, qp: QuantParams) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(Self { shape, values, qp })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn qp(&self) -> QuantParams {
        self.qp
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parameters [`quantize`] would choose for `t`.
pub fn choose_params(t: &Tensor) -> QuantParams {
    let data = t.data();
    let Some(&first) = data.first() else {
        return QuantParams::from_range(0.0, 0.0);
    };
    if data.iter().all(|&v| v == first) {
        return QuantParams::for_constant(first);
    }
    let (min, max) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    QuantParams::from_range(min, max)
}

pub fn quantize(t: &Tensor) -> QuantTensor {
    quantize_with(t, choose_params(t))
}

pub fn quantize_with(t: &Tensor, qp: QuantParams) -> QuantTensor {
    let values = t.data().iter().map(|&v| qp.quantize_value(v)).collect();
    QuantTensor { shape: t.shape().to_vec(), values, qp }
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q.values.iter().map(|&v| q.qp.dequantize_value(v)).collect();
    Tensor::new(q.shape.clone(), data).expect("shape checked at construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_err(t: &Tensor) -> (f32, f32) {
        let q = quantize(t);
        let back = dequantize(&q);
        (t.max_abs_diff(&back).unwrap(), q.qp().scale)
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(0.49), 0.0);
    }

    #[test]
    fn zeros_map_to_zero_point() {
        let t = Tensor::zeros(vec![3, 2]);
        let q = quantize(&t);
        assert!(q.values().iter().all(|&v| i32::from(v) == q.qp().zero_point));
        assert_eq!(dequantize(&q), t);
        let z = QuantTensor::new(vec![2], vec![5, 5], QuantParams::new(0.3, 5).unwrap()).unwrap();
        assert_eq!(dequantize(&z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn symmetric_triplet() {
        let t = Tensor::vector(vec![-1.0, 0.0, 1.0]);
        let (err, scale) = max_err(&t);
        assert!(scale >= 2.0 / 255.0);
        assert!(err <= scale / 2.0);
        assert!(err <= 1.0 / 255.0 + 1e-7);
        // zero is exact
        assert_eq!(dequantize(&quantize(&t)).data()[1], 0.0);
    }

    #[test]
    fn ramp_round_trip() {
        let t = Tensor::vector((0..=127).map(|i| i as f32 / 10.0).collect());
        let (err, scale) = max_err(&t);
        assert!(err <= scale / 2.0, "{err} > {}", scale / 2.0);
    }

    #[test]
    fn constant_tensors() {
        let q = quantize(&Tensor::vector(vec![3.0; 4]));
        assert_eq!(q.qp(), QuantParams { scale: 3.0 / 127.0, zero_point: 0 });
        assert_eq!(q.values(), &[127; 4]);
        let q = quantize(&Tensor::vector(vec![0.25; 2]));
        assert_eq!(q.qp().scale, 1.0 / 127.0);
    }

    #[test]
    fn positive_range_uses_full_grid() {
        let qp = QuantParams::from_range(0.0, 1.0);
        assert_eq!(qp.zero_point, -128);
        assert_eq!(qp.quantize_value(0.0), -128);
        assert_eq!(qp.quantize_value(1.0), 127);
    }

    #[test]
    fn invalid_params() {
        assert!(QuantParams::new(0.0, 0).is_err());
        assert!(QuantParams::new(1.0, 128).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_within_half_step(values in prop::collection::vec(-1e3f32..1e3, 1..64), shift in -50f32..50.0) {
            let t = Tensor::vector(values.iter().map(|v| v + shift).collect());
            let q = quantize(&t);
            let qp = q.qp();
            let back = dequantize(&q);
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= qp.scale / 2.0, "{a} vs {b}, scale {}", qp.scale);
            }
            // zero stays representable
            prop_assert_eq!(qp.dequantize_value(qp.zero_point as i8), 0.0);
        }
    }
}
