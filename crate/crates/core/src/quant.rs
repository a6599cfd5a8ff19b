//! Round-to-nearest fake quantization with straight-through gradients and
//! learned step sizes.
//!
//! `w̄ = round(clip(w / s, Q_N, Q_P))`, `ŵ = w̄ · s`, rounding half to even.
//! Backward passes the upstream gradient through where `Q_N ≤ w/s ≤ Q_P`
//! (closed interval) and zero elsewhere. The step size gradient follows LSQ:
//! `dŵ/ds = round(w/s) − w/s` inside the range, `Q_N` / `Q_P` when clipped,
//! scaled by `g = 1/sqrt(N·Q_P)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest step size a quantizer may hold.
pub const MIN_STEP: f32 = 1e-9;

/// Step used by [`init_step_size`] for an all-zero tensor.
pub const ZERO_TENSOR_STEP: f32 = 1e-3;

/// Significant bits kept in a stored step size. With 15 bits, `w̄·s` is
/// exact in `f32` for `|w̄| ≤ 2^8` and products of two dequantized operands
/// are exact in `f64`, so a float matmul over fake-quantized operands equals
/// the integer kernel's `acc · s_a · s_w` bit for bit.
pub const STEP_SIGNIFICAND_BITS: u32 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One step per output column of a `[in × out]` weight matrix.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fixed step size.
    Rtn,
    /// Step size trained alongside the weights.
    Lsq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u8,
    pub signed: bool,
    pub granularity: Granularity,
    pub method: Method,
}

impl QuantSpec {
    pub fn weights(bits: u8, method: Method) -> Self {
        Self {
            bits,
            signed: true,
            granularity: Granularity::PerTensor,
            method,
        }
    }

    pub fn activations(bits: u8, signed: bool, method: Method) -> Self {
        Self {
            bits,
            signed,
            granularity: Granularity::PerTensor,
            method,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "quantizer bit-width must be 2, 4 or 8, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    /// Lower clip bound `Q_N`.
    pub fn qn(&self) -> i32 {
        if self.signed {
            -(1 << (self.bits - 1))
        } else {
            0
        }
    }

    /// Upper clip bound `Q_P`.
    pub fn qp(&self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }
}

#[inline]
fn code(x: f32, s: f32, qn: f32, qp: f32) -> f32 {
    (x / s).clamp(qn, qp).round_ties_even()
}

/// Integer codes and dequantized values for a per-tensor step.
pub fn rtn_quantize(w: &[f32], s: f32, spec: &QuantSpec) -> Result<(Vec<i32>, Vec<f32>)> {
    check_step(s)?;
    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
    let codes: Vec<i32> = w.iter().map(|&x| code(x, s, qn, qp) as i32).collect();
    let deq = codes.iter().map(|&c| c as f32 * s).collect();
    Ok((codes, deq))
}

fn check_step(s: f32) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "quantizer step must be positive and finite, got {s}"
        )))
    }
}

/// Step index for element `idx` of a tensor with `cols` columns.
#[inline]
fn step_at(steps: &[f32], idx: usize, cols: usize) -> f32 {
    if steps.len() == 1 {
        steps[0]
    } else {
        steps[idx % cols]
    }
}

/// Codes for a tensor with per-tensor (`steps.len() == 1`) or per-column steps.
pub fn quantize_codes(x: &[f32], steps: &[f32], cols: usize, spec: &QuantSpec) -> Vec<i32> {
    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
    x.iter()
        .enumerate()
        .map(|(i, &v)| code(v, step_at(steps, i, cols), qn, qp) as i32)
        .collect()
}

/// Fake-quantized values `ŵ` for per-tensor or per-column steps.
pub fn fake_quant_values(x: &[f32], steps: &[f32], cols: usize, spec: &QuantSpec) -> Vec<f32> {
    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = step_at(steps, i, cols);
            code(v, s, qn, qp) * s
        })
        .collect()
}

/// Straight-through gradient: upstream where `Q_N ≤ w/s ≤ Q_P`, else 0.
pub fn ste_weight_grad(w: &[f32], s: f32, spec: &QuantSpec, upstream: &[f32]) -> Vec<f32> {
    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
    w.iter()
        .zip(upstream)
        .map(|(&x, &g)| {
            let v = x / s;
            if (qn..=qp).contains(&v) {
                g
            } else {
                0.0
            }
        })
        .collect()
}

/// Unscaled LSQ derivative `dŵ/ds` for one element.
#[inline]
pub fn lsq_step_derivative(x: f32, s: f32, spec: &QuantSpec) -> f32 {
    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
    let v = x / s;
    if v < qn {
        qn
    } else if v > qp {
        qp
    } else {
        v.round_ties_even() - v
    }
}

/// LSQ gradient scale `1/sqrt(N·Q_P)`.
pub fn lsq_grad_scale(numel: usize, spec: &QuantSpec) -> f32 {
    1.0 / ((numel as f32) * spec.qp() as f32).sqrt()
}

/// Scaled step-size gradient `g · Σ upstream · dŵ/ds` for a per-tensor step.
pub fn lsq_step_grad(w: &[f32], s: f32, spec: &QuantSpec, upstream: &[f32]) -> f32 {
    let sum: f64 = w
        .iter()
        .zip(upstream)
        .map(|(&x, &g)| g as f64 * lsq_step_derivative(x, s, spec) as f64)
        .sum();
    (sum * lsq_grad_scale(w.len(), spec) as f64) as f32
}

/// LSQ-style initial step `2·mean(|w|)/sqrt(Q_P)`, falling back to
/// [`ZERO_TENSOR_STEP`] for an all-zero tensor.
pub fn init_step_size(w: &[f32], spec: &QuantSpec) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::Contract("init_step_size on an empty tensor".into()));
    }
    let mean_abs = w.iter().map(|v| v.abs() as f64).sum::<f64>() / w.len() as f64;
    let s = (2.0 * mean_abs / (spec.qp() as f64).sqrt()) as f32;
    Ok(if s > 0.0 { s } else { ZERO_TENSOR_STEP })
}

/// Symmetric min/max step: the largest magnitude maps to the outer code.
pub fn minmax_step(x: &[f32], spec: &QuantSpec) -> f32 {
    let max_abs = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let s = max_abs / spec.qp() as f32;
    if s > 0.0 {
        s
    } else {
        ZERO_TENSOR_STEP
    }
}

/// Rounds a positive step to [`STEP_SIGNIFICAND_BITS`] significant bits
/// (ties to even) and applies the [`MIN_STEP`] floor.
pub fn snap_step(s: f32) -> f32 {
    let s = if s.is_finite() { s.max(MIN_STEP) } else { MIN_STEP };
    let drop = 24 - STEP_SIGNIFICAND_BITS;
    let bits = s.to_bits();
    let lsb = (bits >> drop) & 1;
    let half = (1u32 << (drop - 1)) - 1;
    let rounded = (bits + half + lsb) & !((1u32 << drop) - 1);
    f32::from_bits(rounded).max(MIN_STEP)
}

/// A quantizer attached to one weight matrix or activation site.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantizer {
    pub spec: QuantSpec,
    /// `[1]` for per-tensor, `[out]` for per-channel.
    pub step: Tensor,
    /// Overrides the default `1/sqrt(N·Q_P)` gradient scale.
    pub grad_scale: Option<f32>,
}

impl FakeQuantizer {
    pub fn new(spec: QuantSpec, steps: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        for &s in &steps {
            check_step(s)?;
        }
        if steps.is_empty() {
            return Err(Error::Contract("quantizer needs at least one step".into()));
        }
        let steps: Vec<f32> = steps.into_iter().map(snap_step).collect();
        let n = steps.len();
        let step = Tensor::new(vec![n], steps)?.with_requires_grad(spec.method == Method::Lsq);
        Ok(Self {
            spec,
            step,
            grad_scale: None,
        })
    }

    /// Quantizer for an `[in × out]` weight, steps from [`init_step_size`].
    pub fn for_weight(w: &Tensor, spec: QuantSpec) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        let steps = match spec.granularity {
            Granularity::PerTensor => vec![init_step_size(w.data(), &spec)?],
            Granularity::PerChannel => (0..cols)
                .map(|c| {
                    let col: Vec<f32> = (0..rows).map(|r| w.data()[r * cols + c]).collect();
                    init_step_size(&col, &spec)
                })
                .collect::<Result<_>>()?,
        };
        Self::new(spec, steps)
    }

    pub fn steps(&self) -> &[f32] {
        self.step.data()
    }

    pub fn is_trainable(&self) -> bool {
        self.spec.method == Method::Lsq
    }

    /// Re-applies the step invariants after an optimizer update.
    pub fn clamp_step(&mut self) {
        for s in self.step.data_mut() {
            *s = snap_step(*s);
        }
    }

    /// Unrecorded forward. `cols` is the trailing dimension of `x`.
    pub fn forward(&self, x: &[f32], cols: usize) -> Result<Vec<f32>> {
        self.check_input(x.len(), cols)?;
        Ok(fake_quant_values(x, self.steps(), cols, &self.spec))
    }

    pub fn codes(&self, x: &[f32], cols: usize) -> Result<Vec<i32>> {
        self.check_input(x.len(), cols)?;
        Ok(quantize_codes(x, self.steps(), cols, &self.spec))
    }

    fn check_input(&self, len: usize, cols: usize) -> Result<()> {
        let n = self.step.numel();
        if n != 1 && (n != cols || !len.is_multiple_of(cols)) {
            return Err(Error::shape("fake_quant", &[len / cols.max(1), cols], &[n]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s4() -> QuantSpec {
        QuantSpec::weights(4, Method::Rtn)
    }

    fn u4() -> QuantSpec {
        QuantSpec::activations(4, false, Method::Rtn)
    }

    #[test]
    fn ranges() {
        assert_eq!((s4().qn(), s4().qp()), (-8, 7));
        assert_eq!((u4().qn(), u4().qp()), (0, 15));
        let s2 = QuantSpec::weights(2, Method::Rtn);
        assert_eq!((s2.qn(), s2.qp()), (-2, 1));
    }

    #[test]
    fn zero_is_fixed_point() {
        let (c, d) = rtn_quantize(&[0.0], 0.123, &s4()).unwrap();
        assert_eq!((c[0], d[0]), (0, 0.0));
    }

    #[test]
    fn direct_arithmetic() {
        let (c, d) = rtn_quantize(&[0.37], 0.1, &s4()).unwrap();
        assert_eq!(c[0], 4);
        assert!((d[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn clip_boundaries() {
        let (c, d) = rtn_quantize(&[2.0], 0.1, &s4()).unwrap();
        assert_eq!(c[0], 7);
        assert!((d[0] - 0.7).abs() < 1e-7);
        let (c, d) = rtn_quantize(&[-0.3], 0.1, &u4()).unwrap();
        assert_eq!((c[0], d[0]), (0, 0.0));
    }

    #[test]
    fn ties_round_to_even() {
        let (c, _) = rtn_quantize(&[0.25, 0.75, -0.25], 0.5, &s4()).unwrap();
        assert_eq!(c, vec![0, 2, 0]);
    }

    #[test]
    fn non_positive_step_is_domain_error() {
        assert!(matches!(rtn_quantize(&[1.0], 0.0, &s4()), Err(Error::Domain(_))));
        assert!(rtn_quantize(&[1.0], -0.5, &s4()).is_err());
    }

    #[test]
    fn ste_indicator() {
        let up = [1.0; 4];
        // w/s = 3, 20, exactly Q_P, exactly Q_N
        let g = ste_weight_grad(&[0.3, 2.0, 0.7, -0.8], 0.1, &s4(), &up);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[1], 0.0);
        // 0.7/0.1 in f32 is 6.9999995, still inside; use an exact step for the edge
        let g = ste_weight_grad(&[7.0, -8.0, 7.5, -8.5], 1.0, &s4(), &up);
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn lsq_derivative_examples() {
        assert_eq!(lsq_step_grad(&[0.0; 5], 0.1, &s4(), &[1.0; 5]), 0.0);
        let d = lsq_step_derivative(0.37, 0.1, &s4());
        assert!((d - 0.3).abs() < 1e-5, "{d}");
        assert_eq!(lsq_step_derivative(2.0, 0.1, &s4()), 7.0);
        assert_eq!(lsq_step_derivative(-2.0, 0.1, &s4()), -8.0);
    }

    #[test]
    fn init_step_examples() {
        assert_eq!(init_step_size(&[0.0; 8], &s4()).unwrap(), ZERO_TENSOR_STEP);
        let w = [1.0, -1.0, 1.0, -1.0];
        let s = init_step_size(&w, &s4()).unwrap();
        assert!((s - 2.0 / 7f32.sqrt()).abs() < 1e-6);
        assert!((s - 0.7559).abs() < 1e-4);
        let w10: Vec<f32> = w.iter().map(|v| v * 10.0).collect();
        let s10 = init_step_size(&w10, &s4()).unwrap();
        assert!((s10 - 10.0 * s).abs() < 1e-5);
        assert!(init_step_size(&[], &s4()).is_err());
    }

    #[test]
    fn eight_bit_error_within_half_step() {
        let spec = QuantSpec::weights(8, Method::Rtn);
        let s = 1e-3;
        let x: Vec<f32> = (0..200).map(|i| (i as f32 - 100.0) * 1.1e-3).collect();
        let q = FakeQuantizer::new(spec, vec![s]).unwrap();
        let y = q.forward(&x, x.len()).unwrap();
        let s = q.steps()[0];
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= s / 2.0 + 1e-7);
        }
        assert_eq!(y, q.forward(&x, x.len()).unwrap());
    }

    #[test]
    fn per_channel_steps_follow_columns() {
        let w = Tensor::from_rows(&[&[1.0, 10.0], &[-1.0, -10.0]]);
        let mut spec = s4();
        spec.granularity = Granularity::PerChannel;
        let q = FakeQuantizer::for_weight(&w, spec).unwrap();
        assert_eq!(q.steps().len(), 2);
        assert!((q.steps()[1] / q.steps()[0] - 10.0).abs() < 1e-3);
        assert!(q.forward(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn snap_keeps_fifteen_bits() {
        let s = snap_step(0.1);
        assert!((s - 0.1).abs() / 0.1 < 2f32.powi(-15));
        assert_eq!(s.to_bits() & 0x1FF, 0);
        assert_eq!(snap_step(s), s);
        assert_eq!(snap_step(0.0), MIN_STEP);
        assert_eq!(snap_step(-1.0), MIN_STEP);
        // products of snapped steps and 8-bit codes are exact
        for c in -128..=127 {
            let v = c as f32 * s;
            assert_eq!(v as f64, c as f64 * s as f64);
        }
    }

    proptest! {
        #[test]
        fn idempotent(w in -4.0f32..4.0, s in 0.01f32..1.0, bits in prop::sample::select(vec![2u8, 4, 8]), signed: bool) {
            let spec = QuantSpec { bits, signed, granularity: Granularity::PerTensor, method: Method::Rtn };
            let (_, d) = rtn_quantize(&[w], s, &spec).unwrap();
            let (_, d2) = rtn_quantize(&d, s, &spec).unwrap();
            prop_assert_eq!(d, d2);
        }

        #[test]
        fn monotone(a in -4.0f32..4.0, b in -4.0f32..4.0, s in 0.01f32..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (c, _) = rtn_quantize(&[lo, hi], s, &s4()).unwrap();
            prop_assert!(c[0] <= c[1]);
        }
    }
}
