//! Dense row-major `f32` tensors with a recording tape for reverse-mode
//! differentiation.
//!
//! Storage is always `f32`. Matrix products accumulate in `f64` and round
//! once per output element, which keeps finite-difference checks stable and
//! makes products of quantized operands exact (see [`crate::kernels`]).

mod adam;
mod tape;

pub use adam::Adam;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for
    /// tests and literals.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape("set_grad", &self.shape, &[g.len()]));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 is treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Unrecorded matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Tensor::new(vec![m, n], matmul(&self.data, &other.data, m, k, n))
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`, `f64` accumulation, one rounding per element.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { matmul_avx2(a, b, m, k, n) };
    }
    matmul_body(a, b, m, k, n)
}

// Wider vectors only; no FMA contraction, so results match the plain path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul_body(a, b, m, k, n)
}

#[inline(always)]
fn matmul_body(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &b_pj) in acc.iter_mut().zip(b_row) {
                *c += a_ip * b_pj as f64;
            }
        }
        for (o, &c) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = c as f32;
        }
    }
    out
}

/// `C[m×k] = A[m×n] · Bᵀ` where `B` is `[k×n]`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { matmul_bt_avx2(a, b, m, n, k) };
    }
    matmul_bt_body(a, b, m, n, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_bt_avx2(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    matmul_bt_body(a, b, m, n, k)
}

/// Dot products use eight interleaved partial sums so they vectorize.
#[inline(always)]
fn matmul_bt_body(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    const L: usize = 8;
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut lanes = [0.0f64; L];
            let (ac, bc) = (a_row.chunks_exact(L), b_row.chunks_exact(L));
            let (ar, br) = (ac.remainder(), bc.remainder());
            for (x, y) in ac.zip(bc) {
                for l in 0..L {
                    lanes[l] += x[l] as f64 * y[l] as f64;
                }
            }
            let mut dot: f64 = lanes.iter().sum();
            for (&x, &y) in ar.iter().zip(br) {
                dot += x as f64 * y as f64;
            }
            out[i * k + p] = dot as f32;
        }
    }
    out
}

/// `C[k×n] = Aᵀ · B` where `A` is `[m×k]` and `B` is `[m×n]`.
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { matmul_at_avx2(a, b, m, k, n) };
    }
    matmul_at_body(a, b, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_at_avx2(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul_at_body(a, b, m, k, n)
}

#[inline(always)]
fn matmul_at_body(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let a_ip = a_ip as f64;
            for (c, &y) in acc[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *c += a_ip * y as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Adds a length-`d` bias to every row of an `[n×d]` buffer in place.
pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    let d = bias.len();
    for row in x.chunks_exact_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(eye.matmul(&b).unwrap().data(), b.data());
    }

    #[test]
    fn annihilator_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Tensor::zeros(vec![2, 2]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn hand_multiplied_matmul() {
        // 1*5+2*7=19, 1*6+2*8=22, 3*5+4*7=43, 3*6+4*8=50
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn new_rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // a · b = a · (bᵀ)ᵀ
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 4), c);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        assert_eq!(matmul_at(&at, &b, 3, 2, 4), c);
    }
}
