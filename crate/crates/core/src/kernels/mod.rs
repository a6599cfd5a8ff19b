//! Packed low-bit integer matrices and an exact `i32`-accumulating GEMM.

mod bench;
mod deploy;
mod gemm;

pub use bench::{bench, naive_gemm_f32, BenchReport, MIN_REPS, WARMUP_REPS};
pub use deploy::{export_packed, DeployedLayer, DeployedPolicy};
pub use gemm::{dequantize, gemm_int, max_inner_dim, naive_gemm_int, IntGemm};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dequantization scale of a packed matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Tensor(f32),
    Rows(Vec<f32>),
    Cols(Vec<f32>),
}

/// Row-major signed integers stored in two's complement, two per byte for
/// 4-bit (low nibble = even element index).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub data: Vec<u8>,
    pub scale: Scale,
}

pub fn code_range(bits: u8) -> (i32, i32) {
    (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
}

pub fn packed_len(rows: usize, cols: usize, bits: u8) -> usize {
    (rows * cols * bits as usize).div_ceil(8)
}

impl PackedMatrix {
    pub fn pack(values: &[i32], rows: usize, cols: usize, bits: u8, scale: Scale) -> Result<Self> {
        if bits != 4 && bits != 8 {
            return Err(Error::Config(format!("packed matrices are 4- or 8-bit, got {bits}")));
        }
        if values.len() != rows * cols {
            return Err(Error::shape("pack", &[rows, cols], &[values.len()]));
        }
        match &scale {
            Scale::Rows(s) if s.len() != rows => return Err(Error::shape("pack scale", &[rows], &[s.len()])),
            Scale::Cols(s) if s.len() != cols => return Err(Error::shape("pack scale", &[cols], &[s.len()])),
            _ => {}
        }
        let (min, max) = code_range(bits);
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(min..=max).contains(*v)) {
            return Err(Error::Pack {
                index,
                value,
                bits,
                min,
                max,
            });
        }
        let data = if bits == 8 {
            values.iter().map(|&v| v as i8 as u8).collect()
        } else {
            values
                .chunks(2)
                .map(|p| {
                    let lo = p[0] as u8 & 0x0f;
                    let hi = p.get(1).map_or(0, |&v| v as u8 & 0x0f);
                    lo | (hi << 4)
                })
                .collect()
        };
        Ok(Self {
            rows,
            cols,
            bits,
            data,
            scale,
        })
    }

    pub fn unpack(&self) -> Vec<i32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        self.unpack_with(|v| out.push(v as i32));
        out
    }

    pub(crate) fn unpack_i16(&self) -> Vec<i16> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        self.unpack_with(|v| out.push(v as i16));
        out
    }

    fn unpack_with(&self, mut f: impl FnMut(i8)) {
        let n = self.rows * self.cols;
        if self.bits == 8 {
            self.data[..n].iter().for_each(|&b| f(b as i8));
        } else {
            for (i, &b) in self.data.iter().enumerate() {
                // sign-extend each nibble
                f(((b << 4) as i8) >> 4);
                if 2 * i + 1 < n {
                    f((b as i8) >> 4);
                }
            }
        }
    }

    pub fn packed_bytes(&self) -> usize {
        self.data.len()
    }

    /// Bytes an `f32` matrix of the same shape would occupy.
    pub fn fp32_bytes(&self) -> usize {
        4 * self.rows * self.cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_int4_layout() {
        let p = PackedMatrix::pack(&[0; 16], 4, 4, 4, Scale::Tensor(1.0)).unwrap();
        assert_eq!(p.data, vec![0u8; 8]);
    }

    #[test]
    fn nibble_layout() {
        let p = PackedMatrix::pack(&[7, -8], 1, 2, 4, Scale::Tensor(1.0)).unwrap();
        assert_eq!(p.data, vec![0x87]);
        assert_eq!(p.unpack(), vec![7, -8]);
    }

    #[test]
    fn odd_length_pads_high_nibble() {
        let p = PackedMatrix::pack(&[-1, 2, 3], 1, 3, 4, Scale::Tensor(1.0)).unwrap();
        assert_eq!(p.data, vec![0x2f, 0x03]);
        assert_eq!(p.unpack(), vec![-1, 2, 3]);
    }

    #[test]
    fn out_of_range_names_index() {
        match PackedMatrix::pack(&[0, 1, 8, 0], 2, 2, 4, Scale::Tensor(1.0)) {
            Err(Error::Pack { index, value, .. }) => assert_eq!((index, value), (2, 8)),
            other => panic!("{other:?}"),
        }
        assert!(PackedMatrix::pack(&[-129], 1, 1, 8, Scale::Tensor(1.0)).is_err());
        assert!(PackedMatrix::pack(&[0], 1, 1, 2, Scale::Tensor(1.0)).is_err());
    }

    #[test]
    fn memory_accounting() {
        let p4 = PackedMatrix::pack(&vec![1; 64 * 32], 64, 32, 4, Scale::Tensor(1.0)).unwrap();
        assert_eq!(p4.packed_bytes() * 8, p4.fp32_bytes());
        assert_eq!(p4.packed_bytes(), packed_len(64, 32, 4));
        let p8 = PackedMatrix::pack(&[1; 15], 3, 5, 8, Scale::Tensor(1.0)).unwrap();
        assert_eq!(p8.packed_bytes(), 15);
        assert_eq!(packed_len(3, 5, 4), 8);
    }

    proptest! {
        #[test]
        fn round_trip(bits in prop::sample::select(vec![4u8, 8]), rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = code_range(bits);
            let v: Vec<i32> = (0..rows * cols).map(|_| rng.random_range(lo..=hi)).collect();
            let p = PackedMatrix::pack(&v, rows, cols, bits, Scale::Tensor(0.5)).unwrap();
            prop_assert_eq!(p.data.len(), packed_len(rows, cols, bits));
            prop_assert_eq!(p.unpack(), v);
        }
    }
}
