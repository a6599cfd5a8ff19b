use rayon::prelude::*;

use super::{PackedMatrix, Scale};
use crate::error::{Error, Result};
use crate::parallel;

/// Rows per micro-tile.
const MR: usize = 4;
/// Columns per micro-tile (four 8-lane vectors).
const NR: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntGemm {
    pub m: usize,
    pub n: usize,
    pub acc: Vec<i32>,
}

/// Largest `k` for which `k · max|a| · max|b|` fits in `i32`.
pub fn max_inner_dim(a_bits: u8, b_bits: u8) -> usize {
    let worst = (1i64 << (a_bits - 1)) * (1i64 << (b_bits - 1));
    (i32::MAX as i64 / worst) as usize
}

fn check(a: &PackedMatrix, b: &PackedMatrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::shape("gemm_int", &[a.rows, a.cols], &[b.rows, b.cols]));
    }
    let bound = max_inner_dim(a.bits, b.bits);
    if a.cols > bound {
        return Err(Error::Contract(format!(
            "inner dimension {} exceeds the i32 accumulation bound {bound}",
            a.cols
        )));
    }
    Ok(())
}

/// Reference: unpack both operands and multiply with a plain triple loop.
pub fn naive_gemm_int(a: &PackedMatrix, b: &PackedMatrix) -> Result<IntGemm> {
    check(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let (av, bv) = (a.unpack(), b.unpack());
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0i64;
            for p in 0..k {
                s += av[i * k + p] as i64 * bv[p * n + j] as i64;
            }
            acc[i * n + j] = i32::try_from(s).expect("bounded by max_inner_dim");
        }
    }
    Ok(IntGemm { m, n, acc })
}

/// `A · B` with exact `i32` accumulation.
///
/// Operands are widened to `i16` and regrouped so that consecutive `k`
/// pairs sit next to each other; each output tile is then a sum of pairwise
/// products, which maps onto `vpmaddwd` when AVX2 is available. Integer
/// addition is associative, so tiling and threading never change the result.
pub fn gemm_int(a: &PackedMatrix, b: &PackedMatrix) -> Result<IntGemm> {
    check(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let kp = k.div_ceil(2);
    let mp = m.div_ceil(MR) * MR;

    // A as packed i16 pairs, one u32 per pair, rows padded to MR
    let a16 = a.unpack_i16();
    let mut apairs = vec![0u32; mp * kp];
    for i in 0..m {
        for q in 0..kp {
            let lo = a16[i * k + 2 * q];
            let hi = if 2 * q + 1 < k { a16[i * k + 2 * q + 1] } else { 0 };
            apairs[i * kp + q] = lo as u16 as u32 | (hi as u16 as u32) << 16;
        }
    }

    // B as column panels of NR, each laid out [q][col][pair]
    let b16 = b.unpack_i16();
    let panels = n.div_ceil(NR);
    let panel_len = kp * NR * 2;
    let mut bp = vec![0i16; panels * panel_len];
    for p in 0..k {
        let (q, t) = (p / 2, p % 2);
        for j in 0..n {
            let (jb, jj) = (j / NR, j % NR);
            bp[jb * panel_len + (q * NR + jj) * 2 + t] = b16[p * n + j];
        }
    }

    let avx2 = has_avx2();
    let tiles: Vec<Vec<i32>> = parallel::install(|| {
        (0..panels)
            .into_par_iter()
            .map(|jb| {
                let panel = &bp[jb * panel_len..(jb + 1) * panel_len];
                let mut out = vec![0i32; mp * NR];
                for ib in (0..mp).step_by(MR) {
                    let rows = &apairs[ib * kp..(ib + MR) * kp];
                    let tile = &mut out[ib * NR..(ib + MR) * NR];
                    micro_kernel(rows, panel, kp, tile, avx2);
                }
                out
            })
            .collect()
    });

    let mut acc = vec![0i32; m * n];
    for (jb, tile) in tiles.iter().enumerate() {
        let width = NR.min(n - jb * NR);
        for i in 0..m {
            acc[i * n + jb * NR..i * n + jb * NR + width].copy_from_slice(&tile[i * NR..i * NR + width]);
        }
    }
    Ok(IntGemm { m, n, acc })
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `tile[MR × NR] = rows[MR × kp pairs] · panel[kp × NR pairs]`.
fn micro_kernel(rows: &[u32], panel: &[i16], kp: usize, tile: &mut [i32], avx2: bool) {
    #[cfg(target_arch = "x86_64")]
    if avx2 {
        // SAFETY: AVX2 support was detected at runtime.
        unsafe { micro_kernel_avx2(rows, panel, kp, tile) };
        return;
    }
    let _ = avx2;
    micro_kernel_scalar(rows, panel, kp, tile);
}

fn micro_kernel_scalar(rows: &[u32], panel: &[i16], kp: usize, tile: &mut [i32]) {
    for r in 0..MR {
        let acc = &mut tile[r * NR..(r + 1) * NR];
        for q in 0..kp {
            let pair = rows[r * kp + q];
            let (a0, a1) = (pair as u16 as i16 as i32, (pair >> 16) as u16 as i16 as i32);
            let b = &panel[q * NR * 2..(q + 1) * NR * 2];
            for (c, bb) in acc.iter_mut().zip(b.chunks_exact(2)) {
                *c = c.wrapping_add(a0 * bb[0] as i32 + a1 * bb[1] as i32);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn micro_kernel_avx2(rows: &[u32], panel: &[i16], kp: usize, tile: &mut [i32]) {
    use std::arch::x86_64::*;

    debug_assert_eq!(rows.len(), MR * kp);
    debug_assert_eq!(panel.len(), kp * NR * 2);
    debug_assert_eq!(tile.len(), MR * NR);
    let mut acc = [[_mm256_setzero_si256(); 4]; MR];
    let bptr = panel.as_ptr() as *const __m256i;
    for q in 0..kp {
        let b = [
            _mm256_loadu_si256(bptr.add(q * 4)),
            _mm256_loadu_si256(bptr.add(q * 4 + 1)),
            _mm256_loadu_si256(bptr.add(q * 4 + 2)),
            _mm256_loadu_si256(bptr.add(q * 4 + 3)),
        ];
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let a = _mm256_set1_epi32(*rows.get_unchecked(r * kp + q) as i32);
            for (c, bv) in acc_r.iter_mut().zip(&b) {
                *c = _mm256_add_epi32(*c, _mm256_madd_epi16(a, *bv));
            }
        }
    }
    let out = tile.as_mut_ptr() as *mut __m256i;
    for (r, acc_r) in acc.iter().enumerate() {
        for (v, c) in acc_r.iter().enumerate() {
            _mm256_storeu_si256(out.add(r * 4 + v), *c);
        }
    }
}

/// `out[i][j] = acc[i][j] · s_a(i) · s_b(j)`, scales multiplied first in
/// `f64` and rounded to `f32` once.
pub fn dequantize(g: &IntGemm, a: &Scale, b: &Scale) -> Result<Vec<f32>> {
    let row = |s: &Scale, i: usize| -> Result<f64> {
        match s {
            Scale::Tensor(v) => Ok(*v as f64),
            Scale::Rows(v) => Ok(v[i] as f64),
            Scale::Cols(_) => Err(Error::Config("left operand scale must be per-tensor or per-row".into())),
        }
    };
    let col = |s: &Scale, j: usize| -> Result<f64> {
        match s {
            Scale::Tensor(v) => Ok(*v as f64),
            Scale::Cols(v) => Ok(v[j] as f64),
            Scale::Rows(_) => Err(Error::Config(
                "right operand scale must be per-tensor or per-column".into(),
            )),
        }
    };
    let cols: Vec<f64> = (0..g.n).map(|j| col(b, j)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(g.m * g.n);
    for i in 0..g.m {
        let sa = row(a, i)?;
        for (j, sb) in cols.iter().enumerate() {
            out.push((g.acc[i * g.n + j] as f64 * (sa * sb)) as f32);
        }
    }
    Ok(out)
}
