//! Perturbation saliency over the 16×16 grid part of an observation.
//!
//! A location is scored by how much the policy output moves when the grid
//! is locally replaced with a blurred copy of itself.

use serde::{Deserialize, Serialize};

use crate::envs::{GRID, GRID_CELLS};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;

/// Floor added to every saliency entry before normalizing for KL.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// Width of the interpolation mask; `0` disables the mask entirely.
    pub sigma_mask: f64,
    pub sigma_blur: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            sigma_mask: 1.5,
            sigma_blur: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major `GRID × GRID`.
    pub values: Vec<f64>,
    pub policy_id: String,
    pub observation_id: String,
}

impl SaliencyMap {
    pub fn mean(&self) -> f64 {
        mean_saliency(&self.values)
    }
}

/// Reflect-mode index (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a square `n × n` grid with reflected borders.
pub fn blur(grid: &[f32], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return grid.iter().map(|&v| v as f64).collect();
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as isize;
    let ni = n as isize;
    let mut tmp = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            tmp[i * n + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * grid[i * n + reflect(j as isize + t as isize - r, ni)] as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(i as isize + t as isize - r, ni) * n + j])
                .sum();
        }
    }
    out
}

/// Gaussian mask centred on `(i, j)`, equal to 1 at the centre.
pub fn mask(n: usize, i: usize, j: usize, sigma: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    if sigma <= 0.0 {
        return m;
    }
    for a in 0..n {
        for b in 0..n {
            let d2 = ((a as f64 - i as f64).powi(2) + (b as f64 - j as f64).powi(2)) / (2.0 * sigma * sigma);
            m[a * n + b] = (-d2).exp();
        }
    }
    m
}

fn check_location(n: usize, i: usize, j: usize) -> Result<()> {
    if i >= n || j >= n {
        return Err(Error::Contract(format!("location ({i}, {j}) outside {n}×{n} grid")));
    }
    Ok(())
}

/// `φ(I, i, j) = I ⊙ (1 − M) + blur(I) ⊙ M`.
pub fn gaussian_perturb(grid: &[f32], n: usize, i: usize, j: usize, cfg: &SaliencyConfig) -> Result<Vec<f32>> {
    if grid.len() != n * n {
        return Err(Error::shape("gaussian_perturb", &[n, n], &[grid.len()]));
    }
    check_location(n, i, j)?;
    let blurred = blur(grid, n, cfg.sigma_blur);
    Ok(perturb_with(grid, &blurred, &mask(n, i, j, cfg.sigma_mask)))
}

fn perturb_with(grid: &[f32], blurred: &[f64], m: &[f64]) -> Vec<f32> {
    grid.iter()
        .zip(blurred)
        .zip(m)
        .map(|((&x, &b), &w)| (x as f64 * (1.0 - w) + b * w) as f32)
        .collect()
}

fn check_obs(policy: &GaussianPolicy, obs: &[f32]) -> Result<()> {
    if obs.len() != policy.obs_dim() || obs.len() < GRID_CELLS {
        return Err(Error::shape("saliency", &[policy.obs_dim()], &[obs.len()]));
    }
    Ok(())
}

fn half_sq_dist(a: &[f32], b: &[f32]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
}

/// `½‖out(I) − out(φ(I, i, j))‖²` where `out` is `μ` followed by `log σ`.
/// `log σ` does not depend on the state, so only `μ` contributes.
pub fn saliency_score(policy: &GaussianPolicy, obs: &[f32], i: usize, j: usize, cfg: &SaliencyConfig) -> Result<f64> {
    check_obs(policy, obs)?;
    let mut perturbed = obs.to_vec();
    let p = gaussian_perturb(&obs[..GRID_CELLS], GRID, i, j, cfg)?;
    perturbed[..GRID_CELLS].copy_from_slice(&p);
    let base = policy.mean_batch(obs, 1)?;
    let moved = policy.mean_batch(&perturbed, 1)?;
    Ok(half_sq_dist(&base, &moved))
}

/// Full map for one observation; all 256 perturbations run as one batch.
pub fn saliency_map(policy: &GaussianPolicy, obs: &[f32], cfg: &SaliencyConfig) -> Result<Vec<f64>> {
    Ok(saliency_maps(policy, obs, 1, cfg)?.pop().expect("one map"))
}

/// Maps for `n` observations stacked row-major.
///
/// A perturbation only moves grid cells, so the first layer's product is
/// patched from the unperturbed one over the inputs that changed. With
/// quantized inputs and weights every term is exact in `f64` and the result
/// matches a full forward pass bit for bit.
pub fn saliency_maps(policy: &GaussianPolicy, obs: &[f32], n: usize, cfg: &SaliencyConfig) -> Result<Vec<Vec<f64>>> {
    let d = policy.obs_dim();
    if obs.len() != n * d || d < GRID_CELLS {
        return Err(Error::shape("saliency", &[n, d], &[obs.len()]));
    }
    let masks: Vec<Vec<f64>> = (0..GRID_CELLS)
        .map(|c| mask(GRID, c / GRID, c % GRID, cfg.sigma_mask))
        .collect();
    let base = policy.mean_batch(obs, n)?;
    let base_in = policy.first_layer_input(obs);
    let w = policy.effective_weights(0);
    let width = w.len() / d;
    let a = policy.action_dim();
    let mut maps = Vec::with_capacity(n);
    let mut batch = Vec::with_capacity(GRID_CELLS * d);
    let mut acc = vec![0.0f64; width];
    for s in 0..n {
        let o = &obs[s * d..(s + 1) * d];
        let bin = &base_in[s * d..(s + 1) * d];
        let mut base_acc = vec![0.0f64; width];
        for (p, &x) in bin.iter().enumerate() {
            if x != 0.0 {
                axpy(&mut base_acc, x as f64, &w[p * width..(p + 1) * width]);
            }
        }
        let blurred = blur(&o[..GRID_CELLS], GRID, cfg.sigma_blur);
        batch.clear();
        for m in &masks {
            batch.extend(perturb_with(&o[..GRID_CELLS], &blurred, m));
            batch.extend_from_slice(&o[GRID_CELLS..]);
        }
        let moved_in = policy.first_layer_input(&batch);
        // perturbations that leave the (quantized) input unchanged score 0
        let mut changed = Vec::with_capacity(GRID_CELLS);
        let mut z = Vec::with_capacity(GRID_CELLS * width);
        for (k, row) in moved_in.chunks_exact(d).enumerate() {
            acc.copy_from_slice(&base_acc);
            let mut any = false;
            for (c, (&x1, &x0)) in row[..GRID_CELLS].iter().zip(&bin[..GRID_CELLS]).enumerate() {
                if x1 != x0 {
                    any = true;
                    axpy(&mut acc, x1 as f64 - x0 as f64, &w[c * width..(c + 1) * width]);
                }
            }
            if any {
                changed.push(k);
                z.extend(acc.iter().map(|&c| c as f32));
            }
        }
        let mut map = vec![0.0; GRID_CELLS];
        if !changed.is_empty() {
            let moved = policy.mean_from_first_product(z, changed.len())?;
            let b = &base[s * a..(s + 1) * a];
            for (&k, m) in changed.iter().zip(moved.chunks_exact(a)) {
                map[k] = half_sq_dist(b, m);
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

fn axpy(acc: &mut [f64], x: f64, w: &[f32]) {
    for (c, &v) in acc.iter_mut().zip(w) {
        *c += x * v as f64;
    }
}

pub fn mean_saliency(map: &[f64]) -> f64 {
    map.iter().sum::<f64>() / map.len() as f64
}

/// `D_KL(P ‖ Q)` after flooring both maps and normalizing them to sum 1.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let norm = |m: &[f64]| {
        let floored: Vec<f64> = m.iter().map(|v| v.max(0.0) + KL_FLOOR).collect();
        let s: f64 = floored.iter().sum();
        floored.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Attention divergence of `q` from `fp` on one observation.
pub fn attdiv(q: &GaussianPolicy, fp: &GaussianPolicy, obs: &[f32], cfg: &SaliencyConfig) -> Result<f64> {
    Ok(kl_divergence(&saliency_map(q, obs, cfg)?, &saliency_map(fp, obs, cfg)?))
}

/// Per-observation divergences for `n` stacked observations.
pub fn attdiv_batch(
    q: &GaussianPolicy,
    fp: &GaussianPolicy,
    obs: &[f32],
    n: usize,
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>> {
    let a = saliency_maps(q, obs, n, cfg)?;
    let b = saliency_maps(fp, obs, n, cfg)?;
    Ok(a.iter().zip(&b).map(|(x, y)| kl_divergence(x, y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridDriveEnv;
    use crate::quant::{Method, QuantSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(
            &[GridDriveEnv::OBS_DIM, 16, 2],
            0.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn random_obs(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..GridDriveEnv::OBS_DIM)
            .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
            .collect()
    }

    #[test]
    fn constant_grid_is_unchanged() {
        let g = vec![0.5f32; 25];
        for (i, j) in [(0, 0), (2, 2), (4, 1)] {
            let p = gaussian_perturb(&g, 5, i, j, &SaliencyConfig::default()).unwrap();
            assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-6), "{p:?}");
        }
    }

    #[test]
    fn mask_peaks_at_centre_and_decays() {
        let m = mask(16, 5, 7, 1.5);
        assert_eq!(m[5 * 16 + 7], 1.0);
        for d in 1..6 {
            assert!(m[5 * 16 + 7 + d] < m[5 * 16 + 7 + d - 1]);
            assert!(m[(5 + d) * 16 + 7] < m[(5 + d - 1) * 16 + 7]);
        }
    }

    #[test]
    fn bright_pixel_dims_under_direct_convolution() {
        // 5×5 with one bright pixel at (2, 2); oracle: 2-D convolution with
        // the outer-product kernel and reflected indices
        let mut g = vec![0.0f32; 25];
        g[12] = 1.0;
        let cfg = SaliencyConfig::default();
        let p = gaussian_perturb(&g, 5, 2, 2, &cfg).unwrap();
        let k = kernel(cfg.sigma_blur);
        let r = (k.len() / 2) as isize;
        let mut blurred_centre = 0.0;
        for (a, wa) in k.iter().enumerate() {
            for (b, wb) in k.iter().enumerate() {
                let (y, x) = (reflect(2 + a as isize - r, 5), reflect(2 + b as isize - r, 5));
                blurred_centre += wa * wb * g[y * 5 + x] as f64;
            }
        }
        assert!((p[12] as f64 - blurred_centre).abs() < 1e-6);
        assert!(p[12] < 1.0);
    }

    #[test]
    fn out_of_bounds_location() {
        assert!(gaussian_perturb(&[0.0; 25], 5, 5, 0, &SaliencyConfig::default()).is_err());
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn zero_policy_has_zero_saliency() {
        let mut p = grid_policy(0);
        for t in p.mlp.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let map = saliency_map(&p, &random_obs(1), &SaliencyConfig::default()).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabled_mask_gives_zero() {
        let cfg = SaliencyConfig {
            sigma_mask: 0.0,
            ..Default::default()
        };
        let map = saliency_map(&grid_policy(1), &random_obs(2), &cfg).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_matches_single_scores() {
        let p = grid_policy(3);
        let obs = random_obs(4);
        let cfg = SaliencyConfig::default();
        let map = saliency_map(&p, &obs, &cfg).unwrap();
        for (i, j) in [(0, 0), (7, 9), (15, 15)] {
            let single = saliency_score(&p, &obs, i, j, &cfg).unwrap();
            assert!((map[i * GRID + j] - single).abs() <= 1e-6 * single.max(1e-6), "{i},{j}");
        }
        assert!(map.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let mut brute = 0.0;
        for i in 0..GRID {
            for j in 0..GRID {
                brute += map[i * GRID + j];
            }
        }
        assert!((mean_saliency(&map) - brute / 256.0).abs() < 1e-15);
    }

    #[test]
    fn quantized_map_matches_single_scores_exactly() {
        let mut p = grid_policy(5);
        let calib: Vec<f32> = (0..6).flat_map(random_obs).collect();
        p.attach_quantizers(
            QuantSpec::weights(4, Method::Rtn),
            QuantSpec::activations(4, true, Method::Rtn),
            &calib,
        )
        .unwrap();
        let obs: Vec<f32> = (10..12).flat_map(random_obs).collect();
        let cfg = SaliencyConfig::default();
        let maps = saliency_maps(&p, &obs, 2, &cfg).unwrap();
        let d = p.obs_dim();
        for (s, map) in maps.iter().enumerate() {
            for c in (0..GRID_CELLS).step_by(17) {
                let single = saliency_score(&p, &obs[s * d..(s + 1) * d], c / GRID, c % GRID, &cfg).unwrap();
                assert_eq!(map[c], single);
            }
        }
    }

    #[test]
    fn mean_arithmetic() {
        let mut m = vec![0.0; 256];
        assert_eq!(mean_saliency(&m), 0.0);
        m[17] = 3.2;
        assert_eq!(mean_saliency(&m), 3.2 / 256.0);
    }

    #[test]
    fn mirrored_policy_gives_mirrored_map() {
        // weights symmetric under left-right flip of grid columns, with a
        // left-right symmetric observation
        let mut p = grid_policy(5);
        let w = p.mlp.layers[0].weight.data_mut();
        let h = 16;
        for i in 0..GRID {
            for j in 0..GRID / 2 {
                for c in 0..h {
                    w[(i * GRID + GRID - 1 - j) * h + c] = w[(i * GRID + j) * h + c];
                }
            }
        }
        let mut obs = random_obs(6);
        for i in 0..GRID {
            for j in 0..GRID / 2 {
                obs[i * GRID + GRID - 1 - j] = obs[i * GRID + j];
            }
        }
        let map = saliency_map(&p, &obs, &SaliencyConfig::default()).unwrap();
        for i in 0..GRID {
            for j in 0..GRID {
                let (a, b) = (map[i * GRID + j], map[i * GRID + GRID - 1 - j]);
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-12), "({i},{j}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn saliency_decays_away_from_read_cell() {
        // a policy that reads only cell (a, b)
        let (a, b) = (6usize, 9usize);
        let mut p = grid_policy(0);
        for t in p.mlp.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.mlp.layers[0].weight.data_mut()[(a * GRID + b) * 16] = 1.0;
        p.mlp.layers[1].weight.data_mut()[0] = 1.0;
        let mut obs = vec![0.0f32; GridDriveEnv::OBS_DIM];
        obs[a * GRID + b] = 1.0;
        let map = saliency_map(&p, &obs, &SaliencyConfig::default()).unwrap();
        let at = |i: usize, j: usize| map[i * GRID + j];
        for d in 1..6 {
            assert!(at(a, b + d) < at(a, b + d - 1));
            assert!(at(a, b - d.min(b)) <= at(a, b - (d - 1).min(b)));
            assert!(at(a + d, b) < at(a + d - 1, b));
            assert!(at(a - d.min(a), b) <= at(a - (d - 1).min(a), b));
        }
    }

    #[test]
    fn kl_hand_case_and_properties() {
        let p = [0.7, 0.1, 0.1, 0.1];
        let u = [0.25; 4];
        let hand = 0.7 * (0.7f64 / 0.25).ln() + 3.0 * 0.1 * (0.1f64 / 0.25).ln();
        assert!((kl_divergence(&p, &u) - hand).abs() < 1e-6);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&u, &p) > 0.0);
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
    }

    #[test]
    fn attdiv_self_is_zero() {
        let p = grid_policy(8);
        let obs = random_obs(9);
        assert_eq!(attdiv(&p, &p, &obs, &SaliencyConfig::default()).unwrap(), 0.0);
        let q = grid_policy(10);
        assert!(attdiv(&q, &p, &obs, &SaliencyConfig::default()).unwrap() >= 0.0);
    }
}
