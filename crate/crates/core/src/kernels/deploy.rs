use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{dequantize, gemm_int, PackedMatrix, Scale};
use crate::envs::{Controller, Env};
use crate::error::{Error, Result};
use crate::policy::{self, GaussianPolicy, PackedSection};
use crate::quant::{self, Granularity, QuantSpec};
use crate::tensor::{add_row_bias, matmul};

/// Smallest packed container (4 or 8 bits) holding every code of `spec`.
fn container_bits(spec: &QuantSpec) -> Result<u8> {
    let (qn, qp) = (spec.qn(), spec.qp());
    [4u8, 8]
        .into_iter()
        .find(|&b| {
            let (lo, hi) = super::code_range(b);
            qn >= lo && qp <= hi
        })
        .ok_or_else(|| Error::Config(format!("{}-bit codes do not fit a signed 8-bit container", spec.bits)))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeployedLayer {
    /// Packed weight codes; output re-quantized to activation codes.
    Quantized {
        /// Quantizer applied to a float input before the integer product.
        input: Option<(QuantSpec, f32)>,
        weights: PackedMatrix,
        bias: Vec<f32>,
        act_spec: QuantSpec,
        act_step: f32,
    },
    Float {
        weight: Vec<f32>,
        rows: usize,
        cols: usize,
        bias: Vec<f32>,
    },
}

/// Inference-only policy running hidden layers on packed integer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedPolicy {
    pub layers: Vec<DeployedLayer>,
    pub log_std: Vec<f32>,
    pub id: String,
}

enum Hidden {
    Float(Vec<f32>),
    Codes { codes: Vec<i32>, step: f32, bits: u8 },
}

impl DeployedPolicy {
    /// Packs the hidden layers of a quantized policy. Without quantizers
    /// every layer runs on the plain float path.
    pub fn from_policy(p: &GaussianPolicy) -> Result<Self> {
        Self::build(p, &[])
    }

    fn build(p: &GaussianPolicy, packed: &[PackedSection]) -> Result<Self> {
        let hidden = p.hidden_layers();
        let mut layers = Vec::with_capacity(p.mlp.layers.len());
        for (i, l) in p.mlp.layers.iter().enumerate() {
            let (rows, cols) = (l.weight.shape()[0], l.weight.shape()[1]);
            let bias = l.bias.data().to_vec();
            match p.quant.as_ref().filter(|_| i < hidden) {
                Some(q) => {
                    let q = &q[i];
                    let scale = match q.weight.spec.granularity {
                        Granularity::PerTensor => Scale::Tensor(q.weight.steps()[0]),
                        Granularity::PerChannel => Scale::Cols(q.weight.steps().to_vec()),
                    };
                    let weights = match packed.iter().find(|s| s.layer == i) {
                        Some(s) => {
                            if (s.rows, s.cols) != (rows, cols) {
                                return Err(Error::shape("packed section", &[rows, cols], &[s.rows, s.cols]));
                            }
                            PackedMatrix {
                                rows,
                                cols,
                                bits: s.bits,
                                data: s.data.clone(),
                                scale,
                            }
                        }
                        None => {
                            let codes = q.weight.codes(l.weight.data(), cols)?;
                            PackedMatrix::pack(&codes, rows, cols, container_bits(&q.weight.spec)?, scale)?
                        }
                    };
                    container_bits(&q.act.spec)?;
                    let input = match &q.input {
                        Some(iq) => {
                            container_bits(&iq.spec)?;
                            Some((iq.spec, iq.steps()[0]))
                        }
                        None => None,
                    };
                    layers.push(DeployedLayer::Quantized {
                        input,
                        weights,
                        bias,
                        act_spec: q.act.spec,
                        act_step: q.act.steps()[0],
                    });
                }
                None => layers.push(DeployedLayer::Float {
                    weight: l.weight.data().to_vec(),
                    rows,
                    cols,
                    bias,
                }),
            }
        }
        Ok(Self {
            layers,
            log_std: p.log_std.data().to_vec(),
            id: format!("deployed:{}", p.meta.provenance),
        })
    }

    /// Loads a quantized checkpoint, using its packed section when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (p, packed) = policy::load_with_packed(path)?;
        if !p.is_quantized() {
            return Err(Error::Config("checkpoint carries no quantization spec".into()));
        }
        Self::build(&p, &packed)
    }

    pub fn obs_dim(&self) -> usize {
        match &self.layers[0] {
            DeployedLayer::Quantized { weights, .. } => weights.rows,
            DeployedLayer::Float { rows, .. } => *rows,
        }
    }

    pub fn packed_weight_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                DeployedLayer::Quantized { weights, .. } => weights.packed_bytes(),
                DeployedLayer::Float { weight, .. } => 4 * weight.len(),
            })
            .sum()
    }

    /// Action means for a `[n × obs_dim]` batch.
    pub fn forward(&self, obs: &[f32], n: usize) -> Result<Vec<f32>> {
        if obs.len() != n * self.obs_dim() {
            return Err(Error::shape("deployed forward", &[n, self.obs_dim()], &[obs.len()]));
        }
        let last = self.layers.len() - 1;
        let mut h = Hidden::Float(obs.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                DeployedLayer::Quantized {
                    input,
                    weights,
                    bias,
                    act_spec,
                    act_step,
                } => {
                    let (k, out) = (weights.rows, weights.cols);
                    if let (Hidden::Float(x), Some((spec, step))) = (&h, input) {
                        h = Hidden::Codes {
                            codes: quant::quantize_codes(x, &[*step], k, spec),
                            step: *step,
                            bits: container_bits(spec)?,
                        };
                    }
                    let mut z = match h {
                        Hidden::Codes { codes, step, bits } => {
                            let a = PackedMatrix::pack(&codes, n, k, bits, Scale::Tensor(step))?;
                            dequantize(&gemm_int(&a, weights)?, &a.scale, &weights.scale)?
                        }
                        Hidden::Float(x) => {
                            let w = dequantized(weights);
                            matmul(&x, &w, n, k, out)
                        }
                    };
                    add_row_bias(&mut z, bias);
                    z.iter_mut().for_each(|v| *v = v.tanh());
                    Hidden::Codes {
                        codes: quant::quantize_codes(&z, &[*act_step], out, act_spec),
                        step: *act_step,
                        bits: container_bits(act_spec)?,
                    }
                }
                DeployedLayer::Float {
                    weight,
                    rows,
                    cols,
                    bias,
                } => {
                    let x = match h {
                        Hidden::Float(x) => x,
                        Hidden::Codes { codes, step, .. } => codes.iter().map(|&c| c as f32 * step).collect(),
                    };
                    let mut z = matmul(&x, weight, n, *rows, *cols);
                    add_row_bias(&mut z, bias);
                    if i < last {
                        z.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    Hidden::Float(z)
                }
            };
        }
        match h {
            Hidden::Float(v) => Ok(v),
            Hidden::Codes { .. } => Err(Error::Contract("output layer must be full precision".into())),
        }
    }
}

fn dequantized(w: &PackedMatrix) -> Vec<f32> {
    let codes = w.unpack();
    match &w.scale {
        Scale::Tensor(s) => codes.iter().map(|&c| c as f32 * s).collect(),
        Scale::Cols(s) => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f32 * s[i % w.cols])
            .collect(),
        Scale::Rows(s) => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f32 * s[i / w.cols])
            .collect(),
    }
}

impl Controller for DeployedPolicy {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn act(&self, _: &Env, obs: &[f32], deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let mut a = self.forward(obs, 1)?;
        if !deterministic {
            for (a, ls) in a.iter_mut().zip(&self.log_std) {
                let z: f32 = StandardNormal.sample(rng);
                *a += ls.exp() * z;
            }
        }
        Ok(a)
    }

    fn obs_dim(&self) -> Option<usize> {
        Some(DeployedPolicy::obs_dim(self))
    }
}

/// Saves `p` with a packed-weights section for every hidden layer.
pub fn export_packed(p: &GaussianPolicy, path: impl AsRef<Path>) -> Result<()> {
    let d = DeployedPolicy::from_policy(p)?;
    let sections: Vec<PackedSection> = d
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            DeployedLayer::Quantized { weights, .. } => Some(PackedSection {
                layer: i,
                rows: weights.rows,
                cols: weights.cols,
                bits: weights.bits,
                data: weights.data.clone(),
            }),
            DeployedLayer::Float { .. } => None,
        })
        .collect();
    if sections.is_empty() {
        return Err(Error::Config("policy has no quantized layers to pack".into()));
    }
    policy::save_with_packed(p, &sections, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Method;
    use rand::{Rng, SeedableRng};

    fn quantized(bits: u8, per_channel: bool, seed: u64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GaussianPolicy::new(&[6, 32, 32, 2], -0.5, &mut rng).unwrap();
        let calib: Vec<f32> = (0..6 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut w = QuantSpec::weights(bits, Method::Lsq);
        if per_channel {
            w.granularity = Granularity::PerChannel;
        }
        p.attach_quantizers(w, QuantSpec::activations(bits, true, Method::Lsq), &calib)
            .unwrap();
        p
    }

    fn obs(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 6).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matches_fake_quant_forward() {
        for bits in [2, 4, 8] {
            for pc in [false, true] {
                let p = quantized(bits, pc, bits as u64);
                let d = DeployedPolicy::from_policy(&p).unwrap();
                let x = obs(100, 7);
                let a = d.forward(&x, 100).unwrap();
                let b = p.mean_batch(&x, 100).unwrap();
                let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                assert!(worst <= 1e-5, "bits {bits} per-channel {pc}: {worst}");
            }
        }
    }

    #[test]
    fn unquantized_falls_back_bit_exact() {
        let p = quantized(8, false, 1).without_quantizers();
        let d = DeployedPolicy::from_policy(&p).unwrap();
        let x = obs(20, 3);
        assert_eq!(d.forward(&x, 20).unwrap(), p.mean_batch(&x, 20).unwrap());
    }

    #[test]
    fn packed_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ilq");
        let p = quantized(4, true, 5);
        export_packed(&p, &path).unwrap();
        let d = DeployedPolicy::load(&path).unwrap();
        assert_eq!(d, DeployedPolicy::from_policy(&p).unwrap());
        let x = obs(10, 9);
        assert_eq!(d.forward(&x, 10).unwrap(), d.forward(&x, 10).unwrap());

        let fp = dir.path().join("fp.ilq");
        policy::save(&p.without_quantizers(), &fp).unwrap();
        assert!(matches!(DeployedPolicy::load(&fp), Err(Error::Config(_))));
    }

    #[test]
    fn four_bit_memory_is_an_eighth() {
        let p = quantized(4, false, 2);
        let d = DeployedPolicy::from_policy(&p).unwrap();
        for l in &d.layers[..2] {
            let DeployedLayer::Quantized { weights, .. } = l else {
                panic!()
            };
            assert_eq!(weights.packed_bytes() * 8, weights.fp32_bytes());
        }
    }
}
