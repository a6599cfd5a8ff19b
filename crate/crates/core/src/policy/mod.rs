//! Diagonal-Gaussian MLP policies, full precision or fake-quantized.
//!
//! Hidden layers are `tanh`. When quantizers are attached, every hidden
//! layer's weight matrix and its post-`tanh` activation are fake-quantized;
//! the output layer stays full precision.

mod checkpoint;

pub use checkpoint::{
    decode, encode, load, load_with_packed, save, save_with_packed, CheckpointMeta, PackedSection, FORMAT_VERSION,
    MAGIC, PACKED_VERSION,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{self, FakeQuantizer, QuantSpec};
use crate::tensor::{add_row_bias, matmul, NodeId, Tape, Tensor};

/// `½·ln(2π)`
pub const HALF_LN_2PI: f32 = 0.918_938_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Multi-layer perceptron with `tanh` hidden activations and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Normal init with std `1/sqrt(fan_in)`; the output layer is scaled
    /// by `out_scale`.
    pub fn new(dims: &[usize], out_scale: f32, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut std = 1.0 / (fan_in as f32).sqrt();
                if i == last {
                    std *= out_scale;
                }
                let normal = Normal::new(0.0f32, std).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Ok(Linear {
                    weight: Tensor::new(vec![fan_in, fan_out], data)?,
                    bias: Tensor::zeros(vec![fan_out]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.weight), tape.param(&l.bias))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn read_grads(&mut self, tape: &Tape, nodes: &[(NodeId, NodeId)]) -> Result<()> {
        for (l, &(w, b)) in self.layers.iter_mut().zip(nodes) {
            l.weight.zero_grad();
            l.bias.zero_grad();
            tape.accumulate_grad_into(w, &mut l.weight)?;
            tape.accumulate_grad_into(b, &mut l.bias)?;
        }
        Ok(())
    }

    /// Unquantized batch forward: `x` is `[n × input_dim]`.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        forward_values(&self.layers, None, x, n)
    }

    pub fn forward_tape(&self, tape: &mut Tape, nodes: &[(NodeId, NodeId)], x: NodeId) -> Result<NodeId> {
        forward_nodes(tape, nodes, None, x)
    }
}

/// Quantizers of one hidden layer. Only the first layer quantizes its
/// input; later layers receive the previous layer's quantized output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantizers {
    pub input: Option<FakeQuantizer>,
    pub weight: FakeQuantizer,
    pub act: FakeQuantizer,
}

/// Tape handles of a quantizer pair's step tensors.
#[derive(Debug, Clone, Copy)]
pub struct QuantNodes {
    pub input_step: Option<NodeId>,
    pub weight_step: NodeId,
    pub act_step: NodeId,
}

fn forward_values(layers: &[Linear], quant: Option<&[LayerQuantizers]>, x: &[f32], n: usize) -> Vec<f32> {
    let mut h = x.to_vec();
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let (k, out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let q = quant.filter(|_| i < last).map(|q| &q[i]);
        if let Some(iq) = q.and_then(|q| q.input.as_ref()) {
            h = quant::fake_quant_values(&h, iq.steps(), k, &iq.spec);
        }
        let z = match q {
            Some(q) => {
                let w = quant::fake_quant_values(layer.weight.data(), q.weight.steps(), out, &q.weight.spec);
                matmul(&h, &w, n, k, out)
            }
            None => matmul(&h, layer.weight.data(), n, k, out),
        };
        h = finish_layer(layers, quant, i, z);
    }
    h
}

/// Bias, then tanh and the activation quantizer on hidden layers.
fn finish_layer(layers: &[Linear], quant: Option<&[LayerQuantizers]>, i: usize, mut z: Vec<f32>) -> Vec<f32> {
    let layer = &layers[i];
    add_row_bias(&mut z, layer.bias.data());
    if i < layers.len() - 1 {
        z.iter_mut().for_each(|v| *v = v.tanh());
        if let Some(q) = quant.map(|q| &q[i]) {
            z = quant::fake_quant_values(&z, q.act.steps(), layer.weight.shape()[1], &q.act.spec);
        }
    }
    z
}

fn forward_nodes(
    tape: &mut Tape,
    nodes: &[(NodeId, NodeId)],
    quant: Option<(&[LayerQuantizers], &[QuantNodes])>,
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    let last = nodes.len() - 1;
    for (i, &(w, b)) in nodes.iter().enumerate() {
        let q = quant.filter(|_| i < last).map(|(q, qn)| (&q[i], qn[i]));
        if let Some((q, qn)) = q {
            if let (Some(iq), Some(step)) = (&q.input, qn.input_step) {
                h = tape.fake_quant(h, step, iq.spec, iq.grad_scale)?;
            }
        }
        let w = match q {
            Some((q, qn)) => tape.fake_quant(w, qn.weight_step, q.weight.spec, q.weight.grad_scale)?,
            None => w,
        };
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        h = if i < last {
            let a = tape.tanh(z);
            match q {
                Some((q, qn)) => tape.fake_quant(a, qn.act_step, q.act.spec, q.act.grad_scale)?,
                None => a,
            }
        } else {
            z
        };
    }
    Ok(h)
}

/// Provenance carried into checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub env: String,
    pub seed: u64,
    pub provenance: String,
}

/// Tape handles for every policy tensor.
#[derive(Debug, Clone)]
pub struct PolicyNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub log_std: NodeId,
    pub quant: Vec<QuantNodes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mlp: Mlp,
    /// `[1 × action_dim]`
    pub log_std: Tensor,
    /// One pair per hidden layer when attached.
    pub quant: Option<Vec<LayerQuantizers>>,
    pub meta: PolicyMeta,
}

impl GaussianPolicy {
    pub fn new(dims: &[usize], init_log_std: f32, rng: &mut impl Rng) -> Result<Self> {
        let mlp = Mlp::new(dims, 0.1, rng)?;
        let act = mlp.output_dim();
        Ok(Self {
            mlp,
            log_std: Tensor::new(vec![1, act], vec![init_log_std; act])?,
            quant: None,
            meta: PolicyMeta::default(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    pub fn hidden_layers(&self) -> usize {
        self.mlp.layers.len() - 1
    }

    /// Full-precision copy with quantizers detached.
    pub fn without_quantizers(&self) -> Self {
        Self {
            quant: None,
            ..self.clone()
        }
    }

    pub fn set_quantizers(&mut self, quant: Vec<LayerQuantizers>) -> Result<()> {
        if quant.len() != self.hidden_layers() {
            return Err(Error::Config(format!(
                "{} quantizer pairs for {} hidden layers",
                quant.len(),
                self.hidden_layers()
            )));
        }
        for (q, l) in quant.iter().zip(&self.mlp.layers) {
            let out = l.weight.shape()[1];
            if let Some(iq) = &q.input {
                if iq.step.numel() != 1 || iq.spec.granularity != quant::Granularity::PerTensor {
                    return Err(Error::Config("input quantizers must be per-tensor".into()));
                }
            }
            for fq in [&q.weight, &q.act] {
                if fq.step.numel() != 1 && fq.step.numel() != out {
                    return Err(Error::Config("per-channel step count must equal layer width".into()));
                }
            }
            if q.act.spec.granularity != quant::Granularity::PerTensor {
                return Err(Error::Config("activation quantizers must be per-tensor".into()));
            }
        }
        self.quant = Some(quant);
        Ok(())
    }

    /// Attaches quantizers layer by layer: the input step from the min/max
    /// of `calib_obs`, weight steps from [`quant::init_step_size`], and
    /// activation steps from the min/max of the activations that
    /// `calib_obs` produces through the already-quantized prefix.
    pub fn attach_quantizers(&mut self, weight_spec: QuantSpec, act_spec: QuantSpec, calib_obs: &[f32]) -> Result<()> {
        let d = self.obs_dim();
        if calib_obs.is_empty() || !calib_obs.len().is_multiple_of(d) {
            return Err(Error::Contract(format!(
                "calibration batch of {} values is not a multiple of obs dim {d}",
                calib_obs.len()
            )));
        }
        let n = calib_obs.len() / d;
        let mut quant = Vec::with_capacity(self.hidden_layers());
        let in_spec = QuantSpec {
            signed: true,
            ..act_spec
        };
        let iq = FakeQuantizer::new(in_spec, vec![quant::minmax_step(calib_obs, &in_spec)])?;
        let mut h = iq.forward(calib_obs, d)?;
        let mut input = Some(iq);
        for layer in &self.mlp.layers[..self.hidden_layers()] {
            let (k, out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let wq = FakeQuantizer::for_weight(&layer.weight, weight_spec)?;
            let w = wq.forward(layer.weight.data(), out)?;
            let mut z = matmul(&h, &w, n, k, out);
            add_row_bias(&mut z, layer.bias.data());
            z.iter_mut().for_each(|v| *v = v.tanh());
            let aq = FakeQuantizer::new(act_spec, vec![quant::minmax_step(&z, &act_spec)])?;
            h = aq.forward(&z, out)?;
            quant.push(LayerQuantizers {
                input: input.take(),
                weight: wq,
                act: aq,
            });
        }
        self.set_quantizers(quant)
    }

    fn check_obs(&self, obs: &[f32], n: usize) -> Result<()> {
        if obs.len() != n * self.obs_dim() {
            return Err(Error::shape("policy forward", &[n, self.obs_dim()], &[obs.len()]));
        }
        Ok(())
    }

    /// Action means for a `[n × obs_dim]` batch.
    pub fn mean_batch(&self, obs: &[f32], n: usize) -> Result<Vec<f32>> {
        self.check_obs(obs, n)?;
        Ok(forward_values(&self.mlp.layers, self.quant.as_deref(), obs, n))
    }

    /// `(μ, σ)` for a single observation.
    pub fn forward(&self, obs: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let mu = self.mean_batch(obs, 1)?;
        Ok((mu, self.sigma()))
    }

    pub fn sigma(&self) -> Vec<f32> {
        self.log_std.data().iter().map(|v| v.exp()).collect()
    }

    /// `log π(a|s)` of a diagonal Gaussian.
    pub fn log_prob(&self, obs: &[f32], action: &[f32]) -> Result<f32> {
        if action.len() != self.action_dim() {
            return Err(Error::shape("log_prob", &[self.action_dim()], &[action.len()]));
        }
        let (mu, _) = self.forward(obs)?;
        Ok(gaussian_log_prob(&mu, self.log_std.data(), action))
    }

    /// `μ + σ ⊙ z` with `z ~ N(0, I)` drawn from `rng`, or exactly `μ` when
    /// `deterministic`.
    pub fn sample(&self, obs: &[f32], deterministic: bool, rng: &mut impl Rng) -> Result<Vec<f32>> {
        let (mut a, sigma) = self.forward(obs)?;
        if !deterministic {
            for (a, s) in a.iter_mut().zip(sigma) {
                let z: f32 = StandardNormal.sample(rng);
                *a += s * z;
            }
        }
        Ok(a)
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> PolicyNodes {
        let layers = self.mlp.register(tape, trainable);
        let log_std = if trainable {
            tape.param(&self.log_std)
        } else {
            tape.constant(self.log_std.clone())
        };
        let quant = self
            .quant
            .iter()
            .flatten()
            .map(|q| {
                let step = |t: &mut Tape, fq: &FakeQuantizer| {
                    if trainable && fq.is_trainable() {
                        t.param(&fq.step)
                    } else {
                        t.constant(fq.step.clone())
                    }
                };
                QuantNodes {
                    input_step: q.input.as_ref().map(|iq| step(tape, iq)),
                    weight_step: step(tape, &q.weight),
                    act_step: step(tape, &q.act),
                }
            })
            .collect();
        PolicyNodes { layers, log_std, quant }
    }

    /// Recorded forward of the action means for a `[n × obs_dim]` node.
    pub fn mean_tape(&self, tape: &mut Tape, nodes: &PolicyNodes, obs: NodeId) -> Result<NodeId> {
        let quant = self.quant.as_deref().map(|q| (q, nodes.quant.as_slice()));
        forward_nodes(tape, &nodes.layers, quant, obs)
    }

    /// Per-row `log π(a|s)` as an `[n]` node.
    pub fn log_prob_tape(&self, tape: &mut Tape, nodes: &PolicyNodes, mu: NodeId, actions: NodeId) -> Result<NodeId> {
        let (n, _) = tape.value(mu).dims2()?;
        let ls = tape.broadcast_rows(nodes.log_std, n)?;
        let neg_ls = tape.neg(ls);
        let inv_sigma = tape.exp(neg_ls);
        let diff = tape.sub(actions, mu)?;
        let z = tape.mul(diff, inv_sigma)?;
        let z2 = tape.square(z);
        let quad = tape.scale(z2, -0.5);
        let t = tape.sub(quad, ls)?;
        let t = tape.add_scalar(t, -HALF_LN_2PI);
        tape.sum_rows(t)
    }

    /// Copies gradients from `tape` into the tensors' `grad` fields.
    pub fn read_grads(&mut self, tape: &Tape, nodes: &PolicyNodes) -> Result<()> {
        self.mlp.read_grads(tape, &nodes.layers)?;
        self.log_std.zero_grad();
        tape.accumulate_grad_into(nodes.log_std, &mut self.log_std)?;
        if let Some(q) = &mut self.quant {
            for (q, qn) in q.iter_mut().zip(&nodes.quant) {
                if let (Some(iq), Some(step)) = (&mut q.input, qn.input_step) {
                    iq.step.zero_grad();
                    tape.accumulate_grad_into(step, &mut iq.step)?;
                }
                q.weight.step.zero_grad();
                q.act.step.zero_grad();
                tape.accumulate_grad_into(qn.weight_step, &mut q.weight.step)?;
                tape.accumulate_grad_into(qn.act_step, &mut q.act.step)?;
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: layer weights and biases, log_std,
    /// then learned step sizes.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.mlp.params_mut();
        out.push(&mut self.log_std);
        if let Some(q) = &mut self.quant {
            for q in q.iter_mut() {
                if let Some(iq) = q.input.as_mut().filter(|iq| iq.is_trainable()) {
                    out.push(&mut iq.step);
                }
                if q.weight.is_trainable() {
                    out.push(&mut q.weight.step);
                }
                if q.act.is_trainable() {
                    out.push(&mut q.act.step);
                }
            }
        }
        out
    }

    /// Re-applies step-size invariants after an optimizer update.
    pub fn clamp_steps(&mut self) {
        if let Some(q) = &mut self.quant {
            for q in q.iter_mut() {
                if let Some(iq) = &mut q.input {
                    iq.clamp_step();
                }
                q.weight.clamp_step();
                q.act.clamp_step();
            }
        }
    }

    /// Observations as the first matmul sees them: through the input
    /// quantizer when one is attached.
    pub fn first_layer_input(&self, obs: &[f32]) -> Vec<f32> {
        let iq = self
            .quant
            .as_ref()
            .and_then(|q| q.first())
            .and_then(|q| q.input.as_ref());
        match iq {
            Some(iq) => quant::fake_quant_values(obs, iq.steps(), self.obs_dim(), &iq.spec),
            None => obs.to_vec(),
        }
    }

    /// Action means given the first layer's product `first_layer_input · W₀`
    /// (`[n × width₀]`, before the bias).
    pub fn mean_from_first_product(&self, z: Vec<f32>, n: usize) -> Result<Vec<f32>> {
        let layers = &self.mlp.layers;
        let width = layers[0].weight.shape()[1];
        if z.len() != n * width {
            return Err(Error::shape("first-layer product", &[n, width], &[z.len()]));
        }
        let quant = self.quant.as_deref();
        let mut h = finish_layer(layers, quant, 0, z);
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate().skip(1) {
            let (k, out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let z = match quant.filter(|_| i < last) {
                Some(_) => matmul(&h, &self.effective_weights(i), n, k, out),
                None => matmul(&h, layer.weight.data(), n, k, out),
            };
            h = finish_layer(layers, quant, i, z);
        }
        Ok(h)
    }

    /// Hidden layer weights as the quantized forward sees them.
    pub fn effective_weights(&self, layer: usize) -> Vec<f32> {
        let l = &self.mlp.layers[layer];
        match self.quant.as_ref().filter(|_| layer < self.hidden_layers()) {
            Some(q) => {
                let q = &q[layer].weight;
                quant::fake_quant_values(l.weight.data(), q.steps(), l.weight.shape()[1], &q.spec)
            }
            None => l.weight.data().to_vec(),
        }
    }
}

pub fn gaussian_log_prob(mu: &[f32], log_std: &[f32], action: &[f32]) -> f32 {
    let lp: f64 = mu
        .iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a as f64 - m as f64) * (-ls as f64).exp();
            -0.5 * z * z - ls as f64 - HALF_LN_2PI as f64
        })
        .sum();
    lp as f32
}
