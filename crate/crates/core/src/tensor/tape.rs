use super::{add_row_bias, matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n×d] + [d]` broadcast over rows.
    AddBias(NodeId, NodeId),
    /// `[d]` or `[1×d]` repeated into `[n×d]`.
    BroadcastRows(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// `[n×d] → [n]`.
    SumRows(NodeId),
    Clamp(NodeId, f32, f32),
    Minimum(NodeId, NodeId),
    FakeQuant {
        x: NodeId,
        step: NodeId,
        spec: QuantSpec,
        grad_scale: Option<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended after their inputs, so
/// index order is a topological order and reverse index order is a valid
/// backward schedule that visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        self.push_leaf(t.clone(), requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push_leaf(t.clone(), true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, mut t: Tensor, requires_grad: bool) -> NodeId {
        t.zero_grad();
        t.set_requires_grad(requires_grad);
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `id` into `target.grad`, adding to any gradient
    /// already there.
    pub fn accumulate_grad_into(&self, id: NodeId, target: &mut Tensor) -> Result<()> {
        let Some(g) = self.grad(id) else {
            return Ok(());
        };
        let merged = match target.grad() {
            Some(prev) => prev.iter().zip(g).map(|(a, b)| a + b).collect(),
            None => g.to_vec(),
        };
        target.set_grad(Some(merged))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("minimum", a, b, Op::Minimum(a, b), f32::min)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(bias).numel() != d {
            return Err(Error::shape(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        add_row_bias(&mut data, self.value(bias).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        if r != 1 {
            return Err(Error::shape("broadcast_rows", self.value(x).shape(), &[1, d]));
        }
        let src = self.value(x).data();
        let data = (0..rows).flat_map(|_| src.iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::BroadcastRows(x), rg))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f32::ln))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|&a| a as f64).sum();
        let m = (s / v.numel() as f64) as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n], data)?, Op::SumRows(x), rg))
    }

    /// Fake quantization of `x` with step(s) held by node `step`: one step
    /// for per-tensor, one per trailing-dimension column otherwise.
    pub fn fake_quant(&mut self, x: NodeId, step: NodeId, spec: QuantSpec, grad_scale: Option<f32>) -> Result<NodeId> {
        let cols = *self.value(x).shape().last().unwrap_or(&1);
        let steps = self.value(step).data();
        if steps.len() != 1 && steps.len() != cols {
            return Err(Error::shape(
                "fake_quant",
                self.value(x).shape(),
                self.value(step).shape(),
            ));
        }
        if let Some(bad) = steps.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("quantizer step {bad} is not positive")));
        }
        let data = quant::fake_quant_values(self.value(x).data(), steps, cols, &spec);
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, step]);
        Ok(self.push(
            t,
            Op::FakeQuant {
                x,
                step,
                spec,
                grad_scale,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of nodes reached
    /// through more than one path are summed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let mut send = |to: NodeId, contrib: Vec<f32>| {
            if !self.nodes[to.0].requires_grad {
                return;
            }
            match &mut grads[to.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| self.nodes[id.0].value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matrix");
                let (_, n) = self.nodes[b.0].value.dims2().expect("matrix");
                if self.nodes[a.0].requires_grad {
                    send(a, matmul_bt(g, val(b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(b, matmul_at(val(a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                send(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                send(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
            Op::Minimum(a, b) => {
                // ties route to the first operand
                let (xa, xb) = (val(a), val(b));
                let pick_a: Vec<bool> = xa.iter().zip(xb).map(|(x, y)| x <= y).collect();
                send(
                    a,
                    g.iter().zip(&pick_a).map(|(&g, &p)| if p { g } else { 0.0 }).collect(),
                );
                send(
                    b,
                    g.iter().zip(&pick_a).map(|(&g, &p)| if p { 0.0 } else { g }).collect(),
                );
            }
            Op::AddBias(x, bias) => {
                send(x, g.to_vec());
                let d = self.nodes[bias.0].value.numel();
                send(bias, column_sums(g, d));
            }
            Op::BroadcastRows(x) => {
                let d = self.nodes[x.0].value.numel();
                send(x, column_sums(g, d));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                send(x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Relu(x) => {
                send(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                send(x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Log(x) => {
                send(x, g.iter().zip(val(x)).map(|(g, v)| g / v).collect());
            }
            Op::Square(x) => {
                send(x, g.iter().zip(val(x)).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Scale(x, c) => send(x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(x, g.to_vec()),
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                send(x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                send(x, vec![g[0] / n as f32; n]);
            }
            Op::SumRows(x) => {
                let (_, d) = self.nodes[x.0].value.dims2().expect("matrix");
                send(x, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect());
            }
            Op::Clamp(x, lo, hi) => {
                send(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(&g, &v)| if (lo..=hi).contains(&v) { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::FakeQuant {
                x,
                step,
                spec,
                grad_scale,
            } => {
                let xv = val(x);
                let steps = val(step);
                let cols = *self.nodes[x.0].value.shape().last().unwrap_or(&1);
                let at = |i: usize| if steps.len() == 1 { steps[0] } else { steps[i % cols] };
                if self.nodes[x.0].requires_grad {
                    let (qn, qp) = (spec.qn() as f32, spec.qp() as f32);
                    let gx = xv
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, &g))| if (qn..=qp).contains(&(v / at(i))) { g } else { 0.0 })
                        .collect();
                    send(x, gx);
                }
                if self.nodes[step.0].requires_grad {
                    let scale = grad_scale.unwrap_or_else(|| quant::lsq_grad_scale(xv.len(), &spec));
                    let mut gs = vec![0.0f64; steps.len()];
                    for (i, (&v, &g)) in xv.iter().zip(g).enumerate() {
                        let slot = if steps.len() == 1 { 0 } else { i % cols };
                        gs[slot] += g as f64 * quant::lsq_step_derivative(v, at(i), &spec) as f64;
                    }
                    send(step, gs.into_iter().map(|v| (v * scale as f64) as f32).collect());
                }
            }
        }
    }
}

fn column_sums(g: &[f32], d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for row in g.chunks_exact(d) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
