use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep matching the parameter list afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// Updates every parameter that carries a gradient. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Contract(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(bad) = p.grad().and_then(|g| g.iter().position(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} (shape {:?}) at element {bad}",
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f32], g: &[f32]) -> Tensor {
        let mut t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        t.set_grad(Some(g.to_vec())).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = param(&[0.5, -1.0], &[0.0, 0.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + ε)
        let mut p = param(&[1.0], &[1.0]);
        let mut opt = Adam::new(0.001);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-7, "{}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = param(&[1.0], &[f32::NAN]);
        let err = Adam::new(0.1).step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = param(&[0.3, 0.7], &[0.2, -0.4]);
            let mut opt = Adam::new(0.01);
            for k in 0..20 {
                p.set_grad(Some(vec![0.1 * k as f32, -0.05])).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = param(&[1.0, 2.0], &[1.0, 1.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut a]).unwrap();
        assert!(opt.step(&mut [&mut b]).is_err());
    }
}
