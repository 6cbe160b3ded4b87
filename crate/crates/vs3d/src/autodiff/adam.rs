//! Adam with bias correction, one accumulator pair per parameter tensor.
//! The learning rate is supplied per call so callers can anneal it.

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(VsError::InvalidArgument(format!(
                "adam: {} params / {} grads for {} accumulators",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter().zip(&self.v)) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(VsError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let _ = v;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::row(vec![1.5, -0.25, 3.0]);
        let before = p.clone();
        let g = Tensor::zeros(vec![1, 3]);
        let mut adam = AdamState::new(&[&p]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&g], 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // g = 1, lr = 0.1: m̂ = 1, v̂ = 1, delta = -0.1 / (1 + 1e-8)
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[&p]);
        adam.step(&mut [&mut p], &[&g], 0.1).unwrap();
        let delta = p.scalar_value().unwrap();
        assert!((delta + 0.1).abs() < 1e-8, "delta = {delta}");
    }

    #[test]
    fn constant_gradient_descends_a_quadratic() {
        // loss(x) = (x - 2)^2, gradient evaluated exactly.
        let mut x = Tensor::scalar(5.0);
        let mut adam = AdamState::new(&[&x]);
        let loss = |x: f64| (x - 2.0) * (x - 2.0);
        let mut prev = loss(x.scalar_value().unwrap());
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * (x.scalar_value().unwrap() - 2.0));
            adam.step(&mut [&mut x], &[&g], 0.1).unwrap();
            let cur = loss(x.scalar_value().unwrap());
            assert!(cur < prev, "loss must decrease monotonically: {cur} vs {prev}");
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::row(vec![1.0, 2.0]);
        let g = Tensor::row(vec![1.0, 2.0, 3.0]);
        let mut adam = AdamState::new(&[&p]);
        assert!(adam.step(&mut [&mut p], &[&g], 0.1).is_err());
    }
}
