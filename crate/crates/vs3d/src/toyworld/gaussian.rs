//! Analytic velocity field for the independent coupling between N(0, I) at
//! t=1 and N(m, s²I) at t=0.
//!
//! With x_t = (1-t)·x0 + t·ε the triple (x0, ε, x_t) is jointly Gaussian, so
//! the marginal velocity E[ε - x0 | x_t = x] is available in closed form:
//!
//!   v(x, t) = (t - (1-t)s²) / ((1-t)²s² + t²) · (x - (1-t)m) - m
//!
//! which the samplers can integrate exactly enough to compare transported
//! statistics against the target.

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};
use crate::flow::{Condition, VelocityField, CONDITION_WIDTH};

#[derive(Debug, Clone)]
pub struct GaussianOracleField {
    mean: Vec<f64>,
    std: f64,
}

impl GaussianOracleField {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if std <= 0.0 || !std.is_finite() {
            return Err(VsError::InvalidArgument(format!("std must be positive, got {std}")));
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(VsError::NonFinite { op: "gaussian_oracle" });
        }
        Ok(GaussianOracleField { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn coeff(&self, t: f64) -> f64 {
        let s2 = self.std * self.std;
        let var = (1.0 - t) * (1.0 - t) * s2 + t * t;
        (t - (1.0 - t) * s2) / var
    }
}

impl VelocityField for GaussianOracleField {
    fn condition_width(&self) -> usize {
        CONDITION_WIDTH
    }

    // The oracle ignores the condition: it is the unconditional marginal flow.
    fn velocity(&self, x: &Tensor, t: f64, _cond: &Condition) -> Result<Tensor> {
        if x.numel() != self.mean.len() {
            return Err(VsError::ShapeMismatch {
                op: "gaussian_oracle",
                lhs: vec![self.mean.len()],
                rhs: x.shape().to_vec(),
            });
        }
        let c = self.coeff(t);
        let data = x
            .data()
            .iter()
            .zip(&self.mean)
            .map(|(&xi, &mi)| c * (xi - (1.0 - t) * mi) - mi)
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}
