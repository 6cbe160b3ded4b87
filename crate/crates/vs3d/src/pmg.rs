//! Partial-mean guidance: contrast the full S-sample mean of the velocity
//! difference with the noisier mean of the first L draws and extrapolate
//! away from the noisier one, u = (1+w)·μ̂_S - w·μ̂_L. Where no consistent
//! edit signal exists both means hover near zero and the extrapolation has
//! nothing to amplify.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};
use crate::flowedit::VdeltaSamples;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmgConfig {
    /// Extrapolation weight w ≥ 0.
    pub weight: f64,
    /// Partial-sample count L; must stay below the per-step budget S.
    pub partial: usize,
}

impl Default for PmgConfig {
    fn default() -> Self {
        PmgConfig {
            weight: 1.2,
            partial: 2,
        }
    }
}

impl PmgConfig {
    pub fn validate(&self, s_samples: usize) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(VsError::InvalidArgument(format!(
                "extrapolation weight must be finite and >= 0, got {}",
                self.weight
            )));
        }
        if self.partial == 0 || self.partial >= s_samples {
            return Err(VsError::InvalidArgument(format!(
                "need 1 <= L < S, got L={} S={}",
                self.partial, s_samples
            )));
        }
        Ok(())
    }
}

/// Full-sample mean and the mean of the first L draws (nested subsample, in
/// draw order).
pub fn partial_means(samples: &VdeltaSamples, l: usize) -> Result<(Tensor, Tensor)> {
    if l == 0 || l >= samples.len() {
        return Err(VsError::InvalidArgument(format!(
            "need 1 <= L < S, got L={} S={}",
            l,
            samples.len()
        )));
    }
    Ok((samples.mean()?, samples.mean_of_first(l)?))
}

/// The extrapolated update u = (1+w)·μ̂_S - w·μ̂_L.
pub fn pmg_update(samples: &VdeltaSamples, config: &PmgConfig) -> Result<Tensor> {
    config.validate(samples.len())?;
    let (mu_s, mu_l) = partial_means(samples, config.partial)?;
    mu_s.scale(1.0 + config.weight)?.sub(&mu_l.scale(config.weight)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(values: &[f64]) -> VdeltaSamples {
        VdeltaSamples::from_vec(values.iter().map(|&v| Tensor::scalar(v)).collect()).unwrap()
    }

    #[test]
    fn means_on_the_arithmetic_example() {
        let samples = scalars(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (mu_s, mu_l) = partial_means(&samples, 2).unwrap();
        assert_eq!(mu_s.scalar_value().unwrap(), 3.0);
        assert_eq!(mu_l.scalar_value().unwrap(), 1.5);
    }

    #[test]
    fn update_on_the_arithmetic_example() {
        let samples = scalars(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let cfg = PmgConfig {
            weight: 1.2,
            partial: 2,
        };
        let u = pmg_update(&samples, &cfg).unwrap().scalar_value().unwrap();
        assert!((u - 4.8).abs() < 1e-12, "2.2·3 - 1.2·1.5 = 4.8, got {u}");
    }

    #[test]
    fn zero_weight_reduces_to_plain_mean() {
        let samples = scalars(&[0.4, -1.0, 2.2, 0.0]);
        let cfg = PmgConfig {
            weight: 0.0,
            partial: 2,
        };
        let u = pmg_update(&samples, &cfg).unwrap();
        let mean = samples.mean().unwrap();
        assert!(u.sub(&mean).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn equal_samples_pass_through_for_any_config() {
        let v = Tensor::row(vec![0.3, -0.7, 1.1]);
        let samples = VdeltaSamples::from_vec(vec![v.clone(); 5]).unwrap();
        for (w, l) in [(0.0, 1), (1.2, 2), (5.0, 4)] {
            let u = pmg_update(
                &samples,
                &PmgConfig {
                    weight: w,
                    partial: l,
                },
            )
            .unwrap();
            assert!(u.sub(&v).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn partial_mean_depends_on_order_but_full_mean_does_not() {
        let fwd = scalars(&[1.0, 2.0, 3.0, 4.0]);
        let rev = scalars(&[4.0, 3.0, 2.0, 1.0]);
        let (s1, l1) = partial_means(&fwd, 2).unwrap();
        let (s2, l2) = partial_means(&rev, 2).unwrap();
        assert_eq!(s1.scalar_value().unwrap(), s2.scalar_value().unwrap());
        assert_ne!(l1.scalar_value().unwrap(), l2.scalar_value().unwrap());
    }

    #[test]
    fn l_bounds_enforced() {
        let samples = scalars(&[1.0, 2.0, 3.0]);
        assert!(partial_means(&samples, 0).is_err());
        assert!(partial_means(&samples, 3).is_err());
        assert!(PmgConfig {
            weight: 1.2,
            partial: 5
        }
        .validate(5)
        .is_err());
    }

    #[test]
    fn update_is_linear_in_the_samples() {
        let samples = scalars(&[0.5, -0.25, 1.5, 2.0, -1.0]);
        let scaled = scalars(&[1.5, -0.75, 4.5, 6.0, -3.0]);
        let cfg = PmgConfig::default();
        let u = pmg_update(&samples, &cfg).unwrap().scalar_value().unwrap();
        let u3 = pmg_update(&scaled, &cfg).unwrap().scalar_value().unwrap();
        assert!((u3 - 3.0 * u).abs() < 1e-12);
    }
}
