//! Reconstruction-anchored source injection: per-active-step optimization of
//! the unconditional embedding through a source-reconstruction probe.
//!
//! At each active step both branches are conditioned on the source embedding
//! while keeping their real editing guidance weights, and φ is optimized so
//! that a single Euler step of the velocity difference returns the probe
//! state to the source latent. The optimized φ_t is cached and later
//! substituted for φ0 in both guidance calls of the edit phase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::error::{Result, VsError};
use crate::flow::{
    Condition, ConditionRole, DifferentiableField, GuidanceConfig, Schedule, VelocityField,
};
use crate::flowedit::{couple, NoiseStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasiConfig {
    /// Inner optimization steps K per active timestep.
    pub inner_steps: usize,
    /// Inner-loop learning rate η0.
    pub inner_lr: f64,
    /// Early-stop threshold on the probe loss.
    pub early_stop: f64,
    /// Floor of the linear anneal, as a fraction of η0.
    pub lr_floor_ratio: f64,
    /// Average the probe over all S noises (true) or use the first draw only.
    pub probe_batch: bool,
    /// Re-seed the probe's noise stream identically to the edit phase.
    pub shared_probe_noise: bool,
}

impl Default for RasiConfig {
    fn default() -> Self {
        RasiConfig {
            inner_steps: 3,
            inner_lr: 1e-5,
            early_stop: 1e-5,
            lr_floor_ratio: 0.1,
            probe_batch: true,
            shared_probe_noise: true,
        }
    }
}

impl RasiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(VsError::InvalidArgument("need K >= 1 inner steps".into()));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr > 0.0) {
            return Err(VsError::InvalidArgument("inner lr must be positive".into()));
        }
        if !(self.early_stop.is_finite() && self.early_stop >= 0.0) {
            return Err(VsError::InvalidArgument("early-stop threshold must be >= 0".into()));
        }
        if !(self.lr_floor_ratio.is_finite() && self.lr_floor_ratio >= 0.0) {
            return Err(VsError::InvalidArgument("lr floor ratio must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear anneal over the active steps: η = η0·(1 - a/N) + floor·η0.
    pub fn lr_at(&self, active_index: usize, active_count: usize) -> f64 {
        let frac = if active_count == 0 {
            0.0
        } else {
            active_index as f64 / active_count as f64
        };
        self.inner_lr * (1.0 - frac) + self.lr_floor_ratio * self.inner_lr
    }
}

/// Calibration record for one active step.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiEntry {
    pub step: usize,
    pub t: f64,
    pub loss_initial: f64,
    pub loss_final: f64,
    pub inner_steps_used: usize,
    pub phi: Condition,
}

/// Per-active-step optimized unconditional embeddings, keyed by step index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhiCache {
    entries: BTreeMap<usize, PhiEntry>,
}

impl PhiCache {
    pub fn new() -> Self {
        PhiCache::default()
    }

    pub fn insert(&mut self, entry: PhiEntry) {
        self.entries.insert(entry.step, entry);
    }

    /// The stored vector, exactly as cached; never falls back silently.
    pub fn get(&self, step: usize) -> Result<&Condition> {
        self.entries
            .get(&step)
            .map(|e| &e.phi)
            .ok_or(VsError::MissingPhi { step })
    }

    pub fn entry(&self, step: usize) -> Option<&PhiEntry> {
        self.entries.get(&step)
    }

    pub fn entries(&self) -> impl Iterator<Item = &PhiEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Shared probe algebra: the loss is ‖ C + Σ_s coeffs·v(z, t, φ) ‖² where C
/// collects everything independent of φ. Folding the constant terms first
/// keeps the traced graph small (only the two φ evaluations per noise are on
/// the tape).
struct ProbeParts {
    constant: Tensor,
    /// (state, per-sample scale) for each φ evaluation.
    phi_terms: Vec<(Tensor, f64)>,
    t: f64,
}

fn probe_parts(
    field: &dyn VelocityField,
    z_edit: &Tensor,
    x_src: &Tensor,
    c_src: &Condition,
    guidance: &GuidanceConfig,
    schedule: &Schedule,
    t: f64,
    dt: f64,
    noises: &[Tensor],
) -> Result<ProbeParts> {
    if noises.is_empty() {
        return Err(VsError::InvalidArgument("probe needs at least one noise".into()));
    }
    let w_tgt = schedule.effective_omega(t, guidance.omega_tgt);
    let w_src = schedule.effective_omega(t, guidance.omega_src);
    let s = noises.len() as f64;
    let mut constant = z_edit.sub(x_src)?;
    let mut phi_terms = Vec::new();
    for eps in noises {
        let pair = couple(x_src, z_edit, eps, t)?;
        let v_ct = field.velocity(&pair.z_tgt, t, c_src)?;
        let v_cs = field.velocity(&pair.z_src, t, c_src)?;
        constant = constant
            .add(&v_ct.scale(dt / s * (1.0 + w_tgt))?)?
            .sub(&v_cs.scale(dt / s * (1.0 + w_src))?)?;
        // -ω_tgt·v(z_tgt, φ) + ω_src·v(z_src, φ), scaled by dt/S
        if w_tgt != 0.0 {
            phi_terms.push((pair.z_tgt.clone(), -dt / s * w_tgt));
        }
        if w_src != 0.0 {
            phi_terms.push((pair.z_src.clone(), dt / s * w_src));
        }
    }
    Ok(ProbeParts {
        constant,
        phi_terms,
        t,
    })
}

/// Probe loss: squared distance between one Euler step of the
/// source-conditioned velocity difference and the source latent, averaged
/// over the supplied probe noises.
#[allow(clippy::too_many_arguments)]
pub fn probe_loss(
    field: &dyn VelocityField,
    z_edit: &Tensor,
    x_src: &Tensor,
    c_src: &Condition,
    phi: &Condition,
    guidance: &GuidanceConfig,
    schedule: &Schedule,
    t: f64,
    dt: f64,
    noises: &[Tensor],
) -> Result<f64> {
    let parts = probe_parts(field, z_edit, x_src, c_src, guidance, schedule, t, dt, noises)?;
    let mut r = parts.constant.clone();
    for (state, scale) in &parts.phi_terms {
        let v = field.velocity(state, parts.t, phi)?;
        r = r.add(&v.scale(*scale)?)?;
    }
    r.sqnorm().scalar_value()
}

/// Traced probe loss: same computation with φ as a tape parameter. Returns
/// the loss value and its gradient w.r.t. φ (zero when the loss does not
/// depend on φ, e.g. when both guidance weights are gated off).
#[allow(clippy::too_many_arguments)]
fn probe_loss_grad(
    field: &dyn DifferentiableField,
    parts: &ProbeParts,
    phi: &Tensor,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let phi_node = tape.param(phi.clone());
    let mut r = tape.constant(parts.constant.clone());
    for (state, scale) in &parts.phi_terms {
        let v = field.velocity_traced(&mut tape, state, parts.t, phi_node)?;
        let scaled = tape.scale(v, *scale)?;
        r = tape.add(r, scaled)?;
    }
    let loss = tape.sqnorm(r)?;
    let value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let grad = grads
        .get(phi_node)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(phi.shape().to_vec()));
    Ok((value, grad))
}

/// Mean source-conditioned velocity difference over the probe noises, with
/// the given φ in both guidance calls — the probe ODE's drift.
#[allow(clippy::too_many_arguments)]
fn probe_drift(
    field: &dyn VelocityField,
    z_edit: &Tensor,
    x_src: &Tensor,
    c_src: &Condition,
    phi: &Condition,
    guidance: &GuidanceConfig,
    schedule: &Schedule,
    t: f64,
    noises: &[Tensor],
) -> Result<Tensor> {
    // probe_parts folds in the dt/S and the z_edit - x_src offset; here we
    // need the bare mean velocity difference, so recompute directly.
    let w_tgt = schedule.effective_omega(t, guidance.omega_tgt);
    let w_src = schedule.effective_omega(t, guidance.omega_src);
    let mut acc = Tensor::zeros(x_src.shape().to_vec());
    for eps in noises {
        let pair = couple(x_src, z_edit, eps, t)?;
        let v_tgt = crate::flow::cfg_velocity(field, &pair.z_tgt, t, c_src, phi, w_tgt)?;
        let v_src = crate::flow::cfg_velocity(field, &pair.z_src, t, c_src, phi, w_src)?;
        acc = acc.add(&v_tgt.sub(&v_src)?)?;
    }
    acc.scale(1.0 / noises.len() as f64)
}

/// Calibrate φ_t at every active step of the schedule by descending the
/// probe loss with Adam, keeping φ0 whenever the final loss fails to improve
/// on the initial one, then advancing the probe state one Euler step with
/// the accepted φ. The target condition is not a parameter: calibration
/// sees source-side data only.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    field: &dyn DifferentiableField,
    x_src: &Tensor,
    c_src: &Condition,
    phi0: &Condition,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    config: &RasiConfig,
    s_samples: usize,
    seed: u64,
) -> Result<PhiCache> {
    config.validate()?;
    guidance.validate()?;
    if !field.is_differentiable() {
        return Err(VsError::Config(
            "calibration requires a field differentiable w.r.t. the embedding".into(),
        ));
    }
    if s_samples == 0 {
        return Err(VsError::InvalidArgument("need at least one noise sample".into()));
    }

    let mut cache = PhiCache::new();
    let mut z_edit = x_src.clone();
    let mut noise = NoiseStream::probe_phase(seed, config.shared_probe_noise);
    let active = schedule.active_steps();
    let n_active = active.len();

    for (a_idx, &k) in active.iter().enumerate() {
        let t = schedule.t(k);
        let dt = schedule.dt(k);
        let noises = noise.draw_step(x_src.shape(), s_samples);
        let probe_noises: &[Tensor] = if config.probe_batch {
            &noises
        } else {
            &noises[..1]
        };
        let parts = probe_parts(field, &z_edit, x_src, c_src, guidance, schedule, t, dt, probe_noises)?;

        let mut phi = phi0.as_row();
        let mut adam = AdamState::new(&[&phi]);
        let lr = config.lr_at(a_idx, n_active);
        let (mut cur_loss, mut grad) = probe_loss_grad(field, &parts, &phi)?;
        let loss_initial = cur_loss;
        let mut used = 0;
        for _ in 0..config.inner_steps {
            if cur_loss < config.early_stop {
                break;
            }
            adam.step(&mut [&mut phi], &[&grad], lr)?;
            used += 1;
            (cur_loss, grad) = probe_loss_grad(field, &parts, &phi)?;
        }

        // Reject non-improvements: Adam is not monotone and K is small.
        let (phi_cond, loss_final) = if cur_loss <= loss_initial {
            (
                Condition::new(phi.data().to_vec(), ConditionRole::OptimizedNull)?,
                cur_loss,
            )
        } else {
            (phi0.retagged(ConditionRole::OptimizedNull), loss_initial)
        };

        let drift = probe_drift(
            field, &z_edit, x_src, c_src, &phi_cond, guidance, schedule, t, probe_noises,
        )?;
        z_edit = z_edit.add(&drift.scale(dt)?)?;

        cache.insert(PhiEntry {
            step: k,
            t,
            loss_initial,
            loss_final,
            inner_steps_used: used,
            phi: phi_cond,
        });
    }
    Ok(cache)
}

/// Fetch the calibrated φ for step k; the edit loop passes it to both
/// guidance calls.
pub fn inject(cache: &PhiCache, k: usize) -> Result<&Condition> {
    cache.get(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{LinearField, CONDITION_WIDTH};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_field(seed: u64, d: usize) -> LinearField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::new(vec![d, d], (0..d * d).map(|_| r.gen_range(-0.2..0.2)).collect()).unwrap();
        let b = Tensor::new(
            vec![CONDITION_WIDTH, d],
            (0..CONDITION_WIDTH * d).map(|_| r.gen_range(-0.6..0.6)).collect(),
        )
        .unwrap();
        let g = Tensor::new(vec![1, d], (0..d).map(|_| r.gen_range(-0.1..0.1)).collect()).unwrap();
        LinearField::new(a, b, g).unwrap()
    }

    fn cond(v: &[f64]) -> Condition {
        Condition::new(v.to_vec(), ConditionRole::Source).unwrap()
    }

    #[test]
    fn loss_zero_for_linear_field_with_phi_equal_c_src() {
        // z_edit = x_src and φ = c_src: the velocity difference collapses.
        let field = linear_field(1, 10);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![1, 10], &mut r);
        let c_src = cond(&[0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2]);
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let guidance = GuidanceConfig::default();
        let noises: Vec<Tensor> = (0..5).map(|_| Tensor::randn(vec![1, 10], &mut r)).collect();
        let loss = probe_loss(
            &field, &x, &x, &c_src, &c_src, &guidance, &schedule, 0.8,
            -0.04, &noises,
        )
        .unwrap();
        assert!(loss <= 1e-18, "loss {loss}");
    }

    #[test]
    fn loss_independent_of_phi_with_symmetric_weights() {
        let field = linear_field(3, 8);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![1, 8], &mut r);
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let guidance = GuidanceConfig { omega_src: 4.0, omega_tgt: 4.0 };
        let noises: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![1, 8], &mut r)).collect();
        let c_src = cond(&[0.1; 8]);
        let l1 = probe_loss(&field, &x, &x, &c_src, &cond(&[0.9; 8]), &guidance, &schedule, 0.7, -0.04, &noises).unwrap();
        let l2 = probe_loss(&field, &x, &x, &c_src, &cond(&[-2.0; 8]), &guidance, &schedule, 0.7, -0.04, &noises).unwrap();
        assert!((l1 - l2).abs() <= 1e-15);
        assert!(l1 <= 1e-18, "branches cancel exactly at z_edit = x_src");
    }

    #[test]
    fn dt_zero_reduces_to_offset_norm() {
        let field = linear_field(5, 6);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x_src = Tensor::randn(vec![1, 6], &mut r);
        let z_edit = Tensor::randn(vec![1, 6], &mut r);
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let guidance = GuidanceConfig::default();
        let noises: Vec<Tensor> = (0..2).map(|_| Tensor::randn(vec![1, 6], &mut r)).collect();
        let loss = probe_loss(
            &field, &z_edit, &x_src, &cond(&[0.2; 8]), &cond(&[0.5; 8]), &guidance, &schedule,
            0.9, 0.0, &noises,
        )
        .unwrap();
        let expect = z_edit.sub(&x_src).unwrap().sqnorm().scalar_value().unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn traced_and_plain_probe_agree() {
        let field = linear_field(7, 9);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x_src = Tensor::randn(vec![1, 9], &mut r);
        let z_edit = Tensor::randn(vec![1, 9], &mut r);
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let guidance = GuidanceConfig::default();
        let noises: Vec<Tensor> = (0..4).map(|_| Tensor::randn(vec![1, 9], &mut r)).collect();
        let phi = cond(&[0.3, 0.1, -0.2, 0.4, 0.0, -0.5, 0.6, 0.2]);
        let c_src = cond(&[0.8; 8]);
        let plain = probe_loss(&field, &z_edit, &x_src, &c_src, &phi, &guidance, &schedule, 0.72, -0.04, &noises).unwrap();
        let parts = probe_parts(&field, &z_edit, &x_src, &c_src, &guidance, &schedule, 0.72, -0.04, &noises).unwrap();
        let (traced, grad) = probe_loss_grad(&field, &parts, &phi.as_row()).unwrap();
        assert!((plain - traced).abs() < 1e-12);
        // gradient should be non-zero inside the CFG interval
        assert!(grad.max_abs() > 0.0);
    }

    #[test]
    fn symmetric_weights_early_stop_keeps_phi0() {
        let field = linear_field(9, 6);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(vec![1, 6], &mut r);
        let schedule = Schedule::uniform(10, 10, 0, (0.6, 1.0)).unwrap();
        let guidance = GuidanceConfig { omega_src: 2.0, omega_tgt: 2.0 };
        let phi0 = Condition::null(CONDITION_WIDTH);
        let cache = calibrate(
            &field,
            &x,
            &cond(&[0.4; 8]),
            &phi0,
            &schedule,
            &guidance,
            &RasiConfig::default(),
            3,
            17,
        )
        .unwrap();
        assert_eq!(cache.len(), 10);
        for e in cache.entries() {
            assert_eq!(e.inner_steps_used, 0, "loss starts at 0, early stop fires");
            assert_eq!(e.phi.values(), phi0.values());
            assert!(e.loss_final <= e.loss_initial);
        }
    }

    #[test]
    fn missing_entry_is_an_explicit_error() {
        let cache = PhiCache::new();
        assert!(matches!(inject(&cache, 3), Err(VsError::MissingPhi { step: 3 })));
    }

    #[test]
    fn non_differentiable_field_rejected_before_compute() {
        use crate::toyworld::GaussianOracleField;
        // Gaussian oracle ignores the embedding, so it cannot host the probe.
        let oracle = GaussianOracleField::new(vec![0.0; 4], 1.0).unwrap();
        struct Wrap(GaussianOracleField);
        impl VelocityField for Wrap {
            fn condition_width(&self) -> usize {
                self.0.condition_width()
            }
            fn velocity(&self, x: &Tensor, t: f64, c: &Condition) -> Result<Tensor> {
                self.0.velocity(x, t, c)
            }
        }
        impl DifferentiableField for Wrap {
            fn velocity_traced(
                &self,
                _tape: &mut Tape,
                _x: &Tensor,
                _t: f64,
                _cond: crate::autodiff::NodeId,
            ) -> Result<crate::autodiff::NodeId> {
                unreachable!("rejected before any compute")
            }
        }
        let schedule = Schedule::uniform(5, 5, 0, (0.6, 1.0)).unwrap();
        let err = calibrate(
            &Wrap(oracle),
            &Tensor::zeros(vec![1, 4]),
            &cond(&[0.0; 8]),
            &Condition::null(8),
            &schedule,
            &GuidanceConfig::default(),
            &RasiConfig::default(),
            2,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, VsError::Config(_)));
    }

    #[test]
    fn accept_rule_never_records_a_worse_loss() {
        let field = linear_field(11, 8);
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(vec![1, 8], &mut r);
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let cfg = RasiConfig {
            inner_steps: 4,
            inner_lr: 0.5, // deliberately aggressive to provoke rejections
            ..RasiConfig::default()
        };
        let cache = calibrate(
            &field,
            &x,
            &cond(&[0.5; 8]),
            &Condition::null(8),
            &schedule,
            &GuidanceConfig::default(),
            &cfg,
            3,
            23,
        )
        .unwrap();
        for e in cache.entries() {
            assert!(
                e.loss_final <= e.loss_initial,
                "step {}: {} > {}",
                e.step,
                e.loss_final,
                e.loss_initial
            );
        }
    }
}
