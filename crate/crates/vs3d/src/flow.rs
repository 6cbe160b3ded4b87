//! Rectified-flow primitives shared by every sampler: straight-line
//! interpolation, the implicit clean-sample estimate, classifier-free
//! guidance, the timestep schedule, and plain Euler integration.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Result, VsError};

/// Condition width of the toy backbone.
pub const CONDITION_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionRole {
    Source,
    Target,
    Null,
    OptimizedNull,
}

/// Fixed-width embedding standing in for the image condition (or the null /
/// unconditional embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    values: Vec<f64>,
    role: ConditionRole,
}

impl Condition {
    pub fn new(values: Vec<f64>, role: ConditionRole) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(VsError::NonFinite { op: "condition" });
        }
        Ok(Condition { values, role })
    }

    /// The backbone's built-in null embedding: all zeros.
    pub fn null(width: usize) -> Self {
        Condition {
            values: vec![0.0; width],
            role: ConditionRole::Null,
        }
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> ConditionRole {
        self.role
    }

    pub fn retagged(&self, role: ConditionRole) -> Condition {
        Condition {
            values: self.values.clone(),
            role,
        }
    }

    /// As a 1×D row for network input.
    pub fn as_row(&self) -> Tensor {
        Tensor::row(self.values.clone())
    }
}

/// Classifier-free guidance weights for the two edit branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega_src: f64,
    pub omega_tgt: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega_src: 1.5,
            omega_tgt: 9.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega_src.is_finite() && self.omega_tgt.is_finite() {
            Ok(())
        } else {
            Err(VsError::InvalidArgument("guidance weights must be finite".into()))
        }
    }
}

/// Descending timestep grid 1 = t_0 > t_1 > … > t_T = 0 with an active
/// window for edit updates and an interval on which CFG weights apply.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    timesteps: Vec<f64>,
    n_max: usize,
    n_min: usize,
    cfg_lo: f64,
    cfg_hi: f64,
}

impl Schedule {
    /// Uniform grid t_k = 1 - k/T.
    pub fn uniform(t_count: usize, n_max: usize, n_min: usize, cfg: (f64, f64)) -> Result<Self> {
        if t_count == 0 {
            return Err(VsError::InvalidSchedule("need at least one step".into()));
        }
        let timesteps = (0..=t_count)
            .map(|k| (t_count - k) as f64 / t_count as f64)
            .collect();
        Schedule::from_timesteps(timesteps, n_max, n_min, cfg)
    }

    pub fn from_timesteps(
        timesteps: Vec<f64>,
        n_max: usize,
        n_min: usize,
        cfg: (f64, f64),
    ) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(VsError::InvalidSchedule("need at least two timesteps".into()));
        }
        if timesteps[0] != 1.0 || *timesteps.last().unwrap() != 0.0 {
            return Err(VsError::InvalidSchedule(format!(
                "endpoints must be exactly 1 and 0, got {} and {}",
                timesteps[0],
                timesteps.last().unwrap()
            )));
        }
        if !timesteps.windows(2).all(|w| w[0] > w[1]) {
            return Err(VsError::InvalidSchedule("timesteps must be strictly descending".into()));
        }
        let t = timesteps.len() - 1;
        if !(n_min <= n_max && n_max <= t) {
            return Err(VsError::InvalidSchedule(format!(
                "need 0 <= n_min <= n_max <= T, got n_min={n_min} n_max={n_max} T={t}"
            )));
        }
        if !(cfg.0.is_finite() && cfg.1.is_finite() && cfg.0 <= cfg.1) {
            return Err(VsError::InvalidSchedule("bad CFG interval".into()));
        }
        Ok(Schedule {
            timesteps,
            n_max,
            n_min,
            cfg_lo: cfg.0,
            cfg_hi: cfg.1,
        })
    }

    /// Number of Euler steps T.
    pub fn step_count(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn t(&self, k: usize) -> f64 {
        self.timesteps[k]
    }

    /// Signed step t_{k+1} - t_k (negative: integration runs toward data).
    pub fn dt(&self, k: usize) -> f64 {
        self.timesteps[k + 1] - self.timesteps[k]
    }

    /// Step k is active iff T - n_max <= k < T - n_min.
    pub fn is_active(&self, k: usize) -> bool {
        let t = self.step_count();
        k + self.n_max >= t && k + self.n_min < t
    }

    pub fn active_steps(&self) -> Vec<usize> {
        (0..self.step_count()).filter(|&k| self.is_active(k)).collect()
    }

    pub fn cfg_active(&self, t: f64) -> bool {
        t >= self.cfg_lo && t <= self.cfg_hi
    }

    /// Guidance weight to use at time t: the configured weight inside the
    /// CFG-active interval, zero outside it.
    pub fn effective_omega(&self, t: f64, omega: f64) -> f64 {
        if self.cfg_active(t) {
            omega
        } else {
            0.0
        }
    }

    pub fn window(&self) -> (usize, usize) {
        (self.n_max, self.n_min)
    }

    pub fn cfg_interval(&self) -> (f64, f64) {
        (self.cfg_lo, self.cfg_hi)
    }
}

/// A conditional velocity field: pure function of (state, time, embedding).
pub trait VelocityField {
    fn condition_width(&self) -> usize;

    /// Velocity at state `x` (1×D row), time `t`, embedding `cond`. Output
    /// shape equals the input state shape.
    fn velocity(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor>;

    /// Whether `velocity` can be differentiated w.r.t. the embedding.
    fn is_differentiable(&self) -> bool {
        false
    }
}

/// Fields whose evaluation can be recorded on a tape with the embedding as a
/// differentiable leaf. State and time enter as constants.
pub trait DifferentiableField: VelocityField {
    fn velocity_traced(&self, tape: &mut Tape, x: &Tensor, t: f64, cond: NodeId) -> Result<NodeId>;
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(VsError::InvalidArgument(format!("t={t} outside [0, 1]")))
    }
}

/// Straight-line forward interpolation (1-t)·x0 + t·eps.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(VsError::ShapeMismatch {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Implicit clean-sample estimate x - t·v.
pub fn estimate_x0(x: &Tensor, t: f64, v: &Tensor) -> Result<Tensor> {
    check_t(t)?;
    if x.shape() != v.shape() {
        return Err(VsError::ShapeMismatch {
            op: "estimate_x0",
            lhs: x.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| a - t * b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Guided velocity (1+ω)·v(x,t,c) - ω·v(x,t,φ). The caller is responsible
/// for zeroing ω outside the schedule's CFG-active interval.
pub fn cfg_velocity(
    field: &dyn VelocityField,
    x: &Tensor,
    t: f64,
    cond: &Condition,
    phi: &Condition,
    omega: f64,
) -> Result<Tensor> {
    for c in [cond, phi] {
        if c.width() != field.condition_width() {
            return Err(VsError::InvalidArgument(format!(
                "condition width {} does not match field width {}",
                c.width(),
                field.condition_width()
            )));
        }
    }
    let v_cond = field.velocity(x, t, cond)?;
    if omega == 0.0 {
        return Ok(v_cond);
    }
    let v_null = field.velocity(x, t, phi)?;
    v_cond.scale(1.0 + omega)?.sub(&v_null.scale(omega)?)
}

/// Integrate the guided field from t=1 down to t=0 with one Euler step per
/// schedule interval, starting from the noise draw `eps`.
pub fn euler_sample(
    field: &dyn VelocityField,
    schedule: &Schedule,
    eps: &Tensor,
    cond: &Condition,
    phi: &Condition,
    omega: f64,
) -> Result<Tensor> {
    let mut x = eps.clone();
    for k in 0..schedule.step_count() {
        let t = schedule.t(k);
        let w = schedule.effective_omega(t, omega);
        let v = cfg_velocity(field, &x, t, cond, phi, w)?;
        x = x.add(&v.scale(schedule.dt(k))?)?;
    }
    Ok(x)
}

/// Time-independent field v(x, e) = x·A + e·B + g, row-vector convention.
/// Linear in the embedding, which makes the calibration objective quadratic
/// with a closed-form minimizer; used as a diagnostic target throughout.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: Tensor,
    pub b: Tensor,
    pub g: Tensor,
}

impl LinearField {
    pub fn new(a: Tensor, b: Tensor, g: Tensor) -> Result<Self> {
        let d = a.shape()[0];
        if a.shape() != [d, d] {
            return Err(VsError::InvalidArgument("LinearField: a must be square".into()));
        }
        if b.shape().len() != 2 || b.shape()[1] != d {
            return Err(VsError::InvalidArgument("LinearField: b must be Dc×D".into()));
        }
        if g.shape() != [1, d] {
            return Err(VsError::InvalidArgument("LinearField: g must be 1×D".into()));
        }
        Ok(LinearField { a, b, g })
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[0]
    }
}

impl VelocityField for LinearField {
    fn condition_width(&self) -> usize {
        self.b.shape()[0]
    }

    fn velocity(&self, x: &Tensor, _t: f64, cond: &Condition) -> Result<Tensor> {
        let xa = x.matmul(&self.a)?;
        let eb = cond.as_row().matmul(&self.b)?;
        xa.add(&eb)?.add(&self.g)
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

impl DifferentiableField for LinearField {
    fn velocity_traced(&self, tape: &mut Tape, x: &Tensor, _t: f64, cond: NodeId) -> Result<NodeId> {
        let xa_g = tape.constant(x.matmul(&self.a)?.add(&self.g)?);
        let b = tape.constant(self.b.clone());
        let eb = tape.matmul(cond, b)?;
        tape.add(xa_g, eb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstField {
        v: Tensor,
    }

    impl VelocityField for ConstField {
        fn condition_width(&self) -> usize {
            CONDITION_WIDTH
        }
        fn velocity(&self, _x: &Tensor, _t: f64, _c: &Condition) -> Result<Tensor> {
            Ok(self.v.clone())
        }
    }

    /// Scalar-valued field used for the guidance arithmetic checks: returns
    /// v_c on the real condition and v_phi on the null.
    struct TwoValueField {
        v_c: f64,
        v_phi: f64,
    }

    impl VelocityField for TwoValueField {
        fn condition_width(&self) -> usize {
            CONDITION_WIDTH
        }
        fn velocity(&self, _x: &Tensor, _t: f64, c: &Condition) -> Result<Tensor> {
            let v = if c.role() == ConditionRole::Null {
                self.v_phi
            } else {
                self.v_c
            };
            Ok(Tensor::row(vec![v]))
        }
    }

    fn cond() -> Condition {
        Condition::new(vec![0.5; CONDITION_WIDTH], ConditionRole::Source).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = Tensor::row(vec![0.0, 1.0]);
        let eps = Tensor::row(vec![2.0, -1.0]);
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
        let mid = interpolate(&Tensor::scalar(0.0), &Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(mid.scalar_value().unwrap(), 1.0);
        assert!(interpolate(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn estimate_x0_inverts_teacher_velocity() {
        let x0 = Tensor::row(vec![0.3, -0.8, 1.1]);
        let eps = Tensor::row(vec![-0.2, 0.4, 0.9]);
        let v = eps.sub(&x0).unwrap();
        for t in [0.0, 0.17, 0.5, 0.93, 1.0] {
            let xt = interpolate(&x0, &eps, t).unwrap();
            let rec = estimate_x0(&xt, t, &v).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(
            estimate_x0(&Tensor::scalar(2.0), 0.5, &Tensor::scalar(2.0))
                .unwrap()
                .scalar_value()
                .unwrap(),
            1.0
        );
    }

    #[test]
    fn cfg_arithmetic() {
        let field = TwoValueField { v_c: 1.0, v_phi: 0.5 };
        let x = Tensor::row(vec![0.0]);
        let phi = Condition::null(CONDITION_WIDTH);
        let v = cfg_velocity(&field, &x, 0.8, &cond(), &phi, 9.0).unwrap();
        assert_eq!(v.scalar_value().unwrap(), 5.5);
        // ω = 0 reduces to the conditional branch.
        let v0 = cfg_velocity(&field, &x, 0.8, &cond(), &phi, 0.0).unwrap();
        assert_eq!(v0.scalar_value().unwrap(), 1.0);
        // c == φ (same values) cancels for any ω.
        let same = TwoValueField { v_c: 0.7, v_phi: 0.7 };
        let v_same = cfg_velocity(&same, &x, 0.8, &cond(), &phi, 4.2).unwrap();
        assert!((v_same.scalar_value().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn euler_on_constant_field_is_exact() {
        let u = Tensor::row(vec![0.4, -1.2]);
        let field = ConstField { v: u.clone() };
        let schedule = Schedule::uniform(25, 25, 0, (0.6, 1.0)).unwrap();
        let eps = Tensor::row(vec![1.0, 2.0]);
        let phi = Condition::null(CONDITION_WIDTH);
        let out = euler_sample(&field, &schedule, &eps, &cond(), &phi, 0.0).unwrap();
        let expect = eps.sub(&u).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_validation_and_window() {
        assert!(Schedule::uniform(0, 0, 0, (0.6, 1.0)).is_err());
        assert!(Schedule::from_timesteps(vec![1.0, 0.5, 0.1], 1, 0, (0.6, 1.0)).is_err());
        assert!(Schedule::from_timesteps(vec![1.0, 0.5, 0.5, 0.0], 1, 0, (0.6, 1.0)).is_err());
        let s = Schedule::uniform(25, 12, 0, (0.6, 1.0)).unwrap();
        assert_eq!(s.step_count(), 25);
        assert_eq!(s.t(0), 1.0);
        assert_eq!(s.t(25), 0.0);
        let active = s.active_steps();
        assert_eq!(active, (13..25).collect::<Vec<_>>());
        assert!(s.t(13) <= 0.48 + 1e-12);
        // CFG gating
        assert_eq!(s.effective_omega(0.8, 9.0), 9.0);
        assert_eq!(s.effective_omega(0.48, 9.0), 0.0);
        assert_eq!(s.effective_omega(0.6, 9.0), 9.0);
    }

    #[test]
    fn interpolate_is_affine_in_t() {
        let x0 = Tensor::row(vec![0.2, -0.7, 0.0]);
        let eps = Tensor::row(vec![1.0, 0.5, -1.5]);
        let (a, b) = (0.2, 0.9);
        let mid = interpolate(&x0, &eps, (a + b) / 2.0).unwrap();
        let ia = interpolate(&x0, &eps, a).unwrap();
        let ib = interpolate(&x0, &eps, b).unwrap();
        let avg = ia.add(&ib).unwrap().scale(0.5).unwrap();
        for (m, v) in mid.data().iter().zip(avg.data()) {
            assert!((m - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_is_affine_in_omega() {
        let field = TwoValueField { v_c: 1.3, v_phi: -0.4 };
        let x = Tensor::row(vec![0.0]);
        let phi = Condition::null(CONDITION_WIDTH);
        let at0 = cfg_velocity(&field, &x, 0.7, &cond(), &phi, 0.0).unwrap();
        let gap = field.v_c - field.v_phi;
        for omega in [0.5, 1.5, 9.0] {
            let v = cfg_velocity(&field, &x, 0.7, &cond(), &phi, omega).unwrap();
            let expect = at0.scalar_value().unwrap() + omega * gap;
            assert!((v.scalar_value().unwrap() - expect).abs() < 1e-12);
        }
    }
}
