//! Twin-agreement residual injection for the sparse stages: run the stage
//! sampler twice on the same scaffold and noise with only the embedding
//! swapped, map per-token disagreement to a preserve confidence via robust
//! quantile clipping, and softly retract agreeing tokens toward the source
//! encoding with a norm-clipped residual. No mask enters anywhere: the twin
//! disagreement is the only region signal.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};
use crate::flow::Condition;
use crate::toyworld::{SlatOrigin, SparseSlat, SparseStageSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DMetric {
    /// L2 over raw token features.
    Raw,
    /// L2 after dividing each channel by its std over the token set.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TarConfig {
    /// Blend scale λ in (0, 1].
    pub lambda: f64,
    /// Residual norm clip τ > 0.
    pub tau: f64,
    /// Agreement threshold ϑ in [0, 1).
    pub theta: f64,
    /// Lower robust quantile α.
    pub alpha: f64,
    /// Upper robust quantile β.
    pub beta: f64,
    pub d_metric: DMetric,
}

impl Default for TarConfig {
    fn default() -> Self {
        TarConfig {
            lambda: 0.5,
            tau: 10.0,
            theta: 0.7,
            alpha: 0.05,
            beta: 0.95,
            d_metric: DMetric::Raw,
        }
    }
}

impl TarConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.lambda <= 1.0
            && self.tau > 0.0
            && (0.0..1.0).contains(&self.theta)
            && (0.0..=1.0).contains(&self.alpha)
            && (0.0..=1.0).contains(&self.beta)
            && self.alpha <= self.beta;
        if ok {
            Ok(())
        } else {
            Err(VsError::InvalidArgument(format!("bad TAR config: {self:?}")))
        }
    }
}

/// Per-token disagreement and preserve confidence over one scaffold.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementField {
    pub coords: Vec<[i32; 2]>,
    pub d: Vec<f64>,
    pub p_flow: Vec<f64>,
    pub q_alpha: f64,
    pub q_beta: f64,
}

/// Two sampler passes with identical scaffold, noise, schedule, and guidance
/// weight; only the embedding differs. When the two embeddings carry equal
/// values the legs are identical-input runs, which doubles as an online
/// determinism check.
pub fn twin_forward(
    sampler: &dyn SparseStageSampler,
    coords: &[[i32; 2]],
    eps: &Tensor,
    c_tgt: &Condition,
    c_src: &Condition,
    geo: Option<&SparseSlat>,
) -> Result<(SparseSlat, SparseSlat)> {
    let z_tgt = sampler.sample(coords, eps, c_tgt, geo)?;
    let z_src_twin = sampler.sample(coords, eps, c_src, geo)?;
    if c_tgt.values() == c_src.values() && z_tgt.feats() != z_src_twin.feats() {
        return Err(VsError::Sampler(
            "twin legs with identical embeddings produced different outputs; \
             the stage sampler is nondeterministic"
                .into(),
        ));
    }
    Ok((z_tgt, z_src_twin))
}

/// Linear-interpolation quantile on ascending data at rank (n-1)·q.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (n - 1) as f64 * q;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Map twin disagreement to preserve confidence:
/// p = 1 - clip((d - q_α)/(q_β - q_α), 0, 1). A degenerate quantile span
/// means the twin fully agrees everywhere; preserve everything.
pub fn agreement(
    z_tgt: &SparseSlat,
    z_src_twin: &SparseSlat,
    alpha: f64,
    beta: f64,
    metric: DMetric,
) -> Result<AgreementField> {
    if z_tgt.coords() != z_src_twin.coords() {
        return Err(VsError::InvalidArgument(
            "twin slats must share identical coordinates".into(),
        ));
    }
    if z_tgt.is_empty() {
        return Err(VsError::InvalidArgument("empty token set".into()));
    }
    let n = z_tgt.len();
    let f = z_tgt.feat_dim();

    let channel_scale: Vec<f64> = match metric {
        DMetric::Raw => vec![1.0; f],
        DMetric::Normalized => {
            let mut scale = vec![0.0; f];
            for c in 0..f {
                let mean: f64 = (0..n).map(|i| z_tgt.feat(i)[c]).sum::<f64>() / n as f64;
                let var: f64 =
                    (0..n).map(|i| (z_tgt.feat(i)[c] - mean).powi(2)).sum::<f64>() / n as f64;
                scale[c] = if var.sqrt() > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
            }
            scale
        }
    };

    let d: Vec<f64> = (0..n)
        .map(|i| {
            z_tgt
                .feat(i)
                .iter()
                .zip(z_src_twin.feat(i))
                .zip(&channel_scale)
                .map(|((a, b), s)| ((a - b) * s).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let mut sorted = d.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q_alpha = quantile_sorted(&sorted, alpha);
    let q_beta = quantile_sorted(&sorted, beta);

    let span = q_beta - q_alpha;
    let p_flow = if span < 1e-12 {
        vec![1.0; n]
    } else {
        d.iter()
            .map(|&di| 1.0 - ((di - q_alpha) / span).clamp(0.0, 1.0))
            .collect()
    };

    Ok(AgreementField {
        coords: z_tgt.coords().to_vec(),
        d,
        p_flow,
        q_alpha,
        q_beta,
    })
}

/// Whole-vector norm rescale r·min(1, τ/‖r‖): direction preserved, norm
/// capped at τ.
pub fn clip_residual(r: &[f64], tau: f64) -> Vec<f64> {
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau || norm == 0.0 {
        r.to_vec()
    } else {
        let s = tau / norm;
        r.iter().map(|v| v * s).collect()
    }
}

/// Blend on the integer-coordinate intersection: agreeing tokens retract
/// toward the source encoding by λ·p·clip_τ(residual); edit-only tokens pass
/// through untouched.
pub fn blend(
    z_tgt: &SparseSlat,
    z_src_enc: &SparseSlat,
    field: &AgreementField,
    config: &TarConfig,
) -> Result<SparseSlat> {
    config.validate()?;
    if field.coords != z_tgt.coords() {
        return Err(VsError::InvalidArgument(
            "agreement field must be computed on the target scaffold".into(),
        ));
    }
    if z_tgt.feat_dim() != z_src_enc.feat_dim() {
        return Err(VsError::ShapeMismatch {
            op: "blend",
            lhs: vec![z_tgt.feat_dim()],
            rhs: vec![z_src_enc.feat_dim()],
        });
    }
    let f = z_tgt.feat_dim();
    let mut feats = Vec::with_capacity(z_tgt.len() * f);
    for (i, coord) in z_tgt.coords().iter().enumerate() {
        let tgt = z_tgt.feat(i);
        match z_src_enc.index_of(*coord) {
            Some(j) => {
                let p = field.p_flow[i];
                let gain = if p >= config.theta { config.lambda * p } else { 0.0 };
                if gain == 0.0 {
                    feats.extend_from_slice(tgt);
                } else {
                    let residual: Vec<f64> = z_src_enc
                        .feat(j)
                        .iter()
                        .zip(tgt)
                        .map(|(s, t)| s - t)
                        .collect();
                    let clipped = clip_residual(&residual, config.tau);
                    feats.extend(tgt.iter().zip(&clipped).map(|(t, r)| t + gain * r));
                }
            }
            None => feats.extend_from_slice(tgt),
        }
    }
    SparseSlat::new(z_tgt.coords().to_vec(), f, feats, SlatOrigin::Blended)
}

/// One full stage: twin forwards, agreement, blend. Exactly two sampler
/// invocations — the main target forward is the twin's first leg.
pub struct StageOutput {
    pub slat: SparseSlat,
    pub z_tgt: SparseSlat,
    pub agreement: AgreementField,
    pub forwards_used: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    sampler: &dyn SparseStageSampler,
    coords: &[[i32; 2]],
    eps: &Tensor,
    c_src: &Condition,
    c_tgt: &Condition,
    z_src_enc: &SparseSlat,
    config: &TarConfig,
    geo: Option<&SparseSlat>,
) -> Result<StageOutput> {
    let before = sampler.forward_count();
    let (z_tgt, z_twin) = twin_forward(sampler, coords, eps, c_tgt, c_src, geo)?;
    let forwards_used = sampler.forward_count() - before;
    debug_assert_eq!(forwards_used, 2);
    let field = agreement(&z_tgt, &z_twin, config.alpha, config.beta, config.d_metric)?;
    let slat = blend(&z_tgt, z_src_enc, &field, config)?;
    Ok(StageOutput {
        slat,
        z_tgt,
        agreement: field,
        forwards_used,
    })
}
