//! Conditional flow-matching training for the toy nets: regress the network
//! onto the straight-line velocity ε - x0 at interpolated states, Adam with
//! a cosine-decayed learning rate, seed-deterministic throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Tape, Tensor};
use crate::error::{Result, VsError};
use crate::flow::Condition;

use super::embed::{embed_condition, null_condition};
use super::net::{DenseToyNet, SparseKind, SparseNet};
use super::shape::{gen_shape, ShapeParams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub cond_dropout: f64,
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            lr: 1e-3,
            seed: 1,
            cond_dropout: 0.1,
            val_every: 500,
        }
    }
}

/// Training record: per-step training loss plus a sparsely sampled
/// validation curve (step, loss).
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One dense training batch. Sources provide everything random so fixtures
/// can pin all of it.
#[derive(Debug, Clone)]
pub struct DenseBatch {
    pub x0: Tensor,   // B×D
    pub cond: Tensor, // B×Dc
    pub t: Vec<f64>,
    pub eps: Tensor, // B×D
}

pub trait DenseBatchSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<DenseBatch>;
}

/// Standard source: fresh procedural shapes every step.
pub struct ShapeBatchSource {
    pub resolution: usize,
    pub batch: usize,
}

impl DenseBatchSource for ShapeBatchSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<DenseBatch> {
        let d = self.resolution * self.resolution;
        let mut x0 = Vec::with_capacity(self.batch * d);
        let mut cond = Vec::with_capacity(self.batch * 8);
        let mut t = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let params = ShapeParams::sample(rng);
            let asset = gen_shape(&params, self.resolution)?;
            x0.extend_from_slice(asset.stage1.values.data());
            cond.extend_from_slice(embed_condition(&params)?.values());
            t.push(rng.gen_range(0.0..1.0));
        }
        let eps = Tensor::randn(vec![self.batch, d], rng);
        Ok(DenseBatch {
            x0: Tensor::new(vec![self.batch, d], x0)?,
            cond: Tensor::new(vec![self.batch, 8], cond)?,
            t,
            eps,
        })
    }
}

/// Fixture source: replays one pinned batch forever (memorization tests).
pub struct FixedBatchSource(pub DenseBatch);

impl DenseBatchSource for FixedBatchSource {
    fn next_batch(&mut self, _rng: &mut ChaCha8Rng) -> Result<DenseBatch> {
        Ok(self.0.clone())
    }
}

/// Replace condition rows with the null embedding at the dropout rate.
fn apply_dropout(cond: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate == 0.0 {
        return Ok(cond.clone());
    }
    let (b, w) = (cond.rows(), cond.cols());
    let mut data = cond.data().to_vec();
    for i in 0..b {
        if rng.gen_bool(rate) {
            data[i * w..(i + 1) * w].fill(0.0);
        }
    }
    Tensor::new(vec![b, w], data)
}

fn interpolate_rows(x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
    let (b, d) = (x0.rows(), x0.cols());
    let mut data = Vec::with_capacity(b * d);
    for i in 0..b {
        let ti = t[i];
        for j in 0..d {
            data.push((1.0 - ti) * x0.data()[i * d + j] + ti * eps.data()[i * d + j]);
        }
    }
    Tensor::new(vec![b, d], data)
}

/// Per-element mean squared CFM loss of the dense net on a batch, without
/// touching any tape. Used for validation.
pub fn dense_cfm_loss(net: &DenseToyNet, batch: &DenseBatch) -> Result<f64> {
    let xt = interpolate_rows(&batch.x0, &batch.eps, &batch.t)?;
    let target = batch.eps.sub(&batch.x0)?;
    let pred = net.forward_batch(&xt, &batch.t, &batch.cond)?;
    let diff = pred.sub(&target)?;
    Ok(diff.sqnorm().scalar_value()? / diff.numel() as f64)
}

/// Train the dense net by conditional flow matching. Returns the loss
/// curves; `net` is updated in place. Zero steps leave the weights unchanged.
pub fn train_dense(
    net: &mut DenseToyNet,
    source: &mut dyn DenseBatchSource,
    cfg: &TrainConfig,
    val: Option<&DenseBatch>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    if let Some(v) = val {
        report.val_curve.push((0, dense_cfm_loss(net, v)?));
    }
    let mut adam = AdamState::new(&net.mlp.param_tensors());
    for step in 0..cfg.steps {
        let batch = source.next_batch(&mut rng)?;
        let cond = apply_dropout(&batch.cond, cfg.cond_dropout, &mut rng)?;
        let xt = interpolate_rows(&batch.x0, &batch.eps, &batch.t)?;
        let target = batch.eps.sub(&batch.x0)?;
        let inputs = net.assemble_inputs(&xt, &batch.t, &cond)?;

        let mut tape = Tape::new();
        let nodes = net.mlp.register(&mut tape, true);
        let x = tape.constant(inputs);
        let pred = net.mlp.forward_nodes(&mut tape, &nodes, x)?;
        let tgt = tape.constant(target);
        let diff = tape.sub(pred, tgt)?;
        let sq = tape.sqnorm(diff)?;
        let scale = 1.0 / tape.value(diff).numel() as f64;
        let loss = tape.scale(sq, scale)?;
        let loss_value = tape.value(loss).scalar_value()?;
        if !loss_value.is_finite() {
            return Err(VsError::Numerical {
                context: format!("dense training step {step}"),
                detail: "loss diverged".into(),
            });
        }
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<&Tensor> = nodes
            .weights
            .iter()
            .flat_map(|&(w, b)| [grads.get(w).expect("trained weight"), grads.get(b).expect("trained bias")])
            .collect();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.step(&mut net.mlp.param_tensors_mut(), &grad_refs, lr)?;

        report.curve.push((step, loss_value));
        if let Some(v) = val {
            if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps {
                report.val_curve.push((step + 1, dense_cfm_loss(net, v)?));
            }
        }
    }
    Ok(report)
}

/// One sparse training batch: all tokens of one shape at one timestep.
#[derive(Debug, Clone)]
pub struct SparseBatch {
    pub coords: Vec<[i32; 2]>,
    pub x0: Tensor,           // N×F
    pub geo: Option<Tensor>,  // N×F geometry context (material stage)
    pub cond: Condition,
    pub t: f64,
    pub eps: Tensor, // N×F
}

pub trait SparseBatchSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<SparseBatch>;
}

/// Standard sparse source: one fresh procedural shape per step; geometry or
/// material features depending on the stage being trained.
pub struct SparseShapeSource {
    pub resolution: usize,
    pub kind: SparseKind,
}

impl SparseBatchSource for SparseShapeSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<SparseBatch> {
        let params = ShapeParams::sample(rng);
        let asset = gen_shape(&params, self.resolution)?;
        let (x0, geo) = match self.kind {
            SparseKind::Geometry => (asset.geom.feat_matrix(), None),
            SparseKind::Material => (asset.mat.feat_matrix(), Some(asset.geom.feat_matrix())),
        };
        let n = asset.geom.len();
        let f = x0.cols();
        Ok(SparseBatch {
            coords: asset.geom.coords().to_vec(),
            x0,
            geo,
            cond: embed_condition(&params)?,
            t: rng.gen_range(0.0..1.0),
            eps: Tensor::randn(vec![n, f], rng),
        })
    }
}

pub fn sparse_cfm_loss(net: &SparseNet, batch: &SparseBatch) -> Result<f64> {
    let t = vec![batch.t; batch.coords.len()];
    let xt = interpolate_rows(&batch.x0, &batch.eps, &t)?;
    let target = batch.eps.sub(&batch.x0)?;
    let pred = net.forward_tokens(&batch.coords, &xt, batch.geo.as_ref(), batch.t, &batch.cond)?;
    let diff = pred.sub(&target)?;
    Ok(diff.sqnorm().scalar_value()? / diff.numel() as f64)
}

pub fn train_sparse(
    net: &mut SparseNet,
    source: &mut dyn SparseBatchSource,
    cfg: &TrainConfig,
    val: Option<&SparseBatch>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    if let Some(v) = val {
        report.val_curve.push((0, sparse_cfm_loss(net, v)?));
    }
    let mut adam = AdamState::new(&net.mlp.param_tensors());
    for step in 0..cfg.steps {
        let batch = source.next_batch(&mut rng)?;
        let cond = if cfg.cond_dropout > 0.0 && rng.gen_bool(cfg.cond_dropout) {
            null_condition()
        } else {
            batch.cond.clone()
        };
        let t = vec![batch.t; batch.coords.len()];
        let xt = interpolate_rows(&batch.x0, &batch.eps, &t)?;
        let target = batch.eps.sub(&batch.x0)?;
        let inputs = net.assemble_inputs(&batch.coords, &xt, batch.geo.as_ref(), batch.t, &cond)?;

        let mut tape = Tape::new();
        let nodes = net.mlp.register(&mut tape, true);
        let x = tape.constant(inputs);
        let pred = net.mlp.forward_nodes(&mut tape, &nodes, x)?;
        let tgt = tape.constant(target);
        let diff = tape.sub(pred, tgt)?;
        let sq = tape.sqnorm(diff)?;
        let scale = 1.0 / tape.value(diff).numel() as f64;
        let loss = tape.scale(sq, scale)?;
        let loss_value = tape.value(loss).scalar_value()?;
        if !loss_value.is_finite() {
            return Err(VsError::Numerical {
                context: format!("sparse training step {step}"),
                detail: "loss diverged".into(),
            });
        }
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<&Tensor> = nodes
            .weights
            .iter()
            .flat_map(|&(w, b)| [grads.get(w).expect("trained weight"), grads.get(b).expect("trained bias")])
            .collect();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.step(&mut net.mlp.param_tensors_mut(), &grad_refs, lr)?;

        report.curve.push((step, loss_value));
        if let Some(v) = val {
            if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.steps {
                report.val_curve.push((step + 1, sparse_cfm_loss(net, v)?));
            }
        }
    }
    Ok(report)
}

/// Fixed held-out parameter sets (hat and no-hat alternating) for validation
/// and generation checks. Seeded independently of any training stream.
pub fn holdout_params(seed: u64, count: usize) -> Vec<ShapeParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| ShapeParams::sample(&mut rng)).collect()
}

/// Assemble a pinned validation batch from held-out parameters: spread
/// timesteps evenly, one fixed noise draw.
pub fn dense_validation_batch(seed: u64, count: usize, resolution: usize) -> Result<DenseBatch> {
    let params = holdout_params(seed, count);
    let d = resolution * resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f42);
    let mut x0 = Vec::with_capacity(count * d);
    let mut cond = Vec::with_capacity(count * 8);
    let mut t = Vec::with_capacity(count);
    for (i, p) in params.iter().enumerate() {
        let asset = gen_shape(p, resolution)?;
        x0.extend_from_slice(asset.stage1.values.data());
        cond.extend_from_slice(embed_condition(p)?.values());
        t.push((i as f64 + 0.5) / count as f64);
    }
    Ok(DenseBatch {
        x0: Tensor::new(vec![count, d], x0)?,
        cond: Tensor::new(vec![count, 8], cond)?,
        t,
        eps: Tensor::randn(vec![count, d], &mut rng),
    })
}
