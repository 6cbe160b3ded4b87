//! Toy velocity networks: a dense 3-layer MLP for the stage-1 occupancy
//! latent and per-token MLPs for the sparse geometry/material stages.
//!
//! The sparse nets see (own token, mean-pooled tokens, coordinate sinusoids,
//! time features, condition); the mean pool is what lets a global condition
//! gap reach every token.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Result, VsError};
use crate::flow::{Condition, DifferentiableField, Schedule, VelocityField};

use super::shape::{SlatOrigin, SparseSlat};

pub const TIME_FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const TIME_FEAT_DIM: usize = 2 * TIME_FREQS.len();
pub const COORD_FEAT_DIM: usize = 8;

pub fn time_features(t: f64) -> [f64; TIME_FEAT_DIM] {
    let mut out = [0.0; TIME_FEAT_DIM];
    for (i, f) in TIME_FREQS.iter().enumerate() {
        let arg = std::f64::consts::PI * f * t;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

pub fn coord_features(coord: [i32; 2], resolution: usize) -> [f64; COORD_FEAT_DIM] {
    let r = resolution as f64;
    let cy = (coord[0] as f64 + 0.5) / r;
    let cx = (coord[1] as f64 + 0.5) / r;
    let tau = 2.0 * std::f64::consts::PI;
    [
        (tau * cx).sin(),
        (tau * cx).cos(),
        (tau * cy).sin(),
        (tau * cy).cos(),
        (2.0 * tau * cx).sin(),
        (2.0 * tau * cx).cos(),
        (2.0 * tau * cy).sin(),
        (2.0 * tau * cy).cos(),
    ]
}

/// Plain MLP with tanh between layers and a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Tensor, Tensor)>, // (w: in×out, b: out)
}

/// Tape handles for one registered copy of the weights.
pub struct MlpNodes {
    pub weights: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(VsError::InvalidArgument("mlp needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Tensor::new(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect(),
            )?;
            layers.push((w, Tensor::zeros(vec![fan_out])));
        }
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(VsError::Checkpoint("no layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].0.shape()[1] != w[1].0.shape()[0] {
                return Err(VsError::Checkpoint("layer widths do not chain".into()));
            }
        }
        for (w, b) in &layers {
            if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                return Err(VsError::Checkpoint("bias width must match layer output".into()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.shape()[1]
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.affine(w, b)?;
            if i < last {
                h = h.map_tanh()?;
            }
        }
        Ok(h)
    }

    /// Put the weights on a tape, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let weights = self
            .layers
            .iter()
            .map(|(w, b)| {
                if trainable {
                    (tape.param(w.clone()), tape.param(b.clone()))
                } else {
                    (tape.constant(w.clone()), tape.constant(b.clone()))
                }
            })
            .collect();
        MlpNodes { weights }
    }

    pub fn forward_nodes(&self, tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
        let last = nodes.weights.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in nodes.weights.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Dense stage-1 velocity network over the flattened occupancy latent.
#[derive(Debug, Clone)]
pub struct DenseToyNet {
    pub mlp: Mlp,
    pub channels: usize,
    pub resolution: usize,
    pub cond_width: usize,
}

impl DenseToyNet {
    pub fn state_dim(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn input_dim(channels: usize, resolution: usize, cond_width: usize) -> usize {
        channels * resolution * resolution + TIME_FEAT_DIM + cond_width
    }

    pub fn init<R: Rng>(
        channels: usize,
        resolution: usize,
        cond_width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = channels * resolution * resolution;
        let mlp = Mlp::init(
            &[Self::input_dim(channels, resolution, cond_width), hidden, hidden, d],
            rng,
        )?;
        Ok(DenseToyNet {
            mlp,
            channels,
            resolution,
            cond_width,
        })
    }

    pub fn from_mlp(mlp: Mlp, channels: usize, resolution: usize, cond_width: usize) -> Result<Self> {
        let d = channels * resolution * resolution;
        if mlp.input_dim() != Self::input_dim(channels, resolution, cond_width) || mlp.output_dim() != d {
            return Err(VsError::Checkpoint(format!(
                "dense net dims {}→{} do not match grid {}×{}×{} / condition width {}",
                mlp.input_dim(),
                mlp.output_dim(),
                channels,
                resolution,
                resolution,
                cond_width
            )));
        }
        Ok(DenseToyNet {
            mlp,
            channels,
            resolution,
            cond_width,
        })
    }

    /// Rows = [state, time features, condition], one row per batch item.
    pub fn assemble_inputs(&self, states: &Tensor, ts: &[f64], conds: &Tensor) -> Result<Tensor> {
        let b = states.rows();
        let d = self.state_dim();
        if states.shape() != [b, d] || conds.shape() != [b, self.cond_width] || ts.len() != b {
            return Err(VsError::InvalidArgument(format!(
                "assemble: states {:?}, conds {:?}, {} times",
                states.shape(),
                conds.shape(),
                ts.len()
            )));
        }
        let width = d + TIME_FEAT_DIM + self.cond_width;
        let mut data = Vec::with_capacity(b * width);
        for i in 0..b {
            data.extend_from_slice(&states.data()[i * d..(i + 1) * d]);
            data.extend_from_slice(&time_features(ts[i]));
            data.extend_from_slice(&conds.data()[i * self.cond_width..(i + 1) * self.cond_width]);
        }
        Tensor::new(vec![b, width], data)
    }

    /// Batched plain forward used by training and generation.
    pub fn forward_batch(&self, states: &Tensor, ts: &[f64], conds: &Tensor) -> Result<Tensor> {
        let inputs = self.assemble_inputs(states, ts, conds)?;
        self.mlp.forward(&inputs)
    }
}

impl VelocityField for DenseToyNet {
    fn condition_width(&self) -> usize {
        self.cond_width
    }

    fn velocity(&self, x: &Tensor, t: f64, cond: &Condition) -> Result<Tensor> {
        self.forward_batch(x, &[t], &cond.as_row())
    }

    fn is_differentiable(&self) -> bool {
        true
    }
}

impl DifferentiableField for DenseToyNet {
    fn velocity_traced(&self, tape: &mut Tape, x: &Tensor, t: f64, cond: NodeId) -> Result<NodeId> {
        let mut prefix = x.data().to_vec();
        prefix.extend_from_slice(&time_features(t));
        let prefix = tape.constant(Tensor::row(prefix));
        let input = tape.concat_cols(&[prefix, cond])?;
        let nodes = self.mlp.register(tape, false);
        self.mlp.forward_nodes(tape, &nodes, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseKind {
    Geometry,
    Material,
}

/// Per-token velocity network for a sparse stage.
#[derive(Debug, Clone)]
pub struct SparseNet {
    pub mlp: Mlp,
    pub kind: SparseKind,
    pub feat_dim: usize,
    pub resolution: usize,
    pub cond_width: usize,
}

impl SparseNet {
    pub fn input_dim(kind: SparseKind, feat_dim: usize, cond_width: usize) -> usize {
        let geo_extra = match kind {
            SparseKind::Geometry => 0,
            SparseKind::Material => feat_dim,
        };
        2 * feat_dim + COORD_FEAT_DIM + TIME_FEAT_DIM + cond_width + geo_extra
    }

    pub fn init<R: Rng>(
        kind: SparseKind,
        feat_dim: usize,
        resolution: usize,
        cond_width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp::init(
            &[Self::input_dim(kind, feat_dim, cond_width), hidden, hidden, feat_dim],
            rng,
        )?;
        Ok(SparseNet {
            mlp,
            kind,
            feat_dim,
            resolution,
            cond_width,
        })
    }

    pub fn from_mlp(
        mlp: Mlp,
        kind: SparseKind,
        feat_dim: usize,
        resolution: usize,
        cond_width: usize,
    ) -> Result<Self> {
        if mlp.input_dim() != Self::input_dim(kind, feat_dim, cond_width) || mlp.output_dim() != feat_dim {
            return Err(VsError::Checkpoint("sparse net dims do not match configuration".into()));
        }
        Ok(SparseNet {
            mlp,
            kind,
            feat_dim,
            resolution,
            cond_width,
        })
    }

    /// Token rows = [own, pooled, coord sinusoids, time, condition, (geometry)].
    pub fn assemble_inputs(
        &self,
        coords: &[[i32; 2]],
        state: &Tensor,
        geo: Option<&Tensor>,
        t: f64,
        cond: &Condition,
    ) -> Result<Tensor> {
        let n = coords.len();
        let f = self.feat_dim;
        if state.shape() != [n, f] {
            return Err(VsError::ShapeMismatch {
                op: "sparse_assemble",
                lhs: vec![n, f],
                rhs: state.shape().to_vec(),
            });
        }
        if cond.width() != self.cond_width {
            return Err(VsError::InvalidArgument("condition width mismatch".into()));
        }
        match (self.kind, geo) {
            (SparseKind::Material, None) => {
                return Err(VsError::InvalidArgument(
                    "material net requires a geometry context".into(),
                ))
            }
            (SparseKind::Geometry, Some(_)) => {
                return Err(VsError::InvalidArgument(
                    "geometry net takes no geometry context".into(),
                ))
            }
            _ => {}
        }
        if let Some(g) = geo {
            if g.shape() != [n, f] {
                return Err(VsError::ShapeMismatch {
                    op: "sparse_assemble_geo",
                    lhs: vec![n, f],
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let pooled = state.col_mean()?;
        let tf = time_features(t);
        let width = Self::input_dim(self.kind, f, self.cond_width);
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&state.data()[i * f..(i + 1) * f]);
            data.extend_from_slice(pooled.data());
            data.extend_from_slice(&coord_features(coords[i], self.resolution));
            data.extend_from_slice(&tf);
            data.extend_from_slice(cond.values());
            if let Some(g) = geo {
                data.extend_from_slice(&g.data()[i * f..(i + 1) * f]);
            }
        }
        Tensor::new(vec![n, width], data)
    }

    pub fn forward_tokens(
        &self,
        coords: &[[i32; 2]],
        state: &Tensor,
        geo: Option<&Tensor>,
        t: f64,
        cond: &Condition,
    ) -> Result<Tensor> {
        let inputs = self.assemble_inputs(coords, state, geo, t, cond)?;
        self.mlp.forward(&inputs)
    }
}

/// A sparse-stage sampler: integrates token features from seeded noise to a
/// structured latent on a fixed coordinate scaffold.
pub trait SparseStageSampler {
    fn feat_dim(&self) -> usize;

    fn sample(
        &self,
        coords: &[[i32; 2]],
        eps: &Tensor,
        cond: &Condition,
        geo: Option<&SparseSlat>,
    ) -> Result<SparseSlat>;

    /// Total `sample` invocations so far; lets callers assert the
    /// one-extra-forward budget.
    fn forward_count(&self) -> usize;
}

/// Euler sampler over a sparse toy net, with CFG against a fixed null
/// embedding inside the schedule's CFG-active interval.
pub struct ToySparseSampler<'a> {
    net: &'a SparseNet,
    schedule: &'a Schedule,
    omega: f64,
    phi: Condition,
    label: &'static str,
    count: Cell<usize>,
    log: Option<Rc<RefCell<Vec<String>>>>,
}

impl<'a> ToySparseSampler<'a> {
    pub fn new(net: &'a SparseNet, schedule: &'a Schedule, omega: f64, phi: Condition) -> Self {
        ToySparseSampler {
            net,
            schedule,
            omega,
            phi,
            label: "sparse",
            count: Cell::new(0),
            log: None,
        }
    }

    pub fn with_label(mut self, label: &'static str) -> Self {
        self.label = label;
        self
    }

    pub fn with_log(mut self, log: Rc<RefCell<Vec<String>>>) -> Self {
        self.log = Some(log);
        self
    }
}

impl SparseStageSampler for ToySparseSampler<'_> {
    fn feat_dim(&self) -> usize {
        self.net.feat_dim
    }

    fn sample(
        &self,
        coords: &[[i32; 2]],
        eps: &Tensor,
        cond: &Condition,
        geo: Option<&SparseSlat>,
    ) -> Result<SparseSlat> {
        self.count.set(self.count.get() + 1);
        if let Some(log) = &self.log {
            log.borrow_mut().push(format!("{}.sample[{:?}]", self.label, cond.role()));
        }
        if eps.shape() != [coords.len(), self.net.feat_dim] {
            return Err(VsError::ShapeMismatch {
                op: "sparse_sample",
                lhs: vec![coords.len(), self.net.feat_dim],
                rhs: eps.shape().to_vec(),
            });
        }
        let geo_feats = geo.map(|g| g.feat_matrix());
        let mut x = eps.clone();
        for k in 0..self.schedule.step_count() {
            let t = self.schedule.t(k);
            let w = self.schedule.effective_omega(t, self.omega);
            let v_c = self.net.forward_tokens(coords, &x, geo_feats.as_ref(), t, cond)?;
            let v = if w == 0.0 {
                v_c
            } else {
                let v_phi = self.net.forward_tokens(coords, &x, geo_feats.as_ref(), t, &self.phi)?;
                v_c.scale(1.0 + w)?.sub(&v_phi.scale(w)?)?
            };
            x = x.add(&v.scale(self.schedule.dt(k))?)?;
        }
        let template = SparseSlat::new(
            coords.to_vec(),
            self.net.feat_dim,
            vec![0.0; coords.len() * self.net.feat_dim],
            SlatOrigin::Sampled,
        )?;
        template.with_feats(x, SlatOrigin::Sampled)
    }

    fn forward_count(&self) -> usize {
        self.count.get()
    }
}
