//! Procedural shape dataset: a disk body with an optional square hat on top.
//! Rasterization is a pure function of the parameters, so ground truth is
//! reproducible anywhere in the test harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, VsError};

/// Parameters of one procedural shape. `hat_size == 0` means no hat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub body_radius: f64,
    pub hat_size: f64,
    pub hat_hue: f64,
    pub body_hue: f64,
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.25..=0.45).contains(&self.body_radius)
            && (self.hat_size == 0.0 || (0.1..=0.25).contains(&self.hat_size))
            && (0.0..=1.0).contains(&self.hat_hue)
            && (0.0..=1.0).contains(&self.body_hue);
        if ok {
            Ok(())
        } else {
            Err(VsError::InvalidArgument(format!("shape params out of range: {self:?}")))
        }
    }

    /// Uniform draw over the parameter space; no hat with probability 1/2.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let body_radius = rng.gen_range(0.25..=0.45);
        let hat_size = if rng.gen_bool(0.5) {
            rng.gen_range(0.1..=0.25)
        } else {
            0.0
        };
        ShapeParams {
            body_radius,
            hat_size,
            hat_hue: rng.gen_range(0.0..=1.0),
            body_hue: rng.gen_range(0.0..=1.0),
        }
    }
}

/// Dense stage-1 latent on a regular 2-D grid, occupancy encoded ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub channels: usize,
    pub resolution: usize,
    pub values: Tensor,
}

impl LatentGrid {
    pub fn new(channels: usize, resolution: usize, values: Tensor) -> Result<Self> {
        if values.shape() != [channels, resolution, resolution] {
            return Err(VsError::ShapeMismatch {
                op: "latent_grid",
                lhs: vec![channels, resolution, resolution],
                rhs: values.shape().to_vec(),
            });
        }
        Ok(LatentGrid {
            channels,
            resolution,
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.numel()
    }

    /// Flatten to a 1×(C·R·R) row for field evaluation.
    pub fn as_row(&self) -> Tensor {
        self.values
            .reshape(vec![1, self.values.numel()])
            .expect("same element count")
    }

    pub fn from_row(row: &Tensor, channels: usize, resolution: usize) -> Result<Self> {
        let values = row.reshape(vec![channels, resolution, resolution])?;
        LatentGrid::new(channels, resolution, values)
    }

    /// Sign-decode channel 0 into the active coordinate set (cells > 0),
    /// sorted lexicographically.
    pub fn decode_coords(&self) -> Vec<[i32; 2]> {
        let r = self.resolution;
        let mut coords = Vec::new();
        for i in 0..r {
            for j in 0..r {
                if self.values.data()[i * r + j] > 0.0 {
                    coords.push([i as i32, j as i32]);
                }
            }
        }
        coords
    }
}

/// Origin tag for sparse token sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlatOrigin {
    GroundTruth,
    SourceEncoded,
    Sampled,
    Blended,
}

/// Sparse structured latent: sorted unique integer coordinates plus one
/// feature vector per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSlat {
    coords: Vec<[i32; 2]>,
    feat_dim: usize,
    feats: Vec<f64>,
    origin: SlatOrigin,
}

impl SparseSlat {
    pub fn new(
        coords: Vec<[i32; 2]>,
        feat_dim: usize,
        feats: Vec<f64>,
        origin: SlatOrigin,
    ) -> Result<Self> {
        if coords.len() * feat_dim != feats.len() {
            return Err(VsError::InvalidArgument(format!(
                "slat: {} coords × {} dims != {} feature values",
                coords.len(),
                feat_dim,
                feats.len()
            )));
        }
        if !coords.windows(2).all(|w| w[0] < w[1]) {
            return Err(VsError::InvalidArgument(
                "slat coords must be sorted and unique".into(),
            ));
        }
        if !feats.iter().all(|v| v.is_finite()) {
            return Err(VsError::NonFinite { op: "slat" });
        }
        Ok(SparseSlat {
            coords,
            feat_dim,
            feats,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn coords(&self) -> &[[i32; 2]] {
        &self.coords
    }

    pub fn feats(&self) -> &[f64] {
        &self.feats
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn origin(&self) -> SlatOrigin {
        self.origin
    }

    /// Features as an N×F tensor (token order = coordinate order).
    pub fn feat_matrix(&self) -> Tensor {
        Tensor::new(vec![self.coords.len(), self.feat_dim], self.feats.clone())
            .expect("finite by invariant")
    }

    pub fn with_feats(&self, feats: Tensor, origin: SlatOrigin) -> Result<Self> {
        if feats.shape() != [self.coords.len(), self.feat_dim] {
            return Err(VsError::ShapeMismatch {
                op: "slat_with_feats",
                lhs: vec![self.coords.len(), self.feat_dim],
                rhs: feats.shape().to_vec(),
            });
        }
        SparseSlat::new(self.coords.clone(), self.feat_dim, feats.data().to_vec(), origin)
    }

    pub fn index_of(&self, coord: [i32; 2]) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }
}

/// Everything `gen_shape` knows about one parameter set. `hat_mask` is
/// harness-only ground truth; editor code never sees it.
#[derive(Debug, Clone)]
pub struct ShapeAsset {
    pub stage1: LatentGrid,
    pub geom: SparseSlat,
    pub mat: SparseSlat,
    pub hat_mask: Vec<bool>,
}

pub const GEOM_FEAT_DIM: usize = 4;
pub const MAT_FEAT_DIM: usize = 4;

fn disk_center(r: usize) -> (f64, f64) {
    (0.5 * r as f64, 0.6 * r as f64)
}

/// Hat square: side h·R, centered horizontally on the disk, resting on the
/// disk's topmost point (y grows downward).
fn hat_box(params: &ShapeParams, r: usize) -> Option<(f64, f64, f64)> {
    if params.hat_size == 0.0 {
        return None;
    }
    let (cx, cy) = disk_center(r);
    let rad = params.body_radius * r as f64;
    let side = params.hat_size * r as f64;
    let y_top = cy - rad;
    // box center
    Some((cx, y_top - side / 2.0, side / 2.0))
}

fn in_disk(x: f64, y: f64, params: &ShapeParams, r: usize) -> bool {
    let (cx, cy) = disk_center(r);
    let rad = params.body_radius * r as f64;
    (x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad
}

fn in_hat(x: f64, y: f64, params: &ShapeParams, r: usize) -> bool {
    match hat_box(params, r) {
        Some((bx, by, half)) => (x - bx).abs() <= half && (y - by).abs() <= half,
        None => false,
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    // HSV with s = v = 1.
    let h6 = (h * 6.0).rem_euclid(6.0);
    let x = 1.0 - (h6.rem_euclid(2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Deterministic rasterization of a parameter set onto an R×R grid.
pub fn gen_shape(params: &ShapeParams, r: usize) -> Result<ShapeAsset> {
    params.validate()?;
    if r < 8 {
        return Err(VsError::InvalidArgument(format!("resolution {r} < 8")));
    }
    let (cx, cy) = disk_center(r);
    let rad = params.body_radius * r as f64;
    let hat = hat_box(params, r);

    let mut occupancy = vec![-1.0; r * r];
    let mut hat_mask = vec![false; r * r];
    let mut coords = Vec::new();
    let mut geom_feats = Vec::new();
    let mut mat_feats = Vec::new();

    for i in 0..r {
        for j in 0..r {
            let x = j as f64 + 0.5;
            let y = i as f64 + 0.5;
            let body = in_disk(x, y, params, r);
            let hat_cell = in_hat(x, y, params, r);
            if hat_cell {
                hat_mask[i * r + j] = true;
            }
            if !(body || hat_cell) {
                continue;
            }
            occupancy[i * r + j] = 1.0;
            coords.push([i as i32, j as i32]);

            // Signed distance to the union boundary, positive inside.
            let sd_disk = rad - ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt();
            let sd_hat = match hat {
                Some((bx, by, half)) => {
                    let dx = (x - bx).abs() - half;
                    let dy = (y - by).abs() - half;
                    if dx <= 0.0 && dy <= 0.0 {
                        -dx.max(dy)
                    } else {
                        -(dx.max(0.0).hypot(dy.max(0.0)))
                    }
                }
                None => f64::NEG_INFINITY,
            };
            let sd = sd_disk.max(sd_hat);

            // Outward normal of the owning part (hat wins where both cover).
            let (nx, ny) = if hat_cell {
                let (bx, by, half) = hat.unwrap();
                let px = half - (x - bx).abs();
                let py = half - (y - by).abs();
                if px < py {
                    ((x - bx).signum(), 0.0)
                } else {
                    (0.0, (y - by).signum())
                }
            } else {
                let d = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt();
                if d < 1e-9 {
                    (0.0, -1.0)
                } else {
                    ((x - cx) / d, (y - cy) / d)
                }
            };
            geom_feats.extend_from_slice(&[sd, nx, ny, 1.0]);

            let rgb = hue_to_rgb(if hat_cell { params.hat_hue } else { params.body_hue });
            mat_feats.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 1.0]);
        }
    }

    let stage1 = LatentGrid::new(1, r, Tensor::new(vec![1, r, r], occupancy)?)?;
    let geom = SparseSlat::new(coords.clone(), GEOM_FEAT_DIM, geom_feats, SlatOrigin::GroundTruth)?;
    let mat = SparseSlat::new(coords, MAT_FEAT_DIM, mat_feats, SlatOrigin::GroundTruth)?;
    Ok(ShapeAsset {
        stage1,
        geom,
        mat,
        hat_mask,
    })
}

/// Harness-only: cells untouched by the hat of either parameter set of an
/// edit pair. Never exposed to editor code.
pub fn preserve_mask(a: &ShapeParams, b: &ShapeParams, r: usize) -> Result<Vec<bool>> {
    let ha = gen_shape(a, r)?.hat_mask;
    let hb = gen_shape(b, r)?.hat_mask;
    Ok(ha.iter().zip(&hb).map(|(&x, &y)| !(x || y)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(h: f64) -> ShapeParams {
        ShapeParams {
            body_radius: 0.35,
            hat_size: h,
            hat_hue: 0.1,
            body_hue: 0.6,
        }
    }

    #[test]
    fn no_hat_means_disk_only() {
        let asset = gen_shape(&params(0.0), 24).unwrap();
        assert!(asset.hat_mask.iter().all(|&m| !m));
        // every active cell is inside the disk
        let p = params(0.0);
        for c in asset.geom.coords() {
            let (x, y) = (c[1] as f64 + 0.5, c[0] as f64 + 0.5);
            assert!(in_disk(x, y, &p, 24));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_shape(&params(0.2), 24).unwrap();
        let b = gen_shape(&params(0.2), 24).unwrap();
        assert_eq!(a.stage1, b.stage1);
        assert_eq!(a.geom, b.geom);
        assert_eq!(a.mat, b.mat);
        assert_eq!(a.hat_mask, b.hat_mask);
    }

    #[test]
    fn active_count_matches_brute_force_disk_test() {
        // Independent per-pixel membership count for the hatless case.
        let p = ShapeParams {
            body_radius: 0.45,
            hat_size: 0.0,
            hat_hue: 0.0,
            body_hue: 0.0,
        };
        let r = 24usize;
        let asset = gen_shape(&p, r).unwrap();
        let mut count = 0;
        let (cx, cy) = (0.5 * r as f64, 0.6 * r as f64);
        let rad2 = (0.45 * r as f64).powi(2);
        for i in 0..r {
            for j in 0..r {
                let dx = j as f64 + 0.5 - cx;
                let dy = i as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= rad2 {
                    count += 1;
                }
            }
        }
        assert_eq!(asset.geom.len(), count);
        assert!(count > 0);
    }

    #[test]
    fn hat_cells_carry_hat_hue() {
        let p = params(0.25);
        let asset = gen_shape(&p, 24).unwrap();
        let hat_rgb = hue_to_rgb(p.hat_hue);
        let body_rgb = hue_to_rgb(p.body_hue);
        let r = 24;
        let mut saw_hat = false;
        for (i, c) in asset.mat.coords().iter().enumerate() {
            let is_hat = asset.hat_mask[c[0] as usize * r + c[1] as usize];
            let expect = if is_hat { hat_rgb } else { body_rgb };
            assert_eq!(&asset.mat.feat(i)[..3], &expect);
            saw_hat |= is_hat;
        }
        assert!(saw_hat, "hat of size 0.25 must cover at least one cell");
    }

    #[test]
    fn resolution_floor_enforced() {
        assert!(gen_shape(&params(0.0), 7).is_err());
    }

    #[test]
    fn preserve_mask_excludes_both_hats() {
        let src = params(0.0);
        let tgt = params(0.25);
        let mask = preserve_mask(&src, &tgt, 24).unwrap();
        let tgt_hat = gen_shape(&tgt, 24).unwrap().hat_mask;
        for (m, h) in mask.iter().zip(&tgt_hat) {
            assert_eq!(*m, !*h);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(0.0);
        p.body_radius = 0.6;
        assert!(gen_shape(&p, 24).is_err());
        let mut q = params(0.0);
        q.hat_size = 0.05; // inside the forbidden gap (0, 0.1)
        assert!(q.validate().is_err());
    }
}
