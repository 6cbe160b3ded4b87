//! Evaluation harness. This is the only place allowed to look at
//! ground-truth target assets and the preserve mask; it consumes a finished
//! editor outcome and produces metrics. Nothing computed here flows back
//! into the editor.

use crate::error::{Result, VsError};
use crate::toyworld::{encode_source_tokens, gen_shape, preserve_mask, LatentGrid, SparseSlat};

use super::editor::EditorOutcome;
use super::EditRequest;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionTraceRow {
    pub k: usize,
    pub t: f64,
    /// Mean |u| over preserve-region cells at this step.
    pub update_preserve: f64,
    /// Mean |u| over edit-region cells.
    pub update_edit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditMetrics {
    /// Mean |z_final - x_src| over the preserve region.
    pub preserved_drift: f64,
    /// Mean |z_final - x_src| over the edit region (complement).
    pub edit_response: f64,
    /// Occupancy IoU against the ground-truth target shape, all cells.
    pub occupancy_iou: f64,
    /// Occupancy IoU restricted to the edit region.
    pub edit_region_iou: f64,
    /// Mean distance of blended material tokens to the source encoding over
    /// preserve-region intersection tokens.
    pub mat_src_distance_preserve: f64,
    /// Same for geometry tokens.
    pub geo_src_distance_preserve: f64,
    /// Per-step velocity-difference magnitudes split by region.
    pub region_trace: Vec<RegionTraceRow>,
    /// Calibration bookkeeping (step, initial loss, final loss).
    pub rasi_losses: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub outcome: EditorOutcome,
    pub metrics: EditMetrics,
}

fn masked_mean_abs_diff(a: &LatentGrid, b: &LatentGrid, mask: &[bool], want: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((x, y), &m) in a.values.data().iter().zip(b.values.data()).zip(mask) {
        if m == want {
            sum += (x - y).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Sign-decoded IoU over an optional cell filter.
pub fn occupancy_iou(a: &LatentGrid, b: &LatentGrid, filter: Option<(&[bool], bool)>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (idx, (x, y)) in a.values.data().iter().zip(b.values.data()).enumerate() {
        if let Some((mask, want)) = filter {
            if mask[idx] != want {
                continue;
            }
        }
        let (pa, pb) = (*x > 0.0, *y > 0.0);
        if pa && pb {
            inter += 1;
        }
        if pa || pb {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean feature distance of output tokens to the source encoding over the
/// coordinate intersection, restricted to preserve-region cells.
fn token_distance_on_preserve(
    out: &SparseSlat,
    src_enc: &SparseSlat,
    mask: &[bool],
    resolution: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, coord) in out.coords().iter().enumerate() {
        let cell = coord[0] as usize * resolution + coord[1] as usize;
        if cell >= mask.len() || !mask[cell] {
            continue;
        }
        if let Some(j) = src_enc.index_of(*coord) {
            let d: f64 = out
                .feat(i)
                .iter()
                .zip(src_enc.feat(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Build the report for one finished edit: compare against ground truth the
/// editor never saw.
pub fn evaluate(request: &EditRequest, outcome: EditorOutcome) -> Result<EditReport> {
    let r = outcome.z_final.resolution;
    let src_asset = gen_shape(&request.source, r)?;
    let tgt_asset = gen_shape(&request.target, r)?;
    let mask = preserve_mask(&request.source, &request.target, r)?;
    if mask.len() != outcome.z_final.numel() {
        return Err(VsError::InvalidArgument("mask/grid size mismatch".into()));
    }

    let preserved_drift = masked_mean_abs_diff(&outcome.z_final, &src_asset.stage1, &mask, true);
    let edit_response = masked_mean_abs_diff(&outcome.z_final, &src_asset.stage1, &mask, false);
    let occupancy = occupancy_iou(&outcome.z_final, &tgt_asset.stage1, None);
    let edit_region = occupancy_iou(&outcome.z_final, &tgt_asset.stage1, Some((&mask, false)));

    let src_geo_enc = encode_source_tokens(&src_asset.geom)?;
    let src_mat_enc = encode_source_tokens(&src_asset.mat)?;
    let mat_dist = token_distance_on_preserve(&outcome.mat, &src_mat_enc, &mask, r);
    let geo_dist = token_distance_on_preserve(&outcome.geo, &src_geo_enc, &mask, r);

    let region_trace = outcome
        .trace
        .steps
        .iter()
        .map(|s| {
            let grid = LatentGrid::from_row(&s.update, outcome.z_final.channels, r)
                .expect("trace update is grid-shaped");
            RegionTraceRow {
                k: s.k,
                t: s.t,
                update_preserve: masked_mean_abs_diff(
                    &grid,
                    &LatentGrid::new(grid.channels, r, crate::autodiff::Tensor::zeros(vec![grid.channels, r, r])).unwrap(),
                    &mask,
                    true,
                ),
                update_edit: masked_mean_abs_diff(
                    &grid,
                    &LatentGrid::new(grid.channels, r, crate::autodiff::Tensor::zeros(vec![grid.channels, r, r])).unwrap(),
                    &mask,
                    false,
                ),
            }
        })
        .collect();

    let rasi_losses = outcome
        .phi_cache
        .as_ref()
        .map(|c| c.entries().map(|e| (e.step, e.loss_initial, e.loss_final)).collect())
        .unwrap_or_default();

    Ok(EditReport {
        metrics: EditMetrics {
            preserved_drift,
            edit_response,
            occupancy_iou: occupancy,
            edit_region_iou: edit_region,
            mat_src_distance_preserve: mat_dist,
            geo_src_distance_preserve: geo_dist,
            region_trace,
            rasi_losses,
        },
        outcome,
    })
}
