//! Desk-scale stand-in for a frozen 3D backbone: procedural shapes, toy
//! velocity networks trained by conditional flow matching, the analytic
//! Gaussian-flow oracle, and the identity source-token encoder.

mod embed;
mod gaussian;
mod net;
mod shape;
mod train;

pub use embed::{embed_condition, null_condition};
pub use gaussian::GaussianOracleField;
pub use net::{
    coord_features, time_features, DenseToyNet, Mlp, MlpNodes, SparseKind, SparseNet,
    SparseStageSampler, ToySparseSampler, COORD_FEAT_DIM, TIME_FEAT_DIM,
};
pub use shape::{
    gen_shape, preserve_mask, LatentGrid, ShapeAsset, ShapeParams, SlatOrigin, SparseSlat,
    GEOM_FEAT_DIM, MAT_FEAT_DIM,
};
pub use train::{
    dense_cfm_loss, dense_validation_batch, holdout_params, sparse_cfm_loss, train_dense,
    train_sparse, DenseBatch, DenseBatchSource, FixedBatchSource, ShapeBatchSource, SparseBatch,
    SparseBatchSource, SparseShapeSource, TrainConfig, TrainReport,
};

use crate::error::Result;
use crate::toyworld::shape::SparseSlat as Slat;

/// Toy stand-in for the source-asset encoder: latents are their own codes.
/// Idempotent; coordinates and features pass through untouched.
pub fn encode_source_tokens(asset: &Slat) -> Result<Slat> {
    Slat::new(
        asset.coords().to_vec(),
        asset.feat_dim(),
        asset.feats().to_vec(),
        SlatOrigin::SourceEncoded,
    )
}
