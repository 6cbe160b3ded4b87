//! The editor proper: stage 1 calibration + edit loop on the dense latent,
//! sign decode, then the two sparse stages with twin-agreement blending.
//!
//! This module sees exactly the editor-visible inputs — source latent,
//! source token encodings, the two condition embeddings, seed, config — and
//! nothing else. Ground-truth target assets and evaluation masks live on the
//! harness side only.

use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::ModuleSwitches;
use crate::error::{Result, VsError};
use crate::flow::Condition;
use crate::flowedit::{edit_loop, EditTrace, PhiSource, UpdateRule};
use crate::rasi::{calibrate, PhiCache};
use crate::tar::{run_stage, AgreementField};
use crate::toyworld::{
    null_condition, LatentGrid, SlatOrigin, SparseSlat, SparseStageSampler, ToySparseSampler,
};

use super::{Backbone, EditSettings};

/// Exactly what the editor may look at.
#[derive(Debug, Clone)]
pub struct EditorInputs {
    pub x_src: LatentGrid,
    pub src_geo_enc: SparseSlat,
    pub src_mat_enc: SparseSlat,
    pub c_src: Condition,
    pub c_tgt: Condition,
    pub seed: u64,
    pub settings: EditSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditorOutcome {
    pub z_final: LatentGrid,
    pub coords_tgt: Vec<[i32; 2]>,
    pub geo: SparseSlat,
    pub mat: SparseSlat,
    pub geo_agreement: Option<AgreementField>,
    pub mat_agreement: Option<AgreementField>,
    pub phi_cache: Option<PhiCache>,
    pub trace: EditTrace,
    pub call_log: Vec<String>,
}

const SPARSE_SALT: u64 = 0x51a7_0000_0000_0001;

/// Run the three-stage edit. Sampler invocations and phase boundaries are
/// recorded in the call log so tests can assert the stage order.
pub fn run_editor(backbone: &Backbone, inputs: &EditorInputs) -> Result<EditorOutcome> {
    let s = &inputs.settings;
    let schedule = s.schedule.build()?;
    let guidance = s.guidance;
    let phi0 = null_condition();
    let log: Rc<RefCell<Vec<String>>> = Rc::new(RefCell::new(Vec::new()));

    let x_src_row = inputs.x_src.as_row();

    // Phase 1: per-step calibration of the unconditional embedding. Sees
    // only source-side data.
    let phi_cache: Option<PhiCache> = if s.modules.rasi {
        log.borrow_mut().push("stage1.calibrate".into());
        Some(calibrate(
            &backbone.dense,
            &x_src_row,
            &inputs.c_src,
            &phi0,
            &schedule,
            &guidance,
            &s.rasi,
            s.sampling.noise_samples,
            inputs.seed,
        )?)
    } else {
        None
    };

    // Phase 2: edit integration.
    log.borrow_mut().push("stage1.edit".into());
    let update_rule = if s.modules.pmg {
        UpdateRule::Pmg(s.pmg)
    } else {
        UpdateRule::PlainMean
    };
    let phi_source = match &phi_cache {
        Some(cache) => PhiSource::Cache(cache),
        None => PhiSource::Fixed(&phi0),
    };
    let (z_final_row, trace) = edit_loop(
        &backbone.dense,
        &x_src_row,
        &inputs.c_src,
        &inputs.c_tgt,
        &schedule,
        &guidance,
        s.sampling.noise_samples,
        &update_rule,
        phi_source,
        inputs.seed,
    )?;
    let z_final = LatentGrid::from_row(&z_final_row, inputs.x_src.channels, inputs.x_src.resolution)?;

    // Occupancy decode by sign threshold.
    let coords_tgt = z_final.decode_coords();
    if coords_tgt.is_empty() {
        return Err(VsError::Numerical {
            context: "occupancy decode".into(),
            detail: "edited latent decodes to an empty active set".into(),
        });
    }

    // Stage 2/3 noises in pipeline order from the request seed stream.
    let mut sparse_rng = ChaCha8Rng::seed_from_u64(inputs.seed ^ SPARSE_SALT);
    let geo_dim = backbone.geometry.feat_dim;
    let mat_dim = backbone.material.feat_dim;
    let eps_geo = Tensor::randn(vec![coords_tgt.len(), geo_dim], &mut sparse_rng);
    let eps_mat = Tensor::randn(vec![coords_tgt.len(), mat_dim], &mut sparse_rng);

    // Stage 2: geometry.
    let geo_sampler = ToySparseSampler::new(
        &backbone.geometry,
        &schedule,
        s.sampling.sparse_omega,
        phi0.clone(),
    )
    .with_label("stage2")
    .with_log(log.clone());
    let (geo, geo_agreement) = if s.modules.tar {
        let out = run_stage(
            &geo_sampler,
            &coords_tgt,
            &eps_geo,
            &inputs.c_src,
            &inputs.c_tgt,
            &inputs.src_geo_enc,
            &s.tar,
            None,
        )?;
        log.borrow_mut().push("stage2.blend".into());
        (out.slat, Some(out.agreement))
    } else {
        (geo_sampler.sample(&coords_tgt, &eps_geo, &inputs.c_tgt, None)?, None)
    };

    // Stage 3: material, conditioned on the stage-2 output.
    let geo_ctx = geo.with_feats(geo.feat_matrix(), SlatOrigin::Sampled)?;
    let mat_sampler = ToySparseSampler::new(
        &backbone.material,
        &schedule,
        s.sampling.sparse_omega,
        phi0.clone(),
    )
    .with_label("stage3")
    .with_log(log.clone());
    let (mat, mat_agreement) = if s.modules.tar {
        let out = run_stage(
            &mat_sampler,
            &coords_tgt,
            &eps_mat,
            &inputs.c_src,
            &inputs.c_tgt,
            &inputs.src_mat_enc,
            &s.tar,
            Some(&geo_ctx),
        )?;
        log.borrow_mut().push("stage3.blend".into());
        (out.slat, Some(out.agreement))
    } else {
        (
            mat_sampler.sample(&coords_tgt, &eps_mat, &inputs.c_tgt, Some(&geo_ctx))?,
            None,
        )
    };

    let call_log = log.borrow().clone();
    Ok(EditorOutcome {
        z_final,
        coords_tgt,
        geo,
        mat,
        geo_agreement,
        mat_agreement,
        phi_cache,
        trace,
        call_log,
    })
}

/// Baseline/ablation variants share everything but the module switches.
pub fn with_modules(settings: &EditSettings, modules: ModuleSwitches) -> EditSettings {
    let mut s = settings.clone();
    s.modules = modules;
    s
}
