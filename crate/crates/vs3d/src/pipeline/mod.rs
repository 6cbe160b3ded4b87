//! End-to-end orchestration: assemble editor inputs from a request, run the
//! three-stage edit, evaluate it, and sweep module subsets for ablations.

pub mod editor;
pub mod harness;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::{
    CheckpointPaths, EditPairConfig, FileConfig, ModuleSwitches, SamplingConfig, ScheduleConfig,
};
use crate::error::{Result, VsError};
use crate::flow::{euler_sample, Condition, ConditionRole, GuidanceConfig, Schedule};
use crate::io::load_checkpoint;
use crate::pmg::PmgConfig;
use crate::rasi::RasiConfig;
use crate::tar::TarConfig;
use crate::toyworld::{
    embed_condition, encode_source_tokens, gen_shape, null_condition, DenseToyNet, LatentGrid,
    ShapeParams, SparseKind, SparseNet, GEOM_FEAT_DIM, MAT_FEAT_DIM,
};

pub use editor::{run_editor, with_modules, EditorInputs, EditorOutcome};
pub use harness::{evaluate, occupancy_iou, EditMetrics, EditReport, RegionTraceRow};

/// All tunables of one edit, minus the asset pair and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSettings {
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub rasi: RasiConfig,
    pub pmg: PmgConfig,
    pub tar: TarConfig,
    pub sampling: SamplingConfig,
    pub modules: ModuleSwitches,
}

impl Default for EditSettings {
    fn default() -> Self {
        EditSettings {
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            rasi: RasiConfig::default(),
            pmg: PmgConfig::default(),
            tar: TarConfig::default(),
            sampling: SamplingConfig::default(),
            modules: ModuleSwitches::default(),
        }
    }
}

impl FileConfig {
    pub fn settings(&self) -> EditSettings {
        EditSettings {
            schedule: self.schedule,
            guidance: self.guidance,
            rasi: self.rasi,
            pmg: self.pmg,
            tar: self.tar,
            sampling: self.sampling,
            modules: self.modules,
        }
    }
}

/// One edit task. The target parameters contribute only their condition
/// embedding to the editor; the target asset itself exists solely on the
/// harness side.
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub source: ShapeParams,
    pub target: ShapeParams,
    pub seed: u64,
    pub settings: EditSettings,
}

impl EditRequest {
    pub fn from_config(cfg: &FileConfig) -> Result<Self> {
        let pair: &EditPairConfig = cfg
            .edit
            .as_ref()
            .ok_or_else(|| VsError::Config("config has no `edit` section".into()))?;
        Ok(EditRequest {
            source: pair.source,
            target: pair.target,
            seed: cfg.seed,
            settings: cfg.settings(),
        })
    }
}

/// The frozen toy backbone: one dense net and two sparse nets.
pub struct Backbone {
    pub dense: DenseToyNet,
    pub geometry: SparseNet,
    pub material: SparseNet,
}

impl Backbone {
    pub fn load(paths: &CheckpointPaths, resolution: usize) -> Result<Self> {
        let (dense_mlp, dense_width) = load_checkpoint(&paths.dense)?;
        let (geo_mlp, geo_width) = load_checkpoint(&paths.geometry)?;
        let (mat_mlp, mat_width) = load_checkpoint(&paths.material)?;
        Ok(Backbone {
            dense: DenseToyNet::from_mlp(dense_mlp, 1, resolution, dense_width)?,
            geometry: SparseNet::from_mlp(geo_mlp, SparseKind::Geometry, GEOM_FEAT_DIM, resolution, geo_width)?,
            material: SparseNet::from_mlp(mat_mlp, SparseKind::Material, MAT_FEAT_DIM, resolution, mat_width)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = CheckpointPaths {
            dense: dir.join("dense.ckpt"),
            geometry: dir.join("geometry.ckpt"),
            material: dir.join("material.ckpt"),
        };
        crate::io::save_checkpoint(&paths.dense, &self.dense.mlp, self.dense.cond_width)?;
        crate::io::save_checkpoint(&paths.geometry, &self.geometry.mlp, self.geometry.cond_width)?;
        crate::io::save_checkpoint(&paths.material, &self.material.mlp, self.material.cond_width)?;
        Ok(paths)
    }
}

/// Build the editor-visible inputs from a request: the source asset (fully
/// known to the editor) and the two condition embeddings. Nothing else about
/// the target crosses this boundary.
pub fn editor_inputs(request: &EditRequest, resolution: usize) -> Result<EditorInputs> {
    request.source.validate()?;
    request.target.validate()?;
    let src_asset = gen_shape(&request.source, resolution)?;
    Ok(EditorInputs {
        x_src: src_asset.stage1,
        src_geo_enc: encode_source_tokens(&src_asset.geom)?,
        src_mat_enc: encode_source_tokens(&src_asset.mat)?,
        c_src: embed_condition(&request.source)?,
        c_tgt: embed_condition(&request.target)?.retagged(ConditionRole::Target),
        seed: request.seed,
        settings: request.settings.clone(),
    })
}

/// Full pipeline for one request: inputs → editor → harness report.
pub fn edit(backbone: &Backbone, request: &EditRequest) -> Result<EditReport> {
    let inputs = editor_inputs(request, backbone.dense.resolution)?;
    let outcome = run_editor(backbone, &inputs)?;
    evaluate(request, outcome)
}

/// Plain generation from the noise prior under a condition; used to sanity
/// check the trained backbone.
pub fn generate_occupancy(
    dense: &DenseToyNet,
    schedule: &Schedule,
    cond: &Condition,
    omega: f64,
    seed: u64,
) -> Result<LatentGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(vec![1, dense.state_dim()], &mut rng);
    let phi0 = null_condition();
    let row = euler_sample(dense, schedule, &eps, cond, &phi0, omega)?;
    LatentGrid::from_row(&row, dense.channels, dense.resolution)
}

/// The four module subsets of the ablation sweep, in activation order.
pub const ABLATION_CONFIGS: [(&str, ModuleSwitches); 4] = [
    (
        "flowedit",
        ModuleSwitches {
            rasi: false,
            pmg: false,
            tar: false,
        },
    ),
    (
        "rasi",
        ModuleSwitches {
            rasi: true,
            pmg: false,
            tar: false,
        },
    ),
    (
        "rasi_pmg",
        ModuleSwitches {
            rasi: true,
            pmg: true,
            tar: false,
        },
    ),
    (
        "full",
        ModuleSwitches {
            rasi: true,
            pmg: true,
            tar: true,
        },
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub request_index: usize,
    pub seed: u64,
    pub config: &'static str,
    pub preserved_drift: f64,
    pub edit_response: f64,
    pub occupancy_iou: f64,
    pub edit_region_iou: f64,
    pub mat_src_distance_preserve: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "request,seed,config,preserved_drift,edit_response,occupancy_iou,edit_region_iou,mat_src_distance_preserve\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.request_index,
                r.seed,
                r.config,
                r.preserved_drift,
                r.edit_response,
                r.occupancy_iou,
                r.edit_region_iou,
                r.mat_src_distance_preserve
            ));
        }
        out
    }

    /// Median of one metric over requests, for a given configuration.
    pub fn median(&self, config: &str, metric: impl Fn(&AblationRow) -> f64) -> f64 {
        let mut values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.config == config)
            .map(metric)
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if values.is_empty() {
            return f64::NAN;
        }
        let n = values.len();
        if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        }
    }
}

/// Run every request under the four module subsets with paired seeds and
/// tabulate the region metrics.
pub fn ablate(backbone: &Backbone, requests: &[EditRequest]) -> Result<AblationTable> {
    if requests.is_empty() {
        return Err(VsError::InvalidArgument("ablation needs at least one request".into()));
    }
    let mut table = AblationTable::default();
    for (idx, request) in requests.iter().enumerate() {
        for (name, modules) in ABLATION_CONFIGS {
            let mut variant = request.clone();
            variant.settings = with_modules(&request.settings, modules);
            let report = edit(backbone, &variant)?;
            table.rows.push(AblationRow {
                request_index: idx,
                seed: request.seed,
                config: name,
                preserved_drift: report.metrics.preserved_drift,
                edit_response: report.metrics.edit_response,
                occupancy_iou: report.metrics.occupancy_iou,
                edit_region_iou: report.metrics.edit_region_iou,
                mat_src_distance_preserve: report.metrics.mat_src_distance_preserve,
            });
        }
    }
    Ok(table)
}

/// Deterministic add-hat edit pairs for the ablation harness: source has no
/// hat, target adds one; everything else shared.
pub fn add_hat_requests(settings: &EditSettings, count: usize, master_seed: u64) -> Vec<EditRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..count)
        .map(|i| {
            use rand::Rng;
            let body_radius = rng.gen_range(0.28..0.42);
            let body_hue = rng.gen_range(0.0..1.0);
            let hat_hue = rng.gen_range(0.0..1.0);
            let hat_size = rng.gen_range(0.14..0.25);
            let source = ShapeParams {
                body_radius,
                hat_size: 0.0,
                hat_hue,
                body_hue,
            };
            let target = ShapeParams {
                body_radius,
                hat_size,
                hat_hue,
                body_hue,
            };
            EditRequest {
                source,
                target,
                seed: master_seed.wrapping_add(1000 + i as u64),
                settings: settings.clone(),
            }
        })
        .collect()
}
