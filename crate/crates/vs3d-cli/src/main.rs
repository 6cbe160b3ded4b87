//! `vs3d` command line: train the toy backbone, run and ablate edits, dump
//! calibration probes, and render inspection artifacts.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use vs3d::config::{load_config, CheckpointPaths, FileConfig, ModuleSwitches};
use vs3d::flowedit::{residual_diagnostic, NoiseStream};
use vs3d::io;
use vs3d::pipeline::{
    ablate, add_hat_requests, edit, editor_inputs, run_editor, Backbone, EditReport, EditRequest,
};
use vs3d::rasi::calibrate;
use vs3d::toyworld::{
    dense_validation_batch, null_condition, train_dense, train_sparse, DenseToyNet, ShapeBatchSource,
    SparseKind, SparseNet, SparseShapeSource, TrainConfig, GEOM_FEAT_DIM, MAT_FEAT_DIM,
};
use vs3d::VsError;

const RESOLUTION: usize = 24;
const COND_WIDTH: usize = 8;
const DENSE_HIDDEN: usize = 128;
const SPARSE_HIDDEN: usize = 64;
const HOLDOUT_SALT: u64 = 0x401d_0475;

#[derive(Parser)]
#[command(name = "vs3d", about = "Velocity-space editing on a toy rectified-flow backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Module subset, e.g. "rasi,pmg,tar" or "" for the plain baseline.
    #[arg(long)]
    modules: Option<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate before cosine decay.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (dense trainer only).
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense stage-1 velocity net.
    TrainDense(TrainArgs),
    /// Train the sparse geometry net.
    TrainSparseGeo(TrainArgs),
    /// Train the sparse material net.
    TrainSparseMat(TrainArgs),
    /// Run one edit from the config's `edit` section.
    Edit(CommonArgs),
    /// Sweep module subsets over paired-seed add-hat edits.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of edit pairs.
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Dump calibration losses and leakage-residual diagnostics as CSV.
    Probe(CommonArgs),
    /// Run the edit and render every inspection artifact (grids, PGMs,
    /// agreement maps, φ cache).
    Report(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .downcast_ref::<VsError>()
                .map(|v| {
                    matches!(
                        v,
                        VsError::Config(_)
                            | VsError::InvalidArgument(_)
                            | VsError::InvalidSchedule(_)
                    )
                })
                .unwrap_or(false);
            if config_error {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_or_default(common: &CommonArgs) -> anyhow::Result<FileConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(list) = &common.modules {
        cfg.modules = ModuleSwitches::from_list(list)?;
    }
    Ok(cfg)
}

fn checkpoint_paths(cfg: &FileConfig, out: &Path) -> CheckpointPaths {
    cfg.checkpoints.clone().unwrap_or_else(|| CheckpointPaths {
        dense: out.join("dense.ckpt"),
        geometry: out.join("geometry.ckpt"),
        material: out.join("material.ckpt"),
    })
}

fn load_backbone(cfg: &FileConfig, out: &Path) -> anyhow::Result<Backbone> {
    let paths = checkpoint_paths(cfg, out);
    Backbone::load(&paths, RESOLUTION)
        .with_context(|| format!("loading checkpoints ({})", paths.dense.display()))
}

fn train_config(cfg: &FileConfig, args: &TrainArgs, default_steps: usize) -> TrainConfig {
    TrainConfig {
        steps: args.steps.unwrap_or(default_steps),
        lr: args.lr.unwrap_or(1e-3),
        seed: cfg.seed,
        cond_dropout: 0.1,
        val_every: 500,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainDense(args) => {
            let cfg = load_or_default(&args.common)?;
            std::fs::create_dir_all(&args.common.out)?;
            let mut rng = rand_seed(cfg.seed);
            let mut net = DenseToyNet::init(1, RESOLUTION, COND_WIDTH, DENSE_HIDDEN, &mut rng)?;
            let mut source = ShapeBatchSource {
                resolution: RESOLUTION,
                batch: args.batch.unwrap_or(32),
            };
            let tc = train_config(&cfg, &args, 20_000);
            let val = dense_validation_batch(cfg.seed ^ HOLDOUT_SALT, 20, RESOLUTION)?;
            eprintln!("training dense net: {} steps", tc.steps);
            let report = train_dense(&mut net, &mut source, &tc, Some(&val))?;
            let path = checkpoint_paths(&cfg, &args.common.out).dense;
            io::save_checkpoint(&path, &net.mlp, net.cond_width)?;
            std::fs::write(
                args.common.out.join("dense_loss.csv"),
                io::loss_curve_csv(&report.curve),
            )?;
            std::fs::write(
                args.common.out.join("dense_val_loss.csv"),
                io::loss_curve_csv(&report.val_curve),
            )?;
            eprintln!("saved {}", path.display());
            Ok(())
        }
        Command::TrainSparseGeo(args) => train_sparse_cmd(args, SparseKind::Geometry),
        Command::TrainSparseMat(args) => train_sparse_cmd(args, SparseKind::Material),
        Command::Edit(common) => {
            let cfg = load_or_default(&common)?;
            let backbone = load_backbone(&cfg, &common.out)?;
            let request = EditRequest::from_config(&cfg)?;
            std::fs::create_dir_all(&common.out)?;
            let report = edit(&backbone, &request)?;
            write_edit_artifacts(&common.out, &report, false)?;
            println!(
                "preserved_drift={} edit_response={} occupancy_iou={} edit_region_iou={} mat_src_distance_preserve={}",
                report.metrics.preserved_drift,
                report.metrics.edit_response,
                report.metrics.occupancy_iou,
                report.metrics.edit_region_iou,
                report.metrics.mat_src_distance_preserve,
            );
            Ok(())
        }
        Command::Ablate { common, pairs } => {
            let cfg = load_or_default(&common)?;
            let backbone = load_backbone(&cfg, &common.out)?;
            std::fs::create_dir_all(&common.out)?;
            let requests = add_hat_requests(&cfg.settings(), pairs, cfg.seed);
            let table = ablate(&backbone, &requests)?;
            let path = common.out.join("ablation.csv");
            std::fs::write(&path, table.to_csv())?;
            for config in ["flowedit", "rasi", "rasi_pmg", "full"] {
                println!(
                    "{config}: median preserved_drift={:.6} edit_region_iou={:.4} mat_dist={:.6}",
                    table.median(config, |r| r.preserved_drift),
                    table.median(config, |r| r.edit_region_iou),
                    table.median(config, |r| r.mat_src_distance_preserve),
                );
            }
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Probe(common) => {
            let cfg = load_or_default(&common)?;
            let backbone = load_backbone(&cfg, &common.out)?;
            let request = EditRequest::from_config(&cfg)?;
            std::fs::create_dir_all(&common.out)?;
            let csv = probe_csv(&backbone, &request)?;
            let path = common.out.join("probe.csv");
            std::fs::write(&path, csv)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        Command::Report(common) => {
            let cfg = load_or_default(&common)?;
            let backbone = load_backbone(&cfg, &common.out)?;
            let request = EditRequest::from_config(&cfg)?;
            std::fs::create_dir_all(&common.out)?;
            let report = edit(&backbone, &request)?;
            write_edit_artifacts(&common.out, &report, true)?;
            eprintln!("artifacts in {}", common.out.display());
            Ok(())
        }
    }
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn train_sparse_cmd(args: TrainArgs, kind: SparseKind) -> anyhow::Result<()> {
    let cfg = load_or_default(&args.common)?;
    std::fs::create_dir_all(&args.common.out)?;
    let mut rng = rand_seed(cfg.seed ^ kind_salt(kind));
    let feat_dim = match kind {
        SparseKind::Geometry => GEOM_FEAT_DIM,
        SparseKind::Material => MAT_FEAT_DIM,
    };
    let mut net = SparseNet::init(kind, feat_dim, RESOLUTION, COND_WIDTH, SPARSE_HIDDEN, &mut rng)?;
    let mut source = SparseShapeSource {
        resolution: RESOLUTION,
        kind,
    };
    let tc = train_config(&cfg, &args, 8_000);
    eprintln!("training {} net: {} steps", label(kind), tc.steps);
    let report = train_sparse(&mut net, &mut source, &tc, None)?;
    let paths = checkpoint_paths(&cfg, &args.common.out);
    let path = match kind {
        SparseKind::Geometry => paths.geometry,
        SparseKind::Material => paths.material,
    };
    io::save_checkpoint(&path, &net.mlp, net.cond_width)?;
    std::fs::write(
        args.common.out.join(format!("{}_loss.csv", label(kind))),
        io::loss_curve_csv(&report.curve),
    )?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn kind_salt(kind: SparseKind) -> u64 {
    match kind {
        SparseKind::Geometry => 0x6e0,
        SparseKind::Material => 0x3a7,
    }
}

fn label(kind: SparseKind) -> &'static str {
    match kind {
        SparseKind::Geometry => "geometry",
        SparseKind::Material => "material",
    }
}

/// Calibration + leakage diagnostics CSV: one row per active step.
fn probe_csv(backbone: &Backbone, request: &EditRequest) -> anyhow::Result<String> {
    let inputs = editor_inputs(request, backbone.dense.resolution)?;
    let schedule = request.settings.schedule.build()?;
    let guidance = request.settings.guidance;
    let phi0 = null_condition();
    let x_src_row = inputs.x_src.as_row();
    let cache = calibrate(
        &backbone.dense,
        &x_src_row,
        &inputs.c_src,
        &phi0,
        &schedule,
        &guidance,
        &request.settings.rasi,
        request.settings.sampling.noise_samples,
        request.seed,
    )?;
    let mut noise = NoiseStream::probe_phase(request.seed ^ 0xd1a6, true);
    let mut out =
        String::from("step,t,loss_initial,loss_final,inner_steps,residual_gap,residual_rhs_norm\n");
    for entry in cache.entries() {
        let eps = noise.draw(x_src_row.shape());
        let diag = residual_diagnostic(
            &backbone.dense,
            &x_src_row,
            &inputs.c_src,
            &phi0,
            &guidance,
            &schedule,
            entry.t,
            &eps,
        )?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            entry.step,
            entry.t,
            entry.loss_initial,
            entry.loss_final,
            entry.inner_steps_used,
            diag.gap,
            diag.rhs.norm(),
        ));
    }
    Ok(out)
}

fn write_edit_artifacts(out: &Path, report: &EditReport, full: bool) -> anyhow::Result<()> {
    let metrics = serde_json::json!({
        "preserved_drift": report.metrics.preserved_drift,
        "edit_response": report.metrics.edit_response,
        "occupancy_iou": report.metrics.occupancy_iou,
        "edit_region_iou": report.metrics.edit_region_iou,
        "mat_src_distance_preserve": report.metrics.mat_src_distance_preserve,
        "geo_src_distance_preserve": report.metrics.geo_src_distance_preserve,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    io::save_grid(&out.join("z_final.grid"), &report.outcome.z_final.values)?;
    io::save_grid_pgm(&out.join("z_final.pgm"), &report.outcome.z_final)?;
    if let Some(cache) = &report.outcome.phi_cache {
        let bytes = io::encode_phi_cache(cache, 8)?;
        std::fs::write(out.join("phi_cache.bin"), bytes)?;
    }
    if full {
        let r = report.outcome.z_final.resolution;
        if let Some(field) = &report.outcome.geo_agreement {
            std::fs::write(out.join("geo_agreement.csv"), io::agreement_csv(field))?;
            io::write_pgm(&out.join("geo_agreement.pgm"), r, r, &io::agreement_pixels(field, r))?;
        }
        if let Some(field) = &report.outcome.mat_agreement {
            std::fs::write(out.join("mat_agreement.csv"), io::agreement_csv(field))?;
            io::write_pgm(&out.join("mat_agreement.pgm"), r, r, &io::agreement_pixels(field, r))?;
        }
        let mut trace = String::from("k,t,update_preserve,update_edit\n");
        for row in &report.metrics.region_trace {
            trace.push_str(&format!(
                "{},{},{},{}\n",
                row.k, row.t, row.update_preserve, row.update_edit
            ));
        }
        std::fs::write(out.join("region_trace.csv"), trace)?;
        let mut rasi = String::from("step,loss_initial,loss_final\n");
        for (k, li, lf) in &report.metrics.rasi_losses {
            rasi.push_str(&format!("{k},{li},{lf}\n"));
        }
        std::fs::write(out.join("rasi_losses.csv"), rasi)?;
    }
    Ok(())
}
