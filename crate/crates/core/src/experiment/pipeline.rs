//! The pipeline commands behind the command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    generate_scene, load_measurement, save_band_png, save_container, save_signed_band_png, Cube, Measurement,
    SpectralCube,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::experiment::config::ExperimentConfig;
use crate::experiment::data::{inventory, write_json, DataDir, Layout, Manifest, Seeds, TruthPolicy};
use crate::metrics::{correlation, curve_csv, psnr, spectral_curve, ssim, MetricReport, Roi};
use crate::optics::{add_noise, ForwardOperator};
use crate::refiner::{load_model_expect, RefinerModel};
use crate::rng::derive_seed;
use crate::solvers::{cache_init, normalized_adjoint, CacheStats};
use crate::training::{
    load_checkpoint, read_loss_csv, refine_from, save_checkpoint, train, write_loss_csv, LossRow, Mode, Problem,
    TrainConfig, TrainScene, TrainState, Variant,
};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rewrites `manifest.json` at the root of the output directory.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.output_dir);
    let manifest = Manifest {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash_hex(),
        system_hash: cfg.system_spec()?.hash_hex(cfg.scene.bands),
        seeds: Seeds {
            scene_base: cfg.scene.rng_seed,
            scenes: (0..cfg.num_scenes).map(|k| cfg.scene_spec(k).rng_seed).collect(),
            mask: cfg.system.mask_seed,
            noise: cfg.system.noise_seed,
            train: cfg.train.rng_seed,
        },
        files: inventory(&layout.root)?,
    };
    write_json(layout.manifest(), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub scenes: usize,
    pub system_hash: String,
}

/// Writes ground-truth cubes, the mask and (noisy) measurements.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    remove_dir(&layout.data())?;
    create_dir(&layout.truth_dir())?;
    create_dir(&layout.measurement_dir())?;
    let op = cfg.operator()?;
    save_container(layout.mask(), &op.mask().clone().into())?;

    let results = exec::map_range(cfg.num_scenes, |k| -> Result<()> {
        let id = ExperimentConfig::scene_id(k);
        let x = generate_scene(&cfg.scene_spec(k))?;
        let y = op.forward(&x)?;
        let y = add_noise(
            &y,
            cfg.system.noise_sigma,
            derive_seed(cfg.system.noise_seed, &[k as u64]),
        )?;
        save_container(layout.truth(&id), &x.into())?;
        save_container(layout.measurement(&id), &y.into())
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let manifest = write_manifest(cfg)?;
    Ok(GenReport {
        scenes: cfg.num_scenes,
        system_hash: manifest.system_hash,
    })
}

/// Measurements and operator for an existing data directory.
struct Inputs {
    data: DataDir,
    op: ForwardOperator,
    scenes: Vec<(String, Measurement<f32>)>,
}

fn load_inputs(cfg: &ExperimentConfig, policy: TruthPolicy, purpose: &str) -> Result<Inputs> {
    let layout = Layout::new(&cfg.output_dir);
    let data = DataDir::open(&layout, policy, purpose)?;
    let op = cfg.operator()?;
    if data.mask()? != *op.mask() {
        return Err(Error::Config(format!(
            "{} does not match the configured system; re-run gen-data",
            layout.mask().display()
        )));
    }
    let ids = data.scene_ids()?;
    if ids.len() != cfg.num_scenes {
        return Err(Error::Config(format!(
            "expected {} scenes in {}, found {}",
            cfg.num_scenes,
            layout.measurement_dir().display(),
            ids.len()
        )));
    }
    let scenes = ids
        .into_iter()
        .map(|id| {
            let y = data.measurement(&id)?;
            Ok((id, y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Inputs { data, op, scenes })
}

/// Cached initial predictions; a stale cache is wiped and rebuilt.
fn initial_predictions(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<(Vec<SpectralCube>, CacheStats)> {
    let dir = Layout::new(&cfg.output_dir).cache();
    match cache_init(&dir, &cfg.predictor, &inputs.op, &inputs.scenes) {
        Err(Error::RebuildRequired { .. }) => {
            remove_dir(&dir)?;
            cache_init(&dir, &cfg.predictor, &inputs.op, &inputs.scenes)
        }
        other => other,
    }
}

fn conditioning(variant: Variant, inputs: &Inputs, x_init: &[SpectralCube]) -> Result<Vec<SpectralCube>> {
    match variant {
        Variant::Residual => Ok(x_init.to_vec()),
        Variant::WithoutInitialPredictor => exec::map(&inputs.scenes, |(_, y)| normalized_adjoint(y, &inputs.op))
            .into_iter()
            .collect(),
    }
}

fn truth_policy(mode: Mode) -> TruthPolicy {
    if mode.needs_ground_truth() {
        TruthPolicy::Allow
    } else {
        TruthPolicy::Deny
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the training directory.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_step: u64,
    pub last: Option<LossRow>,
    pub resumed_from: Option<u64>,
    /// Ground-truth files opened while training.
    pub truth_reads: usize,
    pub cache: CacheStats,
    pub model_path: PathBuf,
}

fn checkpoint_stem(step: u64) -> String {
    format!("step_{step:06}")
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok()) {
        let name = e.file_name().to_string_lossy().into_owned();
        let step = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, e.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { steps: 0, ..a.clone() } == TrainConfig { steps: 0, ..b.clone() }
}

/// Trains one model into `dir` (`loss.csv`, `checkpoints/`, `model.*`).
#[allow(clippy::too_many_arguments)]
fn train_into(
    dir: &Path,
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    scenes: &[TrainScene<f32>],
    op: &ForwardOperator,
    resume: bool,
    observer: &mut dyn FnMut(&LossRow),
) -> Result<(TrainState<f32>, Option<u64>)> {
    let ckpt_dir = dir.join("checkpoints");
    let loss_path = dir.join("loss.csv");
    let mut resumed_from = None;
    let mut state = match (resume, latest_checkpoint(&ckpt_dir)?) {
        (true, Some(path)) => {
            let (mut state, side) = load_checkpoint(&path)?;
            if side.arch != cfg.refiner {
                return Err(Error::ArchMismatch {
                    expected: cfg.refiner.to_string(),
                    found: side.arch.to_string(),
                });
            }
            if !same_run(&side.train_config, train_cfg) {
                return Err(Error::Config(format!(
                    "{} was written with a different training config",
                    path.display()
                )));
            }
            let mut history = read_loss_csv(&loss_path)?;
            if history.len() < state.step as usize {
                return Err(Error::parse(
                    "loss_csv",
                    format!("{} rows but checkpoint is at step {}", history.len(), state.step),
                ));
            }
            history.truncate(state.step as usize);
            state.history = history;
            resumed_from = Some(state.step);
            state
        }
        _ => {
            remove_dir(dir)?;
            TrainState::new(RefinerModel::init(cfg.refiner, cfg.init_seed())?)
        }
    };
    create_dir(&ckpt_dir)?;

    let problem = Problem::new(op, &cfg.predictor, &cfg.group, train_cfg.variant);
    let every = train_cfg.checkpoint_every as u64;
    train(&mut state, scenes, problem, train_cfg, |st| {
        observer(st.history.last().expect("row appended"));
        if every > 0 && st.step % every == 0 {
            save_checkpoint(&ckpt_dir, &checkpoint_stem(st.step), st, train_cfg)?;
            write_loss_csv(&loss_path, &st.history)?;
        }
        Ok(())
    })?;

    save_checkpoint(&ckpt_dir, &checkpoint_stem(state.step), &state, train_cfg)?;
    save_checkpoint(dir, "model", &state, train_cfg)?;
    write_loss_csv(&loss_path, &state.history)?;
    Ok((state, resumed_from))
}

fn train_scenes(inputs: &Inputs, conds: Vec<SpectralCube>, mode: Mode) -> Result<Vec<TrainScene<f32>>> {
    inputs
        .scenes
        .iter()
        .zip(conds)
        .map(|((id, y), cond)| {
            let truth = if mode.needs_ground_truth() {
                Some(inputs.data.truth(id)?)
            } else {
                None
            };
            Ok(TrainScene {
                y: y.clone(),
                cond,
                truth,
            })
        })
        .collect()
}

/// Builds or loads the prediction cache and trains the refiner.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    opts: TrainOptions,
    observer: &mut dyn FnMut(&LossRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let mode = cfg.train.mode;
    let inputs = load_inputs(cfg, truth_policy(mode), mode.name())?;
    let (x_init, cache) = initial_predictions(cfg, &inputs)?;
    let conds = conditioning(cfg.train.variant, &inputs, &x_init)?;
    let scenes = train_scenes(&inputs, conds, mode)?;
    let (state, resumed_from) = train_into(
        &layout.train(),
        cfg,
        &cfg.train,
        &scenes,
        &inputs.op,
        opts.resume,
        observer,
    )?;
    write_manifest(cfg)?;
    Ok(TrainReport {
        steps_run: state.step as usize - resumed_from.unwrap_or(0) as usize,
        final_step: state.step,
        last: state.history.last().copied(),
        resumed_from,
        truth_reads: inputs.data.truth_reads(),
        cache,
        model_path: layout.final_model(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricReport>,
    pub mean_initial_psnr: f64,
    pub mean_refined_psnr: f64,
    pub mean_initial_ssim: f64,
    pub mean_refined_ssim: f64,
}

struct SceneEval {
    initial: MetricReport,
    refined: MetricReport,
    refined_cube: SpectralCube,
}

fn evaluate_scene(
    id: &str,
    model: &RefinerModel<f32>,
    x_init: &SpectralCube,
    cond: &SpectralCube,
    truth: &SpectralCube,
    train_cfg: &TrainConfig,
) -> Result<SceneEval> {
    let refined = refine_from(model, cond, train_cfg.variant, train_cfg.eval_noise_policy)?;
    Ok(SceneEval {
        initial: MetricReport::compute(id, "initial", x_init, truth)?,
        refined: MetricReport::compute(id, "refined", &refined, truth)?,
        refined_cube: refined,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn metrics_csv(rows: &[MetricReport]) -> String {
    let mut s = String::from("scene,method,psnr_db,ssim\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.scene, r.method, r.psnr_db, r.ssim));
    }
    s
}

/// Metrics for the initial predictor and the refined output of every
/// scene, plus spectral curves and band images.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let model_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.final_model());
    let model = load_model_expect(&model_path, &cfg.refiner)?;
    let inputs = load_inputs(cfg, TruthPolicy::Allow, "eval")?;
    let (x_init, _) = initial_predictions(cfg, &inputs)?;
    let conds = conditioning(cfg.train.variant, &inputs, &x_init)?;
    let truths = inputs
        .scenes
        .iter()
        .map(|(id, _)| inputs.data.truth(id))
        .collect::<Result<Vec<_>>>()?;

    let idx: Vec<usize> = (0..truths.len()).collect();
    let evals = exec::map(&idx, |&k| {
        evaluate_scene(
            &inputs.scenes[k].0,
            &model,
            &x_init[k],
            &conds[k],
            &truths[k],
            &cfg.train,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let out = layout.eval();
    remove_dir(&out)?;
    let (curves_dir, png_dir) = (out.join("curves"), out.join("png"));
    create_dir(&curves_dir)?;
    create_dir(&png_dir)?;

    let mut rows = Vec::with_capacity(2 * evals.len());
    let mut corr = String::from("scene,method,correlation\n");
    for (k, e) in evals.iter().enumerate() {
        let id = &inputs.scenes[k].0;
        rows.push(e.initial.clone());
        rows.push(e.refined.clone());

        let roi = Roi::centre(&truths[k]);
        let truth_curve = spectral_curve(&truths[k], roi)?;
        write_text(&curves_dir.join(format!("{id}_truth.csv")), &curve_csv(&truth_curve))?;
        for (method, cube) in [("initial", &x_init[k]), ("refined", &e.refined_cube)] {
            let c = spectral_curve(cube, roi)?;
            write_text(&curves_dir.join(format!("{id}_{method}.csv")), &curve_csv(&c))?;
            let r = correlation(&c, &truth_curve).unwrap_or(f64::NAN);
            corr.push_str(&format!("{id},{method},{r}\n"));
        }

        let residual = e.refined_cube.sub(&x_init[k])?;
        for b in 0..cfg.scene.bands {
            save_band_png(&e.refined_cube, b, png_dir.join(format!("{id}_refined_b{b}.png")))?;
            save_signed_band_png(&residual, b, png_dir.join(format!("{id}_residual_b{b}.png")))?;
        }
    }
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_text(&out.join("curve_correlation.csv"), &corr)?;
    write_manifest(cfg)?;

    Ok(EvalReport {
        mean_initial_psnr: mean(evals.iter().map(|e| e.initial.psnr_db)),
        mean_refined_psnr: mean(evals.iter().map(|e| e.refined.psnr_db)),
        mean_initial_ssim: mean(evals.iter().map(|e| e.initial.ssim)),
        mean_refined_ssim: mean(evals.iter().map(|e| e.refined.ssim)),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Ground-truth files opened by this variant's training.
    pub truth_reads: usize,
}

/// Trained variants compared by [`cmd_ablate`], in output order.
pub const ABLATION_VARIANTS: [(&str, Mode, Variant); 4] = [
    (
        "without_initial_predictor",
        Mode::SelfSupervised,
        Variant::WithoutInitialPredictor,
    ),
    ("self_supervised", Mode::SelfSupervised, Variant::Residual),
    ("no_ec", Mode::NoEc, Variant::Residual),
    ("supervised", Mode::Supervised, Variant::Residual),
];

/// Trains each variant from the same initialization and reports mean
/// metrics; the first row is the frozen initial predictor alone.
pub fn cmd_ablate(cfg: &ExperimentConfig, observer: &(dyn Fn(&str, &LossRow) + Sync)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let eval_inputs = load_inputs(cfg, TruthPolicy::Allow, "eval")?;
    let (x_init, _) = initial_predictions(cfg, &eval_inputs)?;
    let truths = eval_inputs
        .scenes
        .iter()
        .map(|(id, _)| eval_inputs.data.truth(id))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = vec![AblationRow {
        variant: "initial_predictor".into(),
        psnr_db: mean(x_init.iter().zip(&truths).map(|(x, t)| psnr(x, t).expect("same shape"))),
        ssim: mean(x_init.iter().zip(&truths).map(|(x, t)| ssim(x, t).expect("same shape"))),
        truth_reads: 0,
    }];

    let trained = exec::map(&ABLATION_VARIANTS, |&(name, mode, variant)| -> Result<AblationRow> {
        let train_cfg = TrainConfig {
            mode,
            variant,
            ..cfg.train.clone()
        };
        let inputs = load_inputs(cfg, truth_policy(mode), mode.name())?;
        let conds = conditioning(variant, &inputs, &x_init)?;
        let scenes = train_scenes(&inputs, conds.clone(), mode)?;
        let mut obs = |r: &LossRow| observer(name, r);
        let (state, _) = train_into(
            &layout.ablate().join(name),
            cfg,
            &train_cfg,
            &scenes,
            &inputs.op,
            false,
            &mut obs,
        )?;
        let refined = conds
            .iter()
            .map(|c| refine_from(&state.model, c, variant, train_cfg.eval_noise_policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(AblationRow {
            variant: name.to_string(),
            psnr_db: mean(
                refined
                    .iter()
                    .zip(&truths)
                    .map(|(x, t)| psnr(x, t).expect("same shape")),
            ),
            ssim: mean(
                refined
                    .iter()
                    .zip(&truths)
                    .map(|(x, t)| ssim(x, t).expect("same shape")),
            ),
            truth_reads: inputs.data.truth_reads(),
        })
    });
    for r in trained {
        rows.push(r?);
    }

    let mut csv = String::from("variant,psnr_db,ssim\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.variant, r.psnr_db, r.ssim));
    }
    write_text(&layout.ablate().join("ablation.csv"), &csv)?;
    write_manifest(cfg)?;
    Ok(rows)
}

/// Reconstructs a single measurement file into a cube file.
pub fn cmd_refine(
    cfg: &ExperimentConfig,
    measurement: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<SpectralCube> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let model_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.final_model());
    let model = load_model_expect(&model_path, &cfg.refiner)?;
    let op = cfg.operator()?;
    let y = load_measurement(measurement)?;
    let problem = Problem::new(&op, &cfg.predictor, &cfg.group, cfg.train.variant);
    let cond = problem.condition(&y)?;
    let x: Cube<f32> = refine_from(&model, &cond, cfg.train.variant, cfg.train.eval_noise_policy)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_container(out, &x.clone().into())?;
    Ok(x)
}
