//! Refiner training: measurement-consistency and equivariance losses,
//! analytic parameter gradients, Adam, and inference.
//!
//! Per scene and step (self-supervised mode):
//!
//! ```text
//! x1 = x_init + f(z, x_init)                   L_MC = ||y - H x1||^2
//! x2 = T_g x1
//! u  = predict(H x2)                            (constant w.r.t. the parameters)
//! x3 = u + f(z2, u)                             L_EC = ||x2 - x3||^2
//! L  = L_MC + alpha L_EC
//! ```
//!
//! Gradients do not flow through the frozen predictor `u`. The parameter
//! gradient therefore has two contributions: the first refiner call, through
//! both `x1` and `x2 = T_g x1`, and the second call's direct dependence.

mod adam;
mod state;

use serde::{Deserialize, Serialize};

use crate::datamodel::{max_abs, Cube, Measurement};
use crate::error::{Error, Result};
use crate::exec;
use crate::optics::ForwardOperator;
use crate::real::Real;
use crate::refiner::{noise_cube, RefinerModel, Trace};
use crate::rng::derive_seed;
use crate::solvers::{normalized_adjoint, InitialPredict};
use crate::transforms::{GroupElement, GroupSpec};

pub use adam::{adam_update, AdamParams};
pub use state::{load_checkpoint, read_loss_csv, save_checkpoint, write_loss_csv, CheckpointSidecar};

const TAG_Z: u64 = 0x2001;
const TAG_Z2: u64 = 0x2002;
const TAG_GROUP: u64 = 0x2003;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SelfSupervised,
    /// Measurement consistency only; `L_EC` is still evaluated and logged.
    NoEc,
    /// MSE against ground truth.
    Supervised,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::SelfSupervised => "self_supervised",
            Mode::NoEc => "no_ec",
            Mode::Supervised => "supervised",
        }
    }

    pub fn needs_ground_truth(&self) -> bool {
        *self == Mode::Supervised
    }
}

/// How the noise input is chosen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalNoisePolicy {
    /// The noise cube drawn from seed 0.
    FixedSeed,
    Zero,
    /// Mean over the noise cubes drawn from seeds `0..S`.
    AverageS(usize),
}

/// How the refiner output is combined with its conditioning input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `x = x_init + f(z, x_init)` with `x_init` from the frozen predictor.
    #[default]
    Residual,
    /// `x = f(z, c)` with `c` the normalized adjoint; no initial predictor.
    WithoutInitialPredictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    /// Scenes per step, taken round-robin from the dataset.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "defaults::mode")]
    pub mode: Mode,
    #[serde(default = "defaults::eval_noise_policy")]
    pub eval_noise_policy: EvalNoisePolicy,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub variant: Variant,
}

mod defaults {
    use super::{EvalNoisePolicy, Mode};
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn steps() -> usize {
        2000
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn batch() -> usize {
        1
    }
    pub fn mode() -> Mode {
        Mode::SelfSupervised
    }
    pub fn eval_noise_policy() -> EvalNoisePolicy {
        EvalNoisePolicy::FixedSeed
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha", format!("{} is not >= 0", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(
                "learning_rate",
                format!("{} is not > 0", self.learning_rate),
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} not in [0, 1)")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", format!("{} is not > 0", self.adam_eps)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be >= 1"));
        }
        if self.eval_noise_policy == EvalNoisePolicy::AverageS(0) {
            return Err(Error::invalid("eval_noise_policy", "average_s needs S >= 1"));
        }
        Ok(())
    }

    /// EC weight actually applied to the gradient.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::SelfSupervised => self.alpha,
            Mode::NoEc | Mode::Supervised => 0.0,
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One loss-history row; losses are batch means evaluated before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub l_mc: f64,
    pub l_ec: f64,
    pub l_total: f64,
}

/// The fixed pieces of a training problem.
pub struct Problem<'a, P> {
    pub op: &'a ForwardOperator,
    pub predictor: &'a P,
    pub group: &'a GroupSpec,
    pub variant: Variant,
}

impl<P> Clone for Problem<'_, P> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<P> Copy for Problem<'_, P> {}

impl<'a, P: InitialPredict> Problem<'a, P> {
    pub fn new(op: &'a ForwardOperator, predictor: &'a P, group: &'a GroupSpec, variant: Variant) -> Self {
        Problem {
            op,
            predictor,
            group,
            variant,
        }
    }

    /// The refiner's conditioning input for a measurement.
    pub fn condition<T: Real>(&self, y: &Measurement<T>) -> Result<Cube<T>> {
        match self.variant {
            Variant::Residual => self.predictor.predict(y, self.op),
            Variant::WithoutInitialPredictor => normalized_adjoint(y, self.op),
        }
    }
}

fn assemble<T: Real>(variant: Variant, cond: &Cube<T>, r: Cube<T>) -> Result<Cube<T>> {
    match variant {
        Variant::Residual => cond.add(&r),
        Variant::WithoutInitialPredictor => Ok(r),
    }
}

/// A training example: the measurement, the cached conditioning cube and,
/// only in supervised mode, the ground truth.
#[derive(Clone, Debug)]
pub struct TrainScene<T = f32> {
    pub y: Measurement<T>,
    pub cond: Cube<T>,
    pub truth: Option<Cube<T>>,
}

#[derive(Clone, Debug)]
pub struct TrainState<T = f32> {
    pub model: RefinerModel<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<LossRow>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: RefinerModel<T>) -> Self {
        let n = model.params().len();
        TrainState {
            model,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
            history: Vec::new(),
        }
    }
}

/// `x1 = predict(y) + f(z, predict(y))`.
pub fn dual_forward<T: Real, P: InitialPredict>(
    model: &RefinerModel<T>,
    y: &Measurement<T>,
    op: &ForwardOperator,
    predictor: &P,
    z: &Cube<T>,
) -> Result<Cube<T>> {
    let x_init = predictor.predict(y, op)?;
    let r = model.forward(z, &x_init)?;
    x_init.add(&r)
}

/// `(||y - H x1||^2, -2 H^T (y - H x1))`.
pub fn mc_loss<T: Real>(y: &Measurement<T>, op: &ForwardOperator, x1: &Cube<T>) -> Result<(f64, Cube<T>)> {
    let residual = y.sub(&op.forward(x1)?)?;
    let grad = op.adjoint(&residual)?.scale(T::of(-2.0));
    Ok((residual.norm_sq(), grad))
}

pub fn total_loss(mc: f64, ec: f64, alpha: f64) -> f64 {
    mc + alpha * ec
}

/// Mean squared error and its gradient `2 (x1 - x_true) / N`.
pub fn supervised_loss<T: Real>(x1: &Cube<T>, x_true: &Cube<T>) -> Result<(f64, Cube<T>)> {
    let diff = x1.sub(x_true)?;
    let n = diff.data().len() as f64;
    let value = diff.norm_sq() / n;
    Ok((value, diff.scale(T::of(2.0 / n))))
}

/// Forward quantities of the equivariance branch.
pub struct EcForward<T> {
    pub value: f64,
    pub x2: Cube<T>,
    pub x3: Cube<T>,
    trace2: Trace<T>,
}

fn ec_forward<T: Real, P: InitialPredict>(
    model: &RefinerModel<T>,
    problem: Problem<'_, P>,
    x1: &Cube<T>,
    g: &GroupElement,
    z2: &Cube<T>,
) -> Result<EcForward<T>> {
    let x2 = g.apply(x1)?;
    let y2 = problem.op.forward(&x2)?;
    let u = problem.condition(&y2)?;
    let (r2, trace2) = model.forward_traced(z2, &u)?;
    let x3 = assemble(problem.variant, &u, r2)?;
    let value = x2.sub(&x3)?.norm_sq();
    Ok(EcForward { value, x2, x3, trace2 })
}

/// Equivariance loss and its parameter gradient under the stop-gradient on
/// the frozen predictor. `trace1` must come from the refiner call that
/// produced `x1`.
///
/// Returns `(L_EC, dL_EC/dtheta, x2, x3)`.
pub fn ec_loss<T: Real, P: InitialPredict>(
    model: &RefinerModel<T>,
    problem: Problem<'_, P>,
    x1: &Cube<T>,
    trace1: &Trace<T>,
    g: &GroupElement,
    z2: &Cube<T>,
) -> Result<(f64, Vec<T>, Cube<T>, Cube<T>)> {
    let ec = ec_forward(model, problem, x1, g, z2)?;
    let diff = ec.x2.sub(&ec.x3)?;
    let two = T::of(2.0);
    let mut grad = model.backward(trace1, &g.inverse().apply(&diff)?.scale(two))?;
    let g2 = model.backward(&ec.trace2, &diff.scale(-two))?;
    for (a, b) in grad.iter_mut().zip(g2) {
        *a += b;
    }
    Ok((ec.value, grad, ec.x2, ec.x3))
}

/// Noise cubes and group element used for `(scene, step)`.
pub fn step_draws<T: Real>(
    group: &GroupSpec,
    shape: (usize, usize, usize),
    seed: u64,
    step: u64,
    scene: usize,
) -> Result<(Cube<T>, Cube<T>, GroupElement)> {
    let (h, w, b) = shape;
    let z = noise_cube(h, w, b, derive_seed(seed, &[TAG_Z, step, scene as u64]));
    let z2 = noise_cube(h, w, b, derive_seed(seed, &[TAG_Z2, step, scene as u64]));
    let g = group.sample(h, w, derive_seed(seed, &[TAG_GROUP, scene as u64]), step)?;
    Ok((z, z2, g))
}

/// Losses and parameter gradient for one scene at one step.
pub fn scene_gradient<T: Real, P: InitialPredict>(
    model: &RefinerModel<T>,
    problem: Problem<'_, P>,
    scene: &TrainScene<T>,
    scene_index: usize,
    step: u64,
    config: &TrainConfig,
) -> Result<(LossRow, Vec<T>)> {
    let (z, z2, g) = step_draws::<T>(problem.group, scene.cond.shape(), config.rng_seed, step, scene_index)?;
    let (r1, trace1) = model.forward_traced(&z, &scene.cond)?;
    let x1 = assemble(problem.variant, &scene.cond, r1)?;
    let (l_mc, g_mc) = mc_loss(&scene.y, problem.op, &x1)?;

    if config.mode == Mode::Supervised {
        let truth = scene
            .truth
            .as_ref()
            .ok_or_else(|| Error::invalid("truth", "supervised mode needs ground-truth cubes"))?;
        let (l, g_sup) = supervised_loss(&x1, truth)?;
        let grad = model.backward(&trace1, &g_sup)?;
        let row = LossRow {
            step,
            l_mc,
            l_ec: 0.0,
            l_total: l,
        };
        return Ok((row, grad));
    }

    let alpha = config.effective_alpha();
    let ec = ec_forward(model, problem, &x1, &g, &z2)?;
    let mut up1 = g_mc;
    let grad = if alpha > 0.0 {
        let diff = ec.x2.sub(&ec.x3)?;
        let pulled = g.inverse().apply(&diff)?;
        let a2 = T::of(2.0 * alpha);
        for (u, &p) in up1.data_mut().iter_mut().zip(pulled.data()) {
            *u += a2 * p;
        }
        let mut grad = model.backward(&trace1, &up1)?;
        let g2 = model.backward(&ec.trace2, &diff.scale(-a2))?;
        for (a, b) in grad.iter_mut().zip(g2) {
            *a += b;
        }
        grad
    } else {
        model.backward(&trace1, &up1)?
    };
    let row = LossRow {
        step,
        l_mc,
        l_ec: ec.value,
        l_total: total_loss(l_mc, ec.value, alpha),
    };
    Ok((row, grad))
}

fn non_finite(context: &'static str, step: u64, values: &[f64]) -> Error {
    Error::NonFinite {
        context,
        iteration: step as usize,
        max_abs: max_abs(values),
    }
}

/// One optimization step over a round-robin batch of scenes.
pub fn train_step<T: Real, P: InitialPredict>(
    state: &mut TrainState<T>,
    scenes: &[TrainScene<T>],
    problem: Problem<'_, P>,
    config: &TrainConfig,
) -> Result<LossRow> {
    if scenes.is_empty() {
        return Err(Error::invalid("scenes", "empty training set"));
    }
    let step = state.step;
    let indices: Vec<usize> = (0..config.batch)
        .map(|k| ((step as usize).wrapping_mul(config.batch) + k) % scenes.len())
        .collect();
    let model = &state.model;
    let results = exec::map(&indices, |&i| {
        scene_gradient(model, problem, &scenes[i], i, step, config)
    });

    let inv = 1.0 / config.batch as f64;
    let mut grad = vec![T::zero(); model.params().len()];
    let (mut l_mc, mut l_ec, mut l_total) = (0.0, 0.0, 0.0);
    for r in results {
        let (row, g) = r?;
        l_mc += row.l_mc;
        l_ec += row.l_ec;
        l_total += row.l_total;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let row = LossRow {
        step,
        l_mc: l_mc * inv,
        l_ec: l_ec * inv,
        l_total: l_total * inv,
    };
    if ![row.l_mc, row.l_ec, row.l_total].iter().all(|v| v.is_finite()) {
        return Err(non_finite("training loss", step, &[row.l_mc, row.l_ec, row.l_total]));
    }
    let scale = T::of(inv);
    grad.iter_mut().for_each(|g| *g *= scale);
    if !grad.iter().all(|g| g.is_finite()) {
        let g64: Vec<f64> = grad.iter().map(|g| g.to_f64_lossy()).collect();
        return Err(non_finite("parameter gradient", step, &g64));
    }

    adam_update(
        state.model.params_mut(),
        &grad,
        &mut state.adam_m,
        &mut state.adam_v,
        step + 1,
        &config.adam(),
    );
    state.step += 1;
    state.history.push(row);
    Ok(row)
}

/// Runs [`train_step`] until `config.steps` steps are complete, calling
/// `after_step` after each one.
pub fn train<T: Real, P: InitialPredict>(
    state: &mut TrainState<T>,
    scenes: &[TrainScene<T>],
    problem: Problem<'_, P>,
    config: &TrainConfig,
    mut after_step: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    while (state.step as usize) < config.steps {
        train_step(state, scenes, problem, config)?;
        after_step(state)?;
    }
    Ok(())
}

fn refine_samples<T: Real>(model: &RefinerModel<T>, cond: &Cube<T>, seeds: &[u64]) -> Result<Vec<Cube<T>>> {
    let (h, w, b) = cond.shape();
    exec::map(seeds, |&s| model.forward(&noise_cube(h, w, b, s), cond))
        .into_iter()
        .collect()
}

/// Refined estimate from a conditioning cube, clipped to `[0, 1]`.
pub fn refine_from<T: Real>(
    model: &RefinerModel<T>,
    cond: &Cube<T>,
    variant: Variant,
    policy: EvalNoisePolicy,
) -> Result<Cube<T>> {
    let (h, w, b) = cond.shape();
    let r = match policy {
        EvalNoisePolicy::Zero => model.forward(&Cube::zeros(h, w, b), cond)?,
        EvalNoisePolicy::FixedSeed => model.forward(&noise_cube(h, w, b, 0), cond)?,
        EvalNoisePolicy::AverageS(s) => {
            if s == 0 {
                return Err(Error::invalid("eval_noise_policy", "average_s needs S >= 1"));
            }
            let seeds: Vec<u64> = (0..s as u64).collect();
            let samples = refine_samples(model, cond, &seeds)?;
            let mut acc = vec![0.0f64; cond.data().len()];
            for r in &samples {
                for (a, &v) in acc.iter_mut().zip(r.data()) {
                    *a += v.to_f64_lossy();
                }
            }
            Cube::from_vec(h, w, b, acc.into_iter().map(|a| T::of(a / s as f64)).collect())?
        }
    };
    Ok(assemble(variant, cond, r)?.clip_unit())
}

/// `clip(x_init + f(z, x_init))` for a single measurement.
pub fn refine<T: Real, P: InitialPredict>(
    model: &RefinerModel<T>,
    y: &Measurement<T>,
    problem: Problem<'_, P>,
    policy: EvalNoisePolicy,
) -> Result<Cube<T>> {
    let cond = problem.condition(y)?;
    refine_from(model, &cond, problem.variant, policy)
}
