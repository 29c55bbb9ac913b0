//! Staged stochastic-gradient training.
//!
//! Each iteration seeds its own generator from `(seed, global iteration)`, so
//! a run interrupted after `k` iterations and resumed from its state replays
//! exactly the same minibatches and noise as an uninterrupted one.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{elbo_estimate_grad, Layout, ParamVector};
use crate::model::{CalibrationDataset, CalibrationModel, NoiseParams};
use crate::rff::KernelParams;
use crate::svi::{EpsBank, GaussianFactor, Priors, VariationalPosterior};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive non-finite iterations tolerated before giving up.
pub const MAX_NON_FINITE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub trainable: Vec<String>,
    pub learning_rate: f64,
    pub iterations: usize,
    pub minibatch_field: usize,
    pub minibatch_sim: usize,
    pub n_mc: usize,
}

impl StageSpec {
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                field: format!("stage {}: learning_rate", self.name),
                message: format!("must be positive and finite, got {}", self.learning_rate),
            });
        }
        if self.n_mc == 0 {
            return Err(Error::Config {
                field: format!("stage {}: n_mc", self.name),
                message: "must be at least 1".into(),
            });
        }
        layout.mask(self.trainable.iter().map(String::as_str))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub stage: String,
    pub elbo: f64,
    pub kl: f64,
    pub wall_ms: u64,
}

impl TraceRecord {
    /// Equality ignoring the wall-clock column.
    pub fn same_run(&self, other: &TraceRecord) -> bool {
        self.iteration == other.iteration
            && self.stage == other.stage
            && self.elbo.to_bits() == other.elbo.to_bits()
            && self.kl.to_bits() == other.kl.to_bits()
    }
}

/// Whether two traces agree on everything except wall time.
pub fn traces_match(a: &[TraceRecord], b: &[TraceRecord]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_run(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamVector,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Index of the stage in progress within the schedule.
    pub stage: usize,
    /// Iterations already done in that stage.
    pub stage_step: usize,
    /// Iterations done over the whole run; selects the RNG stream.
    pub iteration: u64,
    pub seed: u64,
    pub trace: Vec<TraceRecord>,
}

impl TrainState {
    pub fn new(params: ParamVector, seed: u64) -> Self {
        let n = params.values.len();
        TrainState {
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            stage: 0,
            stage_step: 0,
            iteration: 0,
            seed,
            trace: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.params.values.len();
        Error::check_len("parameter layout", self.params.layout.len(), n)?;
        Error::check_len("first moments", n, self.adam_m.len())?;
        Error::check_len("second moments", n, self.adam_v.len())
    }

    pub fn is_finished(&self, schedule: &[StageSpec]) -> bool {
        self.stage >= schedule.len()
    }
}

/// One stochastic evaluation handed to the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Anything the trainer can climb. Implementations draw their own
/// minibatches and noise from `rng`.
pub trait Objective {
    fn layout(&self) -> Layout;

    fn check_stage(&self, _stage: &StageSpec) -> Result<()> {
        Ok(())
    }

    fn evaluate(&self, params: &ParamVector, stage: &StageSpec, rng: &mut ChaCha8Rng) -> Result<Evaluation>;
}

/// The minibatch ELBO of a calibration model.
pub struct ElboObjective<'a> {
    pub model: &'a CalibrationModel,
    pub dataset: &'a CalibrationDataset,
    pub priors: &'a Priors,
}

fn draw_indices(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<usize> {
    if m == len {
        (0..len).collect()
    } else {
        sample(rng, len, m).into_vec()
    }
}

impl Objective for ElboObjective<'_> {
    fn layout(&self) -> Layout {
        Layout::for_model(self.model)
    }

    fn check_stage(&self, stage: &StageSpec) -> Result<()> {
        let bounds = [
            ("minibatch_field", stage.minibatch_field, self.dataset.n_field()),
            ("minibatch_sim", stage.minibatch_sim, self.dataset.n_sim()),
        ];
        for (field, m, len) in bounds {
            if m == 0 || m > len {
                return Err(Error::Config {
                    field: format!("stage {}: {field}", stage.name),
                    message: format!("must lie in 1..={len}, got {m}"),
                });
            }
        }
        Ok(())
    }

    fn evaluate(&self, params: &ParamVector, stage: &StageSpec, rng: &mut ChaCha8Rng) -> Result<Evaluation> {
        let field_idx = draw_indices(rng, self.dataset.n_field(), stage.minibatch_field);
        let sim_idx = draw_indices(rng, self.dataset.n_sim(), stage.minibatch_sim);
        let (_, posterior) = params.unpack(self.model)?;
        let eps = EpsBank::draw(&posterior, stage.n_mc, rng);
        let (est, g) = elbo_estimate_grad(
            self.model,
            self.dataset,
            params,
            self.priors,
            stage.n_mc,
            &field_idx,
            &sim_idx,
            &eps,
        )?;
        Ok(Evaluation {
            value: est.value,
            kl: est.kl,
            grad: g.grad,
        })
    }
}

/// Knobs for [`default_schedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    pub learning_rate: f64,
    /// Ratio between the first and second phase of each stage.
    pub phase_ratio: f64,
    pub iterations: usize,
    pub minibatch_field: Option<usize>,
    pub minibatch_sim: Option<usize>,
    pub n_mc: usize,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            learning_rate: 1e-2,
            phase_ratio: 10.0,
            iterations: 2000,
            minibatch_field: None,
            minibatch_sim: None,
            n_mc: 1,
        }
    }
}

pub fn default_schedule(model: &CalibrationModel, n_field: usize, n_sim: usize) -> Vec<StageSpec> {
    schedule_with(model, n_field, n_sim, &ScheduleOptions::default())
}

/// Four phases: emulator weights, then the emulator with its kernel and
/// `sigma_z`, then all weights with `theta`, then everything.
pub fn schedule_with(model: &CalibrationModel, n_field: usize, n_sim: usize, opts: &ScheduleOptions) -> Vec<StageSpec> {
    let names = model.layer_names();
    let (eta, disc) = names.split_at(model.n_emulator_layers());
    let factors = |layers: &[String]| -> Vec<String> {
        layers
            .iter()
            .flat_map(|n| [format!("{n}.w.mean"), format!("{n}.w.log_std")])
            .collect()
    };
    let kernels = |layers: &[String]| -> Vec<String> {
        layers
            .iter()
            .flat_map(|n| [format!("{n}.log_sigma"), format!("{n}.log_precision")])
            .collect()
    };
    let theta = vec!["theta.mean".to_string(), "theta.log_std".to_string()];

    let s1a = factors(eta);
    let mut s1b = s1a.clone();
    s1b.push("noise.log_sigma_z".into());
    s1b.extend(kernels(eta));
    let mut s2a = factors(&names);
    s2a.extend(theta.iter().cloned());
    let mut s2b = s2a.clone();
    s2b.extend(kernels(eta));
    s2b.extend(kernels(disc));
    s2b.push("noise.log_sigma_y".into());
    s2b.push("noise.log_sigma_z".into());

    let mf = opts.minibatch_field.unwrap_or(n_field.min(256));
    let ms = opts.minibatch_sim.unwrap_or(n_sim.min(1024));
    let r = opts.learning_rate;
    [
        ("1a", s1a, r),
        ("1b", s1b, r / opts.phase_ratio),
        ("2a", s2a, r),
        ("2b", s2b, r / opts.phase_ratio),
    ]
    .into_iter()
    .map(|(name, trainable, lr)| StageSpec {
        name: name.into(),
        trainable,
        learning_rate: lr,
        iterations: opts.iterations,
        minibatch_field: mf,
        minibatch_sim: ms,
        n_mc: opts.n_mc,
    })
    .collect()
}

/// Starting values for priors and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialValues {
    pub theta_mean: Vec<f64>,
    pub theta_var: Vec<f64>,
    pub sigma_y: f64,
    pub sigma_z: f64,
    /// Diagonal entry of every layer's precision matrix.
    pub precision: f64,
    pub sigma_eta: f64,
    pub sigma_delta: f64,
}

impl InitialValues {
    /// `E[theta] = 1/2`, `var = 1/4`, `sigma_y = 1e-2`, `sigma_z = 1e-3`,
    /// `A = 20 I`, `sigma_eta = 1`, `sigma_delta = 0.1`.
    pub fn appendix_default(d2: usize) -> Self {
        InitialValues {
            theta_mean: vec![0.5; d2],
            theta_var: vec![0.25; d2],
            sigma_y: 1e-2,
            sigma_z: 1e-3,
            precision: 20.0,
            sigma_eta: 1.0,
            sigma_delta: 0.1,
        }
    }

    pub fn theta_prior(&self) -> Result<GaussianFactor> {
        if self.theta_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config {
                field: "prior.theta_var".into(),
                message: "variances must be positive and finite".into(),
            });
        }
        let std: Vec<f64> = self.theta_var.iter().map(|v| v.sqrt()).collect();
        GaussianFactor::from_mean_std(self.theta_mean.clone(), &std)
    }

    pub fn noise(&self) -> NoiseParams {
        NoiseParams {
            sigma_y: self.sigma_y,
            sigma_z: self.sigma_z,
        }
    }

    pub fn emulator_kernel(&self, dim: usize) -> Result<KernelParams> {
        KernelParams::isotropic(self.sigma_eta, self.precision, dim)
    }

    pub fn discrepancy_kernel(&self, dim: usize) -> Result<KernelParams> {
        KernelParams::isotropic(self.sigma_delta, self.precision, dim)
    }
}

/// Variational factors equal to the priors; hyperparameters as held by `model`.
pub fn init_from_priors(model: &CalibrationModel, priors: &Priors) -> Result<ParamVector> {
    Error::check_len("theta prior", model.d2(), priors.theta.len())?;
    let shapes = model.weight_shapes();
    if priors.weights.len() != shapes.len() {
        return Err(Error::Config {
            field: "prior.weights".into(),
            message: format!("expected {} weight priors, found {}", shapes.len(), priors.weights.len()),
        });
    }
    ParamVector::pack(model, &priors.as_posterior())
}

fn adam_step(state: &mut TrainState, grad: &[f64], mask: &[bool], lr: f64, t: usize) {
    let t = t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..grad.len() {
        if !mask[i] {
            continue;
        }
        let g = grad[i];
        let m = &mut state.adam_m[i];
        let v = &mut state.adam_v[i];
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        state.params.values[i] += lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Runs the rest of `spec` from `state.stage_step`. Moments restart at the
/// first step of a stage. `hook` sees the state after every iteration.
pub fn run_stage_with<O, H>(state: &mut TrainState, spec: &StageSpec, objective: &O, hook: &mut H) -> Result<()>
where
    O: Objective + ?Sized,
    H: FnMut(&TrainState) -> Result<()>,
{
    state.validate()?;
    let layout = objective.layout();
    if layout != state.params.layout {
        return Err(Error::Validation("parameter layout does not match the objective".into()));
    }
    spec.validate(&layout)?;
    objective.check_stage(spec)?;
    let mask = layout.mask(spec.trainable.iter().map(String::as_str))?;
    if state.stage_step == 0 {
        state.adam_m.fill(0.0);
        state.adam_v.fill(0.0);
    }
    let started = Instant::now();
    let mut bad = 0;
    while state.stage_step < spec.iterations {
        let mut rng = iteration_rng(state.seed, state.iteration);
        let outcome = objective.evaluate(&state.params, spec, &mut rng);
        state.stage_step += 1;
        state.iteration += 1;
        match outcome {
            Ok(ev) if ev.value.is_finite() && ev.grad.iter().all(|g| g.is_finite()) => {
                bad = 0;
                adam_step(state, &ev.grad, &mask, spec.learning_rate, state.stage_step);
                state.trace.push(TraceRecord {
                    iteration: state.iteration,
                    stage: spec.name.clone(),
                    elbo: ev.value,
                    kl: ev.kl,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
            }
            Ok(_) | Err(Error::NonFinite { .. }) => {
                bad += 1;
                if bad >= MAX_NON_FINITE {
                    return Err(Error::Divergence {
                        iterations: bad,
                        trace: state.trace.clone(),
                    });
                }
            }
            Err(e) => return Err(e),
        }
        hook(state)?;
    }
    Ok(())
}

pub fn run_stage<O: Objective + ?Sized>(state: &mut TrainState, spec: &StageSpec, objective: &O) -> Result<()> {
    run_stage_with(state, spec, objective, &mut |_| Ok(()))
}

/// Continues `state` through the remaining stages of `schedule`.
pub fn run_schedule<O, H>(state: &mut TrainState, schedule: &[StageSpec], objective: &O, hook: &mut H) -> Result<()>
where
    O: Objective + ?Sized,
    H: FnMut(&TrainState) -> Result<()>,
{
    while let Some(spec) = schedule.get(state.stage) {
        run_stage_with(state, spec, objective, hook)?;
        state.stage += 1;
        state.stage_step = 0;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub posterior: VariationalPosterior,
    /// Copy of the input model carrying the optimized hyperparameters.
    pub model: CalibrationModel,
    pub trace: Vec<TraceRecord>,
    pub state: TrainState,
}

impl Calibration {
    pub fn from_state(model: &CalibrationModel, state: TrainState) -> Result<Self> {
        let (model, posterior) = state.params.unpack(model)?;
        Ok(Calibration {
            posterior,
            model,
            trace: state.trace.clone(),
            state,
        })
    }
}

/// Initializes from the priors and runs every stage.
pub fn calibrate(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    priors: &Priors,
    schedule: &[StageSpec],
    seed: u64,
) -> Result<Calibration> {
    let state = TrainState::new(init_from_priors(model, priors)?, seed);
    resume(model, dataset, priors, schedule, state, &mut |_| Ok(()))
}

/// Continues a saved state; `hook` runs after every iteration.
pub fn resume<H>(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    priors: &Priors,
    schedule: &[StageSpec],
    mut state: TrainState,
    hook: &mut H,
) -> Result<Calibration>
where
    H: FnMut(&TrainState) -> Result<()>,
{
    dataset.validate()?;
    let objective = ElboObjective { model, dataset, priors };
    run_schedule(&mut state, schedule, &objective, hook)?;
    Calibration::from_state(model, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        peak: f64,
    }

    impl Objective for Quadratic {
        fn layout(&self) -> Layout {
            Layout::from_blocks([("x", 1), ("frozen", 1)]).unwrap()
        }

        fn evaluate(&self, p: &ParamVector, _: &StageSpec, _: &mut ChaCha8Rng) -> Result<Evaluation> {
            let x = p.values[0];
            Ok(Evaluation {
                value: -(x - self.peak).powi(2),
                kl: 0.0,
                grad: vec![-2.0 * (x - self.peak), 1.0],
            })
        }
    }

    fn spec(iterations: usize) -> StageSpec {
        StageSpec {
            name: "q".into(),
            trainable: vec!["x".into()],
            learning_rate: 1e-2,
            iterations,
            minibatch_field: 1,
            minibatch_sim: 1,
            n_mc: 1,
        }
    }

    fn start(obj: &Quadratic) -> TrainState {
        let layout = obj.layout();
        TrainState::new(ParamVector { values: vec![0.0, 0.25], layout }, 1)
    }

    #[test]
    fn adam_climbs_quadratic() {
        let obj = Quadratic { peak: 1.3 };
        let mut st = start(&obj);
        run_stage(&mut st, &spec(2000), &obj).unwrap();
        assert!((st.params.values[0] - 1.3).abs() < 1e-3, "{}", st.params.values[0]);
        assert_eq!(st.params.values[1].to_bits(), 0.25f64.to_bits());
        assert_eq!(st.trace.len(), 2000);
    }

    #[test]
    fn zero_iterations_is_noop() {
        let obj = Quadratic { peak: 1.0 };
        let mut st = start(&obj);
        let before = st.clone();
        run_stage(&mut st, &spec(0), &obj).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn unknown_block_rejected() {
        let obj = Quadratic { peak: 1.0 };
        let mut st = start(&obj);
        let mut s = spec(1);
        s.trainable = vec!["nope".into()];
        assert!(matches!(run_stage(&mut st, &s, &obj), Err(Error::Config { .. })));
    }

    struct Broken;

    impl Objective for Broken {
        fn layout(&self) -> Layout {
            Layout::from_blocks([("x", 1)]).unwrap()
        }

        fn evaluate(&self, _: &ParamVector, _: &StageSpec, _: &mut ChaCha8Rng) -> Result<Evaluation> {
            Ok(Evaluation {
                value: f64::NAN,
                kl: 0.0,
                grad: vec![0.0],
            })
        }
    }

    #[test]
    fn divergence_after_ten_bad_steps() {
        let layout = Broken.layout();
        let mut st = TrainState::new(ParamVector { values: vec![0.0], layout }, 0);
        match run_stage(&mut st, &spec(50), &Broken) {
            Err(Error::Divergence { iterations, .. }) => assert_eq!(iterations, MAX_NON_FINITE),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.iteration, MAX_NON_FINITE as u64);
    }
}
