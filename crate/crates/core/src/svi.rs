//! Mean-field Gaussian posterior, reparameterized Monte Carlo ELBO with
//! unbiased minibatching, and the analytic Gaussian KL term.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CalibrationDataset, CalibrationModel};
use crate::objective::{sample_loglik, SampleGrads};

/// Diagonal Gaussian parameterized by mean and log standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFactor {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianFactor {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        Error::check_len("gaussian factor log_std", mean.len(), log_std.len())?;
        Ok(GaussianFactor { mean, log_std })
    }

    pub fn standard(len: usize) -> Self {
        GaussianFactor {
            mean: vec![0.0; len],
            log_std: vec![0.0; len],
        }
    }

    pub fn from_mean_std(mean: Vec<f64>, std: &[f64]) -> Result<Self> {
        if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Validation(format!("standard deviation must be positive, got {s}")));
        }
        Self::new(mean, std.iter().map(|s| s.ln()).collect())
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

/// `mean + exp(log_std) * eps`.
pub fn reparam_sample(factor: &GaussianFactor, eps: &[f64]) -> Result<Vec<f64>> {
    Error::check_len("reparameterization noise", factor.len(), eps.len())?;
    Ok(reparam_unchecked(factor, eps))
}

fn reparam_unchecked(factor: &GaussianFactor, eps: &[f64]) -> Vec<f64> {
    factor
        .mean
        .iter()
        .zip(&factor.log_std)
        .zip(eps)
        .map(|((m, l), e)| m + l.exp() * e)
        .collect()
}

/// `KL(q || p)` summed over independent coordinates.
pub fn kl_gaussian(q: &GaussianFactor, p: &GaussianFactor) -> Result<f64> {
    Error::check_len("kl prior length", q.len(), p.len())?;
    Ok(kl_terms(q, p).map(|(kl, _, _)| kl).sum())
}

/// Per-coordinate `(kl, d kl / d mean_q, d kl / d log_std_q)`.
pub(crate) fn kl_terms<'a>(
    q: &'a GaussianFactor,
    p: &'a GaussianFactor,
) -> impl Iterator<Item = (f64, f64, f64)> + 'a {
    q.mean
        .iter()
        .zip(&q.log_std)
        .zip(p.mean.iter().zip(&p.log_std))
        .map(|((mq, lq), (mp, lp))| {
            let ratio = (lq - lp).exp();
            let inv_var_p = (-2.0 * lp).exp();
            let diff = mq - mp;
            let kl = 0.5 * (ratio * ratio + diff * diff * inv_var_p - 1.0 - 2.0 * (lq - lp));
            (kl, diff * inv_var_p, ratio * ratio - 1.0)
        })
}

/// `q(theta) * prod_l q(W_l)`, weight factors flattened column-major in
/// [`CalibrationModel::layers`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub theta: GaussianFactor,
    pub weights: Vec<GaussianFactor>,
}

impl VariationalPosterior {
    pub fn validate(&self, model: &CalibrationModel) -> Result<()> {
        Error::check_len("theta factor", model.d2(), self.theta.len())?;
        Error::check_len("theta factor log_std", self.theta.len(), self.theta.log_std.len())?;
        let shapes = model.weight_shapes();
        Error::check_len("weight factors", shapes.len(), self.weights.len())?;
        for ((r, c), f) in shapes.iter().zip(&self.weights) {
            Error::check_len("weight factor", r * c, f.len())?;
            Error::check_len("weight factor log_std", f.len(), f.log_std.len())?;
        }
        Ok(())
    }

    pub fn weight_means(&self, model: &CalibrationModel) -> Vec<DMatrix<f64>> {
        model
            .weight_shapes()
            .iter()
            .zip(&self.weights)
            .map(|((r, c), f)| DMatrix::from_column_slice(*r, *c, &f.mean))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        2 * (self.theta.len() + self.weights.iter().map(GaussianFactor::len).sum::<usize>())
    }
}

/// Prior over `theta` and over every weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub theta: GaussianFactor,
    pub weights: Vec<GaussianFactor>,
}

impl Priors {
    /// Gaussian prior on `theta`, standard normal on every weight.
    pub fn new(model: &CalibrationModel, theta: GaussianFactor) -> Result<Self> {
        Error::check_len("theta prior", model.d2(), theta.len())?;
        let weights = model
            .weight_shapes()
            .iter()
            .map(|(r, c)| GaussianFactor::standard(r * c))
            .collect();
        Ok(Priors { theta, weights })
    }

    pub fn as_posterior(&self) -> VariationalPosterior {
        VariationalPosterior {
            theta: self.theta.clone(),
            weights: self.weights.clone(),
        }
    }
}

/// Standard-normal noise for one reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub theta: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

/// `n_mc` noise draws supplied to [`elbo`] from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsBank {
    pub draws: Vec<NoiseDraw>,
}

impl EpsBank {
    pub fn draw<R: Rng + ?Sized>(posterior: &VariationalPosterior, n_mc: usize, rng: &mut R) -> Self {
        let draws = (0..n_mc)
            .map(|_| NoiseDraw {
                theta: (0..posterior.theta.len()).map(|_| rng.sample(StandardNormal)).collect(),
                weights: posterior
                    .weights
                    .iter()
                    .map(|f| (0..f.len()).map(|_| rng.sample(StandardNormal)).collect())
                    .collect(),
            })
            .collect();
        EpsBank { draws }
    }

    pub fn zeros(posterior: &VariationalPosterior, n_mc: usize) -> Self {
        let draw = NoiseDraw {
            theta: vec![0.0; posterior.theta.len()],
            weights: posterior.weights.iter().map(|f| vec![0.0; f.len()]).collect(),
        };
        EpsBank {
            draws: vec![draw; n_mc],
        }
    }

    pub fn n_mc(&self) -> usize {
        self.draws.len()
    }

    fn validate(&self, posterior: &VariationalPosterior) -> Result<()> {
        for d in &self.draws {
            Error::check_len("theta noise", posterior.theta.len(), d.theta.len())?;
            Error::check_len("weight noise factors", posterior.weights.len(), d.weights.len())?;
            for (f, e) in posterior.weights.iter().zip(&d.weights) {
                Error::check_len("weight noise", f.len(), e.len())?;
            }
        }
        Ok(())
    }
}

/// One joint draw of `theta` and all weight matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSample {
    pub theta: Vec<f64>,
    pub weights: Vec<DMatrix<f64>>,
}

impl ParameterSample {
    pub fn from_noise(model: &CalibrationModel, posterior: &VariationalPosterior, noise: &NoiseDraw) -> Result<Self> {
        posterior.validate(model)?;
        let theta = reparam_sample(&posterior.theta, &noise.theta)?;
        let weights = model
            .weight_shapes()
            .iter()
            .zip(&posterior.weights)
            .zip(&noise.weights)
            .map(|(((r, c), f), e)| Ok(DMatrix::from_column_slice(*r, *c, &reparam_sample(f, e)?)))
            .collect::<Result<_>>()?;
        Ok(ParameterSample { theta, weights })
    }

    pub fn emulator_weights<'a>(&'a self, model: &CalibrationModel) -> &'a [DMatrix<f64>] {
        &self.weights[..model.n_emulator_layers()]
    }

    pub fn discrepancy_weights(&self, model: &CalibrationModel) -> Option<&DMatrix<f64>> {
        self.weights.get(model.n_emulator_layers())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub expected_loglik: f64,
    pub kl: f64,
    pub n_mc: usize,
    pub minibatch_size: usize,
}

pub(crate) fn check_indices(what: &'static str, idx: &[usize], len: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Validation(format!("{what} minibatch is empty")));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
        return Err(Error::Index { what, index: bad, len });
    }
    Ok(())
}

/// Unbiased minibatch estimate of the full-data log-likelihood of one
/// parameter sample; the exact full sum when both index sets are complete.
pub fn minibatch_loglik(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    sample: &ParameterSample,
    field_idx: &[usize],
    sim_idx: &[usize],
) -> Result<f64> {
    check_model_data(model, dataset)?;
    check_indices("field", field_idx, dataset.n_field())?;
    check_indices("simulator", sim_idx, dataset.n_sim())?;
    Error::check_len("theta sample", model.d2(), sample.theta.len())?;
    let shapes = model.weight_shapes();
    Error::check_len("weight samples", shapes.len(), sample.weights.len())?;
    for ((r, c), w) in shapes.iter().zip(&sample.weights) {
        Error::check_len("weight sample", r * c, w.len())?;
    }
    let weights: Vec<Vec<f64>> = sample.weights.iter().map(|w| w.as_slice().to_vec()).collect();
    let (v, _) = sample_loglik(model, dataset, &sample.theta, &weights, field_idx, sim_idx, false);
    Ok(v)
}

pub(crate) fn check_model_data(model: &CalibrationModel, data: &CalibrationDataset) -> Result<()> {
    data.validate()?;
    Error::check_len("dataset d1", model.d1(), data.d1())?;
    Error::check_len("dataset d2", model.d2(), data.d2())?;
    Error::check_len("dataset d_out", model.d_out(), data.d_out())
}

/// Gradient of the ELBO with respect to posterior and model parameters.
#[derive(Clone, Debug)]
pub(crate) struct ElboGrads {
    pub theta: GaussianFactor,
    pub weights: Vec<GaussianFactor>,
    pub sample: SampleGrads,
}

/// Shared by [`elbo`] and the gradient engine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn elbo_impl(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    posterior: &VariationalPosterior,
    priors: &Priors,
    field_idx: &[usize],
    sim_idx: &[usize],
    eps: &EpsBank,
    want_grad: bool,
) -> Result<(ElboEstimate, Option<ElboGrads>)> {
    check_model_data(model, dataset)?;
    posterior.validate(model)?;
    priors.as_posterior().validate(model)?;
    if eps.n_mc() == 0 {
        return Err(Error::Validation("n_mc must be at least 1".into()));
    }
    eps.validate(posterior)?;
    check_indices("field", field_idx, dataset.n_field())?;
    check_indices("simulator", sim_idx, dataset.n_sim())?;

    let n_mc = eps.n_mc();
    let inv_mc = 1.0 / n_mc as f64;
    let mut grads = want_grad.then(|| ElboGrads {
        theta: zeros_like(&posterior.theta),
        weights: posterior.weights.iter().map(zeros_like).collect(),
        sample: SampleGrads::zeros(model),
    });

    let mut loglik_sum = 0.0;
    for draw in &eps.draws {
        let theta = reparam_unchecked(&posterior.theta, &draw.theta);
        let weights: Vec<Vec<f64>> = posterior
            .weights
            .iter()
            .zip(&draw.weights)
            .map(|(f, e)| reparam_unchecked(f, e))
            .collect();
        let (ll, sg) = sample_loglik(model, dataset, &theta, &weights, field_idx, sim_idx, want_grad);
        loglik_sum += ll;
        if let (Some(acc), Some(sg)) = (grads.as_mut(), sg) {
            push_reparam(&mut acc.theta, &posterior.theta, &draw.theta, &sg.theta, inv_mc);
            for (((a, f), e), g) in acc
                .weights
                .iter_mut()
                .zip(&posterior.weights)
                .zip(&draw.weights)
                .zip(&sg.layers)
            {
                push_reparam(a, f, e, &g.w, inv_mc);
            }
            let hyper = &mut acc.sample;
            for (a, g) in hyper.layers.iter_mut().zip(&sg.layers) {
                a.log_sigma += g.log_sigma * inv_mc;
                for (x, y) in a.log_precision.iter_mut().zip(&g.log_precision) {
                    *x += y * inv_mc;
                }
            }
            hyper.log_sigma_y += sg.log_sigma_y * inv_mc;
            hyper.log_sigma_z += sg.log_sigma_z * inv_mc;
        }
    }
    let expected_loglik = loglik_sum / n_mc as f64;

    let mut kl = 0.0;
    let factor_pairs = std::iter::once((&posterior.theta, &priors.theta))
        .chain(posterior.weights.iter().zip(&priors.weights));
    for (i, (q, p)) in factor_pairs.enumerate() {
        for (c, (term, d_mean, d_log_std)) in kl_terms(q, p).enumerate() {
            kl += term;
            if let Some(acc) = grads.as_mut() {
                let target = if i == 0 { &mut acc.theta } else { &mut acc.weights[i - 1] };
                target.mean[c] -= d_mean;
                target.log_std[c] -= d_log_std;
            }
        }
    }

    let estimate = ElboEstimate {
        value: expected_loglik - kl,
        expected_loglik,
        kl,
        n_mc,
        minibatch_size: field_idx.len() + sim_idx.len(),
    };
    Ok((estimate, grads))
}

fn zeros_like(f: &GaussianFactor) -> GaussianFactor {
    GaussianFactor::standard(f.len())
}

/// Chain rule through `x = mean + exp(log_std) * eps`.
fn push_reparam(acc: &mut GaussianFactor, q: &GaussianFactor, eps: &[f64], x_bar: &[f64], scale: f64) {
    for c in 0..q.len() {
        let g = x_bar[c] * scale;
        acc.mean[c] += g;
        acc.log_std[c] += g * q.log_std[c].exp() * eps[c];
    }
}

/// Reparameterized Monte Carlo ELBO. With a fixed `eps_bank` this is a
/// deterministic function of the posterior and model parameters.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    posterior: &VariationalPosterior,
    priors: &Priors,
    n_mc: usize,
    field_idx: &[usize],
    sim_idx: &[usize],
    eps_bank: &EpsBank,
) -> Result<ElboEstimate> {
    if n_mc == 0 {
        return Err(Error::Validation("n_mc must be at least 1".into()));
    }
    Error::check_len("eps bank draws", n_mc, eps_bank.n_mc())?;
    elbo_impl(model, dataset, posterior, priors, field_idx, sim_idx, eps_bank, false).map(|(e, _)| e)
}

/// `count x d2` matrix of reparameterized `theta` draws.
pub fn posterior_samples(posterior: &VariationalPosterior, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    let d2 = posterior.theta.len();
    let std = posterior.theta.std();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(count, d2);
    for r in 0..count {
        for c in 0..d2 {
            let e: f64 = rng.sample(StandardNormal);
            out[(r, c)] = posterior.theta.mean[c] + std[c] * e;
        }
    }
    Ok(out)
}

/// Joint draws of `theta` and every weight matrix.
pub fn parameter_samples(
    model: &CalibrationModel,
    posterior: &VariationalPosterior,
    count: usize,
    seed: u64,
) -> Result<Vec<ParameterSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EpsBank::draw(posterior, count, &mut rng)
        .draws
        .iter()
        .map(|d| ParameterSample::from_noise(model, posterior, d))
        .collect()
}
