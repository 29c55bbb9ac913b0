use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lhs_with;
use crate::error::{Error, Result};
use crate::model::{CalibrationDataset, CalibrationModel, DiscrepancyKind, ModelSpec, NoiseParams};
use crate::rff::{DeepEmulatorConfig, KernelParams};
use crate::svi::{GaussianFactor, Priors};

/// One-input, one-parameter toy calibration problem with GP-drawn simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Illustrative1DProblem {
    pub theta_mean: f64,
    pub theta_std: f64,
    pub sigma_eta: f64,
    pub a_eta: f64,
    pub sigma_delta: f64,
    pub a_delta: f64,
    pub n_sim: usize,
    pub n_field: usize,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for Illustrative1DProblem {
    fn default() -> Self {
        Illustrative1DProblem {
            theta_mean: 0.0,
            theta_std: 1.0,
            sigma_eta: 1.0,
            a_eta: 0.5,
            sigma_delta: 0.2,
            a_delta: 1.0 / 20.0,
            n_sim: 7,
            n_field: 4,
            x_range: (0.0, 1.0),
            t_range: (-2.5, 2.5),
            noise_std: 1e-3,
        }
    }
}

impl Illustrative1DProblem {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta_std", self.theta_std),
            ("sigma_eta", self.sigma_eta),
            ("a_eta", self.a_eta),
            ("a_delta", self.a_delta),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        for (field, v) in [("sigma_delta", self.sigma_delta), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: format!("must be non-negative, got {v}"),
                });
            }
        }
        if self.n_sim == 0 || self.n_field == 0 {
            return Err(Error::Config {
                field: "n".into(),
                message: "field and simulator sizes must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn theta_prior(&self) -> GaussianFactor {
        GaussianFactor {
            mean: vec![self.theta_mean],
            log_std: vec![self.theta_std.ln()],
        }
    }

    pub fn emulator_kernel(&self) -> Result<KernelParams> {
        KernelParams::isotropic(self.sigma_eta, self.a_eta, 2)
    }

    pub fn discrepancy_kernel(&self) -> Result<KernelParams> {
        KernelParams::isotropic(self.sigma_delta, self.a_delta, 1)
    }

    /// Shallow model carrying the generator's own kernels.
    pub fn model(&self, n_rf: usize, discrepancy: DiscrepancyKind, noise: NoiseParams, seed: u64) -> Result<CalibrationModel> {
        let discrepancy_kernel = match discrepancy {
            DiscrepancyKind::None => None,
            DiscrepancyKind::Additive => Some(self.discrepancy_kernel()?),
            // The warp reads (eta, x).
            DiscrepancyKind::General => Some(KernelParams::isotropic(self.sigma_delta, self.a_delta, 2)?),
        };
        ModelSpec {
            d1: 1,
            d2: 1,
            n_rf,
            emulator: DeepEmulatorConfig::shallow(1, self.emulator_kernel()?),
            discrepancy,
            discrepancy_kernel,
            noise,
            seed,
        }
        .build()
    }

    pub fn priors(&self, model: &CalibrationModel) -> Result<Priors> {
        Priors::new(model, self.theta_prior())
    }
}

/// Exact draw from a zero-mean GP at `points` (one row each).
fn gp_draw<R: Rng>(rng: &mut R, kernel: &KernelParams, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = points.len();
    let jitter = 1e-10 * kernel.sigma * kernel.sigma;
    let k = DMatrix::from_fn(n, n, |i, j| kernel.eval(&points[i], &points[j]) + if i == j { jitter } else { 0.0 });
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::Validation("GP covariance is not positive definite".into()))?;
    let e = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((chol.l() * e).iter().copied().collect())
}

/// Simulator response drawn from the emulator prior on an LHS design,
/// `theta_true` from its prior, and field data on a stratified grid in `x`.
pub fn make_illustrative_dataset(problem: &Illustrative1DProblem, seed: u64) -> Result<(CalibrationDataset, Vec<f64>)> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e: f64 = rng.sample(StandardNormal);
    let theta_true = problem.theta_mean + problem.theta_std * e;

    let (x0, x1) = problem.x_range;
    let (t0, t1) = problem.t_range;
    let n = problem.n_field;
    let xs: Vec<f64> = (0..n).map(|i| x0 + (x1 - x0) * (i as f64 + 0.5) / n as f64).collect();
    let design = lhs_with(&mut rng, problem.n_sim, 2);
    let sim_pts: Vec<Vec<f64>> = design
        .row_iter()
        .map(|r| vec![x0 + (x1 - x0) * r[0], t0 + (t1 - t0) * r[1]])
        .collect();

    let mut pts = sim_pts.clone();
    pts.extend(xs.iter().map(|&x| vec![x, theta_true]));
    let eta = gp_draw(&mut rng, &problem.emulator_kernel()?, &pts)?;
    let delta = if problem.sigma_delta > 0.0 {
        let field_pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        gp_draw(&mut rng, &problem.discrepancy_kernel()?, &field_pts)?
    } else {
        vec![0.0; n]
    };

    let n_sim = problem.n_sim;
    let x = DMatrix::from_column_slice(n, 1, &xs);
    let y = DMatrix::from_fn(n, 1, |i, _| {
        let e: f64 = rng.sample(StandardNormal);
        eta[n_sim + i] + delta[i] + problem.noise_std * e
    });
    let x_sim = DMatrix::from_fn(n_sim, 1, |i, _| sim_pts[i][0]);
    let t = DMatrix::from_fn(n_sim, 1, |i, _| sim_pts[i][1]);
    let z = DMatrix::from_column_slice(n_sim, 1, &eta[..n_sim]);
    Ok((CalibrationDataset::new(x, y, x_sim, t, z)?, vec![theta_true]))
}
