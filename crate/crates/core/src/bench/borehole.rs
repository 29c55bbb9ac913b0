use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lhs_with;
use crate::error::{Error, Result};
use crate::model::CalibrationDataset;

fn check_unit(name: &str, v: &[f64]) -> Result<()> {
    for (i, &a) in v.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain {
                name: format!("{name}_{}", i + 1),
                value: a,
                domain: "[0, 1]",
            });
        }
    }
    Ok(())
}

/// Physical borehole inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoreholeInputs {
    pub t_u: f64,
    pub h_u: f64,
    pub h_l: f64,
    pub l: f64,
    pub k_w: f64,
    pub r_w: f64,
    pub r: f64,
    pub t_l: f64,
}

impl BoreholeInputs {
    pub fn from_unit(x: &[f64], t: &[f64]) -> Result<Self> {
        Error::check_len("borehole x", 5, x.len())?;
        Error::check_len("borehole theta", 3, t.len())?;
        check_unit("x", x)?;
        check_unit("t", t)?;
        Ok(BoreholeInputs {
            t_u: x[0] * 52530.0 + 63070.0,
            h_u: x[1] * 120.0 + 990.0,
            h_l: x[2] * 120.0 + 700.0,
            l: x[3] * 560.0 + 1120.0,
            k_w: x[4] * 2190.0 + 9855.0,
            r_w: t[0] * 0.1 + 0.05,
            r: t[1] * 49900.0 + 100.0,
            t_l: t[2] * 52.9 + 63.1,
        })
    }

    /// Water flow through the borehole.
    pub fn flow(&self) -> f64 {
        let log_ratio = (self.r / self.r_w).ln();
        let denom = log_ratio
            * (1.0 + 2.0 * self.l * self.t_u / (log_ratio * self.r_w * self.r_w * self.k_w) + self.t_u / self.t_l);
        2.0 * std::f64::consts::PI * self.t_u * (self.h_u - self.h_l) / denom
    }
}

/// Borehole simulator on the unit cube: `x` in `[0,1]^5`, `t` in `[0,1]^3`.
pub fn borehole_eta(x: &[f64], t: &[f64]) -> Result<f64> {
    Ok(BoreholeInputs::from_unit(x, t)?.flow())
}

/// Discrepancy of the borehole benchmark; reads `x_1`, `x_2`.
pub fn borehole_delta(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::shape("borehole discrepancy input", 2, x.len()));
    }
    check_unit("x", &x[..2])?;
    let (a, b) = (x[0], x[1]);
    Ok(2.0 * (10.0 * a * a + 4.0 * b * b) / (50.0 * a * b + 10.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoreholeProblem {
    pub theta_true: Vec<f64>,
    pub noise_std: f64,
    pub n_field: usize,
    pub n_sim: usize,
    pub seed: u64,
}

impl Default for BoreholeProblem {
    fn default() -> Self {
        BoreholeProblem {
            theta_true: vec![0.089, 0.308, 0.372],
            noise_std: 5e-3,
            n_field: 2000,
            n_sim: 20000,
            seed: 0,
        }
    }
}

impl BoreholeProblem {
    pub fn validate(&self) -> Result<()> {
        Error::check_len("borehole theta_true", 3, self.theta_true.len())?;
        check_unit("theta_true", &self.theta_true)?;
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config {
                field: "noise_std".into(),
                message: format!("must be non-negative, got {}", self.noise_std),
            });
        }
        if self.n_field == 0 || self.n_sim == 0 {
            return Err(Error::Config {
                field: "n".into(),
                message: "field and simulator sizes must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Field inputs and joint `(x*, t)` simulator design from Latin hypercubes;
/// `Z` exact, `Y` with discrepancy and Gaussian noise.
pub fn make_borehole_dataset(problem: &BoreholeProblem) -> Result<CalibrationDataset> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let x = lhs_with(&mut rng, problem.n_field, 5);
    let design = lhs_with(&mut rng, problem.n_sim, 8);
    let x_sim = design.columns(0, 5).into_owned();
    let t = design.columns(5, 3).into_owned();

    let mut z = DMatrix::zeros(problem.n_sim, 1);
    for r in 0..problem.n_sim {
        let xr: Vec<f64> = x_sim.row(r).iter().copied().collect();
        let tr: Vec<f64> = t.row(r).iter().copied().collect();
        z[(r, 0)] = borehole_eta(&xr, &tr)?;
    }
    let mut y = DMatrix::zeros(problem.n_field, 1);
    for r in 0..problem.n_field {
        let xr: Vec<f64> = x.row(r).iter().copied().collect();
        let e: f64 = rng.sample(StandardNormal);
        y[(r, 0)] = borehole_eta(&xr, &problem.theta_true)? + borehole_delta(&xr)? + problem.noise_std * e;
    }
    CalibrationDataset::new(x, y, x_sim, t, z)
}
