//! Benchmark problems, data generators, the small-problem grid oracle and
//! evaluation metrics.

mod borehole;
mod illustrative;
mod oracle;

pub use borehole::{borehole_delta, borehole_eta, make_borehole_dataset, BoreholeInputs, BoreholeProblem};
pub use illustrative::{make_illustrative_dataset, Illustrative1DProblem};
pub use oracle::{analytic_theta_posterior, GridPosterior, ThetaGrid, MAX_GRID_POINTS, MAX_ORACLE_ROWS};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Latin hypercube of `n` points in `[0,1)^d`.
pub fn lhs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    lhs_with(&mut ChaCha8Rng::seed_from_u64(seed), n, d)
}

/// Column by column: a permutation of the `n` strata, one uniform draw in each.
pub fn lhs_with<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for c in 0..d {
        perm.shuffle(rng);
        for (r, &k) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            out[(r, c)] = ((k as f64 + u) / n as f64).min(1.0 - f64::EPSILON);
        }
    }
    out
}

/// `count x d` uniform draws on the unit cube.
pub fn uniform_samples(count: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(count, d, |_, _| rng.random())
}

/// Mean over `theta` draws of `sum_i ||y_i - eta(x_i, theta)||^2 / n`.
pub fn mse_metric<F>(eta: F, x: &DMatrix<f64>, y: &DMatrix<f64>, theta_samples: &DMatrix<f64>) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    if theta_samples.nrows() == 0 {
        return Err(Error::Validation("mse needs at least one theta sample".into()));
    }
    Error::check_len("rows of Y", x.nrows(), y.nrows())?;
    if x.nrows() == 0 {
        return Err(Error::Validation("mse needs at least one observation".into()));
    }
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for s in theta_samples.row_iter() {
        let theta: Vec<f64> = s.iter().copied().collect();
        let mut sq = 0.0;
        for i in 0..x.nrows() {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let f = eta(&xi, &theta)?;
            Error::check_len("simulator output", y.ncols(), f.len())?;
            sq += f.iter().zip(y.row(i).iter()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        }
        total += sq / n;
    }
    Ok(total / theta_samples.nrows() as f64)
}
