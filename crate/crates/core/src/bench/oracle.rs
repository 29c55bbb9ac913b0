//! Grid posterior of `theta` with the weights integrated out exactly.
//!
//! For fixed `theta` a shallow model is linear in its weights, so the data
//! are jointly Gaussian with covariance `F F^T + D`. The determinant and
//! quadratic form go through the feature-space matrix `I + F^T D^-1 F`.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CalibrationDataset, CalibrationModel, Discrepancy};
use crate::svi::GaussianFactor;

pub const MAX_ORACLE_ROWS: usize = 200;
pub const MAX_GRID_POINTS: usize = 10_000;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Tensor grid of uniformly spaced axes; the last axis varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaGrid {
    axes: Vec<Vec<f64>>,
}

impl ThetaGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Validation("grid needs at least one axis".into()));
        }
        for (d, a) in axes.iter().enumerate() {
            if a.len() < 2 {
                return Err(Error::Validation(format!("grid axis {d} needs at least two points")));
            }
            let h = a[1] - a[0];
            let uniform = h > 0.0 && a.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
            if !uniform {
                return Err(Error::Validation(format!("grid axis {d} is not uniformly increasing")));
            }
        }
        Ok(ThetaGrid { axes })
    }

    /// `points` per axis spanning `mean +/- width_sd * std` of the prior.
    pub fn around_prior(prior: &GaussianFactor, points: usize, width_sd: f64) -> Result<Self> {
        let std = prior.std();
        let axes = prior
            .mean
            .iter()
            .zip(&std)
            .map(|(m, s)| {
                let lo = m - width_sd * s;
                let h = 2.0 * width_sd * s / (points.max(2) - 1) as f64;
                (0..points).map(|i| lo + h * i as f64).collect()
            })
            .collect();
        Self::new(axes)
    }

    /// 401 points per axis over four prior standard deviations each side.
    pub fn default_for(prior: &GaussianFactor) -> Result<Self> {
        Self::around_prior(prior, 401, 4.0)
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[1] - a[0]).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn point(&self, mut j: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let len = self.axes[d].len();
            p[d] = self.axes[d][j % len];
            j /= len;
        }
        p
    }

    /// Flat index of the cell containing `theta`, if any.
    pub fn cell_of(&self, theta: &[f64]) -> Option<usize> {
        let mut j = 0;
        for (a, &v) in self.axes.iter().zip(theta) {
            let h = a[1] - a[0];
            let k = ((v - a[0]) / h + 0.5).floor();
            if !(k >= 0.0 && k < a.len() as f64) {
                return None;
            }
            j = j * a.len() + k as usize;
        }
        Some(j)
    }
}

#[derive(Clone, Debug)]
pub struct GridPosterior {
    pub grid: ThetaGrid,
    /// `log p(Y, Z | theta)` at every grid point.
    pub log_lik: Vec<f64>,
    /// Normalized density: `sum(density) * cell_volume == 1`.
    pub density: Vec<f64>,
    /// Quadrature estimate of `log p(Y, Z)`.
    pub log_marginal: f64,
}

impl GridPosterior {
    pub fn probabilities(&self) -> Vec<f64> {
        let v = self.grid.cell_volume();
        self.density.iter().map(|d| d * v).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let p = self.probabilities();
        let mut m = vec![0.0; self.grid.dim()];
        for (j, pj) in p.iter().enumerate() {
            for (md, td) in m.iter_mut().zip(self.grid.point(j)) {
                *md += pj * td;
            }
        }
        m
    }

    pub fn std(&self) -> Vec<f64> {
        let p = self.probabilities();
        let mean = self.mean();
        let mut var = vec![0.0; self.grid.dim()];
        for (j, pj) in p.iter().enumerate() {
            for ((v, td), md) in var.iter_mut().zip(self.grid.point(j)).zip(&mean) {
                *v += pj * (td - md) * (td - md);
            }
        }
        var.iter().map(|v| v.sqrt()).collect()
    }

    /// Draws from the piecewise-constant density: a cell by its probability,
    /// then a uniform point inside it.
    pub fn sample(&self, count: usize, seed: u64) -> DMatrix<f64> {
        let mut cdf = self.probabilities();
        for j in 1..cdf.len() {
            cdf[j] += cdf[j - 1];
        }
        let total = *cdf.last().unwrap_or(&1.0);
        let h = self.grid.spacing();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(count, self.grid.dim());
        for r in 0..count {
            let u = rng.random::<f64>() * total;
            let j = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            for (d, v) in self.grid.point(j).into_iter().enumerate() {
                out[(r, d)] = v + h[d] * (rng.random::<f64>() - 0.5);
            }
        }
        out
    }

    /// Total-variation distance between the histogram of `samples` on the
    /// grid cells and the grid posterior. Samples off the grid count fully.
    pub fn tv_distance(&self, samples: &DMatrix<f64>) -> Result<f64> {
        Error::check_len("sample columns", self.grid.dim(), samples.ncols())?;
        if samples.nrows() == 0 {
            return Err(Error::Validation("need at least one sample".into()));
        }
        let m = samples.nrows() as f64;
        let mut counts = vec![0.0; self.grid.len()];
        let mut outside = 0.0;
        for row in samples.row_iter() {
            let theta: Vec<f64> = row.iter().copied().collect();
            match self.grid.cell_of(&theta) {
                Some(j) => counts[j] += 1.0,
                None => outside += 1.0,
            }
        }
        let diff: f64 = counts
            .iter()
            .zip(self.probabilities())
            .map(|(c, p)| (c / m - p).abs())
            .sum();
        Ok(0.5 * (diff + outside / m))
    }
}

struct Precomputed {
    sim_gram: DMatrix<f64>,
    sim_rhs: Vec<DVector<f64>>,
    psi: Option<DMatrix<f64>>,
    data_quad: Vec<f64>,
    log_det_d: f64,
}

fn feature_rows(rows: impl Iterator<Item = Vec<f64>>, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = rows.map(|r| f(&r)).collect::<Result<_>>()?;
    let k = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Normalized grid posterior of `theta` for a shallow model with no or
/// additive discrepancy, weights under standard-normal priors.
pub fn analytic_theta_posterior(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    grid: &ThetaGrid,
    prior: &GaussianFactor,
) -> Result<GridPosterior> {
    let rows = dataset.n_field() + dataset.n_sim();
    if rows > MAX_ORACLE_ROWS {
        return Err(Error::OracleGuard(format!("{rows} data rows exceed the limit of {MAX_ORACLE_ROWS}")));
    }
    if grid.len() > MAX_GRID_POINTS {
        return Err(Error::OracleGuard(format!(
            "{} grid points exceed the limit of {MAX_GRID_POINTS}",
            grid.len()
        )));
    }
    if model.n_emulator_layers() != 1 {
        return Err(Error::OracleGuard("only shallow emulators are linear in their weights".into()));
    }
    if let Discrepancy::General(_) = model.discrepancy {
        return Err(Error::OracleGuard("the warped model is not linear in its weights".into()));
    }
    crate::svi::check_model_data(model, dataset)?;
    Error::check_len("theta grid dimension", model.d2(), grid.dim())?;
    Error::check_len("theta prior", model.d2(), prior.len())?;

    let eta = &model.emulator.layers[0];
    let (sy2, sz2) = (model.noise.sigma_y.powi(2), model.noise.sigma_z.powi(2));
    let (n, big_n) = (dataset.n_field(), dataset.n_sim());

    let phi_s = feature_rows(
        (0..big_n).map(|i| {
            let mut u = row(&dataset.x_sim, i);
            u.extend(row(&dataset.t, i));
            u
        }),
        |u| Ok(eta.features(u)?.values),
    )?;
    let psi = match model.discrepancy.layer() {
        Some(layer) => Some(feature_rows((0..n).map(|i| row(&dataset.x, i)), |u| Ok(layer.features(u)?.values))?),
        None => None,
    };
    let d_out = dataset.d_out();
    let pre = Precomputed {
        sim_gram: phi_s.transpose() * &phi_s / sz2,
        sim_rhs: (0..d_out)
            .map(|c| phi_s.transpose() * dataset.z.column(c) / sz2)
            .collect(),
        psi,
        data_quad: (0..d_out)
            .map(|c| dataset.y.column(c).norm_squared() / sy2 + dataset.z.column(c).norm_squared() / sz2)
            .collect(),
        log_det_d: n as f64 * sy2.ln() + big_n as f64 * sz2.ln(),
    };

    let log_lik: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|j| log_lik_at(model, dataset, &pre, &grid.point(j)))
        .collect::<Result<_>>()?;

    let std = prior.std();
    let log_post: Vec<f64> = log_lik
        .iter()
        .enumerate()
        .map(|(j, ll)| {
            let lp: f64 = grid
                .point(j)
                .iter()
                .zip(&prior.mean)
                .zip(&std)
                .map(|((t, m), s)| -0.5 * ((t - m) / s).powi(2) - s.ln() - 0.5 * LN_2PI)
                .sum();
            ll + lp
        })
        .collect();
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_post.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let vol = grid.cell_volume();
    let density = log_post.iter().map(|v| (v - lse).exp() / vol).collect();
    Ok(GridPosterior {
        grid: grid.clone(),
        log_lik,
        density,
        log_marginal: lse + vol.ln(),
    })
}

fn log_lik_at(model: &CalibrationModel, dataset: &CalibrationDataset, pre: &Precomputed, theta: &[f64]) -> Result<f64> {
    let eta = &model.emulator.layers[0];
    let n = dataset.n_field();
    let sy2 = model.noise.sigma_y.powi(2);
    let phi_f = feature_rows(
        (0..n).map(|i| {
            let mut u = row(&dataset.x, i);
            u.extend_from_slice(theta);
            u
        }),
        |u| Ok(eta.features(u)?.values),
    )?;
    let k = phi_f.ncols();
    let kd = pre.psi.as_ref().map_or(0, |p| p.ncols());
    let mut m = DMatrix::identity(k + kd, k + kd);
    let top = phi_f.transpose() * &phi_f / sy2 + &pre.sim_gram;
    m.view_mut((0, 0), (k, k)).add_assign(&top);
    if let Some(psi) = &pre.psi {
        let cross = phi_f.transpose() * psi / sy2;
        m.view_mut((0, k), (k, kd)).add_assign(&cross);
        m.view_mut((k, 0), (kd, k)).add_assign(&cross.transpose());
        m.view_mut((k, k), (kd, kd)).add_assign(&(psi.transpose() * psi / sy2));
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Validation("feature-space matrix is not positive definite".into()))?;
    let log_det_m: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let rows = (n + dataset.n_sim()) as f64;

    let mut total = 0.0;
    for c in 0..dataset.d_out() {
        let y = dataset.y.column(c);
        let mut b = DVector::zeros(k + kd);
        b.rows_mut(0, k).copy_from(&(phi_f.transpose() * y / sy2 + &pre.sim_rhs[c]));
        if let Some(psi) = &pre.psi {
            b.rows_mut(k, kd).copy_from(&(psi.transpose() * y / sy2));
        }
        let sol = chol.solve(&b);
        let quad = pre.data_quad[c] - b.dot(&sol);
        total += -0.5 * (quad + pre.log_det_d + log_det_m + rows * LN_2PI);
    }
    Ok(total)
}
