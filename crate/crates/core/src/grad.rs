//! Flat parameter vector over everything the optimizer touches, and the exact
//! gradient of the fixed-noise ELBO with respect to it.
//!
//! Hyperparameters enter through logs: `log sigma` and `log precision` per
//! random-feature layer, `log sigma_y`, `log sigma_z`. Frequencies scale with
//! `sqrt(precision)`, so their draws stay fixed while the precision moves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CalibrationDataset, CalibrationModel};
use crate::rff::KernelParams;
use crate::svi::{elbo_impl, ElboEstimate, EpsBank, GaussianFactor, Priors, VariationalPosterior};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Name → range map covering every trainable scalar exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<Block>,
}

impl Layout {
    pub fn for_model(model: &CalibrationModel) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            blocks.push(Block { name, offset, len });
            offset += len;
        };
        push("theta.mean".into(), model.d2());
        push("theta.log_std".into(), model.d2());
        let names = model.layer_names();
        for (name, (r, c)) in names.iter().zip(model.weight_shapes()) {
            push(format!("{name}.w.mean"), r * c);
            push(format!("{name}.w.log_std"), r * c);
        }
        for (name, layer) in names.iter().zip(model.layers()) {
            push(format!("{name}.log_sigma"), 1);
            push(format!("{name}.log_precision"), layer.input_dim());
        }
        push("noise.log_sigma_y".into(), 1);
        push("noise.log_sigma_z".into(), 1);
        Layout { blocks }
    }

    /// Layout from `(name, len)` pairs laid end to end.
    pub fn from_blocks<S: Into<String>>(blocks: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, len) in blocks {
            let name = name.into();
            if out.iter().any(|b: &Block| b.name == name) {
                return Err(Error::Validation(format!("duplicate parameter block `{name}`")));
            }
            out.push(Block { name, offset, len });
            offset += len;
        }
        Ok(Layout { blocks: out })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    /// Block owning flat coordinate `i`.
    pub fn block_of(&self, i: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| i >= b.offset && i < b.offset + b.len)
    }

    /// Boolean mask selecting the named blocks.
    pub fn mask<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.len()];
        for name in names {
            let b = self.get(name).ok_or_else(|| Error::Config {
                field: "trainable_mask".into(),
                message: format!("unknown parameter block `{name}`"),
            })?;
            mask[b.offset..b.offset + b.len].fill(true);
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn pack(model: &CalibrationModel, posterior: &VariationalPosterior) -> Result<Self> {
        posterior.validate(model)?;
        let layout = Layout::for_model(model);
        let mut values = Vec::with_capacity(layout.len());
        values.extend_from_slice(&posterior.theta.mean);
        values.extend_from_slice(&posterior.theta.log_std);
        for f in &posterior.weights {
            values.extend_from_slice(&f.mean);
            values.extend_from_slice(&f.log_std);
        }
        for layer in model.layers() {
            let k = layer.kernel();
            values.push(k.sigma.ln());
            values.extend(k.precision_diag.iter().map(|a| a.ln()));
        }
        values.push(model.noise.sigma_y.ln());
        values.push(model.noise.sigma_z.ln());
        debug_assert_eq!(values.len(), layout.len());
        Ok(ParamVector { values, layout })
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|b| &self.values[b.offset..b.offset + b.len])
    }

    /// Rebuilds the posterior and a copy of `model` carrying the
    /// hyperparameters stored here.
    pub fn unpack(&self, model: &CalibrationModel) -> Result<(CalibrationModel, VariationalPosterior)> {
        let expected = Layout::for_model(model);
        if expected != self.layout {
            return Err(Error::Validation("parameter layout does not match the model".into()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let block = self.layout.block_of(i).map_or("?".into(), |b| b.name.clone());
            return Err(Error::NonFinite { block });
        }
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = &self.values[cursor..cursor + len];
            cursor += len;
            s.to_vec()
        };
        let d2 = model.d2();
        let theta = GaussianFactor {
            mean: take(d2),
            log_std: take(d2),
        };
        let weights = model
            .weight_shapes()
            .iter()
            .map(|(r, c)| GaussianFactor {
                mean: take(r * c),
                log_std: take(r * c),
            })
            .collect();
        let mut out = model.clone();
        let names = model.layer_names();
        for (name, layer) in names.iter().zip(out.layers_mut()) {
            let sigma = take(1)[0].exp();
            let precision: Vec<f64> = take(layer.input_dim()).iter().map(|v| v.exp()).collect();
            layer
                .set_kernel(KernelParams {
                    sigma,
                    precision_diag: precision,
                })
                .map_err(|_| Error::NonFinite {
                    block: format!("{name}.log_sigma/log_precision"),
                })?;
        }
        out.noise.sigma_y = take(1)[0].exp();
        out.noise.sigma_z = take(1)[0].exp();
        out.noise.validate().map_err(|_| Error::NonFinite {
            block: "noise".into(),
        })?;
        Ok((out, VariationalPosterior { theta, weights }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// ELBO value and its exact gradient at fixed `eps_bank`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_value_grad(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    params: &ParamVector,
    priors: &Priors,
    n_mc: usize,
    field_idx: &[usize],
    sim_idx: &[usize],
    eps_bank: &EpsBank,
) -> Result<GradResult> {
    elbo_estimate_grad(model, dataset, params, priors, n_mc, field_idx, sim_idx, eps_bank).map(|(_, g)| g)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn elbo_estimate_grad(
    model: &CalibrationModel,
    dataset: &CalibrationDataset,
    params: &ParamVector,
    priors: &Priors,
    n_mc: usize,
    field_idx: &[usize],
    sim_idx: &[usize],
    eps_bank: &EpsBank,
) -> Result<(ElboEstimate, GradResult)> {
    if n_mc == 0 {
        return Err(Error::Validation("n_mc must be at least 1".into()));
    }
    Error::check_len("eps bank draws", n_mc, eps_bank.n_mc())?;
    let (model, posterior) = params.unpack(model)?;
    let (estimate, grads) = elbo_impl(&model, dataset, &posterior, priors, field_idx, sim_idx, eps_bank, true)?;
    let grads = grads.expect("gradient requested");

    let mut grad = Vec::with_capacity(params.values.len());
    grad.extend_from_slice(&grads.theta.mean);
    grad.extend_from_slice(&grads.theta.log_std);
    for f in &grads.weights {
        grad.extend_from_slice(&f.mean);
        grad.extend_from_slice(&f.log_std);
    }
    for l in &grads.sample.layers {
        grad.push(l.log_sigma);
        grad.extend_from_slice(&l.log_precision);
    }
    grad.push(grads.sample.log_sigma_y);
    grad.push(grads.sample.log_sigma_z);
    debug_assert_eq!(grad.len(), params.values.len());

    if !estimate.value.is_finite() {
        return Err(Error::NonFinite { block: "elbo".into() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let block = params.layout.block_of(i).map_or("?".into(), |b| b.name.clone());
        return Err(Error::NonFinite { block });
    }
    let value = estimate.value;
    Ok((estimate, GradResult { value, grad }))
}

/// Gradient of `-KL(q || p)` alone, laid out like the full parameter vector
/// (zero outside the variational blocks).
pub fn neg_kl_value_grad(model: &CalibrationModel, params: &ParamVector, priors: &Priors) -> Result<GradResult> {
    let (_, posterior) = params.unpack(model)?;
    let mut grad = vec![0.0; params.values.len()];
    let mut value = 0.0;
    let pairs = std::iter::once((&posterior.theta, &priors.theta)).chain(posterior.weights.iter().zip(&priors.weights));
    let mut offset = 0;
    for (q, p) in pairs {
        Error::check_len("kl prior length", q.len(), p.len())?;
        let n = q.len();
        for (c, (kl, dm, dl)) in crate::svi::kl_terms(q, p).enumerate() {
            value -= kl;
            grad[offset + c] = -dm;
            grad[offset + n + c] = -dl;
        }
        offset += 2 * n;
    }
    Ok(GradResult { value, grad })
}

/// Relative error with a unit floor on the denominator, so coordinates whose
/// true derivative is ~0 are judged on absolute error.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0)
}

/// Central differences of `f` at `params` compared against `grad`; returns
/// one relative error per coordinate.
pub fn finite_diff_check<F>(f: F, params: &[f64], grad: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Validation(format!("finite-difference step must be positive, got {h}")));
    }
    Error::check_len("analytic gradient", params.len(), grad.len())?;
    let mut p = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = f(&p)?;
        p[k] = orig - h;
        let down = f(&p)?;
        p[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        errors.push(relative_error(numeric, grad[k]));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_exact_on_linear() {
        let coef = [1.5, -2.0, 0.25];
        let f = |p: &[f64]| Ok(p.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 3.0);
        let errs = finite_diff_check(f, &[0.1, 0.2, -0.3], &coef, 1e-5).unwrap();
        assert!(errs.iter().all(|e| *e < 1e-10), "{errs:?}");
    }

    #[test]
    fn fd_exact_on_quadratic() {
        let f = |p: &[f64]| Ok(p[0] * p[0] - 3.0 * p[0] * p[1] + 0.5 * p[1] * p[1]);
        let p = [0.7, -1.1];
        let grad = [2.0 * p[0] - 3.0 * p[1], -3.0 * p[0] + p[1]];
        let errs = finite_diff_check(f, &p, &grad, 1e-3).unwrap();
        assert!(errs.iter().all(|e| *e < 1e-10), "{errs:?}");
    }

    #[test]
    fn fd_rejects_bad_step() {
        assert!(finite_diff_check(|_| Ok(0.0), &[1.0], &[0.0], 0.0).is_err());
    }
}
