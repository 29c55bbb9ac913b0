//! Random Fourier feature approximation of Gaussian-process layers.
//!
//! A layer with `n_rf` features draws `n_rf / 2` frequency rows once from a
//! seed-keyed generator and keeps them fixed. Kernel hyperparameters act by
//! rescaling: the effective frequency matrix is `base_freqs * diag(sqrt(a))`,
//! so every effective row is distributed `N(0, diag(a))` and gradients with
//! respect to the hyperparameters never require a redraw.
//!
//! The feature vector is laid out as `[cos(z_1) .. cos(z_K) | sin(z_1) .. sin(z_K)]`
//! scaled by `sigma * sqrt(2 / n_rf)`, which makes `phi(x)^T phi(x) = sigma^2`
//! for every input.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian covariance `sigma^2 * exp(-0.5 * d^T diag(precision) d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma: f64,
    pub precision_diag: Vec<f64>,
}

impl KernelParams {
    pub fn new(sigma: f64, precision_diag: Vec<f64>) -> Result<Self> {
        let kernel = KernelParams {
            sigma,
            precision_diag,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Equal precision on every input axis.
    pub fn isotropic(sigma: f64, precision: f64, dim: usize) -> Result<Self> {
        Self::new(sigma, vec![precision; dim])
    }

    pub fn dim(&self) -> usize {
        self.precision_diag.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "kernel sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        if self.precision_diag.is_empty() {
            return Err(Error::Validation("kernel precision is empty".into()));
        }
        if let Some(bad) = self
            .precision_diag
            .iter()
            .find(|a| !(**a > 0.0 && a.is_finite()))
        {
            return Err(Error::Validation(format!(
                "kernel precision entries must be positive and finite, got {bad}"
            )));
        }
        Ok(())
    }

    /// Closed-form covariance between two inputs.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        let quad: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.precision_diag)
            .map(|((a, b), p)| p * (a - b) * (a - b))
            .sum();
        self.sigma * self.sigma * (-0.5 * quad).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Reusable buffers filled by a forward pass and consumed by the matching
/// backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerCache {
    pub input: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Gradient accumulators for one layer.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerGrads {
    /// Column-major, same shape as the layer weights.
    pub w: Vec<f64>,
    pub log_sigma: f64,
    pub log_precision: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros(n_rf: usize, d_out: usize, input_dim: usize) -> Self {
        LayerGrads {
            w: vec![0.0; n_rf * d_out],
            log_sigma: 0.0,
            log_precision: vec![0.0; input_dim],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        self.log_sigma += other.log_sigma;
        for (a, b) in self.log_precision.iter_mut().zip(&other.log_precision) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomFeatureLayer {
    n_rf: usize,
    input_dim: usize,
    /// `(n_rf / 2) x input_dim` standard-normal draws.
    base_freqs: DMatrix<f64>,
    kernel: KernelParams,
    /// `None` when the frequencies were supplied explicitly.
    seed: Option<u64>,
}

impl RandomFeatureLayer {
    /// Draws `n_rf / 2` standard-normal frequency rows from a ChaCha stream
    /// keyed by `seed`. The same seed always yields the same layer.
    pub fn build(input_dim: usize, n_rf: usize, kernel: KernelParams, seed: u64) -> Result<Self> {
        if n_rf < 2 || n_rf % 2 != 0 {
            return Err(Error::Config {
                field: "n_rf".into(),
                message: format!("n_rf must be even and at least 2, got {n_rf}"),
            });
        }
        if input_dim == 0 {
            return Err(Error::Config {
                field: "input_dim".into(),
                message: "input_dim must be at least 1".into(),
            });
        }
        kernel.validate()?;
        Error::check_len("kernel precision length", input_dim, kernel.dim())?;

        let half = n_rf / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Row-major draw order so the stream layout does not depend on the
        // matrix storage order.
        let draws: Vec<f64> = (0..half * input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let base_freqs = DMatrix::from_row_slice(half, input_dim, &draws);
        Ok(RandomFeatureLayer {
            n_rf,
            input_dim,
            base_freqs,
            kernel,
            seed: Some(seed),
        })
    }

    /// Builds a layer from explicit base frequencies (one row per frequency).
    /// Such layers cannot be regenerated from a seed.
    pub fn from_base_freqs(base_freqs: DMatrix<f64>, kernel: KernelParams) -> Result<Self> {
        if base_freqs.nrows() == 0 || base_freqs.ncols() == 0 {
            return Err(Error::Validation("base frequency matrix is empty".into()));
        }
        kernel.validate()?;
        Error::check_len("kernel precision length", base_freqs.ncols(), kernel.dim())?;
        Ok(RandomFeatureLayer {
            n_rf: 2 * base_freqs.nrows(),
            input_dim: base_freqs.ncols(),
            base_freqs,
            kernel,
            seed: None,
        })
    }

    pub fn n_rf(&self) -> usize {
        self.n_rf
    }

    pub fn n_freq(&self) -> usize {
        self.n_rf / 2
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn base_freqs(&self) -> &DMatrix<f64> {
        &self.base_freqs
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Replaces the kernel hyperparameters; the base draws are untouched.
    pub fn set_kernel(&mut self, kernel: KernelParams) -> Result<()> {
        kernel.validate()?;
        Error::check_len("kernel precision length", self.input_dim, kernel.dim())?;
        self.kernel = kernel;
        Ok(())
    }

    /// `base_freqs` with column `d` scaled by `sqrt(precision_d)`.
    pub fn effective_freqs(&self) -> DMatrix<f64> {
        let mut omega = self.base_freqs.clone();
        for (d, a) in self.kernel.precision_diag.iter().enumerate() {
            omega.column_mut(d).scale_mut(a.sqrt());
        }
        omega
    }

    fn feature_scale(&self) -> f64 {
        self.kernel.sigma * (2.0 / self.n_rf as f64).sqrt()
    }

    pub fn features(&self, input: &[f64]) -> Result<FeatureVector> {
        Error::check_len("feature input", self.input_dim, input.len())?;
        let mut phi = vec![0.0; self.n_rf];
        self.features_into(input, &mut phi);
        Ok(FeatureVector { values: phi })
    }

    /// Writes `[cos | sin]` features into `phi`; lengths are the caller's job.
    pub(crate) fn features_into(&self, input: &[f64], phi: &mut [f64]) {
        let half = self.n_freq();
        let (cos_part, sin_part) = phi.split_at_mut(half);
        cos_part.fill(0.0);
        let base = self.base_freqs.as_slice();
        for (d, (&u, &a)) in input.iter().zip(&self.kernel.precision_diag).enumerate() {
            let scaled = a.sqrt() * u;
            let column = &base[d * half..(d + 1) * half];
            for (z, &b) in cos_part.iter_mut().zip(column) {
                *z += b * scaled;
            }
        }
        let s = self.feature_scale();
        for (c, sn) in cos_part.iter_mut().zip(sin_part.iter_mut()) {
            let (sin_z, cos_z) = c.sin_cos();
            *c = s * cos_z;
            *sn = s * sin_z;
        }
    }

    /// `features(input)^T w` for a weight matrix with `n_rf` rows.
    pub fn layer_output(&self, input: &[f64], w: &DMatrix<f64>) -> Result<Vec<f64>> {
        Error::check_len("layer weight rows", self.n_rf, w.nrows())?;
        let phi = self.features(input)?;
        Ok(project(&phi.values, w.as_slice(), w.ncols()))
    }

    pub fn empirical_kernel(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        Ok(self.features(x)?.dot(&self.features(x2)?))
    }

    /// Forward pass keeping what the backward pass needs. `w` is column-major
    /// `n_rf x out.len()`.
    pub(crate) fn forward(&self, input: &[f64], w: &[f64], cache: &mut LayerCache, out: &mut [f64]) {
        cache.input.clear();
        cache.input.extend_from_slice(input);
        cache.phi.resize(self.n_rf, 0.0);
        self.features_into(input, &mut cache.phi);
        let n = self.n_rf;
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(&cache.phi, &w[j * n..(j + 1) * n]);
        }
    }

    /// Backward pass for [`forward`](Self::forward). Accumulates into `grads`
    /// and overwrites `input_bar` with the gradient with respect to the input.
    pub(crate) fn backward(
        &self,
        cache: &LayerCache,
        w: &[f64],
        out_bar: &[f64],
        grads: &mut LayerGrads,
        input_bar: &mut [f64],
        phi_bar: &mut Vec<f64>,
    ) {
        let n = self.n_rf;
        let half = self.n_freq();
        let phi = &cache.phi;
        phi_bar.clear();
        phi_bar.resize(n, 0.0);
        for (j, &g) in out_bar.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wj = &w[j * n..(j + 1) * n];
            let gw = &mut grads.w[j * n..(j + 1) * n];
            for i in 0..n {
                gw[i] += phi[i] * g;
                phi_bar[i] += wj[i] * g;
            }
        }
        // d phi / d log sigma = phi
        grads.log_sigma += dot(phi_bar, phi);

        // Reuse the cos half of phi_bar as z_bar:
        // d(s cos z)/dz = -s sin z, d(s sin z)/dz = s cos z.
        for k in 0..half {
            let z_bar = -phi_bar[k] * phi[half + k] + phi_bar[half + k] * phi[k];
            phi_bar[k] = z_bar;
        }
        let z_bar = &phi_bar[..half];
        let base = self.base_freqs.as_slice();
        for (d, a) in self.kernel.precision_diag.iter().enumerate() {
            let column = &base[d * half..(d + 1) * half];
            let scaled_bar = dot(column, z_bar);
            let root = a.sqrt();
            input_bar[d] = scaled_bar * root;
            // scaled = exp(0.5 log a) * u
            grads.log_precision[d] += scaled_bar * 0.5 * root * cache.input[d];
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(phi: &[f64], w: &[f64], d_out: usize) -> Vec<f64> {
    let n = phi.len();
    (0..d_out).map(|j| dot(phi, &w[j * n..(j + 1) * n])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayerSpec {
    pub hidden_dim: usize,
    pub kernel: KernelParams,
}

/// Stack of random-feature GP layers. The kernels here are initial values;
/// once layers are built they own their hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepEmulatorConfig {
    pub layers: Vec<HiddenLayerSpec>,
    /// Append the original input to every hidden layer's input.
    pub concat_input: bool,
}

impl DeepEmulatorConfig {
    pub fn shallow(d_out: usize, kernel: KernelParams) -> Self {
        DeepEmulatorConfig {
            layers: vec![HiddenLayerSpec {
                hidden_dim: d_out,
                kernel,
            }],
            concat_input: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_dim)
    }

    /// Input width of every layer for an emulator input of width `d_in`.
    pub fn input_dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut prev = d_in;
        for (l, spec) in self.layers.iter().enumerate() {
            let width = if l == 0 {
                d_in
            } else if self.concat_input {
                prev + d_in
            } else {
                prev
            };
            dims.push(width);
            prev = spec.hidden_dim;
        }
        dims
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config {
                field: "emulator.layers".into(),
                message: "at least one layer is required".into(),
            });
        }
        for (spec, width) in self.layers.iter().zip(self.input_dims(d_in)) {
            if spec.hidden_dim == 0 {
                return Err(Error::Config {
                    field: "emulator.hidden_dim".into(),
                    message: "hidden_dim must be at least 1".into(),
                });
            }
            spec.kernel.validate()?;
            Error::check_len("emulator layer kernel precision", width, spec.kernel.dim())?;
        }
        Ok(())
    }

    pub fn build_layers(&self, d_in: usize, n_rf: usize, seeds: &[u64]) -> Result<Vec<RandomFeatureLayer>> {
        self.validate(d_in)?;
        Error::check_len("emulator layer seeds", self.layers.len(), seeds.len())?;
        self.layers
            .iter()
            .zip(self.input_dims(d_in))
            .zip(seeds)
            .map(|((spec, width), &seed)| RandomFeatureLayer::build(width, n_rf, spec.kernel.clone(), seed))
            .collect()
    }
}

/// Sequential composition of `layer_output` calls.
pub fn deep_forward(
    config: &DeepEmulatorConfig,
    layers: &[RandomFeatureLayer],
    weights: &[DMatrix<f64>],
    input: &[f64],
) -> Result<Vec<f64>> {
    Error::check_len("deep emulator layers", config.layers.len(), layers.len())?;
    Error::check_len("deep emulator weights", config.layers.len(), weights.len())?;
    let mut current = input.to_vec();
    for (l, ((spec, layer), w)) in config.layers.iter().zip(layers).zip(weights).enumerate() {
        let layer_input = if l > 0 && config.concat_input {
            let mut v = current.clone();
            v.extend_from_slice(input);
            v
        } else {
            current
        };
        if layer.input_dim() != layer_input.len() {
            return Err(Error::LayerChain {
                layer: l,
                expected: layer.input_dim(),
                actual: layer_input.len(),
            });
        }
        if w.nrows() != layer.n_rf() || w.ncols() != spec.hidden_dim {
            return Err(Error::LayerChain {
                layer: l,
                expected: layer.n_rf() * spec.hidden_dim,
                actual: w.nrows() * w.ncols(),
            });
        }
        current = layer.layer_output(&layer_input, w)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_kernel(dim: usize) -> KernelParams {
        KernelParams::isotropic(1.0, 1.0, dim).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = RandomFeatureLayer::build(1, 2, unit_kernel(1), 7).unwrap();
        let b = RandomFeatureLayer::build(1, 2, unit_kernel(1), 7).unwrap();
        assert_eq!(a.base_freqs().shape(), (1, 1));
        assert_eq!(a.base_freqs()[(0, 0)].to_bits(), b.base_freqs()[(0, 0)].to_bits());
    }

    #[test]
    fn base_freq_shape() {
        let layer = RandomFeatureLayer::build(3, 100, unit_kernel(3), 1).unwrap();
        assert_eq!(layer.base_freqs().shape(), (50, 3));
    }

    #[test]
    fn odd_feature_count_rejected() {
        let err = RandomFeatureLayer::build(1, 3, unit_kernel(1), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_rf") && msg.contains("even"), "{msg}");
    }

    #[test]
    fn non_positive_kernel_rejected() {
        assert!(KernelParams::new(0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0]).is_err());
        let bad = KernelParams {
            sigma: 1.0,
            precision_diag: vec![0.0],
        };
        assert!(RandomFeatureLayer::build(1, 2, bad, 0).is_err());
    }

    #[test]
    fn zero_input_features() {
        let layer = RandomFeatureLayer::build(2, 2, unit_kernel(2), 3).unwrap();
        let phi = layer.features(&[0.0, 0.0]).unwrap();
        assert_eq!(phi.values, vec![1.0, 0.0]);
    }

    #[test]
    fn single_frequency_features() {
        let layer = RandomFeatureLayer::from_base_freqs(DMatrix::from_element(1, 1, 2.0), unit_kernel(1)).unwrap();
        let phi = layer.features(&[PI / 4.0]).unwrap();
        assert!((phi.values[0] - 0.0).abs() < 1e-15);
        assert!((phi.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_input_mismatch() {
        let layer = RandomFeatureLayer::build(2, 4, unit_kernel(2), 3).unwrap();
        let err = layer.features(&[1.0]).unwrap_err();
        assert!(matches!(err, Error::Shape { expected: 2, actual: 1, .. }));
    }

    #[test]
    fn layer_output_selectors() {
        let layer = RandomFeatureLayer::build(2, 6, unit_kernel(2), 9).unwrap();
        let x = [0.3, -0.7];
        let zero = DMatrix::zeros(6, 2);
        assert_eq!(layer.layer_output(&x, &zero).unwrap(), vec![0.0, 0.0]);
        let mut e1 = DMatrix::zeros(6, 1);
        e1[(0, 0)] = 1.0;
        let phi = layer.features(&x).unwrap();
        assert_eq!(layer.layer_output(&x, &e1).unwrap(), vec![phi.values[0]]);
        assert!(layer.layer_output(&x, &DMatrix::zeros(5, 1)).is_err());
    }

    #[test]
    fn input_dims_chain() {
        let k = unit_kernel(1);
        let cfg = DeepEmulatorConfig {
            layers: vec![
                HiddenLayerSpec { hidden_dim: 3, kernel: k.clone() },
                HiddenLayerSpec { hidden_dim: 1, kernel: k },
            ],
            concat_input: true,
        };
        assert_eq!(cfg.input_dims(2), vec![2, 5]);
        assert_eq!(cfg.output_dim(), 1);
    }
}
