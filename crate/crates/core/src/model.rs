//! Kennedy–O'Hagan style calibration model: a random-feature emulator of the
//! simulator, a discrepancy structure linking it to field observations, and
//! Gaussian likelihoods for both data blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rff::{deep_forward, DeepEmulatorConfig, KernelParams, LayerCache, RandomFeatureLayer};

/// Field observations `(X, Y)` and simulator runs `(X*, T, Z)`; one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationDataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub x_sim: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl CalibrationDataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        x_sim: DMatrix<f64>,
        t: DMatrix<f64>,
        z: DMatrix<f64>,
    ) -> Result<Self> {
        let data = CalibrationDataset { x, y, x_sim, t, z };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 || self.x_sim.nrows() == 0 {
            return Err(Error::Validation(
                "dataset needs at least one field row and one simulator row".into(),
            ));
        }
        Error::check_len("field rows of Y", self.x.nrows(), self.y.nrows())?;
        Error::check_len("simulator rows of T", self.x_sim.nrows(), self.t.nrows())?;
        Error::check_len("simulator rows of Z", self.x_sim.nrows(), self.z.nrows())?;
        Error::check_len("input columns of X*", self.x.ncols(), self.x_sim.ncols())?;
        Error::check_len("output columns of Z", self.y.ncols(), self.z.ncols())?;
        if self.x.ncols() == 0 || self.t.ncols() == 0 || self.y.ncols() == 0 {
            return Err(Error::Validation("dataset dimensions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_field(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_sim(&self) -> usize {
        self.x_sim.nrows()
    }

    pub fn d1(&self) -> usize {
        self.x.ncols()
    }

    pub fn d2(&self) -> usize {
        self.t.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.y.ncols()
    }

    /// Z-scores both output blocks with the simulator mean and standard
    /// deviation of each output column.
    pub fn standardized(&self) -> (CalibrationDataset, OutputScaling) {
        let d_out = self.d_out();
        let mut mean = vec![0.0; d_out];
        let mut std = vec![1.0; d_out];
        for c in 0..d_out {
            let col = self.z.column(c);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[c] = m;
            if var > 0.0 {
                std[c] = var.sqrt();
            }
        }
        let scaling = OutputScaling { mean, std };
        let mut out = self.clone();
        scaling.apply(&mut out.y);
        scaling.apply(&mut out.z);
        (out, scaling)
    }
}

/// Per-output affine map `v -> (v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl OutputScaling {
    pub fn apply(&self, m: &mut DMatrix<f64>) {
        for (c, mut col) in m.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_y: f64,
    pub sigma_z: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_y", self.sigma_y), ("sigma_z", self.sigma_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscrepancyKind {
    None,
    Additive,
    General,
}

impl DiscrepancyKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyKind::None => "none",
            DiscrepancyKind::Additive => "additive",
            DiscrepancyKind::General => "general",
        }
    }
}

/// How field responses relate to the emulator.
#[derive(Clone, Debug, PartialEq)]
pub enum Discrepancy {
    None,
    /// `f = eta + phi_delta(x)^T W_delta`, layer over `x`.
    Additive(RandomFeatureLayer),
    /// `f = eta + phi_g([eta; x])^T W_g`, layer over `[eta; x]`.
    General(RandomFeatureLayer),
}

impl Discrepancy {
    pub fn kind(&self) -> DiscrepancyKind {
        match self {
            Discrepancy::None => DiscrepancyKind::None,
            Discrepancy::Additive(_) => DiscrepancyKind::Additive,
            Discrepancy::General(_) => DiscrepancyKind::General,
        }
    }

    pub fn layer(&self) -> Option<&RandomFeatureLayer> {
        match self {
            Discrepancy::None => None,
            Discrepancy::Additive(l) | Discrepancy::General(l) => Some(l),
        }
    }

    pub(crate) fn layer_mut(&mut self) -> Option<&mut RandomFeatureLayer> {
        match self {
            Discrepancy::None => None,
            Discrepancy::Additive(l) | Discrepancy::General(l) => Some(l),
        }
    }
}

/// Emulator stack: structural config plus the built layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepEmulator {
    pub config: DeepEmulatorConfig,
    pub layers: Vec<RandomFeatureLayer>,
}

impl DeepEmulator {
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.config.layers.iter().map(|l| l.hidden_dim).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationModel {
    pub emulator: DeepEmulator,
    pub discrepancy: Discrepancy,
    pub noise: NoiseParams,
    d1: usize,
    d2: usize,
    d_out: usize,
}

impl CalibrationModel {
    pub fn new(
        emulator: DeepEmulator,
        discrepancy: Discrepancy,
        noise: NoiseParams,
        d1: usize,
        d2: usize,
    ) -> Result<Self> {
        noise.validate()?;
        let d_out = emulator.config.output_dim();
        let dims = emulator.config.input_dims(d1 + d2);
        Error::check_len("emulator layers", emulator.config.layers.len(), emulator.layers.len())?;
        for (l, (layer, width)) in emulator.layers.iter().zip(&dims).enumerate() {
            if layer.input_dim() != *width {
                return Err(Error::LayerChain {
                    layer: l,
                    expected: *width,
                    actual: layer.input_dim(),
                });
            }
        }
        match &discrepancy {
            Discrepancy::None => {}
            Discrepancy::Additive(layer) => {
                Error::check_len("additive discrepancy input", d1, layer.input_dim())?
            }
            Discrepancy::General(layer) => {
                Error::check_len("warp layer input", d_out + d1, layer.input_dim())?
            }
        }
        Ok(CalibrationModel {
            emulator,
            discrepancy,
            noise,
            d1,
            d2,
            d_out,
        })
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn n_emulator_layers(&self) -> usize {
        self.emulator.layers.len()
    }

    /// Every random-feature layer: emulator layers first, then the
    /// discrepancy or warp layer.
    pub fn layers(&self) -> impl Iterator<Item = &RandomFeatureLayer> {
        self.emulator.layers.iter().chain(self.discrepancy.layer())
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut RandomFeatureLayer> {
        self.emulator.layers.iter_mut().chain(self.discrepancy.layer_mut())
    }

    /// `(rows, cols)` of every weight matrix, in [`layers`](Self::layers) order.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<_> = self
            .emulator
            .layers
            .iter()
            .zip(self.emulator.hidden_dims())
            .map(|(l, h)| (l.n_rf(), h))
            .collect();
        if let Some(layer) = self.discrepancy.layer() {
            shapes.push((layer.n_rf(), self.d_out));
        }
        shapes
    }

    /// Block-name prefix of every layer, in [`layers`](Self::layers) order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.emulator.layers.len()).map(|l| format!("eta{l}")).collect();
        match self.discrepancy.kind() {
            DiscrepancyKind::None => {}
            DiscrepancyKind::Additive => names.push("delta".into()),
            DiscrepancyKind::General => names.push("warp".into()),
        }
        names
    }

    fn check_point(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        Error::check_len("field input x", self.d1, x.len())?;
        Error::check_len("calibration input theta", self.d2, theta.len())
    }

    pub fn emulator_eval(&self, w_eta: &[DMatrix<f64>], x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x, theta)?;
        let mut input = x.to_vec();
        input.extend_from_slice(theta);
        deep_forward(&self.emulator.config, &self.emulator.layers, w_eta, &input)
    }

    /// Latent field response. `w_disc` is `W_delta` or `W_g`; ignored without
    /// a discrepancy.
    pub fn field_eval(
        &self,
        w_eta: &[DMatrix<f64>],
        w_disc: Option<&DMatrix<f64>>,
        x: &[f64],
        theta: &[f64],
    ) -> Result<Vec<f64>> {
        let eta = self.emulator_eval(w_eta, x, theta)?;
        let (layer, input) = match &self.discrepancy {
            Discrepancy::None => return Ok(eta),
            Discrepancy::Additive(layer) => (layer, x.to_vec()),
            Discrepancy::General(layer) => {
                let mut u = eta.clone();
                u.extend_from_slice(x);
                (layer, u)
            }
        };
        let w = w_disc.ok_or_else(|| Error::Validation("discrepancy weights missing".into()))?;
        Error::check_len("discrepancy weight columns", self.d_out, w.ncols())?;
        let delta = layer.layer_output(&input, w)?;
        Ok(eta.iter().zip(&delta).map(|(a, b)| a + b).collect())
    }

    /// Analytic Jacobian `d g / d eta` of the warp at `(eta, x)`.
    pub fn warp_derivative(&self, w_g: &DMatrix<f64>, x: &[f64], eta: &[f64]) -> Result<DMatrix<f64>> {
        let layer = match &self.discrepancy {
            Discrepancy::General(layer) => layer,
            other => {
                return Err(Error::Mode {
                    op: "warp_derivative",
                    required: "general",
                    actual: other.kind().name(),
                })
            }
        };
        Error::check_len("field input x", self.d1, x.len())?;
        Error::check_len("emulator value", self.d_out, eta.len())?;
        Error::check_len("warp weight rows", layer.n_rf(), w_g.nrows())?;
        Error::check_len("warp weight columns", self.d_out, w_g.ncols())?;

        let mut u = eta.to_vec();
        u.extend_from_slice(x);
        let mut cache = LayerCache::default();
        let mut out = vec![0.0; self.d_out];
        layer.forward(&u, w_g.as_slice(), &mut cache, &mut out);

        let half = layer.n_freq();
        let phi = &cache.phi;
        let omega = layer.effective_freqs();
        let mut jac = DMatrix::identity(self.d_out, self.d_out);
        for a in 0..self.d_out {
            for b in 0..self.d_out {
                let mut acc = 0.0;
                for k in 0..half {
                    // d(s cos z_k)/d eta_b = -s sin z_k * omega_kb, and likewise for sin.
                    let dz = omega[(k, b)];
                    acc += w_g[(k, a)] * (-phi[half + k] * dz) + w_g[(half + k, a)] * (phi[k] * dz);
                }
                jac[(a, b)] += acc;
            }
        }
        Ok(jac)
    }
}

/// Everything needed to build a [`CalibrationModel`] from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d1: usize,
    pub d2: usize,
    pub n_rf: usize,
    pub emulator: DeepEmulatorConfig,
    pub discrepancy: DiscrepancyKind,
    pub discrepancy_kernel: Option<KernelParams>,
    pub noise: NoiseParams,
    pub seed: u64,
}

impl ModelSpec {
    /// Layer seeds: `seed + l` for emulator layer `l`, then the next value
    /// for the discrepancy layer.
    pub fn layer_seeds(&self) -> (Vec<u64>, u64) {
        let emu: Vec<u64> = (0..self.emulator.layers.len() as u64)
            .map(|l| self.seed.wrapping_add(l))
            .collect();
        let disc = self.seed.wrapping_add(self.emulator.layers.len() as u64);
        (emu, disc)
    }

    pub fn build(&self) -> Result<CalibrationModel> {
        let (emu_seeds, disc_seed) = self.layer_seeds();
        let layers = self.emulator.build_layers(self.d1 + self.d2, self.n_rf, &emu_seeds)?;
        let emulator = DeepEmulator {
            config: self.emulator.clone(),
            layers,
        };
        let d_out = self.emulator.output_dim();
        let discrepancy = match self.discrepancy {
            DiscrepancyKind::None => Discrepancy::None,
            kind => {
                let kernel = self.discrepancy_kernel.clone().ok_or_else(|| Error::Config {
                    field: "discrepancy_kernel".into(),
                    message: "required for additive or general discrepancy".into(),
                })?;
                let width = if kind == DiscrepancyKind::Additive {
                    self.d1
                } else {
                    d_out + self.d1
                };
                let layer = RandomFeatureLayer::build(width, self.n_rf, kernel, disc_seed)?;
                if kind == DiscrepancyKind::Additive {
                    Discrepancy::Additive(layer)
                } else {
                    Discrepancy::General(layer)
                }
            }
        };
        CalibrationModel::new(emulator, discrepancy, self.noise, self.d1, self.d2)
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Independent Gaussian log-density of `obs` around `mean`.
pub fn gaussian_loglik(obs: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("noise std must be positive, got {sigma}")));
    }
    if obs.is_empty() {
        return Err(Error::Validation("likelihood needs at least one output".into()));
    }
    Error::check_len("likelihood mean", obs.len(), mean.len())?;
    Ok(gaussian_loglik_unchecked(obs, mean, sigma))
}

pub(crate) fn gaussian_loglik_unchecked(obs: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let log_sigma = sigma.ln();
    let inv_two_var = 0.5 / (sigma * sigma);
    obs.iter()
        .zip(mean)
        .map(|(o, m)| -HALF_LN_2PI - log_sigma - (o - m) * (o - m) * inv_two_var)
        .sum()
}

pub fn log_lik_field(y: &[f64], f: &[f64], sigma_y: f64) -> Result<f64> {
    gaussian_loglik(y, f, sigma_y)
}

pub fn log_lik_sim(z: &[f64], eta_star: &[f64], sigma_z: f64) -> Result<f64> {
    gaussian_loglik(z, eta_star, sigma_z)
}
