use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CalibrationModel, DiscrepancyKind, ModelSpec};
use crate::rff::{DeepEmulatorConfig, HiddenLayerSpec};
use crate::trainer::{schedule_with, InitialValues, ScheduleOptions, StageSpec};

/// Run configuration read from TOML. Unknown keys are rejected everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub prior: PriorSection,
    pub training: TrainingSection,
    pub io: IoSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d1: usize,
    pub d2: usize,
    pub d_out: usize,
    pub n_rf: usize,
    pub discrepancy: DiscrepancyKind,
    /// Widths of emulator layers before the output layer; empty is shallow.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub concat_input: bool,
    /// Z-score `Y` and `Z` with the simulator output statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Base seed of the frequency draws.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    AppendixDefault,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub preset: Preset,
    pub theta_mean: Option<Vec<f64>>,
    pub theta_var: Option<Vec<f64>>,
    pub sigma_y: Option<f64>,
    pub sigma_z: Option<f64>,
    pub precision: Option<f64>,
    pub sigma_eta: Option<f64>,
    pub sigma_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ratio")]
    pub phase_ratio: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub minibatch_field: Option<usize>,
    pub minibatch_sim: Option<usize>,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    /// Checkpoint period in iterations; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_samples")]
    pub posterior_samples: usize,
    /// Replaces the default four-phase schedule when present.
    pub stages: Option<Vec<StageSpec>>,
}

fn default_lr() -> f64 {
    1e-2
}
fn default_ratio() -> f64 {
    10.0
}
fn default_iterations() -> usize {
    2000
}
fn default_n_mc() -> usize {
    1
}
fn default_samples() -> usize {
    5000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file; relative io paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.io.dataset, &mut cfg.io.output] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of everything except the io paths, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.io = IoSection {
            dataset: PathBuf::new(),
            output: PathBuf::new(),
        };
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (field, v) in [("model.d1", m.d1), ("model.d2", m.d2), ("model.d_out", m.d_out)] {
            if v == 0 {
                return Err(Error::Config {
                    field: field.into(),
                    message: "must be at least 1".into(),
                });
            }
        }
        if m.hidden_dims.contains(&0) {
            return Err(Error::Config {
                field: "model.hidden_dims".into(),
                message: "widths must be at least 1".into(),
            });
        }
        let init = self.initial_values()?;
        Error::check_len("prior.theta_mean", m.d2, init.theta_mean.len())?;
        Error::check_len("prior.theta_var", m.d2, init.theta_var.len())?;
        init.theta_prior()?;
        self.model_spec()?.build()?;
        let t = &self.training;
        if t.posterior_samples == 0 {
            return Err(Error::Config {
                field: "training.posterior_samples".into(),
                message: "must be at least 1".into(),
            });
        }
        if t.n_mc == 0 {
            return Err(Error::Config {
                field: "training.n_mc".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(t.learning_rate > 0.0 && t.phase_ratio > 0.0) {
            return Err(Error::Config {
                field: "training.learning_rate".into(),
                message: "learning rate and phase ratio must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn initial_values(&self) -> Result<InitialValues> {
        let p = &self.prior;
        let base = match p.preset {
            Preset::AppendixDefault => Some(InitialValues::appendix_default(self.model.d2)),
            Preset::Custom => None,
        };
        fn pick<T: Clone>(v: &Option<T>, base: Option<T>, field: &str) -> Result<T> {
            v.clone().or(base).ok_or_else(|| Error::Config {
                field: format!("prior.{field}"),
                message: "required when preset = \"custom\"".into(),
            })
        }
        let b = base.as_ref();
        Ok(InitialValues {
            theta_mean: pick(&p.theta_mean, b.map(|b| b.theta_mean.clone()), "theta_mean")?,
            theta_var: pick(&p.theta_var, b.map(|b| b.theta_var.clone()), "theta_var")?,
            sigma_y: pick(&p.sigma_y, b.map(|b| b.sigma_y), "sigma_y")?,
            sigma_z: pick(&p.sigma_z, b.map(|b| b.sigma_z), "sigma_z")?,
            precision: pick(&p.precision, b.map(|b| b.precision), "precision")?,
            sigma_eta: pick(&p.sigma_eta, b.map(|b| b.sigma_eta), "sigma_eta")?,
            sigma_delta: pick(&p.sigma_delta, b.map(|b| b.sigma_delta), "sigma_delta")?,
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let init = self.initial_values()?;
        let mut widths = m.hidden_dims.clone();
        widths.push(m.d_out);
        let mut config = DeepEmulatorConfig {
            layers: Vec::new(),
            concat_input: m.concat_input,
        };
        for &w in &widths {
            config.layers.push(HiddenLayerSpec {
                hidden_dim: w,
                kernel: init.emulator_kernel(1)?,
            });
        }
        let dims = config.input_dims(m.d1 + m.d2);
        for (layer, dim) in config.layers.iter_mut().zip(dims) {
            layer.kernel = init.emulator_kernel(dim)?;
        }
        let discrepancy_kernel = match m.discrepancy {
            DiscrepancyKind::None => None,
            DiscrepancyKind::Additive => Some(init.discrepancy_kernel(m.d1)?),
            DiscrepancyKind::General => Some(init.discrepancy_kernel(m.d_out + m.d1)?),
        };
        Ok(ModelSpec {
            d1: m.d1,
            d2: m.d2,
            n_rf: m.n_rf,
            emulator: config,
            discrepancy: m.discrepancy,
            discrepancy_kernel,
            noise: init.noise(),
            seed: m.seed,
        })
    }

    pub fn schedule(&self, model: &CalibrationModel, n_field: usize, n_sim: usize) -> Vec<StageSpec> {
        if let Some(stages) = &self.training.stages {
            return stages.clone();
        }
        let t = &self.training;
        schedule_with(
            model,
            n_field,
            n_sim,
            &ScheduleOptions {
                learning_rate: t.learning_rate,
                phase_ratio: t.phase_ratio,
                iterations: t.iterations,
                minibatch_field: t.minibatch_field,
                minibatch_sim: t.minibatch_sim,
                n_mc: t.n_mc,
            },
        )
    }
}
