#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcal::grad::ParamVector;
use vcal::model::{CalibrationDataset, CalibrationModel, DiscrepancyKind, ModelSpec, NoiseParams};
use vcal::rff::{DeepEmulatorConfig, HiddenLayerSpec, KernelParams};
use vcal::svi::{GaussianFactor, Priors};

pub fn toy_dataset(seed: u64, n: usize, big_n: usize) -> CalibrationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r: usize, lo: f64, hi: f64| DMatrix::from_fn(r, 1, |_, _| rng.random_range(lo..hi));
    let x = m(n, 0.0, 1.0);
    let y = m(n, -1.0, 1.0);
    let x_sim = m(big_n, 0.0, 1.0);
    let t = m(big_n, -1.0, 1.0);
    let z = m(big_n, -1.0, 1.0);
    CalibrationDataset::new(x, y, x_sim, t, z).unwrap()
}

pub fn toy_spec(kind: DiscrepancyKind, n_rf: usize) -> ModelSpec {
    ModelSpec {
        d1: 1,
        d2: 1,
        n_rf,
        emulator: DeepEmulatorConfig::shallow(1, KernelParams::new(1.2, vec![0.8, 1.5]).unwrap()),
        discrepancy: kind,
        discrepancy_kernel: match kind {
            DiscrepancyKind::None => None,
            DiscrepancyKind::Additive => Some(KernelParams::new(0.4, vec![2.0]).unwrap()),
            DiscrepancyKind::General => Some(KernelParams::new(0.3, vec![0.7, 1.1]).unwrap()),
        },
        noise: NoiseParams {
            sigma_y: 0.3,
            sigma_z: 0.2,
        },
        seed: 17,
    }
}

/// Two-layer emulator with the input appended to the second layer.
pub fn deep_toy_spec(kind: DiscrepancyKind) -> ModelSpec {
    let mut spec = toy_spec(kind, 4);
    spec.emulator = DeepEmulatorConfig {
        layers: vec![
            HiddenLayerSpec {
                hidden_dim: 2,
                kernel: KernelParams::new(0.9, vec![1.1, 0.6]).unwrap(),
            },
            HiddenLayerSpec {
                hidden_dim: 1,
                kernel: KernelParams::new(1.1, vec![0.5, 0.9, 1.3, 0.7]).unwrap(),
            },
        ],
        concat_input: true,
    };
    spec
}

pub fn toy_priors(model: &CalibrationModel) -> Priors {
    Priors::new(model, GaussianFactor::new(vec![0.1], vec![-0.2]).unwrap()).unwrap()
}

/// Random point in parameter space: means ~ U(-1, 1), log stds ~ U(-1.5, 0),
/// log hyperparameters within 0.5 of their starting values.
pub fn random_params(model: &CalibrationModel, priors: &Priors, seed: u64) -> ParamVector {
    let mut p = ParamVector::pack(model, &priors.as_posterior()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in p.layout.blocks().to_vec() {
        for v in &mut p.values[b.offset..b.offset + b.len] {
            *v = if b.name.ends_with(".mean") {
                rng.random_range(-1.0..1.0)
            } else if b.name.ends_with(".log_std") {
                rng.random_range(-1.5..0.0)
            } else {
                *v + rng.random_range(-0.5..0.5)
            };
        }
    }
    p
}

/// The smallest problem the grid oracle handles exactly: d1 = d2 = 1,
/// two features per layer, two field and two simulation rows.
pub fn tiny_problem(kind: DiscrepancyKind) -> (CalibrationModel, CalibrationDataset, Priors) {
    let mut spec = toy_spec(kind, 2);
    spec.noise = NoiseParams {
        sigma_y: 0.5,
        sigma_z: 0.5,
    };
    let model = spec.build().unwrap();
    let x = DMatrix::from_column_slice(2, 1, &[0.2, 0.7]);
    let y = DMatrix::from_column_slice(2, 1, &[0.4, -0.3]);
    let x_sim = DMatrix::from_column_slice(2, 1, &[0.1, 0.8]);
    let t = DMatrix::from_column_slice(2, 1, &[-0.5, 0.6]);
    let z = DMatrix::from_column_slice(2, 1, &[0.9, -0.2]);
    let data = CalibrationDataset::new(x, y, x_sim, t, z).unwrap();
    let priors = toy_priors(&model);
    (model, data, priors)
}
