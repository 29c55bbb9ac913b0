mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcal::model::{
    gaussian_loglik, log_lik_field, log_lik_sim, CalibrationModel, DeepEmulator, Discrepancy, DiscrepancyKind,
    NoiseParams,
};
use vcal::rff::{DeepEmulatorConfig, KernelParams, RandomFeatureLayer};
use vcal::Error;

fn random_w(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn noise() -> NoiseParams {
    NoiseParams {
        sigma_y: 0.1,
        sigma_z: 0.1,
    }
}

#[test]
fn emulator_zero_weights_give_zero() {
    let model = toy_spec(DiscrepancyKind::Additive, 4).build().unwrap();
    assert_eq!(model.emulator_eval(&[DMatrix::zeros(4, 1)], &[0.3], &[0.7]).unwrap(), vec![0.0]);
}

#[test]
fn shallow_emulator_is_layer_output() {
    let model = toy_spec(DiscrepancyKind::None, 6).build().unwrap();
    let w = random_w(6, 1, 1);
    assert_eq!(
        model.emulator_eval(std::slice::from_ref(&w), &[0.2], &[-0.4]).unwrap(),
        model.emulator.layers[0].layer_output(&[0.2, -0.4], &w).unwrap()
    );
}

#[test]
fn tiny_emulator_by_hand() {
    // Two frequencies with A = diag(4, 1): omega = [[2*0.5, 1], [2*(-1), 0.25]].
    let kernel = KernelParams::new(2.0, vec![4.0, 1.0]).unwrap();
    let base = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -1.0, 0.25]);
    let layer = RandomFeatureLayer::from_base_freqs(base, kernel.clone()).unwrap();
    let emulator = DeepEmulator {
        config: DeepEmulatorConfig::shallow(1, kernel),
        layers: vec![layer],
    };
    let model = CalibrationModel::new(emulator, Discrepancy::None, noise(), 1, 1).unwrap();
    let w = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
    let (x, t): (f64, f64) = (0.3, -0.8);
    let z1 = 1.0 * x + 1.0 * t;
    let z2 = -2.0 * x + 0.25 * t;
    // sigma * sqrt(2 / n_rf) = 2 * sqrt(1/2)
    let s = 2.0 * 0.5f64.sqrt();
    let want = s * (z1.cos() - 2.0 * z2.cos() + 0.5 * z1.sin() + 3.0 * z2.sin());
    let got = model.emulator_eval(&[w], &[x], &[t]).unwrap()[0];
    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
}

#[test]
fn zero_discrepancy_weights_reduce_to_emulator() {
    for kind in [DiscrepancyKind::Additive, DiscrepancyKind::General] {
        let model = toy_spec(kind, 4).build().unwrap();
        let w = random_w(4, 1, 2);
        let eta = model.emulator_eval(std::slice::from_ref(&w), &[0.4], &[0.1]).unwrap();
        let f = model
            .field_eval(std::slice::from_ref(&w), Some(&DMatrix::zeros(4, 1)), &[0.4], &[0.1])
            .unwrap();
        assert_eq!(eta, f);
    }
}

/// A warp whose eta-frequency column is zero next to an additive model
/// sharing its x-frequencies.
fn warp_and_additive(x_base: &[f64], sigma: f64, a_x: f64) -> (CalibrationModel, CalibrationModel) {
    let k = x_base.len();
    let emu_kernel = KernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
    let emu = RandomFeatureLayer::build(2, 4, emu_kernel.clone(), 3).unwrap();
    let emulator = DeepEmulator {
        config: DeepEmulatorConfig::shallow(1, emu_kernel),
        layers: vec![emu],
    };
    let mut warp_base = DMatrix::zeros(k, 2);
    warp_base.set_column(1, &nalgebra::DVector::from_column_slice(x_base));
    let warp = RandomFeatureLayer::from_base_freqs(warp_base, KernelParams::new(sigma, vec![1.7, a_x]).unwrap()).unwrap();
    let add = RandomFeatureLayer::from_base_freqs(
        DMatrix::from_column_slice(k, 1, x_base),
        KernelParams::new(sigma, vec![a_x]).unwrap(),
    )
    .unwrap();
    (
        CalibrationModel::new(emulator.clone(), Discrepancy::General(warp), noise(), 1, 1).unwrap(),
        CalibrationModel::new(emulator, Discrepancy::Additive(add), noise(), 1, 1).unwrap(),
    )
}

#[test]
fn warp_without_eta_frequencies_is_additive() {
    let (general, additive) = warp_and_additive(&[0.3, -1.2, 2.0], 0.6, 3.0);
    let w_eta = random_w(4, 1, 7);
    let w_d = random_w(6, 1, 8);
    for (x, t) in [(0.1, 0.5), (0.9, -1.0), (0.45, 2.0)] {
        let a = general.field_eval(std::slice::from_ref(&w_eta), Some(&w_d), &[x], &[t]).unwrap();
        let b = additive.field_eval(std::slice::from_ref(&w_eta), Some(&w_d), &[x], &[t]).unwrap();
        assert_eq!(a, b);
    }
    let jac = general.warp_derivative(&w_d, &[0.3], &[1.5]).unwrap();
    assert_eq!(jac, DMatrix::identity(1, 1));
}

fn two_output_warp() -> CalibrationModel {
    let mut spec = toy_spec(DiscrepancyKind::General, 8);
    spec.emulator = DeepEmulatorConfig::shallow(2, KernelParams::new(1.0, vec![1.0, 0.5]).unwrap());
    spec.discrepancy_kernel = Some(KernelParams::new(0.7, vec![0.9, 1.4, 2.0]).unwrap());
    spec.build().unwrap()
}

#[test]
fn warp_derivative_identity_at_zero_weights() {
    let model = two_output_warp();
    let jac = model.warp_derivative(&DMatrix::zeros(8, 2), &[0.2], &[0.4, -0.3]).unwrap();
    assert_eq!(jac, DMatrix::identity(2, 2));
}

#[test]
fn warp_derivative_matches_finite_differences() {
    let model = two_output_warp();
    let layer = model.discrepancy.layer().unwrap();
    let w_g = random_w(8, 2, 4);
    let g = |eta: &[f64], x: f64| -> Vec<f64> {
        let mut u = eta.to_vec();
        u.push(x);
        let out = layer.layer_output(&u, &w_g).unwrap();
        eta.iter().zip(out).map(|(a, b)| a + b).collect()
    };
    let h = 1e-6;
    for (eta, x) in [([0.4, -0.3], 0.2), ([1.5, 0.8], 0.7), ([-2.0, 0.1], 0.95)] {
        let jac = model.warp_derivative(&w_g, &[x], &eta).unwrap();
        for b in 0..2 {
            let mut up = eta;
            let mut dn = eta;
            up[b] += h;
            dn[b] -= h;
            let (gu, gd) = (g(&up, x), g(&dn, x));
            for a in 0..2 {
                let fd = (gu[a] - gd[a]) / (2.0 * h);
                let rel = (fd - jac[(a, b)]).abs() / jac[(a, b)].abs().max(1e-3);
                assert!(rel < 1e-5, "({a},{b}): fd {fd} vs {}", jac[(a, b)]);
            }
        }
    }
}

#[test]
fn warp_derivative_requires_general_mode() {
    let model = toy_spec(DiscrepancyKind::Additive, 4).build().unwrap();
    assert!(matches!(
        model.warp_derivative(&DMatrix::zeros(4, 1), &[0.0], &[0.0]),
        Err(Error::Mode { .. })
    ));
}

#[test]
fn layer_input_widths_checked() {
    let emu_kernel = KernelParams::new(1.0, vec![1.0, 1.0]).unwrap();
    let emulator = DeepEmulator {
        config: DeepEmulatorConfig::shallow(1, emu_kernel.clone()),
        layers: vec![RandomFeatureLayer::build(2, 4, emu_kernel, 0).unwrap()],
    };
    let wrong = RandomFeatureLayer::build(1, 4, KernelParams::new(1.0, vec![1.0]).unwrap(), 1).unwrap();
    assert!(CalibrationModel::new(emulator, Discrepancy::General(wrong), noise(), 1, 1).is_err());
}

#[test]
fn likelihood_examples() {
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((log_lik_field(&[0.0], &[0.0], 1.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-15);
    let s = 0.3;
    let v = log_lik_field(&[1.0 + s], &[1.0], s).unwrap();
    assert!((v - (-c - s.ln() - 0.5)).abs() < 1e-14);
    assert!((log_lik_sim(&[2.0, -1.0], &[2.0, -1.0], 1.0).unwrap() + 2.0 * c).abs() < 1e-14);
    assert!(log_lik_sim(&[], &[], 1.0).is_err());
    assert!(log_lik_field(&[0.0], &[0.0], 0.0).is_err());
}

proptest! {
    #[test]
    fn likelihood_peaks_at_observation(
        y in prop::collection::vec(-10.0f64..10.0, 1..4),
        shift in prop::collection::vec(-1.0f64..1.0, 4),
        sigma in 0.01f64..5.0,
    ) {
        let best = gaussian_loglik(&y, &y, sigma).unwrap();
        let f: Vec<f64> = y.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert!(gaussian_loglik(&y, &f, sigma).unwrap() <= best);
    }

    #[test]
    fn likelihood_scale_identity(r in -5.0f64..5.0, sigma in 0.05f64..5.0) {
        let scaled = log_lik_sim(&[r], &[0.0], sigma).unwrap();
        let unit = log_lik_sim(&[r / sigma], &[0.0], 1.0).unwrap() - sigma.ln();
        prop_assert!((scaled - unit).abs() < 1e-10);
    }

    #[test]
    fn evaluation_is_pure(x in 0.0f64..1.0, t in -2.0f64..2.0, seed in 0u64..1000) {
        let model = toy_spec(DiscrepancyKind::General, 6).build().unwrap();
        let w = random_w(6, 1, seed);
        let wd = random_w(6, 1, seed + 1);
        let a = model.field_eval(std::slice::from_ref(&w), Some(&wd), &[x], &[t]).unwrap();
        let b = model.field_eval(std::slice::from_ref(&w), Some(&wd), &[x], &[t]).unwrap();
        prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn warp_special_case_matches_additive(
        base in prop::collection::vec(-2.0f64..2.0, 3),
        sigma in 0.1f64..2.0,
        a_x in 0.1f64..5.0,
        x in 0.0f64..1.0,
        t in -2.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let (general, additive) = warp_and_additive(&base, sigma, a_x);
        let w_eta = random_w(4, 1, seed);
        let w_d = random_w(6, 1, seed + 1);
        let a = general.field_eval(std::slice::from_ref(&w_eta), Some(&w_d), &[x], &[t]).unwrap();
        let b = additive.field_eval(std::slice::from_ref(&w_eta), Some(&w_d), &[x], &[t]).unwrap();
        prop_assert!((a[0] - b[0]).abs() <= 1e-15 * a[0].abs().max(1.0));
    }
}
