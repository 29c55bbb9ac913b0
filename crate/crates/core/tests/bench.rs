use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vcal::bench::{
    analytic_theta_posterior, borehole_delta, borehole_eta, lhs, lhs_with, make_borehole_dataset,
    make_illustrative_dataset, mse_metric, uniform_samples, BoreholeProblem, Illustrative1DProblem, ThetaGrid,
};
use vcal::model::{CalibrationDataset, CalibrationModel, DeepEmulator, Discrepancy, DiscrepancyKind, NoiseParams};
use vcal::rff::{DeepEmulatorConfig, KernelParams, RandomFeatureLayer};
use vcal::svi::GaussianFactor;
use vcal::Error;

/// Borehole flow written straight from the physical formula, with the
/// rescaling inlined rather than shared.
fn borehole_direct(x: &[f64], t: &[f64]) -> f64 {
    let tu = 63070.0 + 52530.0 * x[0];
    let hu = 990.0 + 120.0 * x[1];
    let hl = 700.0 + 120.0 * x[2];
    let l = 1120.0 + 560.0 * x[3];
    let kw = 9855.0 + 2190.0 * x[4];
    let rw = 0.05 + 0.1 * t[0];
    let r = 100.0 + 49900.0 * t[1];
    let tl = 63.1 + 52.9 * t[2];
    let lr = r.ln() - rw.ln();
    let num = 2.0 * std::f64::consts::PI * tu * (hu - hl);
    num / (lr * (1.0 + (2.0 * l * tu) / (lr * rw.powi(2) * kw) + tu / tl))
}

#[test]
fn borehole_pinned_value() {
    // 50-digit evaluation at the centre of the cube.
    let v = borehole_eta(&[0.5; 5], &[0.5; 3]).unwrap();
    assert!((v - 70.872_912_636_818_957).abs() < 1e-12, "{v}");
}

#[test]
fn borehole_dual_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let a = borehole_eta(&x, &t).unwrap();
        let b = borehole_direct(&x, &t);
        assert!(a > 0.0);
        worst = worst.max((a - b).abs() / b.abs());
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn borehole_increases_with_upper_head() {
    let t = [0.3, 0.6, 0.2];
    let mut prev = 0.0;
    for k in 0..=10 {
        let x = [0.4, k as f64 / 10.0, 0.5, 0.7, 0.1];
        let v = borehole_eta(&x, &t).unwrap();
        assert!(v > prev);
        prev = v;
    }
}

#[test]
fn borehole_delta_examples() {
    assert_eq!(borehole_delta(&[0.0, 0.0]).unwrap(), 0.0);
    assert!((borehole_delta(&[1.0, 1.0, 0.3]).unwrap() - 28.0 / 60.0).abs() < 1e-15);
    assert_eq!(borehole_delta(&[1.0, 0.0]).unwrap(), 2.0);
}

#[test]
fn borehole_domain_errors() {
    assert!(matches!(
        borehole_eta(&[0.5, 1.2, 0.5, 0.5, 0.5], &[0.5; 3]),
        Err(Error::Domain { ref name, .. }) if name == "x_2"
    ));
    assert!(matches!(borehole_eta(&[0.5; 5], &[0.5, 0.5, -0.1]), Err(Error::Domain { .. })));
    assert!(matches!(borehole_delta(&[-0.5, 0.0]), Err(Error::Domain { .. })));
    assert!(borehole_eta(&[0.5; 4], &[0.5; 3]).is_err());
}

#[test]
fn lhs_single_point() {
    let m = lhs(1, 4, 3);
    assert_eq!(m.shape(), (1, 4));
    assert!(m.iter().all(|v| (0.0..1.0).contains(v)));
}

proptest! {
    #[test]
    fn lhs_is_stratified(n in 1usize..60, d in 1usize..5, seed in any::<u64>()) {
        let m = lhs(n, d, seed);
        for c in 0..d {
            let mut col: Vec<f64> = m.column(c).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            for (k, v) in col.iter().enumerate() {
                prop_assert!(*v >= k as f64 / n as f64 && *v < (k + 1) as f64 / n as f64);
            }
        }
        prop_assert_eq!(m, lhs(n, d, seed));
    }

    #[test]
    fn mse_of_single_sample_is_plain_error(
        ys in prop::collection::vec(-3.0f64..3.0, 1..6),
        theta in -2.0f64..2.0,
    ) {
        let n = ys.len();
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = DMatrix::from_column_slice(n, 1, &ys);
        let eta = |x: &[f64], t: &[f64]| Ok(vec![x[0] * t[0]]);
        let got = mse_metric(eta, &x, &y, &DMatrix::from_element(1, 1, theta)).unwrap();
        let want: f64 = ys.iter().enumerate().map(|(i, v)| (v - i as f64 * theta).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn mse_examples() {
    let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
    let y = x.map(|v| 2.0 * v);
    let eta = |x: &[f64], t: &[f64]| Ok(vec![x[0] * t[0]]);
    let truth = DMatrix::from_element(4, 1, 2.0);
    assert_eq!(mse_metric(eta, &x, &y, &truth).unwrap(), 0.0);
    let two = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
    // Each sample misses by |x| per row: (0 + 1 + 4) / 3 for both.
    assert!((mse_metric(eta, &x, &y, &two).unwrap() - 5.0 / 3.0).abs() < 1e-15);
    assert!(mse_metric(eta, &x, &y, &DMatrix::zeros(0, 1)).is_err());
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

#[test]
fn noiseless_borehole_residual_is_discrepancy() {
    let problem = BoreholeProblem {
        noise_std: 0.0,
        n_field: 50,
        n_sim: 80,
        seed: 3,
        ..BoreholeProblem::default()
    };
    let d = make_borehole_dataset(&problem).unwrap();
    assert_eq!((d.x.shape(), d.x_sim.shape(), d.t.shape()), ((50, 5), (80, 5), (80, 3)));
    for i in 0..50 {
        let x = row(&d.x, i);
        let r = d.y[(i, 0)] - borehole_eta(&x, &problem.theta_true).unwrap();
        assert!((r - borehole_delta(&x).unwrap()).abs() < 1e-12);
    }
    for j in 0..80 {
        assert!(d.z[(j, 0)] > 0.0);
        let want = borehole_direct(&row(&d.x_sim, j), &row(&d.t, j));
        assert!((d.z[(j, 0)] - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn borehole_noise_variance_in_band() {
    let problem = BoreholeProblem {
        n_field: 2000,
        n_sim: 10,
        seed: 8,
        ..BoreholeProblem::default()
    };
    let d = make_borehole_dataset(&problem).unwrap();
    let res: Vec<f64> = (0..2000)
        .map(|i| {
            let x = row(&d.x, i);
            d.y[(i, 0)] - borehole_eta(&x, &problem.theta_true).unwrap() - borehole_delta(&x).unwrap()
        })
        .collect();
    let m = res.iter().sum::<f64>() / 2000.0;
    let var = res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 1999.0;
    assert!((2e-3f64.powi(2)..=8e-3f64.powi(2)).contains(&var), "{var}");
    assert_eq!(make_borehole_dataset(&problem).unwrap(), d);
}

#[test]
fn illustrative_shapes_and_determinism() {
    let p = Illustrative1DProblem::default();
    let (d, theta) = make_illustrative_dataset(&p, 5).unwrap();
    assert_eq!((d.x.shape(), d.y.shape(), d.z.shape(), d.t.shape()), ((4, 1), (4, 1), (7, 1), (7, 1)));
    assert_eq!(theta.len(), 1);
    assert_eq!(d.x.as_slice(), [0.125, 0.375, 0.625, 0.875]);
    let (again, theta2) = make_illustrative_dataset(&p, 5).unwrap();
    assert_eq!((again, theta2), (d.clone(), theta));
    assert_ne!(make_illustrative_dataset(&p, 6).unwrap().0, d);
    assert!(make_illustrative_dataset(&Illustrative1DProblem { a_eta: 0.0, ..p }, 5).is_err());
}

#[test]
fn illustrative_without_discrepancy_lies_on_simulator_draw() {
    let p = Illustrative1DProblem {
        sigma_delta: 0.0,
        noise_std: 0.0,
        ..Illustrative1DProblem::default()
    };
    let seed = 12;
    let (d, theta) = make_illustrative_dataset(&p, seed).unwrap();

    // Redo the joint prior draw of (Z, eta(x_i, theta_true)) by hand.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _: f64 = rng.sample(StandardNormal);
    let design = lhs_with(&mut rng, 7, 2);
    let mut pts: Vec<[f64; 2]> = design.row_iter().map(|r| [r[0], -2.5 + 5.0 * r[1]]).collect();
    pts.extend(d.x.iter().map(|&x| [x, theta[0]]));
    let k = DMatrix::from_fn(11, 11, |i, j| {
        let dx = pts[i][0] - pts[j][0];
        let dt = pts[i][1] - pts[j][1];
        (-0.25 * (dx * dx + dt * dt)).exp() + if i == j { 1e-10 } else { 0.0 }
    });
    let l = k.cholesky().unwrap().l();
    let e = DVector::from_fn(11, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = l * e;
    for i in 0..4 {
        assert!((d.y[(i, 0)] - f[7 + i]).abs() < 1e-12);
    }
    for j in 0..7 {
        assert!((d.z[(j, 0)] - f[j]).abs() < 1e-12);
        assert_eq!(d.t[(j, 0)], pts[j][1]);
    }
}

fn small_model(kind: DiscrepancyKind, seed: u64) -> CalibrationModel {
    Illustrative1DProblem::default()
        .model(
            8,
            kind,
            NoiseParams {
                sigma_y: 0.1,
                sigma_z: 0.05,
            },
            seed,
        )
        .unwrap()
}

/// log N(0, cov) of the stacked `[y; z]` built from explicit features.
fn dense_log_lik(model: &CalibrationModel, d: &CalibrationDataset, theta: f64) -> f64 {
    let eta = &model.emulator.layers[0];
    let (n, big_n) = (d.n_field(), d.n_sim());
    let rows = n + big_n;
    let mut phi = DMatrix::zeros(rows, eta.n_rf());
    for i in 0..n {
        let f = eta.features(&[d.x[(i, 0)], theta]).unwrap().values;
        phi.row_mut(i).copy_from_slice(&f);
    }
    for j in 0..big_n {
        let f = eta.features(&[d.x_sim[(j, 0)], d.t[(j, 0)]]).unwrap().values;
        phi.row_mut(n + j).copy_from_slice(&f);
    }
    let mut cov = &phi * phi.transpose();
    if let Some(layer) = model.discrepancy.layer() {
        let mut psi = DMatrix::zeros(n, layer.n_rf());
        for i in 0..n {
            psi.row_mut(i).copy_from_slice(&layer.features(&[d.x[(i, 0)]]).unwrap().values);
        }
        let block = &psi * psi.transpose();
        let mut top = cov.view_mut((0, 0), (n, n));
        top += &block;
    }
    for i in 0..rows {
        cov[(i, i)] += if i < n { model.noise.sigma_y.powi(2) } else { model.noise.sigma_z.powi(2) };
    }
    let v = DVector::from_iterator(rows, d.y.iter().chain(d.z.iter()).copied());
    let lu = cov.clone().lu();
    let sol = lu.solve(&v).unwrap();
    let log_det = lu.determinant().ln();
    -0.5 * (v.dot(&sol) + log_det + rows as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn oracle_matches_dense_covariance() {
    let p = Illustrative1DProblem::default();
    for (kind, seed) in [(DiscrepancyKind::Additive, 1), (DiscrepancyKind::None, 2)] {
        let (d, _) = make_illustrative_dataset(&p, seed).unwrap();
        let model = small_model(kind, seed);
        let grid = ThetaGrid::around_prior(&p.theta_prior(), 9, 2.5).unwrap();
        let post = analytic_theta_posterior(&model, &d, &grid, &p.theta_prior()).unwrap();
        for (j, ll) in post.log_lik.iter().enumerate() {
            let want = dense_log_lik(&model, &d, grid.point(j)[0]);
            assert!((ll - want).abs() <= 1e-8 * want.abs(), "{ll} vs {want}");
        }
    }
}

#[test]
fn oracle_density_normalized() {
    let p = Illustrative1DProblem::default();
    let (d, _) = make_illustrative_dataset(&p, 4).unwrap();
    let model = small_model(DiscrepancyKind::Additive, 4);
    let prior = p.theta_prior();
    let grid = ThetaGrid::default_for(&prior).unwrap();
    assert_eq!(grid.len(), 401);
    assert!((grid.axes()[0][0] + 4.0).abs() < 1e-12 && (grid.axes()[0][400] - 4.0).abs() < 1e-12);
    let post = analytic_theta_posterior(&model, &d, &grid, &prior).unwrap();
    assert!(post.density.iter().all(|v| *v >= 0.0));
    let total: f64 = post.density.iter().sum::<f64>() * grid.cell_volume();
    assert!((total - 1.0).abs() < 1e-10);
    assert!((post.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn oracle_returns_prior_when_theta_is_invisible() {
    // Emulator frequencies with a zero theta column make the likelihood flat in theta.
    let kernel = KernelParams::new(1.0, vec![0.5, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = DMatrix::from_fn(4, 2, |_, c| if c == 1 { 0.0 } else { rng.sample(StandardNormal) });
    let emulator = DeepEmulator {
        config: DeepEmulatorConfig::shallow(1, kernel.clone()),
        layers: vec![RandomFeatureLayer::from_base_freqs(base, kernel).unwrap()],
    };
    let noise = NoiseParams {
        sigma_y: 0.2,
        sigma_z: 0.2,
    };
    let model = CalibrationModel::new(emulator, Discrepancy::None, noise, 1, 1).unwrap();
    let (d, _) = make_illustrative_dataset(&Illustrative1DProblem::default(), 2).unwrap();
    let prior = GaussianFactor::new(vec![0.3], vec![(0.7f64).ln()]).unwrap();
    let grid = ThetaGrid::around_prior(&prior, 201, 4.0).unwrap();
    let post = analytic_theta_posterior(&model, &d, &grid, &prior).unwrap();
    let pdf: Vec<f64> = (0..grid.len())
        .map(|j| (-0.5 * ((grid.point(j)[0] - 0.3) / 0.7).powi(2)).exp())
        .collect();
    let norm = pdf.iter().sum::<f64>() * grid.cell_volume();
    for (a, b) in post.density.iter().zip(&pdf) {
        assert!((a - b / norm).abs() < 1e-10 * (b / norm).max(1e-3));
    }
}

#[test]
fn oracle_guards() {
    let p = Illustrative1DProblem::default();
    let (d, _) = make_illustrative_dataset(&Illustrative1DProblem { n_sim: 250, ..p.clone() }, 0).unwrap();
    let model = small_model(DiscrepancyKind::None, 0);
    let grid = ThetaGrid::default_for(&p.theta_prior()).unwrap();
    assert!(matches!(
        analytic_theta_posterior(&model, &d, &grid, &p.theta_prior()),
        Err(Error::OracleGuard(_))
    ));
    let (d, _) = make_illustrative_dataset(&p, 0).unwrap();
    let huge = ThetaGrid::around_prior(&p.theta_prior(), 20_001, 4.0).unwrap();
    assert!(matches!(
        analytic_theta_posterior(&model, &d, &huge, &p.theta_prior()),
        Err(Error::OracleGuard(_))
    ));
    let general = small_model(DiscrepancyKind::General, 0);
    assert!(matches!(
        analytic_theta_posterior(&general, &d, &grid, &p.theta_prior()),
        Err(Error::OracleGuard(_))
    ));
}

#[test]
fn grid_sampling_tracks_density() {
    let p = Illustrative1DProblem::default();
    let (d, _) = make_illustrative_dataset(&p, 9).unwrap();
    let model = small_model(DiscrepancyKind::Additive, 9);
    let grid = ThetaGrid::default_for(&p.theta_prior()).unwrap();
    let post = analytic_theta_posterior(&model, &d, &grid, &p.theta_prior()).unwrap();
    let s = post.sample(20_000, 1);
    assert_eq!(s, post.sample(20_000, 1));
    let m = s.iter().sum::<f64>() / 20_000.0;
    assert!((m - post.mean()[0]).abs() < 0.05 * post.std()[0].max(0.1));
    let u = uniform_samples(100, 1, 0).map(|v| v + 100.0);
    assert!((post.tv_distance(&u).unwrap() - 1.0).abs() < 1e-12);
}
