//! Borehole calibration on a reduced dataset, scored with the true simulator.
//!
//! Usage: `cargo run --release --example borehole [n_field] [n_sim] [iterations]`

use nalgebra::DMatrix;
use vcal::bench::{borehole_eta, make_borehole_dataset, mse_metric, uniform_samples, BoreholeProblem};
use vcal::model::{DiscrepancyKind, ModelSpec};
use vcal::rff::DeepEmulatorConfig;
use vcal::svi::{posterior_samples, Priors};
use vcal::trainer::{calibrate, schedule_with, InitialValues, ScheduleOptions};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> vcal::Result<()> {
    let problem = BoreholeProblem {
        n_field: arg(1, 500),
        n_sim: arg(2, 5000),
        ..BoreholeProblem::default()
    };
    let raw = make_borehole_dataset(&problem)?;
    let (data, scaling) = raw.standardized();
    println!("Z mean {:.3}, sd {:.3}", scaling.mean[0], scaling.std[0]);

    let init = InitialValues::appendix_default(3);
    let model = ModelSpec {
        d1: 5,
        d2: 3,
        n_rf: 300,
        emulator: DeepEmulatorConfig::shallow(1, init.emulator_kernel(8)?),
        discrepancy: DiscrepancyKind::Additive,
        discrepancy_kernel: Some(init.discrepancy_kernel(5)?),
        noise: init.noise(),
        seed: 1,
    }
    .build()?;
    let priors = Priors::new(&model, init.theta_prior()?)?;
    let opts = ScheduleOptions {
        iterations: arg(3, 1000),
        ..ScheduleOptions::default()
    };
    let schedule = schedule_with(&model, data.n_field(), data.n_sim(), &opts);
    let started = std::time::Instant::now();
    let fit = calibrate(&model, &data, &priors, &schedule, 7)?;
    println!("trained {} iterations in {:.1?}", fit.state.iteration, started.elapsed());

    let q = &fit.posterior.theta;
    for (i, ((m, s), t)) in q.mean.iter().zip(q.std()).zip(&problem.theta_true).enumerate() {
        println!("theta_{}: {m:.3} +/- {s:.3} (true {t})", i + 1);
    }
    println!(
        "sigma_y {:.2e}, sigma_z {:.2e} (standardized units)",
        fit.model.noise.sigma_y, fit.model.noise.sigma_z
    );

    let eta = |x: &[f64], t: &[f64]| Ok(vec![borehole_eta(x, t)?]);
    let draws = posterior_samples(&fit.posterior, 300, 1)?.map(|v| v.clamp(0.0, 1.0));
    let truth = DMatrix::from_row_slice(1, 3, &problem.theta_true);
    println!("mse per observation");
    println!("  q(theta)         {:.4}", mse_metric(eta, &raw.x, &raw.y, &draws)?);
    println!("  uniform theta    {:.4}", mse_metric(eta, &raw.x, &raw.y, &uniform_samples(300, 3, 2))?);
    println!("  true theta       {:.4}", mse_metric(eta, &raw.x, &raw.y, &truth)?);
    Ok(())
}
