//! Fits the warped discrepancy to data that is really emulator plus an
//! additive term, then prints dg/deta across the input range. Values near
//! one mean the warp reduced to an additive correction.

use vcal::bench::{make_illustrative_dataset, Illustrative1DProblem};
use vcal::model::{DiscrepancyKind, NoiseParams};
use vcal::svi::parameter_samples;
use vcal::trainer::{calibrate, schedule_with, ScheduleOptions};

fn main() -> vcal::Result<()> {
    let problem = Illustrative1DProblem {
        n_field: 30,
        n_sim: 60,
        noise_std: 0.0,
        ..Illustrative1DProblem::default()
    };
    let (data, theta_true) = make_illustrative_dataset(&problem, 3)?;
    let noise = NoiseParams {
        sigma_y: 0.05,
        sigma_z: 0.05,
    };
    let model = problem.model(100, DiscrepancyKind::General, noise, 11)?;
    let priors = problem.priors(&model)?;
    let opts = ScheduleOptions {
        n_mc: 2,
        ..ScheduleOptions::default()
    };
    let schedule = schedule_with(&model, data.n_field(), data.n_sim(), &opts);
    let fit = calibrate(&model, &data, &priors, &schedule, 5)?;
    println!(
        "theta: {:.3} +/- {:.3} (true {:.3})",
        fit.posterior.theta.mean[0],
        fit.posterior.theta.std()[0],
        theta_true[0]
    );

    let draws = parameter_samples(&fit.model, &fit.posterior, 400, 9)?;
    println!("{:>6} {:>10} {:>10}", "x", "mean", "sd");
    for k in 0..=10 {
        let x = k as f64 / 10.0;
        let d: Vec<f64> = draws
            .iter()
            .map(|s| {
                let eta = fit.model.emulator_eval(s.emulator_weights(&fit.model), &[x], &s.theta)?;
                let w = s.discrepancy_weights(&fit.model).expect("warped model");
                Ok(fit.model.warp_derivative(w, &[x], &eta)?[(0, 0)])
            })
            .collect::<vcal::Result<_>>()?;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        println!("{x:>6.2} {m:>10.4} {sd:>10.4}");
    }
    Ok(())
}
