//! One-dimensional calibration against the exact grid posterior.
//!
//! Usage: `cargo run --release --example illustrative [seed]`

use vcal::bench::{analytic_theta_posterior, make_illustrative_dataset, Illustrative1DProblem, ThetaGrid};
use vcal::model::{DiscrepancyKind, NoiseParams};
use vcal::trainer::{calibrate, StageSpec};

fn main() -> vcal::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let problem = Illustrative1DProblem::default();
    let (data, theta_true) = make_illustrative_dataset(&problem, seed)?;
    let noise = NoiseParams {
        sigma_y: 0.1,
        sigma_z: 0.1,
    };
    let model = problem.model(50, DiscrepancyKind::Additive, noise, seed + 100)?;
    let priors = problem.priors(&model)?;

    // Kernel and noise stay fixed, so the grid posterior is the exact target.
    let blocks = ["eta0.w.mean", "eta0.w.log_std", "delta.w.mean", "delta.w.log_std", "theta.mean", "theta.log_std"];
    let stage = |name: &str, n: usize, lr: f64| StageSpec {
        name: name.into(),
        trainable: blocks[..n].iter().map(|s| s.to_string()).collect(),
        learning_rate: lr,
        iterations: 2000,
        minibatch_field: data.n_field(),
        minibatch_sim: data.n_sim(),
        n_mc: 5,
    };
    let schedule = [stage("emulator", 2, 1e-2), stage("joint", 6, 1e-2), stage("refine", 6, 1e-3)];
    let fit = calibrate(&model, &data, &priors, &schedule, seed)?;

    let grid = ThetaGrid::default_for(&priors.theta)?;
    let exact = analytic_theta_posterior(&model, &data, &grid, &priors.theta)?;
    let q = &fit.posterior.theta;
    println!("true theta        {:.4}", theta_true[0]);
    println!("variational q     {:.4} +/- {:.4}", q.mean[0], q.std()[0]);
    println!("grid posterior    {:.4} +/- {:.4}", exact.mean()[0], exact.std()[0]);
    println!("log p(Y, Z)       {:.4}", exact.log_marginal);
    let last = fit.trace.last().expect("non-empty schedule");
    println!("final ELBO        {:.4} (KL {:.4})", last.elbo, last.kl);
    Ok(())
}
