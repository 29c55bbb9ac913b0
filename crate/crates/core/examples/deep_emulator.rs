//! A two-layer emulator on a simulator with a sharp transition, compared
//! with a shallow one of the same width.

use nalgebra::DMatrix;
use vcal::bench::lhs;
use vcal::model::{CalibrationDataset, DiscrepancyKind, ModelSpec, NoiseParams};
use vcal::rff::{DeepEmulatorConfig, HiddenLayerSpec, KernelParams};
use vcal::svi::{GaussianFactor, Priors};
use vcal::trainer::{calibrate, schedule_with, ScheduleOptions};

fn simulator(x: f64, t: f64) -> f64 {
    (8.0 * (x + 0.3 * t - 0.5)).tanh() + 0.2 * t
}

fn dataset() -> vcal::Result<CalibrationDataset> {
    let theta = 0.4;
    let design = lhs(200, 2, 1);
    let x_sim = design.columns(0, 1).into_owned();
    let t = design.columns(1, 1).into_owned();
    let z = DMatrix::from_fn(200, 1, |i, _| simulator(x_sim[(i, 0)], t[(i, 0)]));
    let x = DMatrix::from_fn(20, 1, |i, _| (i as f64 + 0.5) / 20.0);
    let y = x.map(|v| simulator(v, theta));
    CalibrationDataset::new(x, y, x_sim, t, z)
}

fn main() -> vcal::Result<()> {
    let data = dataset()?;
    let shallow = DeepEmulatorConfig::shallow(1, KernelParams::isotropic(1.0, 10.0, 2)?);
    let deep = DeepEmulatorConfig {
        layers: vec![
            HiddenLayerSpec {
                hidden_dim: 2,
                kernel: KernelParams::isotropic(1.0, 5.0, 2)?,
            },
            HiddenLayerSpec {
                hidden_dim: 1,
                kernel: KernelParams::isotropic(1.0, 2.0, 4)?,
            },
        ],
        concat_input: true,
    };
    println!("true theta 0.4");
    for (name, emulator) in [("shallow", shallow), ("two-layer", deep)] {
        let model = ModelSpec {
            d1: 1,
            d2: 1,
            n_rf: 100,
            emulator,
            discrepancy: DiscrepancyKind::None,
            discrepancy_kernel: None,
            noise: NoiseParams {
                sigma_y: 0.05,
                sigma_z: 0.05,
            },
            seed: 2,
        }
        .build()?;
        let priors = Priors::new(&model, GaussianFactor::new(vec![0.5], vec![0.25f64.ln()])?)?;
        let opts = ScheduleOptions {
            iterations: 1500,
            minibatch_sim: Some(100),
            n_mc: 2,
            ..ScheduleOptions::default()
        };
        let schedule = schedule_with(&model, data.n_field(), data.n_sim(), &opts);
        let fit = calibrate(&model, &data, &priors, &schedule, 3)?;
        let tail = &fit.trace[fit.trace.len() - 200..];
        let elbo = tail.iter().map(|r| r.elbo).sum::<f64>() / tail.len() as f64;
        println!(
            "{name:>10}: theta {:.3} +/- {:.3}, ELBO over last 200 steps {elbo:.2}",
            fit.posterior.theta.mean[0],
            fit.posterior.theta.std()[0]
        );
    }
    Ok(())
}
