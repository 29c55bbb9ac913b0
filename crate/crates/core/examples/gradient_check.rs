//! Compares the analytic ELBO gradient against central finite differences,
//! block by block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcal::bench::{make_illustrative_dataset, Illustrative1DProblem};
use vcal::grad::{elbo_value_grad, finite_diff_check, ParamVector};
use vcal::model::{DiscrepancyKind, NoiseParams};
use vcal::svi::EpsBank;
use vcal::trainer::init_from_priors;

fn main() -> vcal::Result<()> {
    let problem = Illustrative1DProblem::default();
    let (data, _) = make_illustrative_dataset(&problem, 1)?;
    let noise = NoiseParams {
        sigma_y: 0.1,
        sigma_z: 0.1,
    };
    let model = problem.model(6, DiscrepancyKind::General, noise, 3)?;
    let priors = problem.priors(&model)?;
    let mut params = init_from_priors(&model, &priors)?;
    for (i, v) in params.values.iter_mut().enumerate() {
        *v += 0.1 * ((i as f64) * 0.7).sin();
    }
    let (_, q) = params.unpack(&model)?;
    let eps = EpsBank::draw(&q, 3, &mut ChaCha8Rng::seed_from_u64(0));
    let (field, sim) = ([0, 1, 2, 3], [0, 1, 2, 3, 4, 5, 6]);

    let g = elbo_value_grad(&model, &data, &params, &priors, 3, &field, &sim, &eps)?;
    let f = |v: &[f64]| {
        let p = ParamVector {
            values: v.to_vec(),
            layout: params.layout.clone(),
        };
        elbo_value_grad(&model, &data, &p, &priors, 3, &field, &sim, &eps).map(|r| r.value)
    };
    let errors = finite_diff_check(f, &params.values, &g.grad, 1e-5)?;

    println!("ELBO {:.6}", g.value);
    println!("{:<22} {:>5} {:>14}", "block", "len", "worst rel err");
    for b in params.layout.blocks() {
        let worst = errors[b.offset..b.offset + b.len].iter().cloned().fold(0.0, f64::max);
        println!("{:<22} {:>5} {:>14.2e}", b.name, b.len, worst);
    }
    Ok(())
}
