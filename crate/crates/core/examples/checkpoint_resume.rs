//! Stops a run part-way, writes a checkpoint, reloads it and finishes. The
//! result matches an uninterrupted run bit for bit.

use vcal::bench::{make_illustrative_dataset, Illustrative1DProblem};
use vcal::cli::Checkpoint;
use vcal::model::{DiscrepancyKind, NoiseParams};
use vcal::trainer::{calibrate, init_from_priors, resume, schedule_with, ScheduleOptions, TrainState};

fn main() -> vcal::Result<()> {
    let problem = Illustrative1DProblem::default();
    let (data, _) = make_illustrative_dataset(&problem, 2)?;
    let noise = NoiseParams {
        sigma_y: 0.1,
        sigma_z: 0.1,
    };
    let model = problem.model(20, DiscrepancyKind::Additive, noise, 4)?;
    let spec = vcal::model::ModelSpec {
        d1: 1,
        d2: 1,
        n_rf: 20,
        emulator: model.emulator.config.clone(),
        discrepancy: DiscrepancyKind::Additive,
        discrepancy_kernel: Some(problem.discrepancy_kernel()?),
        noise,
        seed: 4,
    };
    let priors = problem.priors(&model)?;
    let opts = ScheduleOptions {
        iterations: 100,
        ..ScheduleOptions::default()
    };
    let schedule = schedule_with(&model, data.n_field(), data.n_sim(), &opts);
    let full = calibrate(&model, &data, &priors, &schedule, 1)?;

    let stop_at = 150;
    let mut snapshot = None;
    let start = TrainState::new(init_from_priors(&model, &priors)?, 1);
    let stopped = resume(&model, &data, &priors, &schedule, start, &mut |s: &TrainState| {
        if s.iteration == stop_at {
            snapshot = Some(s.clone());
            return Err(vcal::Error::Validation("interrupted".into()));
        }
        Ok(())
    });
    println!("first run: {}", stopped.err().map(|e| e.to_string()).unwrap_or_default());

    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("checkpoint.json");
    let ck = Checkpoint::new("example".into(), spec, priors.theta.clone(), None, schedule.clone(), snapshot.unwrap());
    ck.save(&path)?;
    println!("saved {} bytes at iteration {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), stop_at);

    let loaded = Checkpoint::load(&path)?;
    let finished = resume(&loaded.base_model()?, &data, &priors, &loaded.schedule, loaded.state, &mut |_| Ok(()))?;
    println!("resumed to iteration {}", finished.state.iteration);
    println!("identical to uninterrupted run: {}", finished.state.params == full.state.params);
    Ok(())
}
