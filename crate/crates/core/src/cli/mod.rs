//! Command-line surface: `generate`, `calibrate` and `evaluate`, plus the
//! configuration, CSV and checkpoint formats they share.

mod checkpoint;
mod config;
mod io;

pub use checkpoint::{Checkpoint, RngDescriptor, CHECKPOINT_VERSION};
pub use config::{IoSection, ModelSection, Preset, PriorSection, RunConfig, TrainingSection};
pub use io::{
    load_dataset, numbered, read_table, read_theta_table, save_dataset, write_atomic, write_table, write_theta_table,
    Dims, Table, FIELD_FILE, SIM_FILE, TRUTH_FILE,
};

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::bench::{
    analytic_theta_posterior, borehole_eta, make_borehole_dataset, make_illustrative_dataset, mse_metric,
    BoreholeProblem, Illustrative1DProblem, ThetaGrid,
};
use crate::error::{Error, Result};
use crate::svi::{posterior_samples, Priors};
use crate::trainer::{self, init_from_priors, TraceRecord, TrainState};

pub const POSTERIOR_FILE: &str = "posterior_samples.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ORACLE_FILE: &str = "oracle_density.csv";

#[derive(Debug, Parser)]
#[command(name = "vcal", version, about = "Variational calibration of computer models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a benchmark dataset and its true parameter.
    Generate(GenerateArgs),
    /// Fit the variational posterior described by a config file.
    Calibrate(CalibrateArgs),
    /// Score posterior draws against a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProblemName {
    Borehole,
    Illustrative,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub problem: ProblemName,
    /// Field observations.
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulator runs.
    #[arg(long = "N")]
    pub n_sim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observation noise standard deviation.
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimulatorName {
    Borehole,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// CSV of theta draws (`theta_1..theta_d`).
    #[arg(long)]
    pub posterior: PathBuf,
    /// Directory holding field.csv and sim.csv.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Compare against the grid posterior of the checkpoint's model.
    #[arg(long)]
    pub oracle: bool,
    /// Score with a closed-form simulator.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub simulator: Option<SimulatorName>,
    /// Score with the trained emulator at its posterior-mean weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics file to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let (data, truth) = match args.problem {
        ProblemName::Borehole => {
            let mut p = BoreholeProblem {
                seed: args.seed,
                ..Default::default()
            };
            p.n_field = args.n.unwrap_or(p.n_field);
            p.n_sim = args.n_sim.unwrap_or(p.n_sim);
            p.noise_std = args.noise_std.unwrap_or(p.noise_std);
            let truth = p.theta_true.clone();
            (make_borehole_dataset(&p)?, truth)
        }
        ProblemName::Illustrative => {
            let mut p = Illustrative1DProblem::default();
            p.n_field = args.n.unwrap_or(p.n_field);
            p.n_sim = args.n_sim.unwrap_or(p.n_sim);
            p.noise_std = args.noise_std.unwrap_or(p.noise_std);
            make_illustrative_dataset(&p, args.seed)?
        }
    };
    ensure_dir(&args.out)?;
    save_dataset(&args.out, &data)?;
    let truth = DMatrix::from_row_slice(1, truth.len(), &truth);
    write_theta_table(&args.out.join(TRUTH_FILE), &truth)?;
    println!(
        "wrote {} field rows and {} simulator rows to {}",
        data.n_field(),
        data.n_sim(),
        args.out.display()
    );
    Ok(())
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["iteration", "stage", "elbo", "kl", "wall_ms"]).map_err(fmt)?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.stage.clone(),
            r.elbo.to_string(),
            r.kl.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(fmt)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let hash = cfg.hash()?;
    let dims = Dims {
        d1: cfg.model.d1,
        d2: cfg.model.d2,
        d_out: cfg.model.d_out,
    };
    let raw = load_dataset(&cfg.io.dataset, Some(dims))?;
    let (data, scaling) = if cfg.model.standardize {
        let (d, s) = raw.standardized();
        (d, Some(s))
    } else {
        (raw, None)
    };
    let spec = cfg.model_spec()?;
    let model = spec.build()?;
    let theta_prior = cfg.initial_values()?.theta_prior()?;
    let priors = Priors::new(&model, theta_prior.clone())?;
    let schedule = cfg.schedule(&model, data.n_field(), data.n_sim());

    let state = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config_hash != hash {
                return Err(Error::Config {
                    field: "resume".into(),
                    message: format!("{} was written by a different configuration", path.display()),
                });
            }
            ckpt.state
        }
        None => TrainState::new(init_from_priors(&model, &priors)?, cfg.training.seed),
    };

    let out = cfg.io.output.clone();
    ensure_dir(&out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let snapshot =
        |s: &TrainState| Checkpoint::new(hash.clone(), spec.clone(), theta_prior.clone(), scaling.clone(), schedule.clone(), s.clone());
    let every = cfg.training.checkpoint_every;
    let mut hook = |s: &TrainState| {
        if every > 0 && s.iteration % every == 0 {
            snapshot(s).save(&ckpt_path)?;
        }
        Ok(())
    };

    let fit = match trainer::resume(&model, &data, &priors, &schedule, state, &mut hook) {
        Ok(fit) => fit,
        Err(Error::Divergence { iterations, trace }) => {
            write_trace(&out.join(TRACE_FILE), &trace)?;
            return Err(Error::Divergence { iterations, trace });
        }
        Err(e) => return Err(e),
    };
    snapshot(&fit.state).save(&ckpt_path)?;
    write_trace(&out.join(TRACE_FILE), &fit.trace)?;
    let draws = posterior_samples(&fit.posterior, cfg.training.posterior_samples, cfg.training.seed)?;
    write_theta_table(&out.join(POSTERIOR_FILE), &draws)?;
    println!(
        "calibrated {} iterations; outputs in {}",
        fit.state.iteration,
        out.display()
    );
    Ok(())
}

fn column_stats(samples: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let m = samples.nrows() as f64;
    samples
        .column_iter()
        .map(|c| {
            let mean = c.sum() / m;
            let var = if samples.nrows() > 1 {
                c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let data = load_dataset(&args.dataset, None)?;
    let samples = read_theta_table(&args.posterior)?;
    Error::check_len("posterior theta columns", data.d2(), samples.ncols())?;
    let ckpt = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;

    let mse = match (args.simulator, &ckpt) {
        (Some(SimulatorName::Borehole), _) => {
            mse_metric(|x, t| Ok(vec![borehole_eta(x, t)?]), &data.x, &data.y, &samples)?
        }
        (None, Some(ck)) => {
            let base = ck.base_model()?;
            let (model, posterior) = ck.state.params.unpack(&base)?;
            let w = posterior.weight_means(&model);
            let w_eta = &w[..model.n_emulator_layers()];
            let scaling = ck.scaling.clone();
            mse_metric(
                |x, t| {
                    let mut v = model.emulator_eval(w_eta, x, t)?;
                    if let Some(s) = &scaling {
                        for (c, val) in v.iter_mut().enumerate() {
                            *val = *val * s.std[c] + s.mean[c];
                        }
                    }
                    Ok(v)
                },
                &data.x,
                &data.y,
                &samples,
            )?
        }
        (None, None) => {
            return Err(Error::Config {
                field: "evaluate".into(),
                message: "pass --simulator or --checkpoint to define the simulator".into(),
            })
        }
    };

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut rows: Vec<(String, f64)> = vec![("mse_per_observation".into(), mse)];
    let stats = column_stats(&samples);
    for (i, (m, s)) in stats.iter().enumerate() {
        rows.push((format!("theta_mean_{}", i + 1), *m));
        rows.push((format!("theta_std_{}", i + 1), *s));
    }
    if let Some(path) = &args.truth {
        let truth = read_theta_table(path)?;
        Error::check_len("truth theta columns", data.d2(), truth.ncols())?;
        for (i, (m, _)) in stats.iter().enumerate() {
            rows.push((format!("abs_error_{}", i + 1), (m - truth[(0, i)]).abs()));
        }
    }
    if args.oracle {
        let ck = ckpt.as_ref().ok_or_else(|| Error::Config {
            field: "oracle".into(),
            message: "--oracle needs --checkpoint for the model".into(),
        })?;
        let model = ck.trained_model()?;
        let mut scaled = data.clone();
        if let Some(s) = &ck.scaling {
            s.apply(&mut scaled.y);
            s.apply(&mut scaled.z);
        }
        let grid = ThetaGrid::default_for(&ck.theta_prior)?;
        let post = analytic_theta_posterior(&model, &scaled, &grid, &ck.theta_prior)?;
        rows.push(("tv_distance".into(), post.tv_distance(&samples)?));
        for (i, (m, s)) in post.mean().iter().zip(post.std()).enumerate() {
            rows.push((format!("oracle_mean_{}", i + 1), *m));
            rows.push((format!("oracle_std_{}", i + 1), s));
        }
        let pts = DMatrix::from_fn(grid.len(), grid.dim(), |j, d| grid.point(j)[d]);
        let dens = DMatrix::from_column_slice(grid.len(), 1, &post.density);
        let mut header = numbered("theta", grid.dim());
        header.push("density".into());
        let dir = args.out.parent().unwrap_or(Path::new("."));
        write_table(&dir.join(ORACLE_FILE), &header, &[&pts, &dens])?;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["metric", "value"]).map_err(fmt)?;
    for (k, v) in &rows {
        w.write_record([k.clone(), v.to_string()]).map_err(fmt)?;
    }
    write_atomic(&args.out, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)?;
    for (k, v) in &rows {
        println!("{k},{v}");
    }
    Ok(())
}
