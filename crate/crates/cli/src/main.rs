use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;

use npsa::config::RunConfig;
use npsa::data::{
    load_hare_lynx, lv_simulate, record_grid, write_trajectory_csv, HareLynxSource, KernelSpec, LvState,
    RegressionSource, TaskSource,
};
use npsa::model::{Checkpoint, Mode, Model};
use npsa::reporting::{
    export_heatmap, export_predictions, heatmap_task, sweep_k, write_heatmap_csv, write_predictions_csv, write_sweep_csv,
    HeatmapMode,
};
use npsa::rng::{rng_for, Stream};
use npsa::training::{evaluate, resume_from, train, TrainOptions};
use npsa::Error;

#[derive(Parser)]
#[command(name = "npsa", version, about = "Neural processes with Weibull stochastic attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.json`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on held-out tasks; prints one JSON report per line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// rbf, matern or periodic; repeat or comma-separate for several.
        #[arg(long, value_delimiter = ',', required_unless_present = "hare_lynx")]
        kernel: Vec<String>,
        /// Hare–lynx CSV to evaluate a two-output model on.
        #[arg(long, conflicts_with = "kernel")]
        hare_lynx: Option<PathBuf>,
        #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
        noisy: bool,
        #[arg(long, default_value_t = 200)]
        n_tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expected model family; a different checkpoint is rejected.
        #[arg(long)]
        family: Option<String>,
        /// Use distribution means instead of one sample (not the paper's protocol).
        #[arg(long)]
        deterministic_eval: bool,
    },
    /// Simulate one Lotka–Volterra trajectory on the recording grid.
    SimulateLv {
        #[arg(long, default_value = "0.01,0.5,1,0.01")]
        theta: String,
        #[arg(long, default_value = "50,100")]
        init: String,
        #[arg(long, default_value_t = 30.0)]
        t_max: f64,
        #[arg(long, default_value_t = 100)]
        n_points: usize,
        #[arg(long, default_value_t = 100_000)]
        max_events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export head-averaged attention weights of one task.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        #[arg(long, default_value = "simplified")]
        mode: String,
        #[arg(long, default_value = "rbf")]
        kernel: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the predictive curve of one task on a regular grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        #[arg(long, default_value = "rbf")]
        kernel: String,
        #[arg(long, default_value_t = 200)]
        grid_points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score NPSA for each Weibull shape, with and without the attention divergence.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for the per-arm checkpoints and loss logs.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } | Error::Domain { .. } => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn threads() -> Result<usize, Error> {
    match std::env::var("NP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Validation { field: "NP_THREADS".into(), detail: format!("expected a positive integer, got {v:?}") }),
        },
    }
}

fn parse_list<T: std::str::FromStr, const N: usize>(field: &str, text: &str) -> Result<[T; N], Error> {
    let parts: Vec<T> = text
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Validation { field: field.into(), detail: format!("malformed list {text:?}") })?;
    parts
        .try_into()
        .map_err(|_| Error::Validation { field: field.into(), detail: format!("expected {N} comma-separated values") })
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<(), Error>) -> Result<(), Error> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Timing and environment, kept out of the reproducible outputs.
fn write_meta(path: &Path, command: &str, started: SystemTime, clock: Instant, threads: usize) -> Result<(), Error> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        "elapsed_secs": clock.elapsed().as_secs_f64(),
        "threads": threads,
    });
    fs::write(path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, Error> {
    Checkpoint::load(path)?.model()
}

fn regression_task_source(kernel: &str, noisy: bool) -> Result<RegressionSource, Error> {
    Ok(RegressionSource { kernel: KernelSpec::paper_test(kernel)?, noise: noisy.then(KernelSpec::paper_noise) })
}

fn run(cli: Cli) -> Result<(), Error> {
    let (started, clock) = (SystemTime::now(), Instant::now());
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(&config)?;
            let threads = threads()?;
            fs::create_dir_all(&out)?;
            let (mut model, resume_state) = if resume {
                let (m, state) = resume_from(&out.join("checkpoint.json"))?;
                if m.config != cfg.model {
                    return Err(Error::Validation { field: "model".into(), detail: "checkpoint differs from the configuration".into() });
                }
                (m, state)
            } else {
                (Model::new(cfg.model.clone(), cfg.train.seed)?, None)
            };
            fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
            let source = cfg.train_source()?;
            let opts = TrainOptions { out_dir: Some(out.clone()), threads, resume: resume_state };
            let result = train(&mut model, source.as_ref(), &cfg.train, &opts)?;
            write_meta(&out.join("meta.json"), "train", started, clock, threads)?;
            if let Some(last) = result.log.last() {
                eprintln!("trained {} steps, final loss {:.4}", result.steps_done, last.total);
            }
        }
        Command::Eval { checkpoint, kernel, hare_lynx, noisy, n_tasks, seed, family, deterministic_eval } => {
            let model = load_model(&checkpoint)?;
            if let Some(f) = family {
                let expected: npsa::model::Family = f.parse()?;
                if expected != model.config.family {
                    return Err(Error::Validation {
                        field: "family".into(),
                        detail: format!("checkpoint holds {} but {} was requested", model.config.family.name(), expected.name()),
                    });
                }
            }
            let sources: Vec<Box<dyn TaskSource>> = match hare_lynx {
                Some(path) => vec![Box::new(HareLynxSource { series: load_hare_lynx(&path)? })],
                None => kernel
                    .iter()
                    .map(|k| regression_task_source(k, noisy).map(|s| Box::new(s) as Box<dyn TaskSource>))
                    .collect::<Result<_, _>>()?,
            };
            let mode = if deterministic_eval { Mode::EvalMean } else { Mode::Eval };
            let mut stdout = std::io::stdout().lock();
            for source in &sources {
                let report = evaluate(&model, source.as_ref(), n_tasks, seed, mode)?;
                writeln!(stdout, "{}", serde_json::to_string(&report)?)?;
            }
        }
        Command::SimulateLv { theta, init, t_max, n_points, max_events, seed, out } => {
            let theta: [f64; 4] = parse_list("theta", &theta)?;
            if theta.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return Err(Error::Validation { field: "theta".into(), detail: "rates must be positive".into() });
            }
            let [x, y]: [u64; 2] = parse_list("init", &init)?;
            if !(t_max > 0.0 && t_max.is_finite()) || n_points < 2 {
                return Err(Error::Validation { field: "t_max".into(), detail: "needs t_max > 0 and at least two grid points".into() });
            }
            let mut rng = rng_for(seed, Stream::Simulation, 0);
            let traj = lv_simulate(&theta, LvState { t: 0.0, x, y }, t_max, max_events, &mut rng);
            let grid = record_grid(&traj, t_max, n_points);
            write_file(&out, |buf| write_trajectory_csv(&grid, buf))?;
        }
        Command::Heatmap { checkpoint, task_seed, mode, kernel, out } => {
            let model = load_model(&checkpoint)?;
            let mode: HeatmapMode = mode.parse()?;
            if model.config.d_y != 1 {
                return Err(Error::Unsupported("heatmaps are exported for one-output regression models".into()));
            }
            let task = heatmap_task(&KernelSpec::paper_test(&kernel)?, None, task_seed)?;
            let h = export_heatmap(&model, &task, mode, task_seed)?;
            write_file(&out, |buf| write_heatmap_csv(&h, buf))?;
        }
        Command::Predict { checkpoint, task_seed, kernel, grid_points, out } => {
            let model = load_model(&checkpoint)?;
            if model.config.d_y != 1 || grid_points < 2 {
                return Err(Error::Unsupported("prediction curves need a one-output model and two grid points".into()));
            }
            let task = heatmap_task(&KernelSpec::paper_test(&kernel)?, None, task_seed)?;
            let grid: Vec<f64> = (0..grid_points).map(|i| -2.0 + 4.0 * i as f64 / (grid_points - 1) as f64).collect();
            let rows = export_predictions(&model, &task, &grid, task_seed)?;
            write_file(&out, |buf| write_predictions_csv(&rows, buf))?;
        }
        Command::SweepK { config, k_list, out, work_dir } => {
            let cfg = RunConfig::load(&config)?;
            let threads = threads()?;
            let rows = sweep_k(&cfg, &k_list, threads, work_dir.as_deref())?;
            write_file(&out, |buf| write_sweep_csv(&rows, buf))?;
            write_meta(&out.with_extension("meta.json"), "sweep-k", started, clock, threads)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
