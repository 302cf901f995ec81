//! `tacservo`: collect, train, servo, eval, render and reproduce.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tacservo::experiment::{self, CellFilter, ExperimentConfig, ExperimentError};
use tacservo::posenet;
use tacservo::servo::Termination;
use tacservo::tactsim::{ContactParams, SensorFamily, Task};
use tacservo::{eval, par};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CONTACT_LOSS: u8 = 3;

#[derive(Parser)]
#[command(name = "tacservo", version, about = "Simulated tactile pose estimation and servo control")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (or file for `render`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled dataset.
    Collect {
        #[arg(long, default_value = "marker")]
        family: SensorFamily,
        #[arg(long, default_value = "edge")]
        task: Task,
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
    },
    /// Train a pose model on a dataset and score its held-out split.
    Train {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Follow a shape with a trained model or the ground-truth oracle.
    Servo {
        #[arg(long, value_name = "PATH", required_unless_present = "oracle", conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the ground-truth pose instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value = "marker")]
        family: SensorFamily,
        #[arg(long, default_value = "circle")]
        shape: String,
        #[arg(long, default_value = "edge")]
        task: Task,
        /// Advance of the angular set point per step, in degrees.
        #[arg(long, value_name = "DEG", allow_negative_numbers = true)]
        angle_advance: Option<f64>,
    },
    /// Score a checkpoint on a dataset, or re-score a trajectory CSV.
    Eval {
        #[arg(long, value_name = "DIR", requires = "checkpoint", conflicts_with = "trajectory")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "CSV", required_unless_present = "dataset")]
        trajectory: Option<PathBuf>,
        #[arg(long, default_value = "marker")]
        family: SensorFamily,
        #[arg(long, default_value = "circle")]
        shape: String,
        #[arg(long, default_value = "edge")]
        task: Task,
    },
    /// Render one contact to a PGM image.
    Render {
        #[arg(long, default_value = "marker")]
        family: SensorFamily,
        #[arg(long, default_value = "edge")]
        task: Task,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        offset: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        depth: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        angle: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        slide_x: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        slide_y: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        slide_angle: f64,
    },
    /// Run every family, task and shape end to end and tabulate the results.
    Reproduce {
        /// Restrict to `family[,task[,shape]]`.
        #[arg(long, value_name = "CELL-SPEC")]
        only: Option<CellFilter>,
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
}

/// Worker count: `TACSERVO_THREADS` if set, else all available cores.
fn workers() -> Result<usize, ExperimentError> {
    match std::env::var("TACSERVO_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ExperimentError::Config {
                msg: format!("TACSERVO_THREADS=`{v}` is not a positive integer"),
                line: None,
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Re-validates after command-line overrides.
fn revalidate(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    cfg.validate().map_err(|(_, _, msg)| ExperimentError::Config { msg, line: None })
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.join(default))
}

fn run(cli: Cli) -> Result<u8, ExperimentError> {
    let mut cfg = load_config(&cli.common)?;
    let threads = workers()?;
    match cli.command {
        Command::Collect { family, task, samples } => {
            if let Some(n) = samples {
                cfg.collection.section_mut(task).n_samples = n;
            }
            revalidate(&cfg)?;
            let out = out_dir(&cli.common, &cfg, &format!("{family}-{task}/dataset"));
            let (ds, hash) = par::with_threads(threads, || experiment::cmd_collect(&cfg, family, task, &out))?;
            println!("{} samples ({} train) -> {}", ds.samples.len(), ds.train_samples().count(), out.display());
            println!("{hash}");
            Ok(0)
        }
        Command::Train { dataset, epochs } => {
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            revalidate(&cfg)?;
            let out = cli.common.out.clone().unwrap_or_else(|| dataset.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            let (outcome, report) = par::with_threads(threads, || experiment::cmd_train(&cfg, &dataset, &out))?;
            println!("initial loss {:.6}, final loss {:.6}", outcome.initial_loss, outcome.history.last().copied().unwrap_or(f64::NAN));
            print!("{}", eval::summarize(&[], std::slice::from_ref(&report)).text);
            println!("checkpoint -> {}", out.join(experiment::MODEL_FILE).display());
            Ok(0)
        }
        Command::Servo { checkpoint, oracle, family, shape, task, angle_advance } => {
            if let Some(a) = angle_advance {
                cfg.servo.angle_setpoint_advance = a;
            }
            revalidate(&cfg)?;
            let model = match (&checkpoint, oracle) {
                (Some(p), false) => Some(posenet::load_checkpoint(p)?),
                _ => None,
            };
            let out = out_dir(&cli.common, &cfg, &format!("{family}-{task}/{shape}"));
            let (traj, report) = experiment::cmd_servo(&cfg, model.as_ref(), family, &shape, task, &out)?;
            print!("{}", eval::summarize(std::slice::from_ref(&report), &[]).text);
            println!("trajectory -> {}", out.join(experiment::TRAJECTORY_FILE).display());
            Ok(if traj.termination == Termination::LostContact { EXIT_CONTACT_LOSS } else { 0 })
        }
        Command::Eval { dataset, checkpoint, trajectory, family, shape, task } => {
            if let (Some(ds), Some(ck)) = (&dataset, &checkpoint) {
                let report = par::with_threads(threads, || experiment::cmd_eval_model(ds, ck))?;
                print!("{}", eval::summarize(&[], std::slice::from_ref(&report)).text);
            } else if let Some(csv) = &trajectory {
                let report = experiment::cmd_eval_trajectory(&cfg, csv, family, &shape, task)?;
                print!("{}", eval::summarize(std::slice::from_ref(&report), &[]).text);
            }
            Ok(0)
        }
        Command::Render { family, task, offset, depth, angle, slide_x, slide_y, slide_angle } => {
            let contact = ContactParams { task, offset, depth, angle, slide_x, slide_y, slide_angle };
            let out = cli.common.out.clone().unwrap_or_else(|| cfg.out_dir.join("render.pgm"));
            experiment::cmd_render(&cfg, family, &contact, cfg.seed, &out)?;
            println!("{}", out.display());
            Ok(0)
        }
        Command::Reproduce { only, samples, epochs } => {
            if let Some(n) = samples {
                cfg.collection.edge.n_samples = n;
                cfg.collection.surface.n_samples = n;
            }
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            revalidate(&cfg)?;
            let out = cli.common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let outcome = experiment::reproduce(&cfg, &out, only.as_ref(), threads)?;
            print!("{}", outcome.summary.text);
            for f in &outcome.failures {
                eprintln!("error: {f}");
            }
            let lost = outcome.unexpected_failures().iter().any(|t| t.report.termination == Termination::LostContact);
            Ok(if !outcome.failures.is_empty() {
                EXIT_RUNTIME
            } else if lost {
                EXIT_CONTACT_LOSS
            } else {
                0
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
