//! `shipseg`: synthetic data generation, training, evaluation, ablation and
//! feature-map visualization.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on configuration
//! errors (including a checkpoint that does not fit the configuration).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use shipseg_core::harness::eval::{evaluate_and_write, report_table, Predictor};
use shipseg_core::harness::{
    run_ablation, run_training, visualize, Checkpoint, Dataset, Device, ExperimentConfig, Profile,
};
use shipseg_core::pipeline::Model;
use shipseg_core::synth::{generate_dataset, load_png};
use shipseg_core::Error;

#[derive(Parser)]
#[command(
    name = "shipseg",
    version,
    about = "Ship instance segmentation on synthetic SAR scenes"
)]
struct Cli {
    /// TOML experiment config layered over the chosen profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    device: Option<DeviceArg>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeviceArg {
    Cpu,
    Gpu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration.
    Config,
    /// Generate a synthetic dataset (default output: the config's data_dir).
    Generate,
    /// Train on the dataset in data_dir.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured splits.
    Eval {
        #[arg(long, required_unless_present_any = ["oracle", "empty"])]
        checkpoint: Option<PathBuf>,
        /// Report on this split only (repeatable).
        #[arg(long)]
        split: Vec<String>,
        /// Use the ground truth as predictions.
        #[arg(long, conflicts_with = "empty")]
        oracle: bool,
        /// Evaluate an empty prediction set.
        #[arg(long)]
        empty: bool,
    },
    /// Train and evaluate the four module variants.
    Ablate,
    /// Write channel-averaged C2 heatmaps for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG; defaults to the first test image of the dataset.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Checkpoint of a model trained without the orientation embedding.
        #[arg(long)]
        without: Option<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let profile = cli.profile.map(|p| match p {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    });
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, profile, cli.seed)?,
        None => ExperimentConfig::resolve("", profile, cli.seed)?,
    };
    if let Some(d) = cli.device {
        cfg.train.device = match d {
            DeviceArg::Cpu => Device::Cpu,
            DeviceArg::Gpu => Device::Gpu,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(Model, Checkpoint), Error> {
    let model = Model::new(&cfg.model)?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&model.config, &model.init_params())?;
    Ok((model, ckpt))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = resolve(cli)?;
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Generate => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let coco = generate_dataset(&cfg.dataset, &dir)?;
            println!(
                "wrote {} images, {} instances to {}",
                coco.images.len(),
                coco.annotations.len(),
                dir.display()
            );
        }
        Command::Train { resume } => {
            let dataset = Dataset::load(&cfg.data_dir)?;
            let out = out_dir(cli, "runs/train");
            let outcome = run_training(&cfg, &dataset, &out, resume.as_deref(), |_, _| true)?;
            if let Some(r) = outcome.records.last() {
                println!("step {} loss {:.4}", r.step, r.loss.total);
            }
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            split,
            oracle,
            empty,
        } => {
            if !split.is_empty() {
                cfg.eval.splits = split.clone();
            }
            let dataset = Dataset::load(&cfg.data_dir)?;
            let out = out_dir(cli, "runs/eval");
            let loaded = match checkpoint {
                Some(p) if !oracle && !empty => Some(load_model(&cfg, p)?),
                _ => None,
            };
            let predictor = match &loaded {
                Some((model, ckpt)) => Predictor::Model {
                    model,
                    store: &ckpt.params,
                },
                None if *oracle => Predictor::Oracle,
                None => Predictor::Empty,
            };
            let reports = evaluate_and_write(&dataset, &cfg, predictor, &out)?;
            print!("{}", report_table(&reports, "split"));
        }
        Command::Ablate => {
            let dataset = Dataset::load(&cfg.data_dir)?;
            let out = out_dir(cli, "runs/ablate");
            run_ablation(&cfg, &dataset, &out)?;
            let txt =
                std::fs::read_to_string(out.join(shipseg_core::harness::ablate::ABLATION_TXT))
                    .map_err(|e| Error::io(&out, e))?;
            print!("{txt}");
        }
        Command::Visualize {
            checkpoint,
            image,
            without,
        } => {
            let (model, ckpt) = load_model(&cfg, checkpoint)?;
            let img = match image {
                Some(p) => load_png(p)?,
                None => {
                    let dataset = Dataset::load(&cfg.data_dir)?;
                    let test = dataset.split("test")?;
                    let first = test
                        .first()
                        .copied()
                        .or(dataset.samples.first())
                        .ok_or_else(|| Error::Input("dataset has no images".into()))?;
                    first.image.clone()
                }
            };
            let baseline = match without {
                Some(p) => {
                    let c = Checkpoint::load(p)?;
                    let m = Model::new(&c.model)?;
                    c.check_compatible(&c.model, &m.init_params())?;
                    Some((m, c))
                }
                None => None,
            };
            let out = out_dir(cli, "runs/visualize");
            let paths = visualize(
                &model,
                &ckpt.params,
                &img,
                baseline.as_ref().map(|(m, c)| (m, &c.params)),
                &out,
            )?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::CheckpointMismatch(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
