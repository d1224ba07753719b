//! `foresight`: generate synthetic activity datasets, train the label/time
//! predictor and the captioner, run predictions, and score them.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use foresight_cli::commands::{
    cmd_caption, cmd_evaluate, cmd_gen_data, cmd_predict, cmd_train_captioner,
    cmd_train_predictor, CliError,
};
use foresight_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "foresight", version, about = "Predict and describe near-future activities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateTarget {
    Scene,
    Time,
}

#[derive(Args)]
struct Common {
    /// Key-value config file with the RunConfig keys.
    #[arg(long)]
    config: PathBuf,
    /// Root random seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs (overrides the config).
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (overrides the config).
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size (overrides the config).
    #[arg(long)]
    batch: Option<usize>,
    /// Output path for this command (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Structurally remove a context branch (repeatable).
    #[arg(long, value_enum)]
    ablate: Vec<AblateTarget>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic activity-grammar dataset.
    GenData(Common),
    /// Train the three-branch label and start-time predictor.
    TrainPredictor(Common),
    /// Train the encoder-decoder captioner.
    TrainCaptioner(Common),
    /// Predict future labels (and captions) for every window of a dataset.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Predictor checkpoint (overrides the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Captioner checkpoint; captions are decoded when given.
        #[arg(long)]
        captioner: Option<PathBuf>,
    },
    /// Decode captions for an (id, input) pairs file.
    Caption {
        #[command(flatten)]
        common: Common,
        /// Captioner checkpoint (overrides the config).
        #[arg(long)]
        captioner: Option<PathBuf>,
        /// JSONL pairs file (overrides the config).
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Score a predictions file against its dataset's gold windows.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictions file (overrides the config).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Dataset the predictions were made on (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = common.lr {
        cfg.lr = lr;
        // lr applies to whichever model this command trains.
    }
    if let Some(batch) = common.batch {
        cfg.batch = batch;
        cfg.cap_batch = batch;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    for target in &common.ablate {
        match target {
            AblateTarget::Scene => cfg.scene_branch = false,
            AblateTarget::Time => cfg.time_branch = false,
        }
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(common) => {
            let summary = cmd_gen_data(&load_config(common)?)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::TrainPredictor(common) => {
            let summary = cmd_train_predictor(&load_config(common)?)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::TrainCaptioner(common) => {
            let summary = cmd_train_captioner(&load_config(common)?)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::Predict {
            common,
            checkpoint,
            captioner,
        } => {
            let mut cfg = load_config(common)?;
            if let Some(p) = checkpoint {
                cfg.checkpoint = Some(p.clone());
            }
            if let Some(p) = captioner {
                cfg.cap_checkpoint = Some(p.clone());
            }
            let summary = cmd_predict(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::Caption {
            common,
            captioner,
            pairs,
        } => {
            let mut cfg = load_config(common)?;
            if let Some(p) = captioner {
                cfg.cap_checkpoint = Some(p.clone());
            }
            if let Some(p) = pairs {
                cfg.pairs = Some(p.clone());
            }
            let summary = cmd_caption(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).unwrap());
        }
        Command::Evaluate {
            common,
            predictions,
            dataset,
        } => {
            let mut cfg = load_config(common)?;
            if let Some(p) = predictions {
                cfg.predictions = Some(p.clone());
            }
            if let Some(p) = dataset {
                cfg.dataset = Some(p.clone());
            }
            let report = cmd_evaluate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
