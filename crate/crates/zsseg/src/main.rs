use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zsseg::config::ExperimentConfig;
use zsseg::runner;

/// Zero-shot point-cloud segmentation experiments on a toy benchmark.
#[derive(Parser)]
#[command(name = "zsseg", version, about)]
struct Cli {
    /// Path to a `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the semantic table and train/test scenes.
    GenData,
    /// Stage a: backbone and seen-class head.
    TrainBackbone,
    /// Stage b: generator and semantic projection.
    TrainGenerator,
    /// Stage c: calibration and the final classifier.
    TrainClassifier,
    /// Evaluate on the test split and write metrics.csv.
    Eval,
    /// Run the 9-row module ablation matrix.
    Ablate,
    /// Sweep the mask probability and prototype-ratio grids.
    Sweep,
    /// Finite-difference checks for every loss and the MLP stack.
    GradCheck,
    /// Implementation-versus-oracle equivalence checks.
    OracleCheck,
}

fn load_config(cli: &Cli) -> zsseg::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("ZSSEG_SEED") {
        cfg.train.seed = seed
            .parse()
            .map_err(|_| zsseg::Error::config(format!("bad ZSSEG_SEED `{seed}`")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> zsseg::Result<()> {
    let cfg = load_config(cli)?;
    match cli.cmd {
        Cmd::GenData => runner::cmd_gen_data(&cfg),
        Cmd::TrainBackbone => runner::cmd_train_backbone(&cfg),
        Cmd::TrainGenerator => runner::cmd_train_generator(&cfg),
        Cmd::TrainClassifier => runner::cmd_train_classifier(&cfg),
        Cmd::Eval => runner::cmd_eval(&cfg).map(|_| ()),
        Cmd::Ablate => runner::cmd_ablate(&cfg).map(|_| ()),
        Cmd::Sweep => runner::cmd_sweep(&cfg).map(|_| ()),
        Cmd::GradCheck => {
            let checks = runner::grad_check_suite(cfg.train.seed);
            runner::report_checks("grad", &checks)
        }
        Cmd::OracleCheck => {
            let checks = runner::oracle_check_suite(cfg.train.seed);
            runner::report_checks("oracle", &checks)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
