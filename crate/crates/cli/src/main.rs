use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;

use defectsynth::commands::{self, RunDir};
use defectsynth::config::RunConfig;
use defectsynth::gradcheck;
use defectsynth::pipeline::moving_average;
use defectsynth::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_OTHER: u8 = 1;
/// Window of the moving-average loss printed after training.
const LOSS_WINDOW: usize = 50;
const GRADCHECK_CASES: u64 = 20;

#[derive(Parser, Debug)]
#[command(
    name = "defectsynth",
    version,
    about = "Mask-guided anomaly synthesis on a procedural defect dataset"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (flat `key = value` file); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Overwrite an existing dataset.
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural dataset into <out>/data.
    GenData,
    /// Pre-train the base denoiser.
    PretrainBase,
    /// Train the cross-attention adapter against the frozen base.
    TrainAdapter,
    /// Generate anomalies on normal training images.
    Sample,
    /// Score the generated samples and run the ablation sweep.
    Eval,
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Print the effective configuration.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn summarize_losses(stage: &str, losses: &[f64]) {
    let ma = moving_average(losses, LOSS_WINDOW);
    if let (Some(first), Some(last)) = (ma.get(LOSS_WINDOW.min(ma.len()) - 1), ma.last()) {
        println!(
            "{stage}: moving-average loss {first:.4} -> {last:.4} over {} steps",
            losses.len()
        );
    }
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let config = load_config(cli)?;
    let run = RunDir::new(&cli.out);
    info!("config hash {}", config.hash());
    match cli.command {
        Command::GenData => {
            let s = commands::gen_data(&config, &run, cli.force)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                s.samples,
                s.train,
                s.test,
                run.data().display()
            );
        }
        Command::PretrainBase => {
            let logs = commands::pretrain_base(&config, &run)?;
            summarize_losses("pretrain", &logs.iter().map(|l| l.loss).collect::<Vec<_>>());
        }
        Command::TrainAdapter => {
            let logs = commands::train_adapter_stage(&config, &run)?;
            summarize_losses("adapter", &logs.iter().map(|l| l.loss).collect::<Vec<_>>());
        }
        Command::Sample => {
            let records = commands::sample_stage(&config, &run)?;
            println!(
                "wrote {} samples to {}",
                records.len(),
                run.samples().display()
            );
        }
        Command::Eval => {
            let report = commands::eval_stage(&config, &run)?;
            print!("{}", report.to_text());
        }
        Command::Gradcheck => {
            let suites = gradcheck::run_all(config.seed, GRADCHECK_CASES)?;
            for s in &suites {
                println!(
                    "{} {}",
                    if s.passed() { "PASS" } else { "FAIL" },
                    s.summary()
                );
            }
            return Ok(suites.iter().all(|s| s.passed()));
        }
        Command::Config => print!("{}", config.render()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool");
        if let Err(e) = pool {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_OTHER);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_numerical() {
                EXIT_NUMERICAL
            } else if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_OTHER
            };
            ExitCode::from(code)
        }
    }
}
