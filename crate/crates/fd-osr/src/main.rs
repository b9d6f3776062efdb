//! Experiment runner: drives the self-supervised pre-training / fine-tuning /
//! open-set evaluation pipeline from a key=value config file.

extern crate blas_src;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fd_osr::error::Error;
use fd_osr::experiment::{
    aggregate_reports, correlation_report, load_records, run_experiment, write_scatter_csv,
    write_summary_csv, ExperimentConfig, RunMode, Stage,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUN_FAILURES: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fd-osr",
    about = "Feature-decoupled self-supervised pre-training and open-set recognition experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to a key=value experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Smoke profile: 1,000 training samples, 3 epochs per stage.
    #[arg(long, global = true)]
    smoke: bool,

    /// Override the run mode from the config.
    #[arg(long, global = true, value_parser = ["supervised", "unsupervised"])]
    mode: Option<String>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the base seed mixed into every derived seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write open-set split manifests only.
    Split,
    /// Run up to and including self-supervised pre-training.
    Pretrain,
    /// Run up to and including supervised fine-tuning.
    Finetune,
    /// Run up to and including centroid fitting / clustering.
    Cluster,
    /// Run the full pipeline including test-set evaluation.
    Evaluate,
    /// Aggregate persisted run records into summary and scatter CSVs.
    Report,
    /// Full pipeline followed by the aggregate report.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::DataLoad { .. } | Error::TooFewClasses(_) => EXIT_DATA,
        _ => EXIT_RUN_FAILURES,
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = &cli.mode {
        cfg.mode = mode.parse::<RunMode>()?;
        if cfg.mode == RunMode::Unsupervised {
            cfg.loss = fd_osr::finetune::FinetuneLoss::None;
        }
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    if cli.smoke {
        cfg.apply_smoke();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let cfg = resolve_config(cli)?;

    let upto = match cli.command {
        Command::Split => Stage::Split,
        Command::Pretrain => Stage::Pretrain,
        Command::Finetune => Stage::Finetune,
        Command::Cluster => Stage::Cluster,
        Command::Evaluate | Command::All => Stage::Evaluate,
        Command::Report => return report(&cfg),
    };

    let records = run_experiment(&cfg, upto)?;
    let failures: Vec<_> = records.iter().filter(|r| r.error.is_some()).collect();
    for r in &failures {
        eprintln!(
            "run {} failed: {}",
            r.run_id,
            r.error.as_deref().unwrap_or("unknown")
        );
    }
    println!(
        "{} completed, {} failed (stage: {:?}, out: {})",
        records.len() - failures.len(),
        failures.len(),
        upto,
        cfg.output_dir.display()
    );

    if matches!(cli.command, Command::All) {
        let code = report(&cfg)?;
        if code != ExitCode::SUCCESS {
            return Ok(code);
        }
    }
    if failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_RUN_FAILURES))
    }
}

fn report(cfg: &ExperimentConfig) -> Result<ExitCode, Error> {
    let records = load_records(&cfg.output_dir)?;
    if records.is_empty() {
        return Err(Error::Eval(format!(
            "no run records found under {}",
            cfg.output_dir.display()
        )));
    }
    let evaluated: Vec<_> = records
        .iter()
        .filter(|r| r.eval.is_some())
        .cloned()
        .collect();
    if evaluated.is_empty() {
        return Err(Error::Eval(
            "run records exist but none have been evaluated".into(),
        ));
    }

    let rows = aggregate_reports(&evaluated)?;
    let summary_path = cfg.output_dir.join("summary.csv");
    write_summary_csv(&rows, &summary_path)?;
    for row in &rows {
        println!(
            "{} {} {}: auc {:.3}±{:.3} auc@0.1 {:.4}±{:.4} f1 {:.3}±{:.3} (n={})",
            row.method,
            row.loss,
            row.mode,
            row.auc_mean,
            row.auc_std,
            row.auc10_mean,
            row.auc10_std,
            row.f1_overall_mean,
            row.f1_overall_std,
            row.runs
        );
    }

    if evaluated.len() >= 2 {
        match correlation_report(&evaluated) {
            Ok((r, points)) => {
                write_scatter_csv(&points, &cfg.output_dir.join("scatter_f1_iir.csv"))?;
                println!("pearson r (overall F1 vs IIR): {r:.3}");
            }
            Err(e) => eprintln!("scatter report skipped: {e}"),
        }
    }
    println!("summary written to {}", summary_path.display());

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} run(s) previously failed; summary covers completed runs only");
        return Ok(ExitCode::from(EXIT_RUN_FAILURES));
    }
    Ok(ExitCode::SUCCESS)
}
