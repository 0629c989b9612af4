use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualflow::sampler::Strategy;
use dualflow_cli::commands::{self, Context};
use dualflow_cli::config::{Ablation, Component, RunConfig, OUT_DIR_ENV};
use dualflow_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "dualflow", version, about = "Compositional bimanual flow policies")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config and DUALFLOW_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampling strategy to evaluate (fixed, adaptive, early-stop); repeatable.
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Vec<Strategy>,
    /// Component to remove (compose, temporal, spatial); repeatable. The
    /// removed set forms a single ablation row replacing the configured rows.
    #[arg(long, global = true, value_parser = parse_component)]
    ablate: Vec<Component>,
    /// Evaluation episodes per task.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations.
    GenData,
    /// Train the per-arm policies, the joint policy and the weight predictor.
    Train,
    /// Derive energy thresholds from the training distribution.
    Calibrate,
    /// Evaluate every strategy and ablation row.
    Eval,
    /// Write plot-ready CSVs from the evaluation report.
    ExportPlots,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse::<Strategy>().map_err(|e| e.to_string())
}

fn parse_component(s: &str) -> Result<Component, String> {
    s.parse::<Component>().map_err(|e| e.to_string())
}

fn build_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = dir.into();
    }
    if let Some(dir) = &cli.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if !cli.strategy.is_empty() {
        cfg.eval.strategies = cli.strategy.clone();
    }
    if !cli.ablate.is_empty() {
        cfg.eval.ablations = vec![Ablation::from(cli.ablate.clone())];
    }
    if let Some(n) = cli.episodes {
        cfg.eval.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::new(build_config(cli)?);
    match cli.command {
        Command::GenData => commands::cmd_gen_data(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Calibrate => {
            let t = commands::cmd_calibrate(&ctx)?;
            println!("tau_low={} tau_high={} samples={}", t.tau_low, t.tau_high, t.samples);
            Ok(())
        }
        Command::Eval => {
            let report = commands::cmd_eval(&ctx)?;
            print!("{}", commands::summary_table(&report, &ctx.hash));
            Ok(())
        }
        Command::ExportPlots => commands::cmd_export_plots(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &CliError) {
    let line = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind()));
    eprintln!("{line}");
}
