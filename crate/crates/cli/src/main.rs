use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commdecode_cli::config::{RunConfig, Sources, SEED_VAR};
use commdecode_cli::error::CliResult;
use commdecode_cli::heatmap::render_heatmaps;
use commdecode_cli::pipeline;

/// Decode the meaning of messages from demonstrations in a goal-signalling
/// gridworld.
#[derive(Parser)]
#[command(name = "commdecode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (built-in defaults when omitted).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `decoder.batch_size=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed; takes precedence over the environment and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Value iteration and policy distillation.
    Plan(Common),
    /// Learn the dynamics model from greedy rollouts.
    TrainTransition(Common),
    /// Assign messages to goals and record demonstrations.
    GenDemos(Common),
    /// Train the state decoder through the frozen policy and dynamics model.
    TrainDecoder(Common),
    /// Exact goal sets per message from the demonstration corpus.
    DecodeExact(Common),
    /// Score the state decoder and write heatmaps.
    EvalDecoder {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 when the headline thresholds are not met.
        #[arg(long)]
        assert: bool,
    },
    /// Check the optimal-set decomposition on a small instance.
    AnalyzeEquiv(Common),
    /// Every stage in order.
    All(Common),
    /// Render a heatmap CSV as SVG.
    RenderHeatmaps {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig(Common),
}

fn load(common: &Common) -> CliResult<RunConfig> {
    RunConfig::load(&Sources {
        file: common.config.clone(),
        sets: common.sets.clone(),
        env_seed: std::env::var(SEED_VAR).ok(),
        seed: common.seed,
        output_dir: common.out.clone(),
    })
}

fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Plan(c) => pipeline::plan(&load(&c)?),
        Command::TrainTransition(c) => pipeline::train_transition_stage(&load(&c)?),
        Command::GenDemos(c) => pipeline::gen_demos(&load(&c)?),
        Command::TrainDecoder(c) => pipeline::train_decoder(&load(&c)?),
        Command::DecodeExact(c) => pipeline::decode_exact(&load(&c)?),
        Command::EvalDecoder { common, assert } => pipeline::eval_decoder(&load(&common)?, assert).map(|r| r.0),
        Command::AnalyzeEquiv(c) => pipeline::analyze_equiv(&load(&c)?),
        Command::All(c) => pipeline::all(&load(&c)?),
        Command::RenderHeatmaps { input, output } => {
            render_heatmaps(&input, &output)?;
            Ok(format!("wrote {}\n", output.display()))
        }
        Command::ShowConfig(c) => Ok(load(&c)?.to_json() + "\n"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
