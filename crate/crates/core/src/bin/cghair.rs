use std::path::PathBuf;
use std::process::ExitCode;

use cghair::pipeline::{load_config, run_pipeline, run_stage, Stage};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cghair", version, about = "Compact Gaussian hair pipeline")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic wisp hairstyle and target colors.
    Synth,
    /// Resample the input hairstyle into `strands.cgh`.
    Ingest {
        /// `.hair` file or strand blob (defaults to the synth output).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Per-Gaussian target colors for the input.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Cluster strands into card groups.
    Cluster,
    /// Fit one hair card per strand cluster.
    Cards,
    /// Map strands onto their card and rasterize strand textures.
    Uvmap,
    /// Cluster cards by strand texture.
    Codebook,
    /// Fit codebooks, logits and decoder to the target colors.
    Fit,
    /// Write the compact model with hard entry indices.
    Export,
    /// Render the model and the reference colors.
    Render,
    /// Write size and quality reports.
    Report,
    /// Run every stage.
    Run {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut cfg = match load_config(cli.config.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Cmd::Ingest { input, targets } | Cmd::Run { input, targets } = &cli.cmd {
        if input.is_some() {
            cfg.input = input.clone();
        }
        if targets.is_some() {
            cfg.targets = targets.clone();
        }
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.cmd {
        Cmd::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Cmd::Run { .. } => run_pipeline(&cfg).map(|m| log::info!("wrote {} artifacts", m.artifacts.len())),
        Cmd::Synth => run_stage(Stage::Synth, &cfg),
        Cmd::Ingest { .. } => run_stage(Stage::Ingest, &cfg),
        Cmd::Cluster => run_stage(Stage::Cluster, &cfg),
        Cmd::Cards => run_stage(Stage::Cards, &cfg),
        Cmd::Uvmap => run_stage(Stage::Uvmap, &cfg),
        Cmd::Codebook => run_stage(Stage::Codebook, &cfg),
        Cmd::Fit => run_stage(Stage::Fit, &cfg),
        Cmd::Export => run_stage(Stage::Export, &cfg),
        Cmd::Render => run_stage(Stage::Render, &cfg),
        Cmd::Report => run_stage(Stage::Report, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
