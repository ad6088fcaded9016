use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridloc::fuse::Preference;
use hybridloc::pipeline::{self, Ablation, PipelineConfig};

/// Hybrid SfM + scan relocalization pipeline on synthetic scenes.
///
/// Log verbosity follows HYBRIDLOC_LOG (e.g. `info`, `debug`); default `warn`.
#[derive(Debug, Parser)]
#[command(name = "hybridloc", version)]
struct Cli {
    /// TOML pipeline configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Conflict policy for frames posed by both sources.
    #[arg(long, global = true, value_parser = parse_policy)]
    policy: Option<Preference>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the scene, tracks, scan matches, detections and ground truth.
    Synth,
    /// Incremental SfM over the tracks.
    Sfm,
    /// Per-frame PnP relocalization against scan keypoints.
    Reloc,
    /// Align SfM to the scan frame and take the union of both pose sets.
    Fuse,
    /// Lift detections to 3D object predictions.
    Predict {
        #[arg(long, default_value = "hybrid", value_parser = parse_ablation)]
        ablation: Ablation,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, default_value = "hybrid", value_parser = parse_ablation)]
        ablation: Ablation,
    },
    /// Every stage, the SfM-only ablation, the comparison table and the plot.
    RunAll,
    /// Top-down trajectory plot (SVG).
    Plot,
}

fn parse_policy(s: &str) -> Result<Preference, String> {
    s.parse().map_err(|e: hybridloc::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: hybridloc::Error| e.to_string())
}

fn load_config(cli: &Cli) -> hybridloc::Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(p) = cli.policy {
        config.union.preference = p;
    }
    Ok(config)
}

fn run(cli: &Cli) -> hybridloc::Result<Vec<String>> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth => pipeline::cmd_synth(&config),
        Command::Sfm => pipeline::cmd_sfm(&config),
        Command::Reloc => pipeline::cmd_reloc(&config),
        Command::Fuse => pipeline::cmd_fuse(&config),
        Command::Predict { ablation } => pipeline::cmd_predict(&config, *ablation),
        Command::Eval { ablation } => pipeline::cmd_eval(&config, *ablation),
        Command::RunAll => pipeline::cmd_run_all(&config),
        Command::Plot => pipeline::cmd_plot(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HYBRIDLOC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outputs) => {
            for o in outputs {
                println!("{o}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
