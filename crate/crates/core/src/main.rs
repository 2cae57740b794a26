use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pilotwave::experiment::{describe_preset, replay, run_preset, ExperimentConfig, Scale, PRESET_NAMES};

#[derive(Parser)]
#[command(name = "pilotwave", version, about = "Quantum relaxation in coupled harmonic oscillators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a config file.
    Run {
        /// Flat key = value config; its keys override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
        scale: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// List the named presets.
    ListPresets,
    /// Re-run a manifest and compare the outputs byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to `replay/` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> pilotwave::Result<ExitCode> {
    match command {
        Command::ListPresets => {
            for name in PRESET_NAMES {
                println!("{name:6} {}", describe_preset(name));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            preset,
            scale,
            out,
            seed,
            workers,
        } => {
            let scale = Scale::parse(&scale).expect("clap restricts the scale");
            let start = preset
                .map(|p| ExperimentConfig::preset(&p, scale))
                .transpose()
                .map_err(|e| e.in_stage("config"))?;
            let mut cfg = match (config, start) {
                (Some(path), start) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| pilotwave::Error::Io { path: path.clone(), source: e }.in_stage("config"))?;
                    ExperimentConfig::parse_onto(start, &text, &path).map_err(|e| e.in_stage("config"))?
                }
                (None, Some(start)) => start,
                (None, None) => {
                    return Err(pilotwave::Error::Config("give --preset or --config".into()).in_stage("config"))
                }
            };
            if let Some(out) = out {
                cfg.output = out;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(workers) = workers {
                cfg.workers = workers;
            }
            let report = run_preset(&cfg)?;
            println!(
                "wrote {} files to {} in {:.1} s",
                report.files.len() + 1,
                report.out_dir.display(),
                report.wall_time
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { manifest, out, workers } => {
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(".".as_ref()).join("replay"));
            let result = replay(&manifest, &out, workers)?;
            if result.mismatches.is_empty() {
                println!("replay matches: {} files identical", result.report.files.len());
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &result.mismatches {
                    eprintln!("differs: {}", f.display());
                }
                eprintln!("replay: {} of {} files differ", result.mismatches.len(), result.report.files.len());
                Ok(ExitCode::from(2))
            }
        }
    }
}
