//! `samurai`: train a model, capture per-layer counter traces, attack the
//! model, train a trace-based detector, then monitor and benchmark, all from
//! one JSON experiment config.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 stream
//! halted by a detection policy.

pub mod commands;
pub mod config;
pub mod datasets;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use samurai_core::apc::TimingMode;
use samurai_core::tanto::DetectionPolicy;

use commands::RunPaths;
use config::ExperimentConfig;
use datasets::Split;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TimingArg {
    Wallclock,
    Deterministic,
}

impl From<TimingArg> for TimingMode {
    fn from(arg: TimingArg) -> TimingMode {
        match arg {
            TimingArg::Wallclock => TimingMode::WallClock,
            TimingArg::Deterministic => TimingMode::Deterministic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    LogOnly,
    HaltOnDetect,
}

impl From<PolicyArg> for DetectionPolicy {
    fn from(arg: PolicyArg) -> DetectionPolicy {
        match arg {
            PolicyArg::LogOnly => DetectionPolicy::LogOnly,
            PolicyArg::HaltOnDetect => DetectionPolicy::HaltOnDetect,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "samurai",
    version,
    about = "Instrumented-inference pipeline: per-layer counters, attacks, trace-based detection"
)]
struct Cli {
    /// Experiment config JSON (required by every subcommand except verify-traces).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config timing mode.
    #[arg(long, global = true, value_enum)]
    timing: Option<TimingArg>,

    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and write model.apcm.
    Train,
    /// Capture counter traces for a dataset split.
    Extract {
        /// Model file (default: <out>/model.apcm).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Also export the split's input tensors as a workload container.
        #[arg(long)]
        export_inputs: bool,
    },
    /// Attack a split and export adversarial tensors, traces, and reports.
    Attack {
        /// Model file (default: <out>/model.apcm).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Clamp exported adversarial tensors to the [0,1] pixel range.
        /// Off by default: the attack itself never re-clips, since clipping
        /// would change the minimal perturbation it searches for.
        #[arg(long)]
        clip: bool,
    },
    /// Train a detector from clean and adversarial trace files.
    TrainDetector {
        /// Clean traces (default: <out>/traces-test.jsonl).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Adversarial traces (default: <out>/traces-adversarial.jsonl).
        #[arg(long)]
        adversarial: Option<PathBuf>,
    },
    /// Score a saved detector against labeled trace files.
    Evaluate {
        /// Detector file (default: <out>/detector.apcd).
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Clean traces (default: <out>/traces-test.jsonl).
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Adversarial traces (default: <out>/traces-adversarial.jsonl).
        #[arg(long)]
        adversarial: Option<PathBuf>,
    },
    /// Run monitored inference over a stored workload and log alerts.
    Monitor {
        /// Workload tensor container (e.g. inputs-test.apct or adversarial.apct).
        #[arg(long)]
        workload: PathBuf,
        /// Model file (default: <out>/model.apcm).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Detector file (default: <out>/detector.apcd).
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::LogOnly)]
        policy: PolicyArg,
    },
    /// Measure inference overhead of the counter-plus-detector path.
    BenchOverhead {
        /// Model file (default: <out>/model.apcm).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Detector file (default: <out>/detector.apcd).
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Inputs per timed loop (minimum 30).
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(30..))]
        inputs: u64,
        /// Timed repetitions; the reported figure is their median (minimum 5).
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
        repetitions: u64,
    },
    /// Verify the checksums and structure of trace files.
    VerifyTraces {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExitCode> {
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required for this command");
        return Err(USAGE);
    };
    let mut config = ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        DATA
    })?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(timing) = cli.timing {
        config.timing = timing.into();
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

type ExitCode = i32;

const OK: ExitCode = 0;
const USAGE: ExitCode = 1;
const DATA: ExitCode = 2;
const HALTED: ExitCode = 3;

fn dispatch(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::VerifyTraces { files } => {
            return match commands::cmd_verify_traces(files) {
                Ok(()) => OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    DATA
                }
            };
        }
        _ => load_config(&cli),
    };
    let config = match result {
        Ok(config) => config,
        Err(code) => return code,
    };
    let paths = RunPaths::new(&config.out_dir);
    let outcome = match cli.command {
        Command::Train => commands::cmd_train(&config).map(|()| OK),
        Command::Extract {
            model,
            split,
            export_inputs,
        } => {
            let model = model.unwrap_or_else(|| paths.model());
            commands::cmd_extract(&config, &model, split, export_inputs).map(|()| OK)
        }
        Command::Attack { model, split, clip } => {
            let model = model.unwrap_or_else(|| paths.model());
            commands::cmd_attack(&config, &model, split, clip).map(|()| OK)
        }
        Command::TrainDetector { clean, adversarial } => {
            let clean = clean.unwrap_or_else(|| paths.traces(Split::Test));
            let adversarial = adversarial.unwrap_or_else(|| paths.adversarial_traces());
            commands::cmd_train_detector(&config, &clean, &adversarial).map(|()| OK)
        }
        Command::Evaluate {
            detector,
            clean,
            adversarial,
        } => {
            let detector = detector.unwrap_or_else(|| paths.detector());
            let clean = clean.unwrap_or_else(|| paths.traces(Split::Test));
            let adversarial = adversarial.unwrap_or_else(|| paths.adversarial_traces());
            commands::cmd_evaluate(&config, &detector, &clean, &adversarial).map(|()| OK)
        }
        Command::Monitor {
            workload,
            model,
            detector,
            policy,
        } => {
            let model = model.unwrap_or_else(|| paths.model());
            let detector = detector.unwrap_or_else(|| paths.detector());
            commands::cmd_monitor(&config, &model, &detector, &workload, policy.into())
                .map(|halted| if halted { HALTED } else { OK })
        }
        Command::BenchOverhead {
            model,
            detector,
            inputs,
            repetitions,
        } => {
            let model = model.unwrap_or_else(|| paths.model());
            let detector = detector.unwrap_or_else(|| paths.detector());
            commands::cmd_bench_overhead(
                &config,
                &model,
                &detector,
                inputs as usize,
                repetitions as usize,
            )
            .map(|()| OK)
        }
        Command::VerifyTraces { .. } => unreachable!("handled before config loading"),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            DATA
        }
    }
}

/// Parses arguments and runs the selected command, returning the process
/// exit code.
pub fn run() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => dispatch(cli),
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => OK,
                _ => USAGE,
            };
            let _ = e.print();
            code
        }
    }
}
