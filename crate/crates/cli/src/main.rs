//! `spherecal`: generate benchmarks, train, evaluate, audit gradients, run
//! ablation grids, and render stored artifacts.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use spherecal_core::benchgen::Split;
use spherecal_core::run::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_report, cmd_train, AblateArgs,
    AblationChoice, EvalArgs, GenerateArgs, GradcheckArgs, Overrides, ReportArgs, RunError,
    SamplingChoice, TrainArgs,
};
use spherecal_core::sampler::SelectionMode;
use spherecal_core::trainer::Precision;

#[derive(Parser)]
#[command(
    name = "spherecal",
    version,
    about = "Multi-task contrastive retrieval trainer with spherical query calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval benchmark (JSONL plus resolved spec).
    Generate {
        /// Benchmark spec TOML.
        #[arg(long, value_name = "PATH", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in spec: multitask-mini or lambda-scale.
        #[arg(long, value_name = "NAME")]
        preset: Option<String>,
        /// Override the spec's seed.
        #[arg(long, value_name = "INT")]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model and write trace, run log, checkpoint, and test metrics.
    Train {
        /// Run configuration TOML.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Continue from an epoch-boundary checkpoint written by a previous
        /// run of the same configuration.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideFlags,
    },
    /// Evaluate a checkpoint on a benchmark split.
    Eval {
        /// Checkpoint written by `train`.
        checkpoint: PathBuf,
        /// Benchmark JSONL written by `generate`.
        benchmark: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitFlag::Test)]
        split: SplitFlag,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare every operation's analytic gradient against central finite
    /// differences, including the full objective at reduced widths.
    Gradcheck {
        /// Write gradcheck.json / gradcheck.txt here as well.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Test hook: corrupt the named op's analytic gradient and prove the
        /// checker fails on exactly that op.
        #[arg(long, value_name = "OP", hide = true)]
        corrupt_op: Option<String>,
    },
    /// Train the full variant grid across three seeds and consolidate the
    /// test metrics into one CSV.
    Ablate {
        /// Run configuration TOML providing the shared base settings.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideFlags,
    },
    /// Render the artifacts stored in a run directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct OverrideFlags {
    /// Root seed for data, initialization, and sampling streams.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Task sampling strategy.
    #[arg(long, value_enum)]
    sampling: Option<SamplingFlag>,
    /// How a task is drawn from the sampling distribution.
    #[arg(long, value_enum)]
    selection: Option<SelectionFlag>,
    /// Model variant for ablation studies.
    #[arg(long, value_enum)]
    ablation: Option<AblationFlag>,
    /// Parameter precision.
    #[arg(long, value_enum)]
    precision: Option<PrecisionFlag>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingFlag {
    Random,
    Ggas,
    #[value(name = "ggas-nosize")]
    GgasNosize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionFlag {
    Multinomial,
    Argmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationFlag {
    None,
    #[value(name = "ggas-only")]
    GgasOnly,
    #[value(name = "proposal_only")]
    ProposalOnly,
    Linear,
    Slerp,
    Shared,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionFlag {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitFlag {
    Train,
    Val,
    Test,
}

impl From<SplitFlag> for Split {
    fn from(f: SplitFlag) -> Split {
        match f {
            SplitFlag::Train => Split::Train,
            SplitFlag::Val => Split::Val,
            SplitFlag::Test => Split::Test,
        }
    }
}

impl From<&OverrideFlags> for Overrides {
    fn from(f: &OverrideFlags) -> Overrides {
        Overrides {
            seed: f.seed,
            out: f.out.clone(),
            sampling: f.sampling.map(|s| match s {
                SamplingFlag::Random => SamplingChoice::Random,
                SamplingFlag::Ggas => SamplingChoice::Ggas,
                SamplingFlag::GgasNosize => SamplingChoice::GgasNosize,
            }),
            selection: f.selection.map(|s| match s {
                SelectionFlag::Multinomial => SelectionMode::Multinomial,
                SelectionFlag::Argmax => SelectionMode::Argmax,
            }),
            ablation: f.ablation.map(|a| match a {
                AblationFlag::None => AblationChoice::None,
                AblationFlag::GgasOnly => AblationChoice::GgasOnly,
                AblationFlag::ProposalOnly => AblationChoice::ProposalOnly,
                AblationFlag::Linear => AblationChoice::Linear,
                AblationFlag::Slerp => AblationChoice::Slerp,
                AblationFlag::Shared => AblationChoice::Shared,
            }),
            precision: f.precision.map(|p| match p {
                PrecisionFlag::F32 => Precision::F32,
                PrecisionFlag::F64 => Precision::F64,
            }),
        }
    }
}

fn run(command: Command) -> Result<ExitCode, RunError> {
    match command {
        Command::Generate {
            config,
            preset,
            seed,
            out,
        } => {
            let outcome = cmd_generate(&GenerateArgs {
                config,
                preset,
                seed,
                out,
            })?;
            println!(
                "wrote {} records across {} datasets to {}",
                outcome.records,
                outcome.datasets,
                outcome.benchmark_path.display()
            );
            println!("resolved spec: {}", outcome.spec_path.display());
        }
        Command::Train {
            config,
            resume,
            overrides,
        } => {
            let summary = cmd_train(&TrainArgs {
                config,
                resume,
                overrides: (&overrides).into(),
            })?;
            println!("run complete: {}", summary.out_dir.display());
            println!("config hash: {}", summary.config_hash);
            print!("{}", summary.final_metrics);
        }
        Command::Eval {
            checkpoint,
            benchmark,
            split,
            out,
        } => {
            let summary = cmd_eval(&EvalArgs {
                checkpoint,
                benchmark,
                split: split.into(),
                out,
            })?;
            print!("{}", summary.metrics);
            println!("written: {}", summary.json_path.display());
        }
        Command::Gradcheck { out, corrupt_op } => {
            let report = cmd_gradcheck(&GradcheckArgs { corrupt_op, out })?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed: {}", report.failing_ops().join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate { config, overrides } => {
            let summary = cmd_ablate(&AblateArgs {
                config,
                overrides: (&overrides).into(),
            })?;
            print!("{}", std::fs::read_to_string(&summary.csv_path)?);
            println!("written: {}", summary.csv_path.display());
        }
        Command::Report { dir } => {
            let text = cmd_report(&ReportArgs { dir })?;
            print!("{text}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error and must exit 1 rather than clap's default 2.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
