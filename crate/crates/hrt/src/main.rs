use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hrt::commands::{self, AblationAxis};
use hrt::config::ExperimentConfig;
use hrt::dataset_io::Dtype;
use hrt::{HrtError, Result};
use hrt_core::dataset::Split;
use hrt_core::gradcheck::GradCheckOptions;
use hrt_core::metrics::EvalMode;

#[derive(Parser)]
#[command(name = "hrt", version, about = "Hybrid routing transformer for zero-shot learning")]
struct Cli {
    /// JSON experiment configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Train a model; writes checkpoint.bin, history.csv and config.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `init_seed` and `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint; writes metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check on the tiny configuration (or the
    /// one given with --config).
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep routing iteration counts 1..=5; writes ablation.csv.
    Ablate {
        #[arg(long, value_enum, default_value_t = AxisArg::Both)]
        axis: AxisArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dump agreement maps as agreement.csv.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Zsl,
    Gzsl,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    KTd,
    KEm,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    TestSeen,
    TestUnseen,
}

fn run(cli: Cli) -> Result<()> {
    let path = cli.config.as_deref();
    match cli.command {
        Command::Gen { out, seed, dtype } => {
            let mut config = ExperimentConfig::load_or_default(path)?;
            if let Some(s) = seed {
                config.data_seed = s;
            }
            let dtype = match dtype {
                DtypeArg::F32 => Dtype::F32,
                DtypeArg::F64 => Dtype::F64,
            };
            let ds = commands::gen(&config, &out, dtype)?;
            println!("wrote {} samples to {}", ds.samples().len(), out.display());
        }
        Command::Train { data, out, epochs, seed, quiet } => {
            let mut config = ExperimentConfig::load_or_default(path)?;
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(s) = seed {
                config.init_seed = s;
                config.train.seed = s;
            }
            commands::train(&config, &data, &out, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>4}  total {:.5}  ce {:.5}  cal {:.5}  reg {:.5}  acc {:.3}",
                        r.epoch, r.total, r.ce, r.cal, r.reg, r.train_acc
                    );
                }
            })?;
            println!("wrote checkpoint and history to {}", out.display());
        }
        Command::Eval { checkpoint, data, mode, out } => {
            let config = ExperimentConfig::load_or_default(path)?;
            let mode = match mode {
                ModeArg::Zsl => EvalMode::Zsl,
                ModeArg::Gzsl => EvalMode::Gzsl,
                ModeArg::Both => EvalMode::Both,
            };
            let report = commands::eval(&config, &checkpoint, &data, mode, &out)?;
            print!("{}", report.to_json());
        }
        Command::Gradcheck { step, tolerance, out } => {
            let config = match path {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::tiny(),
            };
            let opts = GradCheckOptions { step, tolerance, ..GradCheckOptions::default() };
            let report = commands::gradcheck(&config, &opts)?;
            print!("{}", commands::gradcheck_text(&report));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| HrtError::io(&dir, e))?;
                let p = dir.join("gradcheck.json");
                let json = serde_json::to_string_pretty(&report).expect("report serialises");
                std::fs::write(&p, json).map_err(|e| HrtError::io(p, e))?;
                config.write(&dir)?;
            }
            if !report.passed {
                return Err(HrtError::GradCheckFailed {
                    max_relative_error: report.max_relative_error,
                    tolerance: report.tolerance,
                });
            }
        }
        Command::Ablate { axis, out, epochs } => {
            let mut config = ExperimentConfig::load_or_default(path)?;
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            let axis = match axis {
                AxisArg::KTd => AblationAxis::KTd,
                AxisArg::KEm => AblationAxis::KEm,
                AxisArg::Both => AblationAxis::Both,
            };
            let rows = commands::ablate(&config, axis, |r| eprintln!("{} = {}: {:?}", r.axis, r.value, r.metrics))?;
            std::fs::create_dir_all(&out).map_err(|e| HrtError::io(&out, e))?;
            let p = out.join("ablation.csv");
            let csv = commands::ablation_csv(&rows);
            std::fs::write(&p, &csv).map_err(|e| HrtError::io(&p, e))?;
            config.write(&out)?;
            print!("{csv}");
        }
        Command::Report { checkpoint, data, out, split, limit } => {
            let split = split.map(|s| match s {
                SplitArg::Train => Split::Train,
                SplitArg::TestSeen => Split::TestSeen,
                SplitArg::TestUnseen => Split::TestUnseen,
            });
            let n = commands::report(&checkpoint, &data, split, limit, &out)?;
            println!("wrote agreement maps for {n} samples to {}", out.join("agreement.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
