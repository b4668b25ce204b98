use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use optic4f_core::experiment::{
    cmd_compare, cmd_eval, cmd_ssim_study, cmd_throughput, cmd_train, flop_csv, flop_table, write_atomic,
    ExperimentConfig, SsimStudyOptions,
};
use optic4f_core::model::BackendKind;
use optic4f_core::optics::KernelPreset;
use optic4f_core::trainers::{AlgoConfig, Algorithm, PepitaConvRule};
use optic4f_core::{Error, LatencyModel};
use serde::Serialize;

/// Hardware-in-the-loop training experiments on a simulated 4f correlator.
#[derive(Parser)]
#[command(name = "optic4f", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm over every seed and write curves, records and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algorithm: Option<AlgoArg>,
    },
    /// Train BP and PEPITA on identical splits and report the accuracy gap.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Software versus device convolution fidelity (SSIM).
    SsimStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "edge-detect")]
        kernel: KernelArg,
        /// Number of test images (default: whole test split).
        #[arg(long)]
        count: Option<usize>,
        /// Calibrate camera noise to this mean SSIM first.
        #[arg(long)]
        calibrate: Option<f64>,
        /// Extra noise levels to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Closed-form update FLOP table.
    Flops {
        #[arg(long = "n", value_delimiter = ',', default_values_t = [16usize, 32, 64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        kernels: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_enum, default_value = "pointwise")]
        rule: RuleArg,
        /// Directory for flops.csv; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Images per second for a latency model.
    Throughput {
        #[arg(long, default_value_t = 25.0)]
        setup_ms: f64,
        #[arg(long, default_value_t = 20.0)]
        exposure_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        overhead_ms: f64,
        /// Sequential device invocations per image.
        #[arg(long, default_value_t = 1)]
        kernels: u32,
    },
    /// Test accuracy of a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Device,
    Software,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Bp,
    Pepita,
    Mempepita,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    EdgeDetect,
    Gaussian,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Pointwise,
    Correlation,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.data.seeds = self.seeds.clone();
        }
        if let Some(b) = self.backend {
            cfg.backend = match b {
                BackendArg::Device => BackendKind::Device,
                BackendArg::Software => BackendKind::Software,
                BackendArg::Oracle => BackendKind::Oracle,
            };
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(epochs) = self.epochs {
            cfg.hyper.epochs = epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Range(_) | Error::Shape(_) => 2,
        Error::Numerical(_) | Error::InvalidField(_) => 4,
        _ => 3,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common, algorithm } => {
            let mut cfg = common.load()?;
            if let Some(a) = algorithm {
                cfg.algo.algorithm = match a {
                    AlgoArg::Bp => Algorithm::Bp,
                    AlgoArg::Pepita => Algorithm::Pepita,
                    AlgoArg::Mempepita => Algorithm::Mempepita,
                };
            }
            print_json(&cmd_train(&cfg)?)
        }
        Command::Compare { common } => print_json(&cmd_compare(&common.load()?)?),
        Command::SsimStudy { common, kernel, count, calibrate, sweep } => {
            let cfg = common.load()?;
            let preset = match kernel {
                KernelArg::EdgeDetect => KernelPreset::EdgeDetect,
                KernelArg::Gaussian => KernelPreset::Gaussian,
                KernelArg::Random => KernelPreset::Random,
            };
            let opts = SsimStudyOptions { count, calibrate_to: calibrate, sweep };
            let mut report = cmd_ssim_study(&cfg, preset, &opts)?;
            report.per_image.clear();
            print_json(&report)
        }
        Command::Flops { sizes, kernels, classes, rule, out } => {
            let base = AlgoConfig {
                pepita_conv_rule: match rule {
                    RuleArg::Pointwise => PepitaConvRule::Pointwise,
                    RuleArg::Correlation => PepitaConvRule::Correlation,
                },
                ..AlgoConfig::default()
            };
            let csv = flop_csv(&flop_table(&sizes, kernels, classes, &base)?)?;
            if let Some(dir) = out {
                write_atomic(&dir.join("flops.csv"), &csv)?;
            }
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
        Command::Throughput { setup_ms, exposure_ms, overhead_ms, kernels } => print_json(&cmd_throughput(&LatencyModel {
            slm_setup_ms: setup_ms,
            exposure_ms,
            os_overhead_ms: overhead_ms,
            kernels_per_image: kernels,
        })?),
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let seed = cfg.data.seeds[0];
            print_json(&cmd_eval(&cfg, &checkpoint, seed)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
