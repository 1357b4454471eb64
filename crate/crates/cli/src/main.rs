use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bdlab::experiment::{self, DistSweepMode, ExperimentConfig, SweepCell, SweepTable};
use bdlab::tensor::ConvMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bdlab", version, about = "Blind Descent and gradient-check training of bias-free CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, summary and final weights.
    Train(RunArgs),
    /// Blind Descent over several batch sizes, uniform vs. normal proposals.
    SweepBatch {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512")]
        batch_sizes: Vec<usize>,
    },
    /// Blind Descent over proposal distributions (and freeze policies in grid mode).
    SweepDist {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = SweepMode::Grid)]
        mode: SweepMode,
    },
    /// Compare backpropagated gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = experiment::GRADCHECK_SEEDS)]
        seeds: u64,
        /// Scale the analytic gradient by this factor (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
    },
    /// Test accuracy of a saved weights file.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        weights: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepMode {
    Grid,
    Dist,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvModeArg {
    ChannelSum,
    Standard,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    subset_train: Option<usize>,
    #[arg(long)]
    subset_test: Option<usize>,
    #[arg(long, value_enum)]
    conv_mode: Option<ConvModeArg>,
    #[arg(long)]
    verbose_steps: bool,
}

impl RunArgs {
    fn load(&self) -> bdlab::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.trainer.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if self.subset_train.is_some() {
            cfg.subset_train = self.subset_train;
        }
        if self.subset_test.is_some() {
            cfg.subset_test = self.subset_test;
        }
        if let Some(mode) = self.conv_mode {
            cfg.trainer.conv_mode = match mode {
                ConvModeArg::ChannelSum => ConvMode::ChannelSum,
                ConvModeArg::Standard => ConvMode::Standard,
            };
        }
        cfg.verbose_steps |= self.verbose_steps;
        Ok(cfg)
    }
}

fn print_cell(cell: &SweepCell) {
    eprintln!(
        "cell ({}, {}) {}: accuracy {:.4}, acceptance {:.4}",
        cell.row,
        cell.col,
        cell.label,
        cell.summary.final_accuracy,
        cell.summary.acceptance_rate().unwrap_or(f64::NAN)
    );
}

fn write_table(cfg: &ExperimentConfig, table: &SweepTable) -> bdlab::Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let csv = table.to_csv();
    fs::write(cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> bdlab::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let summary = experiment::run_train(&cfg)?;
            print!("{}", experiment::summary_csv(&cfg, &summary));
        }
        Command::SweepBatch { run, batch_sizes } => {
            let cfg = run.load()?;
            let (train, test) = cfg.load_datasets()?;
            let table = experiment::sweep_batch(&cfg, &batch_sizes, &train, &test, print_cell)?;
            write_table(&cfg, &table)?;
        }
        Command::SweepDist { run, mode } => {
            let cfg = run.load()?;
            let (train, test) = cfg.load_datasets()?;
            let mode = match mode {
                SweepMode::Grid => DistSweepMode::Grid,
                SweepMode::Dist => DistSweepMode::Dist,
            };
            let table = experiment::sweep_dist(&cfg, mode, &train, &test, print_cell)?;
            write_table(&cfg, &table)?;
        }
        Command::Gradcheck { seeds, corrupt_backward } => {
            let report = experiment::gradcheck(seeds, corrupt_backward)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval { run, weights } => {
            let cfg = run.load()?;
            let accuracy = experiment::run_eval(&cfg, &weights)?;
            println!("test_accuracy,{}", experiment::fmt17(accuracy));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
