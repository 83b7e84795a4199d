//! `hiercurric` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numeric
//! fault during training, 4 I/O failure.

mod commands;
mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hiercurric::taxonomy::{HeightMode, Level};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError { code: 4, msg: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<hiercurric::Error> for CliError {
    fn from(e: hiercurric::Error) -> Self {
        use hiercurric::Error as E;
        let code = match &e {
            E::NumericFault { .. } => 3,
            E::Io { .. } => 4,
            E::Csv(c) if c.is_io_error() => 4,
            _ => 2,
        };
        CliError { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "hiercurric", version, about = "Basic-level-first curriculum training toolkit")]
struct Cli {
    /// Worker threads for work that parallelizes across regimes, splits or
    /// image pairs. A single training run always uses one thread.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeightArg {
    Longest,
    Shortest,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Basic,
    Sub,
}

#[derive(Subcommand)]
enum Command {
    /// Allocate leaves to basic categories; write the label map and the
    /// basic-category height histogram.
    Taxonomy {
        /// `parent>child` edge list.
        #[arg(long)]
        synsets: PathBuf,
        /// Basic-category node ids, one per line.
        #[arg(long)]
        marks: PathBuf,
        #[arg(long, value_enum, default_value = "longest")]
        height_mode: HeightArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cap the number of training samples per category.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        synsets: PathBuf,
        #[arg(long)]
        marks: PathBuf,
        #[arg(long, value_enum, default_value = "basic")]
        level: LevelArg,
        #[arg(long)]
        cap: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic two-level image hierarchy.
    Synth {
        /// TOML file with synthetic-data fields; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_basic: Option<usize>,
        #[arg(long)]
        subs_per_basic: Option<usize>,
        #[arg(long)]
        samples_per_sub: Option<usize>,
        /// `C,H,W`
        #[arg(long, value_delimiter = ',')]
        image_size: Option<Vec<usize>>,
        #[arg(long)]
        prototype_scale: Option<f64>,
        #[arg(long)]
        subordinate_scale: Option<f64>,
        #[arg(long)]
        noise_scale: Option<f64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find near-duplicate images between two manifests.
    Dedup {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        #[arg(long, default_value_t = hiercurric::dataprep::DEFAULT_NCC_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every regime of an experiment config.
    Train {
        config: PathBuf,
        /// Replace every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and print each model's shape chain.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frozen-feature probe of a checkpoint; leaf ids are the classes.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Training images per class; one probe per value.
        #[arg(long, value_delimiter = ',', required = true)]
        n_train: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        max_test: usize,
        #[arg(long, default_value_t = 3)]
        splits: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe accuracy across a series of checkpoints.
    Sweep {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n_train: usize,
        /// Series label in the output.
        #[arg(long, default_value = "transfer")]
        dataset: String,
        #[arg(long, default_value_t = 50)]
        max_test: usize,
        #[arg(long, default_value_t = 3)]
        splits: usize,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `--out`, then `fallback`, then `$HIERCURRIC_OUT`.
fn output_dir(flag: Option<PathBuf>, fallback: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or(fallback)
        .or_else(|| std::env::var_os("HIERCURRIC_OUT").map(PathBuf::from))
        .ok_or_else(|| CliError::config("no output directory: pass --out or set HIERCURRIC_OUT"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))?;
    match cli.command {
        Command::Taxonomy { synsets, marks, height_mode, out } => {
            let mode = match height_mode {
                HeightArg::Longest => HeightMode::Longest,
                HeightArg::Shortest => HeightMode::Shortest,
            };
            commands::taxonomy(&synsets, &marks, mode, &output_dir(out, None)?)
        }
        Command::Prepare { manifest, synsets, marks, level, cap, seed, out } => {
            let level = match level {
                LevelArg::Basic => Level::Basic,
                LevelArg::Sub => Level::Sub,
            };
            commands::prepare(&manifest, &synsets, &marks, level, cap, seed, &output_dir(out, None)?)
        }
        Command::Synth {
            config,
            n_basic,
            subs_per_basic,
            samples_per_sub,
            image_size,
            prototype_scale,
            subordinate_scale,
            noise_scale,
            seed,
            out,
        } => {
            let image_size = match image_size.as_deref() {
                None => None,
                Some(&[c, h, w]) => Some([c, h, w]),
                Some(v) => return Err(CliError::config(format!("--image-size needs C,H,W; got {} values", v.len()))),
            };
            let overrides = commands::SynthOverrides {
                n_basic,
                subs_per_basic,
                samples_per_sub,
                image_size,
                prototype_scale,
                subordinate_scale,
                noise_scale,
            };
            commands::synth(config.as_deref(), overrides, seed, &output_dir(out, None)?)
        }
        Command::Dedup { set_a, set_b, threshold, out } => commands::dedup(&set_a, &set_b, threshold, &output_dir(out, None)?),
        Command::Train { config, seed, dry_run, out } => commands::train(&config, seed, dry_run, out),
        Command::Probe { checkpoint, manifest, n_train, max_test, splits, iterations, layer, seed, out } => {
            let opts = commands::ProbeOptions { max_test, splits, iterations, layer, seed };
            commands::probe(&checkpoint, &manifest, &n_train, &opts, &output_dir(out, None)?)
        }
        Command::Sweep { checkpoints, manifest, n_train, dataset, max_test, splits, iterations, seed, out } => {
            let opts = commands::ProbeOptions { max_test, splits, iterations, layer: None, seed };
            commands::sweep(&checkpoints, &manifest, n_train, &dataset, &opts, &output_dir(out, None)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
