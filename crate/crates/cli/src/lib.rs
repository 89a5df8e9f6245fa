//! `nsvt` command line: segmentation maps, classification, toy training,
//! gradient checks and grouping benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod palette;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{PathKind, RunConfig};
use error::{CliError, CliResult, EXIT_CONFIG, EXIT_OK};
use nsvt_core::train::Task;
use nsvt_core::Error;

#[derive(Debug, Parser)]
#[command(name = "nsvt", version, about = "Grouping-based vision backbone with native segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage segment maps, label map and stats for one PPM image.
    Segment {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Add per-phase wallclock to stats.json (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Class scores for one PPM image.
    Classify {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured model on synthetic shapes.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        task: Option<Task>,
    },
    /// Tape gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale every tape gradient by 1.01; the check must then fail.
        #[arg(long)]
        corrupt_vjp: bool,
    },
    /// Grouping wall time across input sizes as CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated input grid sides.
        #[arg(long, value_delimiter = ',')]
        sides: Option<Vec<usize>>,
    },
    /// Print the effective configuration as JSON.
    InitConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, conflicts_with = "reference")]
    pub sparse: bool,
    #[arg(long)]
    pub reference: bool,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Replace the stage 1→2 grouping with a strided convolution.
    #[arg(long)]
    pub no_group_s1: bool,
    /// Replace the stage 2→3 grouping with a strided convolution.
    #[arg(long)]
    pub no_group_s2: bool,
    /// Replace the dense stage 3→4 grouping with a strided convolution.
    #[arg(long)]
    pub dense_s3_off: bool,
}

impl Common {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(w) = &self.weights {
            c.weights = Some(w.clone());
        }
        if let Some(e) = &self.embeddings {
            c.embeddings = Some(e.clone());
        }
        if self.sparse {
            c.path = PathKind::Sparse;
        }
        if self.reference {
            c.path = PathKind::Reference;
        }
        if let Some(e) = self.eps {
            c.eps = e;
        }
        c.grouping.s1 &= !self.no_group_s1;
        c.grouping.s2 &= !self.no_group_s2;
        c.grouping.dense_s3 &= !self.dense_s3_off;
        Ok(c)
    }
}

/// Caps the global worker pool from `NSVT_THREADS`.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NSVT_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("NSVT_THREADS must be a positive integer, got {v:?}")))?;
    // A pool may already exist when embedded in a test harness.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn print_json(v: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Segment { image, common, timing } => {
            let cfg = common.resolve()?;
            let r = commands::segment::segment(&cfg, &image, timing)?;
            for f in &r.files {
                println!("{}", f.display());
            }
        }
        Command::Classify { image, common } => print_json(&commands::segment::classify(&common.resolve()?, &image)?)?,
        Command::TrainToy { common, steps, task } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(t) = task {
                cfg.task = t;
            }
            print_json(&commands::train::train_toy(&cfg, true)?)?;
        }
        Command::Gradcheck { common, corrupt_vjp } => {
            let cfg = common.resolve()?;
            let report = commands::gradcheck::run(commands::gradcheck::GradcheckOptions { seed: cfg.seed, corrupt: corrupt_vjp })?;
            print_json(&report)?;
            if !report.pass {
                let bad: Vec<_> = report.components.iter().filter(|c| !c.pass).map(|c| c.component.as_str()).collect();
                return Err(CliError::Tolerance(format!("gradient mismatch in {}", bad.join(", "))));
            }
        }
        Command::Bench { common, sides } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = sides {
                cfg.bench.sides = s;
            }
            let paths = match (common.sparse, common.reference) {
                (true, _) => vec![PathKind::Sparse],
                (_, true) => vec![PathKind::Reference],
                _ => vec![PathKind::Sparse, PathKind::Reference],
            };
            println!("{}", commands::bench::CSV_HEADER);
            let report = commands::bench::run(&cfg.bench, &paths, cfg.eps, cfg.seed, |r| println!("{}", r.csv()))?;
            for s in &report.skipped {
                eprintln!("skipped {s}");
            }
            if let Some(r) = report.ratio_128_64 {
                eprintln!("sparse 128/64 time ratio: {r:.3}");
            }
        }
        Command::InitConfig { common } => print!("{}", commands::init_config(&common.resolve()?)),
    }
    Ok(())
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
