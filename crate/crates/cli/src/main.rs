mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dumotion", version, about = "Synthetic co-speech motion diffusion with adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for the command's stochastic part; overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted override applied on top of the file, e.g. `train.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthData(Common),
    /// Train the base denoiser from scratch.
    Pretrain(Common),
    /// Inject adapters into a checkpoint and train them.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Score held-out clips every this many iterations.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Generate motion for the audio tracks of a dataset.
    Sample(Common),
    /// Score generated motion against a reference dataset.
    Evaluate(Common),
    /// Finetune and score every variant of an adapter grid.
    Ablate(Common),
    /// Render loss curves or velocity comparisons as SVG.
    Plot(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Path,
    Data,
    Runtime,
}

impl Category {
    fn code(self) -> u8 {
        match self {
            Category::Runtime => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Path => 4,
            Category::Data => 5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Runtime => "error",
            Category::Usage => "usage error",
            Category::Config => "config error",
            Category::Path => "path error",
            Category::Data => "data error",
        }
    }
}

/// An error with an explicit exit category.
#[derive(Debug)]
pub struct Tagged {
    pub category: Category,
    pub inner: anyhow::Error,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Tagged {}

pub trait Tag<T> {
    fn tag(self, category: Category) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn tag(self, category: Category) -> anyhow::Result<T> {
        self.map_err(|e| {
            Tagged {
                category,
                inner: e.into(),
            }
            .into()
        })
    }
}

fn category(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return t.category;
        }
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dumotion::Error>() {
            use dumotion::Error as E;
            return match e {
                E::Io { .. } => Category::Path,
                E::Manifest { .. } | E::Version { .. } | E::Truncated { .. } => Category::Data,
                E::Config(_) => Category::Config,
                _ => Category::Runtime,
            };
        }
        if cause.is::<std::io::Error>() {
            return Category::Path;
        }
    }
    Category::Runtime
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DUMOTION_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("DUMOTION_THREADS must be a positive integer, got `{raw}`"))
        .tag(Category::Config)?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::SynthData(c) => commands::synth_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Finetune { common, eval_every } => commands::finetune(&common, eval_every),
        Command::Sample(c) => commands::sample(&c),
        Command::Evaluate(c) => commands::evaluate(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Plot(c) => commands::plot(&c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Category::Usage.code())
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = category(&e);
            eprintln!("{}: {e:#}", c.label());
            ExitCode::from(c.code())
        }
    }
}
