//! `cellattn` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cellattn::config::parse_assignment;
use cellattn::data::Label;
use cellattn::error::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cellattn", version, about = "Multi-attention cell classifier: data, training, evaluation, explanation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for folds and per-image work.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Shortcuts for the most common model and training keys.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// `rgb` or `mhl`.
    #[arg(long)]
    pub family: Option<String>,
    /// `plain_cnn`, `residual` or `dense_concat`.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
}

impl ModelArgs {
    fn assignments(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("family", self.family.clone());
        push("backbone", self.backbone.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        out
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-class dataset and assign folds.
    Gen {
        #[arg(long)]
        n_normal: Option<usize>,
        #[arg(long)]
        n_meta: Option<usize>,
        #[arg(long)]
        image_side: Option<usize>,
    },
    /// Train one model and write its checkpoint and loss trace.
    Train {
        /// Manifest file or the directory holding `manifest.json`.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Hold out this fold and train on the augmented remainder.
        #[arg(long)]
        fold: Option<usize>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on a fold or on every raw image.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// GradCam maps and overlays for each image.
    Explain {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        /// Explain this class instead of each image's own label.
        #[arg(long)]
        class: Option<Label>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-class Gmean maps, correlation image and ratio scores.
    Aggregate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Output directory of a previous `explain`.
        #[arg(long)]
        saliency: PathBuf,
    },
    /// Pairwise Welch t-tests between cross-validation reports.
    Stats {
        /// `aggregate.json` files or run directories, optionally `NAME=PATH`.
        reports: Vec<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) | Error::Input(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numerical(_) | Error::Dimension(_) => 4,
    }
}

fn overrides(global: &GlobalArgs, extra: Vec<(String, String)>) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = global.set.iter().map(|s| parse_assignment(s)).collect::<Result<_>>()?;
    out.extend(extra);
    if let Some(seed) = global.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.jobs {
        if n == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    let g = &cli.global;
    let out = |default: &str| g.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Gen { n_normal, n_meta, image_side } => {
            let extra = [("n_normal", n_normal), ("n_meta", n_meta), ("image_side", image_side)]
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v.to_string())))
                .collect();
            commands::gen(&commands::settings(g, overrides(g, extra)?)?, &out("data"))
        }
        Command::Train { data, fold, init, model } => {
            let s = commands::settings(g, overrides(g, model.assignments())?)?;
            commands::train(s, &data, fold, init.as_deref(), &out("runs/train"))
        }
        Command::Cv { data, model } => {
            commands::cv(commands::settings(g, overrides(g, model.assignments())?)?, &data, &out("runs/cv"))
        }
        Command::Eval { data, checkpoint, fold, model } => {
            let s = commands::settings(g, overrides(g, model.assignments())?)?;
            commands::eval(s, &data, &checkpoint, fold, &out("runs/eval"))
        }
        Command::Explain { data, checkpoint, fold, class, model } => {
            let s = commands::settings(g, overrides(g, model.assignments())?)?;
            commands::explain(s, &data, &checkpoint, fold, class, &out("runs/explain"))
        }
        Command::Aggregate { data, saliency } => {
            commands::aggregate(commands::settings(g, overrides(g, Vec::new())?)?, &data, &saliency, &out("runs/aggregate"))
        }
        Command::Stats { reports, alpha } => {
            commands::stats(commands::settings(g, overrides(g, Vec::new())?)?, &reports, alpha, &out("runs/stats"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
