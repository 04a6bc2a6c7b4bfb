//! `fcbir`: late-fusion SIFT + FREAK image retrieval pipeline.

mod commands;
mod config;
mod error;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fcbir_core::encoder::ChannelMode;
use fcbir_core::features::Channels;
use fcbir_core::retrieval::RankingRule;

use crate::config::Settings;
use crate::error::CliError;
use crate::workspace::Workspace;

#[derive(Parser)]
#[command(name = "fcbir", version, about = "Bag-of-visual-words image retrieval with late SIFT + FREAK fusion")]
struct Cli {
    /// Workspace directory holding all pipeline artifacts.
    #[arg(long, short = 'w', global = true, env = "FCBIR_WORKSPACE", default_value = "fcbir-workspace")]
    workspace: PathBuf,

    /// Base seed for every randomized step (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Maximum worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    Sift,
    Freak,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fused,
    Sift,
    Freak,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    PredictedClassScore,
    QueryClassScore,
    ScoreSpace,
}

#[derive(Subcommand)]
enum Command {
    /// Index a `<root>/<class>/<image>` dataset and draw the train/test split.
    Scan {
        dataset: PathBuf,
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Detect keypoints and compute descriptors for every image.
    Extract {
        #[arg(long, value_enum, default_value = "both")]
        channel: ChannelArg,
    },
    /// Build one visual vocabulary per descriptor channel from the training split.
    Codebook {
        /// Codebook size Z.
        #[arg(long, short = 'z')]
        size: Option<usize>,
        /// Fraction of each training image's descriptors fed to k-means.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Quantize every image into its fused histogram vector.
    Encode,
    /// Train the one-vs-rest classifier on the training split.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        c_reg: Option<f64>,
    },
    /// Rank the corpus against a query image.
    Query {
        image: PathBuf,
        #[arg(long, short = 'k')]
        k: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        rule: Option<RuleArg>,
        /// Search only the test split instead of the whole corpus.
        #[arg(long)]
        test_only: bool,
        /// Also write an HTML gallery of the results.
        #[arg(long)]
        html: Option<PathBuf>,
    },
    /// Run the repeated-split experiment over the configured grid and write reports.
    #[command(alias = "sweep")]
    Evaluate,
    /// Write the synthetic three-class texture dataset.
    GenSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Select FREAK comparison pairs from the training split; later extractions use them.
    TrainPairs,
}

fn mode_of(m: ModeArg) -> ChannelMode {
    match m {
        ModeArg::Fused => ChannelMode::Fused,
        ModeArg::Sift => ChannelMode::SiftOnly,
        ModeArg::Freak => ChannelMode::FreakOnly,
    }
}

fn rule_of(r: RuleArg) -> RankingRule {
    match r {
        RuleArg::PredictedClassScore => RankingRule::PredictedClassScore,
        RuleArg::QueryClassScore => RankingRule::QueryClassScore,
        RuleArg::ScoreSpace => RankingRule::ScoreSpace,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if cli.threads.is_some() {
        settings.threads = cli.threads;
    }
    if let Some(n) = settings.threads {
        if n == 0 {
            return Err(CliError::new("parameter", "--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("internal", e.to_string()))?;
    }
    let ws = Workspace::new(cli.workspace);

    match cli.command {
        Command::Scan { dataset, train_fraction } => {
            if let Some(f) = train_fraction {
                settings.train_fraction = f;
            }
            commands::scan(&ws, &dataset, &settings)
        }
        Command::Extract { channel } => {
            let channels = match channel {
                ChannelArg::Sift => Channels { sift: true, freak: false },
                ChannelArg::Freak => Channels { sift: false, freak: true },
                ChannelArg::Both => Channels::BOTH,
            };
            commands::extract(&ws, channels, &settings)
        }
        Command::Codebook { size, fraction } => {
            if let Some(z) = size {
                settings.codebook_size = z;
            }
            if let Some(f) = fraction {
                settings.feature_fraction = f;
            }
            commands::codebook(&ws, &settings)
        }
        Command::Encode => commands::encode(&ws),
        Command::Train { mode, c_reg } => {
            if let Some(m) = mode {
                settings.mode = mode_of(m);
            }
            if let Some(c) = c_reg {
                settings.svm.c_reg = c;
            }
            commands::train(&ws, &settings)
        }
        Command::Query {
            image,
            k,
            mode,
            rule,
            test_only,
            html,
        } => {
            if let Some(m) = mode {
                settings.mode = mode_of(m);
            }
            if let Some(r) = rule {
                settings.ranking = rule_of(r);
            }
            let args = commands::QueryArgs {
                image: &image,
                k: k.unwrap_or(settings.top_k),
                test_only,
                html: html.as_deref(),
            };
            commands::query(&ws, &settings, &args)
        }
        Command::Evaluate => commands::evaluate(&ws, &settings),
        Command::GenSynthetic { out, per_class, size } => {
            commands::gen_synthetic(&out, per_class, size, settings.seed)
        }
        Command::TrainPairs => commands::train_pairs(&ws, &settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", error::category(&err), error::one_line(&err));
            ExitCode::FAILURE
        }
    }
}
