mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{BackendKind, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "coe",
    version,
    about = "Concept atlases and explanation chains for vision classifiers"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Relevance quantile for concept selection, in (0, 1).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Atom merge policy: strict or lenient.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// Worker threads.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Directory of the response cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Synonym file for the lexical entailment backend.
    #[arg(long, global = true)]
    synonyms: Option<PathBuf>,
    #[arg(long = "backend.describer", global = true, value_enum)]
    describer: Option<BackendKind>,
    #[arg(long = "backend.entailment", global = true, value_enum)]
    entailment: Option<BackendKind>,
    #[arg(long = "backend.filter", global = true, value_enum)]
    filter: Option<BackendKind>,
    #[arg(long = "backend.synthesizer", global = true, value_enum)]
    synthesizer: Option<BackendKind>,
    #[arg(long = "backend.judge", global = true, value_enum)]
    judge: Option<BackendKind>,
    #[arg(long = "backend.captioner", global = true, value_enum)]
    captioner: Option<BackendKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Describe, cluster and score every channel of a concept manifest.
    BuildAcd {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report entropy scores from a concept database.
    Cpe {
        #[arg(long)]
        db: PathBuf,
        #[arg(long, value_enum, default_value_t = Level::Layer)]
        level: Level,
        /// Emit CSV instead of JSON.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the explanation chain and narrative of one sample.
    Explain {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        /// JSON map from sample id to caption.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Manifest to check the relevance file against.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score explanations with a judge or with human raters.
    #[command(subcommand)]
    Evaluate(Evaluate),
    /// Agreement between entropy and human polysemanticity verdicts.
    Consistency {
        /// JSON list of concept pairs with three human ratings each.
        #[arg(long)]
        pairs: PathBuf,
        /// Database to read missing entropy values from.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw an outcome-stratified evaluation sample.
    Sample {
        /// JSON list of {sample_id, label, prediction}.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        correct_share: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum Evaluate {
    /// Score chain narratives with the judge backend.
    Judge {
        #[arg(long, num_args = 1.., required = true)]
        chains: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write anonymized records and blank score sheets for raters.
    Export {
        /// JSON list of samples with explanations keyed by method.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read filled score sheets and aggregate per method.
    Import {
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        sheets: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Level {
    Channel,
    Layer,
    Model,
}

fn resolve_config(args: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(p) = &args.policy {
        config.policy = p.clone();
    }
    if let Some(p) = args.parallel {
        config.parallel = p;
    }
    if let Some(d) = &args.cache_dir {
        config.cache_dir = d.clone();
    }
    if let Some(s) = &args.synonyms {
        config.synonyms = Some(s.clone());
    }
    let b = &mut config.backends;
    for (slot, flag) in [
        (&mut b.describer, args.describer),
        (&mut b.entailment, args.entailment),
        (&mut b.filter, args.filter),
        (&mut b.synthesizer, args.synthesizer),
        (&mut b.judge, args.judge),
        (&mut b.captioner, args.captioner),
    ] {
        if let Some(kind) = flag {
            *slot = kind;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve_config(&cli.global)?;
    match cli.command {
        Command::BuildAcd { manifest, out } => commands::build_acd(&config, &manifest, &out),
        Command::Cpe { db, level, csv, out } => {
            let level = match level {
                Level::Channel => commands::CpeLevel::Channel,
                Level::Layer => commands::CpeLevel::Layer,
                Level::Model => commands::CpeLevel::Model,
            };
            commands::cpe(&config, &db, level, csv, out.as_deref())
        }
        Command::Explain {
            db,
            relevance,
            captions,
            manifest,
            out,
        } => commands::explain(
            &config,
            &db,
            &relevance,
            captions.as_deref(),
            manifest.as_deref(),
            out.as_deref(),
        ),
        Command::Evaluate(Evaluate::Judge { chains, out }) => commands::judge(&config, &chains, out.as_deref()),
        Command::Evaluate(Evaluate::Export { samples, groups, out }) => commands::export(&samples, groups, &out),
        Command::Evaluate(Evaluate::Import { mapping, sheets, out }) => {
            commands::import(&mapping, &sheets, out.as_deref())
        }
        Command::Consistency { pairs, db, out } => commands::consistency(&pairs, db.as_deref(), out.as_deref()),
        Command::Sample {
            outcomes,
            n,
            correct_share,
            seed,
            out,
        } => commands::sample(&outcomes, n, correct_share, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
