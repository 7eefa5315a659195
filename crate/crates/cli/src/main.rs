use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use riff_core::decoding::DecodeScheme;
use riff_core::estimators::EstimatorKind;
use riff_core::trainer::Regime;

mod commands;
mod config;
mod report;

use config::{ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "riff", version, about = "Reward-guided paraphrase fine-tuning experiments")]
struct Cli {
    /// Output root; defaults to $RIFF_OUT, then the current directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `name`.
    #[arg(long)]
    name: Option<String>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeAxis {
    On,
    Off,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic task, pretrain the paraphraser and warm up the classifier.
    Pretrain(RunArgs),
    /// Fine-tune the paraphraser against the classifier reward.
    RiffFinetune(RunArgs),
    /// Train the classifier on originals plus paraphrases.
    TrainClassifier(RunArgs),
    /// Test-set accuracy, ensemble accuracy and paraphrase diversity.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Policy checkpoint; overrides `policy_checkpoint`.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Classifier checkpoint; overrides `classifier_checkpoint`.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Compare exact gradients with finite differences on tiny instances.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Fine-tune every combination of the requested axes.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "mml,pg")]
        estimators: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "on,off,klon")]
        regimes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "beam,top_p,mixed")]
        decoders: Vec<String>,
        #[arg(long, value_enum, default_value = "both")]
        normalize: NormalizeAxis,
        /// Seeds to run; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides the config's `workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize run directories (searched recursively).
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the summary as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_or_default(args.config.as_deref())?;
    if let Some(n) = &args.name {
        cfg.name = n.clone();
    }
    if let Some(s) = args.seed {
        cfg.setup.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_axis<T: std::str::FromStr<Err = riff_core::RiffError>>(items: &[String]) -> anyhow::Result<Vec<T>> {
    if items.is_empty() {
        return Err(ConfigError("grid axis is empty".into()).into());
    }
    items.iter().map(|s| s.trim().parse::<T>().map_err(|e| ConfigError(e.to_string()).into())).collect()
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let root = cli.out.or_else(|| std::env::var_os("RIFF_OUT").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&load(&a)?, &root).map(|_| true),
        Command::RiffFinetune(a) => commands::riff_finetune(&load(&a)?, &root).map(|_| true),
        Command::TrainClassifier(a) => commands::train_classifier(&load(&a)?, &root).map(|_| true),
        Command::Evaluate { run, policy, classifier } => {
            let mut cfg = load(&run)?;
            cfg.policy_checkpoint = policy.or(cfg.policy_checkpoint);
            cfg.classifier_checkpoint = classifier.or(cfg.classifier_checkpoint);
            commands::evaluate(&cfg, &root).map(|_| true)
        }
        Command::OracleCheck { seed, instances } => {
            if instances == 0 {
                return Err(ConfigError("--instances must be at least 1".into()).into());
            }
            commands::oracle_check(seed, instances)
        }
        Command::Grid { run, estimators, regimes, decoders, normalize, seeds, workers } => {
            let mut cfg = load(&run)?;
            cfg.workers = workers.unwrap_or(cfg.workers);
            let normalize = match normalize {
                NormalizeAxis::On => vec![true],
                NormalizeAxis::Off => vec![false],
                NormalizeAxis::Both => vec![true, false],
            };
            let cells = commands::grid_cells(
                &parse_axis::<EstimatorKind>(&estimators)?,
                &parse_axis::<Regime>(&regimes)?,
                &parse_axis::<DecodeScheme>(&decoders)?,
                &normalize,
            );
            let seeds = if seeds.is_empty() { vec![cfg.seed()] } else { seeds };
            let dirs = commands::grid(&cfg, &cells, &seeds, &root)?;
            println!("grid: {} runs written under {}", dirs.len(), root.join("runs").display());
            Ok(true)
        }
        Command::Report { dirs, csv } => {
            let found = report::discover(&dirs).context("scanning run directories")?;
            let runs: Vec<report::RunSummary> = found.iter().map(|d| report::summarize_run(d)).collect();
            let cells = report::aggregate(&runs);
            if cells.is_empty() {
                anyhow::bail!("no training runs found");
            }
            print!("{}", report::to_text(&cells, &runs));
            if let Some(path) = csv {
                std::fs::write(&path, report::to_csv(&cells)).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("riff: config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("riff: {e:#}");
            ExitCode::from(1)
        }
    }
}
