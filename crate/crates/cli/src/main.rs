use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use demokit::harness::{self, BuildInputs, Config, HarnessError, OfflineInputs, Session};

/// Demonstration knowledge, retrieval, offline replay and evaluation for
/// mobile GUI agents.
#[derive(Debug, Parser)]
#[command(name = "demokit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory (default: runs/<subcommand>).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// none, echo or scripted:<path>
    #[arg(long, global = true)]
    mock: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    tau_s: Option<f64>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trajectories to knowledge base.
    ParseDemos {
        #[arg(long)]
        trajectories: PathBuf,
        /// Keep the annotated before/after composites under logs/.
        #[arg(long)]
        debug_composites: bool,
    },
    /// Knowledge base to embedding index.
    Index {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Query an index.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        app: Option<String>,
    },
    /// Raw corpus to standardized split, combos and stats.
    BuildDataset {
        #[arg(long)]
        corpus: PathBuf,
        /// `task_id<TAB>app` lines.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Reuse a similarity file from an earlier build.
        #[arg(long)]
        similarity: Option<PathBuf>,
    },
    /// Replay episodes over a split.
    RunOffline {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        combos: Option<PathBuf>,
    },
    /// Predictions and gold to report.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        combos: Option<PathBuf>,
    },
    /// Split summary.
    Stats {
        #[arg(long, conflicts_with_all = ["trajectories", "combos"])]
        dataset: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        combos: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::ParseDemos { .. } => "parse-demos",
            Self::Index { .. } => "index",
            Self::Retrieve { .. } => "retrieve",
            Self::BuildDataset { .. } => "build-dataset",
            Self::RunOffline { .. } => "run-offline",
            Self::Evaluate { .. } => "evaluate",
            Self::Stats { .. } => "stats",
        }
    }
}

fn load_config(global: &Global) -> Result<Config> {
    let mut config = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for pair in &global.set {
        let Some((key, value)) = pair.split_once('=') else {
            bail!("--set {pair:?}: expected KEY=VALUE");
        };
        config.set(key.trim(), value.trim()).with_context(|| format!("--set {pair}"))?;
    }
    let flags = [
        ("workers", global.workers.map(|v| v.to_string())),
        ("mock", global.mock.clone()),
        ("k", global.k.map(|v| v.to_string())),
        ("tau_s", global.tau_s.map(|v| v.to_string())),
        ("max_steps", global.max_steps.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            config.set(key, &value)?;
        }
    }
    Ok(config)
}

fn run(cli: Cli, argv: Vec<String>) -> Result<String> {
    let config = load_config(&cli.global)?;
    let name = cli.command.name();
    let root = cli.global.run_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut session = Session::new(&config, &root, name, &argv)?;
    if let Some(path) = &cli.global.config {
        session.run.add_input("config", path)?;
    }
    let outcome = dispatch(&mut session, cli.command);
    session.finish()?;
    outcome
}

fn dispatch(session: &mut Session, command: Command) -> Result<String> {
    let report_text = |s: &Session| std::fs::read_to_string(s.run.root().join("report.txt")).unwrap_or_default();
    match command {
        Command::ParseDemos {
            trajectories,
            debug_composites,
        } => {
            harness::parse_demos(session, &trajectories, debug_composites)?;
        }
        Command::Index { kb } => {
            harness::index(session, &kb)?;
        }
        Command::Retrieve { index, query, app } => {
            harness::retrieve(session, &index, &query, app.as_deref())?;
        }
        Command::BuildDataset {
            corpus,
            labels,
            similarity,
        } => {
            harness::build_dataset(
                session,
                &BuildInputs {
                    corpus,
                    labels,
                    similarity,
                },
            )?;
        }
        Command::RunOffline {
            dataset,
            trajectories,
            kb,
            index,
            combos,
        } => {
            let inputs = OfflineInputs {
                dataset,
                trajectories,
                knowledge_base: kb,
                index,
                combos,
            };
            if let Err(e) = harness::run_offline(session, &inputs) {
                eprint!("{}", report_text(session));
                return Err(e.into());
            }
        }
        Command::Evaluate {
            predictions,
            gold,
            combos,
        } => {
            harness::evaluate(session, &predictions, &gold, combos.as_deref())?;
        }
        Command::Stats {
            dataset,
            trajectories,
            combos,
        } => {
            let (trajectories, combos) = match (dataset, trajectories) {
                (Some(manifest), _) => harness::dataset_stats_inputs(&manifest)?,
                (None, Some(t)) if !combos.is_empty() => (t, combos),
                _ => bail!("stats needs --dataset, or --trajectories with --combos"),
            };
            harness::stats(session, &trajectories, &combos)?;
        }
    }
    Ok(report_text(session))
}

fn exit_code(error: &anyhow::Error) -> u8 {
    let backend = error
        .chain()
        .filter_map(|e| e.downcast_ref::<HarnessError>())
        .any(HarnessError::is_backend);
    if backend {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, argv) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
