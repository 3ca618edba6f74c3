use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use lcbm_cli::commands::{self, DictionaryArgs, EvalArgs, ExplainArgs, Metric};
use lcbm_cli::config::RunConfigFile;
use lcbm_cli::exit_code;
use lcbm_cli::service::{self, AppState};
use lcbm_core::checkpoint::load_checkpoint;
use lcbm_core::data::{default_data_root, DatasetKind, SampleSource};
use lcbm_core::eval::{DEFAULT_INTERVENTION_DRAWS, DEFAULT_INTERVENTION_GRID};
use lcbm_core::interpret::DEFAULT_TOP_K;
use lcbm_core::train::SeedPlan;
use lcbm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lcbm",
    version,
    about = "Train, evaluate and inspect learnable concept-based models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with the MNIST IDX files (default: $LCBM_DATA_ROOT or data/mnist).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Cache built datasets here.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Dataset of the checkpoint; inferred from its class count when omitted.
    #[arg(long)]
    dataset: Option<DatasetKind>,
}

impl DataArgs {
    fn root(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_else(default_data_root)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, the epoch log and the effective config.
    Train {
        /// YAML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Dataset when no config file is given.
        #[arg(long)]
        dataset: Option<DatasetKind>,
        /// Override any config field, e.g. `--set model.prior=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compute metrics for one or more checkpoints (mean and std across them).
    Eval {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated: accuracy, mse, f1, cas, cas_embedding, interventions, information.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "accuracy,mse,f1,cas,interventions"
        )]
        metrics: Vec<Metric>,
        /// Flip probabilities for the intervention curve.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_INTERVENTION_DRAWS)]
        draws: usize,
        /// Directory for report.json, report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the top activating samples per concept as JSON and PNG contact sheets.
    Dictionary {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value = "dictionary")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        scale: u32,
    },
    /// Explain one sample: JSON plus an importance bar plot next to it.
    Explain {
        checkpoint: PathBuf,
        #[arg(long)]
        index: usize,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API for the intervention explorer.
    Serve {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            run_dir,
            data_root,
            dataset,
            mut overrides,
        } => {
            let mut flags = Vec::new();
            if config.is_none() {
                let kind = dataset.ok_or_else(|| Error::config("pass --config or --dataset"))?;
                flags.push(format!("dataset={}", kind.name()));
            } else if let Some(kind) = dataset {
                flags.push(format!("dataset={}", kind.name()));
            }
            if let Some(s) = seed {
                flags.push(format!("seed={s}"));
            }
            if let Some(e) = epochs {
                flags.push(format!("train.epochs={e}"));
            }
            if let Some(d) = run_dir {
                flags.push(format!("run_dir={}", d.display()));
            }
            if let Some(d) = data_root {
                flags.push(format!("data_root={}", d.display()));
            }
            flags.append(&mut overrides);
            let cfg = RunConfigFile::load(config.as_deref(), &flags)?;
            let out = commands::train(&cfg)?;
            println!("{}", out.best_checkpoint.display());
        }
        Command::Eval {
            checkpoints,
            data,
            split,
            metrics,
            grid,
            draws,
            out,
        } => {
            let args = EvalArgs {
                checkpoints,
                dataset: data.dataset,
                split,
                metrics,
                data_root: data.root(),
                cache_dir: data.cache_dir.clone(),
                grid: grid.unwrap_or_else(|| DEFAULT_INTERVENTION_GRID.to_vec()),
                draws,
                out,
            };
            let report = commands::eval(&args)?;
            print!("{}", report.to_table());
        }
        Command::Dictionary {
            checkpoint,
            data,
            split,
            top_k,
            out,
            scale,
        } => {
            let dict = commands::dictionary(&DictionaryArgs {
                checkpoint,
                dataset: data.dataset,
                split,
                top_k,
                data_root: data.root(),
                cache_dir: data.cache_dir.clone(),
                out: out.clone(),
                scale,
            })?;
            println!(
                "{} concepts written to {}",
                dict.concepts.len(),
                out.display()
            );
        }
        Command::Explain {
            checkpoint,
            index,
            data,
            split,
            out,
        } => {
            let out =
                out.unwrap_or_else(|| PathBuf::from(format!("explanation_{split}_{index}.json")));
            let e = commands::explain(&ExplainArgs {
                checkpoint,
                dataset: data.dataset,
                split,
                index,
                data_root: data.root(),
                cache_dir: data.cache_dir.clone(),
                out: out.clone(),
            })?;
            println!(
                "sample {} predicted {} (score {:.4}); written to {}",
                index,
                e.predicted_class,
                e.predicted_score,
                out.display()
            );
        }
        Command::Serve {
            checkpoint,
            data,
            addr,
        } => {
            let (model, meta) = load_checkpoint::<f32>(&checkpoint)?;
            let kind = data
                .dataset
                .map_or_else(|| commands::infer_dataset(&model), Ok)?;
            let split = commands::load_split(
                kind,
                &data.root(),
                &SeedPlan::new(meta.seed),
                data.cache_dir.as_deref(),
            )?;
            let mut parts: BTreeMap<String, Arc<dyn SampleSource>> = BTreeMap::new();
            parts.insert("train".into(), Arc::new(split.train));
            parts.insert("validation".into(), Arc::new(split.validation));
            parts.insert("test".into(), Arc::new(split.test));
            let state = Arc::new(AppState::new(
                model,
                kind.name(),
                &checkpoint.display().to_string(),
                &meta,
                parts,
            ));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, &addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage mistakes are configuration errors; help and version are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
