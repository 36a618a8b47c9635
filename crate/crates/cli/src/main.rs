mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use querycat::trainer::TrainConfig;

/// Multi-label query classification: data tools, graph building, training,
/// evaluation and cached serving.
#[derive(Debug, Parser)]
#[command(name = "querycat", version)]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for every output file and the event log.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

/// Taxonomy, click log and optional knowledge records.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub clicks: PathBuf,
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print dataset statistics of a click log as JSON.
    Stats {
        #[arg(long)]
        clicks: PathBuf,
        /// Also check every clicked id against this taxonomy.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Write a synthetic corpus (taxonomy, clicks, knowledge, gold) to the output directory.
    Synth {
        #[arg(long, default_value_t = 50)]
        labels: usize,
        #[arg(long, default_value_t = 5000)]
        queries: usize,
        #[arg(long, default_value_t = 0.0)]
        tail_fraction: f64,
    },
    /// Build the label graphs from the training split.
    BuildGraph {
        #[command(flatten)]
        data: DataArgs,
        /// Take label embeddings from this checkpoint instead of a fresh encoder.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a model on the training split, validating every epoch.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Use this label graph instead of building one.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled query set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Queries to evaluate.
        #[arg(long)]
        clicks: PathBuf,
        /// Defaults to graph.jsonl next to the checkpoint.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Training clicks that define the head and tail buckets; defaults to the evaluated set.
        #[arg(long)]
        train_clicks: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write per-label rows as TSV.
        #[arg(long)]
        per_label: bool,
    },
    /// Classify one query from a leaf cache.
    Predict {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the label side once and write the serving cache.
    ExportCache {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Defaults to graph.jsonl next to the checkpoint.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Defaults to cache.bin in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer line-delimited JSON requests on stdin/stdout or a TCP socket.
    Serve {
        #[arg(long)]
        cache: PathBuf,
        /// TCP address such as 127.0.0.1:7878; standard streams when omitted.
        #[arg(long)]
        listen: Option<String>,
        /// Exit after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Classify every query of a JSONL file, one output line per input line.
    BatchPredict {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Dump the semi-supervised targets a checkpoint produces for each query.
    SemiTargets {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        clicks: PathBuf,
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Similarity threshold; defaults to the final tau of the schedule.
        #[arg(long)]
        tau: Option<f64>,
        /// Defaults to semi_targets.jsonl in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant and write a comparison table.
    ///
    /// Without data arguments a synthetic corpus is generated and scored on its gold queries.
    Ablate {
        #[arg(long, requires = "clicks")]
        taxonomy: Option<PathBuf>,
        #[arg(long, requires = "taxonomy")]
        clicks: Option<PathBuf>,
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Evaluation queries; defaults to the test split (or the synthetic gold set).
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        labels: usize,
        #[arg(long, default_value_t = 5000)]
        queries: usize,
        #[arg(long, default_value_t = 0.2)]
        tail_fraction: f64,
    },
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then `--seed`.
    pub fn resolve_config(&self) -> querycat::Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| querycat::Error::Config {
                key: kv.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            logging::event("error", serde_json::json!({ "message": e.to_string(), "exit_code": code }));
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
