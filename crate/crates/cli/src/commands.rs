use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use querycat::data::{
    compute_stats, load_clicks, load_clicks_unchecked, load_knowledge, load_taxonomy, split_dataset, write_clicks,
    KnowledgeBase, Split, Taxonomy,
};
use querycat::eval::ROW_COLUMNS;
use querycat::serving::{batch_predict, export_cache, predict_from_cache, serve_stream, serve_tcp};
use querycat::synth::{generate_synthetic, SyntheticCorpus};
use querycat::trainer::{
    build_graph_for, build_vocab, evaluate, leaf_click_counts, semi_targets_for, train, write_metrics_log, ModelState,
    Predictor, TrainConfig, TrainOutcome, Variant,
};
use querycat::{Cache, Error, Graph, Model, Report, Result};
use serde_json::json;

use crate::logging::{self, event};
use crate::{Cli, Command, DataArgs};

pub const MODEL_FILE: &str = "model.json";
pub const BEST_MODEL_FILE: &str = "best.json";
pub const GRAPH_FILE: &str = "graph.jsonl";
pub const CACHE_FILE: &str = "cache.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.cfg";
pub const EVENTS_FILE: &str = "events.jsonl";

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{value}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| io_err(&cli.out_dir, e))?;
    logging::init(Some(&cli.out_dir.join(EVENTS_FILE)));
    let config = cli.resolve_config()?;
    eprint!("resolved config:\n{}", config.to_kv_string());
    event("config", json!({ "command": command_name(&cli.command), "config": config }));

    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Stats { clicks, taxonomy } => stats(clicks, taxonomy.as_deref()),
        Command::Synth {
            labels,
            queries,
            tail_fraction,
        } => synth(&config, out, *labels, *queries, *tail_fraction),
        Command::BuildGraph { data, model } => build_graph(&config, out, data, model.as_deref()),
        Command::Train { data, graph } => train_cmd(&config, out, data, graph.as_deref()),
        Command::Eval {
            model,
            taxonomy,
            clicks,
            graph,
            train_clicks,
            threshold,
            per_label,
        } => eval_cmd(
            out,
            model,
            taxonomy,
            clicks,
            graph.as_deref(),
            train_clicks.as_deref(),
            threshold.unwrap_or(config.decision_threshold),
            *per_label,
        ),
        Command::Predict { cache, query, threshold } => {
            let cache = Cache::load(cache)?;
            let labels = predict_from_cache(query, &cache, threshold.unwrap_or(config.decision_threshold))?;
            print_json(&json!({ "query": query, "labels": labels }))
        }
        Command::ExportCache {
            model,
            taxonomy,
            graph,
            out: target,
        } => {
            let (model, taxonomy, graph) = load_model_bundle(model, taxonomy, graph.as_deref())?;
            let path = target.clone().unwrap_or_else(|| out.join(CACHE_FILE));
            let cache = export_cache(&model, graph.as_ref(), &taxonomy, &path)?;
            info!("wrote cache for {} leaves to {}", cache.num_leaves(), path.display());
            event("export-cache", json!({ "path": path, "leaves": cache.num_leaves() }));
            Ok(())
        }
        Command::Serve {
            cache,
            listen,
            max_connections,
        } => serve(cache, listen.as_deref(), *max_connections),
        Command::BatchPredict {
            cache,
            input,
            output,
            threshold,
        } => {
            let cache = Cache::load(cache)?;
            let n = batch_predict(input, &cache, output, threshold.unwrap_or(config.decision_threshold))?;
            info!("wrote {n} predictions to {}", output.display());
            event("batch-predict", json!({ "lines": n, "path": output }));
            Ok(())
        }
        Command::SemiTargets {
            model,
            taxonomy,
            clicks,
            knowledge,
            tau,
            out: target,
        } => semi_targets(
            out,
            model,
            taxonomy,
            clicks,
            knowledge.as_deref(),
            tau.unwrap_or(config.tau_end),
            target.as_deref(),
        ),
        Command::Ablate {
            taxonomy,
            clicks,
            knowledge,
            gold,
            labels,
            queries,
            tail_fraction,
        } => {
            let data = match (taxonomy, clicks) {
                (Some(taxonomy), Some(clicks)) => Some(DataArgs {
                    taxonomy: taxonomy.clone(),
                    clicks: clicks.clone(),
                    knowledge: knowledge.clone(),
                }),
                _ => None,
            };
            ablate(&config, out, data, gold.as_deref(), (*labels, *queries, *tail_fraction))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Stats { .. } => "stats",
        Command::Synth { .. } => "synth",
        Command::BuildGraph { .. } => "build-graph",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Predict { .. } => "predict",
        Command::ExportCache { .. } => "export-cache",
        Command::Serve { .. } => "serve",
        Command::BatchPredict { .. } => "batch-predict",
        Command::SemiTargets { .. } => "semi-targets",
        Command::Ablate { .. } => "ablate",
    }
}

fn stats(clicks: &Path, taxonomy: Option<&Path>) -> Result<()> {
    let samples = match taxonomy {
        Some(t) => load_clicks(clicks, &load_taxonomy(t)?)?,
        None => load_clicks_unchecked(clicks)?,
    };
    let stats = compute_stats(&samples)?;
    event("stats", json!({ "stats": stats }));
    print_json(&json!(stats))
}

fn synth(config: &TrainConfig, out: &Path, labels: usize, queries: usize, tail: f64) -> Result<()> {
    let corpus = generate_synthetic(labels, queries, tail, config.seed)?;
    corpus.write_to_dir(out)?;
    let summary = json!({
        "labels": corpus.taxonomy.num_leaves(),
        "nodes": corpus.taxonomy.num_nodes(),
        "queries": corpus.samples.len(),
        "gold": corpus.gold.len(),
        "knowledge": corpus.knowledge.len(),
        "tail_leaves": corpus.tail_leaves.len(),
        "seed": config.seed,
    });
    info!("wrote synthetic corpus to {}", out.display());
    event("synth", summary.clone());
    print_json(&summary)
}

struct Loaded {
    taxonomy: Taxonomy,
    knowledge: KnowledgeBase,
    split: Split,
}

fn load_data(data: &DataArgs, config: &TrainConfig) -> Result<Loaded> {
    let taxonomy = load_taxonomy(&data.taxonomy)?;
    let samples = load_clicks(&data.clicks, &taxonomy)?;
    let knowledge = match &data.knowledge {
        Some(p) => load_knowledge(p)?,
        None => KnowledgeBase::new(),
    };
    querycat::data::check_knowledge_refs(&samples, &knowledge)?;
    let split = split_dataset(&samples, config.split_ratios, config.seed)?;
    info!(
        "loaded {} nodes, {} queries (train {}, val {}, test {})",
        taxonomy.num_nodes(),
        samples.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Loaded {
        taxonomy,
        knowledge,
        split,
    })
}

fn build_graph(config: &TrainConfig, out: &Path, data: &DataArgs, model: Option<&Path>) -> Result<()> {
    let (model, config) = match model {
        Some(p) => {
            let (m, _) = Model::load(p)?;
            info!("rebuilding the graph from the encoder in {}", p.display());
            let c = m.config.clone();
            (Some(m), c)
        }
        None => (None, config.clone()),
    };
    let d = load_data(data, &config)?;
    // without a checkpoint, the same fresh model `train` starts from
    let model = match model {
        Some(m) => m,
        None => {
            let vocab = build_vocab(&d.split.train, &d.taxonomy, &d.knowledge, config.tokenizer);
            ModelState::init(&config, vocab, &d.taxonomy)
        }
    };
    let graph = build_graph_for(&model, &d.taxonomy, &d.split.train)?;
    let path = out.join(GRAPH_FILE);
    graph.save(&path)?;
    let edges = |m: &querycat::graph::AdjMatrix<f64>| m.triplets().len();
    let summary = json!({
        "path": path,
        "nodes": graph.num_nodes,
        "leaves": graph.num_leaves,
        "coo_edges": edges(&graph.coo),
        "sim_edges": edges(&graph.sim),
        "hier_edges": edges(&graph.hier),
    });
    info!("wrote label graph to {}", path.display());
    event("build-graph", summary.clone());
    print_json(&summary)
}

fn train_cmd(config: &TrainConfig, out: &Path, data: &DataArgs, graph: Option<&Path>) -> Result<()> {
    let d = load_data(data, config)?;
    let graph = graph.map(Graph::load).transpose()?;
    write_file(&out.join(CONFIG_FILE), &config.to_kv_string())?;
    for (name, part) in [("train", &d.split.train), ("val", &d.split.val), ("test", &d.split.test)] {
        write_clicks(out.join(format!("{name}.jsonl")), part)?;
    }
    let outcome = train::<f64>(config, &d.taxonomy, &d.split.train, &d.split.val, &d.knowledge, graph)?;
    for m in &outcome.log {
        event("epoch", json!(m));
    }
    let summary = save_outcome(out, &outcome)?;
    event("train", summary.clone());
    print_json(&summary)
}

fn save_outcome(out: &Path, outcome: &TrainOutcome<f64>) -> Result<serde_json::Value> {
    outcome.model.save(out.join(MODEL_FILE), Some(&outcome.adam))?;
    if let Some(best) = &outcome.best {
        best.save(out.join(BEST_MODEL_FILE), None)?;
    }
    if let Some(g) = &outcome.graph {
        g.save(out.join(GRAPH_FILE))?;
    }
    write_metrics_log(out.join(METRICS_FILE), &outcome.log)?;
    let best = outcome
        .log
        .iter()
        .filter_map(|m| m.val_micro_f1.map(|f| (m.epoch, f)))
        .fold(None, |acc: Option<(usize, f64)>, x| match acc {
            Some(a) if a.1 >= x.1 => Some(a),
            _ => Some(x),
        });
    if let Some((epoch, f1)) = best {
        info!("best validation micro-F1 {f1:.4} at epoch {epoch}");
    }
    Ok(json!({
        "epochs": outcome.log.len(),
        "final_train_loss": outcome.log.last().map(|m| m.train_loss),
        "best_epoch": best.map(|b| b.0),
        "best_val_micro_f1": best.map(|b| b.1),
        "model": out.join(MODEL_FILE),
        "best_model": outcome.best.as_ref().map(|_| out.join(BEST_MODEL_FILE)),
        "graph": outcome.graph.as_ref().map(|_| out.join(GRAPH_FILE)),
    }))
}

/// The checkpoint, its taxonomy and the graph it needs (if it uses one).
fn load_model_bundle(model: &Path, taxonomy: &Path, graph: Option<&Path>) -> Result<(Model, Taxonomy, Option<Graph>)> {
    let (model_state, _) = Model::load(model)?;
    let taxonomy = load_taxonomy(taxonomy)?;
    let graph = if model_state.config.use_structure {
        let path = graph
            .map(Path::to_path_buf)
            .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).join(GRAPH_FILE));
        Some(Graph::load(&path)?)
    } else {
        None
    };
    Ok((model_state, taxonomy, graph))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    out: &Path,
    model: &Path,
    taxonomy: &Path,
    clicks: &Path,
    graph: Option<&Path>,
    train_clicks: Option<&Path>,
    threshold: f64,
    per_label: bool,
) -> Result<()> {
    let (model, taxonomy, graph) = load_model_bundle(model, taxonomy, graph)?;
    let samples = load_clicks(clicks, &taxonomy)?;
    let bucket_source = match train_clicks {
        Some(p) => load_clicks(p, &taxonomy)?,
        None => {
            warn!("no --train-clicks given; head and tail buckets come from the evaluated set");
            samples.clone()
        }
    };
    let predictor = Predictor::new(&model, &taxonomy, graph.as_ref())?;
    let report = evaluate(&predictor, &taxonomy, &samples, &leaf_click_counts(&bucket_source, &taxonomy), threshold)?;
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&path, &format!("{text}\n"))?;
    if per_label {
        write_per_label(&out.join("per_label.tsv"), &report, &taxonomy)?;
    }
    info!(
        "micro-F1 {:.4} macro-F1 {:.4} tail recall {:.4} on {} queries",
        report.micro.f1, report.macro_.f1, report.tail.recall, report.queries
    );
    let summary = json!({
        "queries": report.queries,
        "threshold": threshold,
        "micro": report.micro,
        "macro": report.macro_,
        "head": report.head,
        "tail": report.tail,
        "report": path,
    });
    event("eval", summary.clone());
    print_json(&summary)
}

fn write_per_label(path: &Path, report: &Report, taxonomy: &Taxonomy) -> Result<()> {
    let mut text = String::from("id\tname\tclicks\ttp\tfp\tfn\tp\tr\tf1\n");
    for row in &report.per_label {
        let name = taxonomy.node(row.id).map(|n| n.name.as_str()).unwrap_or("");
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.id,
            name.replace(['\t', '\n'], " "),
            row.clicks,
            row.counts.tp,
            row.counts.fp,
            row.counts.fn_,
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1
        ));
    }
    write_file(path, &text)
}

fn serve(cache: &Path, listen: Option<&str>, max_connections: Option<usize>) -> Result<()> {
    let cache = Cache::load(cache)?;
    match listen {
        None => {
            info!("serving {} leaves on standard streams", cache.num_leaves());
            let n = serve_stream(&cache, io::stdin().lock(), io::stdout().lock())
                .map_err(|e| io_err(Path::new("<stdio>"), e))?;
            info!("answered {n} requests");
            event("serve", json!({ "transport": "stdio", "requests": n }));
            Ok(())
        }
        Some(addr) => serve_tcp(Arc::new(cache), addr, max_connections, |bound| {
            // the first stdout line tells callers where to connect (useful with port 0)
            println!("{}", json!({ "listening": bound.to_string() }));
            let _ = io::stdout().flush();
            event("serve", json!({ "transport": "tcp", "address": bound.to_string() }));
        }),
    }
}

fn semi_targets(
    out: &Path,
    model: &Path,
    taxonomy: &Path,
    clicks: &Path,
    knowledge: Option<&Path>,
    tau: f64,
    target: Option<&Path>,
) -> Result<()> {
    let (model, _) = Model::load(model)?;
    let taxonomy = load_taxonomy(taxonomy)?;
    let samples = load_clicks(clicks, &taxonomy)?;
    let knowledge = match knowledge {
        Some(p) => load_knowledge(p)?,
        None => KnowledgeBase::new(),
    };
    let targets = semi_targets_for(&model, &taxonomy, &knowledge, &samples, tau)?;
    let path = target.map(Path::to_path_buf).unwrap_or_else(|| out.join("semi_targets.jsonl"));
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut total = 0;
    for (s, t) in samples.iter().zip(&targets) {
        total += t.len();
        let pairs: Vec<_> = t.iter().map(|(id, v)| json!([id, v])).collect();
        writeln!(w, "{}", json!({ "query": s.query_text, "targets": pairs })).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    info!("{total} semi targets over {} queries at tau {tau}", samples.len());
    let summary = json!({ "queries": samples.len(), "targets": total, "tau": tau, "path": path });
    event("semi-targets", summary.clone());
    print_json(&summary)
}

fn ablate(
    config: &TrainConfig,
    out: &Path,
    data: Option<DataArgs>,
    gold: Option<&Path>,
    synthetic: (usize, usize, f64),
) -> Result<()> {
    let (taxonomy, knowledge, split, gold_set) = match data {
        Some(data) => {
            let d = load_data(&data, config)?;
            let gold_set = match gold {
                Some(p) => load_clicks(p, &d.taxonomy)?,
                None => d.split.test.clone(),
            };
            (d.taxonomy, d.knowledge, d.split, gold_set)
        }
        None => {
            let (labels, queries, tail) = synthetic;
            info!("no data given; generating a synthetic corpus ({labels} labels, {queries} queries, tail {tail})");
            let SyntheticCorpus {
                taxonomy,
                samples,
                knowledge,
                gold: synthetic_gold,
                ..
            } = generate_synthetic(labels, queries, tail, config.seed)?;
            let split = split_dataset(&samples, config.split_ratios, config.seed)?;
            let gold_set = match gold {
                Some(p) => load_clicks(p, &taxonomy)?,
                None => synthetic_gold,
            };
            (taxonomy, knowledge, split, gold_set)
        }
    };
    if gold_set.is_empty() {
        return Err(Error::Validation("the evaluation set for the ablation is empty".into()));
    }
    let clicks = leaf_click_counts(&split.train, &taxonomy);

    let header = format!("variant\t{}\n", ROW_COLUMNS.join("\t"));
    let mut table = header.clone();
    for variant in Variant::ALL {
        let cfg = variant.apply(config);
        info!("training variant {}", variant.name());
        let outcome = train::<f64>(&cfg, &taxonomy, &split.train, &split.val, &knowledge, None)?;
        let model = outcome.best.as_ref().unwrap_or(&outcome.model);
        let predictor = Predictor::new(model, &taxonomy, outcome.graph.as_ref())?;
        let report = evaluate(&predictor, &taxonomy, &gold_set, &clicks, cfg.decision_threshold)?;
        let row = report.row();
        info!(
            "{}: micro-F1 {:.4} macro-F1 {:.4} tail recall {:.4}",
            variant.name(),
            report.micro.f1,
            report.macro_.f1,
            report.tail.recall
        );
        event(
            "ablate-variant",
            json!({ "variant": variant.name(), "columns": ROW_COLUMNS, "row": row, "tail_recall": report.tail.recall }),
        );
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        table.push_str(&format!("{}\t{}\n", variant.name(), cells.join("\t")));
    }
    let path: PathBuf = out.join("ablation.tsv");
    write_file(&path, &table)?;
    info!("wrote {}", path.display());
    print!("{table}");
    io::stdout().flush().map_err(|e| io_err(Path::new("<stdout>"), e))
}

