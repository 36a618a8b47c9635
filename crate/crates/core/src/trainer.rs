//! End-to-end training: interaction layer, BCE on fused click + semi targets,
//! the full backward pass through encoder and GCN, Adam, and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClickSample, KnowledgeBase, NodeId, Taxonomy};
use crate::encoder::{
    backward_batch_into, build_label_sequence, encode_batch, tokenize, uniform_matrix, BatchTrace, EncoderParams,
    TokenizerMode, Vocab, INIT_SCALE,
};
use crate::error::{Error, Result};
use crate::eval::{accumulate, binarize, report, ConfusionTotals, MetricsReport};
use crate::graph::{
    gcn_backward_traced, gcn_forward_traced, node_click_counts, AdjMatrix, GcnParams, GcnTrace, GraphBundle,
    GraphConfig, GraphSelection,
};
use crate::knowledge::{attention_fuse, compute_semi_targets, fuse_targets, tau_at, SemiTargets, TauSchedule};
use crate::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Predicted probabilities are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` inside the loss.
pub const BCE_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dim: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub alpha_threshold: f64,
    pub beta_threshold: f64,
    pub seed: u64,
    pub use_label_enhanced: bool,
    pub use_knowledge: bool,
    pub use_semi: bool,
    pub use_structure: bool,
    pub use_graph_coo: bool,
    pub use_graph_sim: bool,
    pub use_graph_hier: bool,
    /// Labels are re-encoded every this many steps.
    pub label_refresh: usize,
    pub max_query_len: usize,
    pub max_label_len: usize,
    pub tokenizer: TokenizerMode,
    pub decision_threshold: f64,
    pub split_ratios: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 20,
            dim: 64,
            tau_start: 1.0,
            tau_end: 0.8,
            alpha_threshold: 0.5,
            beta_threshold: 0.5,
            seed: 0,
            use_label_enhanced: true,
            use_knowledge: true,
            use_semi: true,
            use_structure: true,
            use_graph_coo: true,
            use_graph_sim: true,
            use_graph_hier: true,
            label_refresh: 1,
            max_query_len: 20,
            max_label_len: 40,
            tokenizer: TokenizerMode::Char,
            decision_threshold: 0.5,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.parse::<V>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{raw}`"))),
    }
}

impl TrainConfig {
    /// Parse `key = value` lines (`#` starts a comment) over the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "tau_start" => self.tau_start = parse_value(key, v)?,
            "tau_end" => self.tau_end = parse_value(key, v)?,
            "alpha_threshold" => self.alpha_threshold = parse_value(key, v)?,
            "beta_threshold" => self.beta_threshold = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "use_label_enhanced" => self.use_label_enhanced = parse_bool(key, v)?,
            "use_knowledge" => self.use_knowledge = parse_bool(key, v)?,
            "use_semi" => self.use_semi = parse_bool(key, v)?,
            "use_structure" => self.use_structure = parse_bool(key, v)?,
            "use_graph_coo" => self.use_graph_coo = parse_bool(key, v)?,
            "use_graph_sim" => self.use_graph_sim = parse_bool(key, v)?,
            "use_graph_hier" => self.use_graph_hier = parse_bool(key, v)?,
            "label_refresh" => self.label_refresh = parse_value(key, v)?,
            "max_query_len" => self.max_query_len = parse_value(key, v)?,
            "max_label_len" => self.max_label_len = parse_value(key, v)?,
            "tokenizer" => self.tokenizer = parse_value(key, v)?,
            "decision_threshold" => self.decision_threshold = parse_value(key, v)?,
            "split_ratios" => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_value::<f64>(key, p.trim()))
                    .collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::config(key, format!("expected three comma-separated ratios, got `{v}`")));
                };
                self.split_ratios = (a, b, c);
            }
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Render as `key = value` lines that [`TrainConfig::parse`] reads back unchanged.
    pub fn to_kv_string(&self) -> String {
        let (a, b, c) = self.split_ratios;
        let rows: Vec<(&str, String)> = vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("dim", self.dim.to_string()),
            ("tau_start", self.tau_start.to_string()),
            ("tau_end", self.tau_end.to_string()),
            ("alpha_threshold", self.alpha_threshold.to_string()),
            ("beta_threshold", self.beta_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("use_label_enhanced", self.use_label_enhanced.to_string()),
            ("use_knowledge", self.use_knowledge.to_string()),
            ("use_semi", self.use_semi.to_string()),
            ("use_structure", self.use_structure.to_string()),
            ("use_graph_coo", self.use_graph_coo.to_string()),
            ("use_graph_sim", self.use_graph_sim.to_string()),
            ("use_graph_hier", self.use_graph_hier.to_string()),
            ("label_refresh", self.label_refresh.to_string()),
            ("max_query_len", self.max_query_len.to_string()),
            ("max_label_len", self.max_label_len.to_string()),
            ("tokenizer", self.tokenizer.to_string()),
            ("decision_threshold", self.decision_threshold.to_string()),
            ("split_ratios", format!("{a},{b},{c}")),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("dim", self.dim),
            ("label_refresh", self.label_refresh),
            ("max_query_len", self.max_query_len),
            ("max_label_len", self.max_label_len),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        TauSchedule::new(self.tau_start, self.tau_end, self.epochs)?;
        self.graph_config().validate()?;
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::config("decision_threshold", "must lie in (0, 1)"));
        }
        let (a, b, c) = self.split_ratios;
        if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "split_ratios",
                format!("ratios must be nonnegative and sum to 1, got ({a}, {b}, {c})"),
            ));
        }
        Ok(())
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            alpha_threshold: self.alpha_threshold,
            beta_threshold: self.beta_threshold,
        }
    }

    /// Graphs in effect; disabling structure disables all of them.
    pub fn graph_selection(&self) -> GraphSelection {
        GraphSelection {
            coo: self.use_structure && self.use_graph_coo,
            sim: self.use_structure && self.use_graph_sim,
            hier: self.use_structure && self.use_graph_hier,
        }
    }

    pub fn tau_schedule(&self) -> Result<TauSchedule> {
        TauSchedule::new(self.tau_start, self.tau_end, self.epochs)
    }
}

/// Ablation rows: the full model and the module-removal variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoSemanticGraph,
    NoCooccurrenceGraph,
    NoHierarchyGraph,
    NoStructure,
    NoKnowledge,
    NoLabelAndKnowledge,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoSemanticGraph,
        Variant::NoCooccurrenceGraph,
        Variant::NoHierarchyGraph,
        Variant::NoStructure,
        Variant::NoKnowledge,
        Variant::NoLabelAndKnowledge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "SSUF",
            Variant::NoSemanticGraph => "w/o. SE-S",
            Variant::NoCooccurrenceGraph => "w/o. SE-C",
            Variant::NoHierarchyGraph => "w/o. SE-H",
            Variant::NoStructure => "w/o. SE",
            Variant::NoKnowledge => "w/o. KE",
            Variant::NoLabelAndKnowledge => "w/o. LE&KE",
        }
    }

    /// Variants removing exactly one module (or one graph of the structure module).
    pub fn is_single_removal(self) -> bool {
        !matches!(self, Variant::Full | Variant::NoLabelAndKnowledge)
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoSemanticGraph => c.use_graph_sim = false,
            Variant::NoCooccurrenceGraph => c.use_graph_coo = false,
            Variant::NoHierarchyGraph => c.use_graph_hier = false,
            Variant::NoStructure => c.use_structure = false,
            Variant::NoKnowledge => c.use_knowledge = false,
            Variant::NoLabelAndKnowledge => {
                c.use_label_enhanced = false;
                c.use_knowledge = false;
                c.use_semi = false;
            }
        }
        c
    }
}

/// All trainable tensors. Also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    /// Free per-node label embeddings, present only when labels are not text-encoded.
    pub label_table: Option<Array2<T>>,
    pub gcn: GcnParams<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            label_table: self.label_table.as_ref().map(|t| Array2::zeros(t.raw_dim())),
            gcn: self.gcn.zeros_like(),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = self.encoder.tensors().into_iter().collect();
        if let Some(t) = &self.label_table {
            out.push(("label_table", t.as_slice().expect("standard layout")));
        }
        out.extend(self.gcn.tensors());
        out.push(("bias", self.bias.as_slice().expect("standard layout")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = self.encoder.tensors_mut().into_iter().collect();
        if let Some(t) = &mut self.label_table {
            out.push(("label_table", t.as_slice_mut().expect("standard layout")));
        }
        out.extend(self.gcn.tensors_mut());
        out.push(("bias", self.bias.as_slice_mut().expect("standard layout")));
        out
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut out = vec![
            ("encoder.embedding_table", self.encoder.embedding_table.shape().to_vec()),
            ("encoder.proj1_weight", self.encoder.proj1_weight.shape().to_vec()),
            ("encoder.proj1_bias", self.encoder.proj1_bias.shape().to_vec()),
            ("encoder.proj2_weight", self.encoder.proj2_weight.shape().to_vec()),
            ("encoder.proj2_bias", self.encoder.proj2_bias.shape().to_vec()),
        ];
        if let Some(t) = &self.label_table {
            out.push(("label_table", t.shape().to_vec()));
        }
        out.extend([
            ("gcn.w1", self.gcn.w1.shape().to_vec()),
            ("gcn.b1", self.gcn.b1.shape().to_vec()),
            ("gcn.w2", self.gcn.w2.shape().to_vec()),
            ("gcn.b2", self.gcn.b2.shape().to_vec()),
            ("bias", self.bias.shape().to_vec()),
        ]);
        out
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Trained (or freshly initialized) model with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: ModelParams<T>,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub epoch: usize,
}

impl<T: Scalar> ModelState<T> {
    /// Seeded initialization: weights and embeddings uniform in ±0.05, biases zero.
    pub fn init(config: &TrainConfig, vocab: Vocab, taxonomy: &Taxonomy) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let encoder = EncoderParams::init(vocab.len(), d, d, d, &mut rng);
        let gcn = GcnParams::init(d, d, &mut rng);
        let label_table =
            (!config.use_label_enhanced).then(|| uniform_matrix(taxonomy.num_nodes(), d, INIT_SCALE, &mut rng));
        ModelState {
            params: ModelParams {
                encoder,
                label_table,
                gcn,
                bias: Array1::zeros(taxonomy.num_leaves()),
            },
            vocab,
            config: config.clone(),
            epoch: 0,
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.params.bias.len()
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        let nodes_ok = self.params.label_table.as_ref().is_none_or(|t| t.nrows() == taxonomy.num_nodes());
        if self.num_leaves() != taxonomy.num_leaves() || !nodes_ok {
            return Err(Error::Validation(format!(
                "model has {} leaves but the taxonomy has {}",
                self.num_leaves(),
                taxonomy.num_leaves()
            )));
        }
        Ok(())
    }
}

/// Vocabulary over training queries, every label sequence and every knowledge text.
pub fn build_vocab(
    train: &[ClickSample],
    taxonomy: &Taxonomy,
    knowledge: &KnowledgeBase,
    mode: TokenizerMode,
) -> Vocab {
    let labels: Vec<String> = taxonomy.nodes.iter().map(build_label_sequence).collect();
    let texts = train
        .iter()
        .map(|s| s.query_text.as_str())
        .chain(labels.iter().map(String::as_str))
        .chain(knowledge.values().map(|k| k.text.as_str()));
    Vocab::build(texts, mode)
}

/// First- and second-moment accumulators of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: ModelParams<T>,
    pub second_moment: ModelParams<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    adam: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.shapes() != grads.shapes() || params.shapes() != adam.first_moment.shapes() {
        return Err(Error::shape(
            "adam update",
            format!("{:?}", params.shapes()),
            format!("{:?}", grads.shapes()),
        ));
    }
    adam.step += 1;
    let t = i32::try_from(adam.step).unwrap_or(i32::MAX);
    let (b1, b2) = (T::lit(adam.beta1), T::lit(adam.beta2));
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(lr), T::lit(adam.eps));
    let grads = grads.tensors();
    let mut m = adam.first_moment.tensors_mut();
    let mut v = adam.second_moment.tensors_mut();
    for (k, (_, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[k].1;
        let (mk, vk) = (&mut *m[k].1, &mut *v[k].1);
        for i in 0..p.len() {
            mk[i] = b1 * mk[i] + (T::one() - b1) * g[i];
            vk[i] = b2 * vk[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = mk[i] / correction1;
            let v_hat = vk[i] / correction2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `sigmoid(q H_l^T + b)`.
pub fn predict_scores<T: Scalar>(
    query: ArrayView1<'_, T>,
    h_leaf: ArrayView2<'_, T>,
    bias: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    if h_leaf.ncols() != query.len() || h_leaf.nrows() != bias.len() {
        return Err(Error::shape(
            "interaction layer",
            format!("H_l {}x{}, bias {}", bias.len(), query.len(), bias.len()),
            format!("H_l {:?}, bias {}", h_leaf.dim(), bias.len()),
        ));
    }
    Ok((h_leaf.dot(&query) + bias).mapv(sigmoid))
}

/// Mean binary cross-entropy over labels, with predictions clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(scores: ArrayView1<'_, T>, targets: ArrayView1<'_, T>) -> Result<T> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(Error::shape("bce", scores.len(), targets.len()));
    }
    if let Some(y) = targets.iter().find(|y| !(**y >= T::zero() && **y <= T::one())) {
        return Err(Error::Validation(format!("BCE target {y} outside [0, 1]")));
    }
    let (lo, hi) = (T::lit(BCE_CLIP), T::one() - T::lit(BCE_CLIP));
    let total: T = scores
        .iter()
        .zip(targets.iter())
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::lit(scores.len() as f64))
}

/// A click sample resolved to token ids and leaf rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub query_ids: Vec<usize>,
    pub click_rows: Vec<usize>,
    pub knowledge_ids: Vec<Vec<usize>>,
}

pub fn prepare_samples(
    samples: &[ClickSample],
    taxonomy: &Taxonomy,
    vocab: &Vocab,
    knowledge: &KnowledgeBase,
    config: &TrainConfig,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let click_rows = s
                .clicked_leaf_ids
                .iter()
                .map(|id| {
                    taxonomy
                        .leaf_row(*id)
                        .ok_or_else(|| Error::Validation(format!("clicked id {id} is not a leaf")))
                })
                .collect::<Result<_>>()?;
            let knowledge_ids = s
                .knowledge_ids
                .iter()
                .map(|k| {
                    knowledge
                        .get(k)
                        .map(|r| tokenize(&r.text, vocab, config.max_label_len))
                        .ok_or_else(|| Error::Validation(format!("unknown knowledge id {k}")))
                })
                .collect::<Result<_>>()?;
            Ok(PreparedSample {
                query_ids: tokenize(&s.query_text, vocab, config.max_query_len),
                click_rows,
                knowledge_ids,
            })
        })
        .collect()
}

/// Static inputs of the forward pass: tokenized label sequences and the normalized adjacency.
#[derive(Debug, Clone)]
pub struct ModelContext<T> {
    pub label_ids: Vec<Vec<usize>>,
    pub a_hat: Option<AdjMatrix<T>>,
    pub leaf_offset: usize,
    pub num_leaves: usize,
}

impl<T: Scalar> ModelContext<T> {
    /// `graph` is required when the model uses the structure module.
    pub fn new(model: &ModelState<T>, taxonomy: &Taxonomy, graph: Option<&GraphBundle<T>>) -> Result<Self> {
        model.check_taxonomy(taxonomy)?;
        let a_hat = if model.config.use_structure {
            let g = graph.ok_or_else(|| {
                Error::Validation("the structure module is enabled but no label graph was supplied".into())
            })?;
            g.check_taxonomy(taxonomy)?;
            Some(g.normalized.clone())
        } else {
            None
        };
        Ok(ModelContext {
            label_ids: taxonomy
                .nodes_in_row_order()
                .map(|n| tokenize(&build_label_sequence(n), &model.vocab, model.config.max_label_len))
                .collect(),
            a_hat,
            leaf_offset: taxonomy.leaf_offset(),
            num_leaves: taxonomy.num_leaves(),
        })
    }
}

/// Label-side forward pass: node features, GCN output and the leaf block.
#[derive(Debug, Clone)]
pub struct LabelPass<T> {
    /// Node features in `all_index` order.
    pub features: Array2<T>,
    pub encoder_trace: Option<BatchTrace<T>>,
    pub gcn_trace: Option<GcnTrace<T>>,
    /// Leaf embeddings used by the interaction layer.
    pub h_leaf: Array2<T>,
}

impl<T: Scalar> LabelPass<T> {
    /// Leaf rows of the node features: the label representations used for semi targets.
    pub fn leaf_features(&self, ctx: &ModelContext<T>) -> ArrayView2<'_, T> {
        self.features.slice(s![ctx.leaf_offset.., ..])
    }
}

pub fn label_pass<T: Scalar>(params: &ModelParams<T>, ctx: &ModelContext<T>) -> Result<LabelPass<T>> {
    let (features, encoder_trace) = match &params.label_table {
        Some(table) => (table.clone(), None),
        None => {
            let (x, trace) = encode_batch(&ctx.label_ids, &params.encoder)?;
            (x, Some(trace))
        }
    };
    let (h_leaf, gcn_trace) = match &ctx.a_hat {
        Some(a_hat) => {
            let (h, trace) = gcn_forward_traced(a_hat, features.view(), &params.gcn)?;
            (h.slice(s![ctx.leaf_offset.., ..]).to_owned(), Some(trace))
        }
        None => (features.slice(s![ctx.leaf_offset.., ..]).to_owned(), None),
    };
    Ok(LabelPass {
        features,
        encoder_trace,
        gcn_trace,
        h_leaf,
    })
}

/// Semi-supervised targets for a batch. Reads values only; contributes no gradient.
pub fn batch_semi_targets<T: Scalar>(
    params: &ModelParams<T>,
    labels: &LabelPass<T>,
    ctx: &ModelContext<T>,
    query_embeddings: ArrayView2<'_, T>,
    batch: &[PreparedSample],
    tau: f64,
    use_knowledge: bool,
) -> Result<Vec<SemiTargets<T>>> {
    let label_embs = labels.leaf_features(ctx);
    batch
        .iter()
        .zip(query_embeddings.outer_iter())
        .map(|(sample, q)| {
            let fused = if use_knowledge && !sample.knowledge_ids.is_empty() {
                let (k, _) = encode_batch(&sample.knowledge_ids, &params.encoder)?;
                attention_fuse(q, k.view())?.values
            } else {
                q.to_owned()
            };
            compute_semi_targets(fused.view(), label_embs, tau)
        })
        .collect()
}

fn click_vector<T: Scalar>(sample: &PreparedSample, num_leaves: usize) -> Array1<T> {
    let mut y = Array1::zeros(num_leaves);
    for &r in &sample.click_rows {
        y[r] = T::one();
    }
    y
}

/// Targets `min(click + semi, 1)` per sample; an empty `semi` slice means click-only.
pub fn batch_targets<T: Scalar>(batch: &[PreparedSample], semi: &[SemiTargets<T>], num_leaves: usize) -> Vec<Array1<T>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let click = click_vector(s, num_leaves);
            match semi.get(i) {
                Some(st) => fuse_targets(click.view(), st),
                None => click,
            }
        })
        .collect()
}

/// Result of a forward + backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: T,
    pub grads: ModelParams<T>,
}

fn stack_targets<T: Scalar>(targets: &[Array1<T>], num_leaves: usize) -> Result<Array2<T>> {
    let mut y = Array2::zeros((targets.len(), num_leaves));
    for (mut row, t) in y.outer_iter_mut().zip(targets) {
        if t.len() != num_leaves {
            return Err(Error::shape("targets", num_leaves, t.len()));
        }
        row.assign(t);
    }
    Ok(y)
}

/// Loss and gradients given a completed query forward pass and constant targets.
fn backward<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &ModelContext<T>,
    labels: &LabelPass<T>,
    backprop_labels: bool,
    queries: &Array2<T>,
    query_trace: &BatchTrace<T>,
    targets: &[Array1<T>],
) -> Result<Gradients<T>> {
    let b = queries.nrows();
    if b == 0 || targets.len() != b {
        return Err(Error::shape("batch targets", b, targets.len()));
    }
    let y = stack_targets(targets, ctx.num_leaves)?;
    if y.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Validation("targets must lie in [0, 1]".into()));
    }
    let logits = queries.dot(&labels.h_leaf.t()) + &params.bias;
    let probs = logits.mapv(sigmoid);
    let (lo, hi) = (T::lit(BCE_CLIP), T::one() - T::lit(BCE_CLIP));
    let scale = T::one() / T::lit((b * ctx.num_leaves) as f64);

    let mut loss = T::zero();
    let mut d_logits = Array2::<T>::zeros(probs.raw_dim());
    for ((p, t), g) in probs.iter().zip(y.iter()).zip(d_logits.iter_mut()) {
        let pc = p.max(lo).min(hi);
        loss += -(*t * pc.ln() + (T::one() - *t) * (T::one() - pc).ln());
        // the clamp has zero derivative outside the open interval
        if *p > lo && *p < hi {
            *g = (*p - *t) * scale;
        }
    }
    loss *= scale;

    let mut grads = params.zeros_like();
    grads.bias = d_logits.sum_axis(Axis(0));
    let d_queries = d_logits.dot(&labels.h_leaf);
    let d_h_leaf = d_logits.t().dot(queries);

    if backprop_labels || labels.gcn_trace.is_some() {
        let n_nodes = labels.features.nrows();
        let d_features = match (&ctx.a_hat, &labels.gcn_trace) {
            (Some(a_hat), Some(trace)) => {
                let mut d_h = Array2::zeros((n_nodes, d_h_leaf.ncols()));
                d_h.slice_mut(s![ctx.leaf_offset.., ..]).assign(&d_h_leaf);
                let (g_gcn, d_x) = gcn_backward_traced(a_hat, trace, &params.gcn, d_h.view())?;
                grads.gcn = g_gcn;
                d_x
            }
            _ => {
                let mut d_x = Array2::zeros((n_nodes, d_h_leaf.ncols()));
                d_x.slice_mut(s![ctx.leaf_offset.., ..]).assign(&d_h_leaf);
                d_x
            }
        };
        if backprop_labels {
            match (&mut grads.label_table, &labels.encoder_trace) {
                (Some(table_grad), _) => *table_grad = d_features,
                (None, Some(trace)) => backward_batch_into(trace, &params.encoder, d_features.view(), &mut grads.encoder)?,
                (None, None) => {}
            }
        }
    }
    backward_batch_into(query_trace, &params.encoder, d_queries.view(), &mut grads.encoder)?;
    Ok(Gradients { loss, grads })
}

fn query_ids(batch: &[PreparedSample]) -> Vec<Vec<usize>> {
    batch.iter().map(|s| s.query_ids.clone()).collect()
}

/// Loss and exact gradients for a batch with the given (constant) targets.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &ModelContext<T>,
    batch: &[PreparedSample],
    targets: &[Array1<T>],
) -> Result<Gradients<T>> {
    let labels = label_pass(params, ctx)?;
    let (queries, trace) = encode_batch(&query_ids(batch), &params.encoder)?;
    backward(params, ctx, &labels, true, &queries, &trace, targets)
}

/// Forward-only batch loss with the given targets.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    ctx: &ModelContext<T>,
    batch: &[PreparedSample],
    targets: &[Array1<T>],
) -> Result<T> {
    let labels = label_pass(params, ctx)?;
    let (queries, _) = encode_batch(&query_ids(batch), &params.encoder)?;
    let mut total = T::zero();
    for (q, t) in queries.outer_iter().zip(targets) {
        total += bce_loss(predict_scores(q, labels.h_leaf.view(), params.bias.view())?.view(), t.view())?;
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Everything a training step computed.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub gradients: Gradients<T>,
    pub semi: Vec<SemiTargets<T>>,
}

/// The training-time forward/backward: semi targets are generated from the
/// current parameters inside the step and enter the loss as constants.
pub fn step_gradients<T: Scalar>(
    params: &ModelParams<T>,
    config: &TrainConfig,
    ctx: &ModelContext<T>,
    labels: &LabelPass<T>,
    backprop_labels: bool,
    batch: &[PreparedSample],
    tau: f64,
) -> Result<StepOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let (queries, trace) = encode_batch(&query_ids(batch), &params.encoder)?;
    let semi = if config.use_semi {
        batch_semi_targets(params, labels, ctx, queries.view(), batch, tau, config.use_knowledge)?
    } else {
        Vec::new()
    };
    let targets = batch_targets(batch, &semi, ctx.num_leaves);
    let gradients = backward(params, ctx, labels, backprop_labels, &queries, &trace, &targets)?;
    Ok(StepOutput { gradients, semi })
}

fn check_finite<T: Scalar>(loss: T, grads: &ModelParams<T>) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {name}"),
        });
    }
    Ok(())
}

/// One full step with freshly encoded labels: forward, backward, Adam. Returns the batch loss.
pub fn train_step<T: Scalar>(
    batch: &[PreparedSample],
    model: &mut ModelState<T>,
    ctx: &ModelContext<T>,
    adam: &mut AdamState<T>,
    tau: f64,
) -> Result<T> {
    let labels = label_pass(&model.params, ctx)?;
    let out = step_gradients(&model.params, &model.config, ctx, &labels, true, batch, tau)?;
    apply_update(model, adam, &out.gradients)?;
    Ok(out.gradients.loss)
}

fn apply_update<T: Scalar>(model: &mut ModelState<T>, adam: &mut AdamState<T>, g: &Gradients<T>) -> Result<()> {
    check_finite(g.loss, &g.grads)?;
    adam_update(&mut model.params, &g.grads, adam, model.config.learning_rate)?;
    if let Some(name) = model.params.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
        });
    }
    Ok(())
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub semi_targets: u64,
    pub val_micro_f1: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub val_micro_precision: Option<f64>,
    pub val_micro_recall: Option<f64>,
}

/// Stateful trainer honoring `label_refresh`.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: ModelState<T>,
    pub adam: AdamState<T>,
    pub ctx: ModelContext<T>,
    step: u64,
    cached_labels: Option<LabelPass<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelState<T>, ctx: ModelContext<T>) -> Self {
        let adam = AdamState::new(&model.params);
        Trainer {
            model,
            adam,
            ctx,
            step: 0,
            cached_labels: None,
        }
    }

    /// One optimizer step; returns `(loss, number of semi-target entries)`.
    pub fn step(&mut self, batch: &[PreparedSample], tau: f64) -> Result<(T, usize)> {
        let refresh = self.step.is_multiple_of(self.model.config.label_refresh as u64) || self.cached_labels.is_none();
        if refresh {
            self.cached_labels = Some(label_pass(&self.model.params, &self.ctx)?);
        }
        let labels = match (&self.cached_labels, refresh) {
            (Some(l), true) => l.clone(),
            // stale label features: recompute the GCN on them with current weights, no encoder gradient
            (Some(l), false) => {
                let mut l = l.clone();
                l.encoder_trace = None;
                if let Some(a_hat) = &self.ctx.a_hat {
                    let (h, trace) = gcn_forward_traced(a_hat, l.features.view(), &self.model.params.gcn)?;
                    l.h_leaf = h.slice(s![self.ctx.leaf_offset.., ..]).to_owned();
                    l.gcn_trace = Some(trace);
                }
                l
            }
            (None, _) => unreachable!("labels computed above"),
        };
        let out = step_gradients(&self.model.params, &self.model.config, &self.ctx, &labels, refresh, batch, tau)?;
        apply_update(&mut self.model, &mut self.adam, &out.gradients)?;
        self.step += 1;
        Ok((out.gradients.loss, out.semi.iter().map(SemiTargets::len).sum()))
    }

    /// Shuffle with an epoch-derived seed and step through all batches.
    /// Returns `(mean batch loss, semi-target entries)`.
    pub fn run_epoch(&mut self, train: &[PreparedSample], epoch: usize, tau: f64) -> Result<(f64, u64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let seed = self.model.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut semi = 0u64;
        for chunk in order.chunks(self.model.config.batch_size) {
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, n_semi) = self.step(&batch, tau)?;
            total += loss.as_f64();
            semi += n_semi as u64;
            batches += 1;
        }
        self.model.epoch = epoch + 1;
        Ok((if batches == 0 { 0.0 } else { total / batches as f64 }, semi))
    }
}

/// Scores queries with a fixed model: label side computed once.
#[derive(Debug, Clone)]
pub struct Predictor<'a, T> {
    pub model: &'a ModelState<T>,
    pub h_leaf: Array2<T>,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(model: &'a ModelState<T>, taxonomy: &Taxonomy, graph: Option<&GraphBundle<T>>) -> Result<Self> {
        let ctx = ModelContext::new(model, taxonomy, graph)?;
        let labels = label_pass(&model.params, &ctx)?;
        Ok(Predictor {
            model,
            h_leaf: labels.h_leaf,
        })
    }

    pub fn query_embedding(&self, text: &str) -> Result<Array1<T>> {
        let ids = tokenize(text, &self.model.vocab, self.model.config.max_query_len);
        crate::encoder::encode(&ids, &self.model.params.encoder)
    }

    pub fn scores(&self, text: &str) -> Result<Array1<T>> {
        predict_scores(
            self.query_embedding(text)?.view(),
            self.h_leaf.view(),
            self.model.params.bias.view(),
        )
    }

    /// Score many queries; row `i` corresponds to `texts[i]`.
    pub fn scores_batch(&self, texts: &[&str]) -> Result<Array2<T>> {
        let seqs: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| tokenize(t, &self.model.vocab, self.model.config.max_query_len))
            .collect();
        let (q, _) = encode_batch(&seqs, &self.model.params.encoder)?;
        Ok((q.dot(&self.h_leaf.t()) + &self.model.params.bias).mapv(sigmoid))
    }
}

/// Leaf click counts of a sample set, with every taxonomy leaf present.
pub fn leaf_click_counts(samples: &[ClickSample], taxonomy: &Taxonomy) -> BTreeMap<NodeId, u64> {
    let all = node_click_counts(samples, taxonomy);
    taxonomy.leaf_index.iter().map(|id| (*id, all[id])).collect()
}

/// Accumulate binarized predictions against gold labels.
pub fn confusion<T: Scalar>(
    predictor: &Predictor<'_, T>,
    taxonomy: &Taxonomy,
    samples: &[ClickSample],
    threshold: f64,
) -> Result<ConfusionTotals> {
    let mut totals = ConfusionTotals::default();
    for chunk in samples.chunks(512) {
        let texts: Vec<&str> = chunk.iter().map(|s| s.query_text.as_str()).collect();
        let scores = predictor.scores_batch(&texts)?;
        for (s, row) in chunk.iter().zip(scores.outer_iter()) {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let preds = binarize(&row, threshold)
                .into_iter()
                .map(|r| taxonomy.leaf_index[r])
                .collect();
            accumulate(&preds, &s.clicked_leaf_ids, &mut totals);
        }
    }
    Ok(totals)
}

pub fn evaluate<T: Scalar>(
    predictor: &Predictor<'_, T>,
    taxonomy: &Taxonomy,
    samples: &[ClickSample],
    label_clicks: &BTreeMap<NodeId, u64>,
    threshold: f64,
) -> Result<MetricsReport<f64>> {
    Ok(report(&confusion(predictor, taxonomy, samples, threshold)?, label_clicks))
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    pub adam: AdamState<T>,
    /// Checkpoint with the best validation micro-F1, when validation data exists.
    pub best: Option<ModelState<T>>,
    pub graph: Option<GraphBundle<T>>,
    pub log: Vec<EpochMetrics>,
}

/// Context for the pre-GCN label features only; needs no graph.
fn label_context<T: Scalar>(model: &ModelState<T>, taxonomy: &Taxonomy) -> Result<ModelContext<T>> {
    let unstructured = ModelState {
        config: TrainConfig {
            use_structure: false,
            ..model.config.clone()
        },
        ..model.clone()
    };
    ModelContext::new(&unstructured, taxonomy, None)
}

/// Semi targets of each sample under a fixed model at threshold `tau`, as (leaf id, score) in leaf order.
pub fn semi_targets_for<T: Scalar>(
    model: &ModelState<T>,
    taxonomy: &Taxonomy,
    knowledge: &KnowledgeBase,
    samples: &[ClickSample],
    tau: f64,
) -> Result<Vec<Vec<(NodeId, f64)>>> {
    let ctx = label_context(model, taxonomy)?;
    let labels = label_pass(&model.params, &ctx)?;
    let prepared = prepare_samples(samples, taxonomy, &model.vocab, knowledge, &model.config)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(512) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|p| p.query_ids.clone()).collect();
        let (q, _) = encode_batch(&seqs, &model.params.encoder)?;
        let semi = batch_semi_targets(&model.params, &labels, &ctx, q.view(), chunk, tau, model.config.use_knowledge)?;
        out.extend(semi.into_iter().map(|st| {
            st.entries
                .into_iter()
                .map(|(row, v)| (taxonomy.leaf_index[row], v.as_f64()))
                .collect()
        }));
    }
    Ok(out)
}

/// Build the label graph from the training split, using the model's initial label representations.
pub fn build_graph_for<T: Scalar>(
    model: &ModelState<T>,
    taxonomy: &Taxonomy,
    train: &[ClickSample],
) -> Result<GraphBundle<T>> {
    let ctx = label_context(model, taxonomy)?;
    let labels = label_pass(&model.params, &ctx)?;
    GraphBundle::build(
        taxonomy,
        train,
        labels.leaf_features(&ctx),
        model.config.graph_config(),
        model.config.graph_selection(),
    )
}

/// Log-odds of the mean per-label click rate; 0 for an empty sample set.
///
/// Starting every label's bias here means the first steps do not have to push
/// the whole label prior through the query and label embeddings.
pub fn prior_log_odds(train: &[ClickSample], num_leaves: usize) -> f64 {
    let clicks: usize = train.iter().map(|s| s.clicked_leaf_ids.len()).sum();
    if train.is_empty() || num_leaves == 0 {
        return 0.0;
    }
    let rate = (clicks as f64 / (train.len() * num_leaves) as f64).clamp(1e-4, 1.0 - 1e-4);
    (rate / (1.0 - rate)).ln()
}

/// Train from scratch. `graph` overrides graph construction when given.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    taxonomy: &Taxonomy,
    train: &[ClickSample],
    val: &[ClickSample],
    knowledge: &KnowledgeBase,
    graph: Option<GraphBundle<T>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let vocab = build_vocab(train, taxonomy, knowledge, config.tokenizer);
    let mut model = ModelState::init(config, vocab, taxonomy);
    model.params.bias.fill(T::lit(prior_log_odds(train, taxonomy.num_leaves())));
    let graph = match (config.use_structure, graph) {
        (false, _) => None,
        (true, Some(g)) => Some(g),
        (true, None) => Some(build_graph_for(&model, taxonomy, train)?),
    };
    let ctx = ModelContext::new(&model, taxonomy, graph.as_ref())?;
    let prepared = prepare_samples(train, taxonomy, &model.vocab, knowledge, config)?;
    let label_clicks = leaf_click_counts(train, taxonomy);
    let schedule = config.tau_schedule()?;

    let mut trainer = Trainer::new(model, ctx);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, ModelState<T>)> = None;
    for epoch in 0..config.epochs {
        let tau = tau_at(&schedule, epoch)?;
        let (train_loss, semi) = trainer.run_epoch(&prepared, epoch, tau)?;
        let val_report = if val.is_empty() {
            None
        } else {
            let predictor = Predictor::new(&trainer.model, taxonomy, graph.as_ref())?;
            Some(evaluate(&predictor, taxonomy, val, &label_clicks, config.decision_threshold)?)
        };
        let m = EpochMetrics {
            epoch,
            tau,
            train_loss,
            semi_targets: semi,
            val_micro_f1: val_report.as_ref().map(|r| r.micro.f1),
            val_macro_f1: val_report.as_ref().map(|r| r.macro_.f1),
            val_micro_precision: val_report.as_ref().map(|r| r.micro.precision),
            val_micro_recall: val_report.as_ref().map(|r| r.micro.recall),
        };
        info!(
            "epoch {epoch}: tau {tau:.4} loss {train_loss:.6} semi {semi} val micro-F1 {:?}",
            m.val_micro_f1
        );
        if let Some(f1) = m.val_micro_f1 {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, trainer.model.clone()));
            }
        }
        log.push(m);
    }
    debug!("training finished after {} epochs", config.epochs);
    Ok(TrainOutcome {
        model: trainer.model,
        adam: trainer.adam,
        best: best.map(|(_, m)| m),
        graph,
        log,
    })
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for m in log {
        let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    step: u64,
    first_moment: Vec<TensorRecord>,
    second_moment: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    epoch: usize,
    config: TrainConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorRecord>,
    adam: Option<AdamRecord>,
}

fn tensor_records<T: Scalar>(p: &ModelParams<T>) -> Vec<TensorRecord> {
    p.shapes()
        .into_iter()
        .zip(p.tensors())
        .map(|((name, shape), (_, data))| TensorRecord {
            name: name.to_string(),
            shape,
            data: data.iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

fn params_from_records<T: Scalar>(records: Vec<TensorRecord>) -> Result<ModelParams<T>> {
    let mut map: BTreeMap<String, TensorRecord> = records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<T>)> {
        let r = map
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(Error::Format(format!("tensor `{name}` data does not match its shape")));
        }
        Ok((r.shape, r.data.into_iter().map(T::lit).collect()))
    };
    let mat = |(shape, data): (Vec<usize>, Vec<T>), name: &str| -> Result<Array2<T>> {
        match shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), data).expect("checked length")),
            _ => Err(Error::Format(format!("tensor `{name}` must be 2-d"))),
        }
    };
    let vec1 = |(shape, data): (Vec<usize>, Vec<T>), name: &str| -> Result<Array1<T>> {
        match shape[..] {
            [_] => Ok(Array1::from(data)),
            _ => Err(Error::Format(format!("tensor `{name}` must be 1-d"))),
        }
    };
    let encoder = EncoderParams {
        embedding_table: mat(take("encoder.embedding_table")?, "encoder.embedding_table")?,
        proj1_weight: mat(take("encoder.proj1_weight")?, "encoder.proj1_weight")?,
        proj1_bias: vec1(take("encoder.proj1_bias")?, "encoder.proj1_bias")?,
        proj2_weight: mat(take("encoder.proj2_weight")?, "encoder.proj2_weight")?,
        proj2_bias: vec1(take("encoder.proj2_bias")?, "encoder.proj2_bias")?,
    };
    encoder.check_shapes()?;
    let label_table = match take("label_table") {
        Ok(t) => Some(mat(t, "label_table")?),
        Err(_) => None,
    };
    let gcn = GcnParams {
        w1: mat(take("gcn.w1")?, "gcn.w1")?,
        b1: vec1(take("gcn.b1")?, "gcn.b1")?,
        w2: mat(take("gcn.w2")?, "gcn.w2")?,
        b2: vec1(take("gcn.b2")?, "gcn.b2")?,
    };
    let bias = vec1(take("bias")?, "bias")?;
    Ok(ModelParams {
        encoder,
        label_table,
        gcn,
        bias,
    })
}

impl<T: Scalar> ModelState<T> {
    /// Write a versioned checkpoint (all tensors as float64, in declaration order).
    pub fn save(&self, path: impl AsRef<Path>, adam: Option<&AdamState<T>>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: "querycat-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            vocab: self.vocab.tokens_by_id().into_iter().map(String::from).collect(),
            tensors: tensor_records(&self.params),
            adam: adam.map(|a| AdamRecord {
                step: a.step,
                first_moment: tensor_records(&a.first_moment),
                second_moment: tensor_records(&a.second_moment),
            }),
        };
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        serde_json::to_writer(&mut w, &file).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<AdamState<T>>)> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let file: CheckpointFile = serde_json::from_reader(reader).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let vocab = Vocab::from_entries(
            file.vocab.into_iter().enumerate().map(|(i, t)| (t, i)).collect(),
            file.config.tokenizer,
        )?;
        let params: ModelParams<T> = params_from_records(file.tensors)?;
        if params.encoder.vocab_size() != vocab.len() {
            return Err(Error::Format("embedding table rows do not match the vocabulary".into()));
        }
        let adam = match file.adam {
            Some(a) => Some(AdamState {
                first_moment: params_from_records(a.first_moment)?,
                second_moment: params_from_records(a.second_moment)?,
                step: a.step,
                ..AdamState::new(&params)
            }),
            None => None,
        };
        Ok((
            ModelState {
                params,
                vocab,
                config: file.config,
                epoch: file.epoch,
            },
            adam,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn predict_examples() {
        let h = array![[2.0, 0.0], [0.0, 1.0]];
        let s = predict_scores(array![0.0, 0.0].view(), h.view(), array![0.0, 0.0].view()).unwrap();
        assert_eq!(s, array![0.5, 0.5]);
        let s = predict_scores(array![0.0, 0.0].view(), h.view(), array![20.0, 0.0].view()).unwrap();
        assert!((s[0] - 1.0f64).abs() < 1e-8);
        let s = predict_scores(array![1.0, 0.0].view(), h.view(), array![0.0, 0.0].view()).unwrap();
        assert!((s[0] - 0.880_797_077_977_882_3f64).abs() < 1e-12);
        assert!(predict_scores(array![1.0].view(), h.view(), array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn bce_examples() {
        let l = bce_loss(array![1.0, 0.0].view(), array![1.0, 0.0].view()).unwrap();
        assert!(l < 1e-6);
        let l = bce_loss(array![0.5].view(), array![1.0].view()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_loss(array![0.85].view(), array![0.85].view()).unwrap();
        let entropy = -(0.85f64 * 0.85f64.ln() + 0.15 * 0.15f64.ln());
        assert!((l - entropy).abs() < 1e-12);
        assert!((l - 0.4227).abs() < 1e-4);
        assert!(bce_loss(array![0.5].view(), array![1.5].view()).is_err());
    }

    #[test]
    fn config_roundtrip_and_errors() {
        let mut c = TrainConfig::default();
        c.learning_rate = 3e-3;
        c.use_graph_sim = false;
        c.tokenizer = TokenizerMode::Word;
        c.split_ratios = (0.7, 0.2, 0.1);
        assert_eq!(TrainConfig::parse(&c.to_kv_string()).unwrap(), c);

        match TrainConfig::parse("split_ratios = 0.5,0.1,0.1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "split_ratios"),
            other => panic!("{other:?}"),
        }
        match TrainConfig::parse("bogus = 1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        match TrainConfig::parse("dim = 0") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "dim"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::parse("# comment only\n\nepochs = 3 # trailing\n").is_ok());
    }

    #[test]
    fn structure_off_disables_graphs() {
        let c = Variant::NoStructure.apply(&TrainConfig::default());
        assert_eq!(
            c.graph_selection(),
            GraphSelection {
                coo: false,
                sim: false,
                hier: false
            }
        );
        let c = Variant::NoLabelAndKnowledge.apply(&TrainConfig::default());
        assert!(!c.use_label_enhanced && !c.use_knowledge && !c.use_semi);
    }

    fn tiny_params() -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ModelParams {
            encoder: EncoderParams::init(5, 3, 3, 3, &mut rng),
            label_table: None,
            gcn: GcnParams::init(3, 3, &mut rng),
            bias: Array1::zeros(2),
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        adam_update(&mut p, &before.zeros_like(), &mut adam, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.bias = array![0.3, -2.0];
        let mut adam = AdamState::new(&p);
        adam_update(&mut p, &g, &mut adam, 0.01).unwrap();
        let delta = &p.bias - &before.bias;
        assert!((delta[0] + 0.01).abs() < 1e-9);
        assert!((delta[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        fn reference(mut x: f64, grads: &[f64], lr: f64) -> f64 {
            let (mut m, mut v) = (0.0, 0.0);
            for (t, &g) in grads.iter().enumerate() {
                let t = t as i32 + 1;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                x -= lr * mh / (vh.sqrt() + 1e-8);
            }
            x
        }
        let mut p = tiny_params();
        let start = p.bias[1];
        let mut g = p.zeros_like();
        g.bias = array![0.0, 0.7];
        let mut adam = AdamState::new(&p);
        adam_update(&mut p, &g, &mut adam, 0.05).unwrap();
        adam_update(&mut p, &g, &mut adam, 0.05).unwrap();
        assert!((p.bias[1] - reference(start, &[0.7, 0.7], 0.05)).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = tiny_params();
        let mut g = p.zeros_like();
        g.bias = Array1::zeros(3);
        let mut adam = AdamState::new(&p);
        assert!(matches!(adam_update(&mut p, &g, &mut adam, 0.1), Err(Error::Shape { .. })));
    }
}
