//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array1;
use querycat::data::{ClickSample, KnowledgeBase, KnowledgeKind, KnowledgeRecord, NodeId, Taxonomy};
use querycat::encoder::TokenizerMode;
use querycat::graph::GraphBundle;
use querycat::trainer::{
    batch_loss, build_graph_for, build_vocab, loss_and_grad, prepare_samples, ModelContext, ModelParams, ModelState,
    PreparedSample, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two roots with two leaves each: |C| = 4, |C'| = 6.
pub fn micro_taxonomy() -> Taxonomy {
    let n = |id: i64, name: &str, parent: Option<i64>, side: &[&str]| {
        (NodeId(id), name.to_string(), parent.map(NodeId), side.iter().map(|s| s.to_string()).collect())
    };
    Taxonomy::from_parts(vec![
        n(1, "ab", None, &[]),
        n(2, "cd", None, &[]),
        n(3, "abe", Some(1), &["fg"]),
        n(4, "abh", Some(1), &["ij"]),
        n(5, "cdk", Some(2), &["lm"]),
        n(6, "cdn", Some(2), &["op"]),
    ])
    .unwrap()
}

pub fn ids(v: &[i64]) -> BTreeSet<NodeId> {
    v.iter().map(|&i| NodeId(i)).collect()
}

pub fn micro_samples() -> Vec<ClickSample> {
    vec![
        ClickSample {
            query_text: "aeg".into(),
            clicked_leaf_ids: ids(&[3]),
            knowledge_ids: vec![1],
        },
        ClickSample {
            query_text: "ckz".into(),
            clicked_leaf_ids: ids(&[5, 6]),
            knowledge_ids: vec![],
        },
        ClickSample {
            query_text: "bhj".into(),
            clicked_leaf_ids: ids(&[4, 3]),
            knowledge_ids: vec![1, 2],
        },
    ]
}

pub fn micro_knowledge() -> KnowledgeBase {
    [(1, "abef", KnowledgeKind::World), (2, "hij", KnowledgeKind::Posterior)]
        .into_iter()
        .map(|(id, text, kind)| (id, KnowledgeRecord { id, text: text.into(), kind }))
        .collect()
}

pub fn micro_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        tokenizer: TokenizerMode::Char,
        alpha_threshold: 0.3,
        beta_threshold: 0.0,
        ..TrainConfig::default()
    }
}

/// Overwrite every parameter with uniform values in `±scale` so no tensor sits near zero.
pub fn randomize(model: &mut ModelState<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub struct Micro {
    pub taxonomy: Taxonomy,
    pub model: ModelState<f64>,
    pub graph: Option<GraphBundle<f64>>,
    pub ctx: ModelContext<f64>,
    pub batch: Vec<PreparedSample>,
}

pub fn micro(config: TrainConfig, seed: u64) -> Micro {
    let taxonomy = micro_taxonomy();
    let samples = micro_samples();
    let kb = micro_knowledge();
    let vocab = build_vocab(&samples, &taxonomy, &kb, config.tokenizer);
    let mut model = ModelState::init(&config, vocab, &taxonomy);
    randomize(&mut model, 0.5, seed);
    let graph = config.use_structure.then(|| build_graph_for(&model, &taxonomy, &samples).unwrap());
    let ctx = ModelContext::new(&model, &taxonomy, graph.as_ref()).unwrap();
    let batch = prepare_samples(&samples, &taxonomy, &model.vocab, &kb, &config).unwrap();
    Micro {
        taxonomy,
        model,
        graph,
        ctx,
        batch,
    }
}

/// Soft targets with every kind of entry: clicks, fractional semi scores, zeros.
pub fn soft_targets(batch: &[PreparedSample], num_leaves: usize) -> Vec<Array1<f64>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut y = Array1::zeros(num_leaves);
            y[(i + 1) % num_leaves] = 0.83;
            for &r in &s.click_rows {
                y[r] = 1.0;
            }
            y
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

/// Worst relative error of `analytic` against central differences of `f` over every entry of `params`.
pub fn check_all<P: Clone>(
    params: &P,
    analytic: &[(&'static str, Vec<f64>)],
    tensors_mut: impl Fn(&mut P) -> Vec<(&'static str, &mut [f64])>,
    f: impl Fn(&P) -> f64,
) -> Vec<(&'static str, f64)> {
    let mut worst = Vec::new();
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for i in 0..grad.len() {
            let mut plus = params.clone();
            tensors_mut(&mut plus)[k].1[i] += STEP;
            let mut minus = params.clone();
            tensors_mut(&mut minus)[k].1[i] -= STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
            max_err = max_err.max(rel_err(grad[i], numeric, FLOOR));
        }
        worst.push((*name, max_err));
    }
    worst
}

/// Per-tensor worst relative error of the total-loss gradient on a micro-instance.
pub fn full_model_errors(m: &Micro) -> Vec<(&'static str, f64)> {
    let targets = soft_targets(&m.batch, m.taxonomy.num_leaves());
    let g = loss_and_grad(&m.model.params, &m.ctx, &m.batch, &targets).unwrap();
    let forward = batch_loss(&m.model.params, &m.ctx, &m.batch, &targets).unwrap();
    assert!((g.loss - forward).abs() < 1e-12);
    let analytic: Vec<_> = g.grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let f = |p: &ModelParams<f64>| batch_loss(p, &m.ctx, &m.batch, &targets).unwrap();
    check_all(&m.model.params, &analytic, |p| p.tensors_mut(), f)
}
