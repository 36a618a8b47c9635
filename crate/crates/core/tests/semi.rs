mod common;

use common::{micro, micro_config, randomize};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use querycat::knowledge::{attention_fuse, compute_semi_targets, fuse_targets, tau_at, SemiTargets, TauSchedule};
use querycat::synth::generate_synthetic;
use querycat::trainer::{
    batch_targets, build_graph_for, build_vocab, label_pass, loss_and_grad, prepare_samples, step_gradients,
    ModelContext, ModelParams, ModelState, PreparedSample, TrainConfig, Trainer,
};

fn max_abs_diff(a: &ModelParams<f64>, b: &ModelParams<f64>) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|((na, ta), (nb, tb))| {
            assert_eq!(*na, nb);
            assert_eq!(ta.len(), tb.len(), "{na}");
            ta.iter().zip(tb).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn live_semi_gradients_equal_frozen_target_gradients() {
    for (variant, mut config) in [
        ("full", micro_config()),
        ("no knowledge", TrainConfig { use_knowledge: false, ..micro_config() }),
        ("no structure", TrainConfig { use_structure: false, ..micro_config() }),
    ] {
        config.use_semi = true;
        let m = micro(config.clone(), 11);
        let labels = label_pass(&m.model.params, &m.ctx).unwrap();
        // a low threshold so that most pairs produce a semi target
        let live = step_gradients(&m.model.params, &config, &m.ctx, &labels, true, &m.batch, -1.0).unwrap();
        let n_semi: usize = live.semi.iter().map(SemiTargets::len).sum();
        assert!(n_semi >= m.batch.len() * 2, "{variant}: only {n_semi} semi entries");

        let frozen_targets = batch_targets(&m.batch, &live.semi, m.ctx.num_leaves);
        let frozen = loss_and_grad(&m.model.params, &m.ctx, &m.batch, &frozen_targets).unwrap();
        assert!((live.gradients.loss - frozen.loss).abs() <= 1e-12, "{variant}");
        let diff = max_abs_diff(&live.gradients.grads, &frozen.grads);
        assert!(diff <= 1e-12, "{variant}: gradient difference {diff:e}");
    }
}

#[test]
fn semi_scores_do_depend_on_parameters() {
    // Otherwise the stop-gradient check above would hold vacuously.
    let config = TrainConfig { use_semi: true, ..micro_config() };
    let m = micro(config.clone(), 11);
    let scores = |params: &ModelParams<f64>| {
        let labels = label_pass(params, &m.ctx).unwrap();
        step_gradients(params, &config, &m.ctx, &labels, true, &m.batch, -1.0).unwrap().semi
    };
    let before = scores(&m.model.params);
    let mut moved = m.model.params.clone();
    moved.encoder.proj2_bias[0] += 0.1;
    assert_ne!(before, scores(&moved));
}

/// One epoch at the schedule's first threshold (1.0), from the same starting point.
fn run_first_epoch(
    use_semi: bool,
    model: &ModelState<f64>,
    ctx: &ModelContext<f64>,
    batch: &[PreparedSample],
    batch_size: usize,
) -> (ModelParams<f64>, u64) {
    let mut model = model.clone();
    model.config.use_semi = use_semi;
    model.config.batch_size = batch_size;
    let tau = tau_at(&model.config.tau_schedule().unwrap(), 0).unwrap();
    assert_eq!(tau, 1.0);
    let mut trainer = Trainer::new(model, ctx.clone());
    let (_, semi) = trainer.run_epoch(batch, 0, tau).unwrap();
    (trainer.model.params, semi)
}

#[test]
fn warm_start_epoch_matches_click_only_training() {
    // micro-instance with random parameters
    let m = micro(TrainConfig { use_semi: true, ..micro_config() }, 5);
    let (with_semi, n) = run_first_epoch(true, &m.model, &m.ctx, &m.batch, 2);
    let (without, _) = run_first_epoch(false, &m.model, &m.ctx, &m.batch, 2);
    assert_eq!(n, 0);
    assert!(max_abs_diff(&with_semi, &without) <= 1e-12);

    // a larger synthetic corpus, again from random parameters
    let corpus = generate_synthetic(10, 200, 0.2, 3).unwrap();
    let config = TrainConfig {
        dim: 16,
        learning_rate: 0.01,
        use_semi: true,
        ..TrainConfig::default()
    };
    let vocab = build_vocab(&corpus.samples, &corpus.taxonomy, &corpus.knowledge, config.tokenizer);
    let mut model = ModelState::init(&config, vocab, &corpus.taxonomy);
    randomize(&mut model, 0.3, 17);
    let graph = build_graph_for(&model, &corpus.taxonomy, &corpus.samples).unwrap();
    let ctx = ModelContext::new(&model, &corpus.taxonomy, Some(&graph)).unwrap();
    let prepared = prepare_samples(&corpus.samples, &corpus.taxonomy, &model.vocab, &corpus.knowledge, &config).unwrap();
    let (with_semi, n) = run_first_epoch(true, &model, &ctx, &prepared, 32);
    let (without, _) = run_first_epoch(false, &model, &ctx, &prepared, 32);
    assert_eq!(n, 0);
    let diff = max_abs_diff(&with_semi, &without);
    assert!(diff <= 1e-12, "difference {diff:e}");
    assert!(max_abs_diff(&with_semi, &model.params) > 1e-3, "the epoch must actually move the parameters");
}

#[test]
fn semi_examples() {
    let q = Array1::from(vec![1.0, 0.0]);
    let labels = Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    let st = compute_semi_targets(q.view(), labels.view(), 1.0).unwrap();
    assert_eq!(st.entries.into_iter().collect::<Vec<_>>(), vec![(0, 1.0)]);

    // 31.79 degrees apart
    let angle = 0.85f64.acos();
    let labels = Array2::from_shape_vec((1, 2), vec![angle.cos(), angle.sin()]).unwrap();
    let st = compute_semi_targets(q.view(), labels.view(), 0.8).unwrap();
    assert!((st.get(0) - 0.85).abs() < 1e-12);

    let fused = attention_fuse(q.view(), Array2::from_shape_vec((2, 2), vec![0.3, 0.7, 0.3, 0.7]).unwrap().view()).unwrap();
    assert_eq!(fused.attention_weights, vec![0.5, 0.5]);
    assert!((fused.values[0] - 1.3).abs() < 1e-15 && (fused.values[1] - 0.7).abs() < 1e-15);
}

#[test]
fn tau_schedule_examples() {
    let s = TauSchedule::new(1.0, 0.8, 20).unwrap();
    assert_eq!(tau_at(&s, 0).unwrap(), 1.0);
    assert!((tau_at(&s, 19).unwrap() - 0.8).abs() < 1e-15);
    assert!((tau_at(&s, 10).unwrap() - (1.0 - 0.2 * 10.0 / 19.0)).abs() < 1e-15);
    assert!(tau_at(&s, 20).is_err());
    assert_eq!(tau_at(&TauSchedule::new(1.0, 0.8, 1).unwrap(), 0).unwrap(), 0.8);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_weights_form_a_distribution((q, k) in (1usize..6, 1usize..8).prop_flat_map(|(d, n)| (matrix(1, d), matrix(n, d)))) {
        let fused = attention_fuse(q.row(0), k.view()).unwrap();
        prop_assert!(fused.attention_weights.iter().all(|&w| w >= 0.0));
        let total: f64 = fused.attention_weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_tau_never_adds_entries((q, c) in (1usize..6, 1usize..10).prop_flat_map(|(d, n)| (matrix(1, d), matrix(n, d)))) {
        let grid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let sets: Vec<_> = grid
            .iter()
            .map(|&t| compute_semi_targets(q.row(0), c.view(), t).unwrap().entries.into_keys().collect::<std::collections::BTreeSet<_>>())
            .collect();
        for w in sets.windows(2) {
            prop_assert!(w[1].is_subset(&w[0]));
        }
    }

    #[test]
    fn tau_is_nonincreasing(start in 0.0f64..=1.0, drop in 0.0f64..=1.0, epochs in 1usize..40) {
        let s = TauSchedule::new(start, start * (1.0 - drop), epochs).unwrap();
        let taus: Vec<f64> = (0..epochs).map(|e| tau_at(&s, e).unwrap()).collect();
        prop_assert!(taus.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fused_targets_stay_in_unit_interval(
        clicks in prop::collection::vec(any::<bool>(), 1..12),
        semi in prop::collection::btree_map(0usize..12, 0.0f64..=1.0, 0..6),
    ) {
        let click = Array1::from_iter(clicks.iter().map(|&c| if c { 1.0 } else { 0.0 }));
        let st = SemiTargets { entries: semi.into_iter().filter(|(j, _)| *j < clicks.len()).collect() };
        let y = fuse_targets(click.view(), &st);
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(fuse_targets(click.view(), &SemiTargets::default()), click);
    }
}
