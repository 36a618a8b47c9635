use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;
use proptest::prelude::*;
use querycat::data::NodeId;
use querycat::eval::{accumulate, report, ConfusionTotals, MetricsReport};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Rational64;
type Fixture = Vec<(BTreeSet<NodeId>, BTreeSet<NodeId>)>;

fn r(n: i64, d: i64) -> Q {
    Q::new(n, d)
}

/// Hand oracle: flat counting straight from the definitions.
struct Oracle {
    micro: [Q; 3],
    macro_: [Q; 3],
}

fn div(n: usize, d: usize) -> Q {
    if d == 0 { r(0, 1) } else { r(n as i64, d as i64) }
}

fn f1(p: Q, rc: Q) -> Q {
    if p + rc == r(0, 1) { r(0, 1) } else { r(2, 1) * p * rc / (p + rc) }
}

fn oracle(fixture: &Fixture, labels: &[NodeId]) -> Oracle {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut sums = [r(0, 1); 3];
    for l in labels {
        let t = fixture.iter().filter(|(p, g)| p.contains(l) && g.contains(l)).count();
        let f = fixture.iter().filter(|(p, g)| p.contains(l) && !g.contains(l)).count();
        let n = fixture.iter().filter(|(p, g)| !p.contains(l) && g.contains(l)).count();
        tp += t;
        fp += f;
        fn_ += n;
        let (p, rc) = (div(t, t + f), div(t, t + n));
        sums[0] += p;
        sums[1] += rc;
        sums[2] += f1(p, rc);
    }
    let k = r(labels.len() as i64, 1);
    let (p, rc) = (div(tp, tp + fp), div(tp, tp + fn_));
    Oracle {
        micro: [p, rc, f1(p, rc)],
        macro_: [sums[0] / k, sums[1] / k, sums[2] / k],
    }
}

fn run(fixture: &Fixture, clicks: &BTreeMap<NodeId, u64>) -> MetricsReport<Q> {
    let mut totals = ConfusionTotals::default();
    for (p, g) in fixture {
        accumulate(p, g, &mut totals);
    }
    report(&totals, clicks)
}

fn random_fixture(rng: &mut ChaCha8Rng, labels: &[NodeId], queries: usize) -> Fixture {
    let pick = |rng: &mut ChaCha8Rng, min: usize| {
        let mut s = BTreeSet::new();
        while s.len() < min || (s.len() < 3 && rng.gen_bool(0.4)) {
            s.insert(labels[rng.gen_range(0..labels.len())]);
        }
        s
    };
    (0..queries).map(|_| (pick(rng, 1), pick(rng, 1))).collect()
}

#[test]
fn worked_example() {
    let (a, b) = (NodeId(1), NodeId(2));
    let fixture: Fixture = vec![(BTreeSet::from([a, b]), BTreeSet::from([a])), (BTreeSet::from([b]), BTreeSet::from([b]))];
    let clicks = BTreeMap::from([(a, 3), (b, 1)]);
    let rep = run(&fixture, &clicks);
    assert_eq!([rep.micro.precision, rep.micro.recall, rep.micro.f1], [r(2, 3), r(1, 1), r(4, 5)]);
    assert_eq!(rep.macro_.f1, r(5, 6));
    let o = oracle(&fixture, &[a, b]);
    assert_eq!(o.micro[2], r(4, 5));
    assert_eq!(o.macro_[2], r(5, 6));
}

#[test]
fn fifty_query_fixtures_match_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..40 {
        let n_labels = rng.gen_range(2..12);
        let labels: Vec<NodeId> = (0..n_labels).map(|i| NodeId(100 + i)).collect();
        let fixture = random_fixture(&mut rng, &labels, 50);
        let clicks: BTreeMap<NodeId, u64> = labels.iter().map(|&l| (l, rng.gen_range(0..20))).collect();
        let rep = run(&fixture, &clicks);
        let o = oracle(&fixture, &labels);
        assert_eq!([rep.micro.precision, rep.micro.recall, rep.micro.f1], o.micro, "case {case}");
        assert_eq!([rep.macro_.precision, rep.macro_.recall, rep.macro_.f1], o.macro_, "case {case}");
        assert_eq!(rep.queries, 50);

        // floating-point report agrees with the exact one
        let mut totals = ConfusionTotals::default();
        for (p, g) in &fixture {
            accumulate(p, g, &mut totals);
        }
        let rf: MetricsReport<f64> = report(&totals, &clicks);
        for (x, y) in rf.row().iter().zip(rep.row()) {
            assert!((x - *y.numer() as f64 / *y.denom() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<NodeId> = (0..6).map(NodeId).collect();
    let fixture: Fixture = random_fixture(&mut rng, &labels, 50).into_iter().map(|(_, g)| (g.clone(), g)).collect();
    let used: BTreeSet<NodeId> = fixture.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    let clicks: BTreeMap<NodeId, u64> = used.iter().map(|&l| (l, 1)).collect();
    let rep = run(&fixture, &clicks);
    assert!(rep.row()[..6].iter().all(|v| *v == r(1, 1)));
}

fn fixture_strategy() -> impl Strategy<Value = (Fixture, usize)> {
    (2usize..8).prop_flat_map(|n| {
        let set = prop::collection::btree_set((0..n as i64).prop_map(NodeId), 1..=n.min(3));
        (prop::collection::vec((set.clone(), set), 1..=50), Just(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn invariants((fixture, n) in fixture_strategy(), perm_seed in any::<u64>()) {
        let labels: Vec<NodeId> = (0..n as i64).map(NodeId).collect();
        let clicks: BTreeMap<NodeId, u64> = labels.iter().map(|&l| (l, l.0 as u64)).collect();
        let rep = run(&fixture, &clicks);
        let o = oracle(&fixture, &labels);
        prop_assert_eq!([rep.micro.precision, rep.micro.recall, rep.micro.f1], o.micro);

        let zero = r(0, 1);
        let one = r(1, 1);
        for v in rep.row() {
            prop_assert!(zero <= v && v <= one);
        }
        // pooled metrics; macro F1 is a mean of per-label F1 instead
        for m in [&rep.micro, &rep.head, &rep.tail] {
            if m.precision + m.recall != zero {
                prop_assert_eq!(m.f1, r(2, 1) * m.precision * m.recall / (m.precision + m.recall));
            }
        }
        let global = rep.per_label.iter().fold((0, 0, 0), |acc, row| {
            (acc.0 + row.counts.tp, acc.1 + row.counts.fp, acc.2 + row.counts.fn_)
        });
        let mut totals = ConfusionTotals::default();
        for (p, g) in &fixture {
            accumulate(p, g, &mut totals);
        }
        prop_assert_eq!(global, (totals.global.tp, totals.global.fp, totals.global.fn_));

        // relabelling the taxonomy leaves macro metrics unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut rng);
        let map: BTreeMap<NodeId, NodeId> = labels.iter().copied().zip(shuffled.iter().map(|l| NodeId(1000 - l.0))).collect();
        let relabel = |s: &BTreeSet<NodeId>| s.iter().map(|l| map[l]).collect::<BTreeSet<_>>();
        let moved: Fixture = fixture.iter().map(|(p, g)| (relabel(p), relabel(g))).collect();
        let moved_clicks: BTreeMap<NodeId, u64> = clicks.iter().map(|(l, c)| (map[l], *c)).collect();
        let rep2 = run(&moved, &moved_clicks);
        prop_assert_eq!(&rep.macro_, &rep2.macro_);
        prop_assert_eq!(&rep.micro, &rep2.micro);

        // a perfectly predicted extra query never lowers micro recall
        let mut more = fixture.clone();
        more.push((fixture[0].1.clone(), fixture[0].1.clone()));
        prop_assert!(run(&more, &clicks).micro.recall >= rep.micro.recall);

        // report is a pure function of the totals
        prop_assert_eq!(report::<Q>(&totals, &clicks), report::<Q>(&totals, &clicks));
    }
}
