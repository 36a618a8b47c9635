//! Seeded synthetic corpora with known structure.
//!
//! Leaves are grouped five to a root. Leaf `j` is named `sig_j` and carries
//! the side information `kw_j`; its world-knowledge record reads `sig_j kw_j`,
//! so a label sequence and its knowledge text tokenize identically in word mode.
//!
//! Head queries contain their gold signatures plus noise words. Tail leaves get
//! no clicks at all: queries about a tail leaf mention its signature, but the
//! logged click lands on a head sibling. The separate `gold` set records the
//! true intent of every query, which is what tail recall is measured against.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    write_clicks, write_knowledge, write_taxonomy, ClickSample, KnowledgeBase, KnowledgeKind, KnowledgeRecord, NodeId,
    Taxonomy,
};
use crate::error::{Error, Result};

/// Leaves per root node.
pub const GROUP_SIZE: usize = 5;
/// Distinct noise words.
pub const NOISE_VOCAB: usize = 200;
const LEAF_ID_BASE: i64 = 1000;
const SECOND_LABEL_RATE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    /// Click log: what users clicked.
    pub samples: Vec<ClickSample>,
    pub knowledge: KnowledgeBase,
    /// Held-out queries labelled with their true intent (tail leaves included).
    pub gold: Vec<ClickSample>,
    /// Leaves that never receive a click.
    pub tail_leaves: BTreeSet<NodeId>,
}

pub fn signature(leaf: usize) -> String {
    format!("sig_{leaf}")
}

fn leaf_id(leaf: usize) -> NodeId {
    NodeId(LEAF_ID_BASE + leaf as i64)
}

struct Layout {
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    is_tail: Vec<bool>,
    head: Vec<usize>,
    tail: Vec<usize>,
}

impl Layout {
    /// A head leaf standing in for `leaf` in the click log: a head sibling when one exists.
    fn click_stand_in<R: Rng>(&self, leaf: usize, rng: &mut R) -> usize {
        let siblings: Vec<usize> = self.members[self.group_of[leaf]]
            .iter()
            .copied()
            .filter(|&s| !self.is_tail[s])
            .collect();
        *siblings.choose(rng).unwrap_or_else(|| self.head.choose(rng).expect("at least one head leaf"))
    }

    /// A distinct head sibling of `leaf`, if any.
    fn head_sibling<R: Rng>(&self, leaf: usize, rng: &mut R) -> Option<usize> {
        let siblings: Vec<usize> = self.members[self.group_of[leaf]]
            .iter()
            .copied()
            .filter(|&s| s != leaf && !self.is_tail[s])
            .collect();
        siblings.choose(rng).copied()
    }
}

/// The true intent of one generated query.
struct Intent {
    gold: BTreeSet<usize>,
    /// Tail leaf the query is about, if any.
    tail: Option<usize>,
}

fn draw_intent<R: Rng>(layout: &Layout, forced_head: Option<usize>, rng: &mut R) -> Intent {
    let n = layout.is_tail.len();
    let tail_share = layout.tail.len() as f64 / n as f64;
    if forced_head.is_none() && !layout.tail.is_empty() && rng.gen_bool(tail_share) {
        let t = *layout.tail.choose(rng).expect("non-empty");
        return Intent {
            gold: BTreeSet::from([t]),
            tail: Some(t),
        };
    }
    let first = forced_head.unwrap_or_else(|| *layout.head.choose(rng).expect("non-empty"));
    let mut gold = BTreeSet::from([first]);
    if rng.gen_bool(SECOND_LABEL_RATE) {
        if let Some(s) = layout.head_sibling(first, rng) {
            gold.insert(s);
        }
    }
    Intent { gold, tail: None }
}

fn query_text<R: Rng>(gold: &BTreeSet<usize>, rng: &mut R) -> String {
    let mut tokens: Vec<String> = gold.iter().map(|&j| signature(j)).collect();
    let noise = rng.gen_range(2..=4);
    tokens.extend((0..noise).map(|_| format!("w{}", rng.gen_range(0..NOISE_VOCAB))));
    tokens.shuffle(rng);
    tokens.join(" ")
}

fn knowledge_for(gold: &BTreeSet<usize>) -> Vec<i64> {
    gold.iter().map(|&j| j as i64).collect()
}

/// Generate a corpus with `num_queries` click samples and `max(num_queries / 5, num_labels)` gold samples.
///
/// Exactly `floor(tail_fraction * num_labels)` leaves receive no clicks; every
/// other leaf is clicked at least once.
pub fn generate_synthetic(num_labels: usize, num_queries: usize, tail_fraction: f64, seed: u64) -> Result<SyntheticCorpus> {
    if num_labels < 2 {
        return Err(Error::Validation(format!("need at least 2 labels, got {num_labels}")));
    }
    if !(0.0..1.0).contains(&tail_fraction) {
        return Err(Error::Validation(format!("tail_fraction must lie in [0, 1), got {tail_fraction}")));
    }
    let num_tail = (tail_fraction * num_labels as f64 + 1e-9).floor() as usize;
    if num_tail >= num_labels {
        return Err(Error::Validation("tail_fraction leaves no head labels".into()));
    }
    let num_head = num_labels - num_tail;
    if num_queries < num_head {
        return Err(Error::Validation(format!(
            "{num_queries} queries cannot cover {num_head} clicked labels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let num_groups = num_labels.div_ceil(GROUP_SIZE);
    let group_of: Vec<usize> = (0..num_labels).map(|j| j / GROUP_SIZE).collect();
    let mut members = vec![Vec::new(); num_groups];
    for (j, &g) in group_of.iter().enumerate() {
        members[g].push(j);
    }

    // Prefer tail leaves whose group keeps a head member.
    let mut order: Vec<usize> = (0..num_labels).collect();
    order.shuffle(&mut rng);
    let mut is_tail = vec![false; num_labels];
    let mut head_left: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut picked = 0;
    for pass in 0..2 {
        for &j in &order {
            if picked == num_tail {
                break;
            }
            if !is_tail[j] && (pass == 1 || head_left[group_of[j]] > 1) {
                is_tail[j] = true;
                head_left[group_of[j]] -= 1;
                picked += 1;
            }
        }
    }
    let head: Vec<usize> = (0..num_labels).filter(|&j| !is_tail[j]).collect();
    let tail: Vec<usize> = (0..num_labels).filter(|&j| is_tail[j]).collect();
    let layout = Layout {
        group_of,
        members,
        is_tail,
        head,
        tail,
    };

    let mut parts = Vec::with_capacity(num_groups + num_labels);
    for g in 0..num_groups {
        parts.push((NodeId(g as i64 + 1), format!("group_{g}"), None, vec![]));
    }
    for j in 0..num_labels {
        parts.push((
            leaf_id(j),
            signature(j),
            Some(NodeId(layout.group_of[j] as i64 + 1)),
            vec![format!("kw_{j}")],
        ));
    }
    let taxonomy = Taxonomy::from_parts(parts)?;

    let knowledge: KnowledgeBase = (0..num_labels)
        .map(|j| {
            let id = j as i64;
            (
                id,
                KnowledgeRecord {
                    id,
                    text: format!("{} kw_{j}", signature(j)),
                    kind: KnowledgeKind::World,
                },
            )
        })
        .collect();

    let mut samples = Vec::with_capacity(num_queries);
    for i in 0..num_queries {
        let forced = layout.head.get(i).copied();
        let intent = draw_intent(&layout, forced, &mut rng);
        let clicked: BTreeSet<NodeId> = match intent.tail {
            Some(t) => BTreeSet::from([leaf_id(layout.click_stand_in(t, &mut rng))]),
            None => intent.gold.iter().map(|&j| leaf_id(j)).collect(),
        };
        samples.push(ClickSample {
            query_text: query_text(&intent.gold, &mut rng),
            clicked_leaf_ids: clicked,
            knowledge_ids: knowledge_for(&intent.gold),
        });
    }
    // the covering prefix should not sit in a block at the front
    samples.shuffle(&mut rng);

    let num_gold = (num_queries / 5).max(num_labels);
    let mut gold = Vec::with_capacity(num_gold);
    for i in 0..num_gold {
        // cycle through every leaf first so each one has gold support
        let intent = if i < num_labels {
            Intent {
                gold: BTreeSet::from([i]),
                tail: None,
            }
        } else {
            draw_intent(&layout, None, &mut rng)
        };
        gold.push(ClickSample {
            query_text: query_text(&intent.gold, &mut rng),
            clicked_leaf_ids: intent.gold.iter().map(|&j| leaf_id(j)).collect(),
            knowledge_ids: knowledge_for(&intent.gold),
        });
    }

    Ok(SyntheticCorpus {
        taxonomy,
        samples,
        knowledge,
        gold,
        tail_leaves: layout.tail.iter().map(|&j| leaf_id(j)).collect(),
    })
}

pub const TAXONOMY_FILE: &str = "taxonomy.jsonl";
pub const CLICKS_FILE: &str = "clicks.jsonl";
pub const KNOWLEDGE_FILE: &str = "knowledge.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";

impl SyntheticCorpus {
    /// Write the four corpus files into `dir` (created if missing).
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_taxonomy(dir.join(TAXONOMY_FILE), &self.taxonomy)?;
        write_clicks(dir.join(CLICKS_FILE), &self.samples)?;
        write_knowledge(dir.join(KNOWLEDGE_FILE), &self.knowledge)?;
        write_clicks(dir.join(GOLD_FILE), &self.gold)
    }

    /// Click count per leaf in the click log.
    pub fn leaf_clicks(&self) -> BTreeMap<NodeId, u64> {
        let mut counts: BTreeMap<NodeId, u64> = self.taxonomy.leaf_index.iter().map(|&id| (id, 0)).collect();
        for s in &self.samples {
            for id in &s.clicked_leaf_ids {
                *counts.entry(*id).or_default() += 1;
            }
        }
        counts
    }
}
