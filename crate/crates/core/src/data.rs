//! Corpus types, JSONL file formats, dataset statistics and splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a taxonomy node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub i64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelNode {
    pub id: NodeId,
    pub name: String,
    pub side_info: Vec<String>,
    pub parent_id: Option<NodeId>,
    /// 1 for roots.
    pub level: usize,
    pub is_leaf: bool,
}

/// On-disk form of a taxonomy line; level and leaf flags are derived on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyRecord {
    id: NodeId,
    name: String,
    parent_id: Option<NodeId>,
    #[serde(default)]
    side_info: Vec<String>,
}

/// A validated label forest with fixed row orders.
///
/// `all_index` lists internal nodes sorted by id followed by leaves sorted by
/// id, so the leaf rows of any `|C'| x d` matrix form a trailing contiguous block.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    pub nodes: Vec<LabelNode>,
    pub leaf_index: Vec<NodeId>,
    pub all_index: Vec<NodeId>,
    node_pos: HashMap<NodeId, usize>,
    row_of: HashMap<NodeId, usize>,
    children: HashMap<NodeId, Vec<NodeId>>,
}

impl Taxonomy {
    /// Validate raw `(id, name, parent, side_info)` tuples and derive levels,
    /// leaf flags and row orders.
    pub fn from_parts(
        parts: Vec<(NodeId, String, Option<NodeId>, Vec<String>)>,
    ) -> Result<Self> {
        let mut by_id: BTreeMap<NodeId, (String, Option<NodeId>, Vec<String>)> = BTreeMap::new();
        for (id, name, parent, side) in parts {
            if name.is_empty() {
                return Err(Error::Structure {
                    id: id.0,
                    message: "empty label name".into(),
                });
            }
            if by_id.insert(id, (name, parent, side)).is_some() {
                return Err(Error::Structure {
                    id: id.0,
                    message: "duplicate node id".into(),
                });
            }
        }
        if by_id.is_empty() {
            return Err(Error::Validation("taxonomy has no nodes".into()));
        }

        let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for (&id, (_, parent, _)) in &by_id {
            if let Some(p) = parent {
                if *p == id {
                    return Err(Error::Structure {
                        id: id.0,
                        message: "node is its own parent".into(),
                    });
                }
                if !by_id.contains_key(p) {
                    return Err(Error::Structure {
                        id: id.0,
                        message: format!("dangling parent id {p}"),
                    });
                }
                children.entry(*p).or_default().push(id);
            }
        }

        // Walk up from every node; a walk longer than the node count is a cycle.
        let mut levels: BTreeMap<NodeId, usize> = BTreeMap::new();
        for &id in by_id.keys() {
            let mut level = 1;
            let mut cur = id;
            while let Some(p) = by_id[&cur].1 {
                level += 1;
                if level > by_id.len() {
                    return Err(Error::Structure {
                        id: id.0,
                        message: "cycle in parent links".into(),
                    });
                }
                cur = p;
            }
            levels.insert(id, level);
        }

        let mut nodes = Vec::with_capacity(by_id.len());
        for (id, (name, parent_id, side_info)) in by_id {
            nodes.push(LabelNode {
                id,
                name,
                side_info,
                parent_id,
                level: levels[&id],
                is_leaf: !children.contains_key(&id),
            });
        }
        for kids in children.values_mut() {
            kids.sort();
        }

        let leaf_index: Vec<NodeId> = nodes.iter().filter(|n| n.is_leaf).map(|n| n.id).collect();
        let mut all_index: Vec<NodeId> = nodes.iter().filter(|n| !n.is_leaf).map(|n| n.id).collect();
        all_index.extend(leaf_index.iter().copied());

        let node_pos = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let row_of = all_index.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Taxonomy {
            nodes,
            leaf_index,
            all_index,
            node_pos,
            row_of,
            children,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.all_index.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_index.len()
    }

    /// Row of the first leaf in `all_index` order.
    pub fn leaf_offset(&self) -> usize {
        self.num_nodes() - self.num_leaves()
    }

    pub fn node(&self, id: NodeId) -> Option<&LabelNode> {
        self.node_pos.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.node_pos.contains_key(&id)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.node(id).is_some_and(|n| n.is_leaf)
    }

    /// Row of `id` in `all_index` order.
    pub fn row(&self, id: NodeId) -> Option<usize> {
        self.row_of.get(&id).copied()
    }

    /// Row of a leaf in `leaf_index` order.
    pub fn leaf_row(&self, id: NodeId) -> Option<usize> {
        let r = self.row(id)?;
        r.checked_sub(self.leaf_offset())
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Nodes in `all_index` order.
    pub fn nodes_in_row_order(&self) -> impl Iterator<Item = &LabelNode> + '_ {
        self.all_index.iter().map(move |&id| self.node(id).expect("indexed node"))
    }

    pub fn leaves(&self) -> impl Iterator<Item = &LabelNode> + '_ {
        self.leaf_index.iter().map(move |&id| self.node(id).expect("indexed leaf"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickSample {
    pub query_text: String,
    pub clicked_leaf_ids: BTreeSet<NodeId>,
    pub knowledge_ids: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClickRecord {
    query: String,
    clicked_label_ids: Vec<NodeId>,
    #[serde(default)]
    knowledge_ids: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeKind {
    Posterior,
    World,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: i64,
    pub text: String,
    pub kind: KnowledgeKind,
}

/// Knowledge records keyed by id.
pub type KnowledgeBase = BTreeMap<i64, KnowledgeRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_queries: usize,
    pub avg_chars: f64,
    pub total_labels: usize,
    pub avg_labels: f64,
    pub min_labels: usize,
    pub max_labels: usize,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let records: Vec<(usize, TaxonomyRecord)> = read_jsonl(path.as_ref())?;
    Taxonomy::from_parts(
        records
            .into_iter()
            .map(|(_, r)| (r.id, r.name, r.parent_id, r.side_info))
            .collect(),
    )
}

pub fn write_taxonomy(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        taxonomy.nodes.iter().map(|n| TaxonomyRecord {
            id: n.id,
            name: n.name.clone(),
            parent_id: n.parent_id,
            side_info: n.side_info.clone(),
        }),
    )
}

fn sample_from_record(path: &Path, line: usize, r: ClickRecord, taxonomy: Option<&Taxonomy>) -> Result<ClickSample> {
    let bad = |message: String| Error::Validation(format!("{}:{line}: {message}", path.display()));
    if r.clicked_label_ids.is_empty() {
        return Err(bad("empty clicked label set".into()));
    }
    if let Some(tax) = taxonomy {
        for id in &r.clicked_label_ids {
            if !tax.contains(*id) {
                return Err(bad(format!("clicked id {id} is not in the taxonomy")));
            }
            if !tax.is_leaf(*id) {
                return Err(bad(format!("clicked id {id} is not a leaf")));
            }
        }
    }
    Ok(ClickSample {
        query_text: r.query,
        clicked_leaf_ids: r.clicked_label_ids.into_iter().collect(),
        knowledge_ids: r.knowledge_ids,
    })
}

/// Load a click log, validating every label against `taxonomy`. Order is preserved
/// and repeated queries stay separate samples.
pub fn load_clicks(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Vec<ClickSample>> {
    let path = path.as_ref();
    read_jsonl::<ClickRecord>(path)?
        .into_iter()
        .map(|(line, r)| sample_from_record(path, line, r, Some(taxonomy)))
        .collect()
}

/// Load a click log without taxonomy validation (only non-emptiness is checked).
pub fn load_clicks_unchecked(path: impl AsRef<Path>) -> Result<Vec<ClickSample>> {
    let path = path.as_ref();
    read_jsonl::<ClickRecord>(path)?
        .into_iter()
        .map(|(line, r)| sample_from_record(path, line, r, None))
        .collect()
}

pub fn write_clicks(path: impl AsRef<Path>, samples: &[ClickSample]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        samples.iter().map(|s| ClickRecord {
            query: s.query_text.clone(),
            clicked_label_ids: s.clicked_leaf_ids.iter().copied().collect(),
            knowledge_ids: s.knowledge_ids.clone(),
        }),
    )
}

pub fn load_knowledge(path: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let mut kb = KnowledgeBase::new();
    for (line, r) in read_jsonl::<KnowledgeRecord>(path)? {
        if r.text.is_empty() {
            return Err(Error::Validation(format!(
                "{}:{line}: knowledge record {} has empty text",
                path.display(),
                r.id
            )));
        }
        if kb.insert(r.id, r).is_some() {
            return Err(Error::Validation(format!(
                "{}:{line}: duplicate knowledge id",
                path.display()
            )));
        }
    }
    Ok(kb)
}

pub fn write_knowledge(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<()> {
    write_jsonl(path.as_ref(), kb.values())
}

/// Check that every sample's knowledge ids resolve.
pub fn check_knowledge_refs(samples: &[ClickSample], kb: &KnowledgeBase) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if let Some(missing) = s.knowledge_ids.iter().find(|k| !kb.contains_key(k)) {
            return Err(Error::Validation(format!(
                "sample {i} ({:?}) references unknown knowledge id {missing}",
                s.query_text
            )));
        }
    }
    Ok(())
}

pub fn compute_stats(samples: &[ClickSample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot compute statistics of an empty sample list".into()));
    }
    let n = samples.len() as f64;
    let chars: usize = samples.iter().map(|s| s.query_text.chars().count()).sum();
    let counts = samples.iter().map(|s| s.clicked_leaf_ids.len());
    let labels: BTreeSet<NodeId> = samples.iter().flat_map(|s| s.clicked_leaf_ids.iter().copied()).collect();
    Ok(DatasetStats {
        num_queries: samples.len(),
        avg_chars: chars as f64 / n,
        total_labels: labels.len(),
        avg_labels: counts.clone().sum::<usize>() as f64 / n,
        min_labels: counts.clone().min().unwrap_or(0),
        max_labels: counts.max().unwrap_or(0),
    })
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<ClickSample>,
    pub val: Vec<ClickSample>,
    pub test: Vec<ClickSample>,
}

/// Seeded shuffle, then `floor(r * n)` samples for train and validation; test takes the remainder.
pub fn split_dataset(samples: &[ClickSample], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "split_ratios",
            format!("ratios must be nonnegative and sum to 1, got ({a}, {b}, {c})"),
        ));
    }
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = ((a * n as f64) + 1e-9).floor() as usize;
    let n_val = (((b * n as f64) + 1e-9).floor() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: i64, name: &str, parent: Option<i64>) -> (NodeId, String, Option<NodeId>, Vec<String>) {
        (NodeId(id), name.into(), parent.map(NodeId), vec![])
    }

    fn sample(q: &str, ids: &[i64]) -> ClickSample {
        ClickSample {
            query_text: q.into(),
            clicked_leaf_ids: ids.iter().map(|&i| NodeId(i)).collect(),
            knowledge_ids: vec![],
        }
    }

    #[test]
    fn smallest_forest() {
        let t = Taxonomy::from_parts(vec![node(1, "root", None), node(2, "a", Some(1)), node(3, "b", Some(1))]).unwrap();
        assert_eq!(t.num_nodes(), 3);
        assert_eq!(t.num_leaves(), 2);
        assert_eq!(t.node(NodeId(1)).unwrap().level, 1);
        assert_eq!(t.node(NodeId(2)).unwrap().level, 2);
        assert_eq!(t.node(NodeId(3)).unwrap().level, 2);
        assert_eq!(t.all_index, vec![NodeId(1), NodeId(2), NodeId(3)]);
    }

    #[test]
    fn self_parent_is_structural_error() {
        let err = Taxonomy::from_parts(vec![node(7, "x", Some(7))]).unwrap_err();
        assert!(matches!(err, Error::Structure { id: 7, .. }), "{err}");
    }

    #[test]
    fn cycle_and_dangling_parent() {
        let err = Taxonomy::from_parts(vec![node(1, "a", Some(2)), node(2, "b", Some(1))]).unwrap_err();
        assert!(matches!(err, Error::Structure { .. }));
        let err = Taxonomy::from_parts(vec![node(1, "a", Some(9))]).unwrap_err();
        assert!(matches!(err, Error::Structure { id: 1, .. }));
    }

    #[test]
    fn three_level_chain() {
        let t = Taxonomy::from_parts(vec![node(5, "leaf", Some(3)), node(3, "mid", Some(1)), node(1, "root", None)]).unwrap();
        let levels: Vec<usize> = [1, 3, 5].iter().map(|&i| t.node(NodeId(i)).unwrap().level).collect();
        assert_eq!(levels, vec![1, 2, 3]);
        assert_eq!(t.leaf_index, vec![NodeId(5)]);
        assert_eq!(t.leaf_row(NodeId(5)), Some(0));
        assert_eq!(t.leaf_row(NodeId(1)), None);
    }

    #[test]
    fn leaves_form_trailing_block() {
        // leaf 2 has a smaller id than internal node 4
        let t = Taxonomy::from_parts(vec![
            node(1, "r", None),
            node(2, "l1", Some(1)),
            node(4, "mid", Some(1)),
            node(6, "l2", Some(4)),
        ])
        .unwrap();
        assert_eq!(t.all_index, vec![NodeId(1), NodeId(4), NodeId(2), NodeId(6)]);
        assert_eq!(t.leaf_offset(), 2);
    }

    #[test]
    fn load_clicks_rejects_non_leaf_and_keeps_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let t = Taxonomy::from_parts(vec![node(1, "root", None), node(2, "a", Some(1))]).unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"query\":\"red shoes\",\"clicked_label_ids\":[2]}\n{\"query\":\"red shoes\",\"clicked_label_ids\":[2]}\n").unwrap();
        let s = load_clicks(&p, &t).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], s[1]);
        assert_eq!(s[0].clicked_leaf_ids.len(), 1);

        std::fs::write(&p, "{\"query\":\"x\",\"clicked_label_ids\":[1]}\n").unwrap();
        assert!(matches!(load_clicks(&p, &t), Err(Error::Validation(_))));
        std::fs::write(&p, "{\"query\":\"x\",\"clicked_label_ids\":[]}\n").unwrap();
        assert!(matches!(load_clicks(&p, &t), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"id\":1,\"name\":\"r\",\"parent_id\":null}\n{oops\n").unwrap();
        match load_taxonomy(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&[sample("ab", &[1])]).unwrap();
        assert_eq!(s.avg_chars, 2.0);
        assert_eq!(s.avg_labels, 1.0);
        assert_eq!((s.min_labels, s.max_labels), (1, 1));

        let s = compute_stats(&[sample("a", &[1]), sample("abc", &[1, 2, 3])]).unwrap();
        assert_eq!(s.avg_labels, 2.0);
        assert_eq!(s.avg_chars, 2.0);
        assert_eq!((s.min_labels, s.max_labels), (1, 3));
        assert_eq!(s.total_labels, 3);

        // unicode scalar values, not bytes
        let s = compute_stats(&[sample("黑色手机", &[1])]).unwrap();
        assert_eq!(s.avg_chars, 4.0);

        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn split_rules() {
        let samples: Vec<ClickSample> = (0..10).map(|i| sample(&format!("q{i}"), &[1])).collect();
        let s = split_dataset(&samples, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&samples, (0.8, 0.1, 0.1), 3).unwrap());

        let s = split_dataset(&samples, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(s.train.len(), 10);

        let mut all: Vec<String> = s.train.iter().map(|x| x.query_text.clone()).collect();
        all.sort();
        let mut orig: Vec<String> = samples.iter().map(|x| x.query_text.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);

        assert!(matches!(split_dataset(&samples, (0.5, 0.1, 0.1), 3), Err(Error::Config { .. })));
    }
}
