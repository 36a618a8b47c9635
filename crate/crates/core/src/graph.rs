//! Label graphs: co-occurrence, embedding similarity and taxonomy hierarchy,
//! their fusion into one `|C'| x |C'|` adjacency, symmetric normalization,
//! and the two-layer GCN over label node features.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClickSample, NodeId, Taxonomy};
use crate::encoder::uniform_matrix;
use crate::error::{Error, Result};
use crate::Scalar;

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Raw label and pair click counts over a sample set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CooccurrenceCounts {
    /// Both `(a, b)` and `(b, a)` are stored with the same count.
    pub pair_counts: BTreeMap<(NodeId, NodeId), u64>,
    pub label_counts: BTreeMap<NodeId, u64>,
    /// Leaf order of the matrices built from these counts.
    pub leaf_index: Vec<NodeId>,
}

impl CooccurrenceCounts {
    pub fn pair(&self, a: NodeId, b: NodeId) -> u64 {
        self.pair_counts.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn label(&self, a: NodeId) -> u64 {
        self.label_counts.get(&a).copied().unwrap_or(0)
    }
}

/// Dense adjacency matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjMatrix<T> {
    pub entries: Array2<T>,
}

impl<T: Scalar> AdjMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        AdjMatrix {
            entries: Array2::zeros((n, n)),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[[i, j]]
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        let n = self.size();
        (0..n).all(|i| (0..i).all(|j| (self.entries[[i, j]] - self.entries[[j, i]]).abs() <= tol))
    }

    /// Nonzero entries in `(row, col)` order.
    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        self.entries
            .indexed_iter()
            .filter(|(_, &v)| v != T::zero())
            .map(|((r, c), &v)| (r, c, v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub alpha_threshold: f64,
    pub beta_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            alpha_threshold: 0.5,
            beta_threshold: 0.5,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("alpha_threshold", self.alpha_threshold), ("beta_threshold", self.beta_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Which graphs contribute to the fused adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSelection {
    pub coo: bool,
    pub sim: bool,
    pub hier: bool,
}

impl Default for GraphSelection {
    fn default() -> Self {
        GraphSelection {
            coo: true,
            sim: true,
            hier: true,
        }
    }
}

/// Count label and unordered-pair occurrences; each sample adds at most one to any count.
pub fn count_cooccurrence(samples: &[ClickSample], taxonomy: &Taxonomy) -> CooccurrenceCounts {
    let mut counts = CooccurrenceCounts {
        leaf_index: taxonomy.leaf_index.clone(),
        ..Default::default()
    };
    for s in samples {
        let ids: Vec<NodeId> = s.clicked_leaf_ids.iter().copied().filter(|&id| taxonomy.is_leaf(id)).collect();
        for (k, &a) in ids.iter().enumerate() {
            *counts.label_counts.entry(a).or_default() += 1;
            for &b in &ids[k + 1..] {
                *counts.pair_counts.entry((a, b)).or_default() += 1;
                *counts.pair_counts.entry((b, a)).or_default() += 1;
            }
        }
    }
    counts
}

/// Conditional co-occurrence `N(i, j) / N(i)`, kept where it reaches `alpha_threshold`.
pub fn build_cooccurrence<T: Scalar>(counts: &CooccurrenceCounts, alpha_threshold: f64) -> AdjMatrix<T> {
    let n = counts.leaf_index.len();
    let alpha = T::lit(alpha_threshold);
    let mut a = AdjMatrix::zeros(n);
    let pos: BTreeMap<NodeId, usize> = counts.leaf_index.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for (&(ci, cj), &nij) in &counts.pair_counts {
        let (Some(&i), Some(&j)) = (pos.get(&ci), pos.get(&cj)) else {
            continue;
        };
        let ni = counts.label(ci);
        if i == j || ni == 0 {
            continue;
        }
        let v = T::lit(nij as f64) / T::lit(ni as f64);
        if v >= alpha {
            a.entries[[i, j]] = v;
        }
    }
    a
}

/// Cosine similarity between label rows, kept where it reaches `beta_threshold`.
pub fn build_similarity<T: Scalar>(
    label_embeddings: ArrayView2<'_, T>,
    ids: &[NodeId],
    beta_threshold: f64,
) -> Result<AdjMatrix<T>> {
    let n = label_embeddings.nrows();
    if ids.len() != n {
        return Err(Error::shape("similarity label ids", n, ids.len()));
    }
    let sq_norms: Vec<T> = label_embeddings.outer_iter().map(|r| r.dot(&r)).collect();
    if let Some(i) = sq_norms.iter().position(|&x| x == T::zero()) {
        return Err(Error::ZeroNorm(ids[i].0));
    }
    let beta = T::lit(beta_threshold);
    let mut a = AdjMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let cos = cosine_from_parts(label_embeddings.row(i).dot(&label_embeddings.row(j)), sq_norms[i], sq_norms[j]);
            if cos >= beta {
                a.entries[[i, j]] = cos;
                a.entries[[j, i]] = cos;
            }
        }
    }
    Ok(a)
}

/// `dot / sqrt(|a|^2 |b|^2)`, clamped to at most one. Exact for identical rows.
pub(crate) fn cosine_from_parts<T: Scalar>(dot: T, sq_a: T, sq_b: T) -> T {
    (dot / (sq_a * sq_b).sqrt()).min(T::one())
}

/// Click counts per node: leaves count the samples clicking them, internal
/// nodes the sum over their descendant leaves.
pub fn node_click_counts(samples: &[ClickSample], taxonomy: &Taxonomy) -> BTreeMap<NodeId, u64> {
    let mut counts: BTreeMap<NodeId, u64> = taxonomy.all_index.iter().map(|&id| (id, 0)).collect();
    for s in samples {
        for &leaf in &s.clicked_leaf_ids {
            let mut cur = taxonomy.node(leaf);
            while let Some(node) = cur {
                *counts.entry(node.id).or_default() += 1;
                cur = node.parent_id.and_then(|p| taxonomy.node(p));
            }
        }
    }
    counts
}

/// Parent-to-child edges `max(1 / |children|, m_i / sum_j m_j)`; a zero click
/// sum falls back to the uniform share.
pub fn build_hierarchy<T: Scalar>(taxonomy: &Taxonomy, click_counts: &BTreeMap<NodeId, u64>) -> AdjMatrix<T> {
    let mut a = AdjMatrix::zeros(taxonomy.num_nodes());
    for parent in taxonomy.nodes_in_row_order() {
        let kids = taxonomy.children(parent.id);
        if kids.is_empty() {
            continue;
        }
        let k = taxonomy.row(parent.id).expect("indexed node");
        let clicks: Vec<u64> = kids.iter().map(|c| click_counts.get(c).copied().unwrap_or(0)).collect();
        let total: u64 = clicks.iter().sum();
        let uniform = T::one() / T::lit(kids.len() as f64);
        for (&child, &m) in kids.iter().zip(&clicks) {
            let share = if total == 0 {
                T::zero()
            } else {
                T::lit(m as f64) / T::lit(total as f64)
            };
            let i = taxonomy.row(child).expect("indexed node");
            a.entries[[k, i]] = uniform.max(share);
        }
    }
    a
}

/// Embed the mean of the present leaf-level graphs into the hierarchy matrix
/// (overwriting its leaf-leaf block), then symmetrize with an elementwise max.
pub fn fuse_graphs<T: Scalar>(
    a_coo: Option<&AdjMatrix<T>>,
    a_sim: Option<&AdjMatrix<T>>,
    a_hier: Option<&AdjMatrix<T>>,
    taxonomy: &Taxonomy,
) -> Result<AdjMatrix<T>> {
    let (n_all, n_leaf) = (taxonomy.num_nodes(), taxonomy.num_leaves());
    for m in [a_coo, a_sim].into_iter().flatten() {
        if m.entries.dim() != (n_leaf, n_leaf) {
            return Err(Error::shape("leaf graph", format!("{n_leaf}x{n_leaf}"), format!("{:?}", m.entries.dim())));
        }
    }
    let mut fused = match a_hier {
        Some(h) if h.entries.dim() != (n_all, n_all) => {
            return Err(Error::shape("hierarchy graph", format!("{n_all}x{n_all}"), format!("{:?}", h.entries.dim())))
        }
        Some(h) => h.clone(),
        None => AdjMatrix::zeros(n_all),
    };
    let leaf_graphs: Vec<&AdjMatrix<T>> = [a_coo, a_sim].into_iter().flatten().collect();
    let off = taxonomy.leaf_offset();
    let mut block = fused.entries.slice_mut(s![off.., off..]);
    block.fill(T::zero());
    if !leaf_graphs.is_empty() {
        let weight = T::one() / T::lit(leaf_graphs.len() as f64);
        for g in leaf_graphs {
            block.scaled_add(weight, &g.entries);
        }
    }
    let transposed = fused.entries.t().to_owned();
    fused.entries.zip_mut_with(&transposed, |a, &b| *a = a.max(b));
    Ok(fused)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn normalize_adjacency<T: Scalar>(a: &AdjMatrix<T>) -> AdjMatrix<T> {
    let n = a.size();
    let with_loops = &a.entries + &Array2::<T>::eye(n);
    let degree: Array1<T> = with_loops.sum_axis(Axis(1));
    let mut out = with_loops;
    // d_i * d_j commutes exactly, so a symmetric input stays bitwise symmetric
    for ((i, j), v) in out.indexed_iter_mut() {
        *v /= (degree[i] * degree[j]).sqrt();
    }
    AdjMatrix { entries: out }
}

/// Two-layer GCN weights. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Scalar> GcnParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(d: usize, d_hidden: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d + d_hidden) as f64).sqrt();
        GcnParams {
            w1: uniform_matrix(d, d_hidden, limit, rng),
            b1: Array1::zeros(d_hidden),
            w2: uniform_matrix(d_hidden, d, limit, rng),
            b2: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GcnParams {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[T]); 4] {
        [
            ("gcn.w1", self.w1.as_slice().expect("standard layout")),
            ("gcn.b1", self.b1.as_slice().expect("standard layout")),
            ("gcn.w2", self.w2.as_slice().expect("standard layout")),
            ("gcn.b2", self.b2.as_slice().expect("standard layout")),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut [T]); 4] {
        [
            ("gcn.w1", self.w1.as_slice_mut().expect("standard layout")),
            ("gcn.b1", self.b1.as_slice_mut().expect("standard layout")),
            ("gcn.w2", self.w2.as_slice_mut().expect("standard layout")),
            ("gcn.b2", self.b2.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Activations of one GCN forward pass.
#[derive(Debug, Clone)]
pub struct GcnTrace<T> {
    /// `Â X`
    pub ax: Array2<T>,
    /// `Â X W1 + b1`
    pub pre: Array2<T>,
    /// `Â relu(pre)`
    pub a_hidden: Array2<T>,
}

fn check_gcn_shapes<T: Scalar>(a_hat: &AdjMatrix<T>, x: ArrayView2<'_, T>, params: &GcnParams<T>) -> Result<()> {
    let n = a_hat.size();
    if x.nrows() != n {
        return Err(Error::shape("gcn node features", format!("{n} rows"), x.nrows()));
    }
    let (d_in, h) = params.w1.dim();
    let (h2, d_out) = params.w2.dim();
    if x.ncols() != d_in || params.b1.len() != h || h2 != h || params.b2.len() != d_out {
        return Err(Error::shape(
            "gcn params",
            format!("w1 {}x{h}, w2 {h}x{d_out}", x.ncols()),
            format!("w1 {d_in}x{h}, b1 {}, w2 {h2}x{d_out}, b2 {}", params.b1.len(), params.b2.len()),
        ));
    }
    Ok(())
}

pub fn gcn_forward_traced<T: Scalar>(
    a_hat: &AdjMatrix<T>,
    x: ArrayView2<'_, T>,
    params: &GcnParams<T>,
) -> Result<(Array2<T>, GcnTrace<T>)> {
    check_gcn_shapes(a_hat, x, params)?;
    let ax = a_hat.entries.dot(&x);
    let pre = ax.dot(&params.w1) + &params.b1;
    let hidden = pre.mapv(|v| v.max(T::zero()));
    let a_hidden = a_hat.entries.dot(&hidden);
    let h = a_hidden.dot(&params.w2) + &params.b2;
    Ok((h, GcnTrace { ax, pre, a_hidden }))
}

/// `H = Â relu(Â X W1 + b1) W2 + b2`.
pub fn gcn_forward<T: Scalar>(a_hat: &AdjMatrix<T>, x: ArrayView2<'_, T>, params: &GcnParams<T>) -> Result<Array2<T>> {
    gcn_forward_traced(a_hat, x, params).map(|(h, _)| h)
}

/// Backward pass from a recorded trace. Returns parameter and feature gradients.
pub fn gcn_backward_traced<T: Scalar>(
    a_hat: &AdjMatrix<T>,
    trace: &GcnTrace<T>,
    params: &GcnParams<T>,
    upstream: ArrayView2<'_, T>,
) -> Result<(GcnParams<T>, Array2<T>)> {
    if upstream.dim() != (a_hat.size(), params.b2.len()) {
        return Err(Error::shape(
            "gcn upstream gradient",
            format!("{}x{}", a_hat.size(), params.b2.len()),
            format!("{:?}", upstream.dim()),
        ));
    }
    let a_t = a_hat.entries.t();
    let b2 = upstream.sum_axis(Axis(0));
    let w2 = trace.a_hidden.t().dot(&upstream);
    let d_hidden = a_t.dot(&upstream.dot(&params.w2.t()));
    let mut d_pre = d_hidden;
    d_pre.zip_mut_with(&trace.pre, |g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    let b1 = d_pre.sum_axis(Axis(0));
    let w1 = trace.ax.t().dot(&d_pre);
    let dx = a_t.dot(&d_pre.dot(&params.w1.t()));
    Ok((GcnParams { w1, b1, w2, b2 }, dx))
}

/// Gradients of `<upstream, gcn_forward(a_hat, x, params)>`; `Â` is treated as constant.
pub fn gcn_backward<T: Scalar>(
    a_hat: &AdjMatrix<T>,
    x: ArrayView2<'_, T>,
    params: &GcnParams<T>,
    upstream: ArrayView2<'_, T>,
) -> Result<(GcnParams<T>, Array2<T>)> {
    let (_, trace) = gcn_forward_traced(a_hat, x, params)?;
    gcn_backward_traced(a_hat, &trace, params, upstream)
}

/// Trailing leaf block of a matrix in `all_index` row order.
pub fn extract_leaf<T: Scalar>(h: ArrayView2<'_, T>, taxonomy: &Taxonomy) -> Array2<T> {
    h.slice(s![taxonomy.leaf_offset().., ..]).to_owned()
}

/// Every graph built for one training split, plus the fused and normalized adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle<T> {
    pub config: GraphConfig,
    pub selection: GraphSelection,
    pub num_leaves: usize,
    pub num_nodes: usize,
    pub coo: AdjMatrix<T>,
    pub sim: AdjMatrix<T>,
    pub hier: AdjMatrix<T>,
    pub fused: AdjMatrix<T>,
    pub normalized: AdjMatrix<T>,
}

impl<T: Scalar> GraphBundle<T> {
    /// Build all graphs from the training samples and leaf embeddings (rows in leaf order).
    pub fn build(
        taxonomy: &Taxonomy,
        train: &[ClickSample],
        leaf_embeddings: ArrayView2<'_, T>,
        config: GraphConfig,
        selection: GraphSelection,
    ) -> Result<Self> {
        config.validate()?;
        let counts = count_cooccurrence(train, taxonomy);
        let coo = build_cooccurrence(&counts, config.alpha_threshold);
        let sim = build_similarity(leaf_embeddings, &taxonomy.leaf_index, config.beta_threshold)?;
        let hier = build_hierarchy(taxonomy, &node_click_counts(train, taxonomy));
        Self::assemble(taxonomy, config, selection, coo, sim, hier)
    }

    pub fn assemble(
        taxonomy: &Taxonomy,
        config: GraphConfig,
        selection: GraphSelection,
        coo: AdjMatrix<T>,
        sim: AdjMatrix<T>,
        hier: AdjMatrix<T>,
    ) -> Result<Self> {
        let fused = fuse_graphs(
            selection.coo.then_some(&coo),
            selection.sim.then_some(&sim),
            selection.hier.then_some(&hier),
            taxonomy,
        )?;
        let normalized = normalize_adjacency(&fused);
        Ok(GraphBundle {
            config,
            selection,
            num_leaves: taxonomy.num_leaves(),
            num_nodes: taxonomy.num_nodes(),
            coo,
            sim,
            hier,
            fused,
            normalized,
        })
    }

    /// Write the header line followed by one line per matrix in `(row, col, value)` triplet form.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let header = GraphHeader {
            format: "querycat-graph".into(),
            version: GRAPH_FORMAT_VERSION,
            num_leaves: self.num_leaves,
            num_nodes: self.num_nodes,
            alpha: self.config.alpha_threshold,
            beta: self.config.beta_threshold,
            selection: self.selection,
        };
        let mut lines = vec![serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?];
        for (name, m) in self.matrices() {
            let line = MatrixLine {
                matrix: name.into(),
                size: m.size(),
                entries: m.triplets().into_iter().map(|(r, c, v)| (r, c, v.as_f64())).collect(),
            };
            lines.push(serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?);
        }
        for l in lines {
            writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty graph file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: GraphHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        if header.version != GRAPH_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "graph file version {} is not supported (expected {GRAPH_FORMAT_VERSION})",
                header.version
            )));
        }
        let mut mats: BTreeMap<String, AdjMatrix<T>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: MatrixLine = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            let mut adj = AdjMatrix::zeros(m.size);
            for (r, c, v) in m.entries {
                if r >= m.size || c >= m.size {
                    return Err(parse_err(i + 2, format!("entry ({r}, {c}) outside {}x{}", m.size, m.size)));
                }
                adj.entries[[r, c]] = T::lit(v);
            }
            mats.insert(m.matrix, adj);
        }
        let mut take = |name: &str, n: usize| -> Result<AdjMatrix<T>> {
            let m = mats
                .remove(name)
                .ok_or_else(|| Error::Format(format!("graph file lacks matrix `{name}`")))?;
            if m.size() != n {
                return Err(Error::Format(format!("matrix `{name}` has size {}, expected {n}", m.size())));
            }
            Ok(m)
        };
        let (nl, na) = (header.num_leaves, header.num_nodes);
        Ok(GraphBundle {
            config: GraphConfig {
                alpha_threshold: header.alpha,
                beta_threshold: header.beta,
            },
            selection: header.selection,
            num_leaves: nl,
            num_nodes: na,
            coo: take("coo", nl)?,
            sim: take("sim", nl)?,
            hier: take("hier", na)?,
            fused: take("fused", na)?,
            normalized: take("normalized", na)?,
        })
    }

    fn matrices(&self) -> [(&'static str, &AdjMatrix<T>); 5] {
        [
            ("coo", &self.coo),
            ("sim", &self.sim),
            ("hier", &self.hier),
            ("fused", &self.fused),
            ("normalized", &self.normalized),
        ]
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.num_leaves != taxonomy.num_leaves() || self.num_nodes != taxonomy.num_nodes() {
            return Err(Error::Validation(format!(
                "graph was built for {} nodes / {} leaves but the taxonomy has {} / {}",
                self.num_nodes,
                self.num_leaves,
                taxonomy.num_nodes(),
                taxonomy.num_leaves()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    format: String,
    version: u32,
    num_leaves: usize,
    num_nodes: usize,
    alpha: f64,
    beta: f64,
    selection: GraphSelection,
}

#[derive(Serialize, Deserialize)]
struct MatrixLine {
    matrix: String,
    size: usize,
    entries: Vec<(usize, usize, f64)>,
}
