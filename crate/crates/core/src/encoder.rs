//! The shared text encoder: vocabulary, tokenization and an
//! embedding-mean-pool + two-layer tanh MLP with a hand-written backward pass.
//!
//! One set of parameters encodes queries, label sequences and knowledge text.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelNode;
use crate::error::{Error, Result};
use crate::Scalar;

/// Separator between the label name and each side-information item.
pub const LABEL_SEPARATOR: char = '|';

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// How text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// One token per non-whitespace unicode scalar value.
    Char,
    /// Tokens separated by whitespace or the label separator.
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "word" => Ok(TokenizerMode::Word),
            other => Err(format!("unknown tokenizer mode `{other}` (expected char or word)")),
        }
    }
}

impl std::fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Word => "word",
        })
    }
}

fn split_tokens(text: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        TokenizerMode::Word => text
            .split(|c: char| c.is_whitespace() || c == LABEL_SEPARATOR)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub token_to_id: BTreeMap<String, usize>,
    pub unk_id: usize,
    pub pad_id: usize,
    pub mode: TokenizerMode,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    token: String,
    id: usize,
}

impl Vocab {
    /// Build from an iterator of texts with min-frequency 1. Ids are assigned in
    /// sorted token order after the pad (0) and unk (1) entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, mode: TokenizerMode) -> Self {
        let mut tokens: Vec<String> = texts.into_iter().flat_map(|t| split_tokens(t, mode)).collect();
        tokens.sort();
        tokens.dedup();
        let mut token_to_id = BTreeMap::new();
        token_to_id.insert(PAD_TOKEN.to_string(), 0);
        token_to_id.insert(UNK_TOKEN.to_string(), 1);
        for tok in tokens {
            let next = token_to_id.len();
            token_to_id.entry(tok).or_insert(next);
        }
        Vocab {
            token_to_id,
            unk_id: 1,
            pad_id: 0,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id)
    }

    /// Token strings ordered by id.
    pub fn tokens_by_id(&self) -> Vec<&str> {
        let mut v: Vec<(&str, usize)> = self.token_to_id.iter().map(|(t, &i)| (t.as_str(), i)).collect();
        v.sort_by_key(|&(_, i)| i);
        v.into_iter().map(|(t, _)| t).collect()
    }

    pub fn from_entries(entries: Vec<(String, usize)>, mode: TokenizerMode) -> Result<Self> {
        let n = entries.len();
        let mut token_to_id = BTreeMap::new();
        let mut seen = vec![false; n];
        for (tok, id) in entries {
            if id >= n || std::mem::replace(&mut seen[id], true) {
                return Err(Error::Format(format!("vocab ids are not dense in [0, {n}) at token {tok:?}")));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocab token {tok:?}")));
            }
        }
        let pad_id = *token_to_id
            .get(PAD_TOKEN)
            .ok_or_else(|| Error::Format("vocab lacks the pad token".into()))?;
        let unk_id = *token_to_id
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::Format("vocab lacks the unk token".into()))?;
        Ok(Vocab {
            token_to_id,
            unk_id,
            pad_id,
            mode,
        })
    }

    /// Write one `{token, id}` object per line in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (id, token) in self.tokens_by_id().into_iter().enumerate() {
            let line = serde_json::to_string(&VocabLine {
                token: token.to_string(),
                id,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, mode: TokenizerMode) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: VocabLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push((v.token, v.id));
        }
        Self::from_entries(entries, mode)
    }
}

/// Map `text` to token ids, truncated to `max_len`. No padding is added.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    split_tokens(text, vocab.mode)
        .iter()
        .take(max_len.max(1))
        .map(|t| vocab.id(t))
        .collect()
}

/// Label name followed by its side information, joined by [`LABEL_SEPARATOR`].
pub fn build_label_sequence(node: &LabelNode) -> String {
    let mut s = node.name.clone();
    for item in &node.side_info {
        s.push(LABEL_SEPARATOR);
        s.push_str(item);
    }
    s
}

/// Trainable encoder parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub embedding_table: Array2<T>,
    pub proj1_weight: Array2<T>,
    pub proj1_bias: Array1<T>,
    pub proj2_weight: Array2<T>,
    pub proj2_bias: Array1<T>,
}

pub(crate) fn uniform_matrix<T: Scalar, R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<T> {
    let data: Vec<T> = (0..rows * cols).map(|_| T::lit(rng.gen_range(-scale..scale))).collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

/// Half-width of the uniform initialization range for weights and embeddings.
pub const INIT_SCALE: f64 = 0.05;

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng>(vocab_size: usize, d_emb: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        EncoderParams {
            embedding_table: uniform_matrix(vocab_size, d_emb, INIT_SCALE, rng),
            proj1_weight: uniform_matrix(d_emb, d_hidden, INIT_SCALE, rng),
            proj1_bias: Array1::zeros(d_hidden),
            proj2_weight: uniform_matrix(d_hidden, d_out, INIT_SCALE, rng),
            proj2_bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            embedding_table: Array2::zeros(self.embedding_table.raw_dim()),
            proj1_weight: Array2::zeros(self.proj1_weight.raw_dim()),
            proj1_bias: Array1::zeros(self.proj1_bias.raw_dim()),
            proj2_weight: Array2::zeros(self.proj2_weight.raw_dim()),
            proj2_bias: Array1::zeros(self.proj2_bias.raw_dim()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding_table.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.proj2_bias.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (v, e) = self.embedding_table.dim();
        let (e1, h) = self.proj1_weight.dim();
        let (h2, d) = self.proj2_weight.dim();
        if v == 0 || e1 != e || self.proj1_bias.len() != h || h2 != h || self.proj2_bias.len() != d {
            return Err(Error::shape(
                "encoder params",
                "embedding V x e, proj1 e x h, proj2 h x d",
                format!(
                    "embedding {v}x{e}, proj1 {e1}x{h}, proj1_bias {}, proj2 {h2}x{d}, proj2_bias {}",
                    self.proj1_bias.len(),
                    self.proj2_bias.len()
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &[T]); 5] {
        [
            ("encoder.embedding_table", self.embedding_table.as_slice().expect("standard layout")),
            ("encoder.proj1_weight", self.proj1_weight.as_slice().expect("standard layout")),
            ("encoder.proj1_bias", self.proj1_bias.as_slice().expect("standard layout")),
            ("encoder.proj2_weight", self.proj2_weight.as_slice().expect("standard layout")),
            ("encoder.proj2_bias", self.proj2_bias.as_slice().expect("standard layout")),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut [T]); 5] {
        [
            ("encoder.embedding_table", self.embedding_table.as_slice_mut().expect("standard layout")),
            ("encoder.proj1_weight", self.proj1_weight.as_slice_mut().expect("standard layout")),
            ("encoder.proj1_bias", self.proj1_bias.as_slice_mut().expect("standard layout")),
            ("encoder.proj2_weight", self.proj2_weight.as_slice_mut().expect("standard layout")),
            ("encoder.proj2_bias", self.proj2_bias.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    pub ids: Vec<usize>,
    pub pooled: Array1<T>,
    pub hidden: Array1<T>,
}

fn check_ids<T: Scalar>(ids: &[usize], params: &EncoderParams<T>) -> Result<()> {
    let size = params.vocab_size();
    match ids.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::Index {
            context: "embedding table",
            index,
            size,
        }),
        None => Ok(()),
    }
}

/// Encode and keep the activations needed by [`backward_into`].
pub fn encode_traced<T: Scalar>(ids: &[usize], params: &EncoderParams<T>) -> Result<(Array1<T>, EncoderTrace<T>)> {
    check_ids(ids, params)?;
    let mut pooled = Array1::<T>::zeros(params.embedding_table.ncols());
    for &id in ids {
        pooled += &params.embedding_table.row(id);
    }
    if !ids.is_empty() {
        pooled /= T::from_usize(ids.len()).expect("length fits scalar");
    }
    let hidden = (pooled.dot(&params.proj1_weight) + &params.proj1_bias).mapv(T::tanh);
    let out = hidden.dot(&params.proj2_weight) + &params.proj2_bias;
    Ok((
        out,
        EncoderTrace {
            ids: ids.to_vec(),
            pooled,
            hidden,
        },
    ))
}

/// Mean-pool the embedding rows of `ids`, then `tanh(p W1 + b1) W2 + b2`.
/// An empty sequence pools to the zero vector.
pub fn encode<T: Scalar>(ids: &[usize], params: &EncoderParams<T>) -> Result<Array1<T>> {
    encode_traced(ids, params).map(|(out, _)| out)
}

/// Accumulate the parameter gradients of one encoded sequence into `grads`.
pub fn backward_into<T: Scalar>(
    trace: &EncoderTrace<T>,
    params: &EncoderParams<T>,
    upstream: ArrayView1<'_, T>,
    grads: &mut EncoderParams<T>,
) -> Result<()> {
    if upstream.len() != params.output_dim() {
        return Err(Error::shape("encoder upstream gradient", params.output_dim(), upstream.len()));
    }
    grads.proj2_bias += &upstream;
    outer_add(&mut grads.proj2_weight, trace.hidden.view(), upstream);
    let d_hidden = params.proj2_weight.dot(&upstream);
    let d_pre = &d_hidden * &trace.hidden.mapv(|h| T::one() - h * h);
    grads.proj1_bias += &d_pre;
    outer_add(&mut grads.proj1_weight, trace.pooled.view(), d_pre.view());
    if !trace.ids.is_empty() {
        let d_pooled = params.proj1_weight.dot(&d_pre) / T::from_usize(trace.ids.len()).expect("length fits scalar");
        for &id in &trace.ids {
            let mut row = grads.embedding_table.row_mut(id);
            row += &d_pooled;
        }
    }
    Ok(())
}

/// Gradients of `<upstream, encode(ids)>` with respect to every parameter tensor.
pub fn encode_backward<T: Scalar>(
    ids: &[usize],
    params: &EncoderParams<T>,
    upstream: ArrayView1<'_, T>,
) -> Result<EncoderParams<T>> {
    let (_, trace) = encode_traced(ids, params)?;
    let mut grads = params.zeros_like();
    backward_into(&trace, params, upstream, &mut grads)?;
    Ok(grads)
}

/// Activations of a batch of sequences encoded together; row `i` belongs to `ids[i]`.
#[derive(Debug, Clone)]
pub struct BatchTrace<T> {
    pub ids: Vec<Vec<usize>>,
    pub pooled: Array2<T>,
    pub hidden: Array2<T>,
}

/// Encode many sequences at once; row `i` of the output equals `encode(&seqs[i])`.
pub fn encode_batch<T: Scalar>(seqs: &[Vec<usize>], params: &EncoderParams<T>) -> Result<(Array2<T>, BatchTrace<T>)> {
    let mut pooled = Array2::<T>::zeros((seqs.len(), params.embedding_table.ncols()));
    for (mut row, ids) in pooled.outer_iter_mut().zip(seqs) {
        check_ids(ids, params)?;
        for &id in ids {
            row += &params.embedding_table.row(id);
        }
        if !ids.is_empty() {
            row /= T::from_usize(ids.len()).expect("length fits scalar");
        }
    }
    let hidden = (pooled.dot(&params.proj1_weight) + &params.proj1_bias).mapv(T::tanh);
    let out = hidden.dot(&params.proj2_weight) + &params.proj2_bias;
    Ok((
        out,
        BatchTrace {
            ids: seqs.to_vec(),
            pooled,
            hidden,
        },
    ))
}

/// Accumulate gradients for a whole batch given one upstream row per sequence.
pub fn backward_batch_into<T: Scalar>(
    trace: &BatchTrace<T>,
    params: &EncoderParams<T>,
    upstream: ArrayView2<'_, T>,
    grads: &mut EncoderParams<T>,
) -> Result<()> {
    if upstream.dim() != (trace.ids.len(), params.output_dim()) {
        return Err(Error::shape(
            "encoder batch upstream gradient",
            format!("{}x{}", trace.ids.len(), params.output_dim()),
            format!("{:?}", upstream.dim()),
        ));
    }
    grads.proj2_bias += &upstream.sum_axis(Axis(0));
    grads.proj2_weight += &trace.hidden.t().dot(&upstream);
    let mut d_pre = upstream.dot(&params.proj2_weight.t());
    d_pre.zip_mut_with(&trace.hidden, |g, &h| *g *= T::one() - h * h);
    grads.proj1_bias += &d_pre.sum_axis(Axis(0));
    grads.proj1_weight += &trace.pooled.t().dot(&d_pre);
    let d_pooled = d_pre.dot(&params.proj1_weight.t());
    for (ids, g) in trace.ids.iter().zip(d_pooled.outer_iter()) {
        if ids.is_empty() {
            continue;
        }
        let share = &g / T::from_usize(ids.len()).expect("length fits scalar");
        for &id in ids {
            let mut row = grads.embedding_table.row_mut(id);
            row += &share;
        }
    }
    Ok(())
}

/// `m += a^T b` for row vectors `a`, `b`.
pub(crate) fn outer_add<T: Scalar>(m: &mut Array2<T>, a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    *m += &a2.dot(&b2);
}
