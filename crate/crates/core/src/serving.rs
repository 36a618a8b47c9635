//! Precomputed leaf embeddings for online scoring, plus the line-delimited
//! JSON endpoint and the batch predictor built on them.
//!
//! Serving runs only the query encoder, one matrix-vector product and a
//! sigmoid; the label encoder and the GCN run once at export time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{info, warn};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{NodeId, Taxonomy};
use crate::encoder::{encode, tokenize, EncoderParams, TokenizerMode, Vocab};
use crate::error::{Error, Result};
use crate::eval::binarize;
use crate::graph::GraphBundle;
use crate::trainer::{predict_scores, ModelState, Predictor};
use crate::Scalar;

pub const CACHE_MAGIC: &[u8; 8] = b"QCATLEAF";
pub const CACHE_VERSION: u32 = 1;

/// Everything needed to score queries without the label side of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCache<T> {
    pub version: u32,
    pub d: usize,
    pub leaf_ids: Vec<NodeId>,
    pub names: Vec<String>,
    pub h_leaf: Array2<T>,
    pub bias: Array1<T>,
    pub encoder: EncoderParams<T>,
    pub vocab: Vocab,
    pub max_query_len: usize,
    pub decision_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub id: NodeId,
    pub name: String,
    pub score: f64,
}

impl<T: Scalar> LeafCache<T> {
    /// Run the label side once and capture the leaf embeddings.
    pub fn from_model(model: &ModelState<T>, graph: Option<&GraphBundle<T>>, taxonomy: &Taxonomy) -> Result<Self> {
        let predictor = Predictor::new(model, taxonomy, graph)?;
        let cache = LeafCache {
            version: CACHE_VERSION,
            d: predictor.h_leaf.ncols(),
            leaf_ids: taxonomy.leaf_index.clone(),
            names: taxonomy.leaves().map(|n| n.name.clone()).collect(),
            h_leaf: predictor.h_leaf,
            bias: model.params.bias.clone(),
            encoder: model.params.encoder.clone(),
            vocab: model.vocab.clone(),
            max_query_len: model.config.max_query_len,
            decision_threshold: model.config.decision_threshold,
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.leaf_ids.len();
        if self.h_leaf.dim() != (n, self.d) || self.bias.len() != n || self.names.len() != n {
            return Err(Error::shape(
                "leaf cache",
                format!("{n} leaves x {}", self.d),
                format!("H_l {:?}, bias {}, names {}", self.h_leaf.dim(), self.bias.len(), self.names.len()),
            ));
        }
        self.encoder.check_shapes()?;
        if self.encoder.output_dim() != self.d || self.encoder.vocab_size() != self.vocab.len() {
            return Err(Error::shape(
                "leaf cache encoder",
                format!("output {} and vocab {}", self.d, self.vocab.len()),
                format!("output {} and vocab {}", self.encoder.output_dim(), self.encoder.vocab_size()),
            ));
        }
        let finite = self.h_leaf.iter().chain(self.bias.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                tensor: "leaf cache".into(),
            });
        }
        Ok(())
    }

    /// Sigmoid scores of every leaf, in `leaf_ids` order.
    pub fn scores(&self, query: &str) -> Result<Array1<T>> {
        if self.version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "cache version {} is not supported (expected {CACHE_VERSION})",
                self.version
            )));
        }
        let q = encode(&tokenize(query, &self.vocab, self.max_query_len), &self.encoder)?;
        predict_scores(q.view(), self.h_leaf.view(), self.bias.view())
    }

    /// Write the cache. Identical caches produce identical bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Layout (little endian): magic, version, tokenizer, max_query_len,
    /// threshold, d, |C|, leaf ids, names, row-major H_l, bias, encoder
    /// shapes and tensors, vocabulary tokens in id order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(self.version)?;
        w.write_u8(match self.vocab.mode {
            TokenizerMode::Char => 0,
            TokenizerMode::Word => 1,
        })?;
        w.write_u64::<LittleEndian>(self.max_query_len as u64)?;
        w.write_f64::<LittleEndian>(self.decision_threshold)?;
        w.write_u64::<LittleEndian>(self.d as u64)?;
        w.write_u64::<LittleEndian>(self.leaf_ids.len() as u64)?;
        for id in &self.leaf_ids {
            w.write_i64::<LittleEndian>(id.0)?;
        }
        for name in &self.names {
            write_str(w, name)?;
        }
        write_values(w, self.h_leaf.iter())?;
        write_values(w, self.bias.iter())?;
        let e = &self.encoder;
        for dim in [
            e.embedding_table.nrows(),
            e.embedding_table.ncols(),
            e.proj1_weight.ncols(),
            e.proj2_weight.ncols(),
        ] {
            w.write_u64::<LittleEndian>(dim as u64)?;
        }
        write_values(w, e.embedding_table.iter())?;
        write_values(w, e.proj1_weight.iter())?;
        write_values(w, e.proj1_bias.iter())?;
        write_values(w, e.proj2_weight.iter())?;
        write_values(w, e.proj2_bias.iter())?;
        for token in self.vocab.tokens_by_id() {
            write_str(w, token)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut r).map_err(|e| match e {
            ReadError::Io(source) => Error::io(path, source),
            ReadError::Bad(e) => e,
        })
    }

    fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, ReadError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a leaf cache file".into()).into());
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "cache version {version} is not supported (expected {CACHE_VERSION})"
            ))
            .into());
        }
        let mode = match r.read_u8()? {
            0 => TokenizerMode::Char,
            1 => TokenizerMode::Word,
            other => return Err(Error::Format(format!("unknown tokenizer tag {other}")).into()),
        };
        let max_query_len = read_len(r)?;
        let decision_threshold = r.read_f64::<LittleEndian>()?;
        let d = read_len(r)?;
        let n = read_len(r)?;
        let leaf_ids = (0..n)
            .map(|_| r.read_i64::<LittleEndian>().map(NodeId))
            .collect::<std::io::Result<Vec<_>>>()?;
        let names = (0..n).map(|_| read_str(r)).collect::<std::result::Result<Vec<_>, _>>()?;
        let h_leaf = read_matrix(r, n, d)?;
        let bias = Array1::from(read_values(r, n)?);
        let (v, e, h, o) = (read_len(r)?, read_len(r)?, read_len(r)?, read_len(r)?);
        let encoder = EncoderParams {
            embedding_table: read_matrix(r, v, e)?,
            proj1_weight: read_matrix(r, e, h)?,
            proj1_bias: Array1::from(read_values(r, h)?),
            proj2_weight: read_matrix(r, h, o)?,
            proj2_bias: Array1::from(read_values(r, o)?),
        };
        let tokens = (0..v).map(|_| read_str(r)).collect::<std::result::Result<Vec<_>, _>>()?;
        let vocab = Vocab::from_entries(tokens.into_iter().enumerate().map(|(i, t)| (t, i)).collect(), mode)?;
        let cache = LeafCache {
            version,
            d,
            leaf_ids,
            names,
            h_leaf,
            bias,
            encoder,
            vocab,
            max_query_len,
            decision_threshold,
        };
        cache.validate()?;
        Ok(cache)
    }
}

enum ReadError {
    Io(std::io::Error),
    Bad(Error),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl From<Error> for ReadError {
    fn from(e: Error) -> Self {
        ReadError::Bad(e)
    }
}

/// Upper bound on any length field; guards against allocating from a corrupt header.
const MAX_LEN: u64 = 1 << 32;

fn read_len<R: Read>(r: &mut R) -> std::result::Result<usize, ReadError> {
    let v = r.read_u64::<LittleEndian>()?;
    if v > MAX_LEN {
        return Err(Error::Format(format!("implausible length {v} in cache header")).into());
    }
    Ok(v as usize)
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::result::Result<String, ReadError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid utf-8 in cache: {e}")).into())
}

fn write_values<'a, T: Scalar, W: Write>(w: &mut W, values: impl Iterator<Item = &'a T>) -> std::io::Result<()> {
    for v in values {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<T>> {
    (0..n).map(|_| r.read_f64::<LittleEndian>().map(T::lit)).collect()
}

fn read_matrix<T: Scalar, R: Read>(r: &mut R, rows: usize, cols: usize) -> std::result::Result<Array2<T>, ReadError> {
    let data = read_values(r, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
}

/// Build the cache from a trained model and write it to `path`.
pub fn export_cache<T: Scalar>(
    model: &ModelState<T>,
    graph: Option<&GraphBundle<T>>,
    taxonomy: &Taxonomy,
    path: impl AsRef<Path>,
) -> Result<LeafCache<T>> {
    let cache = LeafCache::from_model(model, graph, taxonomy)?;
    cache.save(path)?;
    Ok(cache)
}

/// Binarized labels for `query`, sorted by score descending (ties by leaf order).
pub fn predict_from_cache<T: Scalar>(query: &str, cache: &LeafCache<T>, threshold: f64) -> Result<Vec<ScoredLabel>> {
    let scores: Vec<f64> = cache.scores(query)?.iter().map(|v| v.as_f64()).collect();
    let mut out: Vec<ScoredLabel> = binarize(&scores, threshold)
        .into_iter()
        .map(|i| ScoredLabel {
            id: cache.leaf_ids[i],
            name: cache.names[i].clone(),
            score: scores[i],
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub query: String,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Labels { labels: Vec<ScoredLabel> },
    Error { error: ErrorBody },
}

/// Answer one request line. Never fails: problems become error responses.
pub fn handle_request<T: Scalar>(line: &str, cache: &LeafCache<T>) -> Response {
    let err = |kind: &str, message: String| Response::Error {
        error: ErrorBody {
            kind: kind.into(),
            message,
        },
    };
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return err("bad_request", e.to_string()),
    };
    let threshold = req.threshold.unwrap_or(cache.decision_threshold);
    if !(threshold.is_finite() && (0.0..=1.0).contains(&threshold)) {
        return err("bad_request", format!("threshold must lie in [0, 1], got {threshold}"));
    }
    match predict_from_cache(&req.query, cache, threshold) {
        Ok(labels) => Response::Labels { labels },
        Err(e) => err("internal", e.to_string()),
    }
}

/// Serve one line-delimited stream until end of input. Blank lines are skipped.
pub fn serve_stream<T: Scalar, R: BufRead, W: Write>(cache: &LeafCache<T>, input: R, mut output: W) -> std::io::Result<u64> {
    let mut handled = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_request(&line, cache);
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
        handled += 1;
    }
    Ok(handled)
}

/// Accept TCP connections, one thread each, sharing the read-only cache.
/// Stops after `max_connections` connections when given.
pub fn serve_tcp<T: Scalar>(
    cache: Arc<LeafCache<T>>,
    addr: impl ToSocketAddrs,
    max_connections: Option<usize>,
    on_bound: impl FnOnce(std::net::SocketAddr),
) -> Result<()> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::io("<listen address>", e))?;
    let local = listener.local_addr().map_err(|e| Error::io("<listen address>", e))?;
    info!("serving on {local}");
    on_bound(local);
    let mut workers = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("failed to accept connection: {e}");
                continue;
            }
        };
        let cache = Arc::clone(&cache);
        workers.push(std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => return warn!("connection {peer:?}: {e}"),
            };
            if let Err(e) = serve_stream(&cache, reader, BufWriter::new(stream)) {
                warn!("connection {peer:?} closed: {e}");
            }
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    query: &'a str,
    labels: Vec<ScoredLabel>,
}

/// Predict every `{"query": ...}` line of `input`; output line `i` answers input line `i`.
pub fn batch_predict<T: Scalar>(
    input: impl AsRef<Path>,
    cache: &LeafCache<T>,
    output: impl AsRef<Path>,
    threshold: f64,
) -> Result<usize> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let reader = BufReader::new(File::open(input).map_err(|e| Error::io(input, e))?);
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(input, e))?;
        let req: Request = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: input.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let labels = predict_from_cache(&req.query, cache, req.threshold.unwrap_or(threshold))?;
        let out = serde_json::to_string(&PredictionLine {
            query: &req.query,
            labels,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        lines.push(out);
    }
    let mut w = BufWriter::new(File::create(output).map_err(|e| Error::io(output, e))?);
    for l in &lines {
        writeln!(w, "{l}").map_err(|e| Error::io(output, e))?;
    }
    w.flush().map_err(|e| Error::io(output, e))?;
    Ok(lines.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{build_vocab, ModelContext, TrainConfig};

    fn tiny() -> (ModelState<f64>, Taxonomy) {
        let taxonomy = Taxonomy::from_parts(vec![
            (NodeId(1), "root".into(), None, vec![]),
            (NodeId(2), "shoes".into(), Some(NodeId(1)), vec!["boots".into()]),
            (NodeId(3), "hats".into(), Some(NodeId(1)), vec![]),
        ])
        .unwrap();
        let config = TrainConfig {
            dim: 4,
            use_structure: false,
            ..TrainConfig::default()
        };
        let vocab = build_vocab(&[], &taxonomy, &Default::default(), config.tokenizer);
        (ModelState::init(&config, vocab, &taxonomy), taxonomy)
    }

    #[test]
    fn roundtrip_bytes_and_values() {
        let (model, tax) = tiny();
        let cache = LeafCache::from_model(&model, None, &tax).unwrap();
        let mut a = Vec::new();
        cache.write_to(&mut a).unwrap();
        let back = LeafCache::<f64>::read_from(&mut a.as_slice()).ok().unwrap();
        assert_eq!(back, cache);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch_rejected() {
        let (model, tax) = tiny();
        let mut cache = LeafCache::from_model(&model, None, &tax).unwrap();
        let mut bytes = Vec::new();
        cache.write_to(&mut bytes).unwrap();
        bytes[8] = 99;
        assert!(matches!(LeafCache::<f64>::read_from(&mut bytes.as_slice()), Err(ReadError::Bad(Error::Format(_)))));
        cache.version = 2;
        assert!(predict_from_cache("x", &cache, 0.5).is_err());
    }

    #[test]
    fn empty_query_still_labels() {
        let (model, tax) = tiny();
        let cache = LeafCache::from_model(&model, None, &tax).unwrap();
        let labels = predict_from_cache("", &cache, 0.99).unwrap();
        assert!(!labels.is_empty());
        let again = predict_from_cache("", &cache, 0.99).unwrap();
        assert_eq!(labels, again);
    }

    #[test]
    fn matches_in_process_scores() {
        let (model, tax) = tiny();
        let cache = LeafCache::from_model(&model, None, &tax).unwrap();
        let predictor = Predictor::new(&model, &tax, None).unwrap();
        for q in ["shoes", "hats boots", "zzz", ""] {
            let a = cache.scores(q).unwrap();
            let b = predictor.scores(q).unwrap();
            assert!((&a - &b).iter().all(|d| d.abs() <= 1e-12));
        }
        let _ = ModelContext::new(&model, &tax, None).unwrap();
    }

    #[test]
    fn malformed_requests_get_error_responses() {
        let (model, tax) = tiny();
        let cache = LeafCache::from_model(&model, None, &tax).unwrap();
        let input = "{\"query\":\"shoes\"}\nnot json\n\n{\"query\":\"hats\",\"threshold\":7}\n{\"query\":\"hats\"}\n";
        let mut out = Vec::new();
        assert_eq!(serve_stream(&cache, input.as_bytes(), &mut out).unwrap(), 4);
        let resp: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(matches!(&resp[0], Response::Labels { labels } if !labels.is_empty()));
        assert!(matches!(&resp[1], Response::Error { .. }));
        assert!(matches!(&resp[2], Response::Error { .. }));
        assert!(matches!(&resp[3], Response::Labels { .. }));
    }
}
