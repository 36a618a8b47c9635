use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::{mpsc, Arc};
use std::thread;

use querycat::data::{split_dataset, Taxonomy};
use querycat::encoder::{build_label_sequence, encode, tokenize, TokenizerMode};
use querycat::error::Error;
use querycat::graph::{extract_leaf, gcn_forward, GraphBundle};
use querycat::serving::{
    batch_predict, export_cache, handle_request, predict_from_cache, serve_stream, serve_tcp, LeafCache, Response,
};
use querycat::synth::generate_synthetic;
use querycat::trainer::{train, ModelState, Predictor, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    taxonomy: Taxonomy,
    model: ModelState<f64>,
    graph: GraphBundle<f64>,
    queries: Vec<String>,
}

fn fixture() -> Fixture {
    let corpus = generate_synthetic(15, 600, 0.2, 12).unwrap();
    let config = TrainConfig {
        dim: 16,
        epochs: 3,
        batch_size: 32,
        learning_rate: 0.01,
        tokenizer: TokenizerMode::Word,
        ..TrainConfig::default()
    };
    let split = split_dataset(&corpus.samples, config.split_ratios, 1).unwrap();
    let out = train::<f64>(&config, &corpus.taxonomy, &split.train, &[], &corpus.knowledge, None).unwrap();
    let mut queries: Vec<String> = corpus.gold.iter().take(90).map(|s| s.query_text.clone()).collect();
    queries.extend(["", "   ", "unseen words only", "sig_3", "红色 sig_1", "w1 w2 w3"].map(String::from));
    queries.extend((0..4).map(|i| format!("sig_{i} sig_{}", i + 5)));
    assert_eq!(queries.len(), 100);
    Fixture {
        taxonomy: corpus.taxonomy,
        model: out.model,
        graph: out.graph.unwrap(),
        queries,
    }
}

fn cache_bytes(cache: &LeafCache<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    cache.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn cache_scores_match_full_model() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let written = export_cache(&f.model, Some(&f.graph), &f.taxonomy, dir.path().join("c.bin")).unwrap();
    let cache = LeafCache::<f64>::load(dir.path().join("c.bin")).unwrap();
    assert_eq!(cache, written);
    assert_eq!(cache.num_leaves(), f.taxonomy.num_leaves());

    let predictor = Predictor::new(&f.model, &f.taxonomy, Some(&f.graph)).unwrap();
    let mut worst = 0.0f64;
    for q in &f.queries {
        let full = predictor.scores(q).unwrap();
        let cached = cache.scores(q).unwrap();
        for (a, b) in full.iter().zip(cached.iter()) {
            worst = worst.max((a - b).abs());
        }
        let labels = predict_from_cache(q, &cache, 0.5).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(labels, predict_from_cache(q, &cache, 0.5).unwrap());
    }
    assert!(worst <= 1e-9, "max score difference {worst:e}");
}

#[test]
fn cache_rows_match_independent_recomputation() {
    let f = fixture();
    let cache = LeafCache::from_model(&f.model, Some(&f.graph), &f.taxonomy).unwrap();
    let enc = &f.model.params.encoder;
    let rows: Vec<_> = f
        .taxonomy
        .nodes_in_row_order()
        .map(|n| encode(&tokenize(&build_label_sequence(n), &f.model.vocab, f.model.config.max_label_len), enc).unwrap())
        .collect();
    let x = ndarray::stack(ndarray::Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap();
    let h = gcn_forward(&f.graph.normalized, x.view(), &f.model.params.gcn).unwrap();
    let h_leaf = extract_leaf(h.view(), &f.taxonomy);
    for (a, b) in h_leaf.iter().zip(cache.h_leaf.iter()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn cache_bytes_are_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    export_cache(&f.model, Some(&f.graph), &f.taxonomy, dir.path().join("a.bin")).unwrap();
    export_cache(&f.model, Some(&f.graph), &f.taxonomy, dir.path().join("b.bin")).unwrap();
    let a = fs::read(dir.path().join("a.bin")).unwrap();
    assert!(a == fs::read(dir.path().join("b.bin")).unwrap());
    // a second, independently trained model with the same seed exports the same bytes
    let g = fixture();
    export_cache(&g.model, Some(&g.graph), &g.taxonomy, dir.path().join("c.bin")).unwrap();
    assert!(a == fs::read(dir.path().join("c.bin")).unwrap());
}

#[test]
fn stdio_serving_is_stateless_and_leaves_cache_untouched() {
    let f = fixture();
    let cache = LeafCache::from_model(&f.model, Some(&f.graph), &f.taxonomy).unwrap();
    let before = cache_bytes(&cache);
    let input = "{\"query\":\"sig_2 w7\"}\n".repeat(1000);
    let mut out = Vec::new();
    assert_eq!(serve_stream(&cache, input.as_bytes(), &mut out).unwrap(), 1000);
    let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
    assert_eq!(lines.len(), 1000);
    assert!(lines.iter().all(|l| *l == lines[0]));
    assert!(lines[0].starts_with("{\"labels\":[{"));
    assert_eq!(cache_bytes(&cache), before);

    let mixed = "not json\n\n{\"query\":\"x\",\"bogus\":1}\n{\"query\":\"x\",\"threshold\":7}\n{\"query\":\"x\"}\n";
    let mut out = Vec::new();
    assert_eq!(serve_stream(&cache, mixed.as_bytes(), &mut out).unwrap(), 4);
    let resp: Vec<Response> = out.lines().map(|l| serde_json::from_str(&l.unwrap()).unwrap()).collect();
    assert!(resp[..3].iter().all(|r| matches!(r, Response::Error { .. })));
    assert!(matches!(&resp[3], Response::Labels { labels } if !labels.is_empty()));
}

#[test]
fn concurrent_tcp_requests_match_sequential_answers() {
    let f = fixture();
    let cache = Arc::new(LeafCache::from_model(&f.model, Some(&f.graph), &f.taxonomy).unwrap());
    let before = cache_bytes(&cache);
    let clients = 8;
    let (tx, rx) = mpsc::channel();
    let server = {
        let cache = Arc::clone(&cache);
        thread::spawn(move || serve_tcp(cache, "127.0.0.1:0", Some(clients), move |addr| tx.send(addr).unwrap()).unwrap())
    };
    let addr = rx.recv().unwrap();

    let requests: Vec<String> = f
        .queries
        .iter()
        .map(|q| serde_json::json!({ "query": q }).to_string())
        .chain(["{bad".to_string()])
        .collect();
    let workers: Vec<_> = (0..clients)
        .map(|c| {
            let mut reqs = requests.clone();
            reqs.shuffle(&mut ChaCha8Rng::seed_from_u64(c as u64));
            thread::spawn(move || {
                let stream = TcpStream::connect(addr).unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut writer = stream;
                let mut got = Vec::new();
                for r in reqs {
                    writeln!(writer, "{r}").unwrap();
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    got.push((r, line.trim_end().to_string()));
                }
                got
            })
        })
        .collect();
    for w in workers {
        for (req, resp) in w.join().unwrap() {
            let sequential = serde_json::to_string(&handle_request(&req, &cache)).unwrap();
            assert_eq!(resp, sequential, "request {req}");
        }
    }
    server.join().unwrap();
    assert_eq!(cache_bytes(&cache), before);
}

#[test]
fn batch_prediction_aligns_with_input_lines() {
    let f = fixture();
    let cache = LeafCache::from_model(&f.model, Some(&f.graph), &f.taxonomy).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);

    fs::write(p("empty.jsonl"), "").unwrap();
    assert_eq!(batch_predict(p("empty.jsonl"), &cache, p("empty.out"), 0.5).unwrap(), 0);
    assert_eq!(fs::read(p("empty.out")).unwrap(), b"");

    let qs = ["sig_1 w3", "sig_4", "nothing"];
    let input: String = qs.iter().map(|q| format!("{{\"query\":\"{q}\"}}\n")).collect();
    fs::write(p("in.jsonl"), input).unwrap();
    assert_eq!(batch_predict(p("in.jsonl"), &cache, p("out.jsonl"), 0.5).unwrap(), 3);
    let out = fs::read_to_string(p("out.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (q, line) in qs.iter().zip(&lines) {
        assert_eq!(line["query"], *q);
        let expected = serde_json::to_value(predict_from_cache(q, &cache, 0.5).unwrap()).unwrap();
        assert_eq!(line["labels"], expected);
    }

    fs::write(p("bad.jsonl"), "{\"query\":\"a\"}\n{\"q\":1}\n").unwrap();
    match batch_predict(p("bad.jsonl"), &cache, p("bad.out"), 0.5) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
