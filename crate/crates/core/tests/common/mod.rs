#![allow(dead_code)]

use std::path::PathBuf;

use asft::corpus::{load_corpus, Corpus, TokenizerKind, Trajectory};
use asft::policy::{AnyPolicy, PolicyConfig};
use asft::trainer::TrainConfig;
use rand::Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub struct Fixture {
    pub corpus: Corpus,
    pub init: AnyPolicy,
    pub train: TrainConfig,
}

/// Load one of the shipped run configs (only the sections the library needs).
pub fn load_fixture(dir: &str, name: &str) -> Fixture {
    let base = fixtures().join(dir);
    let text = std::fs::read_to_string(base.join(format!("{name}.toml"))).unwrap();
    let table: toml::Table = text.parse().unwrap();
    let corpus_t = table["corpus"].as_table().unwrap();
    let kind = match corpus_t["tokenizer"].as_str().unwrap() {
        "char" => TokenizerKind::Char,
        _ => TokenizerKind::Whitespace,
    };
    let corpus = load_corpus(
        &base.join(corpus_t["path"].as_str().unwrap()),
        kind,
        corpus_t["vocab_size"].as_integer().unwrap() as usize,
    )
    .unwrap();
    let policy: PolicyConfig = table["policy"].clone().try_into().unwrap();
    let seed = table["init"]["seed"].as_integer().unwrap() as u64;
    let train: TrainConfig = table["train"].clone().try_into().unwrap();
    Fixture {
        corpus,
        init: AnyPolicy::init(&policy, seed).unwrap(),
        train,
    }
}

pub fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol:e})");
}

/// Softmax of one row, written out longhand.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let mut m = logits[0];
    for &l in logits {
        if l > m {
            m = l;
        }
    }
    let mut z = 0.0;
    let mut e = Vec::new();
    for &l in logits {
        let v = (l - m).exp();
        z += v;
        e.push(v);
    }
    e.into_iter().map(|v| v / z).collect()
}

/// Straight-line log-probability of a response under an order-k tabular
/// table (`logits[ctx * v + tok]`, contexts in base v+1 with BOS = v).
pub fn tabular_log_prob(
    logits: &[f64],
    v: usize,
    order: usize,
    prompt: &[u32],
    response: &[u32],
) -> f64 {
    let mut history: Vec<u32> = prompt.to_vec();
    let mut total = 0.0;
    for &y in response {
        let mut ctx = 0usize;
        for k in 0..order {
            let tok = if history.len() + k >= order {
                history[history.len() + k - order] as usize
            } else {
                v
            };
            ctx = ctx * (v + 1) + tok;
        }
        let row = &logits[ctx * v..(ctx + 1) * v];
        total += softmax_row(row)[y as usize].ln();
        history.push(y);
    }
    total
}

pub fn random_tokens<R: Rng>(rng: &mut R, v: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..v as u32)).collect()
}

pub fn random_batch<R: Rng>(
    rng: &mut R,
    v: usize,
    n: usize,
    prompt_len: usize,
    len: usize,
) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            Trajectory::positive(
                random_tokens(rng, v, prompt_len),
                random_tokens(rng, v, len),
            )
            .unwrap()
        })
        .collect()
}
