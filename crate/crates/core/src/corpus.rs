//! Demonstration data: line-delimited records, deterministic tokenization,
//! and the positive set D⁺ (records with reward 1).
//!
//! A corpus file holds one JSON object per line with the fields `prompt`,
//! `response` and `reward`. Unknown fields are ignored. The vocabulary lives
//! in a sidecar file (one token per line, line number = token id); by
//! default the sidecar sits next to the corpus as `<corpus>.vocab`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, Policy};

pub type TokenId = u32;

/// A prompt/response pair with a sparse binary reward.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub reward: u8,
}

impl Trajectory {
    pub fn new(prompt: Vec<TokenId>, response: Vec<TokenId>, reward: u8) -> Result<Self> {
        let t = Self {
            prompt,
            response,
            reward,
        };
        t.check_shape()?;
        Ok(t)
    }

    /// A positive demonstration (reward 1).
    pub fn positive(prompt: Vec<TokenId>, response: Vec<TokenId>) -> Result<Self> {
        Self::new(prompt, response, 1)
    }

    pub fn is_positive(&self) -> bool {
        self.reward == 1
    }

    fn check_shape(&self) -> Result<()> {
        if self.response.is_empty() {
            return Err(Error::Contract("trajectory response is empty".into()));
        }
        if self.reward > 1 {
            return Err(Error::Contract(format!(
                "reward must be 0 or 1, got {}",
                self.reward
            )));
        }
        Ok(())
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.check_shape()?;
        if let Some(&bad) = self
            .prompt
            .iter()
            .chain(&self.response)
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(Error::Vocabulary {
                symbol: bad.to_string(),
                context: format!("token id >= vocab_size {vocab_size}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Char,
    Whitespace,
}

/// Token strings indexed by id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.contains('\n') {
                return Err(Error::Config(format!("invalid vocabulary token {tok:?}")));
            }
            if vocab.index.contains_key(&tok) {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    /// One token per character of `alphabet`, in order.
    pub fn from_alphabet(alphabet: &str) -> Result<Self> {
        Self::from_tokens(alphabet.chars().map(String::from))
    }

    fn push(&mut self, tok: String) -> TokenId {
        let id = self.tokens.len() as TokenId;
        self.index.insert(tok.clone(), id);
        self.tokens.push(tok);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Whitespace vocabulary in order of first appearance (prompt before
    /// response, record order).
    pub fn build_whitespace(records: &[Record]) -> Self {
        let mut vocab = Self::default();
        for rec in records {
            for word in rec
                .prompt
                .split_whitespace()
                .chain(rec.response.split_whitespace())
            {
                if vocab.id(word).is_none() {
                    vocab.push(word.to_string());
                }
            }
        }
        vocab
    }

    pub fn tokenize(&self, kind: TokenizerKind, text: &str) -> Result<Vec<TokenId>> {
        let lookup = |sym: &str| {
            self.id(sym).ok_or_else(|| Error::Vocabulary {
                symbol: sym.to_string(),
                context: String::new(),
            })
        };
        match kind {
            TokenizerKind::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| lookup(c.encode_utf8(&mut buf)))
                    .collect()
            }
            TokenizerKind::Whitespace => text.split_whitespace().map(lookup).collect(),
        }
    }

    pub fn detokenize(&self, kind: TokenizerKind, ids: &[TokenId]) -> Result<String> {
        let toks = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or_else(|| Error::Vocabulary {
                    symbol: id.to_string(),
                    context: "unknown token id".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(match kind {
            TokenizerKind::Char => toks.concat(),
            TokenizerKind::Whitespace => toks.join(" "),
        })
    }
}

/// One raw line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub prompt: String,
    pub response: String,
    pub reward: u8,
}

#[derive(Deserialize)]
struct RawRecord {
    prompt: String,
    response: String,
    reward: serde_json::Value,
}

/// Parse the line-delimited record file. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    parse_records(&text, path)
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let reward = match raw.reward.as_u64() {
            Some(r @ (0 | 1)) => r as u8,
            _ => {
                return Err(parse_err(format!(
                    "reward must be 0 or 1, got {}",
                    raw.reward
                )))
            }
        };
        out.push(Record {
            prompt: raw.prompt,
            response: raw.response,
            reward,
        });
    }
    Ok(out)
}

/// Default sidecar location: `<corpus path>.vocab`.
pub fn sidecar_path(corpus_path: &Path) -> PathBuf {
    let mut s = corpus_path.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// A tokenized, validated set of trajectories. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<Trajectory>,
    pub vocab_size: usize,
    pub tokenizer_kind: TokenizerKind,
    pub vocab: Vocab,
}

impl Corpus {
    /// Build from already-tokenized trajectories (no vocabulary strings).
    pub fn from_trajectories(items: Vec<Trajectory>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        for t in &items {
            t.validate(vocab_size)?;
        }
        let vocab = Vocab::from_tokens((0..vocab_size).map(|i| format!("<{i}>")))?;
        Ok(Self {
            items,
            vocab_size,
            tokenizer_kind: TokenizerKind::Whitespace,
            vocab,
        })
    }

    pub fn from_records(
        records: &[Record],
        kind: TokenizerKind,
        vocab: Vocab,
        vocab_size: usize,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if vocab.len() > vocab_size {
            return Err(Error::Vocabulary {
                symbol: vocab.tokens()[vocab_size].clone(),
                context: format!(
                    "vocabulary has {} tokens but vocab_size is {vocab_size}",
                    vocab.len()
                ),
            });
        }
        let items = records
            .iter()
            .map(|r| {
                Trajectory::new(
                    vocab.tokenize(kind, &r.prompt)?,
                    vocab.tokenize(kind, &r.response)?,
                    r.reward,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            vocab_size,
            tokenizer_kind: kind,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn with_items(&self, items: Vec<Trajectory>) -> Self {
        Self {
            items,
            vocab_size: self.vocab_size,
            tokenizer_kind: self.tokenizer_kind,
            vocab: self.vocab.clone(),
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter().filter(|t| t.is_positive())
    }

    /// Group records by prompt (first-appearance order). Each group lists
    /// its distinct positive responses.
    pub fn prompt_groups(&self) -> Vec<PromptGroup> {
        let mut groups: Vec<PromptGroup> = Vec::new();
        let mut index: HashMap<&[TokenId], usize> = HashMap::new();
        for t in &self.items {
            let gi = *index.entry(t.prompt.as_slice()).or_insert_with(|| {
                groups.push(PromptGroup {
                    prompt: t.prompt.clone(),
                    response_len: t.response.len(),
                    positives: Vec::new(),
                });
                groups.len() - 1
            });
            let g = &mut groups[gi];
            if t.is_positive() && !g.positives.contains(&t.response) {
                g.positives.push(t.response.clone());
            }
        }
        groups
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptGroup {
    pub prompt: Vec<TokenId>,
    /// Response length of the first record seen for this prompt.
    pub response_len: usize,
    pub positives: Vec<Vec<TokenId>>,
}

impl PromptGroup {
    pub fn is_positive(&self, response: &[TokenId]) -> bool {
        self.positives.iter().any(|p| p == response)
    }
}

/// Load a corpus using the default `<path>.vocab` sidecar.
///
/// The char tokenizer requires the sidecar (it declares the alphabet). The
/// whitespace tokenizer reads it when present and otherwise builds the
/// vocabulary from the corpus and writes it there.
pub fn load_corpus(path: &Path, kind: TokenizerKind, vocab_size: usize) -> Result<Corpus> {
    load_corpus_with_sidecar(path, kind, vocab_size, &sidecar_path(path))
}

pub fn load_corpus_with_sidecar(
    path: &Path,
    kind: TokenizerKind,
    vocab_size: usize,
    sidecar: &Path,
) -> Result<Corpus> {
    let records = read_records(path)?;
    let vocab = if sidecar.exists() {
        Vocab::read(sidecar)?
    } else {
        match kind {
            TokenizerKind::Char => {
                return Err(Error::Config(format!(
                    "char tokenizer needs an alphabet file at {}",
                    sidecar.display()
                )))
            }
            TokenizerKind::Whitespace => {
                let v = Vocab::build_whitespace(&records);
                if v.len() <= vocab_size {
                    v.write(sidecar)?;
                }
                v
            }
        }
    };
    Corpus::from_records(&records, kind, vocab, vocab_size)
}

/// The positive sub-corpus D⁺, order preserved.
pub fn filter_positive(corpus: &Corpus) -> Corpus {
    corpus.with_items(corpus.positives().cloned().collect())
}

/// A probability estimate with its standard error (0 when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub enumeration_cap: u64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            enumeration_cap: policy::DEFAULT_ENUMERATION_CAP,
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

/// c_ref: the probability the reference policy assigns to D⁺, averaged
/// uniformly over distinct prompts.
///
/// Exact when every prompt's response space fits under the enumeration cap,
/// otherwise a Monte-Carlo estimate from reference samples.
pub fn estimate_c_ref(
    corpus: &Corpus,
    reference: &dyn Policy,
    opts: &EstimateOptions,
) -> Result<Estimate> {
    let groups = corpus.prompt_groups();
    if groups.is_empty() {
        return Err(Error::Contract(
            "cannot estimate c_ref on an empty corpus".into(),
        ));
    }
    let enumerable = groups.iter().all(|g| {
        policy::response_space_size(reference.vocab_size(), g.response_len)
            .is_some_and(|n| n <= opts.enumeration_cap)
    });
    if enumerable {
        let mut total = 0.0;
        for g in &groups {
            let mut mass = 0.0;
            for y in &g.positives {
                mass += policy::sequence_log_prob(reference, &g.prompt, y)?.exp();
            }
            total += mass;
        }
        return Ok(Estimate {
            value: total / groups.len() as f64,
            std_error: 0.0,
            exact: true,
        });
    }
    if opts.mc_samples == 0 {
        return Err(Error::Config(
            "Monte-Carlo c_ref needs a positive sampling budget".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut hits = 0usize;
    for _ in 0..opts.mc_samples {
        let g = &groups[rng.random_range(0..groups.len())];
        let y = policy::sample_with(reference, &g.prompt, g.response_len, &mut rng)?;
        if g.is_positive(&y) {
            hits += 1;
        }
    }
    let n = opts.mc_samples as f64;
    let p = hits as f64 / n;
    Ok(Estimate {
        value: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        exact: false,
    })
}
