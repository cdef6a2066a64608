//! Autoregressive policies over a fixed vocabulary.
//!
//! Every policy exposes its parameters as one flat `f64` vector in a
//! canonical order declared by the concrete type (see
//! [`TabularPolicy`] and [`TinyAutoregressor`]). Consumers compute
//! gradients by handing back per-position logit gradients through
//! [`Policy::backprop_response`], so objectives never need to know which
//! policy they are differentiating.

mod checkpoint;
mod neural;
mod tabular;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use neural::{NeuralConfig, TinyAutoregressor};
pub use tabular::{TabularConfig, TabularPolicy};

use crate::corpus::{TokenId, Trajectory};
use crate::error::{Error, Result};

/// Sequence log-probabilities below this are clamped before exponentiation.
pub const LOG_PROB_FLOOR: f64 = -700.0;

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

pub trait Policy: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Longest prompt + response (in tokens) the policy accepts.
    fn max_len(&self) -> usize;

    fn params(&self) -> &[f64];

    /// Logits of the next-token distribution after `prompt ++ prefix`.
    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;

    /// Teacher-forced logits: entry `t` scores `response[t]` given
    /// `prompt ++ response[..t]`.
    fn response_logits(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        check_len(self, prompt, response)?;
        (0..response.len())
            .map(|t| self.next_token_logits(prompt, &response[..t]))
            .collect()
    }

    /// Accumulate `Σ_t dlogits[t] · ∂logits_t/∂θ` into `grad`, where
    /// `logits_t` are the teacher-forced logits of [`Policy::response_logits`].
    fn backprop_response(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()>;
}

/// A policy whose parameters may be updated in place.
pub trait TrainablePolicy: Policy {
    fn params_mut(&mut self) -> &mut [f64];
}

pub(crate) fn check_len<P: Policy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<()> {
    let len = prompt.len() + response.len();
    if len > policy.max_len() {
        return Err(Error::Length {
            len,
            max_len: policy.max_len(),
        });
    }
    let v = policy.vocab_size();
    if let Some(&bad) = prompt.iter().chain(response).find(|&&t| t as usize >= v) {
        return Err(Error::Vocabulary {
            symbol: bad.to_string(),
            context: format!("token id >= vocab_size {v}"),
        });
    }
    Ok(())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `exp(log_p)` with the floor applied; the flag reports whether it clamped.
pub fn clamped_exp(log_p: f64) -> (f64, bool) {
    if log_p < LOG_PROB_FLOOR {
        (LOG_PROB_FLOOR.exp(), true)
    } else {
        (log_p.exp(), false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    pub per_token: Vec<f64>,
    /// Left-to-right sum of `per_token`.
    pub sequence: f64,
}

pub fn log_prob<P: Policy + ?Sized>(policy: &P, trajectory: &Trajectory) -> Result<TokenLogProbs> {
    let logits = policy.response_logits(&trajectory.prompt, &trajectory.response)?;
    let per_token: Vec<f64> = logits
        .iter()
        .zip(&trajectory.response)
        .map(|(row, &y)| row[y as usize] - log_sum_exp(row))
        .collect();
    let sequence = per_token.iter().sum();
    Ok(TokenLogProbs {
        per_token,
        sequence,
    })
}

pub fn sequence_log_prob<P: Policy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    let logits = policy.response_logits(prompt, response)?;
    Ok(logits
        .iter()
        .zip(response)
        .map(|(row, &y)| row[y as usize] - log_sum_exp(row))
        .sum())
}

/// Gradient of the sequence log-probability with respect to the flat
/// parameter vector.
pub fn grad_log_prob<P: Policy + ?Sized>(policy: &P, trajectory: &Trajectory) -> Result<Vec<f64>> {
    let logits = policy.response_logits(&trajectory.prompt, &trajectory.response)?;
    let dlogits: Vec<Vec<f64>> = logits
        .iter()
        .zip(&trajectory.response)
        .map(|(row, &y)| score_row(row, y))
        .collect();
    let mut grad = vec![0.0; policy.params().len()];
    policy.backprop_response(
        &trajectory.prompt,
        &trajectory.response,
        &dlogits,
        &mut grad,
    )?;
    Ok(grad)
}

/// `e_y − softmax(logits)`: the gradient of `log softmax(logits)[y]`.
pub(crate) fn score_row(logits: &[f64], y: TokenId) -> Vec<f64> {
    let mut g = softmax(logits);
    for v in g.iter_mut() {
        *v = -*v;
    }
    g[y as usize] += 1.0;
    g
}

/// `vocab^len`, or `None` on overflow.
pub fn response_space_size(vocab: usize, len: usize) -> Option<u64> {
    (vocab as u64).checked_pow(u32::try_from(len).ok()?)
}

/// All responses of length `len` with their probabilities, in lexicographic
/// token order.
pub fn enumerate_responses<P: Policy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    len: usize,
    cap: u64,
) -> Result<Vec<(Vec<TokenId>, f64)>> {
    let v = policy.vocab_size();
    match response_space_size(v, len) {
        Some(n) if n <= cap => {}
        _ => return Err(Error::EnumerationCap { vocab: v, len, cap }),
    }
    if len == 0 {
        return Err(Error::Contract("response length must be positive".into()));
    }
    check_len(policy, prompt, &vec![0; len])?;
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    enumerate_rec(policy, prompt, len, &mut prefix, 0.0, &mut out)?;
    Ok(out)
}

fn enumerate_rec<P: Policy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    len: usize,
    prefix: &mut Vec<TokenId>,
    log_p: f64,
    out: &mut Vec<(Vec<TokenId>, f64)>,
) -> Result<()> {
    if prefix.len() == len {
        out.push((prefix.clone(), log_p.exp()));
        return Ok(());
    }
    let lp = log_softmax(&policy.next_token_logits(prompt, prefix)?);
    for (tok, l) in lp.into_iter().enumerate() {
        prefix.push(tok as TokenId);
        enumerate_rec(policy, prompt, len, prefix, log_p + l, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Draw one response of length `len`; reproducible for a given seed.
pub fn sample<P: Policy + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    len: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(policy, prompt, len, &mut rng)
}

pub fn sample_with<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let probs = softmax(&policy.next_token_logits(prompt, &out)?);
        out.push(sample_categorical(&probs, rng.random::<f64>()));
    }
    Ok(out)
}

fn sample_categorical(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
}

/// An immutable snapshot of a policy. Cloning shares the snapshot.
#[derive(Debug)]
pub struct FrozenPolicy<P>(Arc<P>);

impl<P> Clone for FrozenPolicy<P> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<P> FrozenPolicy<P> {
    pub fn inner(&self) -> &P {
        &self.0
    }
}

/// Deep copy of `policy` that nothing can mutate.
pub fn clone_frozen<P: Policy + Clone>(policy: &P) -> FrozenPolicy<P> {
    FrozenPolicy(Arc::new(policy.clone()))
}

impl<P: Policy> Policy for FrozenPolicy<P> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn max_len(&self) -> usize {
        self.0.max_len()
    }
    fn params(&self) -> &[f64] {
        self.0.params()
    }
    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.0.next_token_logits(prompt, prefix)
    }
    fn response_logits(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.0.response_logits(prompt, response)
    }
    fn backprop_response(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        self.0.backprop_response(prompt, response, dlogits, grad)
    }
}

/// Policy description stored in checkpoints and run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicyConfig {
    Tabular(TabularConfig),
    Neural(NeuralConfig),
}

impl PolicyConfig {
    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Tabular(c) => c.vocab_size,
            Self::Neural(c) => c.vocab_size,
        }
    }
}

/// Closed set of shipped policy types.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyPolicy {
    Tabular(TabularPolicy),
    Neural(TinyAutoregressor),
}

impl AnyPolicy {
    /// Fresh policy with parameters drawn from `seed`.
    pub fn init(config: &PolicyConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            PolicyConfig::Tabular(c) => Self::Tabular(TabularPolicy::random(c.clone(), seed)?),
            PolicyConfig::Neural(c) => Self::Neural(TinyAutoregressor::new(c.clone(), seed)?),
        })
    }

    pub fn from_params(config: &PolicyConfig, params: Vec<f64>) -> Result<Self> {
        Ok(match config {
            PolicyConfig::Tabular(c) => {
                Self::Tabular(TabularPolicy::from_params(c.clone(), params)?)
            }
            PolicyConfig::Neural(c) => {
                Self::Neural(TinyAutoregressor::from_params(c.clone(), params)?)
            }
        })
    }

    pub fn config(&self) -> PolicyConfig {
        match self {
            Self::Tabular(p) => PolicyConfig::Tabular(p.config().clone()),
            Self::Neural(p) => PolicyConfig::Neural(p.config().clone()),
        }
    }

    fn inner(&self) -> &dyn Policy {
        match self {
            Self::Tabular(p) => p,
            Self::Neural(p) => p,
        }
    }
}

impl Policy for AnyPolicy {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn max_len(&self) -> usize {
        self.inner().max_len()
    }
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.inner().next_token_logits(prompt, prefix)
    }
    fn response_logits(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.inner().response_logits(prompt, response)
    }
    fn backprop_response(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        self.inner()
            .backprop_response(prompt, response, dlogits, grad)
    }
}

impl TrainablePolicy for AnyPolicy {
    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Tabular(p) => p.params_mut(),
            Self::Neural(p) => p.params_mut(),
        }
    }
}
