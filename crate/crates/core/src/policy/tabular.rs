use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_len, Policy, TrainablePolicy};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

const MAX_TABLE_ENTRIES: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularConfig {
    pub vocab_size: usize,
    /// Number of trailing history tokens that select the context row.
    pub order: usize,
    pub max_len: usize,
    /// Standard deviation of the random logit initialisation.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl TabularConfig {
    pub fn new(vocab_size: usize, order: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            order,
            max_len,
            init_scale: default_init_scale(),
        }
    }

    pub fn num_contexts(&self) -> Option<usize> {
        (self.vocab_size + 1).checked_pow(u32::try_from(self.order).ok()?)
    }

    fn validate(&self) -> Result<usize> {
        if self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "tabular policy needs positive vocab_size and max_len".into(),
            ));
        }
        let n = self
            .num_contexts()
            .and_then(|c| c.checked_mul(self.vocab_size))
            .filter(|&n| n <= MAX_TABLE_ENTRIES)
            .ok_or_else(|| {
                Error::Config(format!(
                    "tabular table for vocab {} and order {} is too large",
                    self.vocab_size, self.order
                ))
            })?;
        Ok(n)
    }
}

/// Softmax over a logit table indexed by (context, token).
///
/// The context is the last `order` tokens of `prompt ++ prefix`, left-padded
/// with a begin marker, read as a base-`(vocab+1)` number (the marker is
/// digit `vocab`). Parameter order: row-major `logits[context * vocab + token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    config: TabularConfig,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(config: TabularConfig) -> Result<Self> {
        let n = config.validate()?;
        Ok(Self {
            config,
            logits: vec![0.0; n],
        })
    }

    /// Logits drawn i.i.d. from N(0, init_scale²).
    pub fn random(config: TabularConfig, seed: u64) -> Result<Self> {
        let n = config.validate()?;
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| Error::Config(format!("init_scale: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { config, logits })
    }

    pub fn from_params(config: TabularConfig, logits: Vec<f64>) -> Result<Self> {
        let n = config.validate()?;
        if logits.len() != n {
            return Err(Error::Config(format!(
                "tabular policy expects {n} parameters, got {}",
                logits.len()
            )));
        }
        Ok(Self { config, logits })
    }

    pub fn config(&self) -> &TabularConfig {
        &self.config
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.config.vocab_size
    }

    pub fn context_id(&self, prompt: &[TokenId], prefix: &[TokenId]) -> usize {
        let v = self.config.vocab_size;
        let bos = v;
        let k = self.config.order;
        let total = prompt.len() + prefix.len();
        let mut id = 0usize;
        for i in 0..k {
            // position of the i-th oldest token of the window
            let digit = match (total + i).checked_sub(k) {
                Some(pos) if pos < prompt.len() => prompt[pos] as usize,
                Some(pos) => prefix[pos - prompt.len()] as usize,
                None => bos,
            };
            id = id * (v + 1) + digit;
        }
        id
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let v = self.config.vocab_size;
        &self.logits[context * v..(context + 1) * v]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let v = self.config.vocab_size;
        &mut self.logits[context * v..(context + 1) * v]
    }
}

impl Policy for TabularPolicy {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        check_len(self, prompt, prefix)?;
        Ok(self.row(self.context_id(prompt, prefix)).to_vec())
    }

    fn backprop_response(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        check_len(self, prompt, response)?;
        let v = self.config.vocab_size;
        for (t, d) in dlogits.iter().enumerate().take(response.len()) {
            let ctx = self.context_id(prompt, &response[..t]);
            for (g, dv) in grad[ctx * v..(ctx + 1) * v].iter_mut().zip(d) {
                *g += dv;
            }
        }
        Ok(())
    }
}

impl TrainablePolicy for TabularPolicy {
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }
}
