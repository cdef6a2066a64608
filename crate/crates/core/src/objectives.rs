//! SFT, DFT and ASFT losses over a batch of positive demonstrations.
//!
//! All losses reduce by the mean over sequences. DFT weights are evaluated
//! at the current parameters and then held constant for differentiation
//! (stop-gradient): the reported gradient is that of the surrogate
//! `-(1/N) Σ_i Σ_t w_it · log π(y_t | ·)` with `w` frozen. The ASFT/SFT-KL
//! anchor term is an exact categorical KL at every teacher-forced state of
//! the batch, averaged over states.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{clamped_exp, log_softmax, score_row, softmax, Policy};

/// Where DFT places its stop-gradient weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Each token carries the sequence probability `p_θ(τ)`.
    Sequence,
    /// Each token carries its own conditional probability.
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(trained ‖ anchor)
    Reverse,
    /// KL(anchor ‖ trained)
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    Dft,
    Asft,
    SftKl,
}

impl Objective {
    pub fn uses_kl(self) -> bool {
        matches!(self, Self::Asft | Self::SftKl)
    }
}

pub struct KlConfig<'a> {
    pub direction: KlDirection,
    pub lambda: f64,
    pub anchor: &'a dyn Policy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// 1 for SFT; the (clamped) sequence probability for DFT/ASFT.
    pub per_seq_weight: Vec<f64>,
    /// Per-token weights for DFT/ASFT, `None` for SFT.
    pub per_token_weight: Option<Vec<Vec<f64>>>,
    pub grad: Vec<f64>,
    /// Mean per-state KL to the anchor; 0 when λ = 0 or no anchor is used.
    pub kl_term: f64,
    /// Number of probabilities that hit the exp(-700) floor.
    pub clamped: usize,
}

/// A teacher-forced decoding state: the policy is about to emit the token
/// after `prompt ++ prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub prompt: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
}

/// Every state visited when scoring the batch's responses.
pub fn visited_states(batch: &[Trajectory]) -> Vec<State> {
    batch
        .iter()
        .flat_map(|t| {
            (0..t.response.len()).map(|i| State {
                prompt: t.prompt.clone(),
                prefix: t.response[..i].to_vec(),
            })
        })
        .collect()
}

fn check_batch(batch: &[Trajectory]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("loss needs a non-empty batch".into()));
    }
    if let Some(i) = batch.iter().position(|t| !t.is_positive()) {
        return Err(Error::Contract(format!(
            "batch item {i} has reward 0; losses are defined on D⁺ only"
        )));
    }
    Ok(())
}

fn check_anchor(policy: &dyn Policy, anchor: &dyn Policy) -> Result<()> {
    if policy.vocab_size() != anchor.vocab_size() {
        return Err(Error::Contract(format!(
            "anchor vocabulary {} differs from policy vocabulary {}",
            anchor.vocab_size(),
            policy.vocab_size()
        )));
    }
    Ok(())
}

/// KL between the categorical distributions given by two logit rows, in
/// `direction` with `q` the trained side and `p` the anchor side.
pub fn categorical_kl(q_logits: &[f64], p_logits: &[f64], direction: KlDirection) -> f64 {
    let lq = log_softmax(q_logits);
    let lp = log_softmax(p_logits);
    let (a, b) = match direction {
        KlDirection::Reverse => (&lq, &lp),
        KlDirection::Forward => (&lp, &lq),
    };
    a.iter()
        .zip(b)
        .map(|(la, lb)| {
            if *la == f64::NEG_INFINITY {
                0.0
            } else {
                la.exp() * (la - lb)
            }
        })
        .sum()
}

/// Gradient of [`categorical_kl`] with respect to `q_logits`, plus the KL.
fn categorical_kl_grad(
    q_logits: &[f64],
    p_logits: &[f64],
    direction: KlDirection,
) -> (f64, Vec<f64>) {
    let lq = log_softmax(q_logits);
    let lp = log_softmax(p_logits);
    let q: Vec<f64> = lq.iter().map(|x| x.exp()).collect();
    match direction {
        KlDirection::Reverse => {
            let kl: f64 = q
                .iter()
                .zip(lq.iter().zip(&lp))
                .map(|(qi, (a, b))| qi * (a - b))
                .sum();
            let g = q
                .iter()
                .zip(lq.iter().zip(&lp))
                .map(|(qi, (a, b))| qi * ((a - b) - kl))
                .collect();
            (kl, g)
        }
        KlDirection::Forward => {
            let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
            let kl = p
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(pi, (a, b))| pi * (a - b))
                .sum();
            let g = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();
            (kl, g)
        }
    }
}

/// Mean exact KL over `states`.
pub fn kl_divergence(
    policy: &dyn Policy,
    anchor: &dyn Policy,
    states: &[State],
    direction: KlDirection,
) -> Result<f64> {
    check_anchor(policy, anchor)?;
    if states.is_empty() {
        return Err(Error::Contract("KL needs at least one state".into()));
    }
    let mut total = 0.0;
    for s in states {
        let q = policy.next_token_logits(&s.prompt, &s.prefix)?;
        let p = anchor.next_token_logits(&s.prompt, &s.prefix)?;
        total += categorical_kl(&q, &p, direction);
    }
    Ok(total / states.len() as f64)
}

#[derive(Clone, Copy)]
enum Weighting {
    Unit,
    Dft(Level),
}

fn weighted_loss(
    policy: &dyn Policy,
    batch: &[Trajectory],
    weighting: Weighting,
    kl: Option<&KlConfig<'_>>,
) -> Result<LossReport> {
    check_batch(batch)?;
    let kl = kl.filter(|k| k.lambda != 0.0);
    if let Some(k) = kl {
        check_anchor(policy, k.anchor)?;
        if !(k.lambda >= 0.0) {
            return Err(Error::Contract(format!(
                "lambda must be non-negative, got {}",
                k.lambda
            )));
        }
    }
    let n = batch.len() as f64;
    let n_states: usize = batch.iter().map(|t| t.response.len()).sum();

    let mut grad = vec![0.0; policy.params().len()];
    let mut loss_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clamped = 0usize;
    let mut per_seq_weight = Vec::with_capacity(batch.len());
    let mut per_token_weight = Vec::with_capacity(batch.len());

    for t in batch {
        let logits = policy.response_logits(&t.prompt, &t.response)?;
        let token_lp: Vec<f64> = logits
            .iter()
            .zip(&t.response)
            .map(|(row, &y)| log_softmax(row)[y as usize])
            .collect();
        let seq_lp: f64 = token_lp.iter().sum();
        let (seq_p, seq_clamped) = clamped_exp(seq_lp);

        let weights: Vec<f64> = match weighting {
            Weighting::Unit => vec![1.0; token_lp.len()],
            Weighting::Dft(Level::Sequence) => {
                clamped += usize::from(seq_clamped);
                vec![seq_p; token_lp.len()]
            }
            Weighting::Dft(Level::Token) => token_lp
                .iter()
                .map(|&l| {
                    let (p, c) = clamped_exp(l);
                    clamped += usize::from(c);
                    p
                })
                .collect(),
        };
        loss_sum += match weighting {
            Weighting::Unit => -seq_lp,
            Weighting::Dft(Level::Sequence) => -seq_p * seq_lp,
            Weighting::Dft(Level::Token) => -weights
                .iter()
                .zip(&token_lp)
                .map(|(w, l)| w * l)
                .sum::<f64>(),
        };

        let mut dlogits: Vec<Vec<f64>> = logits
            .iter()
            .zip(&t.response)
            .zip(&weights)
            .map(|((row, &y), &w)| {
                let scale = -w / n;
                score_row(row, y).into_iter().map(|g| scale * g).collect()
            })
            .collect();

        if let Some(k) = kl {
            let anchor_logits = k.anchor.response_logits(&t.prompt, &t.response)?;
            let scale = k.lambda / n_states as f64;
            for (dl, (q, p)) in dlogits.iter_mut().zip(logits.iter().zip(&anchor_logits)) {
                let (d, g) = categorical_kl_grad(q, p, k.direction);
                kl_sum += d;
                for (a, b) in dl.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }

        policy.backprop_response(&t.prompt, &t.response, &dlogits, &mut grad)?;
        per_seq_weight.push(match weighting {
            Weighting::Unit => 1.0,
            Weighting::Dft(_) => seq_p,
        });
        per_token_weight.push(weights);
    }

    let mut loss = loss_sum / n;
    let kl_term = match kl {
        Some(k) => {
            let term = kl_sum / n_states as f64;
            loss += k.lambda * term;
            term
        }
        None => 0.0,
    };
    Ok(LossReport {
        loss,
        per_seq_weight,
        per_token_weight: match weighting {
            Weighting::Unit => None,
            Weighting::Dft(_) => Some(per_token_weight),
        },
        grad,
        kl_term,
        clamped,
    })
}

/// Negative mean sequence log-likelihood.
pub fn sft_loss(policy: &dyn Policy, batch: &[Trajectory]) -> Result<LossReport> {
    weighted_loss(policy, batch, Weighting::Unit, None)
}

pub fn dft_loss(policy: &dyn Policy, batch: &[Trajectory], level: Level) -> Result<LossReport> {
    weighted_loss(policy, batch, Weighting::Dft(level), None)
}

/// DFT plus `λ` times the mean per-state KL to the anchor. With `λ = 0`
/// the result is bit-identical to [`dft_loss`].
pub fn asft_loss(
    policy: &dyn Policy,
    batch: &[Trajectory],
    kl: &KlConfig<'_>,
    level: Level,
) -> Result<LossReport> {
    weighted_loss(policy, batch, Weighting::Dft(level), Some(kl))
}

/// SFT with the same KL anchor as ASFT (the "SFT w/ KL" baseline).
pub fn sft_kl_loss(
    policy: &dyn Policy,
    batch: &[Trajectory],
    kl: &KlConfig<'_>,
) -> Result<LossReport> {
    weighted_loss(policy, batch, Weighting::Unit, Some(kl))
}

/// Dispatch on [`Objective`]. `kl` is required for the anchored objectives
/// and ignored otherwise.
pub fn objective_loss(
    policy: &dyn Policy,
    batch: &[Trajectory],
    objective: Objective,
    level: Level,
    kl: Option<&KlConfig<'_>>,
) -> Result<LossReport> {
    match objective {
        Objective::Sft => sft_loss(policy, batch),
        Objective::Dft => dft_loss(policy, batch, level),
        Objective::Asft | Objective::SftKl => {
            let kl =
                kl.ok_or_else(|| Error::Contract("anchored objective needs a KL config".into()))?;
            if objective == Objective::Asft {
                asft_loss(policy, batch, kl, level)
            } else {
                sft_kl_loss(policy, batch, kl)
            }
        }
    }
}

/// The stop-gradient weights DFT attaches to each token of `trajectory`.
pub fn token_weights(
    policy: &dyn Policy,
    trajectory: &Trajectory,
    level: Level,
) -> Result<Vec<f64>> {
    let logits = policy.response_logits(&trajectory.prompt, &trajectory.response)?;
    let token_lp: Vec<f64> = logits
        .iter()
        .zip(&trajectory.response)
        .map(|(row, &y)| log_softmax(row)[y as usize])
        .collect();
    Ok(match level {
        Level::Token => token_lp.iter().map(|&l| clamped_exp(l).0).collect(),
        Level::Sequence => {
            let p = clamped_exp(token_lp.iter().sum()).0;
            vec![p; token_lp.len()]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitReward {
    pub value: f64,
    /// Set when `p_θ(τ)` hit the exp(-700) floor.
    pub overflow: bool,
}

/// `1 / p_θ(τ)`: the inverse-probability reward SFT implicitly optimises.
pub fn implicit_sft_reward(policy: &dyn Policy, trajectory: &Trajectory) -> Result<ImplicitReward> {
    if !trajectory.is_positive() {
        return Err(Error::Contract(
            "implicit SFT reward is defined on D⁺ only".into(),
        ));
    }
    let lp = crate::policy::log_prob(policy, trajectory)?.sequence;
    let (p, overflow) = clamped_exp(lp);
    Ok(ImplicitReward {
        value: 1.0 / p,
        overflow,
    })
}

/// Policy probabilities at a state, mostly for diagnostics and tests.
pub fn state_distribution(policy: &dyn Policy, state: &State) -> Result<Vec<f64>> {
    Ok(softmax(
        &policy.next_token_logits(&state.prompt, &state.prefix)?,
    ))
}
