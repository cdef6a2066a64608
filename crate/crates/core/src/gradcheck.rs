//! Central finite-difference checks for the loss gradients.
//!
//! The numeric side only ever evaluates losses through forward
//! log-probabilities, never through `backprop_response`. For DFT/ASFT the
//! differentiated function is the frozen-weight surrogate: the weights are
//! read once at the base point and held fixed while parameters move.

use serde::Serialize;

use crate::corpus::Trajectory;
use crate::error::{Error, Result};
use crate::objectives::{
    kl_divergence, objective_loss, visited_states, KlConfig, KlDirection, Level, Objective,
};
use crate::policy::{log_prob, Policy, TrainablePolicy};

/// Denominator floor for relative errors. Central differences at ε = 1e-5
/// carry roughly 1e-11 of roundoff, so components smaller than this are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub const TABULAR_EPS: f64 = 1e-5;
pub const TABULAR_TOL: f64 = 1e-6;
pub const NEURAL_EPS: f64 = 1e-4;
pub const NEURAL_TOL: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `params` along each coordinate in `indices`.
pub fn central_difference<P, F>(
    policy: &P,
    indices: &[usize],
    eps: f64,
    mut f: F,
) -> Result<Vec<f64>>
where
    P: TrainablePolicy + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    let mut probe = policy.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.params_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.params_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

#[derive(Clone, Copy)]
pub struct Anchor<'a> {
    pub policy: &'a dyn Policy,
    pub lambda: f64,
    pub direction: KlDirection,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub label: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates to check; `None` checks every parameter.
    pub indices: Option<Vec<usize>>,
    /// Multiply the analytic gradient by 1.1 before comparing (negative control).
    pub inject_fault: bool,
}

impl GradCheckOptions {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            indices: None,
            inject_fault: false,
        }
    }
}

/// Value of the stop-gradient surrogate of `objective` at `policy`, with
/// token weights fixed to `weights` (ignored for SFT).
fn surrogate_value(
    policy: &dyn Policy,
    batch: &[Trajectory],
    weights: Option<&[Vec<f64>]>,
    anchor: Option<&Anchor<'_>>,
) -> Result<f64> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let lp = log_prob(policy, t)?;
        total -= match weights {
            None => lp.sequence,
            Some(w) => w[i]
                .iter()
                .zip(&lp.per_token)
                .map(|(w, l)| w * l)
                .sum::<f64>(),
        };
    }
    let mut value = total / n;
    if let Some(a) = anchor.filter(|a| a.lambda != 0.0) {
        value += a.lambda * kl_divergence(policy, a.policy, &visited_states(batch), a.direction)?;
    }
    Ok(value)
}

/// Compare the analytic gradient of `objective` with central differences
/// of its frozen-weight surrogate.
pub fn check_objective<P>(
    policy: &P,
    batch: &[Trajectory],
    objective: Objective,
    level: Level,
    anchor: Option<Anchor<'_>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckResult>
where
    P: TrainablePolicy + Clone,
{
    if objective.uses_kl() && anchor.is_none() {
        return Err(Error::Contract("anchored objective needs an anchor".into()));
    }
    let kl = anchor.map(|a| KlConfig {
        direction: a.direction,
        lambda: a.lambda,
        anchor: a.policy,
    });
    let report = objective_loss(policy, batch, objective, level, kl.as_ref())?;
    let weights = report.per_token_weight.clone();
    let anchor_ref = if objective.uses_kl() {
        anchor.as_ref()
    } else {
        None
    };

    let all: Vec<usize>;
    let indices = match &opts.indices {
        Some(ix) => ix.as_slice(),
        None => {
            all = (0..policy.params().len()).collect();
            &all
        }
    };
    let numeric = central_difference(policy, indices, opts.eps, |p| {
        surrogate_value(p, batch, weights.as_deref(), anchor_ref)
    })?;

    let scale = if opts.inject_fault { 1.1 } else { 1.0 };
    let mut worst = (0.0, 0usize, 0.0, 0.0);
    for (&i, &num) in indices.iter().zip(&numeric) {
        let ana = report.grad[i] * scale;
        let err = relative_error(ana, num);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i, ana, num);
        }
    }
    Ok(GradCheckResult {
        label: label(objective, level),
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic: worst.2,
        numeric: worst.3,
        coords_checked: indices.len(),
    })
}

fn label(objective: Objective, level: Level) -> String {
    match objective {
        Objective::Sft => "sft".into(),
        Objective::SftKl => "sft_kl".into(),
        Objective::Dft => format!("dft/{}", level_name(level)),
        Objective::Asft => format!("asft/{}", level_name(level)),
    }
}

fn level_name(level: Level) -> &'static str {
    match level {
        Level::Sequence => "sequence",
        Level::Token => "token",
    }
}

/// Numeric gradient of the DFT loss with the weights *not* frozen, i.e. of
/// `θ ↦ dft_loss(θ).loss`. Used as the negative control for stop-gradient.
pub fn fully_differentiated_dft_gradient<P>(
    policy: &P,
    batch: &[Trajectory],
    level: Level,
    eps: f64,
) -> Result<Vec<f64>>
where
    P: TrainablePolicy + Clone,
{
    let indices: Vec<usize> = (0..policy.params().len()).collect();
    central_difference(policy, &indices, eps, |p| {
        Ok(crate::objectives::dft_loss(p, batch, level)?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{TabularConfig, TabularPolicy};

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_quadratic() {
        let pol = TabularPolicy::from_params(TabularConfig::new(2, 0, 4), vec![0.3, -1.2]).unwrap();
        let g = central_difference(&pol, &[0, 1], 1e-4, |p| {
            Ok(p.params().iter().map(|x| x * x).sum::<f64>())
        })
        .unwrap();
        assert!((g[0] - 0.6).abs() < 1e-10);
        assert!((g[1] + 2.4).abs() < 1e-10);
    }

    #[test]
    fn fault_injection_is_caught() {
        let pol = TabularPolicy::random(TabularConfig::new(3, 1, 8), 2).unwrap();
        let batch = [Trajectory::positive(vec![0], vec![1, 2]).unwrap()];
        let mut opts = GradCheckOptions::new(TABULAR_EPS);
        let ok = check_objective(&pol, &batch, Objective::Sft, Level::Token, None, &opts).unwrap();
        assert!(ok.max_rel_error < TABULAR_TOL, "{ok:?}");
        opts.inject_fault = true;
        let bad = check_objective(&pol, &batch, Objective::Sft, Level::Token, None, &opts).unwrap();
        assert!(bad.max_rel_error > 0.05);
    }
}
