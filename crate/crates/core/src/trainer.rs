//! Seeded fine-tuning loops and the drift comparison built on them.
//!
//! A run is a pure function of `(config, corpus, init)`: batch order comes
//! from a per-run ChaCha stream, losses are reduced in a fixed order, and
//! the metrics stream is bit-identical across repeats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{weight_metrics, Moments};
use crate::corpus::{estimate_c_ref, filter_positive, Corpus, EstimateOptions, Trajectory};
use crate::error::{DivergenceReport, Error, Result};
use crate::objectives::{
    kl_divergence, objective_loss, token_weights, visited_states, KlConfig, KlDirection, Level,
    Objective,
};
use crate::policy::{
    clone_frozen, sequence_log_prob, Policy, TrainablePolicy, DEFAULT_ENUMERATION_CAP,
    LOG_PROB_FLOOR,
};

pub const METRICS_HEADER: &str = "step,loss,kl_from_base,var_p,ess,b_sft,b_dft,gap,eval_logprob";

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent: `θ ← θ − lr·g`.
    Sgd,
    /// Adaptive moments with decoupled weight decay.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default = "default_level")]
    pub level: Level,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_direction")]
    pub kl_direction: KlDirection,
    pub lr: f64,
    #[serde(default)]
    pub warmup_ratio: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
}

fn default_level() -> Level {
    Level::Token
}
fn default_direction() -> KlDirection {
    KlDirection::Reverse
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}
fn default_eval_every() -> usize {
    10
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_holdout() -> f64 {
    0.1
}
fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}

impl TrainConfig {
    pub fn new(objective: Objective, lr: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            objective,
            level: default_level(),
            lambda: 0.0,
            kl_direction: default_direction(),
            lr,
            warmup_ratio: 0.0,
            schedule: Schedule::Constant,
            batch_size,
            epochs,
            seed: 0,
            eval_every: default_eval_every(),
            optimizer: default_optimizer(),
            weight_decay: 0.0,
            holdout_fraction: default_holdout(),
            enumeration_cap: default_cap(),
        }
    }

    /// Validate, and zero `lambda` for the unanchored objectives.
    pub fn validated(&self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive".into());
        }
        let mut c = self.clone();
        if !c.objective.uses_kl() {
            c.lambda = 0.0;
        }
        Ok(c)
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_ratio * total as f64).floor() as usize
    }
}

/// Learning rate at `step` of `total`: linear warmup from 0 over
/// `floor(warmup_ratio·total)` steps, then constant or cosine decay to 0.
pub fn lr_at(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = config.warmup_steps(total);
    if step < warmup {
        return config.lr * step as f64 / warmup as f64;
    }
    match config.schedule {
        Schedule::Constant => config.lr,
        Schedule::Cosine => {
            let span = total.saturating_sub(warmup);
            if span == 0 {
                return config.lr;
            }
            let progress = (step - warmup) as f64 / span as f64;
            config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub loss: f64,
    pub kl_from_base: f64,
    pub var_p: f64,
    pub ess: f64,
    pub b_sft: f64,
    pub b_dft: f64,
    pub gap: f64,
    pub eval_logprob: f64,
}

impl RunRecord {
    fn values(&self) -> [f64; 8] {
        [
            self.loss,
            self.kl_from_base,
            self.var_p,
            self.ess,
            self.b_sft,
            self.b_dft,
            self.gap,
            self.eval_logprob,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Everything needed to replay a run's data order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Indices into D⁺ used for training, in D⁺ order.
    pub train_indices: Vec<usize>,
    /// Indices into D⁺ withheld for evaluation.
    pub holdout_indices: Vec<usize>,
    /// Per-epoch permutation of positions in `train_indices`.
    pub epoch_orders: Vec<Vec<usize>>,
    pub c_ref: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<P> {
    pub policy: P,
    pub records: Vec<RunRecord>,
    pub header: RunHeader,
}

enum Optimizer {
    Sgd,
    Adamw {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
        decay: f64,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize, decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adamw => Self::Adamw {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
                decay,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Self::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Self::Adamw { m, v, t, decay } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t);
                for i in 0..params.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    params[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + *decay * params[i]);
                }
            }
        }
    }
}

struct Evaluator<'a> {
    config: &'a TrainConfig,
    train: &'a [Trajectory],
    holdout: &'a [Trajectory],
    base: &'a dyn Policy,
    c_ref: f64,
}

impl Evaluator<'_> {
    fn record(&self, policy: &dyn Policy, step: usize) -> Result<RunRecord> {
        let kl = self.config.objective.uses_kl().then_some(KlConfig {
            direction: self.config.kl_direction,
            lambda: self.config.lambda,
            anchor: self.base,
        });
        let report = objective_loss(
            policy,
            self.train,
            self.config.objective,
            self.config.level,
            kl.as_ref(),
        )?;

        // drift is always measured on the DFT weights at the configured level
        let mut weights = Vec::new();
        for t in self.train {
            let w = token_weights(policy, t, self.config.level)?;
            match self.config.level {
                Level::Sequence => weights.push(w[0]),
                Level::Token => weights.extend(w),
            }
        }
        let kl_from_base = kl_divergence(
            policy,
            self.base,
            &visited_states(self.train),
            KlDirection::Reverse,
        )?;
        let drift = weight_metrics(&weights, kl_from_base);

        let log_x = self
            .train
            .iter()
            .map(|t| Ok(sequence_log_prob(policy, &t.prompt, &t.response)?.max(LOG_PROB_FLOOR)))
            .collect::<Result<Vec<_>>>()?;
        let m = Moments::from_log_values(&log_x);
        let b_sft = m.b_sft(self.c_ref);
        let b_dft = m.b_dft(self.c_ref);

        let eval_set = if self.holdout.is_empty() {
            self.train
        } else {
            self.holdout
        };
        let mut eval_sum = 0.0;
        for t in eval_set {
            eval_sum += sequence_log_prob(policy, &t.prompt, &t.response)?;
        }
        Ok(RunRecord {
            step,
            loss: report.loss,
            kl_from_base: drift.kl_from_base,
            var_p: drift.var_p,
            ess: drift.ess,
            b_sft,
            b_dft,
            gap: b_dft - b_sft,
            eval_logprob: eval_sum / eval_set.len() as f64,
        })
    }
}

fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_hold = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f40_17d0_u64);
    order.shuffle(&mut rng);
    let mut hold: Vec<usize> = order[..n_hold].to_vec();
    let mut train: Vec<usize> = order[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

fn divergence<P: Policy>(step: usize, reason: String, last: &P, records: &[RunRecord]) -> Error {
    Error::Divergence(Box::new(DivergenceReport {
        step,
        reason,
        last_valid_params: last.params().to_vec(),
        records: records.to_vec(),
    }))
}

/// Fine-tune `init` on the positive records of `corpus`.
///
/// The KL anchor (and the base for `kl_from_base`) is a frozen snapshot of
/// `init`. A record is emitted at step 0, every `eval_every` updates, and
/// after the final update.
pub fn train<P>(config: &TrainConfig, corpus: &Corpus, init: &P) -> Result<TrainOutput<P>>
where
    P: TrainablePolicy + Clone + 'static,
{
    let config = config.validated()?;
    let positives = filter_positive(corpus);
    if positives.is_empty() {
        return Err(Error::Contract("D⁺ is empty; nothing to train on".into()));
    }
    for t in &positives.items {
        t.validate(init.vocab_size())?;
    }
    let (train_ix, hold_ix) = split_indices(positives.len(), config.holdout_fraction, config.seed);
    if train_ix.is_empty() {
        return Err(Error::Config(
            "holdout_fraction leaves no training records".into(),
        ));
    }
    let train_set: Vec<Trajectory> = train_ix
        .iter()
        .map(|&i| positives.items[i].clone())
        .collect();
    let holdout: Vec<Trajectory> = hold_ix
        .iter()
        .map(|&i| positives.items[i].clone())
        .collect();

    let base = clone_frozen(init);
    let c_ref = estimate_c_ref(
        corpus,
        &base,
        &EstimateOptions {
            enumeration_cap: config.enumeration_cap,
            mc_samples: 10_000,
            seed: config.seed,
        },
    )?
    .value;

    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let epoch_orders: Vec<Vec<usize>> = (0..config.epochs)
        .map(|_| {
            let mut o: Vec<usize> = (0..train_set.len()).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();

    let eval = Evaluator {
        config: &config,
        train: &train_set,
        holdout: &holdout,
        base: &base,
        c_ref,
    };
    let kl = config.objective.uses_kl().then_some(KlConfig {
        direction: config.kl_direction,
        lambda: config.lambda,
        anchor: &base,
    });

    let mut policy = init.clone();
    let mut optimizer =
        Optimizer::new(config.optimizer, policy.params().len(), config.weight_decay);
    let mut records = Vec::new();
    let first = eval.record(&policy, 0)?;
    if !first.is_finite() {
        return Err(divergence(
            0,
            "initial metrics are not finite".into(),
            &policy,
            &records,
        ));
    }
    records.push(first);

    let mut step = 0usize;
    for order in &epoch_orders {
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Trajectory> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let report =
                objective_loss(&policy, &batch, config.objective, config.level, kl.as_ref())?;
            if !report.loss.is_finite() {
                return Err(divergence(
                    step,
                    format!("loss is {}", report.loss),
                    &policy,
                    &records,
                ));
            }
            if let Some(i) = report.grad.iter().position(|g| !g.is_finite()) {
                return Err(divergence(
                    step,
                    format!("gradient component {i} is {}", report.grad[i]),
                    &policy,
                    &records,
                ));
            }
            let before = policy.params().to_vec();
            optimizer.step(
                policy.params_mut(),
                &report.grad,
                lr_at(&config, step, total),
            );
            step += 1;

            if step.is_multiple_of(config.eval_every) || step == total {
                let rec = eval.record(&policy, step)?;
                if !rec.is_finite() || policy.params().iter().any(|p| !p.is_finite()) {
                    policy.params_mut().copy_from_slice(&before);
                    return Err(divergence(
                        step,
                        "metrics became non-finite".into(),
                        &policy,
                        &records,
                    ));
                }
                records.push(rec);
            }
        }
    }

    Ok(TrainOutput {
        policy,
        records,
        header: RunHeader {
            total_steps: total,
            warmup_steps: config.warmup_steps(total),
            train_indices: train_ix,
            holdout_indices: hold_ix,
            epoch_orders,
            c_ref,
        },
    })
}

/// Serialize records as the comma-separated metrics file.
pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.step);
        for v in r.values() {
            // Debug formatting is the shortest representation that round-trips
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => {
            return Err(err(
                1,
                format!("expected header {METRICS_HEADER:?}, found {other:?}"),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(err(
                line_no,
                format!("expected 9 fields, found {}", fields.len()),
            ));
        }
        let step = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| err(line_no, format!("step: {e}")))?;
        let mut v = [0.0; 8];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .trim()
                .parse::<f64>()
                .map_err(|e| err(line_no, format!("{f:?}: {e}")))?;
        }
        out.push(RunRecord {
            step,
            loss: v[0],
            kl_from_base: v[1],
            var_p: v[2],
            ess: v[3],
            b_sft: v[4],
            b_dft: v[5],
            gap: v[6],
            eval_logprob: v[7],
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunRecord>> {
    parse_metrics_csv(&fs::read_to_string(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub final_kl: f64,
    pub max_var_p: f64,
    pub final_ess: f64,
    pub final_eval_logprob: f64,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub runs: Vec<RunSummary>,
}

impl DriftReport {
    /// Summaries of aligned runs. All runs must share the same step grid.
    pub fn from_runs(runs: Vec<(String, Vec<RunRecord>)>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Contract(
                "drift report needs at least one run".into(),
            ));
        }
        let grid: Vec<usize> = runs[0].1.iter().map(|r| r.step).collect();
        let mut out = Vec::with_capacity(runs.len());
        for (label, records) in runs {
            let steps: Vec<usize> = records.iter().map(|r| r.step).collect();
            if steps != grid {
                return Err(Error::Contract(format!(
                    "run {label:?} has step grid {steps:?}, expected {grid:?}"
                )));
            }
            let last = *records
                .last()
                .ok_or_else(|| Error::Contract(format!("run {label:?} has no records")))?;
            out.push(RunSummary {
                label,
                final_kl: last.kl_from_base,
                max_var_p: records
                    .iter()
                    .map(|r| r.var_p)
                    .fold(f64::NEG_INFINITY, f64::max),
                final_ess: last.ess,
                final_eval_logprob: last.eval_logprob,
                records,
            });
        }
        Ok(Self { runs: out })
    }

    /// Label of the run with the lowest final KL-from-base.
    pub fn lowest_final_kl(&self) -> &str {
        self.runs
            .iter()
            .min_by(|a, b| a.final_kl.total_cmp(&b.final_kl))
            .map(|r| r.label.as_str())
            .unwrap_or_default()
    }

    /// Long-format rows `(run, step, metric, value)`.
    pub fn long_format(&self) -> String {
        let mut out = String::from("run,step,metric,value\n");
        for run in &self.runs {
            for r in &run.records {
                for (name, v) in METRICS_HEADER.split(',').skip(1).zip(r.values()) {
                    let _ = writeln!(out, "{},{},{},{:?}", run.label, r.step, name, v);
                }
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>14} {:>10} {:>16}",
            "run", "final_kl", "max_var_p", "final_ess", "final_eval_lp"
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<16} {:>14.6e} {:>14.6e} {:>10.4} {:>16.6}",
                r.label, r.final_kl, r.max_var_p, r.final_ess, r.final_eval_logprob
            );
        }
        if self.runs.len() > 1 {
            let _ = writeln!(out, "lowest final KL from base: {}", self.lowest_final_kl());
        }
        out
    }
}

/// Train every config from the same base and compare the runs.
///
/// Configs must share seed, learning rate and epoch count (they may differ
/// in objective, λ and level), and must produce the same step grid.
pub fn drift_experiment<P>(
    corpus: &Corpus,
    base: &P,
    configs: &[(String, TrainConfig)],
) -> Result<DriftReport>
where
    P: TrainablePolicy + Clone + 'static,
{
    let Some((_, first)) = configs.first() else {
        return Err(Error::Contract(
            "drift experiment needs at least one config".into(),
        ));
    };
    for (label, c) in configs {
        if c.seed != first.seed
            || c.lr != first.lr
            || c.epochs != first.epochs
            || c.batch_size != first.batch_size
        {
            return Err(Error::Contract(format!(
                "config {label:?} differs from the first in seed, lr, epochs or batch size"
            )));
        }
    }
    let mut runs = Vec::with_capacity(configs.len());
    for (label, c) in configs {
        let out = train(c, corpus, base)?;
        runs.push((label.clone(), out.records));
    }
    DriftReport::from_runs(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{TabularConfig, TabularPolicy};

    fn cfg() -> TrainConfig {
        TrainConfig {
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            ..TrainConfig::new(Objective::Sft, 0.4, 4, 10)
        }
    }

    #[test]
    fn lr_schedule_landmarks() {
        let c = cfg();
        let total = 100;
        assert_eq!(c.warmup_steps(total), 10);
        assert_eq!(lr_at(&c, 0, total), 0.0);
        assert_eq!(lr_at(&c, 5, total), 0.2);
        assert_eq!(lr_at(&c, 10, total), 0.4);
        assert!(lr_at(&c, total, total).abs() < 1e-15);
        assert!((lr_at(&c, 55, total) - 0.2).abs() < 1e-15);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            ..cfg()
        };
        assert_eq!(lr_at(&flat, 80, total), 0.4);
        let no_warm = TrainConfig {
            warmup_ratio: 0.0,
            ..cfg()
        };
        assert_eq!(lr_at(&no_warm, 0, total), 0.4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            warmup_ratio: 1.0,
            ..cfg()
        }
        .validated()
        .is_err());
        assert!(TrainConfig { lr: -1.0, ..cfg() }.validated().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg()
        }
        .validated()
        .is_err());
        assert!(TrainConfig {
            lambda: f64::NAN,
            ..cfg()
        }
        .validated()
        .is_err());
        let forced = TrainConfig {
            lambda: 0.3,
            ..cfg()
        }
        .validated()
        .unwrap();
        assert_eq!(forced.lambda, 0.0);
        let kept = TrainConfig {
            objective: Objective::Asft,
            lambda: 0.3,
            ..cfg()
        }
        .validated()
        .unwrap();
        assert_eq!(kept.lambda, 0.3);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (tr, ho) = split_indices(20, 0.1, 3);
        assert_eq!(ho.len(), 2);
        assert_eq!(tr.len(), 18);
        assert!(ho.iter().all(|h| !tr.contains(h)));
        assert_eq!(split_indices(20, 0.1, 3), (tr, ho));
        assert_eq!(split_indices(5, 0.1, 3).1.len(), 0);
    }

    #[test]
    fn metrics_csv_round_trips() {
        let recs = vec![
            RunRecord {
                step: 0,
                loss: 1.0 / 3.0,
                kl_from_base: 0.0,
                var_p: 1e-300,
                ess: 7.0,
                b_sft: -1.5,
                b_dft: -1.25,
                gap: 0.25,
                eval_logprob: -2.0_f64.sqrt(),
            },
            RunRecord {
                step: 10,
                loss: f64::MIN_POSITIVE,
                kl_from_base: 123456789.123,
                var_p: 0.1,
                ess: 1.0,
                b_sft: -0.0,
                b_dft: 0.0,
                gap: 0.0,
                eval_logprob: -1e-17,
            },
        ];
        let text = metrics_csv(&recs);
        assert!(text.starts_with(METRICS_HEADER));
        let back = parse_metrics_csv(&text, Path::new("m.csv")).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            let x: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
            assert_eq!(a.step, b.step);
        }
    }

    #[test]
    fn corrupt_metrics_row_named() {
        let text = format!("{METRICS_HEADER}\n0,1,2,3,4,5,6,7,8\n5,1,2,oops,4,5,6,7,8\n");
        match parse_metrics_csv(&text, Path::new("m.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_metrics_csv("a,b\n", Path::new("m.csv")).is_err());
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let corpus =
            Corpus::from_trajectories(vec![Trajectory::new(vec![], vec![0], 0).unwrap()], 2)
                .unwrap();
        let pol = TabularPolicy::uniform(TabularConfig::new(2, 1, 4)).unwrap();
        assert!(matches!(
            train(&cfg(), &corpus, &pol),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_last_valid_params() {
        let corpus = Corpus::from_trajectories(
            vec![
                Trajectory::positive(vec![], vec![0]).unwrap(),
                Trajectory::positive(vec![], vec![1]).unwrap(),
            ],
            2,
        )
        .unwrap();
        let pol = TabularPolicy::uniform(TabularConfig::new(2, 0, 4)).unwrap();
        // decoupled decay with lr·decay = 10 flips and amplifies the weights every step
        let c = TrainConfig {
            lr: 1e100,
            weight_decay: 1e-99,
            optimizer: OptimizerKind::Adamw,
            holdout_fraction: 0.0,
            eval_every: 1,
            ..TrainConfig::new(Objective::Sft, 1.0, 1, 500)
        };
        match train(&c, &corpus, &pol) {
            Err(Error::Divergence(rep)) => {
                assert!(rep.last_valid_params.iter().all(|p| p.is_finite()));
                assert!(!rep.records.is_empty());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.records)),
        }
    }

    #[test]
    fn drift_report_checks_grids() {
        let r = |s| RunRecord {
            step: s,
            loss: 0.0,
            kl_from_base: s as f64,
            var_p: 0.0,
            ess: 1.0,
            b_sft: 0.0,
            b_dft: 0.0,
            gap: 0.0,
            eval_logprob: 0.0,
        };
        let ok = DriftReport::from_runs(vec![
            ("a".into(), vec![r(0), r(5)]),
            ("b".into(), vec![r(0), r(5)]),
        ])
        .unwrap();
        assert_eq!(ok.runs[0].final_kl, 5.0);
        assert!(ok.long_format().lines().count() == 1 + 2 * 2 * 8);
        assert!(DriftReport::from_runs(vec![
            ("a".into(), vec![r(0), r(5)]),
            ("b".into(), vec![r(0)])
        ])
        .is_err());
        let single = DriftReport::from_runs(vec![("a".into(), vec![r(0), r(5)])]).unwrap();
        assert!(!single.summary_text().contains("lowest"));
    }
}
