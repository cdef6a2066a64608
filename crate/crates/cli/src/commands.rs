use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use asft::bounds::{verify_cov_identity, BoundReport};
use asft::corpus::{EstimateOptions, Trajectory};
use asft::gradcheck::{
    check_objective, Anchor, GradCheckOptions, NEURAL_EPS, NEURAL_TOL, TABULAR_EPS, TABULAR_TOL,
};
use asft::objectives::{Level, Objective};
use asft::policy::{save_checkpoint, AnyPolicy, Policy, PolicyConfig};
use asft::trainer::{read_metrics_csv, write_metrics_csv, DriftReport};
use asft::Error;
use serde::Serialize;

use crate::config::ExperimentConfig;

/// A failed command: the message and its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(3, message)
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Parse { .. }
            | Error::Vocabulary { .. }
            | Error::Length { .. }
            | Error::Contract(_)
            | Error::Estimation(_)
            | Error::Checkpoint(_)
            | Error::Io(_) => 3,
            Error::Divergence(_) => 4,
            Error::IdentityViolation { .. } => 5,
            Error::EnumerationCap { .. } => 7,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Writes into an output directory fail with exit code 1.
fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents)
        .map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(1, e.to_string()))?;
    write(path, text + "\n")
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::new(1, format!("cannot create {}: {e}", dir.display())))
}

fn is_finished_run(dir: &Path) -> bool {
    dir.join("metrics.csv").exists()
}

/// `--out` if given, else `[output] dir`.
fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Option<PathBuf> {
    out.or_else(|| cfg.output.dir.clone())
}

/// An auxiliary output directory: created on demand, never a finished run.
fn report_dir(dir: Option<PathBuf>) -> Result<Option<PathBuf>, Failure> {
    if let Some(d) = &dir {
        if is_finished_run(d) {
            return Err(Failure::config(format!(
                "{} holds a finished run; choose another output directory",
                d.display()
            )));
        }
        create_dir(d)?;
    }
    Ok(dir)
}

#[derive(Serialize)]
struct DivergenceFile<'a> {
    step: usize,
    reason: &'a str,
}

pub fn train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Outcome {
    let mut cfg = ExperimentConfig::load(config)?;
    let mut tc = cfg
        .train
        .clone()
        .ok_or_else(|| Failure::config("config has no [train] section"))?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    let tc = tc.validated()?;
    let dir = output_dir(&cfg, out)
        .ok_or_else(|| Failure::config("no run directory: set [output] dir or pass --out"))?;
    if is_finished_run(&dir) {
        return Err(Failure::config(format!(
            "{} already holds a finished run",
            dir.display()
        )));
    }
    cfg.train = Some(tc.clone());
    cfg.output.dir = Some(dir.clone());

    let corpus = cfg.load_corpus()?;
    if corpus.positives().next().is_none() {
        return Err(Failure::data(format!(
            "{} has no reward-1 trajectories (D⁺ is empty)",
            cfg.corpus.path.display()
        )));
    }
    let init = cfg.instantiate(&cfg.init)?;

    create_dir(&dir)?;
    if cfg.vocab_is_built() {
        let path = dir.join("vocab.txt");
        corpus
            .vocab
            .write(&path)
            .map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))?;
    }
    let snapshot = toml::to_string(&cfg).map_err(|e| Failure::new(1, e.to_string()))?;
    write(&dir.join("config.toml"), snapshot)?;
    save_ckpt(&init, &dir.join("init.ckpt"))?;

    match asft::trainer::train(&tc, &corpus, &init) {
        Ok(run) => {
            save_ckpt(&run.policy, &dir.join("final.ckpt"))?;
            write_json(&dir.join("header.json"), &run.header)?;
            write_metrics(&dir.join("metrics.csv"), &run.records)?;
            println!("{}", dir.display());
            Ok(())
        }
        Err(Error::Divergence(report)) => {
            let last = AnyPolicy::from_params(&cfg.policy, report.last_valid_params.clone())?;
            save_ckpt(&last, &dir.join("last_valid.ckpt"))?;
            write_json(
                &dir.join("divergence.json"),
                &DivergenceFile {
                    step: report.step,
                    reason: &report.reason,
                },
            )?;
            write_metrics(&dir.join("metrics.csv"), &report.records)?;
            println!("{}", dir.display());
            Err(Error::Divergence(report).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn save_ckpt(policy: &AnyPolicy, path: &Path) -> Outcome {
    save_checkpoint(policy, path)
        .map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
}

fn write_metrics(path: &Path, records: &[asft::trainer::RunRecord]) -> Outcome {
    write_metrics_csv(path, records)
        .map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
}

fn report_lines(r: &BoundReport) -> String {
    let fields: [(&str, f64); 13] = [
        ("j_exact", r.j_exact),
        ("b_sft", r.b_sft),
        ("b_dft", r.b_dft),
        ("gap", r.gap),
        ("c_ref", r.c_ref),
        ("e_x", r.e_x),
        ("e_logx", r.e_logx),
        ("e_xlogx", r.e_xlogx),
        ("cov_x_logx", r.cov_x_logx),
        ("var_x", r.var_x),
        ("b_sft_full", r.b_sft_full),
        ("b_dft_full", r.b_dft_full),
        ("identity_residual", r.identity_residual),
    ];
    let mut out = String::new();
    for (name, v) in fields {
        out += &format!("{name:<18} {v:.12e}\n");
    }
    out += &format!("{:<18} {}\n", "approximate", r.approximate);
    out
}

pub fn bounds(config: &Path, out: Option<PathBuf>) -> Outcome {
    let cfg = ExperimentConfig::load(config)?;
    let section = cfg.bounds.clone().unwrap_or_default();
    let policy = cfg.instantiate(section.policy.as_ref().unwrap_or(&cfg.init))?;
    let reference = cfg.instantiate(section.reference.as_ref().unwrap_or(&cfg.init))?;
    let corpus = cfg.load_corpus()?;
    let dir = report_dir(output_dir(&cfg, out))?;
    let opts = EstimateOptions {
        enumeration_cap: section.enumeration_cap,
        ..EstimateOptions::default()
    };
    let report = verify_cov_identity(&policy, &reference, &corpus, &opts)?;
    print!("{}", report_lines(&report));
    if let Some(d) = dir {
        write_json(&d.join("bounds.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradRow {
    objective: Objective,
    level: Option<Level>,
    coords_checked: usize,
    max_rel_error: f64,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    pass: bool,
}

#[derive(Serialize)]
struct GradTable {
    eps: f64,
    tolerance: f64,
    inject_fault: bool,
    rows: Vec<GradRow>,
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Sft => "sft",
        Objective::Dft => "dft",
        Objective::Asft => "asft",
        Objective::SftKl => "sft_kl",
    }
}

pub fn gradcheck(config: &Path, out: Option<PathBuf>) -> Outcome {
    let cfg = ExperimentConfig::load(config)?;
    let gc = cfg.gradcheck.clone().unwrap_or_default();
    let policy = cfg.instantiate(&cfg.init)?;
    let anchor = match &gc.anchor {
        Some(src) => cfg.instantiate(src)?,
        None => AnyPolicy::init(&cfg.policy, cfg.init.seed.unwrap_or(0).wrapping_add(1))?,
    };
    let corpus = cfg.load_corpus()?;
    let batch: Vec<Trajectory> = corpus.positives().take(gc.batch_size).cloned().collect();
    if batch.is_empty() {
        return Err(Failure::data(
            "gradient check needs at least one reward-1 trajectory",
        ));
    }
    let dir = report_dir(output_dir(&cfg, out))?;

    let neural = matches!(cfg.policy, PolicyConfig::Neural(_));
    let eps = gc
        .eps
        .unwrap_or(if neural { NEURAL_EPS } else { TABULAR_EPS });
    let tolerance = gc
        .tolerance
        .unwrap_or(if neural { NEURAL_TOL } else { TABULAR_TOL });
    let n = policy.params().len();
    let indices = (gc.max_coords > 0 && gc.max_coords < n)
        .then(|| (0..gc.max_coords).map(|i| i * n / gc.max_coords).collect());
    let opts = GradCheckOptions {
        eps,
        indices,
        inject_fault: gc.inject_fault,
    };

    let mut rows = Vec::new();
    for &objective in &gc.objectives {
        let levels: Vec<Option<Level>> = match objective {
            Objective::Dft | Objective::Asft => gc.levels.iter().copied().map(Some).collect(),
            Objective::Sft | Objective::SftKl => vec![None],
        };
        for level in levels {
            let a = objective.uses_kl().then_some(Anchor {
                policy: &anchor,
                lambda: gc.lambda,
                direction: gc.kl_direction,
            });
            let r = check_objective(
                &policy,
                &batch,
                objective,
                level.unwrap_or(Level::Token),
                a,
                &opts,
            )?;
            rows.push(GradRow {
                objective,
                level,
                coords_checked: r.coords_checked,
                max_rel_error: r.max_rel_error,
                worst_index: r.worst_index,
                analytic: r.analytic,
                numeric: r.numeric,
                pass: r.max_rel_error < tolerance,
            });
        }
    }

    println!(
        "{:<8} {:<9} {:>7} {:>14} {:>16} {:>16}  status",
        "loss", "level", "coords", "max_rel_err", "analytic", "numeric"
    );
    for r in &rows {
        println!(
            "{:<8} {:<9} {:>7} {:>14.3e} {:>16.8e} {:>16.8e}  {}",
            objective_name(r.objective),
            r.level.map_or("-", |l| match l {
                Level::Token => "token",
                Level::Sequence => "sequence",
            }),
            r.coords_checked,
            r.max_rel_error,
            r.analytic,
            r.numeric,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance {tolerance:e}, eps {eps:e}");
    let failed = rows.iter().filter(|r| !r.pass).count();
    let total = rows.len();
    if let Some(d) = dir {
        write_json(
            &d.join("gradcheck.json"),
            &GradTable {
                eps,
                tolerance,
                inject_fault: gc.inject_fault,
                rows,
            },
        )?;
    }
    if failed > 0 {
        return Err(Failure::new(
            6,
            format!("{failed} of {total} gradient checks exceeded tolerance {tolerance:e}"),
        ));
    }
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn drift_report(runs: &[PathBuf], out: &Path) -> Outcome {
    let labels: Vec<String> = runs.iter().map(|d| run_label(d)).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Failure::config(format!(
                "two runs share the directory name {l:?}"
            )));
        }
    }
    let loaded: Vec<Result<_, Failure>> = thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|dir| {
                s.spawn(move || {
                    let path = dir.join("metrics.csv");
                    if !path.exists() {
                        return Err(Failure::data(format!(
                            "missing metrics file {}",
                            path.display()
                        )));
                    }
                    Ok(read_metrics_csv(&path)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("reader thread panicked"))
            .collect()
    });
    let mut named = Vec::with_capacity(runs.len());
    for (label, records) in labels.into_iter().zip(loaded) {
        named.push((label, records?));
    }
    let report = DriftReport::from_runs(named)?;

    let dir = report_dir(Some(out.to_path_buf()))?.expect("output directory is set");
    let summary = report.summary_text();
    write(&dir.join("summary.txt"), &summary)?;
    write(&dir.join("drift_long.csv"), report.long_format())?;
    print!("{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use asft::error::DivergenceReport;

    #[test]
    fn library_errors_map_to_stable_exit_codes() {
        let cases = [
            (Error::Config("x".into()), 2),
            (Error::Domain("x".into()), 2),
            (
                Error::Parse {
                    path: "m.csv".into(),
                    line: 4,
                    message: "x".into(),
                },
                3,
            ),
            (
                Error::Vocabulary {
                    symbol: "x".into(),
                    context: String::new(),
                },
                3,
            ),
            (Error::Length { len: 9, max_len: 8 }, 3),
            (Error::Contract("x".into()), 3),
            (Error::Estimation("x".into()), 3),
            (Error::Checkpoint("x".into()), 3),
            (Error::Io(std::io::Error::other("x")), 3),
            (
                Error::Divergence(Box::new(DivergenceReport {
                    step: 3,
                    reason: "x".into(),
                    last_valid_params: vec![],
                    records: vec![],
                })),
                4,
            ),
            (
                Error::IdentityViolation {
                    name: "x",
                    lhs: 1.0,
                    rhs: 0.0,
                    residual: 1.0,
                },
                5,
            ),
            (
                Error::EnumerationCap {
                    vocab: 4,
                    len: 9,
                    cap: 10,
                },
                7,
            ),
        ];
        for (e, want) in cases {
            let msg = e.to_string();
            let f = Failure::from(e);
            assert_eq!(f.code(), want, "{msg}");
            assert_eq!(f.to_string(), msg);
        }
    }

    #[test]
    fn identity_violation_message_carries_the_residual() {
        let f = Failure::from(Error::IdentityViolation {
            name: "covariance identity",
            lhs: 0.2,
            rhs: 0.1,
            residual: 0.1,
        });
        assert_eq!(f.code(), 5);
        assert!(f.to_string().contains("residual=1e-1"), "{f}");
    }
}
