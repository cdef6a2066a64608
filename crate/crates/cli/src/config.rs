//! The declarative run config.
//!
//! One TOML file per run. Every section rejects unknown keys, and relative
//! paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use asft::corpus::{read_records, sidecar_path, Corpus, TokenizerKind, Vocab};
use asft::objectives::{KlDirection, Level, Objective};
use asft::policy::{load_checkpoint, AnyPolicy, PolicyConfig, DEFAULT_ENUMERATION_CAP};
use asft::trainer::TrainConfig;
use asft::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub init: PolicySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub tokenizer: TokenizerKind,
    pub vocab_size: usize,
    /// Vocabulary file; defaults to `<path>.vocab`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

/// Where a policy's parameters come from. Exactly one of the three keys;
/// an empty section means seed 0.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    /// Policy under evaluation; defaults to `[init]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySource>,
    /// Reference policy for c_ref; defaults to `[init]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PolicySource>,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            policy: None,
            reference: None,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_objectives")]
    pub objectives: Vec<Objective>,
    #[serde(default = "default_levels")]
    pub levels: Vec<Level>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_direction")]
    pub kl_direction: KlDirection,
    /// Finite-difference step; defaults depend on the policy kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Relative-error tolerance; defaults depend on the policy kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Number of D⁺ items in the checked batch.
    #[serde(default = "default_gc_batch")]
    pub batch_size: usize,
    /// Check at most this many parameters, evenly strided. 0 checks all.
    #[serde(default)]
    pub max_coords: usize,
    /// Anchor for the KL term; defaults to `[init]` with its seed plus one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<PolicySource>,
    /// Scale the analytic gradient by 1.1 before comparing.
    #[serde(default)]
    pub inject_fault: bool,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        toml::from_str("").expect("all gradcheck keys have defaults")
    }
}

fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}
fn default_objectives() -> Vec<Objective> {
    vec![Objective::Sft, Objective::Dft, Objective::Asft]
}
fn default_levels() -> Vec<Level> {
    vec![Level::Token, Level::Sequence]
}
fn default_lambda() -> f64 {
    0.05
}
fn default_direction() -> KlDirection {
    KlDirection::Reverse
}
fn default_gc_batch() -> usize {
    8
}

impl ExperimentConfig {
    /// Parse `path` and resolve every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve(&base);
        if cfg.policy.vocab_size() != cfg.corpus.vocab_size {
            return Err(Error::Config(format!(
                "policy vocab_size {} differs from corpus vocab_size {}",
                cfg.policy.vocab_size(),
                cfg.corpus.vocab_size
            )));
        }
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.path);
        if let Some(v) = &mut self.corpus.vocab {
            fix(v);
        }
        if let Some(d) = &mut self.output.dir {
            fix(d);
        }
        let mut sources: Vec<&mut PolicySource> = vec![&mut self.init];
        if let Some(b) = &mut self.bounds {
            sources.extend(b.policy.as_mut());
            sources.extend(b.reference.as_mut());
        }
        if let Some(g) = &mut self.gradcheck {
            sources.extend(g.anchor.as_mut());
        }
        for s in sources {
            if let Some(c) = &mut s.checkpoint {
                fix(c);
            }
        }
    }

    fn sidecar(&self) -> PathBuf {
        self.corpus
            .vocab
            .clone()
            .unwrap_or_else(|| sidecar_path(&self.corpus.path))
    }

    /// True when the whitespace vocabulary is built from the corpus rather
    /// than read from a file.
    pub fn vocab_is_built(&self) -> bool {
        self.corpus.tokenizer == TokenizerKind::Whitespace && !self.sidecar().exists()
    }

    /// Load the corpus without writing anything.
    pub fn load_corpus(&self) -> Result<Corpus, Error> {
        let records = read_records(&self.corpus.path)?;
        let sidecar = self.sidecar();
        let vocab = if sidecar.exists() {
            Vocab::read(&sidecar)?
        } else if self.corpus.tokenizer == TokenizerKind::Whitespace {
            Vocab::build_whitespace(&records)
        } else {
            return Err(Error::Config(format!(
                "char tokenizer needs an alphabet file at {}",
                sidecar.display()
            )));
        };
        Corpus::from_records(
            &records,
            self.corpus.tokenizer,
            vocab,
            self.corpus.vocab_size,
        )
    }

    pub fn instantiate(&self, source: &PolicySource) -> Result<AnyPolicy, Error> {
        let set = [
            source.seed.is_some(),
            source.params.is_some(),
            source.checkpoint.is_some(),
        ];
        if set.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config(
                "a policy source takes only one of seed, params, checkpoint".into(),
            ));
        }
        let policy = if let Some(p) = &source.params {
            AnyPolicy::from_params(&self.policy, p.clone())?
        } else if let Some(c) = &source.checkpoint {
            let p = load_checkpoint(c)?;
            if p.config() != self.policy {
                return Err(Error::Config(format!(
                    "checkpoint {} holds a different policy config than [policy]",
                    c.display()
                )));
            }
            p
        } else {
            AnyPolicy::init(&self.policy, source.seed.unwrap_or(0))?
        };
        Ok(policy)
    }
}
