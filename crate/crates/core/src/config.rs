//! Run configuration: a single JSON document with `corpus`, `model`, `stm`,
//! and `eval` sections. Unknown keys are rejected so hyperparameter typos
//! fail loudly instead of silently using defaults.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Result, StmError};

/// Reader architecture settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub contextualizer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 32, contextualizer: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(StmError::Config("model.embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Self-training loop and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StmConfig {
    /// Weight of the evidence loss in the combined objective.
    pub eta: f64,
    /// Largest admissible answer loss for pseudo-labeling.
    pub delta: f64,
    /// Largest admissible evidence loss for pseudo-labeling.
    pub epsilon: f64,
    /// Instances moved per iteration; `None` derives one tenth of the
    /// initial unlabeled pool, rounded up.
    pub label_budget: Option<usize>,
    /// Evidence sentences per instance (clamped per document).
    pub evidence_k: usize,
    pub iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub master_seed: u64,
    /// Fraction of the corpus used for training; the rest is the
    /// development split.
    pub train_fraction: f64,
}

impl Default for StmConfig {
    fn default() -> Self {
        Self {
            eta: 0.8,
            delta: 0.9,
            epsilon: 0.6,
            label_budget: None,
            evidence_k: 1,
            iterations: 3,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            master_seed: 7,
            train_fraction: 0.8,
        }
    }
}

impl StmConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(StmError::Config(format!("stm.{msg}")))
            }
        };
        check(self.eta >= 0.0, "eta must be >= 0")?;
        check(self.delta > 0.0, "delta must be > 0")?;
        check(self.epsilon > 0.0, "epsilon must be > 0")?;
        check(self.evidence_k >= 1, "evidence_k must be >= 1")?;
        check(self.iterations >= 1, "iterations must be >= 1")?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive and finite",
        )?;
        check(
            self.train_fraction > 0.0 && self.train_fraction <= 1.0,
            "train_fraction must be in (0, 1]",
        )
    }

    /// Per-iteration label budget for an initial unlabeled pool of
    /// `initial_unlabeled` instances.
    pub fn budget(&self, initial_unlabeled: usize) -> usize {
        self.label_budget.unwrap_or(initial_unlabeled.div_ceil(10))
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cutoffs for evidence precision/recall.
    pub pr_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pr_ks: vec![1, 2, 3] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pr_ks.is_empty() || self.pr_ks.contains(&0) {
            return Err(StmError::Config("eval.pr_ks must be non-empty positive cutoffs".into()));
        }
        Ok(())
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub stm: StmConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            StmError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.stm.validate()?;
        self.eval.validate()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
