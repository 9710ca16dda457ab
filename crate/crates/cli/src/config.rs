use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strafe_core::cohort::SyntheticConfig;
use strafe_core::embeddings::SkipGramConfig;
use strafe_core::model::{ModelConfig, TrainParams, Variant};
use strafe_core::StrafeError;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Every artifact is written below this directory.
    pub out_dir: PathBuf,
    /// Cohort file to read; defaults to `<out_dir>/cohort.jsonl`.
    pub cohort: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("strafe-out"),
            cohort: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_fraction: 0.8,
            split_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Fixed-time horizons in months; values past T_max are clipped to it.
    pub horizons: Vec<u32>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Count tied predictions as half-concordant.
    pub harrell_ties: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            horizons: vec![6, 12, 24],
            bootstrap_resamples: 1000,
            bootstrap_seed: 2024,
            harrell_ties: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Edges with aggregate weight above this are exported; 0 keeps all.
    pub edge_threshold: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { edge_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the seed of every section.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub embeddings: SkipGramConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub evaluate: EvaluateConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::config(format!("invalid config: {e}")))
    }

    /// Applies command-line overrides, then validates the whole document.
    pub fn finish(mut self, seed: Option<u64>, variant: Option<Variant>) -> Result<Self, Failure> {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.synthetic.seed = s;
            self.embeddings.seed = s;
            self.model.seed = s;
            self.data.split_seed = s;
            self.evaluate.bootstrap_seed = s;
        }
        if let Some(v) = variant {
            self.model.variant = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.synthetic.validate()?;
        self.embeddings.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.synthetic.t_max != self.model.t_max {
            return Err(Failure::config(format!(
                "synthetic.t_max ({}) differs from model.t_max ({})",
                self.synthetic.t_max, self.model.t_max
            )));
        }
        if self.embeddings.dim != self.model.d_e {
            return Err(Failure::config(format!(
                "embeddings.dim ({}) differs from model.d_e ({})",
                self.embeddings.dim, self.model.d_e
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Failure::config("data.train_fraction must lie strictly between 0 and 1"));
        }
        if self.evaluate.horizons.is_empty() || self.evaluate.horizons.contains(&0) {
            return Err(Failure::config("evaluate.horizons must be non-empty and positive"));
        }
        if !(0.0..=1.0).contains(&self.explain.edge_threshold) {
            return Err(Failure::config("explain.edge_threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.paths.cohort.clone().unwrap_or_else(|| self.paths.out_dir.join("cohort.jsonl"))
    }

    /// `<name>.truth.json` next to the cohort file.
    pub fn truth_path(&self) -> PathBuf {
        truth_sidecar(&self.cohort_path())
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.paths.out_dir.join("embeddings.ckpt")
    }

    pub fn model_path(&self) -> PathBuf {
        self.paths.out_dir.join(format!("model-{}.ckpt", self.model.variant))
    }

    pub fn loss_path(&self) -> PathBuf {
        self.paths.out_dir.join(format!("loss-{}.csv", self.model.variant))
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.paths.out_dir.join(format!("eval-{}", self.model.variant))
    }

    pub fn explain_dir(&self) -> PathBuf {
        self.paths.out_dir.join(format!("explain-{}", self.model.variant))
    }

    /// Horizons clipped to T_max, deduplicated, ascending.
    pub fn horizons(&self) -> Vec<u32> {
        let mut h: Vec<u32> = self.evaluate.horizons.iter().map(|&r| r.min(self.model.t_max)).collect();
        h.sort_unstable();
        h.dedup();
        h
    }
}

pub fn truth_sidecar(cohort: &Path) -> PathBuf {
    let stem = cohort.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    cohort.with_file_name(format!("{stem}.truth.json"))
}

impl From<StrafeError> for Failure {
    fn from(e: StrafeError) -> Self {
        Failure::from_core(e)
    }
}
