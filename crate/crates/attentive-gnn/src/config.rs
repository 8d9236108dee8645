//! Run configuration: one TOML document combining the dataset source,
//! model and training hyperparameters, analysis settings, output
//! directory, and master seed. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MemoryMode};
use crate::episodes::{generate_synthetic, FeatureDataset, QueryDist, Setting};
use crate::error::{Error, Result};
use crate::training::{derive_seed, SeedDomain, TrainConfig};

/// Where the feature vectors come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or "csv".
    pub source: String,
    /// CSV path (csv source only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub between_sigma: f64,
    pub within_sigma: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            path: None,
            classes: 20,
            per_class: 30,
            dim: 16,
            between_sigma: 5.0,
            within_sigma: 1.0,
        }
    }
}

impl DatasetSection {
    fn validate(&self) -> Result<()> {
        match self.source.as_str() {
            "synthetic" => {
                if self.classes == 0 {
                    return Err(Error::Config("dataset.classes must be >= 1".into()));
                }
                if self.per_class == 0 {
                    return Err(Error::Config("dataset.per_class must be >= 1".into()));
                }
                if self.dim == 0 {
                    return Err(Error::Config("dataset.dim must be >= 1".into()));
                }
                if self.between_sigma <= 0.0 || self.between_sigma.is_nan() {
                    return Err(Error::Config(format!(
                        "dataset.between_sigma must be > 0, got {}",
                        self.between_sigma
                    )));
                }
                if self.within_sigma <= 0.0 || self.within_sigma.is_nan() {
                    return Err(Error::Config(format!(
                        "dataset.within_sigma must be > 0, got {}",
                        self.within_sigma
                    )));
                }
                Ok(())
            }
            "csv" => {
                if self.path.is_none() {
                    return Err(Error::Config(
                        "dataset.path is required when dataset.source = \"csv\"".into(),
                    ));
                }
                Ok(())
            }
            other => Err(Error::Config(format!(
                "dataset.source must be \"synthetic\" or \"csv\", got {other:?}"
            ))),
        }
    }
}

/// Training keys; the master seed comes from the top level.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_tasks: usize,
    pub total_episodes: u64,
    pub lr_halving_interval: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub setting: Setting,
    pub query_dist: QueryDist,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_tasks: t.batch_tasks,
            total_episodes: t.total_episodes,
            lr_halving_interval: t.lr_halving_interval,
            eval_interval: t.eval_interval,
            eval_episodes: t.eval_episodes,
            n_way: t.n_way,
            k_shot: t.k_shot,
            queries_per_class: t.queries_per_class,
            setting: t.setting,
            query_dist: t.query_dist,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_tasks: self.batch_tasks,
            total_episodes: self.total_episodes,
            lr_halving_interval: self.lr_halving_interval,
            eval_interval: self.eval_interval,
            eval_episodes: self.eval_episodes,
            seed,
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries_per_class: self.queries_per_class,
            setting: self.setting,
            query_dist: self.query_dist,
        }
    }
}

/// Settings for the smoothing analysis command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Tasks to profile.
    pub tasks: usize,
    pub epsilon: f64,
    /// Rank for the projection loss; defaults to N (the way count).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_m: Option<usize>,
    /// Also write per-layer feature CSVs for the first task.
    pub export_features: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            tasks: 20,
            epsilon: 1e-2,
            rank_m: None,
            export_features: false,
        }
    }
}

/// The full run configuration document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: AttentionConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: default_out_dir(),
            dataset: DatasetSection::default(),
            model: AttentionConfig::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.to_train_config(self.seed).validate()?;
        if self.analysis.tasks == 0 {
            return Err(Error::Config("analysis.tasks must be >= 1".into()));
        }
        if self.analysis.epsilon <= 0.0 || self.analysis.epsilon.is_nan() {
            return Err(Error::Config("analysis.epsilon must be > 0".into()));
        }
        if self.analysis.rank_m == Some(0) {
            return Err(Error::Config("analysis.rank_m must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical serialization: parsing the output and re-serializing is a
    /// fixed point.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config(self.seed)
    }

    /// Materialize the dataset this config points at. Synthetic data uses
    /// a dedicated seed stream derived from the master seed.
    pub fn load_dataset(&self) -> Result<FeatureDataset> {
        self.dataset.validate()?;
        match self.dataset.source.as_str() {
            "synthetic" => Ok(generate_synthetic(
                self.dataset.classes,
                self.dataset.per_class,
                self.dataset.dim,
                self.dataset.between_sigma,
                self.dataset.within_sigma,
                derive_seed(self.seed, SeedDomain::Data, 0),
            )),
            "csv" => {
                let path = self.dataset.path.as_ref().expect("validated");
                FeatureDataset::load_csv(Path::new(path))
            }
            _ => unreachable!("validated"),
        }
    }
}

/// Model-axis overrides for one sweep variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_mode: Option<MemoryMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_self_attention: Option<bool>,
}

/// A base run plus a list of model variants, e.g. vanilla vs. attentive
/// under the same data and training budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub variants: Vec<VariantSpec>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sweep: SweepConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(sweep)
    }

    /// Resolve each variant into a full run config.
    pub fn variant_configs(&self) -> Vec<(String, RunConfig)> {
        self.variants
            .iter()
            .map(|v| {
                let mut run = self.base.clone();
                if let Some(alpha) = v.alpha {
                    run.model.alpha = alpha;
                }
                if let Some(beta) = v.beta {
                    run.model.beta = beta;
                }
                if let Some(mode) = v.memory_mode {
                    run.model.memory_mode = mode;
                }
                if let Some(flag) = v.node_self_attention {
                    run.model.node_self_attention = flag;
                }
                (v.name.clone(), run)
            })
            .collect()
    }
}
