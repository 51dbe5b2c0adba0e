//! Run configuration: one TOML document, every field defaulted, unknown keys rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pfm_core::baselines::{DpoConfig, RewardTrainConfig};
use pfm_core::flowmatch::{FieldConfig, IterateMode, OdeConfig, PathConfig, SampleSource, TrainConfig};
use pfm_core::nnflow::{Activation, AdamConfig, MlpSpec};
use pfm_core::prefdata::{ContextSpec, GaussianMixture, LabelerKind, PreferenceLabeler, RewardFunction};
use pfm_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: FieldConfig,
    pub path: PathConfig,
    pub ode: OdeConfig,
    pub train: TrainSection,
    pub infer: InferSection,
    pub iterate: IterateSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/pfm"),
            data: DataSection::default(),
            model: FieldConfig::default(),
            path: PathConfig::default(),
            ode: OdeConfig::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
            iterate: IterateSection::default(),
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            oracle: OracleSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Number of preference pairs to collect.
    pub n: usize,
    pub reference: GaussianMixture,
    pub reward: RewardFunction,
    pub labeler: LabelerKind,
    pub context_dim: usize,
    /// Use this dataset file instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n: 2000,
            reference: GaussianMixture::default_reference(),
            reward: RewardFunction::eight_gaussians(),
            labeler: LabelerKind::Deterministic,
            context_dim: 0,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Reference,
    NegativeMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub n_samples: usize,
    pub source: SourceKind,
    /// Defaults to `flow.ckpt` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            source: SourceKind::Reference,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSection {
    pub iterations: usize,
    pub mode: IterateMode,
    /// Flow applied repeatedly in reapply mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self {
            iterations: 3,
            mode: IterateMode::Retrain,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for RewardModelSection {
    fn default() -> Self {
        let t = RewardTrainConfig::default();
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub points_per_axis: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            points_per_axis: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub reward_model: RewardModelSection,
    pub dpo: DpoConfig,
    pub grid: GridSection,
    /// Bradley-Terry temperature of the ground-truth preferences used for the
    /// analytic KL-regularized optimum on the grid.
    pub rlhf_temperature: f64,
    /// Overfit comparisons read the reward-gap traces at this epoch and at ten times it.
    pub reward_overfit_epoch: usize,
    pub dpo_overfit_epoch: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            reward_model: RewardModelSection::default(),
            dpo: DpoConfig::default(),
            grid: GridSection::default(),
            rlhf_temperature: 20.0,
            reward_overfit_epoch: 20,
            dpo_overfit_epoch: 200,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Named sample clouds (CSV files) to score.
    pub clouds: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Check this instance file instead of the bundled ones and the random sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
    pub objective_instances: usize,
    pub objective_points: usize,
    pub objective_draws: usize,
    pub objective_slack: f64,
    pub iterate_instances: usize,
    pub iterate_points: usize,
    pub iterate_tolerance: f64,
    pub iterate_max_iters: usize,
    /// Minimum lead of the best reward over the runner-up in random iterate instances.
    pub iterate_min_gap: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            instance: None,
            objective_instances: 100,
            objective_points: 10,
            objective_draws: 1000,
            objective_slack: 1e-9,
            iterate_instances: 100,
            iterate_points: 20,
            iterate_tolerance: 1e-8,
            iterate_max_iters: 10_000,
            iterate_min_gap: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}: {what}")))
            }
        };
        field("data.n", self.data.n >= 1, "must be >= 1")?;
        if let LabelerKind::BradleyTerry { temperature } = self.data.labeler {
            field("data.labeler.temperature", temperature.is_finite() && temperature > 0.0, "must be > 0")?;
        }
        field("model.hidden", !self.model.hidden.is_empty() && self.model.hidden.iter().all(|&h| h > 0), "must be non-empty with positive widths")?;
        field("path.sigma", self.path.sigma.is_finite() && self.path.sigma >= 0.0, "must be >= 0")?;
        field("ode.steps", self.ode.steps >= 1, "must be >= 1")?;
        field("train.epochs", self.train.epochs >= 1, "must be >= 1")?;
        field("train.batch_size", self.train.batch_size >= 1, "must be >= 1")?;
        field("train.adam.lr", self.train.adam.lr > 0.0, "must be > 0")?;
        field("infer.n_samples", self.infer.n_samples >= 1, "must be >= 1")?;
        field("iterate.iterations", self.iterate.iterations >= 1, "must be >= 1")?;
        let b = &self.baseline;
        field("baseline.reward_model.epochs", b.reward_model.epochs >= 1, "must be >= 1")?;
        field("baseline.reward_model.batch_size", b.reward_model.batch_size >= 1, "must be >= 1")?;
        field("baseline.reward_model.hidden", !b.reward_model.hidden.is_empty() && b.reward_model.hidden.iter().all(|&h| h > 0), "must be non-empty with positive widths")?;
        field("baseline.dpo.beta", b.dpo.beta.is_finite() && b.dpo.beta > 0.0, "must be > 0")?;
        field("baseline.dpo.epochs", b.dpo.epochs >= 1, "must be >= 1")?;
        field("baseline.grid.points_per_axis", b.grid.points_per_axis >= 2, "must be >= 2")?;
        field("baseline.grid.hi", b.grid.hi > b.grid.lo, "must exceed baseline.grid.lo")?;
        field("baseline.rlhf_temperature", b.rlhf_temperature.is_finite() && b.rlhf_temperature > 0.0, "must be > 0")?;
        let o = &self.oracle;
        field("oracle.objective_points", o.objective_points >= 1, "must be >= 1")?;
        field("oracle.iterate_points", o.iterate_points >= 2, "must be >= 2")?;
        field("oracle.iterate_tolerance", o.iterate_tolerance > 0.0, "must be > 0")?;
        Ok(())
    }

    pub fn labeler(&self) -> Result<PreferenceLabeler> {
        PreferenceLabeler::new(self.data.labeler.clone(), self.data.reward.clone())
    }

    pub fn context(&self) -> ContextSpec {
        ContextSpec {
            dim: self.data.context_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed,
            adam: self.train.adam,
        }
    }

    pub fn source(&self, kind: SourceKind) -> Result<SampleSource> {
        Ok(match kind {
            SourceKind::Reference => SampleSource::reference(self.data.reference.clone()),
            SourceKind::NegativeMarginal => SampleSource::NegativeMarginal {
                policy: self.data.reference.clone(),
                labeler: Some(self.labeler()?),
            },
        })
    }

    pub fn reward_spec(&self, seed: u64) -> Result<MlpSpec> {
        let r = &self.baseline.reward_model;
        MlpSpec::new(
            self.data.context_dim + self.data.reference.dim(),
            r.hidden.clone(),
            1,
            r.activation,
            seed,
        )
    }

    pub fn reward_train_config(&self, seed: u64) -> RewardTrainConfig {
        let r = &self.baseline.reward_model;
        RewardTrainConfig {
            epochs: r.epochs,
            batch_size: r.batch_size,
            seed,
            adam: r.adam,
        }
    }
}
