//! Run configuration: one TOML document describing a full experiment, plus
//! the shipped named profiles.
//!
//! Every field has a default, so an empty document is the default desk-scale
//! benchmark. A profile is applied first and the document is overlaid on top
//! of it key by key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{AdaptConfig, InitPolicy, DEFAULT_TEMPERATURE};
use crate::analysis::SweepWindow;
use crate::merge::{MergeMethod, MergePlan, TopkRule};
use crate::nn::{Activation, LossKind, ModelSpec};
use crate::spectral::DEFAULT_ENERGY_FRACTION;
use crate::tasks::{FinetuneConfig, TaskSuiteSpec};

pub const PROFILES: [&str; 5] = ["ta", "cart", "tsvm", "adamerging-ablation", "adarank"];
pub const DEFAULT_PROFILE: &str = "adarank";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown profile {0:?} (expected one of ta, cart, tsvm, adamerging-ablation, adarank)")]
    UnknownProfile(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

/// What adaptation learns, on top of the optimizer schedule. The initial
/// mask always reproduces the static merge plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptSettings {
    pub learn_mask: bool,
    pub learn_lambda: bool,
    /// Trainable range limited to the leading fraction of components.
    pub range_restriction: Option<f64>,
    pub temperature: f64,
    #[serde(flatten)]
    pub schedule: AdaptConfig,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self {
            learn_mask: true,
            learn_lambda: true,
            range_restriction: None,
            temperature: DEFAULT_TEMPERATURE,
            schedule: AdaptConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSelection {
    pub sweep: bool,
    pub taylor: bool,
    pub interaction: bool,
    pub ranks: bool,
    pub heatmap: bool,
    /// Layers to analyze; empty means all.
    pub layers: Vec<usize>,
    /// Tasks whose components are swept; empty means all.
    pub tasks: Vec<usize>,
    pub window: SweepWindow,
    pub loss: LossKind,
    /// Leading components per (task, layer) for Taylor terms.
    pub taylor_components: usize,
    /// Leading components per (task, layer) whose pairs are probed.
    pub interaction_components: usize,
    pub energy_fraction: f64,
    /// Finite-difference step; derived from the weights when absent.
    pub epsilon: Option<f64>,
}

impl Default for AnalysisSelection {
    fn default() -> Self {
        Self {
            sweep: false,
            taylor: false,
            interaction: false,
            ranks: false,
            heatmap: false,
            layers: Vec::new(),
            tasks: Vec::new(),
            window: SweepWindow::default(),
            loss: LossKind::CrossEntropy,
            taylor_components: 4,
            interaction_components: 3,
            energy_fraction: DEFAULT_ENERGY_FRACTION,
            epsilon: None,
        }
    }
}

impl AnalysisSelection {
    pub fn any(&self) -> bool {
        self.sweep || self.taylor || self.interaction || self.ranks || self.heatmap
    }

    pub fn all() -> Self {
        Self {
            sweep: true,
            taylor: true,
            interaction: true,
            ranks: true,
            heatmap: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Offsets every seed below: data and rotation seeds by 1000·seed, the
    /// training and adaptation seeds by seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub suite: TaskSuiteSpec,
    pub model: ModelConfig,
    pub pretrain: FinetuneConfig,
    pub finetune: FinetuneConfig,
    pub merge: MergePlan,
    /// Mask used by the `masked` merge method; defaults to the adapt output.
    pub mask_file: Option<PathBuf>,
    pub adapt: AdaptSettings,
    pub analysis: AnalysisSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            suite: TaskSuiteSpec::default(),
            model: ModelConfig::default(),
            pretrain: FinetuneConfig::pretrain_default(),
            finetune: FinetuneConfig::default(),
            merge: MergePlan::task_arithmetic(),
            mask_file: None,
            adapt: AdaptSettings::default(),
            analysis: AnalysisSelection::default(),
        }
    }
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        let base = Self::default();
        let fixed = |merge: MergePlan| Self {
            merge,
            adapt: AdaptSettings {
                learn_mask: false,
                learn_lambda: false,
                schedule: AdaptConfig {
                    steps: 0,
                    ..AdaptConfig::default()
                },
                ..AdaptSettings::default()
            },
            ..Self::default()
        };
        Ok(match name {
            "adarank" => base,
            "adamerging-ablation" => Self {
                adapt: AdaptSettings {
                    learn_mask: false,
                    ..AdaptSettings::default()
                },
                ..base
            },
            "ta" => fixed(MergePlan::task_arithmetic()),
            "cart" => fixed(MergePlan::cart()),
            "tsvm" => fixed(MergePlan::tsvm()),
            other => return Err(ConfigError::UnknownProfile(other.to_string())),
        })
    }

    /// Parses `text` as an overlay on `profile`.
    pub fn from_toml(text: &str, profile: &str) -> Result<Self, ConfigError> {
        let base = Self::profile(profile)?;
        let overlay: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        overlay_table(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn suite_spec(&self) -> TaskSuiteSpec {
        let off = self.seed.wrapping_mul(1000);
        TaskSuiteSpec {
            data_seed: self.suite.data_seed.wrapping_add(off),
            rotation_seed: self.suite.rotation_seed.wrapping_add(off),
            ..self.suite.clone()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.suite
            .model_spec(self.model.hidden_dims.clone(), self.model.activation)
    }

    pub fn pretrain_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.pretrain.seed.wrapping_add(self.seed),
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.finetune.seed.wrapping_add(self.seed),
            ..self.finetune.clone()
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.adapt.schedule.seed.wrapping_add(self.seed),
            ..self.adapt.schedule.clone()
        }
    }

    /// Initial mask policy reproducing the static merge plan.
    pub fn init_policy(&self) -> Result<InitPolicy, ConfigError> {
        match (self.merge.method, self.merge.topk) {
            (MergeMethod::TaskArithmetic, _) => Ok(InitPolicy::AllOnes),
            (MergeMethod::TopkSvd, Some(TopkRule::Fraction(f))) => Ok(InitPolicy::TopFraction(f)),
            (MergeMethod::TopkSvd, Some(TopkRule::PerTaskShare)) => Ok(InitPolicy::PerTaskShare),
            (method, _) => Err(ConfigError::Invalid(format!(
                "adaptation needs a task_arithmetic or topk_svd plan, not {method:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.suite.validate().map_err(|e| invalid(&e))?;
        self.model_spec().validate().map_err(|e| invalid(&e))?;
        self.pretrain.validate().map_err(|e| invalid(&e))?;
        self.finetune.validate().map_err(|e| invalid(&e))?;
        self.merge.validate().map_err(|e| invalid(&e))?;
        self.adapt.schedule.validate().map_err(|e| invalid(&e))?;
        if !(self.adapt.temperature > 0.0) || !self.adapt.temperature.is_finite() {
            return Err(ConfigError::Invalid("adapt.temperature must be positive".into()));
        }
        if let Some(f) = self.adapt.range_restriction {
            TopkRule::Fraction(f).validate().map_err(|e| invalid(&e))?;
        }
        let a = &self.analysis;
        if !(a.energy_fraction > 0.0 && a.energy_fraction <= 1.0) {
            return Err(ConfigError::Invalid("analysis.energy_fraction must be in (0, 1]".into()));
        }
        a.window.indices(1).map_err(|e| invalid(&e))?;
        if let Some(bad) = a.layers.iter().find(|&&l| l >= self.model.hidden_dims.len()) {
            return Err(ConfigError::Invalid(format!("analysis layer {bad} does not exist")));
        }
        if let Some(bad) = a.tasks.iter().find(|&&t| t >= self.suite.num_tasks) {
            return Err(ConfigError::Invalid(format!("analysis task {bad} does not exist")));
        }
        if matches!(a.epsilon, Some(e) if !(e > 0.0)) {
            return Err(ConfigError::Invalid("analysis.epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn overlay_table(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay_table(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
