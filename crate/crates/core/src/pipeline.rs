//! In-memory stages of an experiment, shared by the command line and tests.

use thiserror::Error;

use crate::adapt::{adapt, init_mask, AdaptError, AdaptOutcome, MaskState, MergeContext, UnlabeledStream};
use crate::analysis::AnalysisError;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::linalg::{LinalgError, Matrix};
use crate::merge::{
    merge_task_arithmetic, merge_topk, merge_weight_average, Lambda, MergeError, MergeMethod, MergePlan,
};
use crate::nn::{Backbone, ModelSpec, NnError};
use crate::spectral::{build_task_vectors, decompose, SpectralError, SpectralSet, TaskVectorSet};
use crate::tasks::{backbone_from, finetune_all, generate_suite, heads_from, pretrain, Suite, TasksError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tasks(#[from] TasksError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn linalg_numerical(e: &LinalgError) -> bool {
    matches!(e, LinalgError::NonFinite { .. } | LinalgError::NoConvergence { .. })
}

fn nn_numerical(e: &NnError) -> bool {
    matches!(e, NnError::Linalg(l) if linalg_numerical(l))
}

impl PipelineError {
    /// NaNs, divergence and non-convergence, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Tasks(TasksError::Diverged { .. }) => true,
            PipelineError::Tasks(TasksError::Nn(e)) | PipelineError::Nn(e) => nn_numerical(e),
            PipelineError::Spectral(SpectralError::Decomposition { source, .. }) => linalg_numerical(source),
            PipelineError::Adapt(AdaptError::NonFinite { .. }) => true,
            PipelineError::Adapt(AdaptError::Nn(e)) => nn_numerical(e),
            PipelineError::Analysis(AnalysisError::NonFinite(_)) => true,
            PipelineError::Analysis(AnalysisError::Nn(e)) => nn_numerical(e),
            _ => false,
        }
    }

    pub fn io_error(&self) -> Option<&std::io::Error> {
        match self {
            PipelineError::Checkpoint(CheckpointError::Io(e))
            | PipelineError::Tasks(TasksError::Checkpoint(CheckpointError::Io(e)))
            | PipelineError::Spectral(SpectralError::Checkpoint(CheckpointError::Io(e)))
            | PipelineError::Adapt(AdaptError::Checkpoint(CheckpointError::Io(e))) => Some(e),
            _ => None,
        }
    }
}

pub fn generate(cfg: &RunConfig) -> Result<Suite, PipelineError> {
    Ok(generate_suite(&cfg.suite_spec())?)
}

/// Pretrained checkpoint followed by one fine-tuned checkpoint per task.
pub fn train(cfg: &RunConfig, suite: &Suite) -> Result<(Checkpoint, Vec<Checkpoint>), PipelineError> {
    let spec = cfg.model_spec();
    let pre = pretrain(&spec, suite, &cfg.pretrain_config())?;
    let fts = finetune_all(&spec, &pre, suite, &cfg.finetune_config())?;
    Ok((pre, fts))
}

/// Backbones and heads decoded from a set of checkpoints.
#[derive(Debug, Clone)]
pub struct Models {
    pub spec: ModelSpec,
    pub pretrained: Backbone,
    pub finetuned: Vec<Backbone>,
    pub heads: Vec<Matrix>,
}

impl Models {
    pub fn from_checkpoints(spec: &ModelSpec, pre: &Checkpoint, fts: &[Checkpoint]) -> Result<Self, PipelineError> {
        if fts.len() != spec.num_tasks() {
            return Err(ConfigError::Invalid(format!(
                "expected {} fine-tuned checkpoints, got {}",
                spec.num_tasks(),
                fts.len()
            ))
            .into());
        }
        Ok(Self {
            spec: spec.clone(),
            pretrained: backbone_from(pre, spec)?,
            finetuned: fts.iter().map(|c| backbone_from(c, spec)).collect::<Result<_, _>>()?,
            heads: heads_from(fts)?,
        })
    }

    pub fn tied(&self, lambda: f64) -> Lambda {
        Lambda::tied(lambda, self.spec.num_tasks(), self.spec.num_layers())
    }

    /// Task vectors and their decomposition as the plan prescribes.
    pub fn spectral(&self, plan: &MergePlan) -> Result<(TaskVectorSet, SpectralSet), PipelineError> {
        let tv = build_task_vectors(&self.pretrained, &self.finetuned, plan.base_kind)?;
        let sp = decompose(&tv, plan.whiten)?;
        Ok((tv, sp))
    }

    /// The static merge of a plan; `masked` plans need a mask state instead.
    pub fn static_merge(&self, plan: &MergePlan) -> Result<Backbone, PipelineError> {
        plan.validate()?;
        let lambda = self.tied(plan.lambda);
        Ok(match plan.method {
            MergeMethod::WeightAverage => merge_weight_average(&self.finetuned)?,
            MergeMethod::TaskArithmetic => {
                let tv = build_task_vectors(&self.pretrained, &self.finetuned, plan.base_kind)?;
                merge_task_arithmetic(&tv, &lambda)?
            }
            MergeMethod::TopkSvd => {
                let (tv, sp) = self.spectral(plan)?;
                merge_topk(&tv.base, &sp, plan.topk.expect("validated"), &lambda)?
            }
            MergeMethod::Masked => {
                return Err(ConfigError::Invalid("the masked method needs a mask file".into()).into())
            }
        })
    }

    /// Mask state whose hard merge reproduces the configured static plan,
    /// with the configured learning switches.
    pub fn initial_state(&self, cfg: &RunConfig, spectra: &SpectralSet) -> Result<MaskState, PipelineError> {
        let policy = cfg.init_policy()?;
        let mut state = init_mask(policy, spectra, self.tied(cfg.merge.lambda), cfg.adapt.temperature)?
            .with_learning(cfg.adapt.learn_mask, cfg.adapt.learn_lambda);
        if let Some(f) = cfg.adapt.range_restriction {
            state = state.with_range_restriction(f)?;
        }
        Ok(state)
    }

    /// Entropy adaptation on the unlabelled test inputs of `suite`.
    pub fn adapt(&self, cfg: &RunConfig, suite: &Suite) -> Result<Adapted, PipelineError> {
        let (tv, spectra) = self.spectral(&cfg.merge)?;
        let state = self.initial_state(cfg, &spectra)?;
        let streams: Vec<_> = suite.tasks.iter().map(|t| UnlabeledStream::from_batch(&t.test)).collect();
        let ctx = MergeContext {
            spec: &self.spec,
            base: &tv.base,
            spectra: &spectra,
            heads: &self.heads,
        };
        let outcome = adapt(&ctx, &streams, state, &cfg.adapt_config())?;
        let merged = outcome.state.merged(&tv.base, &spectra)?;
        Ok(Adapted {
            outcome,
            merged,
            task_vectors: tv,
            spectra,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub outcome: AdaptOutcome,
    pub merged: Backbone,
    pub task_vectors: TaskVectorSet,
    pub spectra: SpectralSet,
}

/// Everything up to fine-tuned models, in memory.
pub fn prepare(cfg: &RunConfig) -> Result<(Suite, Models), PipelineError> {
    cfg.validate()?;
    let suite = generate(cfg)?;
    let (pre, fts) = train(cfg, &suite)?;
    let models = Models::from_checkpoints(&cfg.model_spec(), &pre, &fts)?;
    Ok((suite, models))
}
