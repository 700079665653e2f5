//! Static merging engines.
//!
//! Everything funnels into two primitives: [`merge_task_arithmetic`] adds
//! scaled full task vectors to a base, [`merge_masked`] adds scaled
//! selections of their singular components. Top-k merging is the masked merge
//! with a fixed prefix mask, and adaptive methods differentiate through the
//! masked merge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{weighted_outer_sum, Matrix};
use crate::nn::{layer_name, Backbone};
use crate::spectral::{BaseKind, SpectralSet, TaskVectorSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("need at least {needed} checkpoints, got {got}")]
    TooFewCheckpoints { needed: usize, got: usize },
    #[error("layer {layer}: shape {actual:?} differs from {expected:?}")]
    Shape {
        layer: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("no merge coefficient for task {task}, layer {layer}")]
    MissingCoefficient { task: usize, layer: usize },
    #[error("mask for task {task}, layer {layer} has {actual} bits, expected {expected}")]
    MaskLength {
        task: usize,
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("top-k fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
}

/// Merge coefficients, one per (task, layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    pub values: Vec<Vec<f64>>,
}

impl Lambda {
    /// The same coefficient for every task and layer.
    pub fn tied(value: f64, num_tasks: usize, num_layers: usize) -> Self {
        Self {
            values: vec![vec![value; num_layers]; num_tasks],
        }
    }

    pub fn get(&self, task: usize, layer: usize) -> Result<f64, MergeError> {
        self.values
            .get(task)
            .and_then(|row| row.get(layer))
            .copied()
            .ok_or(MergeError::MissingCoefficient { task, layer })
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }

    fn check(&self, num_tasks: usize, num_layers: usize) -> Result<(), MergeError> {
        for t in 0..num_tasks {
            for l in 0..num_layers {
                self.get(t, l)?;
            }
        }
        Ok(())
    }
}

/// How many leading components a top-k rule keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum TopkRule {
    /// ⌊f·k⌋ components per task and layer.
    Fraction(f64),
    /// ⌊k/T⌋ components per task and layer.
    PerTaskShare,
}

impl TopkRule {
    pub fn validate(&self) -> Result<(), MergeError> {
        if let TopkRule::Fraction(f) = *self {
            if !(f > 0.0 && f <= 1.0) {
                return Err(MergeError::Fraction(f));
            }
        }
        Ok(())
    }

    pub fn count(&self, rank: usize, num_tasks: usize) -> usize {
        match *self {
            TopkRule::Fraction(f) => top_fraction_count(f, rank),
            TopkRule::PerTaskShare => rank / num_tasks.max(1),
        }
    }
}

/// ⌊f·k⌋ with a small guard so that e.g. 0.29·100 counts as 29.
pub fn top_fraction_count(fraction: f64, rank: usize) -> usize {
    ((fraction * rank as f64) + 1e-9).floor().min(rank as f64) as usize
}

/// Binary selection over singular components, indexed `[task][layer][r]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBits {
    pub bits: Vec<Vec<Vec<bool>>>,
}

impl MaskBits {
    pub fn from_fn(spectra: &SpectralSet, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let bits = (0..spectra.num_tasks())
            .map(|t| {
                (0..spectra.num_layers())
                    .map(|l| (0..spectra.rank(t, l)).map(|r| f(t, l, r)).collect())
                    .collect()
            })
            .collect();
        Self { bits }
    }

    pub fn all_ones(spectra: &SpectralSet) -> Self {
        Self::from_fn(spectra, |_, _, _| true)
    }

    pub fn all_zeros(spectra: &SpectralSet) -> Self {
        Self::from_fn(spectra, |_, _, _| false)
    }

    /// Leading-prefix mask implied by a top-k rule.
    pub fn top_k(spectra: &SpectralSet, rule: TopkRule) -> Result<Self, MergeError> {
        rule.validate()?;
        let t_count = spectra.num_tasks();
        Ok(Self::from_fn(spectra, |t, l, r| {
            r < rule.count(spectra.rank(t, l), t_count)
        }))
    }

    pub fn active_count(&self, task: usize, layer: usize) -> usize {
        self.bits[task][layer].iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self, task: usize, layer: usize) -> Vec<usize> {
        self.bits[task][layer]
            .iter()
            .enumerate()
            .filter_map(|(r, &b)| b.then_some(r))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAverage,
    TaskArithmetic,
    TopkSvd,
    Masked,
}

/// CART coefficient selected by grid search at full scale.
pub const CART_REFERENCE_LAMBDA: f64 = 2.3;
/// CART coefficient selected by grid search over {0.5, 0.6, …, 1.2} on the
/// default desk-scale suite (flat optimum between 0.5 and 0.8).
pub const CART_DESK_LAMBDA: f64 = 0.7;

/// A static merge configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePlan {
    pub method: MergeMethod,
    pub base_kind: BaseKind,
    pub whiten: bool,
    /// Scalar coefficient tied over tasks and layers.
    pub lambda: f64,
    pub topk: Option<TopkRule>,
}

impl Default for MergePlan {
    fn default() -> Self {
        Self::task_arithmetic()
    }
}

impl MergePlan {
    /// λ = 0.3 on full pretrained-base task vectors.
    pub fn task_arithmetic() -> Self {
        Self {
            method: MergeMethod::TaskArithmetic,
            base_kind: BaseKind::Pretrained,
            whiten: false,
            lambda: 0.3,
            topk: None,
        }
    }

    /// Mean base, top 16% of components, λ grid-searched on the default
    /// desk-scale suite (see [`CART_DESK_LAMBDA`]).
    pub fn cart() -> Self {
        Self {
            method: MergeMethod::TopkSvd,
            base_kind: BaseKind::MeanOfFinetuned,
            whiten: false,
            lambda: CART_DESK_LAMBDA,
            topk: Some(TopkRule::Fraction(0.16)),
        }
    }

    /// CART with the coefficient reported for full-scale vision models.
    pub fn cart_reference() -> Self {
        Self {
            lambda: CART_REFERENCE_LAMBDA,
            ..Self::cart()
        }
    }

    /// Pretrained base, whitened frames, ⌊k/T⌋ components per task, λ = 1.0.
    pub fn tsvm() -> Self {
        Self {
            method: MergeMethod::TopkSvd,
            base_kind: BaseKind::Pretrained,
            whiten: true,
            lambda: 1.0,
            topk: Some(TopkRule::PerTaskShare),
        }
    }

    pub fn weight_average() -> Self {
        Self {
            method: MergeMethod::WeightAverage,
            base_kind: BaseKind::Pretrained,
            whiten: false,
            lambda: 1.0,
            topk: None,
        }
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        match (self.method, &self.topk) {
            (MergeMethod::TopkSvd, None) => {
                Err(MergeError::InvalidPlan("topk_svd requires a top-k rule".into()))
            }
            (MergeMethod::TopkSvd, Some(rule)) => rule.validate(),
            (_, Some(_)) => Err(MergeError::InvalidPlan(
                "a top-k rule is only valid with topk_svd".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn check_same_shapes(backbones: &[Backbone]) -> Result<(), MergeError> {
    let first = &backbones[0];
    for b in &backbones[1..] {
        for (l, (a, c)) in first.layers().iter().zip(b.layers()).enumerate() {
            if a.shape() != c.shape() {
                return Err(MergeError::Shape {
                    layer: layer_name(l),
                    expected: a.shape(),
                    actual: c.shape(),
                });
            }
        }
        if b.len() != first.len() {
            return Err(MergeError::InvalidPlan("layer counts differ".into()));
        }
    }
    Ok(())
}

/// Per-layer arithmetic mean.
pub fn merge_weight_average(backbones: &[Backbone]) -> Result<Backbone, MergeError> {
    if backbones.len() < 2 {
        return Err(MergeError::TooFewCheckpoints {
            needed: 2,
            got: backbones.len(),
        });
    }
    check_same_shapes(backbones)?;
    let inv = 1.0 / backbones.len() as f64;
    Ok(Backbone(
        (0..backbones[0].len())
            .map(|l| {
                let mut acc = backbones[0][l].clone();
                for b in &backbones[1..] {
                    acc.add_assign(&b[l]).expect("checked");
                }
                acc.scale(inv)
            })
            .collect(),
    ))
}

/// `θˡ = baseˡ + Σᵢ λᵢˡ τᵢˡ`, tasks in ascending order.
pub fn merge_task_arithmetic(tv: &TaskVectorSet, lambda: &Lambda) -> Result<Backbone, MergeError> {
    lambda.check(tv.num_tasks(), tv.num_layers())?;
    let mut out = tv.base.clone();
    for (t, task) in tv.per_task.iter().enumerate() {
        for (l, tau) in task.layers().iter().enumerate() {
            out[l].axpy(lambda.get(t, l)?, tau).map_err(|_| MergeError::Shape {
                layer: layer_name(l),
                expected: out[l].shape(),
                actual: tau.shape(),
            })?;
        }
    }
    Ok(out)
}

fn check_masks(spectra: &SpectralSet, masks: &MaskBits) -> Result<(), MergeError> {
    for t in 0..spectra.num_tasks() {
        for l in 0..spectra.num_layers() {
            let expected = spectra.rank(t, l);
            let actual = masks
                .bits
                .get(t)
                .and_then(|m| m.get(l))
                .map_or(0, Vec::len);
            if actual != expected {
                return Err(MergeError::MaskLength {
                    task: t,
                    layer: l,
                    expected,
                    actual,
                });
            }
        }
    }
    Ok(())
}

/// The masked contribution `λ Uᵢ diag(bᵢ ⊙ σᵢ) Vᵢᵀ` of one task at one layer.
pub fn masked_component_sum(
    spectra: &SpectralSet,
    masks: &MaskBits,
    task: usize,
    layer: usize,
    lambda: f64,
) -> Matrix {
    let svd = &spectra.per_task[task][layer];
    let active = masks.active_indices(task, layer);
    let weights: Vec<f64> = svd.s.iter().map(|s| lambda * s).collect();
    weighted_outer_sum(&svd.u, &weights, &svd.v, &active)
}

/// `θˡ(B) = baseˡ + Σᵢ λᵢˡ Uᵢˡ diag(Bᵢˡ ⊙ Σᵢˡ) Vᵢˡᵀ`.
pub fn merge_masked(
    base: &Backbone,
    spectra: &SpectralSet,
    masks: &MaskBits,
    lambda: &Lambda,
) -> Result<Backbone, MergeError> {
    check_masks(spectra, masks)?;
    lambda.check(spectra.num_tasks(), spectra.num_layers())?;
    let mut out = base.clone();
    for l in 0..spectra.num_layers() {
        for t in 0..spectra.num_tasks() {
            if masks.active_count(t, l) == 0 {
                continue;
            }
            let delta = masked_component_sum(spectra, masks, t, l, lambda.get(t, l)?);
            out[l].add_assign(&delta).map_err(|_| MergeError::Shape {
                layer: layer_name(l),
                expected: out[l].shape(),
                actual: delta.shape(),
            })?;
        }
    }
    Ok(out)
}

/// Merge with real-valued mask entries, `baseˡ + Σᵢ λᵢˡ Uᵢˡ diag(mᵢˡ ⊙ Σᵢˡ) Vᵢˡᵀ`.
/// With entries in {0, 1} this matches [`merge_masked`] up to rounding.
pub fn merge_relaxed(
    base: &Backbone,
    spectra: &SpectralSet,
    values: &[Vec<Vec<f64>>],
    lambda: &Lambda,
) -> Result<Backbone, MergeError> {
    let lengths = MaskBits::from_fn(spectra, |_, _, _| false);
    for (t, layers) in lengths.bits.iter().enumerate() {
        for (l, bits) in layers.iter().enumerate() {
            let actual = values.get(t).and_then(|m| m.get(l)).map_or(0, Vec::len);
            if actual != bits.len() {
                return Err(MergeError::MaskLength {
                    task: t,
                    layer: l,
                    expected: bits.len(),
                    actual,
                });
            }
        }
    }
    lambda.check(spectra.num_tasks(), spectra.num_layers())?;
    let mut out = base.clone();
    for l in 0..spectra.num_layers() {
        for t in 0..spectra.num_tasks() {
            let svd = &spectra.per_task[t][l];
            let lam = lambda.get(t, l)?;
            let w: Vec<f64> = svd.s.iter().zip(&values[t][l]).map(|(s, m)| lam * m * s).collect();
            let all: Vec<usize> = (0..svd.rank()).collect();
            let delta = weighted_outer_sum(&svd.u, &w, &svd.v, &all);
            out[l].add_assign(&delta).expect("decomposition matches layer shape");
        }
    }
    Ok(out)
}

/// Masked merge with the leading-prefix mask of `rule`.
pub fn merge_topk(
    base: &Backbone,
    spectra: &SpectralSet,
    rule: TopkRule,
    lambda: &Lambda,
) -> Result<Backbone, MergeError> {
    let masks = MaskBits::top_k(spectra, rule)?;
    merge_masked(base, spectra, &masks, lambda)
}
