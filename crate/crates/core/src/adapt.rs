//! Test-time adaptation of binary component masks and merge coefficients.
//!
//! Each (task, layer) keeps one real logit per singular component. The
//! forward pass uses the hard mask `b = 1{σ(b̃/T) ≥ 0.5}`; the backward pass
//! routes the gradient with respect to `b` through the sigmoid surrogate
//! (straight-through estimator). Gradients with respect to `b` come from the
//! weight gradient by the chain rule through the masked merge:
//! `∂L/∂b_r = λ σ_r u_rᵀ (∂L/∂W) v_r`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::linalg::{Matrix, ThinSvd};
use crate::merge::{merge_masked, top_fraction_count, Lambda, MaskBits, MergeError, TopkRule};
use crate::nn::{
    backprop, forward_with_head, layer_name, loss_with_grad, Backbone, Batch, LossKind, ModelSpec,
    NnError,
};
use crate::optim::{AdamConfig, AdamState};
use crate::spectral::SpectralSet;

/// Temperature used throughout unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("stream for task {0} is empty")]
    EmptyStream(usize),
    #[error("expected {expected} streams, got {actual}")]
    StreamCount { expected: usize, actual: usize },
    #[error("labels required for the supervised objective (task {0})")]
    MissingLabels(usize),
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize, trace: AdaptTrace },
    #[error("invalid mask state: {0}")]
    InvalidState(String),
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hard mask from logits: bit r is set iff `σ(logit_r / T) ≥ 0.5`, i.e. iff
/// `logit_r ≥ 0`.
pub fn binarize(logits: &[f64], temperature: f64) -> Vec<bool> {
    debug_assert!(temperature > 0.0);
    logits.iter().map(|&l| l >= 0.0).collect()
}

/// Straight-through gradient: `upstream_r · σ'(logit_r/T) / T`.
pub fn ste_backward(upstream: &[f64], logits: &[f64], temperature: f64) -> Vec<f64> {
    assert_eq!(upstream.len(), logits.len());
    upstream
        .iter()
        .zip(logits)
        .map(|(&g, &l)| {
            let s = sigmoid(l / temperature);
            g * s * (1.0 - s) / temperature
        })
        .collect()
}

/// Gradients of the loss with respect to one task's mask bits and its
/// coefficient at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGrads {
    /// `λ σ_r u_rᵀ G v_r` for every component r.
    pub mask: Vec<f64>,
    /// `Σ_r b_r σ_r u_rᵀ G v_r`
    pub lambda: f64,
}

/// Projects a weight gradient onto the rank-one directions of `svd`.
pub fn mask_grad_from_weight_grad(
    weight_grad: &Matrix,
    svd: &ThinSvd,
    lambda: f64,
    bits: &[bool],
) -> Result<ComponentGrads, AdaptError> {
    if weight_grad.shape() != (svd.rows(), svd.cols()) {
        return Err(AdaptError::InvalidState(format!(
            "weight gradient {:?} does not match decomposition {:?}",
            weight_grad.shape(),
            (svd.rows(), svd.cols())
        )));
    }
    if bits.len() != svd.rank() {
        return Err(AdaptError::InvalidState(format!(
            "{} mask bits for rank {}",
            bits.len(),
            svd.rank()
        )));
    }
    let projections = component_projections(weight_grad, svd);
    let mut lambda_grad = 0.0;
    let mask = projections
        .iter()
        .zip(&svd.s)
        .zip(bits)
        .map(|((&p, &s), &b)| {
            if b {
                lambda_grad += s * p;
            }
            lambda * s * p
        })
        .collect();
    Ok(ComponentGrads {
        mask,
        lambda: lambda_grad,
    })
}

/// `u_rᵀ G v_r` for every r.
fn component_projections(g: &Matrix, svd: &ThinSvd) -> Vec<f64> {
    // G·V, then column-wise dot with U.
    let gv = g.matmul(&svd.v).expect("shapes checked");
    let k = svd.rank();
    let mut out = vec![0.0; k];
    for i in 0..g.rows() {
        let urow = svd.u.row(i);
        let gvrow = gv.row(i);
        for r in 0..k {
            out[r] += urow[r] * gvrow[r];
        }
    }
    out
}

/// How the mask is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum InitPolicy {
    /// Every component active (Task Arithmetic).
    AllOnes,
    /// Leading ⌊f·k⌋ components active (CART).
    TopFraction(f64),
    /// Leading ⌊k/T⌋ components active per task (TSV-M).
    PerTaskShare,
}

impl InitPolicy {
    fn active_prefix(&self, rank: usize, num_tasks: usize) -> Result<usize, AdaptError> {
        Ok(match *self {
            InitPolicy::AllOnes => rank,
            InitPolicy::TopFraction(f) => {
                TopkRule::Fraction(f).validate()?;
                top_fraction_count(f, rank)
            }
            InitPolicy::PerTaskShare => TopkRule::PerTaskShare.count(rank, num_tasks),
        })
    }
}

/// Learnable state of adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    /// `logits[task][layer][r]`
    pub logits: Vec<Vec<Vec<f64>>>,
    pub temperature: f64,
    pub lambda: Lambda,
    pub learn_lambda: bool,
    pub learn_mask: bool,
    /// When set, only the leading ⌊f·k⌋ components may ever be active.
    pub range_restriction: Option<f64>,
}

/// Logit magnitude at initialization: `σ(±T ln 9 / T) = 0.9 / 0.1`.
pub fn init_logit_magnitude(temperature: f64) -> f64 {
    temperature * 9f64.ln()
}

/// Builds a mask state whose binarization reproduces `policy` exactly.
pub fn init_mask(
    policy: InitPolicy,
    spectra: &SpectralSet,
    lambda: Lambda,
    temperature: f64,
) -> Result<MaskState, AdaptError> {
    if !(temperature > 0.0) {
        return Err(AdaptError::InvalidState("temperature must be positive".into()));
    }
    let mag = init_logit_magnitude(temperature);
    let t_count = spectra.num_tasks();
    let mut logits = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut layers = Vec::with_capacity(spectra.num_layers());
        for l in 0..spectra.num_layers() {
            let k = spectra.rank(t, l);
            let active = policy.active_prefix(k, t_count)?;
            layers.push((0..k).map(|r| if r < active { mag } else { -mag }).collect());
        }
        logits.push(layers);
    }
    Ok(MaskState {
        logits,
        temperature,
        lambda,
        learn_lambda: true,
        learn_mask: true,
        range_restriction: None,
    })
}

impl MaskState {
    pub fn with_learning(mut self, learn_mask: bool, learn_lambda: bool) -> Self {
        self.learn_mask = learn_mask;
        self.learn_lambda = learn_lambda;
        self
    }

    /// Restricts the trainable range to the leading ⌊f·k⌋ components and
    /// forces everything outside it inactive.
    pub fn with_range_restriction(mut self, fraction: f64) -> Result<Self, AdaptError> {
        TopkRule::Fraction(fraction).validate()?;
        self.range_restriction = Some(fraction);
        let mag = init_logit_magnitude(self.temperature);
        for layers in &mut self.logits {
            for logits in layers.iter_mut() {
                let limit = top_fraction_count(fraction, logits.len());
                for l in &mut logits[limit..] {
                    *l = l.min(-mag);
                }
            }
        }
        Ok(self)
    }

    pub fn num_tasks(&self) -> usize {
        self.logits.len()
    }

    pub fn num_layers(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn bits(&self) -> MaskBits {
        MaskBits {
            bits: self
                .logits
                .iter()
                .map(|layers| layers.iter().map(|l| binarize(l, self.temperature)).collect())
                .collect(),
        }
    }

    pub fn active_counts(&self) -> Vec<Vec<usize>> {
        self.logits
            .iter()
            .map(|layers| layers.iter().map(|l| l.iter().filter(|&&x| x >= 0.0).count()).collect())
            .collect()
    }

    fn trainable_limit(&self, k: usize) -> usize {
        self.range_restriction.map_or(k, |f| top_fraction_count(f, k))
    }

    pub fn validate(&self, spectra: &SpectralSet) -> Result<(), AdaptError> {
        if !(self.temperature > 0.0) {
            return Err(AdaptError::InvalidState("temperature must be positive".into()));
        }
        if self.num_tasks() != spectra.num_tasks() {
            return Err(AdaptError::InvalidState(format!(
                "{} tasks in mask, {} in spectra",
                self.num_tasks(),
                spectra.num_tasks()
            )));
        }
        for (t, layers) in self.logits.iter().enumerate() {
            if layers.len() != spectra.num_layers() {
                return Err(AdaptError::InvalidState(format!("task {t}: layer count")));
            }
            for (l, logits) in layers.iter().enumerate() {
                if logits.len() != spectra.rank(t, l) {
                    return Err(AdaptError::InvalidState(format!(
                        "task {t}, layer {l}: {} logits for rank {}",
                        logits.len(),
                        spectra.rank(t, l)
                    )));
                }
                for r in 0..spectra.num_layers() {
                    self.lambda.get(t, r)?;
                }
            }
        }
        Ok(())
    }

    /// The merged backbone implied by the current hard masks.
    pub fn merged(&self, base: &Backbone, spectra: &SpectralSet) -> Result<Backbone, AdaptError> {
        Ok(merge_masked(base, spectra, &self.bits(), &self.lambda)?)
    }

    fn num_learnable(&self) -> usize {
        let masks: usize = if self.learn_mask {
            self.logits.iter().flatten().map(Vec::len).sum()
        } else {
            0
        };
        let lambdas = if self.learn_lambda {
            self.num_tasks() * self.num_layers()
        } else {
            0
        };
        masks + lambdas
    }

    fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_learnable());
        if self.learn_mask {
            for l in self.logits.iter().flatten() {
                out.extend_from_slice(l);
            }
        }
        if self.learn_lambda {
            for row in &self.lambda.values {
                out.extend_from_slice(&row[..self.num_layers()]);
            }
        }
        out
    }

    fn unpack(&mut self, params: &[f64]) {
        let mut pos = 0;
        if self.learn_mask {
            for l in self.logits.iter_mut().flatten() {
                let n = l.len();
                l.copy_from_slice(&params[pos..pos + n]);
                pos += n;
            }
        }
        if self.learn_lambda {
            let layers = self.num_layers();
            for row in &mut self.lambda.values {
                row[..layers].copy_from_slice(&params[pos..pos + layers]);
                pos += layers;
            }
        }
    }

    /// Persists logits, coefficients and flags in the checkpoint format.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (t, layers) in self.logits.iter().enumerate() {
            for (l, logits) in layers.iter().enumerate() {
                let m = Matrix::new(1, logits.len(), logits.clone()).expect("finite logits");
                ckpt.push(format!("mask.task{t}.{}", layer_name(l)), m).expect("unique");
            }
        }
        let lam = Matrix::from_fn(self.num_tasks(), self.num_layers(), |t, l| {
            self.lambda.values[t][l]
        });
        ckpt.push("lambda", lam).expect("unique");
        ckpt.set_manifest("kind", json!("mask_state"));
        ckpt.set_manifest("temperature", json!(self.temperature));
        ckpt.set_manifest("learn_lambda", json!(self.learn_lambda));
        ckpt.set_manifest("learn_mask", json!(self.learn_mask));
        ckpt.set_manifest("range_restriction", json!(self.range_restriction));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AdaptError> {
        let lam = ckpt.require("lambda")?;
        let (t_count, l_count) = lam.shape();
        let mut logits = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let mut layers = Vec::with_capacity(l_count);
            for l in 0..l_count {
                layers.push(ckpt.require(&format!("mask.task{t}.{}", layer_name(l)))?.data().to_vec());
            }
            logits.push(layers);
        }
        let m = &ckpt.manifest;
        let temperature = m
            .get("temperature")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| AdaptError::InvalidState("manifest lacks temperature".into()))?;
        Ok(Self {
            logits,
            temperature,
            lambda: Lambda {
                values: (0..t_count).map(|t| lam.row(t).to_vec()).collect(),
            },
            learn_lambda: m.get("learn_lambda").and_then(|v| v.as_bool()).unwrap_or(true),
            learn_mask: m.get("learn_mask").and_then(|v| v.as_bool()).unwrap_or(true),
            range_restriction: m.get("range_restriction").and_then(|v| v.as_f64()),
        })
    }
}

/// Unlabelled inputs of one task. The adaptation entry point only accepts
/// these, so it cannot see labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledStream {
    pub task_id: usize,
    pub inputs: Matrix,
}

impl UnlabeledStream {
    pub fn from_batch(batch: &Batch) -> Self {
        Self {
            task_id: batch.task_id,
            inputs: batch.inputs.clone(),
        }
    }

    /// Keeps the first `fraction` of the stream (at least one row).
    pub fn truncated(&self, fraction: f64) -> Self {
        let n = self.inputs.rows();
        let keep = ((n as f64 * fraction).floor() as usize).clamp(1, n);
        Self {
            task_id: self.task_id,
            inputs: Matrix::from_fn(keep, self.inputs.cols(), |i, j| self.inputs.get(i, j)),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// How per-task batch losses combine into the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskReduction {
    Sum,
    Mean,
    /// Each task's loss divided by the log of its class count.
    LogClassNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Optimizer settings; `adam.lr` applies to merge coefficients.
    pub adam: AdamConfig,
    /// Learning rate for mask logits.
    pub mask_lr: f64,
    pub seed: u64,
    /// Fraction of every stream kept (first rows).
    pub data_fraction: f64,
    pub task_reduction: TaskReduction,
    /// Rows per task of a fixed monitoring set (leading rows of each kept
    /// stream) on which the trace loss is evaluated; `None` records the loss
    /// of each step's drawn batches instead.
    pub monitor_rows: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            adam: AdamConfig::default(),
            mask_lr: 0.12,
            seed: 0,
            data_fraction: 1.0,
            task_reduction: TaskReduction::Sum,
            monitor_rows: Some(256),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.batch_size == 0 {
            return Err(AdaptError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(AdaptError::InvalidConfig("data_fraction must be in (0, 1]".into()));
        }
        if self.monitor_rows == Some(0) {
            return Err(AdaptError::InvalidConfig("monitor_rows must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.mask_lr >= 0.0) {
            return Err(AdaptError::InvalidConfig("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything fixed during adaptation.
#[derive(Debug, Clone, Copy)]
pub struct MergeContext<'a> {
    pub spec: &'a ModelSpec,
    pub base: &'a Backbone,
    pub spectra: &'a SpectralSet,
    pub heads: &'a [Matrix],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub total: f64,
    pub per_task: Vec<f64>,
    /// `[task][layer]`
    pub active_bits: Vec<Vec<usize>>,
}

/// One record per optimization step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptTrace {
    /// Name of the objective in CSV column headers.
    pub loss_name: String,
    pub records: Vec<TraceRecord>,
}

impl AdaptTrace {
    fn new(kind: LossKind) -> Self {
        Self {
            loss_name: match kind {
                LossKind::Entropy => "entropy".into(),
                LossKind::CrossEntropy => "cross_entropy".into(),
            },
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// `step,total_<loss>,<loss>_task_i…,active_bits_task_i_layer_l…`
    pub fn to_csv(&self, num_tasks: usize, num_layers: usize) -> String {
        let name = if self.loss_name.is_empty() { "entropy" } else { &self.loss_name };
        let mut header = vec!["step".to_string(), format!("total_{name}")];
        header.extend((0..num_tasks).map(|t| format!("{name}_task_{t}")));
        for t in 0..num_tasks {
            header.extend((0..num_layers).map(|l| format!("active_bits_task_{t}_layer_{l}")));
        }
        let mut s = header.join(",");
        s.push('\n');
        for r in &self.records {
            let mut row = vec![r.step.to_string(), fmt_real(r.total)];
            row.extend(r.per_task.iter().map(|&v| fmt_real(v)));
            row.extend(r.active_bits.iter().flatten().map(|c| c.to_string()));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: MaskState,
    pub trace: AdaptTrace,
    pub optimizer: AdamState,
}

struct Source<'a> {
    keep: usize,
    inputs: &'a Matrix,
    labels: Option<&'a [usize]>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Source<'_> {
    /// The first `rows` kept rows, in stream order.
    fn monitor(&self, rows: usize) -> (Matrix, Option<Vec<usize>>) {
        let n = rows.min(self.keep);
        let x = Matrix::from_fn(n, self.inputs.cols(), |i, j| self.inputs.get(i, j));
        (x, self.labels.map(|l| l[..n].to_vec()))
    }

    /// Next `size` rows of a cyclic pass, reshuffling at every epoch boundary.
    fn next(&mut self, size: usize) -> (Matrix, Option<Vec<usize>>) {
        let mut idx = Vec::with_capacity(size);
        while idx.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let x = Matrix::from_fn(size, self.inputs.cols(), |i, j| self.inputs.get(idx[i], j));
        let y = self.labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        (x, y)
    }
}

fn make_sources<'a>(
    items: Vec<(usize, &'a Matrix, Option<&'a [usize]>)>,
    num_tasks: usize,
    seed: u64,
    fraction: f64,
) -> Result<Vec<Source<'a>>, AdaptError> {
    if items.len() != num_tasks {
        return Err(AdaptError::StreamCount {
            expected: num_tasks,
            actual: items.len(),
        });
    }
    items
        .into_iter()
        .enumerate()
        .map(|(t, (task_id, inputs, labels))| {
            if task_id != t {
                return Err(AdaptError::InvalidState(format!(
                    "stream {t} belongs to task {task_id}"
                )));
            }
            if inputs.rows() == 0 {
                return Err(AdaptError::EmptyStream(t));
            }
            let keep = ((inputs.rows() as f64 * fraction).floor() as usize).clamp(1, inputs.rows());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xA5A5_0000 + t as u64));
            let mut order: Vec<usize> = (0..keep).collect();
            order.shuffle(&mut rng);
            Ok(Source {
                keep,
                inputs,
                labels,
                order,
                cursor: 0,
                rng,
            })
        })
        .collect()
}

/// Loss and gradients of the multi-task objective at one merged model.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub total: f64,
    pub per_task: Vec<f64>,
    /// `∂L/∂m` for every mask entry, `[task][layer][r]`.
    pub mask: Vec<Vec<Vec<f64>>>,
    /// `∂L/∂λ`, `[task][layer]`.
    pub lambda: Vec<Vec<f64>>,
}

/// Evaluates the objective on one batch per task at `merged` (which must be
/// built from `mask_values` and `lambda`) and routes the weight gradients to
/// mask entries and coefficients.
pub fn objective_grads(
    ctx: &MergeContext<'_>,
    merged: &Backbone,
    mask_values: &[Vec<Vec<f64>>],
    lambda: &Lambda,
    batches: &[(Matrix, Option<Vec<usize>>)],
    kind: LossKind,
    reduction: TaskReduction,
) -> Result<ObjectiveGrads, AdaptError> {
    if batches.len() != ctx.heads.len() {
        return Err(AdaptError::StreamCount {
            expected: ctx.heads.len(),
            actual: batches.len(),
        });
    }
    let results = batches
        .par_iter()
        .enumerate()
        .map(|(t, (x, y))| backprop(ctx.spec, merged, t, &ctx.heads[t], x, kind, y.as_deref()))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = task_weights(ctx, reduction);
    let mut grads: Vec<Matrix> =
        merged.layers().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    let mut total = 0.0;
    let mut per_task = Vec::with_capacity(results.len());
    for (r, &weight) in results.iter().zip(&weights) {
        total += weight * r.loss;
        per_task.push(r.loss);
        for (g, rg) in grads.iter_mut().zip(&r.layers) {
            g.axpy(weight, rg).expect("same shapes");
        }
    }

    let spectra = ctx.spectra;
    let mut mask = Vec::with_capacity(spectra.num_tasks());
    let mut lambda_grads = Vec::with_capacity(spectra.num_tasks());
    for t in 0..spectra.num_tasks() {
        let mut mrow = Vec::with_capacity(spectra.num_layers());
        let mut lrow = Vec::with_capacity(spectra.num_layers());
        for (l, g) in grads.iter().enumerate() {
            let svd = &spectra.per_task[t][l];
            let values = &mask_values[t][l];
            if g.shape() != (svd.rows(), svd.cols()) || values.len() != svd.rank() {
                return Err(AdaptError::InvalidState(format!("task {t}, layer {l}: shape mismatch")));
            }
            let lam = lambda.get(t, l)?;
            let proj = component_projections(g, svd);
            let mut lg = 0.0;
            let mg = proj
                .iter()
                .zip(&svd.s)
                .zip(values)
                .map(|((&p, &s), &m)| {
                    lg += m * s * p;
                    lam * s * p
                })
                .collect();
            mrow.push(mg);
            lrow.push(lg);
        }
        mask.push(mrow);
        lambda_grads.push(lrow);
    }
    Ok(ObjectiveGrads {
        total,
        per_task,
        mask,
        lambda: lambda_grads,
    })
}

fn task_weights(ctx: &MergeContext<'_>, reduction: TaskReduction) -> Vec<f64> {
    let n = ctx.heads.len();
    (0..n)
        .map(|t| match reduction {
            TaskReduction::Sum => 1.0,
            TaskReduction::Mean => 1.0 / n as f64,
            TaskReduction::LogClassNormalized => 1.0 / (ctx.spec.num_classes_per_task[t] as f64).ln(),
        })
        .collect()
}

/// Weighted total and per-task losses of `merged` on fixed batches.
fn monitor_loss(
    ctx: &MergeContext<'_>,
    merged: &Backbone,
    batches: &[(Matrix, Option<Vec<usize>>)],
    kind: LossKind,
    reduction: TaskReduction,
) -> Result<(f64, Vec<f64>), AdaptError> {
    let per_task = batches
        .par_iter()
        .enumerate()
        .map(|(t, (x, y))| {
            let logits = forward_with_head(ctx.spec, merged, t, &ctx.heads[t], x)?;
            Ok(loss_with_grad(kind, &logits, y.as_deref())?.0)
        })
        .collect::<Result<Vec<f64>, NnError>>()?;
    let total = per_task.iter().zip(task_weights(ctx, reduction)).map(|(l, w)| w * l).sum();
    Ok((total, per_task))
}

fn bits_as_values(bits: &MaskBits) -> Vec<Vec<Vec<f64>>> {
    bits.bits
        .iter()
        .map(|layers| {
            layers
                .iter()
                .map(|b| b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}

fn run_loop(
    ctx: &MergeContext<'_>,
    mut sources: Vec<Source<'_>>,
    mut state: MaskState,
    config: &AdaptConfig,
    kind: LossKind,
    final_record: bool,
) -> Result<AdaptOutcome, AdaptError> {
    state.validate(ctx.spectra)?;
    let mut trace = AdaptTrace::new(kind);
    let mut adam = AdamState::new(config.adam, state.num_learnable());
    let mask_params = if state.learn_mask {
        state.logits.iter().flatten().map(Vec::len).sum()
    } else {
        0
    };
    let monitor: Option<Vec<_>> = config
        .monitor_rows
        .map(|rows| sources.iter().map(|s| s.monitor(rows)).collect());
    let record = |step: usize,
                  merged: &Backbone,
                  eval: &ObjectiveGrads,
                  state: &MaskState|
     -> Result<TraceRecord, AdaptError> {
        let (total, per_task) = match &monitor {
            Some(batches) => monitor_loss(ctx, merged, batches, kind, config.task_reduction)?,
            None => (eval.total, eval.per_task.clone()),
        };
        Ok(TraceRecord {
            step,
            total,
            per_task,
            active_bits: state.active_counts(),
        })
    };
    let draw = |sources: &mut Vec<Source<'_>>| -> Vec<(Matrix, Option<Vec<usize>>)> {
        sources.iter_mut().map(|s| s.next(config.batch_size)).collect()
    };

    for step in 0..config.steps {
        let bits = state.bits();
        let merged = merge_masked(ctx.base, ctx.spectra, &bits, &state.lambda)?;
        let batches = draw(&mut sources);
        let eval = objective_grads(
            ctx,
            &merged,
            &bits_as_values(&bits),
            &state.lambda,
            &batches,
            kind,
            config.task_reduction,
        )?;
        trace.records.push(record(step, &merged, &eval, &state)?);
        if !eval.total.is_finite() || !trace.records[step].total.is_finite() {
            return Err(AdaptError::NonFinite { step, trace });
        }
        if state.num_learnable() == 0 {
            continue;
        }

        let mut grads = Vec::with_capacity(state.num_learnable());
        if state.learn_mask {
            for (t, layers) in state.logits.iter().enumerate() {
                for (l, logits) in layers.iter().enumerate() {
                    let mut g = ste_backward(&eval.mask[t][l], logits, state.temperature);
                    let limit = state.trainable_limit(logits.len());
                    for v in &mut g[limit..] {
                        *v = 0.0;
                    }
                    grads.extend(g);
                }
            }
        }
        if state.learn_lambda {
            for row in &eval.lambda {
                grads.extend_from_slice(row);
            }
        }
        let mut params = state.pack();
        let (mask_lr, lambda_lr) = (config.mask_lr, config.adam.lr);
        adam.update_with_lr(&mut params, &grads, |i| {
            if i < mask_params {
                mask_lr
            } else {
                lambda_lr
            }
        });
        state.unpack(&params);
    }

    if final_record {
        let bits = state.bits();
        let merged = merge_masked(ctx.base, ctx.spectra, &bits, &state.lambda)?;
        let batches = draw(&mut sources);
        let eval = objective_grads(
            ctx,
            &merged,
            &bits_as_values(&bits),
            &state.lambda,
            &batches,
            kind,
            config.task_reduction,
        )?;
        trace.records.push(record(config.steps, &merged, &eval, &state)?);
    }
    Ok(AdaptOutcome {
        state,
        trace,
        optimizer: adam,
    })
}

/// Entropy-minimization adaptation over unlabelled test streams.
///
/// Each step draws one batch per task, merges with the current hard masks,
/// sums the batch-mean entropies of every task through its own head, and
/// applies one Adam update to the logits (straight-through) and, when
/// enabled, the coefficients.
pub fn adapt(
    ctx: &MergeContext<'_>,
    streams: &[UnlabeledStream],
    state: MaskState,
    config: &AdaptConfig,
) -> Result<AdaptOutcome, AdaptError> {
    config.validate()?;
    let items = streams.iter().map(|s| (s.task_id, &s.inputs, None)).collect();
    let sources = make_sources(items, ctx.spectra.num_tasks(), config.seed, config.data_fraction)?;
    run_loop(ctx, sources, state, config, LossKind::Entropy, false)
}

/// The same loop driven by summed cross-entropy on labelled batches. The
/// trace has `steps + 1` records: one per step plus the final state.
pub fn supervised_oracle_adapt(
    ctx: &MergeContext<'_>,
    labeled: &[Batch],
    state: MaskState,
    config: &AdaptConfig,
) -> Result<AdaptOutcome, AdaptError> {
    config.validate()?;
    let mut items = Vec::with_capacity(labeled.len());
    for b in labeled {
        let labels = b.labels.as_deref().ok_or(AdaptError::MissingLabels(b.task_id))?;
        items.push((b.task_id, &b.inputs, Some(labels)));
    }
    let sources = make_sources(items, ctx.spectra.num_tasks(), config.seed, config.data_fraction)?;
    run_loop(ctx, sources, state, config, LossKind::CrossEntropy, true)
}
