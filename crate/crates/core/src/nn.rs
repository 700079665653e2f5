//! MLP backbone with per-task linear heads.
//!
//! Every layer keeps its bias as the last row of the weight matrix and sees
//! its input augmented with a constant 1 column, so a layer with `fan_in`
//! inputs and `fan_out` outputs is a `(fan_in + 1) × fan_out` matrix. The
//! backbone layers are what merging operates on; heads stay task-private.

use std::collections::BTreeMap;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("layer {layer}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        layer: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("task id {task} out of range for {num_tasks} tasks")]
    UnknownTask { task: usize, num_tasks: usize },
    #[error("cross-entropy needs labels but the batch has none")]
    MissingLabels,
    #[error("label {label} at row {row} is not below {classes}")]
    InvalidLabel { row: usize, label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes_per_task: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(NnError::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(NnError::InvalidSpec("hidden widths must be positive".into()));
        }
        if self.num_classes_per_task.is_empty() || self.num_classes_per_task.contains(&0) {
            return Err(NnError::InvalidSpec(
                "every task needs a positive class count".into(),
            ));
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_classes_per_task.len()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len()
    }

    /// Shapes of the backbone weight matrices, bias row included.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.hidden_dims
            .iter()
            .map(|&h| {
                let shape = (fan_in + 1, h);
                fan_in = h;
                shape
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated spec")
    }

    pub fn head_shape(&self, task: usize) -> (usize, usize) {
        (self.feature_dim() + 1, self.num_classes_per_task[task])
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.num_layers()).map(layer_name).collect()
    }

    fn check_task(&self, task: usize) -> Result<(), NnError> {
        if task >= self.num_tasks() {
            return Err(NnError::UnknownTask {
                task,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(())
    }
}

pub fn layer_name(index: usize) -> String {
    format!("backbone.{index}")
}

pub fn head_name(task: usize) -> String {
    format!("head.{task}")
}

/// The mergeable part of a network: one weight matrix per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone(pub Vec<Matrix>);

impl Backbone {
    pub fn layers(&self) -> &[Matrix] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros_like(&self) -> Backbone {
        Backbone(self.0.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<(), NnError> {
        let shapes = spec.layer_shapes();
        if shapes.len() != self.0.len() {
            return Err(NnError::InvalidSpec(format!(
                "backbone has {} layers, spec expects {}",
                self.0.len(),
                shapes.len()
            )));
        }
        for (l, (m, &expected)) in self.0.iter().zip(&shapes).enumerate() {
            if m.shape() != expected {
                return Err(NnError::Shape {
                    layer: layer_name(l),
                    expected,
                    actual: m.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|m| m.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn num_params(&self) -> usize {
        self.0.iter().map(|m| m.data().len()).sum()
    }
}

impl Index<usize> for Backbone {
    type Output = Matrix;
    fn index(&self, i: usize) -> &Matrix {
        &self.0[i]
    }
}

impl IndexMut<usize> for Backbone {
    fn index_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.0[i]
    }
}

/// Inputs for one task, labels optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
    pub task_id: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<(), NnError> {
        spec.check_task(self.task_id)?;
        if self.inputs.cols() != spec.input_dim {
            return Err(NnError::Shape {
                layer: "input".into(),
                expected: (self.inputs.rows(), spec.input_dim),
                actual: self.inputs.shape(),
            });
        }
        if let Some(labels) = &self.labels {
            check_labels(labels, self.len(), spec.num_classes_per_task[self.task_id])?;
        }
        Ok(())
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let cols = self.inputs.cols();
        let inputs = Matrix::from_fn(idx.len(), cols, |i, j| self.inputs.get(idx[i], j));
        Batch {
            inputs,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            task_id: self.task_id,
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != batch {
        return Err(NnError::LabelCount {
            labels: labels.len(),
            batch,
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NnError::InvalidLabel { row, label, classes });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Entropy,
    CrossEntropy,
}

/// Per-layer loss gradients keyed by backbone layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub per_layer: BTreeMap<String, Matrix>,
    pub loss_value: f64,
}

/// Gradients of a scalar loss with respect to every backbone layer and the head.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub loss: f64,
    pub layers: Vec<Matrix>,
    pub head: Matrix,
}

fn augment(h: &Matrix) -> Matrix {
    let (b, d) = h.shape();
    let mut out = Matrix::zeros(b, d + 1);
    for i in 0..b {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(h.row(i));
        row[d] = 1.0;
    }
    out
}

fn drop_last_column(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() - 1, |i, j| m.get(i, j))
}

struct ForwardCache {
    /// Augmented input to each backbone layer, then to the head.
    augmented: Vec<Matrix>,
    /// Pre-activations of each backbone layer.
    pre: Vec<Matrix>,
    logits: Matrix,
}

fn check_head(spec: &ModelSpec, task: usize, head: &Matrix) -> Result<(), NnError> {
    spec.check_task(task)?;
    let expected = spec.head_shape(task);
    if head.shape() != expected {
        return Err(NnError::Shape {
            layer: head_name(task),
            expected,
            actual: head.shape(),
        });
    }
    Ok(())
}

pub(crate) fn logits_raw(
    spec: &ModelSpec,
    backbone: &Backbone,
    head: &Matrix,
    inputs: &Matrix,
) -> Result<Matrix, NnError> {
    Ok(forward_cached(spec, backbone, head, inputs)?.logits)
}

fn forward_cached(
    spec: &ModelSpec,
    backbone: &Backbone,
    head: &Matrix,
    inputs: &Matrix,
) -> Result<ForwardCache, NnError> {
    let mut augmented = Vec::with_capacity(backbone.len() + 1);
    let mut pre = Vec::with_capacity(backbone.len());
    let mut h = inputs.clone();
    for w in backbone.layers() {
        let a = augment(&h);
        let z = a.matmul(w)?;
        h = Matrix::from_fn(z.rows(), z.cols(), |i, j| spec.activation.apply(z.get(i, j)));
        augmented.push(a);
        pre.push(z);
    }
    let a = augment(&h);
    let logits = a.matmul(head)?;
    augmented.push(a);
    Ok(ForwardCache {
        augmented,
        pre,
        logits,
    })
}

/// Logits of `inputs` under `backbone` and one task head.
pub fn forward_with_head(
    spec: &ModelSpec,
    backbone: &Backbone,
    task: usize,
    head: &Matrix,
    inputs: &Matrix,
) -> Result<Matrix, NnError> {
    backbone.check(spec)?;
    check_head(spec, task, head)?;
    if inputs.cols() != spec.input_dim {
        return Err(NnError::Shape {
            layer: "input".into(),
            expected: (inputs.rows(), spec.input_dim),
            actual: inputs.shape(),
        });
    }
    Ok(forward_cached(spec, backbone, head, inputs)?.logits)
}

/// Logits for `batch` through the head of `batch.task_id`.
pub fn forward(
    spec: &ModelSpec,
    backbone: &Backbone,
    heads: &[Matrix],
    batch: &Batch,
) -> Result<Matrix, NnError> {
    batch.validate(spec)?;
    let head = heads.get(batch.task_id).ok_or(NnError::UnknownTask {
        task: batch.task_id,
        num_tasks: heads.len(),
    })?;
    forward_with_head(spec, backbone, batch.task_id, head, &batch.inputs)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - max - lse).collect()
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let ls = log_softmax_row(logits.row(i));
        for (o, l) in out.row_mut(i).iter_mut().zip(ls) {
            *o = l.exp();
        }
    }
    out
}

fn row_entropy(log_p: &[f64]) -> f64 {
    -log_p
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>()
}

/// Batch-mean Shannon entropy of the softmax output.
pub fn entropy_loss(logits: &Matrix) -> f64 {
    entropy_with_grad(logits).0
}

/// Mean entropy and its gradient with respect to the logits.
pub fn entropy_with_grad(logits: &Matrix) -> (f64, Matrix) {
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let lp = log_softmax_row(logits.row(i));
        let h = row_entropy(&lp);
        total += h;
        for (g, &l) in grad.row_mut(i).iter_mut().zip(&lp) {
            let p = l.exp();
            *g = -p * (l + h) / b;
        }
    }
    (total / b, grad)
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64, NnError> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

pub fn cross_entropy_with_grad(
    logits: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix), NnError> {
    check_labels(labels, logits.rows(), logits.cols())?;
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lp = log_softmax_row(logits.row(i));
        total -= lp[y];
        for (c, (g, &l)) in grad.row_mut(i).iter_mut().zip(&lp).enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            *g = (l.exp() - target) / b;
        }
    }
    Ok((total / b, grad))
}

/// Loss value and gradient with respect to the logits.
pub fn loss_with_grad(
    kind: LossKind,
    logits: &Matrix,
    labels: Option<&[usize]>,
) -> Result<(f64, Matrix), NnError> {
    match kind {
        LossKind::Entropy => Ok(entropy_with_grad(logits)),
        LossKind::CrossEntropy => {
            cross_entropy_with_grad(logits, labels.ok_or(NnError::MissingLabels)?)
        }
    }
}

/// Backpropagates a logit gradient through the head and every backbone layer.
pub fn backprop(
    spec: &ModelSpec,
    backbone: &Backbone,
    task: usize,
    head: &Matrix,
    inputs: &Matrix,
    kind: LossKind,
    labels: Option<&[usize]>,
) -> Result<NetGradients, NnError> {
    backbone.check(spec)?;
    check_head(spec, task, head)?;
    backprop_raw(spec, backbone, head, inputs, kind, labels)
}

/// [`backprop`] without shape validation against a task head; used when
/// training with heads that do not belong to a task (pooled pretraining).
pub(crate) fn backprop_raw(
    spec: &ModelSpec,
    backbone: &Backbone,
    head: &Matrix,
    inputs: &Matrix,
    kind: LossKind,
    labels: Option<&[usize]>,
) -> Result<NetGradients, NnError> {
    let cache = forward_cached(spec, backbone, head, inputs)?;
    let (loss, dlogits) = loss_with_grad(kind, &cache.logits, labels)?;

    let n = backbone.len();
    let head_grad = cache.augmented[n].t_matmul(&dlogits)?;
    let mut dh = drop_last_column(&dlogits.matmul_t(head)?);
    let mut layers = vec![Matrix::zeros(1, 1); n];
    for l in (0..n).rev() {
        let z = &cache.pre[l];
        let dz = Matrix::from_fn(z.rows(), z.cols(), |i, j| {
            dh.get(i, j) * spec.activation.derivative(z.get(i, j))
        });
        layers[l] = cache.augmented[l].t_matmul(&dz)?;
        if l > 0 {
            dh = drop_last_column(&dz.matmul_t(&backbone[l])?);
        }
    }
    Ok(NetGradients {
        loss,
        layers,
        head: head_grad,
    })
}

/// Per-layer weight gradients of the batch loss, keyed by layer name.
pub fn backward_weight_grads(
    spec: &ModelSpec,
    backbone: &Backbone,
    heads: &[Matrix],
    batch: &Batch,
    kind: LossKind,
) -> Result<GradientBundle, NnError> {
    batch.validate(spec)?;
    if kind == LossKind::CrossEntropy && batch.labels.is_none() {
        return Err(NnError::MissingLabels);
    }
    let head = heads.get(batch.task_id).ok_or(NnError::UnknownTask {
        task: batch.task_id,
        num_tasks: heads.len(),
    })?;
    let grads = backprop(
        spec,
        backbone,
        batch.task_id,
        head,
        &batch.inputs,
        kind,
        batch.labels.as_deref(),
    )?;
    Ok(GradientBundle {
        per_layer: grads
            .layers
            .into_iter()
            .enumerate()
            .map(|(l, g)| (layer_name(l), g))
            .collect(),
        loss_value: grads.loss,
    })
}

/// Predicted class per row.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
