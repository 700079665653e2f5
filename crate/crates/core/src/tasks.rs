//! Synthetic multi-task suites and the training runs that produce the
//! checkpoints merging consumes.
//!
//! Each task is a Gaussian-mixture classification problem: class means are
//! drawn with a minimum pairwise separation, rotated by a task-specific
//! orthogonal matrix and shifted by a task-specific offset. Tasks differ in
//! their class counts through the difficulty profile, which is what gives
//! their task vectors different intrinsic ranks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::linalg::Matrix;
use crate::nn::{
    self, argmax_rows, backprop_raw, head_name, layer_name, logits_raw, Activation, Backbone,
    Batch, LossKind, ModelSpec, NnError,
};
use crate::optim::{AdamConfig, AdamState};

/// Name of the pooled-class head stored in the pretrained checkpoint.
pub const PRETRAIN_HEAD: &str = "pretrain.head";

/// Minimum distance between class means, in units of the cluster spread.
pub const MIN_SEPARATION: f64 = 4.0;

#[derive(Debug, Error)]
pub enum TasksError {
    #[error("invalid task suite: {0}")]
    InvalidSuite(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("could not place {classes} class means with separation {separation} after {attempts} attempts")]
    Separation {
        classes: usize,
        separation: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSuiteSpec {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_spread: f64,
    /// Scale of the class-mean cloud relative to the spread.
    pub mean_scale: f64,
    pub rotation_seed: u64,
    pub data_seed: u64,
    /// Per-task multiplier on `classes_per_task`; empty means all ones.
    pub difficulty_profile: Vec<f64>,
}

impl Default for TaskSuiteSpec {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            input_dim: 32,
            classes_per_task: 4,
            train_per_class: 200,
            test_per_class: 200,
            cluster_spread: 1.0,
            mean_scale: 1.0,
            rotation_seed: 17,
            data_seed: 29,
            difficulty_profile: vec![1.0, 2.0, 3.0, 4.0],
        }
    }
}

impl TaskSuiteSpec {
    pub fn validate(&self) -> Result<(), TasksError> {
        let bad = |m: &str| Err(TasksError::InvalidSuite(m.to_string()));
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.classes_per_task == 0 {
            return bad("classes_per_task must be positive");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("samples per class must be positive");
        }
        if !(self.cluster_spread > 0.0) || !(self.mean_scale > 0.0) {
            return bad("cluster_spread and mean_scale must be positive");
        }
        if !self.difficulty_profile.is_empty() && self.difficulty_profile.len() != self.num_tasks {
            return bad("difficulty_profile needs one entry per task");
        }
        if self.classes().iter().any(|&c| c < 2) {
            return bad("every task needs at least two classes");
        }
        Ok(())
    }

    /// Class count of every task after applying the difficulty profile.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.num_tasks)
            .map(|t| {
                let mult = self.difficulty_profile.get(t).copied().unwrap_or(1.0);
                (self.classes_per_task as f64 * mult).round().max(0.0) as usize
            })
            .collect()
    }

    pub fn model_spec(&self, hidden_dims: Vec<usize>, activation: Activation) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim,
            hidden_dims,
            num_classes_per_task: self.classes(),
            activation,
        }
    }
}

/// Labelled train and test sets of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub spec: TaskSuiteSpec,
    pub tasks: Vec<TaskData>,
}

impl Suite {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn test_batches(&self) -> Vec<Batch> {
        self.tasks.iter().map(|t| t.test.clone()).collect()
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Haar-ish random rotation: Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_fn(dim, dim, |i, j| cols[j][i])
}

struct TaskGeometry {
    rotation: Matrix,
    means: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

fn task_geometry(spec: &TaskSuiteSpec, task: usize, classes: usize) -> Result<TaskGeometry, TasksError> {
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.rotation_seed, task as u64 + 1));
    let rotation = random_rotation(d, &mut rng);
    let scale = spec.mean_scale * spec.cluster_spread;
    let min_dist = MIN_SEPARATION * spec.cluster_spread;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let max_attempts = 10_000;
    let mut attempts = 0;
    while means.len() < classes {
        attempts += 1;
        if attempts > max_attempts {
            return Err(TasksError::Separation {
                classes,
                separation: min_dist,
                attempts,
            });
        }
        let cand: Vec<f64> = (0..d).map(|_| scale * normal(&mut rng)).collect();
        let ok = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist
        });
        if ok {
            means.push(cand);
        }
    }
    let offset = (0..d).map(|_| spec.cluster_spread * normal(&mut rng)).collect();
    Ok(TaskGeometry {
        rotation,
        means,
        offset,
    })
}

fn sample_split(
    spec: &TaskSuiteSpec,
    geo: &TaskGeometry,
    task: usize,
    per_class: usize,
    seed: u64,
) -> Batch {
    let d = spec.input_dim;
    let classes = geo.means.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for c in 0..classes {
        for _ in 0..per_class {
            for (zi, mi) in z.iter_mut().zip(&geo.means[c]) {
                *zi = mi + spec.cluster_spread * normal(&mut rng);
            }
            for i in 0..d {
                let row = geo.rotation.row(i);
                let x: f64 = row.iter().zip(&z).map(|(r, v)| r * v).sum();
                data.push(x + geo.offset[i]);
            }
            labels.push(c);
        }
    }
    // Interleave classes so any prefix of the stream is a random subsample.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let inputs = Matrix::new(n, d, data).expect("finite samples");
    Batch {
        inputs: Matrix::from_fn(n, d, |i, j| inputs.get(order[i], j)),
        labels: Some(order.iter().map(|&i| labels[i]).collect()),
        task_id: task,
    }
}

/// Generates every task's train and test sets. Deterministic in the spec.
pub fn generate_suite(spec: &TaskSuiteSpec) -> Result<Suite, TasksError> {
    spec.validate()?;
    let classes = spec.classes();
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for (t, &c) in classes.iter().enumerate() {
        let geo = task_geometry(spec, t, c)?;
        let train = sample_split(spec, &geo, t, spec.train_per_class, mix_seed(spec.data_seed, 2 * t as u64 + 1));
        let test = sample_split(spec, &geo, t, spec.test_per_class, mix_seed(spec.data_seed, 2 * t as u64 + 2));
        tasks.push(TaskData { train, test });
    }
    Ok(Suite {
        spec: spec.clone(),
        tasks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 7,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl FinetuneConfig {
    /// Defaults for the brief pooled pretraining run: one epoch at a small
    /// learning rate, leaving headroom for fine-tuning.
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 2e-4,
            ..Self::default()
        }
    }

    /// `epochs == 0` is allowed and means "no training".
    pub fn validate(&self) -> Result<(), TasksError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TasksError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TasksError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Random initialization of a backbone, zero bias rows.
pub fn init_backbone(spec: &ModelSpec, seed: u64) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB0B));
    Backbone(
        spec.layer_shapes()
            .into_iter()
            .map(|(rows, cols)| init_weight(rows, cols, spec.activation, &mut rng))
            .collect(),
    )
}

fn init_weight(rows: usize, cols: usize, act: Activation, rng: &mut ChaCha8Rng) -> Matrix {
    let fan_in = (rows - 1) as f64;
    let bound = match act {
        Activation::Relu => (6.0 / fan_in).sqrt(),
        Activation::Tanh => (6.0 / (fan_in + cols as f64)).sqrt(),
    };
    Matrix::from_fn(rows, cols, |i, _| {
        if i + 1 == rows {
            0.0
        } else {
            rng.random_range(-bound..bound)
        }
    })
}

/// Trains `backbone` and `head` jointly on cross-entropy.
fn train_supervised(
    spec: &ModelSpec,
    backbone: &mut Backbone,
    head: &mut Matrix,
    inputs: &Matrix,
    labels: &[usize],
    config: &FinetuneConfig,
) -> Result<(), TasksError> {
    config.validate()?;
    let n = inputs.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7EA1));
    let num_params = backbone.num_params() + head.data().len();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        num_params,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut params = Vec::with_capacity(num_params);
    let mut grads = Vec::with_capacity(num_params);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = Matrix::from_fn(chunk.len(), inputs.cols(), |i, j| inputs.get(chunk[i], j));
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = backprop_raw(spec, backbone, head, &x, LossKind::CrossEntropy, Some(&y))?;
            if !g.loss.is_finite() {
                return Err(TasksError::Diverged { step, loss: g.loss });
            }
            params.clear();
            grads.clear();
            for (w, gw) in backbone.0.iter().zip(&g.layers) {
                params.extend_from_slice(w.data());
                grads.extend_from_slice(gw.data());
            }
            params.extend_from_slice(head.data());
            grads.extend_from_slice(g.head.data());
            match config.optimizer {
                OptimizerKind::Adam => adam.update(&mut params, &grads),
                OptimizerKind::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grads) {
                        *p -= config.learning_rate * g;
                    }
                }
            }
            let mut offset = 0;
            for w in backbone.0.iter_mut().chain(std::iter::once(&mut *head)) {
                let len = w.data().len();
                w.data_mut().copy_from_slice(&params[offset..offset + len]);
                offset += len;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(TasksError::Diverged { step, loss: f64::NAN });
            }
            step += 1;
        }
    }
    Ok(())
}

fn backbone_into(ckpt: &mut Checkpoint, backbone: &Backbone) -> Result<(), TasksError> {
    for (l, w) in backbone.layers().iter().enumerate() {
        ckpt.push(layer_name(l), w.clone())?;
    }
    Ok(())
}

/// Reads the backbone layers of `spec` from a checkpoint.
pub fn backbone_from(ckpt: &Checkpoint, spec: &ModelSpec) -> Result<Backbone, TasksError> {
    let layers = (0..spec.num_layers())
        .map(|l| ckpt.require(&layer_name(l)).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    let b = Backbone(layers);
    b.check(spec)?;
    Ok(b)
}

/// Columns of the pooled pretraining head that belong to `task`.
pub fn pretrain_head_slice(spec: &ModelSpec, pooled: &Matrix, task: usize) -> Matrix {
    let start: usize = spec.num_classes_per_task[..task].iter().sum();
    pooled.column_block(start, start + spec.num_classes_per_task[task])
}

/// Brief pooled training of a shared backbone from random initialization.
///
/// Labels of all tasks are offset into a single class range and served by a
/// throwaway head that is stored alongside the backbone.
pub fn pretrain(
    spec: &ModelSpec,
    suite: &Suite,
    config: &FinetuneConfig,
) -> Result<Checkpoint, TasksError> {
    spec.validate()?;
    let total_classes: usize = spec.num_classes_per_task.iter().sum();
    let mut backbone = init_backbone(spec, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x4EAD));
    let mut head = init_weight(spec.feature_dim() + 1, total_classes, Activation::Tanh, &mut rng);

    let rows: usize = suite.tasks.iter().map(|t| t.train.len()).sum();
    let mut data = Vec::with_capacity(rows * spec.input_dim);
    let mut labels = Vec::with_capacity(rows);
    let mut offset = 0;
    for (t, task) in suite.tasks.iter().enumerate() {
        data.extend_from_slice(task.train.inputs.data());
        let l = task.train.labels.as_ref().expect("suite batches are labelled");
        labels.extend(l.iter().map(|&c| c + offset));
        offset += spec.num_classes_per_task[t];
    }
    let inputs = Matrix::new(rows, spec.input_dim, data).expect("finite inputs");
    train_supervised(spec, &mut backbone, &mut head, &inputs, &labels, config)?;

    let mut ckpt = Checkpoint::new();
    backbone_into(&mut ckpt, &backbone)?;
    ckpt.push(PRETRAIN_HEAD, head)?;
    ckpt.set_manifest("kind", json!("pretrained"));
    ckpt.set_manifest("config", serde_json::to_value(config).expect("plain struct"));
    ckpt.set_manifest("model", serde_json::to_value(spec).expect("plain struct"));
    Ok(ckpt)
}

/// Fine-tunes backbone and a head for one task, starting from the pretrained
/// checkpoint (head initialized from the task's slice of the pooled head).
/// Test accuracy is recorded in the manifest.
pub fn finetune(
    spec: &ModelSpec,
    base: &Checkpoint,
    suite: &Suite,
    task: usize,
    config: &FinetuneConfig,
) -> Result<Checkpoint, TasksError> {
    if task >= suite.num_tasks() {
        return Err(TasksError::InvalidSuite(format!("no task {task}")));
    }
    let mut backbone = backbone_from(base, spec)?;
    let mut head = pretrain_head_slice(spec, base.require(PRETRAIN_HEAD)?, task);
    let train = &suite.tasks[task].train;
    let labels = train.labels.as_deref().expect("suite batches are labelled");
    train_supervised(spec, &mut backbone, &mut head, &train.inputs, labels, config)?;

    let acc = accuracy(spec, &backbone, task, &head, &suite.tasks[task].test)?;
    let mut ckpt = Checkpoint::new();
    backbone_into(&mut ckpt, &backbone)?;
    ckpt.push(head_name(task), head)?;
    ckpt.set_manifest("kind", json!("finetuned"));
    ckpt.set_manifest("task", json!(task));
    ckpt.set_manifest("test_accuracy", json!(acc));
    ckpt.set_manifest("config", serde_json::to_value(config).expect("plain struct"));
    Ok(ckpt)
}

/// Fine-tunes every task independently (in parallel), in task order.
pub fn finetune_all(
    spec: &ModelSpec,
    base: &Checkpoint,
    suite: &Suite,
    config: &FinetuneConfig,
) -> Result<Vec<Checkpoint>, TasksError> {
    (0..suite.num_tasks())
        .into_par_iter()
        .map(|t| finetune(spec, base, suite, t, config))
        .collect()
}

/// Accuracy of one task head on a labelled batch.
pub fn accuracy(
    spec: &ModelSpec,
    backbone: &Backbone,
    task: usize,
    head: &Matrix,
    batch: &Batch,
) -> Result<f64, TasksError> {
    let logits = nn::forward_with_head(spec, backbone, task, head, &batch.inputs)?;
    let labels = batch.labels.as_ref().expect("evaluation batches are labelled");
    let correct = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of the pooled pretraining head restricted to one task's classes.
pub fn pooled_accuracy(
    spec: &ModelSpec,
    ckpt: &Checkpoint,
    suite: &Suite,
) -> Result<Vec<f64>, TasksError> {
    let backbone = backbone_from(ckpt, spec)?;
    let pooled = ckpt.require(PRETRAIN_HEAD)?;
    (0..suite.num_tasks())
        .map(|t| {
            let head = pretrain_head_slice(spec, pooled, t);
            let logits = logits_raw(spec, &backbone, &head, &suite.tasks[t].test.inputs)?;
            let labels = suite.tasks[t].test.labels.as_ref().expect("labelled");
            let correct = argmax_rows(&logits)
                .iter()
                .zip(labels)
                .filter(|(p, y)| p == y)
                .count();
            Ok(correct as f64 / labels.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub per_task: Vec<f64>,
    pub mean: f64,
}

impl AccuracyTable {
    pub fn from_per_task(per_task: Vec<f64>) -> Self {
        let mean = per_task.iter().sum::<f64>() / per_task.len().max(1) as f64;
        Self { per_task, mean }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,accuracy\n");
        for (t, a) in self.per_task.iter().enumerate() {
            s.push_str(&format!("{t},{a:.17e}\n"));
        }
        s.push_str(&format!("mean,{:.17e}\n", self.mean));
        s
    }
}

/// Test accuracy of every task under a shared backbone and task heads.
pub fn evaluate(
    spec: &ModelSpec,
    backbone: &Backbone,
    heads: &[Matrix],
    suite: &Suite,
) -> Result<AccuracyTable, TasksError> {
    let per_task = suite
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| accuracy(spec, backbone, t, &heads[t], &task.test))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AccuracyTable::from_per_task(per_task))
}

/// Per-task heads extracted from fine-tuned checkpoints, in task order.
pub fn heads_from(checkpoints: &[Checkpoint]) -> Result<Vec<Matrix>, TasksError> {
    checkpoints
        .iter()
        .enumerate()
        .map(|(t, c)| Ok(c.require(&head_name(t))?.clone()))
        .collect()
}

fn labels_matrix(labels: &[usize]) -> Matrix {
    Matrix::from_fn(labels.len(), 1, |i, _| labels[i] as f64)
}

fn labels_from(m: &Matrix, name: &str) -> Result<Vec<usize>, TasksError> {
    (0..m.rows())
        .map(|i| {
            let v = m.get(i, 0);
            if m.cols() != 1 || v < 0.0 || v.fract() != 0.0 {
                Err(TasksError::InvalidSuite(format!("{name} is not a label column")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

impl Suite {
    /// Stores every split as `task{t}.{train,test}.{inputs,labels}`, labels as
    /// a single column; the generating spec goes into the manifest.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for (split, batch) in [("train", &task.train), ("test", &task.test)] {
                let labels = batch.labels.as_deref().expect("suite batches are labelled");
                ckpt.push(format!("task{t}.{split}.inputs"), batch.inputs.clone())
                    .expect("unique names");
                ckpt.push(format!("task{t}.{split}.labels"), labels_matrix(labels))
                    .expect("unique names");
            }
        }
        ckpt.set_manifest("kind", json!("suite"));
        ckpt.set_manifest("spec", serde_json::to_value(&self.spec).expect("plain struct"));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TasksError> {
        let spec: TaskSuiteSpec = ckpt
            .manifest
            .get("spec")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| TasksError::InvalidSuite(format!("bad spec in manifest: {e}")))?
            .ok_or_else(|| TasksError::InvalidSuite("manifest has no spec".into()))?;
        let mut tasks = Vec::with_capacity(spec.num_tasks);
        for t in 0..spec.num_tasks {
            let load = |split: &str| -> Result<Batch, TasksError> {
                let inputs = ckpt.require(&format!("task{t}.{split}.inputs"))?.clone();
                let name = format!("task{t}.{split}.labels");
                let labels = labels_from(ckpt.require(&name)?, &name)?;
                if labels.len() != inputs.rows() {
                    return Err(TasksError::InvalidSuite(format!("{name} has the wrong length")));
                }
                Ok(Batch {
                    inputs,
                    labels: Some(labels),
                    task_id: t,
                })
            };
            tasks.push(TaskData {
                train: load("train")?,
                test: load("test")?,
            });
        }
        Ok(Suite { spec, tasks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSuiteSpec {
        TaskSuiteSpec {
            num_tasks: 2,
            input_dim: 6,
            classes_per_task: 3,
            train_per_class: 20,
            test_per_class: 10,
            difficulty_profile: vec![],
            ..TaskSuiteSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small_spec();
        assert_eq!(generate_suite(&s).unwrap(), generate_suite(&s).unwrap());
        let mut other = s.clone();
        other.data_seed += 1;
        assert_ne!(generate_suite(&s).unwrap(), generate_suite(&other).unwrap());
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = small_spec();
        s.classes_per_task = 0;
        assert!(matches!(generate_suite(&s), Err(TasksError::InvalidSuite(_))));
        let mut s = small_spec();
        s.difficulty_profile = vec![1.0];
        assert!(generate_suite(&s).is_err());
    }

    #[test]
    fn suite_checkpoint_round_trip() {
        let spec = TaskSuiteSpec {
            num_tasks: 2,
            train_per_class: 3,
            test_per_class: 2,
            difficulty_profile: vec![1.0, 2.0],
            ..TaskSuiteSpec::default()
        };
        let suite = generate_suite(&spec).unwrap();
        let bytes = suite.to_checkpoint().to_bytes();
        let back = Suite::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, suite);
    }

    #[test]
    fn profile_sets_class_counts() {
        let s = TaskSuiteSpec::default();
        assert_eq!(s.classes(), vec![4, 8, 12, 16]);
        let suite = generate_suite(&TaskSuiteSpec {
            train_per_class: 2,
            test_per_class: 2,
            ..s
        })
        .unwrap();
        assert_eq!(suite.tasks[3].train.len(), 32);
        let labels = suite.tasks[3].train.labels.as_ref().unwrap();
        for c in 0..16 {
            assert_eq!(labels.iter().filter(|&&y| y == c).count(), 2);
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(7, &mut rng);
        let g = r.t_matmul(&r).unwrap();
        assert!(g.sub(&Matrix::identity(7)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_epoch_pretrain_returns_initialization() {
        let s = small_spec();
        let suite = generate_suite(&s).unwrap();
        let spec = s.model_spec(vec![5], Activation::Relu);
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::pretrain_default()
        };
        let ckpt = pretrain(&spec, &suite, &cfg).unwrap();
        assert_eq!(backbone_from(&ckpt, &spec).unwrap(), init_backbone(&spec, cfg.seed));
    }

    #[test]
    fn zero_learning_rate_keeps_backbone() {
        let s = small_spec();
        let suite = generate_suite(&s).unwrap();
        let spec = s.model_spec(vec![5], Activation::Tanh);
        let base = pretrain(&spec, &suite, &FinetuneConfig::pretrain_default()).unwrap();
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..FinetuneConfig::default()
        };
        let ft = finetune(&spec, &base, &suite, 1, &cfg).unwrap();
        assert_eq!(backbone_from(&ft, &spec).unwrap(), backbone_from(&base, &spec).unwrap());
    }

    #[test]
    fn accuracy_table_mean() {
        let t = AccuracyTable::from_per_task(vec![0.5, 1.0]);
        assert_eq!(t.mean, 0.75);
        assert!(t.to_csv().starts_with("task,accuracy\n0,"));
    }
}
