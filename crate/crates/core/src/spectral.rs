//! Task vectors and their per-layer spectra.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::linalg::{svd_thin, LinalgError, Matrix, ThinSvd};
use crate::nn::{layer_name, Backbone};

/// Energy fraction used for intrinsic-rank reports.
pub const DEFAULT_ENERGY_FRACTION: f64 = 0.95;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("need at least {needed} fine-tuned checkpoints, got {got}")]
    TooFewCheckpoints { needed: usize, got: usize },
    #[error("task {task}, layer {layer}: shape {actual:?} differs from base {expected:?}")]
    Shape {
        task: usize,
        layer: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("task {task} has {actual} layers, base has {expected}")]
    LayerCount {
        task: usize,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer}: {source}")]
    Decomposition {
        layer: String,
        #[source]
        source: LinalgError,
    },
    #[error("malformed spectral cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// τᵢ = θᵢ − θ₀
    Pretrained,
    /// τᵢ = θᵢ − mean(θ)
    MeanOfFinetuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet {
    pub base: Backbone,
    /// `per_task[i][l]` is τᵢˡ.
    pub per_task: Vec<Backbone>,
    pub base_kind: BaseKind,
}

impl TaskVectorSet {
    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn num_layers(&self) -> usize {
        self.base.len()
    }
}

/// Builds task vectors relative to the pretrained backbone or the mean of
/// the fine-tuned ones.
///
/// Mean-based vectors are computed as `(1/T) Σⱼ (θᵢ − θⱼ)` rather than
/// `θᵢ − θ̄`, which makes `τ₁ = −τ₂` exact for two tasks.
pub fn build_task_vectors(
    pretrained: &Backbone,
    finetuned: &[Backbone],
    base_kind: BaseKind,
) -> Result<TaskVectorSet, SpectralError> {
    let needed = match base_kind {
        BaseKind::Pretrained => 1,
        BaseKind::MeanOfFinetuned => 2,
    };
    if finetuned.len() < needed {
        return Err(SpectralError::TooFewCheckpoints {
            needed,
            got: finetuned.len(),
        });
    }
    for (t, ft) in finetuned.iter().enumerate() {
        if ft.len() != pretrained.len() {
            return Err(SpectralError::LayerCount {
                task: t,
                expected: pretrained.len(),
                actual: ft.len(),
            });
        }
        for (l, (a, b)) in pretrained.layers().iter().zip(ft.layers()).enumerate() {
            if a.shape() != b.shape() {
                return Err(SpectralError::Shape {
                    task: t,
                    layer: layer_name(l),
                    expected: a.shape(),
                    actual: b.shape(),
                });
            }
        }
    }
    let t_count = finetuned.len();
    let (base, per_task) = match base_kind {
        BaseKind::Pretrained => {
            let per_task = finetuned
                .iter()
                .map(|ft| {
                    Backbone(
                        ft.layers()
                            .iter()
                            .zip(pretrained.layers())
                            .map(|(a, b)| a.sub(b).expect("shapes checked"))
                            .collect(),
                    )
                })
                .collect();
            (pretrained.clone(), per_task)
        }
        BaseKind::MeanOfFinetuned => {
            let inv = 1.0 / t_count as f64;
            let mean = Backbone(
                (0..pretrained.len())
                    .map(|l| {
                        let mut acc = finetuned[0][l].clone();
                        for ft in &finetuned[1..] {
                            acc.add_assign(&ft[l]).expect("shapes checked");
                        }
                        acc.scale(inv)
                    })
                    .collect(),
            );
            let per_task = (0..t_count)
                .map(|i| {
                    Backbone(
                        (0..pretrained.len())
                            .map(|l| {
                                let (r, c) = finetuned[i][l].shape();
                                let mut acc = Matrix::zeros(r, c);
                                for j in 0..t_count {
                                    let d = finetuned[i][l].sub(&finetuned[j][l]).expect("checked");
                                    acc.add_assign(&d).expect("checked");
                                }
                                acc.scale(inv)
                            })
                            .collect(),
                    )
                })
                .collect();
            (mean, per_task)
        }
    };
    Ok(TaskVectorSet {
        base,
        per_task,
        base_kind,
    })
}

/// Which singular vectors take part in whitening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhitenScope {
    /// Every component of every task.
    Full,
    /// The leading ⌊k/T⌋ components of each task; the rest are left as is.
    PerTaskShare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSet {
    /// `per_task[i][l]` is the SVD of τᵢˡ (whitened frames when `whitened`).
    pub per_task: Vec<Vec<ThinSvd>>,
    pub whitened: bool,
    pub scope: Option<WhitenScope>,
    /// Per layer: true when the concatenated frame was wider than the ambient
    /// dimension, so whitening could only clamp singular values to one.
    pub clamped: Vec<bool>,
}

impl SpectralSet {
    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn num_layers(&self) -> usize {
        self.per_task.first().map_or(0, Vec::len)
    }

    pub fn rank(&self, task: usize, layer: usize) -> usize {
        self.per_task[task][layer].rank()
    }

    /// Number of components per task that whitening touched at `layer`.
    pub fn whiten_width(&self, layer: usize) -> usize {
        match self.scope {
            None => 0,
            Some(WhitenScope::Full) => self.rank(0, layer),
            Some(WhitenScope::PerTaskShare) => self.rank(0, layer) / self.num_tasks(),
        }
    }
}

/// Per-layer SVD of every task vector, optionally followed by whitening of
/// each task's leading ⌊k/T⌋ components.
pub fn decompose(tv: &TaskVectorSet, whiten: bool) -> Result<SpectralSet, SpectralError> {
    decompose_with(tv, whiten.then_some(WhitenScope::PerTaskShare))
}

pub fn decompose_with(
    tv: &TaskVectorSet,
    scope: Option<WhitenScope>,
) -> Result<SpectralSet, SpectralError> {
    let t_count = tv.num_tasks();
    let n_layers = tv.num_layers();
    let jobs: Vec<(usize, usize)> = (0..t_count)
        .flat_map(|t| (0..n_layers).map(move |l| (t, l)))
        .collect();
    let svds = jobs
        .par_iter()
        .map(|&(t, l)| {
            svd_thin(&tv.per_task[t][l]).map_err(|source| SpectralError::Decomposition {
                layer: layer_name(l),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_task: Vec<Vec<ThinSvd>> = vec![Vec::with_capacity(n_layers); t_count];
    for ((t, _), svd) in jobs.into_iter().zip(svds) {
        per_task[t].push(svd);
    }
    let mut set = SpectralSet {
        per_task,
        whitened: scope.is_some(),
        scope,
        clamped: vec![false; n_layers],
    };
    if let Some(scope) = scope {
        for l in 0..n_layers {
            let k = set.per_task[0][l].rank();
            let width = match scope {
                WhitenScope::Full => k,
                WhitenScope::PerTaskShare => k / t_count,
            };
            if width == 0 {
                continue;
            }
            set.clamped[l] = whiten_layer(&mut set.per_task, l, width)?;
        }
    }
    Ok(set)
}

/// Replaces the leading `width` columns of every task's U and V at `layer`
/// with the nearest orthonormal frame of their concatenation. Returns true if
/// the concatenation was wider than tall (clamped case).
fn whiten_layer(
    per_task: &mut [Vec<ThinSvd>],
    layer: usize,
    width: usize,
) -> Result<bool, SpectralError> {
    let left: Vec<Matrix> = per_task.iter().map(|t| t[layer].u.column_block(0, width)).collect();
    let right: Vec<Matrix> = per_task.iter().map(|t| t[layer].v.column_block(0, width)).collect();
    let (u_perp, u_clamped) = orthonormal_frame(&left, layer)?;
    let (v_perp, v_clamped) = orthonormal_frame(&right, layer)?;
    for (t, task) in per_task.iter_mut().enumerate() {
        let svd = &mut task[layer];
        for r in 0..width {
            for i in 0..svd.u.rows() {
                svd.u.set(i, r, u_perp.get(i, t * width + r));
            }
            for i in 0..svd.v.rows() {
                svd.v.set(i, r, v_perp.get(i, t * width + r));
            }
        }
    }
    Ok(u_clamped || v_clamped)
}

/// Polar factor `P Qᵀ` of `[blocks...] = P S Qᵀ`.
fn orthonormal_frame(blocks: &[Matrix], layer: usize) -> Result<(Matrix, bool), SpectralError> {
    let refs: Vec<&Matrix> = blocks.iter().collect();
    let m = Matrix::hconcat(&refs).expect("blocks share row count");
    let svd = svd_thin(&m).map_err(|source| SpectralError::Decomposition {
        layer: layer_name(layer),
        source,
    })?;
    let frame = svd.u.matmul_t(&svd.v).expect("thin factors conform");
    Ok((frame, m.cols() > m.rows()))
}

/// Smallest k whose leading squared singular values hold `energy_fraction`
/// of the total. An all-zero spectrum has rank 0.
pub fn intrinsic_rank(s: &[f64], energy_fraction: f64) -> usize {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return 0;
    }
    let mut cum = 0.0;
    for (k, x) in s.iter().enumerate() {
        cum += x * x;
        if cum / total >= energy_fraction {
            return k + 1;
        }
    }
    s.len()
}

/// Intrinsic rank of every (task, layer) spectrum.
pub fn intrinsic_ranks(set: &SpectralSet, energy_fraction: f64) -> Vec<Vec<usize>> {
    set.per_task
        .iter()
        .map(|layers| layers.iter().map(|svd| intrinsic_rank(&svd.s, energy_fraction)).collect())
        .collect()
}

fn cache_name(task: usize, layer: usize, part: &str) -> String {
    format!("task{task}.{}.{part}", layer_name(layer))
}

impl SpectralSet {
    /// Serializes into the checkpoint format with `.U`, `.S`, `.V` tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (t, layers) in self.per_task.iter().enumerate() {
            for (l, svd) in layers.iter().enumerate() {
                let s = Matrix::new(1, svd.s.len(), svd.s.clone()).expect("finite spectrum");
                ckpt.push(cache_name(t, l, "U"), svd.u.clone()).expect("unique");
                ckpt.push(cache_name(t, l, "S"), s).expect("unique");
                ckpt.push(cache_name(t, l, "V"), svd.v.clone()).expect("unique");
            }
        }
        ckpt.set_manifest("kind", json!("spectral_set"));
        ckpt.set_manifest("num_tasks", json!(self.num_tasks()));
        ckpt.set_manifest("num_layers", json!(self.num_layers()));
        ckpt.set_manifest("whitened", json!(self.whitened));
        ckpt.set_manifest("scope", serde_json::to_value(self.scope).expect("enum"));
        ckpt.set_manifest("clamped", json!(self.clamped));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SpectralError> {
        let get = |k: &str| {
            ckpt.manifest
                .get(k)
                .cloned()
                .ok_or_else(|| SpectralError::Cache(format!("manifest lacks {k}")))
        };
        let bad = |e: serde_json::Error| SpectralError::Cache(e.to_string());
        let num_tasks: usize = serde_json::from_value(get("num_tasks")?).map_err(bad)?;
        let num_layers: usize = serde_json::from_value(get("num_layers")?).map_err(bad)?;
        let whitened: bool = serde_json::from_value(get("whitened")?).map_err(bad)?;
        let scope: Option<WhitenScope> = serde_json::from_value(get("scope")?).map_err(bad)?;
        let clamped: Vec<bool> = serde_json::from_value(get("clamped")?).map_err(bad)?;
        let mut per_task = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            let mut layers = Vec::with_capacity(num_layers);
            for l in 0..num_layers {
                layers.push(ThinSvd {
                    u: ckpt.require(&cache_name(t, l, "U"))?.clone(),
                    s: ckpt.require(&cache_name(t, l, "S"))?.data().to_vec(),
                    v: ckpt.require(&cache_name(t, l, "V"))?.clone(),
                });
            }
            per_task.push(layers);
        }
        Ok(Self {
            per_task,
            whitened,
            scope,
            clamped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SpectralError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SpectralError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// In-memory cache so a merge session decomposes each configuration once.
#[derive(Debug, Default)]
pub struct SpectralCache {
    entries: HashMap<(String, BaseKind, Option<WhitenScope>), Arc<SpectralSet>>,
}

impl SpectralCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// `digest` identifies the checkpoints the task vectors were built from.
    pub fn get_or_decompose(
        &mut self,
        digest: &str,
        tv: &TaskVectorSet,
        scope: Option<WhitenScope>,
    ) -> Result<Arc<SpectralSet>, SpectralError> {
        let key = (digest.to_string(), tv.base_kind, scope);
        if let Some(hit) = self.entries.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let set = Arc::new(decompose_with(tv, scope)?);
        self.entries.insert(key, Arc::clone(&set));
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
