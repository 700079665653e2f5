//! Diagnostics: per-component loss sweeps, Taylor terms, joint interactions,
//! learned-versus-intrinsic rank reports and mask heatmaps.
//!
//! Everything here is read-only with respect to checkpoints and mask state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{fmt_real, MaskState};
use crate::linalg::Matrix;
use crate::merge::{top_fraction_count, MaskBits, MergeError};
use crate::nn::{backprop, forward_with_head, loss_with_grad, Backbone, Batch, LossKind, ModelSpec, NnError};
use crate::spectral::{intrinsic_ranks, SpectralSet, TaskVectorSet};

pub use crate::adapt::supervised_oracle_adapt;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("labels missing for task {0}")]
    MissingLabels(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed heatmap: {0}")]
    Parse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Merge(#[from] MergeError),
}

/// A scalar loss over backbone weights with its gradient.
pub trait Objective: Sync {
    fn loss(&self, theta: &Backbone) -> Result<f64, AnalysisError>;
    fn gradient(&self, theta: &Backbone) -> Result<Backbone, AnalysisError>;
}

/// Sum over `tasks` of batch-mean losses, each through the task's own head.
pub struct TaskObjective<'a> {
    pub spec: &'a ModelSpec,
    pub heads: &'a [Matrix],
    pub batches: &'a [Batch],
    pub kind: LossKind,
    pub tasks: Vec<usize>,
}

impl<'a> TaskObjective<'a> {
    /// Objective summed over every task.
    pub fn all(spec: &'a ModelSpec, heads: &'a [Matrix], batches: &'a [Batch], kind: LossKind) -> Self {
        Self {
            spec,
            heads,
            batches,
            kind,
            tasks: (0..batches.len()).collect(),
        }
    }

    fn labels(&self, t: usize) -> Result<Option<&'a [usize]>, AnalysisError> {
        match self.kind {
            LossKind::Entropy => Ok(None),
            LossKind::CrossEntropy => self.batches[t]
                .labels
                .as_deref()
                .map(Some)
                .ok_or(AnalysisError::MissingLabels(t)),
        }
    }

    /// Loss of a single task.
    pub fn task_loss(&self, theta: &Backbone, t: usize) -> Result<f64, AnalysisError> {
        let logits = forward_with_head(self.spec, theta, t, &self.heads[t], &self.batches[t].inputs)?;
        Ok(loss_with_grad(self.kind, &logits, self.labels(t)?)?.0)
    }
}

impl Objective for TaskObjective<'_> {
    fn loss(&self, theta: &Backbone) -> Result<f64, AnalysisError> {
        let mut total = 0.0;
        for &t in &self.tasks {
            total += self.task_loss(theta, t)?;
        }
        Ok(total)
    }

    fn gradient(&self, theta: &Backbone) -> Result<Backbone, AnalysisError> {
        let mut grad = theta.zeros_like();
        for &t in &self.tasks {
            let b = &self.batches[t];
            let g = backprop(self.spec, theta, t, &self.heads[t], &b.inputs, self.kind, self.labels(t)?)?;
            for (acc, gl) in grad.0.iter_mut().zip(&g.layers) {
                acc.add_assign(gl).expect("same shapes");
            }
        }
        Ok(grad)
    }
}

/// `½‖θ‖²`, whose Hessian is the identity.
pub struct HalfSquaredNorm;

impl Objective for HalfSquaredNorm {
    fn loss(&self, theta: &Backbone) -> Result<f64, AnalysisError> {
        Ok(0.5 * backbone_dot(theta, theta))
    }

    fn gradient(&self, theta: &Backbone) -> Result<Backbone, AnalysisError> {
        Ok(theta.clone())
    }
}

pub fn backbone_dot(a: &Backbone, b: &Backbone) -> f64 {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| x.dot(y).expect("same shapes"))
        .sum()
}

/// `a + alpha·b`, layer by layer.
pub fn backbone_axpy(a: &Backbone, alpha: f64, b: &Backbone) -> Backbone {
    let mut out = a.clone();
    for (o, d) in out.0.iter_mut().zip(b.layers()) {
        o.axpy(alpha, d).expect("same shapes");
    }
    out
}

/// The unit-norm rank-one direction `u_r v_rᵀ` of one component, embedded in
/// a backbone of zeros, with its singular value.
pub fn component_direction(
    spectra: &SpectralSet,
    like: &Backbone,
    task: usize,
    layer: usize,
    r: usize,
) -> Result<(f64, Backbone), AnalysisError> {
    if task >= spectra.num_tasks() || layer >= spectra.num_layers() {
        return Err(AnalysisError::InvalidArgument(format!("no component at task {task}, layer {layer}")));
    }
    let svd = &spectra.per_task[task][layer];
    if r >= svd.rank() {
        return Err(AnalysisError::InvalidArgument(format!("component {r} out of range {}", svd.rank())));
    }
    let mut dir = like.zeros_like();
    dir.0[layer] = Matrix::from_fn(svd.rows(), svd.cols(), |i, j| svd.u.get(i, r) * svd.v.get(j, r));
    Ok((svd.s[r], dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub component: usize,
    pub sigma: f64,
    /// `ΔLₜ(r)` for every task t.
    pub per_task: Vec<f64>,
    /// `ΔL(r) = Σₜ ΔLₜ(r)`
    pub net: f64,
}

/// Loss changes from adding single components of one task's vector to the
/// merge of all other tasks, at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub excluded_task: usize,
    pub layer: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// `ΔLᵢ(r)`, the excluded task's own entry, for every row.
    pub fn own(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.per_task[self.excluded_task]).collect()
    }

    /// `task_excluded,component,sigma,dL_total,dL_task_0…`
    pub fn to_csv(&self) -> String {
        let tasks = self.rows.first().map_or(0, |r| r.per_task.len());
        let mut s = String::from("task_excluded,component,sigma,dL_total");
        for t in 0..tasks {
            s.push_str(&format!(",dL_task_{t}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}",
                self.excluded_task,
                r.component,
                fmt_real(r.sigma),
                fmt_real(r.net)
            ));
            for v in &r.per_task {
                s.push(',');
                s.push_str(&fmt_real(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Which components a sweep visits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepWindow {
    /// Only the leading ⌊f·k⌋ indices (at least one).
    pub top_fraction: Option<f64>,
    pub stride: usize,
}

impl Default for SweepWindow {
    fn default() -> Self {
        Self {
            top_fraction: Some(0.1),
            stride: 1,
        }
    }
}

impl SweepWindow {
    pub fn indices(&self, rank: usize) -> Result<Vec<usize>, AnalysisError> {
        if self.stride == 0 {
            return Err(AnalysisError::InvalidArgument("stride must be positive".into()));
        }
        let end = match self.top_fraction {
            None => rank,
            Some(f) if f > 0.0 && f <= 1.0 => top_fraction_count(f, rank).max(1).min(rank),
            Some(f) => return Err(AnalysisError::InvalidArgument(format!("top fraction {f} not in (0, 1]"))),
        };
        Ok((0..end).step_by(self.stride).collect())
    }
}

/// Merge of every task but `excluded`: `θ₀ + λ Σ_{j≠i} τⱼ`.
pub fn merge_excluding(tv: &TaskVectorSet, excluded: usize, lambda: f64) -> Backbone {
    let mut out = tv.base.clone();
    for (j, tau) in tv.per_task.iter().enumerate() {
        if j == excluded {
            continue;
        }
        for (o, d) in out.0.iter_mut().zip(tau.layers()) {
            o.axpy(lambda, d).expect("same shapes");
        }
    }
    out
}

/// `ΔLₜ(r) = Lₜ(θₘ + λ s_ir) − Lₜ(θₘ)` for the components of task `excluded`
/// at `layer` selected by `window`, evaluated exactly for every task.
#[allow(clippy::too_many_arguments)]
pub fn component_sweep(
    spec: &ModelSpec,
    tv: &TaskVectorSet,
    spectra: &SpectralSet,
    heads: &[Matrix],
    batches: &[Batch],
    excluded: usize,
    layer: usize,
    lambda: f64,
    window: SweepWindow,
    kind: LossKind,
) -> Result<SweepReport, AnalysisError> {
    if excluded >= tv.num_tasks() || layer >= tv.num_layers() {
        return Err(AnalysisError::InvalidArgument(format!(
            "no task {excluded} / layer {layer}"
        )));
    }
    if batches.len() != tv.num_tasks() || heads.len() != tv.num_tasks() {
        return Err(AnalysisError::InvalidArgument("one batch and head per task required".into()));
    }
    let objective = TaskObjective::all(spec, heads, batches, kind);
    let theta_m = merge_excluding(tv, excluded, lambda);
    let tasks = tv.num_tasks();
    let baseline = (0..tasks)
        .map(|t| objective.task_loss(&theta_m, t))
        .collect::<Result<Vec<_>, _>>()?;
    let indices = window.indices(spectra.rank(excluded, layer))?;
    let rows = indices
        .par_iter()
        .map(|&r| {
            let (sigma, dir) = component_direction(spectra, &theta_m, excluded, layer, r)?;
            let perturbed = backbone_axpy(&theta_m, lambda * sigma, &dir);
            let mut per_task = Vec::with_capacity(tasks);
            for (t, base) in baseline.iter().enumerate() {
                per_task.push(objective.task_loss(&perturbed, t)? - base);
            }
            let net = per_task.iter().sum();
            Ok(SweepRow {
                component: r,
                sigma,
                per_task,
                net,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(SweepReport {
        excluded_task: excluded,
        layer,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorRow {
    pub component: usize,
    /// `σ ∇L·s̄`
    pub first_order: f64,
    /// `σ² s̄ᵀHs̄`, Hessian-vector product by central differences of the gradient.
    pub quadratic: f64,
    /// `L(θ + σ s̄) − L(θ)`
    pub direct: f64,
}

/// Default finite-difference step `1e-4·(1 + ‖θ‖/√n)`.
pub fn default_epsilon(theta: &Backbone) -> f64 {
    let n = theta.num_params().max(1) as f64;
    1e-4 * (1.0 + theta.frobenius_norm() / n.sqrt())
}

/// Taylor terms of adding `sigma·direction` to `theta`.
pub fn taylor_terms(
    objective: &dyn Objective,
    theta: &Backbone,
    direction: &Backbone,
    sigma: f64,
    epsilon: f64,
) -> Result<TaylorRow, AnalysisError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AnalysisError::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let grad = objective.gradient(theta)?;
    let first_order = sigma * backbone_dot(&grad, direction);
    let gp = objective.gradient(&backbone_axpy(theta, epsilon, direction))?;
    let gm = objective.gradient(&backbone_axpy(theta, -epsilon, direction))?;
    let hvp = backbone_axpy(&gp, -1.0, &gm);
    let quadratic = sigma * sigma * backbone_dot(direction, &hvp) / (2.0 * epsilon);
    let direct = objective.loss(&backbone_axpy(theta, sigma, direction))? - objective.loss(theta)?;
    let row = TaylorRow {
        component: 0,
        first_order,
        quadratic,
        direct,
    };
    if !(first_order.is_finite() && quadratic.is_finite() && direct.is_finite()) {
        return Err(AnalysisError::NonFinite("taylor terms"));
    }
    Ok(row)
}

/// `component,first_order,quadratic,direct`
pub fn taylor_csv(rows: &[TaylorRow]) -> String {
    let mut s = String::from("component,first_order,quadratic,direct\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.component,
            fmt_real(r.first_order),
            fmt_real(r.quadratic),
            fmt_real(r.direct)
        ));
    }
    s
}

/// `L(θ+sᵢ+sⱼ) − (L(θ+sᵢ) + L(θ+sⱼ) − L(θ))`, evaluated as
/// `(L(θ+(sᵢ+sⱼ)) + L(θ)) − (L(θ+sᵢ) + L(θ+sⱼ))` so that it is exactly
/// symmetric and exactly zero when either argument is zero.
pub fn joint_interaction(
    objective: &dyn Objective,
    theta: &Backbone,
    s_i: &Backbone,
    s_j: &Backbone,
) -> Result<f64, AnalysisError> {
    let both = backbone_axpy(s_i, 1.0, s_j);
    let l_ij = objective.loss(&backbone_axpy(theta, 1.0, &both))?;
    let l_i = objective.loss(&backbone_axpy(theta, 1.0, s_i))?;
    let l_j = objective.loss(&backbone_axpy(theta, 1.0, s_j))?;
    let l_0 = objective.loss(theta)?;
    Ok((l_ij + l_0) - (l_i + l_j))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub task: usize,
    pub layer: usize,
    pub rank: usize,
    pub learned: usize,
    pub intrinsic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
    /// Spearman correlation of learned against intrinsic ranks; `None` when
    /// either side is constant.
    pub spearman: Option<f64>,
}

impl RankReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,layer,rank,learned_rank,intrinsic_rank\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.task, r.layer, r.rank, r.learned, r.intrinsic));
        }
        s
    }
}

/// Learned rank (active bits) against intrinsic rank per (task, layer).
pub fn rank_report(bits: &MaskBits, spectra: &SpectralSet, energy_fraction: f64) -> RankReport {
    let intrinsic = intrinsic_ranks(spectra, energy_fraction);
    let mut rows = Vec::new();
    for t in 0..spectra.num_tasks() {
        for l in 0..spectra.num_layers() {
            rows.push(RankRow {
                task: t,
                layer: l,
                rank: spectra.rank(t, l),
                learned: bits.active_count(t, l),
                intrinsic: intrinsic[t][l],
            });
        }
    }
    let a: Vec<f64> = rows.iter().map(|r| r.learned as f64).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.intrinsic as f64).collect();
    RankReport {
        spearman: spearman(&a, &b),
        rows,
    }
}

/// Ranks with ties sharing their average position (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Plot-ready mask heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `task,layer,c0,c1,…`; one row per (task, layer), cells in {0,1};
    /// cells past a layer's rank are empty.
    pub cells: String,
    /// `layer,component,count`: active bits per index summed over tasks.
    pub summary: String,
}

pub fn export_mask_heatmap(bits: &MaskBits) -> Heatmap {
    let width = bits.bits.iter().flatten().map(Vec::len).max().unwrap_or(0);
    let mut cells = String::from("task,layer");
    for c in 0..width {
        cells.push_str(&format!(",c{c}"));
    }
    cells.push('\n');
    for (t, layers) in bits.bits.iter().enumerate() {
        for (l, b) in layers.iter().enumerate() {
            cells.push_str(&format!("{t},{l}"));
            for c in 0..width {
                cells.push(',');
                if let Some(&x) = b.get(c) {
                    cells.push(if x { '1' } else { '0' });
                }
            }
            cells.push('\n');
        }
    }
    let mut summary = String::from("layer,component,count\n");
    let layers = bits.bits.first().map_or(0, Vec::len);
    for l in 0..layers {
        let k = bits.bits.iter().map(|t| t[l].len()).max().unwrap_or(0);
        for c in 0..k {
            let count = bits.bits.iter().filter(|t| t[l].get(c).copied().unwrap_or(false)).count();
            summary.push_str(&format!("{l},{c},{count}\n"));
        }
    }
    Heatmap { cells, summary }
}

pub fn export_state_heatmap(state: &MaskState) -> Heatmap {
    export_mask_heatmap(&state.bits())
}

/// Inverse of the cell table of [`export_mask_heatmap`].
pub fn parse_mask_heatmap(csv: &str) -> Result<MaskBits, AnalysisError> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| AnalysisError::Parse("empty input".into()))?;
    if !header.starts_with("task,layer") {
        return Err(AnalysisError::Parse(format!("unexpected header {header:?}")));
    }
    let mut bits: Vec<Vec<Vec<bool>>> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(AnalysisError::Parse(format!("line {}: too few fields", n + 2)));
        }
        let parse_idx = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| AnalysisError::Parse(format!("line {}: bad index {s:?}", n + 2)))
        };
        let (t, l) = (parse_idx(fields[0])?, parse_idx(fields[1])?);
        if t != bits.len().saturating_sub(1) || bits.is_empty() {
            if t != bits.len() {
                return Err(AnalysisError::Parse(format!("line {}: task {t} out of order", n + 2)));
            }
            bits.push(Vec::new());
        }
        if l != bits[t].len() {
            return Err(AnalysisError::Parse(format!("line {}: layer {l} out of order", n + 2)));
        }
        let mut row = Vec::new();
        let mut ended = false;
        for f in &fields[2..] {
            match *f {
                "1" | "0" if !ended => row.push(*f == "1"),
                "" => ended = true,
                other => {
                    return Err(AnalysisError::Parse(format!("line {}: bad cell {other:?}", n + 2)));
                }
            }
        }
        bits[t].push(row);
    }
    Ok(MaskBits { bits })
}
