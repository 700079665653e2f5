//! File-based commands. Each command reads the artifacts of earlier commands
//! from the output directory, writes its own into a subdirectory and records
//! a manifest there.
//!
//! ```text
//! <out>/data/suite.adrk
//! <out>/checkpoints/pretrained.adrk, task{t}.adrk
//! <out>/merge/merged.adrk, accuracy.csv
//! <out>/adapt/mask.adrk, trace.csv, accuracy.csv
//! <out>/eval/accuracy.csv
//! <out>/analyze/sweep_layer{l}.csv, taylor_task{t}_layer{l}.csv, ...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adapt::{fmt_real, MaskState};
use crate::analysis::{
    component_direction, component_sweep, default_epsilon, export_mask_heatmap, joint_interaction,
    merge_excluding, rank_report, taylor_csv, taylor_terms, TaskObjective,
};
use crate::checkpoint::{sha256_hex, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::merge::{MergeMethod, MergePlan};
use crate::nn::{head_name, layer_name, Backbone, Batch};
use crate::pipeline::{self, Models, PipelineError};
use crate::tasks::{accuracy, evaluate, AccuracyTable, Suite};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Read { source, .. } => match source {
                CheckpointError::Io(_) => EXIT_IO,
                _ => EXIT_CONFIG,
            },
            CliError::Pipeline(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Pipeline(e) if e.io_error().is_some() => EXIT_IO,
            CliError::Pipeline(PipelineError::Config(_)) => EXIT_CONFIG,
            CliError::Pipeline(_) => EXIT_CONFIG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train,
    Merge,
    Adapt,
    Eval,
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Merge => "merge",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Command::Gen => "data",
            Command::Train => "checkpoints",
            other => other.name(),
        }
    }
}

/// Manifest written next to a command's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub manifest: Value,
    pub dir: PathBuf,
}

impl Report {
    pub fn warnings(&self) -> Vec<String> {
        self.manifest["warnings"]
            .as_array()
            .map(|a| a.iter().filter_map(|w| w.as_str().map(String::from)).collect())
            .unwrap_or_default()
    }
}

pub fn run(command: Command, cfg: &RunConfig, force: bool) -> Result<Report, CliError> {
    cfg.validate()?;
    let mut job = Job::new(command, cfg, force)?;
    match command {
        Command::Gen => cmd_gen(&mut job)?,
        Command::Train => cmd_train(&mut job)?,
        Command::Merge => cmd_merge(&mut job)?,
        Command::Adapt => cmd_adapt(&mut job)?,
        Command::Eval => cmd_eval(&mut job)?,
        Command::Analyze => cmd_analyze(&mut job)?,
    }
    job.finish()
}

/// Digest of the configuration with the output location removed, which does
/// not influence any result.
pub fn config_digest(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    sha256_hex(c.to_toml().as_bytes())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Job<'a> {
    command: Command,
    cfg: &'a RunConfig,
    root: PathBuf,
    dir: PathBuf,
    force: bool,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    replaced: BTreeMap<String, String>,
    warnings: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl<'a> Job<'a> {
    fn new(command: Command, cfg: &'a RunConfig, force: bool) -> Result<Self, CliError> {
        let root = cfg.output_dir.clone();
        let dir = root.join(command.dir());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            command,
            cfg,
            root,
            dir,
            force,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            replaced: BTreeMap::new(),
            warnings: Vec::new(),
            extra: serde_json::Map::new(),
        })
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn read(&mut self, rel: &str) -> Result<Vec<u8>, CliError> {
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_checkpoint(&mut self, rel: &str) -> Result<Checkpoint, CliError> {
        let bytes = self.read(rel)?;
        Checkpoint::from_bytes(&bytes).map_err(|source| CliError::Read {
            path: self.root.join(rel),
            source,
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if path.exists() {
            if !self.force {
                return Err(CliError::Exists(path));
            }
            let old = fs::read(&path).map_err(io_err(&path))?;
            let digest = sha256_hex(&old);
            info!("replacing {} (previous digest {digest})", path.display());
            self.replaced.insert(self.rel(&path), digest);
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.outputs.insert(self.rel(&path), sha256_hex(bytes));
        Ok(())
    }

    fn check_free(&self, names: &[String]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.dir.join(n);
            if p.exists() {
                return Err(CliError::Exists(p));
            }
        }
        let manifest = self.dir.join("manifest.json");
        if manifest.exists() {
            return Err(CliError::Exists(manifest));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Report, CliError> {
        for w in &self.warnings {
            warn!("{w}");
        }
        let mut m = serde_json::Map::new();
        m.insert("command".into(), json!(self.command.name()));
        m.insert("tool_version".into(), json!(TOOL_VERSION));
        m.insert("config_digest".into(), json!(config_digest(self.cfg)));
        let mut cfg = self.cfg.clone();
        cfg.output_dir = PathBuf::new();
        m.insert("config".into(), json!(cfg.to_toml()));
        m.insert("inputs".into(), json!(self.inputs));
        m.insert("outputs".into(), json!(self.outputs));
        if !self.replaced.is_empty() {
            m.insert("replaced".into(), json!(self.replaced));
        }
        m.insert("warnings".into(), json!(self.warnings));
        m.append(&mut self.extra);
        let manifest = Value::Object(m);
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("plain JSON");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(Report {
            manifest,
            dir: self.dir,
        })
    }

    fn suite(&mut self) -> Result<Suite, CliError> {
        let ckpt = self.read_checkpoint("data/suite.adrk")?;
        Ok(Suite::from_checkpoint(&ckpt).map_err(PipelineError::from)?)
    }

    fn models(&mut self, suite: &Suite) -> Result<Models, CliError> {
        let spec = suite
            .spec
            .model_spec(self.cfg.model.hidden_dims.clone(), self.cfg.model.activation);
        let pre = self.read_checkpoint("checkpoints/pretrained.adrk")?;
        let fts = (0..suite.num_tasks())
            .map(|t| self.read_checkpoint(&format!("checkpoints/task{t}.adrk")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Models::from_checkpoints(&spec, &pre, &fts)?)
    }
}

fn cmd_gen(job: &mut Job) -> Result<(), CliError> {
    job.check_free(&["suite.adrk".into()])?;
    let suite = pipeline::generate(job.cfg)?;
    job.write("suite.adrk", &suite.to_checkpoint().to_bytes())?;
    job.extra.insert("suite".into(), json!(suite.spec));
    Ok(())
}

fn cmd_train(job: &mut Job) -> Result<(), CliError> {
    let suite = job.suite()?;
    let mut names = vec!["pretrained.adrk".to_string()];
    names.extend((0..suite.num_tasks()).map(|t| format!("task{t}.adrk")));
    job.check_free(&names)?;
    let spec = suite
        .spec
        .model_spec(job.cfg.model.hidden_dims.clone(), job.cfg.model.activation);
    let pre = crate::tasks::pretrain(&spec, &suite, &job.cfg.pretrain_config()).map_err(PipelineError::from)?;
    let fts = crate::tasks::finetune_all(&spec, &pre, &suite, &job.cfg.finetune_config())
        .map_err(PipelineError::from)?;
    job.write("pretrained.adrk", &pre.to_bytes())?;
    let mut accs = Vec::new();
    for (t, c) in fts.iter().enumerate() {
        job.write(&format!("task{t}.adrk"), &c.to_bytes())?;
        accs.push(c.manifest["test_accuracy"].clone());
    }
    job.extra.insert("test_accuracy".into(), Value::Array(accs));
    Ok(())
}

fn backbone_digest(b: &Backbone) -> String {
    let mut c = Checkpoint::new();
    for (l, w) in b.layers().iter().enumerate() {
        c.push(layer_name(l), w.clone()).expect("unique names");
    }
    c.digest()
}

fn merged_checkpoint(b: &Backbone, heads: &[crate::linalg::Matrix], plan: &MergePlan) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (l, w) in b.layers().iter().enumerate() {
        c.push(layer_name(l), w.clone()).expect("unique names");
    }
    for (t, h) in heads.iter().enumerate() {
        c.push(head_name(t), h.clone()).expect("unique names");
    }
    c.set_manifest("kind", json!("merged"));
    c.set_manifest("plan", serde_json::to_value(plan).expect("plain struct"));
    c
}

fn mask_path(cfg: &RunConfig) -> PathBuf {
    cfg.mask_file
        .clone()
        .unwrap_or_else(|| PathBuf::from("adapt/mask.adrk"))
}

/// Mask state plus the plan whose decomposition it refers to.
fn load_mask(job: &mut Job) -> Result<Option<(MaskState, MergePlan)>, CliError> {
    let rel = mask_path(job.cfg);
    let rel = rel.to_string_lossy().into_owned();
    let full = job.root.join(&rel);
    if !full.exists() {
        return Ok(None);
    }
    let ckpt = job.read_checkpoint(&rel)?;
    let state = MaskState::from_checkpoint(&ckpt).map_err(PipelineError::from)?;
    let plan = match ckpt.manifest.get("plan") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| ConfigError::Invalid(format!("{rel}: bad plan in manifest: {e}")))?,
        None => job.cfg.merge.clone(),
    };
    Ok(Some((state, plan)))
}

fn masked_merge(models: &Models, state: &MaskState, plan: &MergePlan) -> Result<Backbone, CliError> {
    let (tv, spectra) = models.spectral(plan)?;
    state.validate(&spectra).map_err(PipelineError::from)?;
    Ok(state.merged(&tv.base, &spectra).map_err(PipelineError::from)?)
}

fn cmd_merge(job: &mut Job) -> Result<(), CliError> {
    job.check_free(&["merged.adrk".into(), "accuracy.csv".into()])?;
    let suite = job.suite()?;
    let models = job.models(&suite)?;
    let plan = job.cfg.merge.clone();
    let merged = if plan.method == MergeMethod::Masked {
        let Some((state, mask_plan)) = load_mask(job)? else {
            return Err(ConfigError::Invalid(format!(
                "the masked method requires a mask file ({} not found)",
                mask_path(job.cfg).display()
            ))
            .into());
        };
        masked_merge(&models, &state, &mask_plan)?
    } else {
        models.static_merge(&plan)?
    };
    let table = evaluate(&models.spec, &merged, &models.heads, &suite).map_err(PipelineError::from)?;
    job.write("merged.adrk", &merged_checkpoint(&merged, &models.heads, &plan).to_bytes())?;
    job.write("accuracy.csv", table.to_csv().as_bytes())?;
    let inputs: Vec<String> = models.finetuned.iter().map(backbone_digest).collect();
    job.extra.insert("backbone_digest".into(), json!(backbone_digest(&merged)));
    job.extra.insert("input_backbone_digests".into(), json!(inputs));
    job.extra.insert("accuracy".into(), json!(table));
    Ok(())
}

fn cmd_adapt(job: &mut Job) -> Result<(), CliError> {
    job.check_free(&["mask.adrk".into(), "trace.csv".into(), "accuracy.csv".into()])?;
    let suite = job.suite()?;
    let models = job.models(&suite)?;
    let cfg = job.cfg;
    let adapted = models.adapt(cfg, &suite)?;
    let before = {
        let (tv, sp) = (&adapted.task_vectors, &adapted.spectra);
        let init = models.initial_state(cfg, sp)?;
        let b = init.merged(&tv.base, sp).map_err(PipelineError::from)?;
        evaluate(&models.spec, &b, &models.heads, &suite).map_err(PipelineError::from)?
    };
    let after = evaluate(&models.spec, &adapted.merged, &models.heads, &suite).map_err(PipelineError::from)?;
    let mut mask = adapted.outcome.state.to_checkpoint();
    mask.set_manifest("plan", serde_json::to_value(&cfg.merge).expect("plain struct"));
    job.write("mask.adrk", &mask.to_bytes())?;
    let trace = adapted
        .outcome
        .trace
        .to_csv(models.spec.num_tasks(), models.spec.num_layers());
    job.write("trace.csv", trace.as_bytes())?;
    job.write("accuracy.csv", after.to_csv().as_bytes())?;
    job.extra.insert("accuracy_before".into(), json!(before));
    job.extra.insert("accuracy_after".into(), json!(after));
    job.extra.insert("active_bits".into(), json!(adapted.outcome.state.active_counts()));
    Ok(())
}

fn table_row(name: &str, table: &AccuracyTable) -> String {
    let mut s = name.to_string();
    for a in &table.per_task {
        s.push(',');
        s.push_str(&fmt_real(*a));
    }
    s.push(',');
    s.push_str(&fmt_real(table.mean));
    s.push('\n');
    s
}

fn cmd_eval(job: &mut Job) -> Result<(), CliError> {
    job.check_free(&["accuracy.csv".into()])?;
    let suite = job.suite()?;
    let models = job.models(&suite)?;
    let spec = &models.spec;
    let mut csv = String::from("model");
    for t in 0..suite.num_tasks() {
        csv.push_str(&format!(",task_{t}"));
    }
    csv.push_str(",mean\n");

    let individual = (0..suite.num_tasks())
        .map(|t| accuracy(spec, &models.finetuned[t], t, &models.heads[t], &suite.tasks[t].test))
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::from)?;
    let individual = AccuracyTable::from_per_task(individual);
    csv.push_str(&table_row("individual", &individual));
    let eval = |b: &Backbone| evaluate(spec, b, &models.heads, &suite).map_err(PipelineError::from);
    csv.push_str(&table_row("pretrained", &eval(&models.pretrained)?));
    if job.cfg.merge.method != MergeMethod::Masked {
        csv.push_str(&table_row("static", &eval(&models.static_merge(&job.cfg.merge)?)?));
    }
    if job.root.join("merge/merged.adrk").exists() {
        let ckpt = job.read_checkpoint("merge/merged.adrk")?;
        let b = crate::tasks::backbone_from(&ckpt, spec).map_err(PipelineError::from)?;
        csv.push_str(&table_row("merged", &eval(&b)?));
    }
    if let Some((state, plan)) = load_mask(job)? {
        let b = masked_merge(&models, &state, &plan)?;
        csv.push_str(&table_row("adapted", &eval(&b)?));
    }
    job.write("accuracy.csv", csv.as_bytes())?;
    job.extra.insert("individual".into(), json!(individual));
    Ok(())
}

fn cmd_analyze(job: &mut Job) -> Result<(), CliError> {
    job.check_free(&[])?;
    let sel = job.cfg.analysis.clone();
    if !sel.any() {
        job.warnings.push("no analyses selected; nothing was computed".into());
        return Ok(());
    }
    let suite = job.suite()?;
    let models = job.models(&suite)?;
    let plan = job.cfg.merge.clone();
    if plan.method == MergeMethod::WeightAverage || plan.method == MergeMethod::Masked {
        return Err(ConfigError::Invalid("analysis needs a task_arithmetic or topk_svd plan".into()).into());
    }
    let (tv, spectra) = models.spectral(&plan)?;
    let batches: Vec<Batch> = suite.test_batches();
    let layers: Vec<usize> = if sel.layers.is_empty() {
        (0..models.spec.num_layers()).collect()
    } else {
        sel.layers.clone()
    };
    let tasks: Vec<usize> = if sel.tasks.is_empty() {
        (0..suite.num_tasks()).collect()
    } else {
        sel.tasks.clone()
    };
    let lambda = plan.lambda;
    let objective = TaskObjective::all(&models.spec, &models.heads, &batches, sel.loss);
    let analysis_err = |e| CliError::Pipeline(PipelineError::Analysis(e));

    if sel.sweep {
        for &l in &layers {
            let mut csv = String::new();
            // one file per layer; the per-task reports share a header
            for &i in &tasks {
                let report = component_sweep(
                    &models.spec,
                    &tv,
                    &spectra,
                    &models.heads,
                    &batches,
                    i,
                    l,
                    lambda,
                    sel.window,
                    sel.loss,
                )
                .map_err(analysis_err)?;
                let part = report.to_csv();
                if csv.is_empty() {
                    csv = part;
                } else {
                    csv.push_str(part.split_once('\n').map_or("", |(_, rest)| rest));
                }
            }
            job.write(&format!("sweep_layer{l}.csv"), csv.as_bytes())?;
        }
    }
    if sel.taylor || sel.interaction {
        for &i in &tasks {
            let theta = merge_excluding(&tv, i, lambda);
            let eps = sel.epsilon.unwrap_or_else(|| default_epsilon(&theta));
            for &l in &layers {
                let k = spectra.rank(i, l);
                if sel.taylor {
                    let mut rows = Vec::new();
                    for r in 0..sel.taylor_components.min(k) {
                        let (sigma, dir) = component_direction(&spectra, &theta, i, l, r).map_err(analysis_err)?;
                        let mut row = taylor_terms(&objective, &theta, &dir, lambda * sigma, eps).map_err(analysis_err)?;
                        row.component = r;
                        rows.push(row);
                    }
                    job.write(&format!("taylor_task{i}_layer{l}.csv"), taylor_csv(&rows).as_bytes())?;
                }
                if sel.interaction {
                    let m = sel.interaction_components.min(k);
                    let scaled = (0..m)
                        .map(|r| {
                            let (sigma, dir) = component_direction(&spectra, &theta, i, l, r)?;
                            Ok(crate::analysis::backbone_axpy(&dir.zeros_like(), lambda * sigma, &dir))
                        })
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(analysis_err)?;
                    let mut csv = String::from("component_i,component_j,interaction\n");
                    for a in 0..m {
                        for b in a + 1..m {
                            let v = joint_interaction(&objective, &theta, &scaled[a], &scaled[b])
                                .map_err(analysis_err)?;
                            csv.push_str(&format!("{a},{b},{}\n", fmt_real(v)));
                        }
                    }
                    job.write(&format!("interaction_task{i}_layer{l}.csv"), csv.as_bytes())?;
                }
            }
        }
    }
    if sel.ranks || sel.heatmap {
        let Some((state, mask_plan)) = load_mask(job)? else {
            return Err(ConfigError::Invalid(format!(
                "rank and heatmap analyses need a mask file ({} not found)",
                mask_path(job.cfg).display()
            ))
            .into());
        };
        let (_, mask_spectra) = models.spectral(&mask_plan)?;
        state.validate(&mask_spectra).map_err(PipelineError::from)?;
        let bits = state.bits();
        if sel.ranks {
            let report = rank_report(&bits, &mask_spectra, sel.energy_fraction);
            job.write("ranks.csv", report.to_csv().as_bytes())?;
            job.extra.insert("spearman".into(), json!(report.spearman));
        }
        if sel.heatmap {
            let h = export_mask_heatmap(&bits);
            job.write("heatmap.csv", h.cells.as_bytes())?;
            job.write("heatmap_summary.csv", h.summary.as_bytes())?;
        }
    }
    Ok(())
}
