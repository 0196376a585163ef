//! Config-driven experiments: method × task matrices, Meta-Net depth and prompt-mode
//! ablations, data-scale sweeps, gradient-check suites and parameter tables.

use crate::checkpoint;
use crate::data::{generate_synthetic, load_corpus, subsample, DatasetSpec, TaskData};
use crate::error::{Error, Result};
use crate::gradcheck::{check_primitives, grad_check, GradCheckConfig};
use crate::param::{ParamGroup, ParamStore};
use crate::petl::{build_method, closed_form_trainable, count_trainable, forward, DvptMode, MethodKind, Model, PetlMethodConfig};
use crate::tensor::{Element, Tensor};
use crate::train::{mean_std, pretrain_backbone, run_single, EpochMetrics, MetricsLog, Precision, TrainConfig};
use crate::vit::{backbone_group, check_backbone, init_backbone, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DEPTHS: [usize; 3] = [2, 4, 6];
pub const DEFAULT_FRACTIONS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
pub const SUMMARY_HEADER: &str = "method,task,seed_count,mean_acc,std,trainable_params,wins_vs_full";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub checkpoint: PathBuf,
    pub vit: ViTConfig,
}

/// A task generated from a spec or read from a pair of corpus files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Spec(DatasetSpec),
    Corpus(CorpusTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusTask {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub num_classes: usize,
    pub train: PathBuf,
    pub test: PathBuf,
}

fn default_epoch_cap() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub upstream: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_epoch_cap")]
    pub epoch_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub tasks: Vec<TaskSource>,
    #[serde(default)]
    pub methods: Vec<PetlMethodConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<f64>>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        resolve(&base, &mut cfg.backbone.checkpoint);
        resolve(&base, &mut cfg.output_dir);
        for t in &mut cfg.tasks {
            if let TaskSource::Corpus(c) = t {
                resolve(&base, &mut c.train);
                resolve(&base, &mut c.test);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Checks every field; `need_checkpoint` also requires the backbone file to exist.
    pub fn validate(&self, need_checkpoint: bool) -> Result<()> {
        let vit = &self.backbone.vit;
        vit.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if need_checkpoint && !self.backbone.checkpoint.is_file() {
            return Err(Error::Config(format!(
                "backbone checkpoint {} does not exist",
                self.backbone.checkpoint.display()
            )));
        }
        for t in &self.tasks {
            match t {
                TaskSource::Spec(s) => {
                    s.validate()?;
                    if s.image_size != vit.image_shape() {
                        return Err(Error::Config(format!(
                            "task {} renders {:?} images, backbone expects {:?}",
                            s.display_name(),
                            s.image_size,
                            vit.image_shape()
                        )));
                    }
                }
                TaskSource::Corpus(c) => {
                    for p in [&c.train, &c.test] {
                        if !p.is_file() {
                            return Err(Error::Config(format!("corpus {} does not exist", p.display())));
                        }
                    }
                }
            }
        }
        for m in &self.methods {
            m.validate(vit)?;
        }
        if let Some(p) = &self.pretrain {
            p.upstream.validate()?;
            p.train.validate()?;
        }
        if let Some(depths) = &self.depths {
            if depths.is_empty() || depths.contains(&0) {
                return Err(Error::Config("depths must be a non-empty list of positive integers".into()));
            }
        }
        if let Some(fr) = &self.fractions {
            if fr.is_empty() || fr.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                return Err(Error::Config("fractions must be a non-empty list inside (0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskData>> {
        self.tasks
            .iter()
            .map(|t| match t {
                TaskSource::Spec(s) => generate_synthetic(s),
                TaskSource::Corpus(c) => {
                    let train = load_corpus(&c.train, Some(c.num_classes))?;
                    let test = load_corpus(&c.test, Some(c.num_classes))?;
                    if train.image_shape != self.backbone.vit.image_shape() || test.image_shape != train.image_shape {
                        return Err(Error::Config(format!(
                            "corpus {} holds {:?} images, backbone expects {:?}",
                            c.name,
                            train.image_shape,
                            self.backbone.vit.image_shape()
                        )));
                    }
                    Ok(TaskData {
                        name: c.name.clone(),
                        group: c.group.clone(),
                        train,
                        test,
                    })
                }
            })
            .collect()
    }

    fn first_dvpt(&self) -> Result<PetlMethodConfig> {
        self.methods
            .iter()
            .find(|m| m.kind == MethodKind::Dvpt)
            .cloned()
            .ok_or_else(|| Error::Config("no dvpt method in config".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One (method, task, seed[, fraction]) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<MetricsLog>,
}

impl RunRecord {
    pub fn test_acc(&self) -> Option<f64> {
        self.log.as_ref().map(|l| l.test_acc)
    }
}

/// One line of the summary table. Rows whose task starts with `mean:` average a task group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub task: String,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub trainable_params: usize,
    pub wins_vs_full: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub kind: String,
    pub threads: usize,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
}

impl ExperimentRecord {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed).count()
    }

    /// Per-seed test accuracies of successful runs, in run order.
    pub fn accuracies(&self, method: &str, task: &str, fraction: Option<f64>) -> Vec<(u64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.method == method && r.task == task && r.fraction == fraction)
            .filter_map(|r| r.test_acc().map(|a| (r.seed, a)))
            .collect()
    }

    pub fn row(&self, method: &str, task: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.task == task)
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(&self.rows)
    }
}

/// Tasks where the method's accuracy is strictly above full fine-tuning's.
pub fn count_wins(method: &[f64], full: &[f64]) -> usize {
    method.iter().zip(full).filter(|(m, f)| m > f).count()
}

struct CellStats {
    seeds: usize,
    mean: f64,
    std: f64,
    trainable: usize,
}

fn cell_stats(runs: &[RunRecord], method: &str, task: &str, fraction: Option<f64>) -> Option<CellStats> {
    let logs: Vec<&MetricsLog> = runs
        .iter()
        .filter(|r| r.method == method && r.task == task && r.fraction == fraction)
        .filter_map(|r| r.log.as_ref())
        .collect();
    if logs.is_empty() {
        return None;
    }
    let accs: Vec<f64> = logs.iter().map(|l| l.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    Some(CellStats {
        seeds: logs.len(),
        mean,
        std,
        trainable: logs[0].trainable_params,
    })
}

fn unique<T: PartialEq + Clone>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Summary rows recomputed from run logs: one per (method, task) with at least one
/// successful seed, then per-group and overall means of the task means.
/// `full` names the method wins are counted against.
pub fn aggregate(runs: &[RunRecord], full: Option<&str>) -> Vec<SummaryRow> {
    let methods = unique(runs.iter().map(|r| r.method.clone()));
    let tasks = unique(runs.iter().map(|r| (r.task.clone(), r.group.clone())));
    let mut rows = Vec::new();
    let full_mean = |task: &str| full.and_then(|f| cell_stats(runs, f, task, None)).map(|s| s.mean);
    for m in &methods {
        for (t, _) in &tasks {
            if let Some(s) = cell_stats(runs, m, t, None) {
                rows.push(SummaryRow {
                    method: m.clone(),
                    task: t.clone(),
                    seed_count: s.seeds,
                    mean_acc: s.mean,
                    std: s.std,
                    trainable_params: s.trainable,
                    wins_vs_full: full_mean(t).map(|f| count_wins(&[s.mean], &[f])),
                });
            }
        }
    }
    let mut groups: Vec<(String, Vec<String>)> = unique(tasks.iter().filter_map(|(_, g)| g.clone()))
        .into_iter()
        .map(|g| {
            let members = tasks.iter().filter(|(_, tg)| tg.as_ref() == Some(&g)).map(|(t, _)| t.clone()).collect();
            (g, members)
        })
        .collect();
    if tasks.len() > 1 {
        groups.push(("all".into(), tasks.iter().map(|(t, _)| t.clone()).collect()));
    }
    let mut group_rows = Vec::new();
    for m in &methods {
        for (g, members) in &groups {
            let cells: Vec<&SummaryRow> = rows
                .iter()
                .filter(|r| &r.method == m && members.contains(&r.task))
                .collect();
            if cells.is_empty() {
                continue;
            }
            let means: Vec<f64> = cells.iter().map(|r| r.mean_acc).collect();
            let (mean, std) = mean_std(&means);
            let wins = if cells.iter().all(|r| r.wins_vs_full.is_some()) {
                Some(cells.iter().filter_map(|r| r.wins_vs_full).sum())
            } else {
                None
            };
            group_rows.push(SummaryRow {
                method: m.clone(),
                task: format!("mean:{g}"),
                seed_count: cells.iter().map(|r| r.seed_count).min().unwrap_or(0),
                mean_acc: mean,
                std,
                trainable_params: cells.iter().map(|r| r.trainable_params).sum::<usize>() / cells.len(),
                wins_vs_full: wins,
            });
        }
    }
    rows.extend(group_rows);
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Fixed column order: method, task, seed_count, mean_acc, std, trainable_params, wins_vs_full.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let wins = r.wins_vs_full.map(|w| w.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            csv_field(&r.method),
            csv_field(&r.task),
            r.seed_count,
            r.mean_acc,
            r.std,
            r.trainable_params,
            wins
        );
    }
    out
}

struct Cell {
    method: PetlMethodConfig,
    task: usize,
    seed: u64,
    fraction: Option<f64>,
}

fn run_cell<E: Element>(
    backbone: &ParamStore<E>,
    vit: &ViTConfig,
    tasks: &[TaskData],
    train: &TrainConfig,
    cell: &Cell,
) -> RunRecord {
    let task = &tasks[cell.task];
    let result = match cell.fraction {
        None => run_single(backbone, vit, &cell.method, task, train, cell.seed),
        Some(f) => subsample(&task.train, f, cell.seed).and_then(|sub| {
            let view = TaskData {
                name: task.name.clone(),
                group: task.group.clone(),
                train: sub,
                test: task.test.clone(),
            };
            run_single(backbone, vit, &cell.method, &view, train, cell.seed)
        }),
    };
    let (status, error, log) = match result {
        Ok(log) => (RunStatus::Ok, None, Some(log)),
        Err(e) => (RunStatus::Failed, Some(e.to_string()), None),
    };
    RunRecord {
        method: cell.method.display_name(),
        task: task.name.clone(),
        group: task.group.clone(),
        seed: cell.seed,
        fraction: cell.fraction,
        status,
        error,
        log,
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))
}

fn execute<E: Element>(cfg: &ExperimentConfig, cells: &[Cell], threads: usize) -> Result<Vec<RunRecord>> {
    let backbone: ParamStore<E> = checkpoint::load(&cfg.backbone.checkpoint, backbone_group)?;
    check_backbone(&backbone, &cfg.backbone.vit)?;
    let tasks = cfg.load_tasks()?;
    let vit = &cfg.backbone.vit;
    Ok(pool(threads)?.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(&backbone, vit, &tasks, &cfg.train, c))
            .collect()
    }))
}

fn execute_any(cfg: &ExperimentConfig, cells: &[Cell], threads: usize) -> Result<Vec<RunRecord>> {
    match cfg.train.precision {
        Precision::F32 => execute::<f32>(cfg, cells, threads),
        Precision::F64 => execute::<f64>(cfg, cells, threads),
    }
}

fn cells_for(methods: &[PetlMethodConfig], cfg: &ExperimentConfig, fractions: &[Option<f64>]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &fraction in fractions {
        for m in methods {
            for task in 0..cfg.tasks.len() {
                for &seed in &cfg.seeds {
                    cells.push(Cell {
                        method: m.clone(),
                        task,
                        seed,
                        fraction,
                    });
                }
            }
        }
    }
    cells
}

fn log_file_name(r: &RunRecord) -> String {
    let clean = |s: &str| s.replace(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'), "_");
    match r.fraction {
        Some(f) => format!("{}__{}__f{:.3}__s{}.jsonl", clean(&r.method), clean(&r.task), f, r.seed),
        None => format!("{}__{}__s{}.jsonl", clean(&r.method), clean(&r.task), r.seed),
    }
}

/// Writes `record.json`, `summary.csv`, one JSON-lines log per run and any extra tables.
pub fn write_outputs(record: &ExperimentRecord, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
    let logs = dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    std::fs::write(
        dir.join("record.json"),
        serde_json::to_string_pretty(record)?,
    )?;
    std::fs::write(dir.join("summary.csv"), record.summary_csv())?;
    for r in &record.runs {
        if let Some(log) = &r.log {
            std::fs::write(logs.join(log_file_name(r)), log.to_jsonl())?;
        }
    }
    for (name, text) in extra {
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn record(kind: &str, cfg: &ExperimentConfig, threads: usize, runs: Vec<RunRecord>) -> ExperimentRecord {
    let full = cfg.methods.iter().find(|m| m.kind == MethodKind::Full).map(|m| m.display_name());
    let plain: Vec<RunRecord> = runs.iter().filter(|r| r.fraction.is_none()).cloned().collect();
    ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        kind: kind.into(),
        threads,
        config: cfg.clone(),
        rows: aggregate(&plain, full.as_deref()),
        runs,
    }
}

fn check_matrix(cfg: &ExperimentConfig, methods: &[PetlMethodConfig]) -> Result<()> {
    cfg.validate(true)?;
    if cfg.tasks.is_empty() {
        return Err(Error::Config("no tasks in config".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods in config".into()));
    }
    let names = unique(methods.iter().map(|m| m.display_name()));
    if names.len() != methods.len() {
        return Err(Error::Config("method names must be unique; set `label` to disambiguate".into()));
    }
    Ok(())
}

/// Every (method, task, seed) of the config. Failed cells are recorded and skipped.
pub fn run_matrix(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentRecord> {
    check_matrix(cfg, &cfg.methods)?;
    let cells = cells_for(&cfg.methods, cfg, &[None]);
    let rec = record("run", cfg, threads, execute_any(cfg, &cells, threads)?);
    write_outputs(&rec, &cfg.output_dir, &[])?;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub task: String,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthTable {
    pub record: ExperimentRecord,
    pub rows: Vec<DepthRow>,
}

impl DepthTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,task,seed_count,mean_acc,std,trainable_params\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                r.depth,
                csv_field(&r.task),
                r.seed_count,
                r.mean_acc,
                r.std,
                r.trainable_params
            );
        }
        out
    }
}

/// The config's first DVPT method at each Meta-Net depth (default 2, 4, 6), all else fixed.
pub fn ablate_metanet_depth(cfg: &ExperimentConfig, threads: usize) -> Result<DepthTable> {
    let base = cfg.first_dvpt()?;
    let mut depths = cfg.depths.clone().unwrap_or_else(|| DEFAULT_DEPTHS.to_vec());
    depths.sort_unstable();
    depths.dedup();
    let methods: Vec<PetlMethodConfig> = depths
        .iter()
        .map(|&d| PetlMethodConfig {
            metanet_layers: d,
            label: None,
            ..base.clone()
        })
        .collect();
    check_matrix(cfg, &methods)?;
    let cells = cells_for(&methods, cfg, &[None]);
    let rec = record("ablate-depth", cfg, threads, execute_any(cfg, &cells, threads)?);
    let mut rows = Vec::new();
    for (m, &depth) in methods.iter().zip(&depths) {
        for t in unique(rec.runs.iter().map(|r| r.task.clone())) {
            if let Some(s) = cell_stats(&rec.runs, &m.display_name(), &t, None) {
                rows.push(DepthRow {
                    depth,
                    task: t,
                    seed_count: s.seeds,
                    mean_acc: s.mean,
                    std: s.std,
                    trainable_params: s.trainable,
                });
            }
        }
    }
    let table = DepthTable { record: rec, rows };
    write_outputs(&table.record, &cfg.output_dir, &[("depth.csv", table.to_csv())])?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: DvptMode,
    pub task: String,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub std: f64,
    pub trainable_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    pub task: String,
    pub shared: f64,
    pub specific: f64,
    /// `specific − shared`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeTable {
    pub record: ExperimentRecord,
    pub rows: Vec<ModeRow>,
    pub deltas: Vec<ModeDelta>,
}

impl ModeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,task,seed_count,mean_acc,std,trainable_params,delta\n");
        for r in &self.rows {
            let delta = match r.mode {
                DvptMode::Specific => self
                    .deltas
                    .iter()
                    .find(|d| d.task == r.task)
                    .map(|d| format!("{:.6}", d.delta))
                    .unwrap_or_default(),
                DvptMode::Shared => String::new(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{}",
                r.mode,
                csv_field(&r.task),
                r.seed_count,
                r.mean_acc,
                r.std,
                r.trainable_params,
                delta
            );
        }
        out
    }
}

/// Paired shared and specific runs of the config's first DVPT method under identical seeds.
pub fn ablate_prompt_mode(cfg: &ExperimentConfig, threads: usize) -> Result<ModeTable> {
    let base = cfg.first_dvpt()?;
    let modes = [DvptMode::Shared, DvptMode::Specific];
    let methods: Vec<PetlMethodConfig> = modes
        .iter()
        .map(|&mode| PetlMethodConfig {
            dvpt_mode: mode,
            label: None,
            ..base.clone()
        })
        .collect();
    check_matrix(cfg, &methods)?;
    let cells = cells_for(&methods, cfg, &[None]);
    let rec = record("ablate-mode", cfg, threads, execute_any(cfg, &cells, threads)?);
    let tasks = unique(rec.runs.iter().map(|r| r.task.clone()));
    let mut rows = Vec::new();
    for (m, &mode) in methods.iter().zip(&modes) {
        for t in &tasks {
            if let Some(s) = cell_stats(&rec.runs, &m.display_name(), t, None) {
                rows.push(ModeRow {
                    mode,
                    task: t.clone(),
                    seed_count: s.seeds,
                    mean_acc: s.mean,
                    std: s.std,
                    trainable_params: s.trainable,
                });
            }
        }
    }
    let deltas = tasks
        .iter()
        .filter_map(|t| {
            let get = |mode| rows.iter().find(|r| r.mode == mode && &r.task == t).map(|r| r.mean_acc);
            let (shared, specific) = (get(DvptMode::Shared)?, get(DvptMode::Specific)?);
            Some(ModeDelta {
                task: t.clone(),
                shared,
                specific,
                delta: specific - shared,
            })
        })
        .collect();
    let table = ModeTable { record: rec, rows, deltas };
    write_outputs(&table.record, &cfg.output_dir, &[("mode.csv", table.to_csv())])?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub method: String,
    pub task: String,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub record: ExperimentRecord,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// `(fraction, mean_acc)` pairs of one method on one task, in fraction order.
    pub fn series(&self, method: &str, task: &str) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.method == method && p.task == task)
            .map(|p| (p.fraction, p.mean_acc))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,method,task,seed_count,mean_acc,std\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{:.3},{},{},{},{:.6},{:.6}",
                p.fraction,
                csv_field(&p.method),
                csv_field(&p.task),
                p.seed_count,
                p.mean_acc,
                p.std
            );
        }
        out
    }
}

/// Methods compared by the data-scale sweep: full, linear and the config's DVPT (or the default DVPT).
pub fn sweep_methods(cfg: &ExperimentConfig) -> Vec<PetlMethodConfig> {
    let dvpt = cfg.first_dvpt().unwrap_or_else(|_| PetlMethodConfig::new(MethodKind::Dvpt));
    vec![PetlMethodConfig::full(), PetlMethodConfig::linear(), dvpt]
}

/// Trains each method on stratified subsamples of every task's training set.
pub fn sweep_data_scale(cfg: &ExperimentConfig, threads: usize) -> Result<SweepTable> {
    let fractions = cfg.fractions.clone().unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    sweep_data_scale_with(cfg, &fractions, &sweep_methods(cfg), threads)
}

/// Sweep over explicit fractions and methods.
pub fn sweep_data_scale_with(
    cfg: &ExperimentConfig,
    fractions: &[f64],
    methods: &[PetlMethodConfig],
    threads: usize,
) -> Result<SweepTable> {
    check_matrix(cfg, methods)?;
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("fractions must be a non-empty list inside (0, 1]".into()));
    }
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let fr: Vec<Option<f64>> = fractions.iter().map(|&f| Some(f)).collect();
    let cells = cells_for(methods, cfg, &fr);
    let rec = record("sweep-scale", cfg, threads, execute_any(cfg, &cells, threads)?);
    let tasks = unique(rec.runs.iter().map(|r| r.task.clone()));
    let mut points = Vec::new();
    for m in methods {
        let name = m.display_name();
        for t in &tasks {
            for &f in &fractions {
                if let Some(s) = cell_stats(&rec.runs, &name, t, Some(f)) {
                    points.push(SweepPoint {
                        fraction: f,
                        method: name.clone(),
                        task: t.clone(),
                        seed_count: s.seeds,
                        mean_acc: s.mean,
                        std: s.std,
                    });
                }
            }
        }
    }
    let table = SweepTable { record: rec, points };
    write_outputs(&table.record, &cfg.output_dir, &[("sweep.csv", table.to_csv())])?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub train_acc: f64,
    pub epochs_run: usize,
    pub epochs: Vec<EpochMetrics>,
}

fn pretrain_as<E: Element>(cfg: &ExperimentConfig, p: &PretrainConfig) -> Result<PretrainReport> {
    let upstream = generate_synthetic(&p.upstream)?;
    let mut epochs = Vec::new();
    let mut hook = |m: &EpochMetrics| epochs.push(m.clone());
    let out = pretrain_backbone::<E>(&cfg.backbone.vit, &upstream.train, &p.train, p.epoch_cap, Some(&mut hook))?;
    checkpoint::save(&out.params, &cfg.backbone.checkpoint)?;
    Ok(PretrainReport {
        checkpoint: cfg.backbone.checkpoint.clone(),
        train_acc: out.train_acc,
        epochs_run: out.epochs_run,
        epochs,
    })
}

/// Trains the backbone on the configured upstream task and writes the checkpoint.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    cfg.validate(false)?;
    let p = cfg
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `pretrain` section".into()))?;
    let report = match p.train.precision {
        Precision::F32 => pretrain_as::<f32>(cfg, p)?,
        Precision::F64 => pretrain_as::<f64>(cfg, p)?,
    };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut log = String::new();
    for e in &report.epochs {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    std::fs::write(cfg.output_dir.join("pretrain.jsonl"), log)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// Fewest coordinates sampled in any parameter group.
    pub min_per_group: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Backbone with weights of unit fan-in scale, so every branch carries gradient.
fn loud_backbone(vit: &ViTConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut s: ParamStore<f64> = init_backbone(vit, rng)?;
    for p in s.iter_mut().filter(|p| !p.name.ends_with("scale")) {
        let fan = *p.value.shape().last().expect("rank >= 1") as f64;
        for v in p.value.data_mut() {
            *v = rng.random_range(-1.0..1.0) / fan.sqrt();
        }
    }
    Ok(s)
}

fn model_check(method: &PetlMethodConfig, seed: u64) -> Result<GradCheckEntry> {
    let vit = ViTConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = loud_backbone(&vit, &mut rng)?;
    let mut model: Model<f64> = build_method(method, &backbone, &vit, &mut rng)?;
    for p in model.params.iter_mut().filter(|p| p.group == ParamGroup::Metanet) {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let [c, h, w] = vit.image_shape();
    let batch = 2;
    let pixels = (0..batch * c * h * w).map(|_| rng.random::<f64>()).collect();
    let images = Tensor::new(vec![batch, c, h, w], pixels)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..vit.num_classes)).collect();
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default().with_tolerance(MODEL_TOLERANCE)
    };
    let mut params = model.params.clone();
    let report = grad_check(
        &mut params,
        |g, store| {
            let m = Model {
                params: store.clone(),
                ..model.clone()
            };
            let out = forward(g, &m, &images)?;
            g.cross_entropy(out.logits, &labels)
        },
        &cfg,
    )?;
    Ok(GradCheckEntry {
        name: format!("model:{}", method.display_name()),
        checked: report.checked,
        min_per_group: report.checked_per_group.values().copied().min().unwrap_or(0),
        max_error: report.max_error,
        tolerance: report.tolerance,
        passed: report.passed,
    })
}

/// Every primitive at 1e-6, then end-to-end losses of full, VPT and both DVPT modes on
/// the tiny backbone at 1e-4, all in 64-bit.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default().with_tolerance(PRIMITIVE_TOLERANCE)
    };
    let mut out: Vec<GradCheckEntry> = check_primitives(8, &cfg)?
        .into_iter()
        .map(|c| GradCheckEntry {
            name: format!("op:{}", c.op),
            checked: c.cases,
            min_per_group: 0,
            max_error: c.max_error,
            tolerance: cfg.tolerance,
            passed: c.passed,
        })
        .collect();
    let p = 8;
    for m in [
        PetlMethodConfig::full(),
        PetlMethodConfig::vpt(p),
        PetlMethodConfig::dvpt(p, 4, DvptMode::Shared),
        PetlMethodConfig::dvpt(p, 4, DvptMode::Specific),
    ] {
        out.push(model_check(&m, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub method: String,
    pub trainable: usize,
    pub closed_form: usize,
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

/// Trainable counts of every configured method by mask enumeration, beside the closed form.
/// The head is sized for the first task (or the backbone's class count without tasks).
pub fn param_table(cfg: &ExperimentConfig) -> Result<Vec<ParamRow>> {
    let classes = match cfg.tasks.first() {
        Some(TaskSource::Spec(s)) => s.label_count(),
        Some(TaskSource::Corpus(c)) => c.num_classes,
        None => cfg.backbone.vit.num_classes,
    };
    let vit = cfg.backbone.vit.clone().with_classes(classes);
    vit.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone: ParamStore<f32> = init_backbone(&vit, &mut rng)?;
    cfg.methods
        .iter()
        .map(|m| {
            let model = build_method(m, &backbone, &vit, &mut rng)?;
            let count = count_trainable(&model.params);
            Ok(ParamRow {
                method: m.display_name(),
                trainable: count.trainable,
                closed_form: closed_form_trainable(m, &vit),
                total: count.total,
                by_group: count.by_group,
            })
        })
        .collect()
}

pub fn param_table_text(rows: &[ParamRow]) -> String {
    let mut out = String::from("method");
    for g in ParamGroup::ALL {
        let _ = write!(out, "\t{g}");
    }
    out.push_str("\ttrainable\tclosed_form\ttotal\n");
    for r in rows {
        out.push_str(&r.method);
        for g in ParamGroup::ALL {
            let _ = write!(out, "\t{}", r.by_group.get(&g).copied().unwrap_or(0));
        }
        let _ = writeln!(out, "\t{}\t{}\t{}", r.trainable, r.closed_form, r.total);
    }
    out
}
