//! Masked optimization, evaluation, the 80/20 split and the seed protocol.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskData};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::param::{ParamGroup, ParamStore};
use crate::petl::{build_method, count_trainable, forward, Model, PetlMethodConfig};
use crate::tensor::Element;
use crate::vit::{init_backbone, ViTConfig};

pub const TRAIN_FRACTION: f64 = 0.8;
const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    32
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// L2 penalty on rank ≥ 2 weights; never applied to prompts, biases or norm parameters.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Test with the parameters of the best validation epoch rather than the last.
    #[serde(default = "d_true")]
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: d_lr(),
            momentum: d_momentum(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            epochs: d_epochs(),
            batch_size: d_batch(),
            seed: 0,
            precision: Precision::F32,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Whether weight decay applies to a parameter.
pub fn decays(name: &str, group: ParamGroup, rank: usize) -> bool {
    rank >= 2 && group != ParamGroup::Prompts && !crate::param::is_bias_name(name)
}

/// Optimizer state over one store; slots are indexed like the store.
#[derive(Clone, Debug)]
pub struct Optimizer<E> {
    cfg: TrainConfig,
    first: Vec<Option<Vec<E>>>,
    second: Vec<Option<Vec<E>>>,
    steps: u64,
}

impl<E: Element> Optimizer<E> {
    pub fn new(cfg: &TrainConfig, store: &ParamStore<E>) -> Self {
        Self {
            cfg: cfg.clone(),
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore<E>) {
        self.steps += 1;
        let c = &self.cfg;
        let lr = E::of(c.learning_rate);
        let wd = E::of(c.weight_decay);
        let t = self.steps as i32;
        let (b1, b2) = (E::of(c.beta1), E::of(c.beta2));
        let bc1 = E::one() - E::of(c.beta1.powi(t));
        let bc2 = E::one() - E::of(c.beta2.powi(t));
        let eps = E::of(c.eps);
        let mu = E::of(c.momentum);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let decay = c.weight_decay > 0.0 && decays(&p.name, p.group, p.value.rank());
            let n = grad.len();
            let values = p.value.data_mut();
            match c.optimizer {
                OptimizerKind::SgdMomentum => {
                    let v = self.first[i].get_or_insert_with(|| vec![E::zero(); n]);
                    for j in 0..n {
                        let g = if decay { grad[j] + wd * values[j] } else { grad[j] };
                        v[j] = mu * v[j] + g;
                        values[j] -= lr * v[j];
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| vec![E::zero(); n]);
                    let s = self.second[i].get_or_insert_with(|| vec![E::zero(); n]);
                    for j in 0..n {
                        let g = if decay { grad[j] + wd * values[j] } else { grad[j] };
                        m[j] = b1 * m[j] + (E::one() - b1) * g;
                        s[j] = b2 * s[j] + (E::one() - b2) * g * g;
                        let mh = m[j] / bc1;
                        let sh = s[j] / bc2;
                        values[j] -= lr * mh / (sh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Loss and correct count of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<E: Element>(logits: &[E], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Zeroes gradients, runs forward and backward on one batch, and updates the masked parameters.
pub fn train_step<E: Element>(
    model: &mut Model<E>,
    data: &Dataset,
    batch: &[usize],
    opt: &mut Optimizer<E>,
) -> Result<StepOutcome> {
    model.params.zero_grads();
    let (images, labels) = data.batch::<E>(batch);
    let mut g = Graph::new();
    let out = forward(&mut g, model, &images)?;
    let loss = match g.cross_entropy(out.logits, &labels) {
        Err(Error::Numeric { .. }) => {
            return Err(Error::Divergence {
                step: opt.steps(),
                loss: f64::NAN,
            })
        }
        other => other?,
    };
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            step: opt.steps(),
            loss: loss_value,
        });
    }
    let correct = count_correct(g.value(out.logits).data(), model.vit.num_classes, &labels);
    g.backward(loss)?;
    g.accumulate_into(&mut model.params);
    opt.step(&mut model.params);
    Ok(StepOutcome {
        loss: loss_value,
        correct,
    })
}

/// Argmax predictions for every example of `data`.
pub fn predict<E: Element>(model: &Model<E>, data: &Dataset) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = data.batch::<E>(chunk);
        let mut g = Graph::inference();
        let out = forward(&mut g, model, &images)?;
        let classes = model.vit.num_classes;
        preds.extend(g.value(out.logits).data().chunks(classes).map(argmax));
    }
    Ok(preds)
}

/// Top-1 accuracy.
pub fn evaluate<E: Element>(model: &Model<E>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(model, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Seeded shuffle of `0..n` cut at `⌊fraction·n⌋`.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::DatasetTooSmall { n, min: 5 });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let cut = (fraction * n as f64 + 1e-9).floor() as usize;
    let val = idx.split_off(cut);
    Ok((idx, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters produced `test_acc`; `None` when untrained.
    pub best_epoch: Option<usize>,
    pub test_acc: f64,
    pub trainable_params: usize,
    pub wall_time: f64,
}

impl MetricsLog {
    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "method": self.method,
                "task": self.task,
                "seed": self.seed,
                "best_epoch": self.best_epoch,
                "test_acc": self.test_acc,
                "trainable_params": self.trainable_params,
                "wall_time": self.wall_time,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, other: &MetricsLog) -> bool {
        MetricsLog {
            wall_time: 0.0,
            ..self.clone()
        } == MetricsLog {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

/// Per-epoch progress callback.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochMetrics);

fn frozen_checksum<E: Element>(store: &ParamStore<E>) -> u64 {
    store.checksum(|p| !p.trainable)
}

/// Trains `model` on `train`, selecting by accuracy on `val`. Returns the epoch log and
/// the selected epoch; the model holds the selected parameters on return.
pub fn fit<E: Element>(
    model: &mut Model<E>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<(Vec<EpochMetrics>, Option<usize>)> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let frozen = frozen_checksum(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<E>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let s = train_step(model, train, batch, &mut opt)?;
            loss_sum += s.loss * batch.len() as f64;
            correct += s.correct;
        }
        if frozen_checksum(&model.params) != frozen {
            return Err(Error::Contract(format!("frozen parameters changed during epoch {epoch}")));
        }
        let n = train.len().max(1) as f64;
        let val_acc = if val.is_empty() { f64::NAN } else { evaluate(model, val)? };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        if let Some(h) = on_epoch.as_mut() {
            h(&m);
        }
        if cfg.select_best && best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, model.params.clone()));
        }
        log.push(m);
    }
    let chosen = match best {
        Some((epoch, _, params)) => {
            model.params = params;
            Some(epoch)
        }
        None => cfg.epochs.checked_sub(1),
    };
    for p in model.params.iter_mut() {
        p.grad = None;
    }
    Ok((log, chosen))
}

/// One downstream run: split, build, fit, test.
pub fn run_single<E: Element>(
    backbone: &ParamStore<E>,
    vit: &ViTConfig,
    method: &PetlMethodConfig,
    task: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<MetricsLog> {
    let start = Instant::now();
    let (tr, va) = split_train_val(task.train.len(), TRAIN_FRACTION, seed)?;
    let train = task.train.subset(&tr);
    let val = task.train.subset(&va);
    let vit = vit.clone().with_classes(task.train.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_method(method, backbone, &vit, &mut rng)?;
    let trainable_params = count_trainable(&model.params).trainable;
    let (epochs, best_epoch) = fit(&mut model, &train, &val, cfg, seed, None)?;
    let test_acc = evaluate(&model, &task.test)?;
    Ok(MetricsLog {
        method: method.display_name(),
        task: task.name.clone(),
        seed,
        epochs,
        best_epoch,
        test_acc,
        trainable_params,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Mean and sample standard deviation (`n − 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Learning rate and weight decay pairs tried by [`grid_search`] when none are given.
pub const DEFAULT_GRID: [(f64, f64); 4] = [(1e-3, 0.0), (1e-3, 1e-4), (1e-2, 0.0), (1e-2, 1e-4)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrial {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub best_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub trials: Vec<GridTrial>,
    /// Index into `trials` of the pair with the highest validation accuracy (first on ties).
    pub chosen: usize,
    /// Log of the chosen run; its `test_acc` is the reported result.
    pub log: MetricsLog,
}

/// Runs one seed for each `(learning_rate, weight_decay)` pair and keeps the run with the
/// best validation accuracy. Test accuracy plays no part in the choice.
pub fn grid_search<E: Element>(
    backbone: &ParamStore<E>,
    vit: &ViTConfig,
    method: &PetlMethodConfig,
    task: &TaskData,
    cfg: &TrainConfig,
    grid: &[(f64, f64)],
    seed: u64,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let mut trials = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, MetricsLog)> = None;
    for (i, &(lr, wd)) in grid.iter().enumerate() {
        let c = TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..cfg.clone()
        };
        let log = run_single(backbone, vit, method, task, &c, seed)?;
        let val = log.epochs.iter().map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
        trials.push(GridTrial {
            learning_rate: lr,
            weight_decay: wd,
            best_val_acc: val,
        });
        if best.as_ref().is_none_or(|b| val > b.1) {
            best = Some((i, val, log));
        }
    }
    let (chosen, _, log) = best.expect("grid is non-empty");
    Ok(GridOutcome { trials, chosen, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub logs: Vec<MetricsLog>,
}

/// Independent runs, one per seed, summarized by test accuracy.
pub fn run_with_seeds<E: Element>(
    backbone: &ParamStore<E>,
    vit: &ViTConfig,
    method: &PetlMethodConfig,
    task: &TaskData,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SeedSummary> {
    let logs = seeds
        .iter()
        .map(|&s| run_single(backbone, vit, method, task, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = logs.iter().map(|l| l.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    Ok(SeedSummary { mean, std, logs })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<E> {
    pub params: ParamStore<E>,
    pub train_acc: f64,
    pub epochs_run: usize,
}

pub const PRETRAIN_TARGET: f64 = 0.95;
pub const PRETRAIN_MINIMUM: f64 = 0.60;

/// Trains a fresh backbone and head on `upstream` until train accuracy reaches
/// the target or `epoch_cap` epochs pass.
pub fn pretrain_backbone<E: Element>(
    vit: &ViTConfig,
    upstream: &Dataset,
    cfg: &TrainConfig,
    epoch_cap: usize,
    mut on_epoch: Option<EpochHook<'_>>,
) -> Result<PretrainOutcome<E>> {
    cfg.validate()?;
    if upstream.num_classes != vit.num_classes {
        return Err(Error::Config(format!(
            "upstream task has {} classes, backbone head has {}",
            upstream.num_classes, vit.num_classes
        )));
    }
    if upstream.image_shape != vit.image_shape() {
        return Err(Error::Config(format!(
            "upstream images {:?} do not match backbone input {:?}",
            upstream.image_shape,
            vit.image_shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_backbone(vit, &mut rng)?;
    if epoch_cap == 0 {
        return Ok(PretrainOutcome {
            params,
            train_acc: f64::NAN,
            epochs_run: 0,
        });
    }
    let mut model = Model {
        vit: vit.clone(),
        method: PetlMethodConfig::full(),
        params,
    };
    let mut opt = Optimizer::new(cfg, &model.params);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..upstream.len()).collect();
    let mut acc = 0.0;
    let mut epochs_run = 0;
    for epoch in 0..epoch_cap {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            loss_sum += train_step(&mut model, upstream, batch, &mut opt)?.loss * batch.len() as f64;
        }
        acc = evaluate(&model, upstream)?;
        epochs_run = epoch + 1;
        if let Some(h) = on_epoch.as_mut() {
            h(&EpochMetrics {
                epoch,
                train_loss: loss_sum / upstream.len() as f64,
                train_acc: acc,
                val_acc: f64::NAN,
            });
        }
        if acc >= PRETRAIN_TARGET {
            break;
        }
    }
    if acc < PRETRAIN_MINIMUM {
        return Err(Error::Pretraining {
            accuracy: acc,
            epochs: epochs_run,
            minimum: PRETRAIN_MINIMUM,
        });
    }
    let mut params = model.params;
    for p in params.iter_mut() {
        p.grad = None;
    }
    Ok(PretrainOutcome {
        params,
        train_acc: acc,
        epochs_run,
    })
}
