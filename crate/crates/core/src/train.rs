//! Optimization and experiment harnesses: Adam with linear learning-rate
//! decay, binary cross-entropy, dataset splits, metrics, the four-way
//! ablation and the capsule hyperparameter sweep.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_dataset, PerturbationPolicy};
use crate::capsule::{predict, CapsuleHeadConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{HeadConfig, Model, ModelConfig};
use crate::params::ParamSet;
use crate::rng::{mix_seed, SeededRng};
use crate::tape::{Tape, Var};
use crate::text::{encode_document, Document, EmbeddingTable, EncodedDoc};

/// Floor of the probability fed to the log in [`bce_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

// seed streams derived from `TrainConfig::seed`
const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// `lr · (1 − epoch / epochs)`, constant within an epoch.
    #[default]
    PerEpoch,
    /// `lr · (1 − step / total_steps)`.
    PerStep,
}

fn default_lr() -> f64 {
    5e-5
}
fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_split() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}
fn default_n_s() -> usize {
    5
}
fn default_n_w() -> usize {
    60
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub adversarial: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_n_w")]
    pub n_w: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Draw fresh adversarial copies every epoch instead of once.
    #[serde(default = "default_true")]
    pub resample_adversarial: bool,
    /// Keep only the first `max_docs` documents of the input.
    #[serde(default)]
    pub max_docs: Option<usize>,
}

impl TrainConfig {
    pub fn new(encoder: EncoderConfig, head: HeadConfig) -> Self {
        Self {
            encoder,
            head,
            adversarial: false,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            split: default_split(),
            seed: 0,
            n_s: default_n_s(),
            n_w: default_n_w(),
            lr_schedule: LrSchedule::default(),
            resample_adversarial: true,
            max_docs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        validate_split(&self.split)?;
        if self.n_s == 0 || self.n_w == 0 {
            return Err(Error::InvalidConfig("n_s and n_w must be at least 1".into()));
        }
        if let HeadConfig::Capsule(caps) = &self.head {
            caps.validate()?;
            if caps.n_cls != 2 {
                return Err(Error::InvalidConfig("binary cross-entropy needs n_cls = 2".into()));
            }
        }
        self.encoder.validate(self.n_s * self.n_w)
    }

    /// The partition [`train_with`] uses for `n_docs` documents (after
    /// `max_docs` truncation).
    pub fn split_indices(&self, n_docs: usize) -> Result<Split> {
        split_dataset(n_docs, &self.split, mix_seed(self.seed, &[STREAM_SPLIT]))
    }

    pub fn model_config(&self, embedding_dim: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            n_s: self.n_s,
            n_w: self.n_w,
            embedding_dim,
        }
    }
}

fn validate_split(split: &[f64; 3]) -> Result<()> {
    if split.iter().any(|f| f.is_nan() || *f <= 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be positive and sum to 1, got {split:?}"
        )));
    }
    Ok(())
}

/// Learning rate for `epoch`: `lr · (1 − epoch / epochs)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: config.epochs,
        });
    }
    Ok(config.learning_rate * (1.0 - epoch as f64 / config.epochs as f64))
}

fn lr_at_step(step: usize, total: usize, base: f64) -> f64 {
    base * (1.0 - step as f64 / total as f64)
}

/// `−log(max(p[label], 1e-12))` as a scalar on the tape.
pub fn bce_loss(tape: &mut Tape, probabilities: Var, label: usize) -> Result<Var> {
    let p = tape.slice(probabilities, 0, label, label + 1)?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let log_p = tape.log(p)?;
    Ok(tape.scale(log_p, -1.0)?)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || -> Vec<Vec<f64>> { params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect() };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One bias-corrected Adam update of every trainable parameter. Gradients
/// are cleared afterwards.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.tensor.grad().is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.tensor.take_grad().expect("checked above");
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, value) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Indices of each partition into the original document list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn select<'a>(indices: &[usize], docs: &'a [Document]) -> Vec<&'a Document> {
        indices.iter().map(|&i| &docs[i]).collect()
    }
}

/// Seeded shuffle, then `floor(fraction · N)` documents for validation and
/// test; the remainder goes to training.
pub fn split_dataset(n_docs: usize, fractions: &[f64; 3], seed: u64) -> Result<Split> {
    if n_docs < 3 {
        return Err(Error::TooFewDocuments(n_docs));
    }
    validate_split(fractions)?;
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut SeededRng::new(seed));
    let n = n_docs as f64;
    let n_valid = (fractions[1] * n + 1e-9).floor() as usize;
    let n_test = (fractions[2] * n + 1e-9).floor() as usize;
    let n_train = n_docs - n_valid - n_test;
    Ok(Split {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        })
    }
}

/// Binary confusion counts with label 1 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(predictions: &[usize], labels: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            c.record(p, l);
        }
        c
    }

    pub fn record(&mut self, predicted: usize, label: usize) {
        match (predicted == 1, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// 1.0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 => 1.0,
            n => self.tp as f64 / n as f64,
        }
    }

    /// 1.0 when there are no positives.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 => 1.0,
            n => self.tp as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epoch: usize,
    pub split: SplitTag,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(epoch: usize, split: SplitTag, loss: f64, confusion: Confusion) -> Self {
        Self {
            epoch,
            split,
            loss,
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
        }
    }
}

/// Execution settings that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Worker threads for per-document passes. Gradients are always reduced
    /// in document order, so the result does not depend on this value.
    pub threads: usize,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            progress: false,
        }
    }
}

struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    fn new(threads: usize) -> Result<Self> {
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { pool })
    }

    /// Maps `f` over `items`, keeping input order.
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        match &self.pool {
            Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            None => items.iter().map(f).collect(),
        }
    }
}

struct DocPass {
    loss: f64,
    prediction: usize,
    grads: Vec<Option<Vec<f64>>>,
}

fn forward_backward(model: &Model, doc: &EncodedDoc) -> Result<DocPass> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params);
    let pass = model.forward(&mut tape, &b, doc)?;
    let loss = bce_loss(&mut tape, pass.probabilities, doc.label as usize)?;
    let grads = tape.backward(loss)?;
    let per_param = model
        .params
        .iter()
        .map(|(id, p)| {
            if p.trainable {
                grads.wrt(b.var(id)).map(<[f64]>::to_vec)
            } else {
                None
            }
        })
        .collect();
    Ok(DocPass {
        loss: tape.value(loss).item().expect("scalar loss"),
        prediction: predict(tape.value(pass.probabilities).data()),
        grads: per_param,
    })
}

fn forward_only(model: &Model, doc: &EncodedDoc) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params);
    let pass = model.forward(&mut tape, &b, doc)?;
    let loss = bce_loss(&mut tape, pass.probabilities, doc.label as usize)?;
    Ok((
        tape.value(loss).item().expect("scalar loss"),
        predict(tape.value(pass.probabilities).data()),
    ))
}

fn evaluate_encoded(model: &Model, docs: &[EncodedDoc], exec: &Executor, epoch: usize, split: SplitTag) -> Result<Metrics> {
    if docs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let results = exec.map(docs, |doc| forward_only(model, doc));
    let mut confusion = Confusion::default();
    let mut loss = 0.0;
    for (doc, r) in docs.iter().zip(results) {
        let (l, pred) = r?;
        loss += l;
        confusion.record(pred, doc.label as usize);
    }
    Ok(Metrics::from_confusion(epoch, split, loss / docs.len() as f64, confusion))
}

fn encode_all(docs: &[&Document], table: &EmbeddingTable, n_s: usize, n_w: usize, exec: &Executor) -> Vec<EncodedDoc> {
    exec.map(docs, |d| encode_document(d, table, n_s, n_w))
}

/// Accuracy, precision, recall and mean loss of `model` on `docs`.
pub fn evaluate(model: &Model, docs: &[Document], table: &EmbeddingTable) -> Result<Metrics> {
    evaluate_with(model, docs, table, TrainOptions::default())
}

pub fn evaluate_with(model: &Model, docs: &[Document], table: &EmbeddingTable, options: TrainOptions) -> Result<Metrics> {
    let exec = Executor::new(options.threads)?;
    check_table(model.config().embedding_dim, table)?;
    let refs: Vec<&Document> = docs.iter().collect();
    let encoded = encode_all(&refs, table, model.config().n_s, model.config().n_w, &exec);
    evaluate_encoded(model, &encoded, &exec, 0, SplitTag::Test)
}

fn check_table(embedding_dim: usize, table: &EmbeddingTable) -> Result<()> {
    if table.dimension() != embedding_dim {
        return Err(Error::InvalidConfig(format!(
            "embedding table has dimension {}, model expects {embedding_dim}",
            table.dimension()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub model: Model,
    /// Train and validation rows for every epoch.
    pub history: Vec<Metrics>,
    pub best_epoch: usize,
    /// Selected model on the test split, tagged with `best_epoch`.
    pub test: Metrics,
    pub split: Split,
    /// Number of training examples seen in each epoch.
    pub stream_lengths: Vec<usize>,
}

impl TrainOutcome {
    pub fn best_valid(&self) -> &Metrics {
        self.history
            .iter()
            .find(|m| m.split == SplitTag::Valid && m.epoch == self.best_epoch)
            .expect("best epoch has a validation row")
    }
}

pub fn train(config: &TrainConfig, docs: &[Document], table: &EmbeddingTable) -> Result<TrainOutcome> {
    train_with(config, docs, table, TrainOptions::default())
}

/// Mini-batch training with per-epoch validation; keeps the parameters of
/// the epoch with the highest validation accuracy (earliest on ties).
pub fn train_with(config: &TrainConfig, docs: &[Document], table: &EmbeddingTable, options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let docs = match config.max_docs {
        Some(n) => &docs[..n.min(docs.len())],
        None => docs,
    };
    if docs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let exec = Executor::new(options.threads)?;
    let split = config.split_indices(docs.len())?;
    let mut model = Model::init(&config.model_config(table.dimension()), mix_seed(config.seed, &[STREAM_INIT]))?;
    let (n_s, n_w) = (config.n_s, config.n_w);

    let train_docs = Split::select(&split.train, docs);
    let clean_train = encode_all(&train_docs, table, n_s, n_w, &exec);
    let valid = encode_all(&Split::select(&split.valid, docs), table, n_s, n_w, &exec);
    let test = encode_all(&Split::select(&split.test, docs), table, n_s, n_w, &exec);
    let owned_train: Vec<Document> = train_docs.iter().map(|d| (*d).clone()).collect();
    let policy = PerturbationPolicy::default();
    let augment_seed = mix_seed(config.seed, &[STREAM_AUGMENT]);
    let mut fixed_adversarial: Option<Vec<EncodedDoc>> = None;

    let stream_len = clean_train.len() * if config.adversarial { 2 } else { 1 };
    let batches_per_epoch = stream_len.div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;

    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(2 * config.epochs);
    let mut stream_lengths = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let epoch_lr = lr_at(epoch, config)?;
        let adversarial: Vec<EncodedDoc> = if config.adversarial {
            if config.resample_adversarial {
                let copies = augment_dataset(&owned_train, &policy, augment_seed, epoch as u64)?;
                encode_all(&copies.iter().collect::<Vec<_>>(), table, n_s, n_w, &exec)
            } else {
                fixed_adversarial
                    .get_or_insert_with(|| {
                        let copies = augment_dataset(&owned_train, &policy, augment_seed, 0)
                            .expect("default policy never degenerates");
                        encode_all(&copies.iter().collect::<Vec<_>>(), table, n_s, n_w, &exec)
                    })
                    .clone()
            }
        } else {
            Vec::new()
        };
        let stream: Vec<&EncodedDoc> = clean_train.iter().chain(adversarial.iter()).collect();
        let mut order: Vec<usize> = (0..stream.len()).collect();
        order.shuffle(&mut SeededRng::new(mix_seed(config.seed, &[STREAM_SHUFFLE, epoch as u64])));
        stream_lengths.push(stream.len());

        let mut confusion = Confusion::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let batch_docs: Vec<&EncodedDoc> = batch.iter().map(|&i| stream[i]).collect();
            let passes = exec.map(&batch_docs, |doc| forward_backward(&model, doc));
            model.params.zero_grads();
            for (doc, pass) in batch_docs.iter().zip(passes) {
                let pass = pass?;
                loss_sum += pass.loss;
                confusion.record(pass.prediction, doc.label as usize);
                for (p, g) in model.params.iter_mut().zip(&pass.grads) {
                    if let Some(g) = g {
                        p.tensor.accumulate_grad(g);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for p in model.params.iter_mut().filter(|p| p.trainable) {
                match p.tensor.grad_mut() {
                    Some(g) => g.iter_mut().for_each(|v| *v *= inv),
                    None => p.tensor.set_grad(Some(vec![0.0; p.tensor.numel()])),
                }
            }
            let lr = match config.lr_schedule {
                LrSchedule::PerEpoch => epoch_lr,
                LrSchedule::PerStep => lr_at_step(step, total_steps, config.learning_rate),
            };
            adam_step(&mut model.params, &mut adam, lr)?;
            step += 1;
        }

        let train_metrics = Metrics::from_confusion(epoch, SplitTag::Train, loss_sum / stream.len() as f64, confusion);
        let valid_metrics = if valid.is_empty() {
            train_metrics.clone()
        } else {
            evaluate_encoded(&model, &valid, &exec, epoch, SplitTag::Valid)?
        };
        let valid_metrics = Metrics {
            split: SplitTag::Valid,
            ..valid_metrics
        };
        if options.progress {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.4}  valid loss {:.4} acc {:.4}",
                epoch, train_metrics.loss, train_metrics.accuracy, valid_metrics.loss, valid_metrics.accuracy
            );
        }
        if best.as_ref().is_none_or(|(_, acc, _)| valid_metrics.accuracy > *acc) {
            best = Some((epoch, valid_metrics.accuracy, model.params.clone()));
        }
        history.push(train_metrics);
        history.push(valid_metrics);
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    model.params = params;
    let test = if test.is_empty() {
        return Err(Error::EmptyDataset);
    } else {
        evaluate_encoded(&model, &test, &exec, best_epoch, SplitTag::Test)?
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        test,
        split,
        stream_lengths,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub adversarial: bool,
    pub capsule: bool,
    pub valid: Metrics,
    pub test: Metrics,
    pub test_indices: Vec<usize>,
}

/// Trains the baseline head, baseline + adversarial, capsule head and
/// capsule + adversarial with the same seed and split.
pub fn run_ablation(base: &TrainConfig, docs: &[Document], table: &EmbeddingTable, options: TrainOptions) -> Result<Vec<AblationRow>> {
    let capsule_head = match &base.head {
        HeadConfig::Capsule(c) => HeadConfig::Capsule(*c),
        HeadConfig::Baseline => HeadConfig::Capsule(CapsuleHeadConfig::default()),
    };
    let variants = [
        (base.encoder.kind.display_name().to_string(), HeadConfig::Baseline, false),
        ("+Adv".to_string(), HeadConfig::Baseline, true),
        ("+Capsule".to_string(), capsule_head.clone(), false),
        ("+Adv+Capsule".to_string(), capsule_head, true),
    ];
    variants
        .into_iter()
        .map(|(label, head, adversarial)| {
            let config = TrainConfig {
                head: head.clone(),
                adversarial,
                ..base.clone()
            };
            let outcome = train_with(&config, docs, table, options)?;
            Ok(AblationRow {
                label,
                adversarial,
                capsule: head.is_capsule(),
                valid: outcome.best_valid().clone(),
                test: outcome.test,
                test_indices: outcome.split.test,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    PrimaryCapsules,
    CondensedCapsules,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::PrimaryCapsules => "n_pc",
            SweepParam::CondensedCapsules => "n_cc",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub param: SweepParam,
    pub value: usize,
    pub n_pc: usize,
    pub n_cc: usize,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Wall-clock time of all repeats of this cell.
    pub elapsed: Duration,
}

pub const DEFAULT_N_PC: [usize; 3] = [2, 8, 32];
pub const DEFAULT_N_CC: [usize; 3] = [32, 128, 256];

/// Varies `n_pc` (holding the base `n_cc`) and then `n_cc` (holding the base
/// `n_pc`); each cell is the mean test accuracy over `repeats` seeds.
pub fn run_sweep(
    base: &TrainConfig,
    n_pc_values: &[usize],
    n_cc_values: &[usize],
    repeats: usize,
    docs: &[Document],
    table: &EmbeddingTable,
    options: TrainOptions,
) -> Result<Vec<SweepCell>> {
    if n_pc_values.is_empty() || n_cc_values.is_empty() {
        return Err(Error::InvalidArgument("sweep value lists must be non-empty".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let head = match &base.head {
        HeadConfig::Capsule(c) => *c,
        HeadConfig::Baseline => CapsuleHeadConfig::default(),
    };
    let cells = n_pc_values
        .iter()
        .map(|&v| (SweepParam::PrimaryCapsules, v, CapsuleHeadConfig { n_pc: v, ..head }))
        .chain(
            n_cc_values
                .iter()
                .map(|&v| (SweepParam::CondensedCapsules, v, CapsuleHeadConfig { n_cc: v, ..head })),
        );
    let mut out = Vec::new();
    for (param, value, caps) in cells {
        let started = Instant::now();
        let mut accuracies = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let config = TrainConfig {
                head: HeadConfig::Capsule(caps),
                seed: mix_seed(base.seed, &[r as u64]),
                ..base.clone()
            };
            accuracies.push(train_with(&config, docs, table, options)?.test.accuracy);
        }
        let elapsed = started.elapsed();
        if options.progress {
            eprintln!("sweep {param}={value}: {:?} in {:.1?}", accuracies, elapsed);
        }
        out.push(SweepCell {
            param,
            value,
            n_pc: caps.n_pc,
            n_cc: caps.n_cc,
            mean_accuracy: accuracies.iter().sum::<f64>() / repeats as f64,
            accuracies,
            elapsed,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::tensor::Tensor;

    fn config() -> TrainConfig {
        TrainConfig::new(EncoderConfig::new(EncoderKind::Bigru), HeadConfig::default())
    }

    #[test]
    fn linear_decay() {
        let c = config();
        assert_eq!(lr_at(0, &c).unwrap(), 5e-5);
        assert!((lr_at(10, &c).unwrap() - 2.5e-5).abs() < 1e-20);
        assert!((lr_at(19, &c).unwrap() - 2.5e-6).abs() < 1e-20);
        assert!(matches!(lr_at(20, &c), Err(Error::EpochOutOfRange { epoch: 20, epochs: 20 })));
    }

    #[test]
    fn split_sizes_and_partition() {
        let s = split_dataset(10, &[0.7, 0.2, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 2, 1));
        assert_eq!(s, split_dataset(10, &[0.7, 0.2, 0.1], 3).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(split_dataset(2, &[0.7, 0.2, 0.1], 0), Err(Error::TooFewDocuments(2))));
        assert!(split_dataset(10, &[0.7, 0.2, 0.2], 0).is_err());
    }

    fn loss_of(p: &[f64], label: usize) -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(p.to_vec()));
        let l = bce_loss(&mut tape, v, label).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn bce_values() {
        assert!((loss_of(&[0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(loss_of(&[0.0, 1.0], 1), 0.0);
        let ceiling = loss_of(&[1.0, 0.0], 1);
        assert!((ceiling - 27.631021115928547).abs() < 1e-12, "{ceiling}");
    }

    #[test]
    fn adam_first_step() {
        let mut params = ParamSet::new();
        let id = params.insert("w", Tensor::vector(vec![0.0, 1.0, -2.0]), true).unwrap();
        let mut state = AdamState::new(&params);
        params.get_mut(id).tensor.set_grad(Some(vec![1.0; 3]));
        adam_step(&mut params, &mut state, 0.1).unwrap();
        let expected_delta = -0.1 / (1.0 + 1e-8);
        for (after, before) in params.get(id).tensor.data().iter().zip([0.0, 1.0, -2.0]) {
            assert!((after - before - expected_delta).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
        assert!(params.get(id).tensor.grad().is_none());
    }

    #[test]
    fn adam_zero_grad_and_missing_grad() {
        let mut params = ParamSet::new();
        let id = params.insert("w", Tensor::vector(vec![0.5, -0.5]), true).unwrap();
        let mut state = AdamState::new(&params);
        params.get_mut(id).tensor.set_grad(Some(vec![0.0; 2]));
        adam_step(&mut params, &mut state, 0.1).unwrap();
        assert_eq!(params.get(id).tensor.data(), &[0.5, -0.5]);
        let err = adam_step(&mut params, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn confusion_example() {
        let c = Confusion {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 4,
        };
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.6);
        assert_eq!(c.accuracy(), 0.7);
        let all_zero = Confusion::from_pairs(&[0, 0, 0, 0], &[0, 1, 0, 1]);
        assert_eq!(all_zero.accuracy(), 0.5);
        assert_eq!(all_zero.recall(), 0.0);
        assert_eq!(all_zero.precision(), 1.0);
        let no_positives = Confusion::from_pairs(&[0, 1], &[0, 0]);
        assert_eq!(no_positives.recall(), 1.0);
    }

    #[test]
    fn config_json_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"encoder":{"kind":"cnn-bigru"}}"#).unwrap();
        assert_eq!(c.learning_rate, 5e-5);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.split, [0.7, 0.2, 0.1]);
        assert_eq!((c.n_s, c.n_w), (5, 60));
        assert_eq!(c.head, HeadConfig::Capsule(CapsuleHeadConfig::default()));
        let b: TrainConfig = serde_json::from_str(r#"{"encoder":{"kind":"gru"},"head":"baseline"}"#).unwrap();
        assert_eq!(b.head, HeadConfig::Baseline);
        let named: TrainConfig = serde_json::from_str(r#"{"encoder":{"kind":"gru"},"head":"capsule"}"#).unwrap();
        assert_eq!(named.head, HeadConfig::default());
        let custom: TrainConfig =
            serde_json::from_str(r#"{"encoder":{"kind":"gru"},"head":{"n_pc":2,"d":4}}"#).unwrap();
        let HeadConfig::Capsule(caps) = custom.head else { panic!("capsule head expected") };
        assert_eq!((caps.n_pc, caps.n_cc, caps.d), (2, 128, 4));
        let json = serde_json::to_string(&custom).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), custom);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"encoder":{"kind":"gru"},"epoch":3}"#).is_err());
        let zero_epochs = TrainConfig { epochs: 0, ..c };
        assert!(zero_epochs.validate().is_err());
    }
}
