//! Next-minute pre-training, evaluation and the bigram baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    LossStats, Mode, Model, ModelCheckpoint, ModelConfig, ModelParams, StepInput, TrainingRecord,
    VocabularyMap,
};
use crate::tensor::TokenTensor;
use crate::time::TimeFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Length of the contiguous sequence units the tensor is cut into.
    pub unit_len: usize,
    /// Cap on optimizer steps per epoch; `None` uses every batch.
    pub max_batches_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 8,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            patience: 10,
            unit_len: 512,
            max_batches_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.unit_len == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and unit_len must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A contiguous run of minutes of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub node: usize,
    pub start: usize,
    pub len: usize,
}

/// Cuts every node's series into consecutive units of `unit_len` minutes; the tail unit keeps
/// its natural length.
pub fn sequence_units(nodes: usize, minutes: usize, unit_len: usize) -> Vec<Unit> {
    let mut out = Vec::new();
    for node in 0..nodes {
        let mut start = 0;
        while start < minutes {
            let len = unit_len.min(minutes - start);
            out.push(Unit { node, start, len });
            start += len;
        }
    }
    out
}

/// One epoch: a seeded permutation of all units, chunked into batches.
pub fn make_batches(units: &[Unit], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<Unit>> {
    let mut order = units.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Model inputs for `len` minutes of `node` starting at minute index `start`.
///
/// `model_node` and `customer` are the embedding indices to use, which differ from `node`
/// when an unseen node is mapped onto a training node.
pub fn unit_steps<'a>(
    tokens: &'a TokenTensor,
    node: usize,
    start: usize,
    len: usize,
    model_node: usize,
    customer: usize,
) -> Vec<StepInput<'a>> {
    let t = &tokens.tokens;
    (start..start + len)
        .map(|m| StepInput {
            tokens: t.row(node, m),
            time: TimeFeatures::from_epoch_minute(t.epoch_minute + m as u64),
            node: model_node,
            customer,
        })
        .collect()
}

fn check_vocab(tokens: &TokenTensor, cfg: &ModelConfig, vocab: &VocabularyMap) -> Result<()> {
    let t = &tokens.tokens;
    if t.features != cfg.n_features || tokens.n_bins != cfg.n_bins {
        return Err(Error::Shape(format!(
            "token tensor has {} features and {} bins, model expects {} and {}",
            t.features,
            tokens.n_bins,
            cfg.n_features,
            cfg.n_bins
        )));
    }
    if t.nodes > vocab.node_customers.len() {
        return Err(Error::Shape(format!(
            "token tensor has {} nodes, vocabulary {}",
            t.nodes,
            vocab.node_customers.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub ppl: f64,
    pub accuracy: f64,
}

impl From<LossStats> for EvalMetrics {
    fn from(s: LossStats) -> Self {
        let loss = s.mean_loss();
        Self {
            loss,
            ppl: loss.exp(),
            accuracy: s.accuracy(),
        }
    }
}

/// Teacher-forced loss over all units of `tokens`. Node indices are used as-is.
pub fn evaluate_model(
    model: &Model,
    tokens: &TokenTensor,
    customers: &[usize],
    unit_len: usize,
) -> Result<EvalMetrics> {
    let t = &tokens.tokens;
    let units = sequence_units(t.nodes, t.minutes, unit_len.min(model.config.max_len));
    let parts: Vec<Result<LossStats>> = units
        .par_iter()
        .map(|u| {
            let steps = unit_steps(tokens, u.node, u.start, u.len, u.node, customers[u.node]);
            model.sequence_loss(&steps)
        })
        .collect();
    let mut total = LossStats::default();
    for p in parts {
        total.merge(&p?);
    }
    if total.count == 0 {
        return Err(Error::Empty("no minutes to evaluate"));
    }
    Ok(total.into())
}

/// Evaluates a checkpoint, refusing tensors built with a different feature schema.
pub fn evaluate(checkpoint: &ModelCheckpoint, tokens: &TokenTensor) -> Result<EvalMetrics> {
    if tokens.tokens.schema_hash != checkpoint.schema_hash {
        return Err(Error::SchemaMismatch {
            expected: checkpoint.schema_hash.clone(),
            found: tokens.tokens.schema_hash.clone(),
        });
    }
    check_vocab(tokens, &checkpoint.model.config, &checkpoint.vocab)?;
    evaluate_model(
        &checkpoint.model,
        tokens,
        &checkpoint.vocab.node_customers,
        checkpoint.model.config.max_len,
    )
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, tc: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.step as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.step as i32);
        let lr = tc.learning_rate;
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            for i in 0..p.len() {
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + tc.epsilon);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub val_acc: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Parameters of the epoch with the lowest validation loss.
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochLog>,
}

/// Gradient of the mean token loss over one batch, summed in batch order.
fn batch_gradient(
    model: &Model,
    tokens: &TokenTensor,
    customers: &[usize],
    batch: &[Unit],
    seeds: &[u64],
) -> Result<(ModelParams, LossStats)> {
    let n_tokens: usize = batch.iter().map(|u| u.len).sum::<usize>() * model.config.n_features;
    let scale = 1.0 / n_tokens.max(1) as f64;
    let parts: Vec<Result<(ModelParams, LossStats)>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(u, &seed)| {
            let steps = unit_steps(tokens, u.node, u.start, u.len, u.node, customers[u.node]);
            let mut g = ModelParams::zeros(&model.config);
            let stats = model.loss_and_grad(&steps, Mode::Train { seed }, scale, &mut g)?;
            Ok((g, stats))
        })
        .collect();
    let mut grads = ModelParams::zeros(&model.config);
    let mut stats = LossStats::default();
    for p in parts {
        let (g, s) = p?;
        grads.add_scaled(&g, 1.0);
        stats.merge(&s);
    }
    Ok((grads, stats))
}

/// Trains a fresh model on `train` and keeps the parameters with the best loss on `val`.
///
/// `on_epoch` receives each epoch's log line as it completes.
pub fn pretrain(
    train: &TokenTensor,
    val: &TokenTensor,
    vocab: &VocabularyMap,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainResult> {
    config.validate()?;
    model_config.validate()?;
    if train.tokens.schema_hash != val.tokens.schema_hash {
        return Err(Error::SchemaMismatch {
            expected: train.tokens.schema_hash.clone(),
            found: val.tokens.schema_hash.clone(),
        });
    }
    check_vocab(train, model_config, vocab)?;
    check_vocab(val, model_config, vocab)?;
    let customers = &vocab.node_customers;
    let unit_len = config.unit_len.min(model_config.max_len);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(model_config.clone(), rng.gen())?;
    let mut adam = Adam::new(model_config);
    let units = sequence_units(train.tokens.nodes, train.tokens.minutes, unit_len);
    if units.is_empty() {
        return Err(Error::Empty("training tensor has no minutes"));
    }

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let clock = Instant::now();
        let mut batches = make_batches(&units, config.batch_size, &mut rng);
        if let Some(cap) = config.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let mut epoch_stats = LossStats::default();
        for (b, batch) in batches.iter().enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let (mut grads, stats) = batch_gradient(&model, train, customers, batch, &seeds)?;
            if !stats.nll_sum.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("epoch {epoch}, batch {b}"),
                });
            }
            let norm = grads.squared_norm().sqrt();
            if config.clip_norm > 0.0 && norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
            adam.update(&mut model.params, &grads, config);
            epoch_stats.merge(&stats);
        }
        let val_metrics = evaluate_model(&model, val, customers, unit_len)?;
        if !val_metrics.loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation after epoch {epoch}"),
            });
        }
        let log = EpochLog {
            epoch,
            train_loss: epoch_stats.mean_loss(),
            val_loss: val_metrics.loss,
            val_ppl: val_metrics.ppl,
            val_acc: val_metrics.accuracy,
            wall_s: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);

        if best.as_ref().is_none_or(|(l, _, _)| val_metrics.loss < *l) {
            best = Some((val_metrics.loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best_loss, best_epoch, best_model) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, model),
    };
    Ok(PretrainResult {
        checkpoint: ModelCheckpoint {
            model: best_model,
            schema_hash: train.tokens.schema_hash.clone(),
            config_digest: String::new(),
            vocab: vocab.clone(),
            training: TrainingRecord {
                steps: adam.step,
                epochs: history.len(),
                best_epoch,
                best_val_loss: best_loss.is_finite().then_some(best_loss),
            },
        },
        history,
    })
}

/// Per-(node, feature) first-order Markov model over categories with add-one smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramModel {
    pub n_bins: usize,
    pub nodes: usize,
    pub features: usize,
    /// `transitions[(node * features + feature) * n_bins * n_bins + prev * n_bins + next]`.
    transitions: Vec<u64>,
    /// `unigrams[(node * features + feature) * n_bins + value]`.
    unigrams: Vec<u64>,
}

impl BigramModel {
    pub fn fit(tokens: &TokenTensor) -> Self {
        let t = &tokens.tokens;
        let nb = tokens.n_bins;
        let mut transitions = vec![0u64; t.nodes * t.features * nb * nb];
        let mut unigrams = vec![0u64; t.nodes * t.features * nb];
        for v in 0..t.nodes {
            for m in 0..t.minutes {
                let row = t.row(v, m);
                let prev = (m > 0).then(|| t.row(v, m - 1));
                for (f, &y) in row.iter().enumerate() {
                    let cell = v * t.features + f;
                    unigrams[cell * nb + y as usize] += 1;
                    if let Some(p) = prev {
                        transitions[(cell * nb + p[f] as usize) * nb + y as usize] += 1;
                    }
                }
            }
        }
        Self {
            n_bins: nb,
            nodes: t.nodes,
            features: t.features,
            transitions,
            unigrams,
        }
    }

    fn counts(&self, node: usize, feature: usize, prev: Option<u8>) -> &[u64] {
        let nb = self.n_bins;
        let cell = node * self.features + feature;
        match prev {
            Some(p) => &self.transitions[(cell * nb + p as usize) * nb..][..nb],
            None => &self.unigrams[cell * nb..][..nb],
        }
    }

    /// Smoothed `p(next | prev)`; `prev = None` is the unconditional distribution.
    pub fn prob(&self, node: usize, feature: usize, prev: Option<u8>, next: u8) -> f64 {
        let c = self.counts(node, feature, prev);
        let total: u64 = c.iter().sum();
        (c[next as usize] + 1) as f64 / (total + self.n_bins as u64) as f64
    }

    /// Most likely next category; ties go to the lowest.
    pub fn predict(&self, node: usize, feature: usize, prev: Option<u8>) -> u8 {
        let c = self.counts(node, feature, prev);
        let mut best = 0;
        for (i, &x) in c.iter().enumerate() {
            if x > c[best] {
                best = i;
            }
        }
        best as u8
    }

    /// Same units and normalization as [`evaluate_model`]: the first minute of every unit is
    /// scored with the unconditional distribution.
    pub fn evaluate(&self, tokens: &TokenTensor, unit_len: usize) -> Result<EvalMetrics> {
        let t = &tokens.tokens;
        if t.nodes > self.nodes || t.features != self.features || tokens.n_bins != self.n_bins {
            return Err(Error::Shape("token tensor does not match bigram model".into()));
        }
        let mut stats = LossStats::default();
        for u in sequence_units(t.nodes, t.minutes, unit_len) {
            for m in u.start..u.start + u.len {
                let row = t.row(u.node, m);
                let prev = (m > u.start).then(|| t.row(u.node, m - 1));
                for (f, &y) in row.iter().enumerate() {
                    let p = prev.map(|p| p[f]);
                    stats.nll_sum -= self.prob(u.node, f, p, y).ln();
                    stats.correct += u64::from(self.predict(u.node, f, p) == y);
                    stats.count += 1;
                }
            }
        }
        if stats.count == 0 {
            return Err(Error::Empty("no minutes to evaluate"));
        }
        Ok(stats.into())
    }
}
