//! Multitask loss weighting, Adam and the training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EncodedBatch;
use crate::embedding::PeMode;
use crate::error::{Error, Result};
use crate::metrics::ks_statistic;
use crate::model::{ModelConfig, MtcnnModel};
use crate::tensor::{check_gradients, GradCheckReport, Graph, Mode, Scalar, Tensor, Var};

/// `softmax(ξ)`.
pub fn rlw_weights(xi: &[f64]) -> Vec<f64> {
    let m = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xi.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Random loss weights: `ξ ~ N(0, 1)^T`, `W = softmax(ξ)`.
#[derive(Clone, Debug)]
pub struct RlwSampler {
    tasks: usize,
    rng: ChaCha8Rng,
}

impl RlwSampler {
    pub fn new(tasks: usize, seed: u64) -> Self {
        assert!(tasks >= 1, "at least one task");
        RlwSampler { tasks, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.tasks).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        rlw_weights(&xi)
    }
}

/// How per-task losses are combined.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Weighting {
    #[default]
    Rlw,
    Uniform,
    Fixed(Vec<f64>),
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rlw" => Ok(Weighting::Rlw),
            "uniform" => Ok(Weighting::Uniform),
            other => {
                let list = other.strip_prefix("fixed:").ok_or_else(|| {
                    Error::Config(format!("weighting {other:?}: expected rlw, uniform or fixed:<w1,..,wT>"))
                })?;
                let w = list
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("weighting {other:?}: {e}")))?;
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Config(format!("weighting {other:?}: weights must be finite and non-negative")));
                }
                Ok(Weighting::Fixed(w))
            }
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weighting::Rlw => f.write_str("rlw"),
            Weighting::Uniform => f.write_str("uniform"),
            Weighting::Fixed(w) => {
                let parts: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
        }
    }
}

impl Serialize for Weighting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Weighting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `Σ_t w_t · CE_t`. Returns the total and the per-task losses.
pub fn multitask_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[Vec<usize>],
    weights: &[f64],
) -> Result<(Var, Vec<Var>)> {
    if logits.len() != weights.len() || labels.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} logit tensors, {} label columns, {} weights",
            logits.len(),
            labels.len(),
            weights.len()
        )));
    }
    let per_task =
        logits.iter().zip(labels).map(|(&l, y)| g.softmax_cross_entropy(l, y)).collect::<Result<Vec<_>>>()?;
    let w: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
    let total = g.weighted_sum(&per_task, &w)?;
    Ok((total, per_task))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(lr: f64, params: &[&Tensor<T>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from each parameter's stored gradient. Nothing is
    /// modified if any gradient is missing or non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Dimension(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        for (i, p) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| Error::Numeric(format!("parameter {i} has no gradient")))?;
            if g.len() != self.m[i].len() {
                return Err(crate::error::dim_err("moment buffer", &[self.m[i].len()], &[g.len()]));
            }
            if let Some(x) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient {x} in parameter {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked").to_vec();
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: Weighting,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 64, lr: 1e-4, weighting: Weighting::Rlw, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Weighting::Fixed(w) = &self.weighting {
            if w.len() != tasks {
                return Err(Error::Config(format!("fixed weighting has {} weights for {tasks} tasks", w.len())));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean unweighted cross-entropy per task over the epoch's batches.
    pub task_ce: Vec<f64>,
    /// Held-out KS per task; `None` where the split has a single class.
    pub val_ks: Vec<Option<f64>>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Weighted loss of every step, in order.
    pub losses: Vec<f64>,
}

// Independent streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const RLW_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Per-task positive-class scores in eval mode.
pub fn score<T: Scalar>(model: &MtcnnModel<T>, data: &EncodedBatch) -> Result<Vec<Vec<f64>>> {
    let export = model.export_embedding(data, 256)?;
    Ok((0..model.config().tasks).map(|t| export.iter().map(|e| e.scores[t]).collect()).collect())
}

/// Held-out KS per task.
pub fn validation_ks<T: Scalar>(model: &MtcnnModel<T>, data: &EncodedBatch) -> Result<Vec<Option<f64>>> {
    let scores = score(model, data)?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let labels: Vec<u8> = (0..data.len()).map(|r| data.label(r, t)).collect();
            ks_statistic(s, &labels).ok()
        })
        .collect())
}

/// Mini-batch training for a fixed epoch budget.
///
/// Each step runs a train-mode forward pass, draws task weights, backprops
/// the weighted loss and applies Adam. A trailing batch of one record is
/// dropped since batch statistics need at least two rows. `on_epoch` sees
/// every log line as it is produced.
pub fn train<T: Scalar>(
    model: &mut MtcnnModel<T>,
    data: &EncodedBatch,
    validation: Option<&EncodedBatch>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    let tasks = model.config().tasks;
    cfg.validate(tasks)?;
    if data.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 records, got {}", data.len())));
    }
    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
    let mut rlw = RlwSampler { tasks, rng: stream(cfg.seed, RLW_STREAM) };
    let mut adam = Adam::new(cfg.lr, &model.params());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut ce_sum = vec![0.0; tasks];
        let mut batches = 0usize;
        for rows in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch = data.select(rows);
            let mut g = Graph::new();
            let fwd = model.forward_train(&mut g, &batch, &mut dropout_rng)?;
            let weights = match &cfg.weighting {
                Weighting::Rlw => rlw.sample(),
                Weighting::Uniform => vec![1.0 / tasks as f64; tasks],
                Weighting::Fixed(w) => w.clone(),
            };
            let labels: Vec<Vec<usize>> = (0..tasks).map(|t| batch.task_labels(t)).collect();
            let (loss, per_task) = multitask_loss(&mut g, &fwd.logits, &labels, &weights)?;
            let step = report.losses.len() + 1;
            g.backward(loss).map_err(|e| at_step(e, step))?;
            model.collect_grads(&g, &fwd)?;
            adam.step(&mut model.params_mut()).map_err(|e| at_step(e, step))?;
            report.losses.push(g.value(loss)[0].as_f64());
            for (acc, &v) in ce_sum.iter_mut().zip(&per_task) {
                *acc += g.value(v)[0].as_f64();
            }
            batches += 1;
        }
        let val_ks = match validation {
            Some(v) => validation_ks(model, v)?,
            None => vec![None; tasks],
        };
        let log = EpochLog {
            epoch,
            task_ce: ce_sum.iter().map(|s| s / batches.max(1) as f64).collect(),
            val_ks,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log)?;
        report.epochs.push(log);
    }
    Ok(report)
}

/// Configuration used by the full-model gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_len: 12,
        page_vocab: 6,
        category_vocab: 3,
        d_page: 2,
        d_category: 1,
        d_time: 1,
        kernel_sizes: vec![2, 3],
        channels: vec![3, 3],
        fc1_dim: 8,
        shared_dim: 4,
        tasks: 2,
        classes_per_task: 2,
        dropout_rate: 0.5,
        pe_mode: PeMode::Learnable,
    }
}

/// A random encoded batch for `config`, with left padding on some rows.
pub fn random_batch(config: &ModelConfig, rows: usize, rng: &mut impl Rng) -> EncodedBatch {
    let n = config.max_len;
    let mut b = EncodedBatch {
        max_len: n,
        tasks: config.tasks,
        page_ids: Vec::new(),
        category_ids: Vec::new(),
        dwell_norm: Vec::new(),
        valid_mask: Vec::new(),
        labels: Vec::new(),
        amounts: Vec::new(),
        record_ids: Vec::new(),
    };
    for r in 0..rows {
        let pad = if r % 2 == 0 { 0 } else { rng.random_range(0..n / 2) };
        for i in 0..n {
            let real = i >= pad;
            b.valid_mask.push(real);
            b.page_ids.push(if real { rng.random_range(0..=config.page_vocab) } else { 0 });
            b.category_ids.push(if real { rng.random_range(0..=config.category_vocab) } else { 0 });
            b.dwell_norm.push(if real { rng.random_range(-3.0..2.0) } else { 0.0 });
        }
        for _ in 0..config.tasks {
            b.labels.push(rng.random_range(0..2));
        }
        b.amounts.push(1.0);
        b.record_ids.push(format!("r{r}"));
    }
    b
}

#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub names: Vec<String>,
}

impl ModelGradCheck {
    pub fn worst_name(&self) -> &str {
        &self.names[self.report.worst_param]
    }
}

/// Finite-difference check of every parameter tensor of the tiny model in
/// 64-bit precision.
///
/// Batch-norm running statistics are first moved away from their initial
/// values by a few train-mode passes; the check itself runs in eval mode,
/// so dropout is off and batch norm is a fixed affine map per channel.
pub fn model_gradcheck(seed: u64) -> Result<ModelGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = tiny_config();
    let mut model = MtcnnModel::<f64>::new(config.clone(), &mut rng)?;
    for _ in 0..3 {
        let warm = random_batch(&config, 8, &mut rng);
        model.forward_train(&mut Graph::new(), &warm, &mut rng)?;
    }
    let batch = random_batch(&config, 6, &mut rng);
    let labels: Vec<Vec<usize>> = (0..config.tasks).map(|t| batch.task_labels(t)).collect();
    let weights = [0.6, 0.4];
    let params: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    let report = check_gradients(
        |g, vars| {
            let mut bn = model.bn_states().to_vec();
            let fwd = model.forward_with(g, vars.to_vec(), &batch, Mode::Eval, &mut rng_unused(), &mut bn)?;
            Ok(multitask_loss(g, &fwd.logits, &labels, &weights)?.0)
        },
        &params,
        1e-6,
        seed,
    )?;
    Ok(ModelGradCheck { report, names: model.param_names() })
}

fn rng_unused() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}
