//! The multitask CNN encoder.
//!
//! Embedded sequences (`[B×N×d]`) are transposed to channel-major and fed
//! to one conv block per kernel size: valid conv → batch norm → masked
//! max-over-time → ReLU. The pooled features are concatenated, passed
//! through `FC2(Dropout(ReLU(FC1(F))))` to the shared representation `o`,
//! and each task head maps `o` to two-class logits.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EncodedBatch;
use crate::embedding::{self, PeMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{BnState, Graph, Mode, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length `N` after padding/truncation.
    pub max_len: usize,
    /// Real page tokens; the table has one extra row for index 0.
    pub page_vocab: usize,
    pub category_vocab: usize,
    pub d_page: usize,
    pub d_category: usize,
    pub d_time: usize,
    pub kernel_sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub fc1_dim: usize,
    pub shared_dim: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dropout_rate: f64,
    pub pe_mode: PeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_len: 100,
            page_vocab: 500,
            category_vocab: 100,
            d_page: 8,
            d_category: 6,
            d_time: 2,
            kernel_sizes: vec![8, 16, 32, 64],
            channels: vec![50, 50, 50, 50],
            fc1_dim: 128,
            shared_dim: 32,
            tasks: 3,
            classes_per_task: 2,
            dropout_rate: 0.5,
            pe_mode: PeMode::Fixed,
        }
    }
}

impl ModelConfig {
    /// Model dimension `d = d_page + d_category + d_time`.
    pub fn model_dim(&self) -> usize {
        self.d_page + self.d_category + self.d_time
    }

    /// Width of the pooled feature vector `F`.
    pub fn feature_dim(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel_sizes.is_empty() {
            return bad("at least one kernel size is required".into());
        }
        if self.kernel_sizes.len() != self.channels.len() {
            return bad(format!("{} kernel sizes but {} channel counts", self.kernel_sizes.len(), self.channels.len()));
        }
        if self.kernel_sizes.contains(&0) || self.channels.contains(&0) {
            return bad("kernel sizes and channel counts must be positive".into());
        }
        let kmax = *self.kernel_sizes.iter().max().unwrap();
        if kmax > self.max_len {
            return bad(format!("kernel size {kmax} exceeds max_len {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.pe_mode == PeMode::Fixed && !self.model_dim().is_multiple_of(2) {
            return bad(format!("fixed positional encoding needs an even model dimension, got {}", self.model_dim()));
        }
        if self.d_page == 0 || self.d_category == 0 || self.d_time == 0 {
            return bad("embedding dimensions must be positive".into());
        }
        if self.fc1_dim == 0 || self.shared_dim == 0 || self.tasks == 0 || self.classes_per_task < 2 {
            return bad("fc1_dim, shared_dim and tasks must be positive, classes_per_task at least 2".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    /// Content hash of the canonical TOML form.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Closed-form parameter counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub embeddings: usize,
    pub positional: usize,
    pub conv: usize,
    pub batchnorm: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub heads: usize,
    pub total: usize,
}

pub fn count_params(c: &ModelConfig) -> ParamCounts {
    let d = c.model_dim();
    let f = c.feature_dim();
    let mut p = ParamCounts {
        embeddings: (c.page_vocab + 1) * c.d_page + (c.category_vocab + 1) * c.d_category + c.d_time,
        positional: if c.pe_mode == PeMode::Learnable { c.max_len * d } else { 0 },
        conv: c.kernel_sizes.iter().zip(&c.channels).map(|(k, ch)| k * d * ch + ch).sum(),
        batchnorm: 2 * f,
        fc1: f * c.fc1_dim + c.fc1_dim,
        fc2: c.fc1_dim * c.shared_dim + c.shared_dim,
        heads: c.tasks * (c.shared_dim * c.classes_per_task + c.classes_per_task),
        total: 0,
    };
    p.total = p.embeddings + p.positional + p.conv + p.batchnorm + p.fc1 + p.fc2 + p.heads;
    p
}

impl fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in [
            ("embeddings", self.embeddings),
            ("positional", self.positional),
            ("conv", self.conv),
            ("batchnorm", self.batchnorm),
            ("fc1", self.fc1),
            ("fc2", self.fc2),
            ("heads", self.heads),
        ] {
            writeln!(f, "{name:<12}{n:>10}")?;
        }
        write!(f, "{:<12}{:>10}", "total", self.total)
    }
}

struct ConvBlock<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

/// All parameters of the encoder plus batch-norm running statistics.
pub struct MtcnnModel<T: Scalar> {
    config: ModelConfig,
    page: Tensor<T>,
    category: Tensor<T>,
    time: Tensor<T>,
    positional: Option<Tensor<T>>,
    fixed_pe: Option<Tensor<T>>,
    convs: Vec<ConvBlock<T>>,
    bn: Vec<BnState<T>>,
    fc1: (Tensor<T>, Tensor<T>),
    fc2: (Tensor<T>, Tensor<T>),
    heads: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Handles produced by one forward pass.
pub struct Forward {
    /// `[B×shared_dim]` shared representation.
    pub shared: Var,
    /// One `[B×classes]` tensor per task.
    pub logits: Vec<Var>,
    /// Leaves for every trainable parameter, in [`MtcnnModel::param_names`] order.
    pub params: Vec<Var>,
}

/// Per-record output of [`MtcnnModel::export_embedding`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub scores: Vec<f64>,
    pub vector: Vec<f64>,
}

/// Stand-in RNG for paths that never draw: fixed positional encodings and
/// eval-mode dropout.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("no randomness expected here")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("no randomness expected here")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("no randomness expected here")
    }
}

fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    embedding::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Valid-window mask for a kernel of size `k`: window `t` is kept when
/// `[t, t+k)` contains at least one real event.
pub fn window_mask(valid: &[bool], rows: usize, len: usize, k: usize) -> Vec<bool> {
    let t_out = len + 1 - k;
    let mut out = Vec::with_capacity(rows * t_out);
    for r in 0..rows {
        let row = &valid[r * len..(r + 1) * len];
        let mut prefix = vec![0usize; len + 1];
        for (i, &v) in row.iter().enumerate() {
            prefix[i + 1] = prefix[i] + usize::from(v);
        }
        out.extend((0..t_out).map(|t| prefix[t + k] > prefix[t]));
    }
    out
}

impl<T: Scalar> MtcnnModel<T> {
    /// Fresh model. Embedding tables use Xavier-uniform; conv and dense
    /// layers use U(±1/√fan_in); batch-norm scale/shift start at 1/0.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let page = embedding::xavier_uniform(config.page_vocab + 1, config.d_page, rng);
        let category = embedding::xavier_uniform(config.category_vocab + 1, config.d_category, rng);
        let time = embedding::xavier_uniform(1, config.d_time, rng);
        let positional = match config.pe_mode {
            PeMode::Learnable => Some(embedding::positional_matrix(PeMode::Learnable, config.max_len, d, rng)?),
            _ => None,
        };
        let mut convs = Vec::new();
        for (&k, &c) in config.kernel_sizes.iter().zip(&config.channels) {
            convs.push(ConvBlock {
                weight: fan_in_uniform(&[c, d, k], d * k, rng),
                bias: fan_in_uniform(&[c], d * k, rng),
                gamma: Tensor::from_f64(&[c], &vec![1.0; c])?,
                beta: Tensor::zeros(&[c]),
            });
        }
        let f = config.feature_dim();
        let fc1 = (fan_in_uniform(&[f, config.fc1_dim], f, rng), fan_in_uniform(&[config.fc1_dim], f, rng));
        let fc2 = (
            fan_in_uniform(&[config.fc1_dim, config.shared_dim], config.fc1_dim, rng),
            fan_in_uniform(&[config.shared_dim], config.fc1_dim, rng),
        );
        let heads = (0..config.tasks)
            .map(|_| {
                (
                    fan_in_uniform(&[config.shared_dim, config.classes_per_task], config.shared_dim, rng),
                    fan_in_uniform(&[config.classes_per_task], config.shared_dim, rng),
                )
            })
            .collect();
        let mut model = MtcnnModel {
            bn: config.channels.iter().map(|&c| BnState::new(c)).collect(),
            fixed_pe: None,
            config,
            page,
            category,
            time,
            positional,
            convs,
            fc1,
            fc2,
            heads,
        };
        model.refresh_fixed_pe()?;
        Ok(model)
    }

    fn refresh_fixed_pe(&mut self) -> Result<()> {
        self.fixed_pe = match self.config.pe_mode {
            PeMode::Fixed => Some(embedding::positional_matrix(
                PeMode::Fixed,
                self.config.max_len,
                self.config.model_dim(),
                &mut NoRng,
            )?),
            _ => None,
        };
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Stable parameter names, in enumeration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embedding.page".to_string(), "embedding.category".into(), "embedding.time".into()];
        if self.positional.is_some() {
            names.push("positional".into());
        }
        for j in 0..self.convs.len() {
            names.push(format!("conv.{j}.weight"));
            names.push(format!("conv.{j}.bias"));
            names.push(format!("bn.{j}.gamma"));
            names.push(format!("bn.{j}.beta"));
        }
        names.extend(["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].map(String::from));
        for t in 0..self.heads.len() {
            names.push(format!("head.{t}.weight"));
            names.push(format!("head.{t}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.page, &self.category, &self.time];
        out.extend(self.positional.iter());
        for c in &self.convs {
            out.extend([&c.weight, &c.bias, &c.gamma, &c.beta]);
        }
        out.extend([&self.fc1.0, &self.fc1.1, &self.fc2.0, &self.fc2.1]);
        for h in &self.heads {
            out.extend([&h.0, &h.1]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.page, &mut self.category, &mut self.time];
        out.extend(self.positional.iter_mut());
        for c in &mut self.convs {
            out.extend([&mut c.weight, &mut c.bias, &mut c.gamma, &mut c.beta]);
        }
        out.extend([&mut self.fc1.0, &mut self.fc1.1, &mut self.fc2.0, &mut self.fc2.1]);
        for h in &mut self.heads {
            out.extend([&mut h.0, &mut h.1]);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.param_names().into_iter().zip(self.params()).collect()
    }

    /// Total number of trainable scalars, by enumeration.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    /// Replaces every parameter by name; used when restoring checkpoints.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let names = self.param_names();
        if named.len() != names.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((want, slot), (name, t)) in names.iter().zip(self.params_mut()).zip(named) {
            if *want != name {
                return Err(Error::Compatibility(format!("expected parameter {want}, found {name}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Train-mode forward pass; updates batch-norm running statistics.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        batch: &EncodedBatch,
        rng: &mut R,
    ) -> Result<Forward> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(g, batch, Mode::Train, rng, &mut bn);
        self.bn = bn;
        out
    }

    /// Eval-mode forward pass: running statistics, no dropout.
    pub fn forward_eval(&self, g: &mut Graph<T>, batch: &EncodedBatch) -> Result<Forward> {
        let mut bn = self.bn.clone();
        self.run(g, batch, Mode::Eval, &mut NoRng, &mut bn)
    }

    /// Forward pass in either mode. In train mode `bn` receives updated
    /// running statistics.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &EncodedBatch,
        mode: Mode,
        rng: &mut R,
        bn: &mut [BnState<T>],
    ) -> Result<Forward> {
        self.run(g, batch, mode, rng, bn)
    }

    /// Forward pass over caller-supplied parameter leaves, which must
    /// follow [`MtcnnModel::param_names`] order and shapes. The model's own
    /// parameter values are ignored.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: Vec<Var>,
        batch: &EncodedBatch,
        mode: Mode,
        rng: &mut R,
        bn: &mut [BnState<T>],
    ) -> Result<Forward> {
        let want = self.params();
        if params.len() != want.len() {
            return Err(Error::Dimension(format!("expected {} parameter leaves, got {}", want.len(), params.len())));
        }
        for ((&v, p), name) in params.iter().zip(&want).zip(self.param_names()) {
            if g.shape(v) != p.shape() {
                return Err(crate::error::dim_err(&name, g.shape(v), p.shape()));
            }
        }
        self.build(g, params, batch, mode, rng, bn)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        batch: &EncodedBatch,
        mode: Mode,
        rng: &mut R,
        bn: &mut [BnState<T>],
    ) -> Result<Forward> {
        let params: Vec<Var> = self.params().into_iter().map(|p| g.param(p.clone())).collect();
        self.build(g, params, batch, mode, rng, bn)
    }

    fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        params: Vec<Var>,
        batch: &EncodedBatch,
        mode: Mode,
        rng: &mut R,
        bn: &mut [BnState<T>],
    ) -> Result<Forward> {
        let cfg = &self.config;
        if batch.max_len != cfg.max_len {
            return Err(Error::Dimension(format!(
                "batch encoded with length {}, model expects {}",
                batch.max_len, cfg.max_len
            )));
        }
        if batch.tasks != cfg.tasks {
            return Err(Error::Dimension(format!("batch has {} tasks, model has {}", batch.tasks, cfg.tasks)));
        }
        let (b, n) = (batch.len(), cfg.max_len);
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter order");
        let (page_t, cat_t, time_t) = (next(), next(), next());
        let lpe = self.positional.as_ref().map(|_| next());

        let pe = embedding::embed_categorical(g, page_t, &batch.page_ids, b, n)?;
        let ce = embedding::embed_categorical(g, cat_t, &batch.category_ids, b, n)?;
        let te = embedding::embed_continuous(g, time_t, &batch.dwell_norm, b, n)?;
        let mut s = embedding::combine(g, pe, ce, te)?;
        let pe_var = match (lpe, &self.fixed_pe) {
            (Some(v), _) => Some(v),
            (None, Some(fixed)) => Some(g.constant(fixed.clone())),
            _ => None,
        };
        if let Some(p) = pe_var {
            s = embedding::apply_pe(g, s, p)?;
        }
        let x = g.transpose12(s)?;

        let mut pooled = Vec::with_capacity(self.convs.len());
        for (j, &k) in cfg.kernel_sizes.iter().enumerate() {
            let (w, bias, gamma, beta) = (next(), next(), next(), next());
            let mask = window_mask(&batch.valid_mask, b, n, k);
            pooled.push(conv_block(g, x, [w, bias, gamma, beta], &mut bn[j], &mask, mode)?);
        }
        let f = g.concat_last(&pooled)?;
        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        let h = g.affine(f, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, cfg.dropout_rate, mode, rng)?;
        let shared = g.affine(h, w2, b2)?;
        let mut logits = Vec::with_capacity(cfg.tasks);
        for _ in 0..cfg.tasks {
            let (hw, hb) = (next(), next());
            logits.push(g.affine(shared, hw, hb)?);
        }
        Ok(Forward { shared, logits, params })
    }

    /// Copies gradients from a finished backward pass into the parameter
    /// tensors.
    pub fn collect_grads(&mut self, g: &Graph<T>, fwd: &Forward) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&fwd.params) {
            let grad = g.grad(v).ok_or_else(|| Error::Numeric("parameter missing from backward pass".into()))?;
            p.set_grad(grad.to_vec())?;
        }
        Ok(())
    }

    /// Eval-mode scores and shared vectors, processed in chunks of
    /// `chunk` records that may run in parallel.
    pub fn export_embedding(&self, batch: &EncodedBatch, chunk: usize) -> Result<Vec<EmbeddingRecord>> {
        let chunk = chunk.max(1);
        let parts = batch.len().div_ceil(chunk);
        let results = Exec::default().map(parts, |i| -> Result<Vec<EmbeddingRecord>> {
            let sub = batch.slice(i * chunk, ((i + 1) * chunk).min(batch.len()));
            let mut g = Graph::with_exec(Exec::Sequential);
            let fwd = self.forward_eval(&mut g, &sub)?;
            let dim = self.config.shared_dim;
            let k = self.config.classes_per_task;
            let shared = g.value(fwd.shared);
            let mut out = Vec::with_capacity(sub.len());
            for r in 0..sub.len() {
                let scores = fwd
                    .logits
                    .iter()
                    .map(|&l| {
                        let row: Vec<f64> = g.value(l)[r * k..(r + 1) * k].iter().map(|v| v.as_f64()).collect();
                        softmax(&row)[1]
                    })
                    .collect();
                out.push(EmbeddingRecord {
                    id: sub.record_ids[r].clone(),
                    scores,
                    vector: shared[r * dim..(r + 1) * dim].iter().map(|v| v.as_f64()).collect(),
                });
            }
            Ok(out)
        });
        let mut all = Vec::with_capacity(batch.len());
        for r in results {
            all.extend(r?);
        }
        Ok(all)
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// conv1d → batchnorm1d → masked max-over-time → ReLU.
pub fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    [w, bias, gamma, beta]: [Var; 4],
    bn: &mut BnState<T>,
    window_mask: &[bool],
    mode: Mode,
) -> Result<Var> {
    let c = g.conv1d(x, w, bias)?;
    let c = g.batchnorm1d(c, gamma, beta, bn, mode)?;
    let p = g.max_over_time(c, Some(window_mask)).map_err(|e| match e {
        Error::Data(_) => Error::Data("sequence is entirely padding: every conv window is masked".into()),
        other => other,
    })?;
    Ok(g.relu(p))
}
