use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::exec::Exec;

use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BnState { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }
}

enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, dims: ConvDims },
    MaxOverTime { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    Dropout { x: Var, scale: Vec<T> },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    ScaleEmbedding { table: Var, values: Vec<T> },
    Concat { parts: Vec<(Var, usize)> },
    AddPositional { x: Var, pe: Var },
    Transpose12 { x: Var },
    Reshape { x: Var },
    WeightedSum { terms: Vec<Var>, weights: Vec<T> },
    Sum { x: Var },
}

/// An append-only record of executed ops.
///
/// Nodes are stored in execution order, which is a topological order, so the
/// backward pass is a single reverse sweep that visits every node once.
/// A graph is used for one forward/backward pass on one thread.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    exec: Exec,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph { values: Vec::new(), ops: Vec::new(), grads: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value.with_requires_grad(requires_grad));
        self.ops.push(op);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Adds an input tensor; its `requires_grad` flag decides whether it
    /// receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Adds a non-trainable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad()
    }

    /// Gradient after [`Graph::backward`]; `None` for nodes that do not
    /// require one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clone of the node's tensor with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.values[v.0].clone();
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient shape");
        }
        t
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    // ---------------------------------------------------------------------
    // Forward ops
    // ---------------------------------------------------------------------

    /// `x[B×n]·W[n×m] + b[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(dim_err("affine input vs weight", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(dim_err("affine weight vs bias", ws, bs));
        }
        let (rows, n, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b));
        }
        kernels::gemm(rows, n, m, T::one(), self.value(x), (n, 1), self.value(w), (m, 1), T::one(), &mut out, (m, 1));
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![rows, m], out)?, Op::Affine { x, w, b }, rg))
    }

    /// Valid 1-D convolution of `x[B×C_in×L]` with `w[C_out×C_in×k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(dim_err("conv1d input vs kernel", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(dim_err("conv1d kernel vs bias", ws, bs));
        }
        let dims = ConvDims { batch: xs[0], c_in: xs[1], len: xs[2], c_out: ws[0], k: ws[2] };
        if dims.k == 0 {
            return Err(Error::Config("conv1d kernel size must be at least 1".into()));
        }
        if dims.len < dims.k {
            return Err(Error::Config(format!(
                "sequence shorter than kernel: length {} < kernel {}",
                dims.len, dims.k
            )));
        }
        let out = kernels::conv1d_forward(&dims, self.value(x), self.value(w), self.value(b), self.exec);
        let rg = self.rg(&[x, w, b]);
        let t = Tensor::new(vec![dims.batch, dims.c_out, dims.out_len()], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, dims }, rg))
    }

    /// Per-channel max of `x[B×C×T]` over valid time steps.
    ///
    /// `mask` is `[B×T]`; positions marked false are skipped. Ties go to the
    /// first index.
    pub fn max_over_time(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("max_over_time expects [B×C×T], got {xs:?}")));
        }
        let (b, c, t) = (xs[0], xs[1], xs[2]);
        if let Some(m) = mask {
            if m.len() != b * t {
                return Err(dim_err("max_over_time mask", &[m.len()], &[b, t]));
            }
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::with_capacity(b * c);
        for bi in 0..b {
            let valid = |ti: usize| mask.is_none_or(|m| m[bi * t + ti]);
            if !(0..t).any(valid) {
                return Err(Error::Data(format!("batch row {bi} has no valid time step to pool over")));
            }
            for ci in 0..c {
                let row = &xv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let mut best: Option<usize> = None;
                for (ti, &v) in row.iter().enumerate() {
                    if valid(ti) && best.is_none_or(|j| v > row[j]) {
                        best = Some(ti);
                    }
                }
                let j = best.expect("row has a valid position");
                out.push(row[j]);
                argmax.push(j);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::MaxOverTime { x, argmax }, rg))
    }

    /// Batch normalization of `x[B×C×T]` per channel over batch and time.
    pub fn batchnorm1d(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BnState<T>, mode: Mode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("batchnorm1d expects [B×C×T], got {xs:?}")));
        }
        let (b, c, t) = (xs[0], xs[1], xs[2]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(dim_err(&format!("batchnorm1d {name}"), self.shape(v), &[c]));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(dim_err("batchnorm1d running stats", &[state.running_mean.len()], &[c]));
        }
        let n = b * t;
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::Data(format!("batchnorm1d in train mode needs B·T ≥ 2, got {n}")));
        }
        let eps = T::lit(BnState::<T>::EPS);
        let mom = T::lit(BnState::<T>::MOMENTUM);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let nt = T::lit(n as f64);
        for ci in 0..c {
            let rows = (0..b).map(|bi| (bi * c + ci) * t);
            let (mean, var) = if train {
                let mean = rows.clone().map(|o| xv[o..o + t].iter().copied().sum::<T>()).sum::<T>() / nt;
                let var =
                    rows.clone().map(|o| xv[o..o + t].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()).sum::<T>()
                        / nt;
                state.running_mean[ci] = (T::one() - mom) * state.running_mean[ci] + mom * mean;
                let unbiased = var * nt / T::lit((n - 1) as f64);
                state.running_var[ci] = (T::one() - mom) * state.running_var[ci] + mom * unbiased;
                (mean, var)
            } else {
                (state.running_mean[ci], state.running_var[ci])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            for o in rows {
                for i in o..o + t {
                    let h = (xv[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, train };
        Ok(self.push(Tensor::new(xs, out)?, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        let out: Vec<T> = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu { x }, rg)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1−rate)`. Eval mode
    /// is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.tensor(x).len();
        let scale = if mode == Mode::Train && rate > 0.0 {
            let keep = T::lit(1.0 / (1.0 - rate));
            (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
        } else {
            vec![T::one(); n]
        };
        let t = self.tensor(x);
        let out = t.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, scale }, rg))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(dim_err("softmax_cross_entropy logits vs labels", &ls, &[labels.len()]));
        }
        let (b, k) = (ls[0], ls[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!("label {l} at row {i} outside [0, {k})")));
        }
        if b == 0 {
            return Err(Error::Data("softmax_cross_entropy on an empty batch".into()));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[r]]);
        }
        let loss = total / T::lit(b as f64);
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCe { logits, probs, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Row gather from `table[V×d]`; output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(dim_err("embedding ids vs lead shape", &[ids.len()], lead));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("embedding id {bad} outside table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// `out[i,:] = values[i] × table[0,:]` for a one-row `table[1×d]`.
    pub fn scale_embedding(&mut self, table: Var, values: &[T], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ts[0] != 1 {
            return Err(Error::Dimension(format!("scaled embedding table must be [1×d], got {ts:?}")));
        }
        if lead.iter().product::<usize>() != values.len() {
            return Err(dim_err("scaled embedding values vs lead shape", &[values.len()], lead));
        }
        let d = ts[1];
        let row = self.value(table);
        let mut out = Vec::with_capacity(values.len() * d);
        for &v in values {
            out.extend(row.iter().map(|&e| v * e));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        let op = Op::ScaleEmbedding { table, values: values.to_vec() };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        let lead = &s0[..s0.len().saturating_sub(1)];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(dim_err("concat leading dims", s, &s0));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        let op = Op::Concat { parts: parts.iter().copied().zip(widths).collect() };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// `x[B×N×d] + pe[N×d]`, broadcast over the batch.
    pub fn add_positional(&mut self, x: Var, pe: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x).to_vec(), self.shape(pe).to_vec());
        if xs.len() != 3 || ps.len() != 2 || xs[1..] != ps[..] {
            return Err(dim_err("positional encoding vs input", &xs, &ps));
        }
        let pv = self.value(pe);
        let out = self.value(x).chunks(pv.len()).flat_map(|row| row.iter().zip(pv).map(|(&a, &b)| a + b)).collect();
        let rg = self.rg(&[x, pe]);
        Ok(self.push(Tensor::new(xs, out)?, Op::AddPositional { x, pe }, rg))
    }

    /// `[B×N×d] → [B×d×N]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Dimension(format!("transpose12 expects a 3-D tensor, got {xs:?}")));
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for i in 0..n {
                for j in 0..d {
                    out[(bi * d + j) * n + i] = xv[(bi * n + i) * d + j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, d, n], out)?, Op::Transpose12 { x }, rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.tensor(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `Σ weights[i]·terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[T]) -> Result<Var> {
        if terms.len() != weights.len() {
            return Err(dim_err("weighted_sum terms vs weights", &[terms.len()], &[weights.len()]));
        }
        let mut total = T::zero();
        for (&v, &w) in terms.iter().zip(weights) {
            if self.tensor(v).len() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted_sum term has shape {:?}, expected a scalar",
                    self.shape(v)
                )));
            }
            total = total + w * self.value(v)[0];
        }
        let rg = self.rg(terms);
        let op = Op::WeightedSum { terms: terms.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires a gradient and precedes `loss` holds one (zeros if the loss
    /// does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Dimension(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.values[loss.0].data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        for i in 0..=loss.0 {
            self.grads[i] = self.values[i].requires_grad().then(|| vec![T::zero(); self.values[i].len()]);
        }
        for i in loss.0 + 1..self.grads.len() {
            self.grads[i] = None;
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = T::one();
        }
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(dout) = rest[0].as_deref() else {
                continue;
            };
            backprop(&self.ops[i], &self.values, dout, before, self.exec);
        }
        Ok(())
    }
}

fn slot<T>(grads: &mut [Option<Vec<T>>], v: Var) -> Option<&mut Vec<T>> {
    grads[v.0].as_mut()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<T: Scalar>(op: &Op<T>, values: &[Tensor<T>], dout: &[T], grads: &mut [Option<Vec<T>>], exec: Exec) {
    let val = |v: Var| values[v.0].data();
    let shape = |v: Var| values[v.0].shape();
    match op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (rows, n) = (shape(*x)[0], shape(*x)[1]);
            let m = shape(*w)[1];
            if let Some(dx) = slot(grads, *x) {
                kernels::gemm(rows, m, n, T::one(), dout, (m, 1), val(*w), (1, m), T::one(), dx, (n, 1));
            }
            if let Some(dw) = slot(grads, *w) {
                kernels::gemm(n, rows, m, T::one(), val(*x), (1, n), dout, (m, 1), T::one(), dw, (m, 1));
            }
            if let Some(db) = slot(grads, *b) {
                for row in dout.chunks(m) {
                    add_into(db, row);
                }
            }
        }
        Op::Conv1d { x, w, b, dims } => {
            let g = kernels::conv1d_backward(dims, val(*x), val(*w), dout, exec);
            if let Some(dx) = slot(grads, *x) {
                add_into(dx, &g.dx);
            }
            if let Some(dw) = slot(grads, *w) {
                add_into(dw, &g.dw);
            }
            if let Some(db) = slot(grads, *b) {
                add_into(db, &g.dbias);
            }
        }
        Op::MaxOverTime { x, argmax } => {
            let t = shape(*x)[2];
            if let Some(dx) = slot(grads, *x) {
                for (bc, (&j, &g)) in argmax.iter().zip(dout).enumerate() {
                    dx[bc * t + j] = dx[bc * t + j] + g;
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let xs = shape(*x);
            let (b, c, t) = (xs[0], xs[1], xs[2]);
            let gv = val(*gamma);
            let n = T::lit((b * t) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ci in 0..c {
                for bi in 0..b {
                    let o = (bi * c + ci) * t;
                    for i in o..o + t {
                        dgamma[ci] = dgamma[ci] + dout[i] * xhat[i];
                        dbeta[ci] = dbeta[ci] + dout[i];
                    }
                }
            }
            if let Some(dx) = slot(grads, *x) {
                for ci in 0..c {
                    let scale = gv[ci] * inv_std[ci];
                    // Σ dxhat and Σ dxhat·xhat, with dxhat = dout·gamma.
                    let (s1, s2) = (dbeta[ci], dgamma[ci]);
                    for bi in 0..b {
                        let o = (bi * c + ci) * t;
                        for i in o..o + t {
                            let g = if *train { scale * (dout[i] - (s1 + xhat[i] * s2) / n) } else { scale * dout[i] };
                            dx[i] = dx[i] + g;
                        }
                    }
                }
            }
            if let Some(dg) = slot(grads, *gamma) {
                add_into(dg, &dgamma);
            }
            if let Some(db) = slot(grads, *beta) {
                add_into(db, &dbeta);
            }
        }
        Op::Relu { x } => {
            let xv = val(*x);
            if let Some(dx) = slot(grads, *x) {
                for ((d, &v), &g) in dx.iter_mut().zip(xv).zip(dout) {
                    if v > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        Op::Dropout { x, scale } => {
            if let Some(dx) = slot(grads, *x) {
                for ((d, &s), &g) in dx.iter_mut().zip(scale).zip(dout) {
                    *d = *d + s * g;
                }
            }
        }
        Op::SoftmaxCe { logits, probs, labels } => {
            let k = shape(*logits)[1];
            let scale = dout[0] / T::lit(labels.len() as f64);
            if let Some(dl) = slot(grads, *logits) {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        dl[r * k + j] = dl[r * k + j] + scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = shape(*table)[1];
            if let Some(dt) = slot(grads, *table) {
                for (&i, g) in ids.iter().zip(dout.chunks(d)) {
                    add_into(&mut dt[i * d..(i + 1) * d], g);
                }
            }
        }
        Op::ScaleEmbedding { table, values } => {
            let d = shape(*table)[1];
            if let Some(dt) = slot(grads, *table) {
                for (&v, g) in values.iter().zip(dout.chunks(d)) {
                    for (a, &gi) in dt.iter_mut().zip(g) {
                        *a = *a + v * gi;
                    }
                }
            }
        }
        Op::Concat { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(dp) = slot(grads, p) {
                    for (r, g) in dout.chunks(total).enumerate() {
                        add_into(&mut dp[r * w..(r + 1) * w], &g[offset..offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::AddPositional { x, pe } => {
            if let Some(dx) = slot(grads, *x) {
                add_into(dx, dout);
            }
            if let Some(dp) = slot(grads, *pe) {
                let len = dp.len();
                for g in dout.chunks(len) {
                    add_into(dp, g);
                }
            }
        }
        Op::Transpose12 { x } => {
            let xs = shape(*x);
            let (b, n, d) = (xs[0], xs[1], xs[2]);
            if let Some(dx) = slot(grads, *x) {
                for bi in 0..b {
                    for i in 0..n {
                        for j in 0..d {
                            let o = (bi * n + i) * d + j;
                            dx[o] = dx[o] + dout[(bi * d + j) * n + i];
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(grads, *x) {
                add_into(dx, dout);
            }
        }
        Op::WeightedSum { terms, weights } => {
            for (&v, &w) in terms.iter().zip(weights) {
                if let Some(dv) = slot(grads, v) {
                    dv[0] = dv[0] + w * dout[0];
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(grads, *x) {
                for d in dx.iter_mut() {
                    *d = *d + dout[0];
                }
            }
        }
    }
}
