//! Differentiable building blocks: parameters, embedding, affine maps, batch
//! normalization and the two loss families.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::init;
use crate::tensor::{log_sum_exp, sigmoid, Tensor};

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Enumerates named parameters and non-trainable state in a stable order.
pub trait Parameters {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Non-trainable tensors (batch-norm population statistics).
    fn visit_state(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads<P: Parameters + ?Sized>(model: &mut P) {
    model.visit_params("", &mut |_, p| p.zero_grad());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Word vectors for a vocabulary plus the two reserved tokens: BOS at index
/// `vocab`, EOS at `vocab + 1`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Param,
    vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab: usize, width: usize) -> Self {
        let std = 1.0 / libm::sqrt(width as f64);
        Self { table: Param::new(init::gaussian(rng, &[vocab + 2, width], std)), vocab }
    }

    pub fn from_table(table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 || table.shape()[0] < 3 {
            return Err(dim_err("embedding", format!("table shape {:?}", table.shape())));
        }
        let vocab = table.shape()[0] - 2;
        Ok(Self { table: Param::new(table), vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn extended_size(&self) -> usize {
        self.vocab + 2
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn eos(&self) -> usize {
        self.vocab + 1
    }

    pub fn width(&self) -> usize {
        self.table.value.cols()
    }

    /// Gathers one row per id into a `[ids.len() × width]` matrix.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let w = self.width();
        let size = self.extended_size();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= size {
                return Err(Error::Vocabulary { id, size });
            }
            data.extend_from_slice(self.table.value.row(id));
        }
        Tensor::new(&[ids.len(), w], data)
    }

    /// Scatters `dout` rows back into the rows that were looked up.
    pub fn backward(&mut self, ids: &[usize], dout: &Tensor) {
        for (r, &id) in ids.iter().enumerate() {
            let g = self.table.grad.row_mut(id);
            for (a, &b) in g.iter_mut().zip(dout.row(r)) {
                *a += b;
            }
        }
    }
}

impl Parameters for Embedding {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let std = 1.0 / libm::sqrt(inputs as f64);
        Self::from_parts(init::gaussian(rng, &[inputs, outputs], std), Tensor::zeros(&[outputs]))
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self::from_parts(Tensor::zeros(&[inputs, outputs]), Tensor::zeros(&[outputs]))
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Self {
        Self { weight: Param::new(weight), bias: Param::new(bias) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.value)?.add_row_vector(&self.bias.value)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        self.weight.grad.add_assign(&x.matmul_tn(dy)?)?;
        self.bias.grad.add_assign(&dy.sum_rows())?;
        dy.matmul_nt(&self.weight.value)
    }
}

impl Parameters for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Maps hidden states to vocabulary logits with the shared projection.
pub fn word_projection(h: &Tensor, projection: &Linear) -> Result<Tensor> {
    if h.cols() != projection.inputs() {
        return Err(dim_err(
            "word_projection",
            format!("hidden width {} vs projection input {}", h.cols(), projection.inputs()),
        ));
    }
    projection.forward(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Batch normalization with learnable scale, optional learnable shift and one
/// set of population statistics per slot (slots index timesteps inside the
/// batch-normalized LSTM; ordinary layers use a single slot).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    learn_beta: bool,
    pub stats: Vec<RunningStats>,
    pub decay: f64,
    pub eps: f64,
}

/// Forward intermediates plus the pending population-statistics update.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
    slot: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_DECAY: f64 = 0.999;
pub const BN_GAMMA_INIT: f64 = 0.1;

impl BatchNorm {
    pub fn new(width: usize, slots: usize, gamma_init: f64, learn_beta: bool, decay: f64, eps: f64) -> Self {
        let stats = (0..slots.max(1))
            .map(|_| RunningStats { mean: Tensor::zeros(&[width]), var: Tensor::filled(&[width], 1.0) })
            .collect();
        Self {
            gamma: Param::new(Tensor::filled(&[width], gamma_init)),
            beta: Param::new(Tensor::zeros(&[width])),
            learn_beta,
            stats,
            decay,
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn slots(&self) -> usize {
        self.stats.len()
    }

    pub fn learns_beta(&self) -> bool {
        self.learn_beta
    }

    fn slot_index(&self, slot: usize) -> usize {
        slot.min(self.stats.len() - 1)
    }

    /// Normalizes `x: [B × width]`. Does not touch population statistics;
    /// train-mode updates are applied by [`BatchNorm::commit`].
    pub fn forward(&self, x: &Tensor, slot: usize, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let d = self.width();
        if x.shape().len() != 2 || x.cols() != d {
            return Err(dim_err("batch_norm", format!("input {:?}, width {d}", x.shape())));
        }
        let b = x.rows();
        let slot = self.slot_index(slot);
        let (mean, var) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::BatchSize(b));
                }
                let mut mean = vec![0.0; d];
                for row in x.data().chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; d];
                for row in x.data().chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean, var)
            }
            Mode::Infer => {
                let st = &self.stats[slot];
                (st.mean.data().to_vec(), st.var.data().to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + self.eps)).collect();
        let mut xhat = x.clone();
        for row in xhat.data_mut().chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let mut y = xhat.clone();
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        for row in y.data_mut().chunks_mut(d) {
            for ((v, &g), &bt) in row.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + bt;
            }
        }
        let (batch_mean, batch_var) = if mode == Mode::Train { (mean, var) } else { (Vec::new(), Vec::new()) };
        Ok((y, BatchNormCache { xhat, inv_std, mode, slot, batch_mean, batch_var }))
    }

    /// Folds a train-mode batch into the population statistics by exponential decay.
    pub fn commit(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let decay = self.decay;
        let st = &mut self.stats[cache.slot];
        for (p, &m) in st.mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *p = decay * *p + (1.0 - decay) * m;
        }
        for (p, &v) in st.var.data_mut().iter_mut().zip(&cache.batch_var) {
            *p = decay * *p + (1.0 - decay) * v;
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let d = self.width();
        let b = dy.rows();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for (dy_row, xh_row) in dy.data().chunks(d).zip(cache.xhat.data().chunks(d)) {
            for j in 0..d {
                dgamma[j] += dy_row[j] * xh_row[j];
                dbeta[j] += dy_row[j];
            }
        }
        for (g, v) in self.gamma.grad.data_mut().iter_mut().zip(&dgamma) {
            *g += v;
        }
        if self.learn_beta {
            for (g, v) in self.beta.grad.data_mut().iter_mut().zip(&dbeta) {
                *g += v;
            }
        }
        let gamma = self.gamma.value.data();
        let mut dx = dy.clone();
        match cache.mode {
            Mode::Infer => {
                for row in dx.data_mut().chunks_mut(d) {
                    for j in 0..d {
                        row[j] *= gamma[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dx = inv/B · (B·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = dy·γ
                let n = b as f64;
                for (dx_row, xh_row) in dx.data_mut().chunks_mut(d).zip(cache.xhat.data().chunks(d)) {
                    for j in 0..d {
                        let dxhat = dx_row[j] * gamma[j];
                        let sum_dxhat = dbeta[j] * gamma[j];
                        let sum_dxhat_xhat = dgamma[j] * gamma[j];
                        dx_row[j] = cache.inv_std[j] / n * (n * dxhat - sum_dxhat - xh_row[j] * sum_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }
}

impl Parameters for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        if self.learn_beta {
            f(&join(prefix, "beta"), &mut self.beta);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (t, st) in self.stats.iter_mut().enumerate() {
            f(&join(prefix, &format!("pop_mean.{t}")), &mut st.mean);
            f(&join(prefix, &format!("pop_var.{t}")), &mut st.var);
        }
    }
}

/// Single-slot batch normalization that applies its own statistics update.
pub fn batch_norm(x: &Tensor, state: &mut BatchNorm, mode: Mode) -> Result<Tensor> {
    let (y, cache) = state.forward(x, 0, mode)?;
    state.commit(&cache);
    Ok(y)
}

/// A scalar loss with its gradient w.r.t. the input scores.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

/// Mean over the batch of `−log softmax(logits)[target]`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Loss> {
    if targets.len() != logits.rows() {
        return Err(dim_err("softmax_cross_entropy", format!("{} targets for {} rows", targets.len(), logits.rows())));
    }
    let rows: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
    softmax_cross_entropy_rows(logits, &rows, logits.rows() as f64)
}

/// Softmax cross entropy summed over rows with a target and divided by `denom`.
pub fn softmax_cross_entropy_rows(logits: &Tensor, targets: &[Option<usize>], denom: f64) -> Result<Loss> {
    let v = logits.cols();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= v {
            return Err(Error::Vocabulary { id: t, size: v });
        }
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        total += lse - row[t];
        let g = grad.row_mut(r);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = libm::exp(z - lse) / denom;
        }
        g[t] -= 1.0 / denom;
    }
    Ok(Loss { value: total / denom, grad })
}

fn bce_logit(z: f64, y: f64) -> f64 {
    let pos = if z > 0.0 { z } else { 0.0 };
    pos - z * y + libm::log1p(libm::exp(-z.abs()))
}

/// Mean over all `B×V` entries of the logit-form binary cross entropy.
pub fn binary_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Loss> {
    if logits.shape() != targets.shape() {
        return Err(dim_err("binary_cross_entropy", format!("{:?} vs {:?}", logits.shape(), targets.shape())));
    }
    if let Some(&bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Target(bad));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits.zip_map(targets, "binary_cross_entropy", |z, y| (sigmoid(z) - y) / n)?;
    for (&z, &y) in logits.data().iter().zip(targets.data()) {
        total += bce_logit(z, y);
    }
    Ok(Loss { value: total / n, grad })
}

/// Per-word binary cross entropy against one-hot targets: each row with a
/// target contributes its sum over the vocabulary, the total is divided by
/// `denom`.
pub fn binary_cross_entropy_onehot_rows(logits: &Tensor, targets: &[Option<usize>], denom: f64) -> Result<Loss> {
    let v = logits.cols();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= v {
            return Err(Error::Vocabulary { id: t, size: v });
        }
        let row = logits.row(r);
        let g = grad.row_mut(r);
        for (j, (&z, gi)) in row.iter().zip(g.iter_mut()).enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            total += bce_logit(z, y);
            *gi = (sigmoid(z) - y) / denom;
        }
    }
    Ok(Loss { value: total / denom, grad })
}

/// Offset inside the logarithms of [`binary_cross_entropy_prob`].
pub const PROB_BCE_EPS: f64 = 1e-6;

/// Mean binary cross entropy on probabilities (for heads that output mixtures
/// rather than logits).
pub fn binary_cross_entropy_prob(probs: &Tensor, targets: &Tensor) -> Result<Loss> {
    if probs.shape() != targets.shape() {
        return Err(dim_err("binary_cross_entropy_prob", format!("{:?} vs {:?}", probs.shape(), targets.shape())));
    }
    if let Some(&bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Target(bad));
    }
    let n = probs.len() as f64;
    let e = PROB_BCE_EPS;
    let mut total = 0.0;
    for (&p, &y) in probs.data().iter().zip(targets.data()) {
        total -= y * libm::log(p + e) + (1.0 - y) * libm::log(1.0 - p + e);
    }
    let grad = probs.zip_map(targets, "binary_cross_entropy_prob", |p, y| {
        (-y / (p + e) + (1.0 - y) / (1.0 - p + e)) / n
    })?;
    Ok(Loss { value: total / n, grad })
}
