//! Small dense numeric kernel: matrices, softmax and losses, Adam, a
//! single-head self-attention block, and finite-difference gradient checks.
//!
//! Everything is `f64`. Models keep their weights in a [`ParameterSet`]
//! whose gradient buffers are filled by hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("probability {prob} at index {index} has positive target mass")]
    Domain { index: usize, prob: f64 },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if rows * cols != data.len() {
            return Err(NumError::Shape(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Dense2D { rows, cols, data })
    }

    /// Uniform in `[-scale, scale]`.
    pub fn random<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Dense2D { rows, cols, data }
    }

    /// Glorot-uniform initialization.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        Self::random(rows, cols, scale, rng)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Dense2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense2D {
        Dense2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Dense2D) -> Dense2D {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Dense2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Dense2D) -> Dense2D {
        assert_eq!(self.rows, other.rows, "t_matmul shared dimension");
        let mut out = Dense2D::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Dense2D) -> Dense2D {
        assert_eq!(self.cols, other.cols, "matmul_t shared dimension");
        let mut out = Dense2D::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Smoothed target `(1-ε)·onehot(target) + ε/K`.
pub fn smoothed_target(k: usize, target: usize, eps: f64) -> Vec<f64> {
    let mut q = vec![eps / k as f64; k];
    q[target] += 1.0 - eps;
    q
}

/// `-Σ q_i log p_i` for the smoothed target over `probs.len()` classes.
pub fn label_smoothed_ce(probs: &[f64], target: usize, eps: f64) -> Result<f64, NumError> {
    let k = probs.len();
    if target >= k {
        return Err(NumError::Shape(format!("target {target} outside {k} classes")));
    }
    let q = smoothed_target(k, target, eps);
    let mut loss = 0.0;
    for (i, (&p, &qi)) in probs.iter().zip(&q).enumerate() {
        if qi > 0.0 {
            if p <= 0.0 {
                return Err(NumError::Domain { index: i, prob: p });
            }
            loss -= qi * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Label-smoothed CE of `softmax(logits)`, with its gradient `p - q` with
/// respect to the logits. Uses log-softmax so no clamping is needed.
pub fn label_smoothed_ce_with_logits(logits: &[f64], target: usize, eps: f64) -> (f64, Vec<f64>) {
    let k = logits.len();
    assert!(target < k, "target outside logits");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let q = smoothed_target(k, target, eps);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(k);
    for (l, qi) in logits.iter().zip(&q) {
        let log_p = l - log_z;
        loss -= qi * log_p;
        grad.push(log_p.exp() - qi);
    }
    (loss, grad)
}

pub fn binary_cross_entropy(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// BCE of `sigmoid(logit)` and its derivative with respect to the logit.
pub fn bce_with_logit(logit: f64, label: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let y = if label { 1.0 } else { 0.0 };
    (binary_cross_entropy(p, label), p - y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Dense2D,
    #[serde(skip)]
    pub grad: Option<Dense2D>,
}

impl Param {
    pub fn grad(&self) -> &Dense2D {
        self.grad.as_ref().expect("gradient buffer allocated")
    }
}

/// Named parameters, each with a same-shape gradient buffer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl From<Vec<Param>> for ParameterSet {
    fn from(params: Vec<Param>) -> Self {
        let mut set = ParameterSet::default();
        for p in params {
            set.push(p.name, p.value);
        }
        set
    }
}

impl From<ParameterSet> for Vec<Param> {
    fn from(s: ParameterSet) -> Self {
        s.params
    }
}

impl ParameterSet {
    /// Adds a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Dense2D) -> usize {
        let grad = Dense2D::zeros(value.rows, value.cols);
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Some(grad),
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, i: usize) -> &Dense2D {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Dense2D {
        &mut self.params[i].value
    }

    pub fn grad(&self, i: usize) -> &Dense2D {
        self.params[i].grad()
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut Dense2D {
        self.params[i].grad.as_mut().expect("gradient buffer allocated")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut().expect("gradient buffer allocated").fill(0.0);
        }
    }

    pub fn scale_grad(&mut self, s: f64) {
        for p in &mut self.params {
            for g in &mut p.grad.as_mut().expect("gradient buffer allocated").data {
                *g *= s;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Dense2D>,
    pub v: Vec<Dense2D>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Dense2D::zeros(p.value.rows, p.value.cols)).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, lr: f64) -> Result<(), NumError> {
    if let Some(bad) = params.iter().find(|p| !p.grad().is_finite()) {
        return Err(NumError::NonFiniteGradient(bad.name.clone()));
    }
    if state.m.len() != params.len() {
        return Err(NumError::Shape("Adam state does not match parameter set".into()));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in params.params.iter_mut().enumerate() {
        let grad = p.grad.as_ref().expect("gradient buffer allocated");
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for (j, (w, &g)) in p.value.data.iter_mut().zip(&grad.data).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Intermediate values of [`attention_forward`] needed for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Dense2D,
    q: Dense2D,
    k: Dense2D,
    v: Dense2D,
    attn: Dense2D,
}

/// Single-head residual self-attention, `Y = X + softmax(QKᵀ/√d)·V`.
pub fn attention_forward(
    x: &Dense2D,
    w_q: &Dense2D,
    w_k: &Dense2D,
    w_v: &Dense2D,
) -> Result<(Dense2D, AttentionCache), NumError> {
    let d = x.cols;
    for (name, w) in [("W_q", w_q), ("W_k", w_k), ("W_v", w_v)] {
        if w.shape() != (d, d) {
            return Err(NumError::Shape(format!("{name} is {:?}, expected ({d}, {d})", w.shape())));
        }
    }
    let q = x.matmul(w_q);
    let k = x.matmul(w_k);
    let v = x.matmul(w_v);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attn = q.matmul_t(&k);
    for r in 0..attn.rows {
        let row = attn.row_mut(r);
        row.iter_mut().for_each(|s| *s *= scale);
        let p = softmax(row);
        row.copy_from_slice(&p);
    }
    let mut y = attn.matmul(&v);
    y.add_assign(x);
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
        },
    ))
}

pub struct AttentionGrads {
    pub d_x: Dense2D,
    pub d_wq: Dense2D,
    pub d_wk: Dense2D,
    pub d_wv: Dense2D,
}

pub fn attention_backward(
    cache: &AttentionCache,
    d_y: &Dense2D,
    w_q: &Dense2D,
    w_k: &Dense2D,
    w_v: &Dense2D,
) -> AttentionGrads {
    let d = cache.x.cols;
    let scale = 1.0 / (d as f64).sqrt();
    let d_v = cache.attn.t_matmul(d_y);
    let d_attn = d_y.matmul_t(&cache.v);
    // softmax Jacobian, row by row
    let mut d_s = Dense2D::zeros(cache.attn.rows, cache.attn.cols);
    for r in 0..d_s.rows {
        let a = cache.attn.row(r);
        let g = d_attn.row(r);
        let inner = dot(a, g);
        for (c, out) in d_s.row_mut(r).iter_mut().enumerate() {
            *out = a[c] * (g[c] - inner) * scale;
        }
    }
    let d_q = d_s.matmul(&cache.k);
    let d_k = d_s.t_matmul(&cache.q);
    let d_wq = cache.x.t_matmul(&d_q);
    let d_wk = cache.x.t_matmul(&d_k);
    let d_wv = cache.x.t_matmul(&d_v);
    let mut d_x = d_y.clone();
    d_x.add_assign(&d_q.matmul_t(w_q));
    d_x.add_assign(&d_k.matmul_t(w_k));
    d_x.add_assign(&d_v.matmul_t(w_v));
    AttentionGrads { d_x, d_wq, d_wk, d_wv }
}

/// Values below this magnitude are compared absolutely rather than
/// relatively in [`finite_diff_grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradients already stored in `params` with central
/// differences of `loss` and returns the worst relative error
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn finite_diff_grad_check<F>(params: &mut ParameterSet, mut loss: F, step: f64) -> f64
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        for j in 0..params.value(i).data.len() {
            let analytic = params.grad(i).data[j];
            let orig = params.value(i).data[j];
            params.value_mut(i).data[j] = orig + step;
            let plus = loss(params);
            params.value_mut(i).data[j] = orig - step;
            let minus = loss(params);
            params.value_mut(i).data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Token embedding, segment embedding, one attention block, then `tanh`
/// at every position. Parameters live in the caller's [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionEncoder {
    pub dim: usize,
    pub embed: usize,
    pub segment: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
}

pub struct EncoderCache {
    ids: Vec<u32>,
    segments: Vec<u8>,
    attention: AttentionCache,
    hidden: Dense2D,
}

impl EncoderCache {
    pub fn hidden(&self) -> &Dense2D {
        &self.hidden
    }
}

impl AttentionEncoder {
    pub fn init<R: Rng>(params: &mut ParameterSet, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let embed = params.push("encoder.embed", Dense2D::random(vocab_size, dim, 0.5, rng));
        let segment = params.push("encoder.segment", Dense2D::random(2, dim, 0.5, rng));
        let w_q = params.push("encoder.w_q", Dense2D::glorot(dim, dim, rng));
        let w_k = params.push("encoder.w_k", Dense2D::glorot(dim, dim, rng));
        let w_v = params.push("encoder.w_v", Dense2D::glorot(dim, dim, rng));
        AttentionEncoder {
            dim,
            embed,
            segment,
            w_q,
            w_k,
            w_v,
        }
    }

    pub fn vocab_size(&self, params: &ParameterSet) -> usize {
        params.value(self.embed).rows
    }

    /// Returns `seq × dim` hidden states.
    pub fn forward(&self, params: &ParameterSet, ids: &[u32], segments: &[u8]) -> Result<EncoderCache, NumError> {
        if ids.len() != segments.len() {
            return Err(NumError::Shape("ids and segments differ in length".into()));
        }
        let embed = params.value(self.embed);
        let seg = params.value(self.segment);
        if embed.cols != self.dim {
            return Err(NumError::Shape("embedding width differs from encoder dim".into()));
        }
        let mut x = Dense2D::zeros(ids.len(), self.dim);
        for (r, (&id, &s)) in ids.iter().zip(segments).enumerate() {
            if id as usize >= embed.rows || s as usize >= seg.rows {
                return Err(NumError::Shape(format!("token id {id} or segment {s} out of range")));
            }
            let row = x.row_mut(r);
            for ((o, e), g) in row.iter_mut().zip(embed.row(id as usize)).zip(seg.row(s as usize)) {
                *o = e + g;
            }
        }
        let (y, attention) = attention_forward(
            &x,
            params.value(self.w_q),
            params.value(self.w_k),
            params.value(self.w_v),
        )?;
        let hidden = y.map(f64::tanh);
        Ok(EncoderCache {
            ids: ids.to_vec(),
            segments: segments.to_vec(),
            attention,
            hidden,
        })
    }

    /// Accumulates parameter gradients for upstream gradient `d_hidden`.
    pub fn backward(&self, params: &mut ParameterSet, cache: &EncoderCache, d_hidden: &Dense2D) {
        let mut d_y = d_hidden.clone();
        for (g, h) in d_y.data.iter_mut().zip(&cache.hidden.data) {
            *g *= 1.0 - h * h;
        }
        let grads = attention_backward(
            &cache.attention,
            &d_y,
            params.value(self.w_q),
            params.value(self.w_k),
            params.value(self.w_v),
        );
        params.grad_mut(self.w_q).add_assign(&grads.d_wq);
        params.grad_mut(self.w_k).add_assign(&grads.d_wk);
        params.grad_mut(self.w_v).add_assign(&grads.d_wv);
        for (r, (&id, &s)) in cache.ids.iter().zip(&cache.segments).enumerate() {
            let dx = grads.d_x.row(r);
            for (g, d) in params.grad_mut(self.embed).row_mut(id as usize).iter_mut().zip(dx) {
                *g += d;
            }
            for (g, d) in params.grad_mut(self.segment).row_mut(s as usize).iter_mut().zip(dx) {
                *g += d;
            }
        }
    }
}
