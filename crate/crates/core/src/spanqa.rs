//! Stage 3: extractive span QA. The drug mention is the question, the
//! sentence is the context, and the model scores every context token as the
//! start or end of the adverse event.
//!
//! Input layout is `[BOS] question… [SEP] context…` with segment 0 for the
//! first three parts and segment 1 for the context. Only context positions
//! can carry probability mass.
//!
//! The output head is a 1×1 convolution over the encoder states, i.e. one
//! `dim × 2` linear map shared by every position.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalx::{self, EvalError};
use crate::neuralcore::{
    adam_step, label_smoothed_ce, label_smoothed_ce_with_logits, softmax, AdamConfig, AdamState, AttentionEncoder,
    Dense2D, NumError, ParameterSet,
};
use crate::relevance::run_folds;
use crate::span::Span;
use crate::textproc::{char_span_to_token_span, tokenize, Vocabulary, BOS_ID, SEP_ID};

#[derive(Debug, Error, PartialEq)]
pub enum QaError {
    #[error("gold answer span {0} maps to no context token")]
    GoldSpanUnmappable(Span),
    #[error("gold position {0} is masked")]
    GoldMasked(usize),
    #[error("training example has no gold span")]
    GoldMissing,
    #[error("training fold is empty")]
    EmptyFold,
    #[error("distributions differ in length or mask")]
    MaskMismatch,
    #[error("no valid answer span")]
    NoValidSpan,
    #[error("index {index} outside the offset map of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Folds(#[from] EvalError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// Sentence char span for each context position, `None` elsewhere.
    pub offsets: Vec<Option<Span>>,
    pub context_start: usize,
    /// Gold `(start, end)` in sequence coordinates, inclusive.
    pub gold: Option<(usize, usize)>,
}

impl QaSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.offsets.iter().map(Option::is_some).collect()
    }
}

/// Lays out `[BOS] question [SEP] context`; `gold_ae` is the AE char span
/// within `sentence` when training.
pub fn build_qa_sequence(
    question: &str,
    sentence: &str,
    vocab: &Vocabulary,
    gold_ae: Option<Span>,
) -> Result<QaSequence, QaError> {
    let q = tokenize(question);
    let ctx = tokenize(sentence);
    let mut ids = Vec::with_capacity(q.len() + ctx.len() + 2);
    ids.push(BOS_ID);
    ids.extend(vocab.encode(&q));
    ids.push(SEP_ID);
    let context_start = ids.len();
    ids.extend(vocab.encode(&ctx));
    let mut segments = vec![0u8; context_start];
    segments.resize(ids.len(), 1);
    let mut offsets = vec![None; context_start];
    offsets.extend(ctx.tokens.iter().map(|t| Some(t.span())));
    let gold = match gold_ae {
        Some(span) => {
            let (b, e) = char_span_to_token_span(&ctx, span).map_err(|_| QaError::GoldSpanUnmappable(span))?;
            Some((context_start + b, context_start + e))
        }
        None => None,
    };
    Ok(QaSequence {
        ids,
        segments,
        offsets,
        context_start,
        gold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanDistribution {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SpanDistribution {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Softmax over the unmasked entries; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let live: Vec<f64> = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| l).collect();
    let mut probs = softmax(&live).into_iter();
    mask.iter().map(|&m| if m { probs.next().unwrap() } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            dim: 32,
            epochs: 40,
            lr: 1e-2,
            batch_size: 8,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaModel {
    pub dim: usize,
    encoder: AttentionEncoder,
    head_w: usize,
    head_b: usize,
    params: ParameterSet,
}

struct QaForward {
    cache: crate::neuralcore::EncoderCache,
    start_logits: Vec<f64>,
    end_logits: Vec<f64>,
}

impl QaModel {
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::default();
        let encoder = AttentionEncoder::init(&mut params, vocab_size, dim, &mut rng);
        let head_w = params.push("head.w", Dense2D::glorot(dim, 2, &mut rng));
        let head_b = params.push("head.b", Dense2D::zeros(1, 2));
        QaModel {
            dim,
            encoder,
            head_w,
            head_b,
            params,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size(&self.params)
    }

    /// Overwrites the output head, e.g. to zero it.
    pub fn set_head(&mut self, w: Dense2D, b: Dense2D) -> Result<(), NumError> {
        if w.shape() != (self.dim, 2) || b.shape() != (1, 2) {
            return Err(NumError::Shape("head must be dim × 2 with a 1 × 2 bias".into()));
        }
        *self.params.value_mut(self.head_w) = w;
        *self.params.value_mut(self.head_b) = b;
        Ok(())
    }

    pub fn check_shapes(&self, vocab_size: usize) -> Result<(), NumError> {
        let d = self.dim;
        let e = &self.encoder;
        let expected = [
            (e.embed, (vocab_size, d)),
            (e.segment, (2, d)),
            (e.w_q, (d, d)),
            (e.w_k, (d, d)),
            (e.w_v, (d, d)),
            (self.head_w, (d, 2)),
            (self.head_b, (1, 2)),
        ];
        if e.dim != d || self.params.len() != expected.len() {
            return Err(NumError::Shape("QA model layout differs from its dimensions".into()));
        }
        for (i, shape) in expected {
            if i >= self.params.len() || self.params.value(i).shape() != shape {
                return Err(NumError::Shape(format!("QA parameter {i} expected {shape:?}")));
            }
        }
        if !self.params.all_finite() {
            return Err(NumError::Shape("QA parameters are not finite".into()));
        }
        Ok(())
    }

    fn forward_with(&self, params: &ParameterSet, seq: &QaSequence) -> Result<QaForward, QaError> {
        let cache = self.encoder.forward(params, &seq.ids, &seq.segments)?;
        let logits = cache.hidden().matmul(params.value(self.head_w));
        let b = &params.value(self.head_b).data;
        let start_logits = (0..logits.rows).map(|r| logits.get(r, 0) + b[0]).collect();
        let end_logits = (0..logits.rows).map(|r| logits.get(r, 1) + b[1]).collect();
        Ok(QaForward {
            cache,
            start_logits,
            end_logits,
        })
    }

    /// Smoothed-CE training loss of `seq` under `params`.
    pub fn loss_with(&self, params: &ParameterSet, seq: &QaSequence, eps: f64) -> Result<f64, QaError> {
        let f = self.forward_with(params, seq)?;
        let (loss, _, _) = head_loss(&f.start_logits, &f.end_logits, seq, eps)?;
        Ok(loss)
    }

    /// Adds `scale ×` this example's gradient to the buffers; returns the loss.
    pub fn accumulate_grad(&mut self, seq: &QaSequence, eps: f64, scale: f64) -> Result<f64, QaError> {
        let f = self.forward_with(&self.params, seq)?;
        let (loss, d_start, d_end) = head_loss(&f.start_logits, &f.end_logits, seq, eps)?;
        let n = seq.len();
        let mut d_logits = Dense2D::zeros(n, 2);
        for r in 0..n {
            d_logits.set(r, 0, d_start[r] * scale);
            d_logits.set(r, 1, d_end[r] * scale);
        }
        let hidden = f.cache.hidden();
        self.params.grad_mut(self.head_w).add_assign(&hidden.t_matmul(&d_logits));
        {
            let gb = self.params.grad_mut(self.head_b);
            for r in 0..n {
                gb.data[0] += d_logits.get(r, 0);
                gb.data[1] += d_logits.get(r, 1);
            }
        }
        let d_hidden = d_logits.matmul_t(self.params.value(self.head_w));
        self.encoder.backward(&mut self.params, &f.cache, &d_hidden);
        Ok(loss)
    }
}

/// Mean of the start and end smoothed CE over unmasked positions, with
/// logit gradients scattered back to full sequence length.
fn head_loss(
    start_logits: &[f64],
    end_logits: &[f64],
    seq: &QaSequence,
    eps: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), QaError> {
    let (gs, ge) = seq.gold.ok_or(QaError::GoldMissing)?;
    let mask = seq.mask();
    let live: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (logits, gold) in [(start_logits, gs), (end_logits, ge)] {
        let target = live.iter().position(|&i| i == gold).ok_or(QaError::GoldMasked(gold))?;
        let live_logits: Vec<f64> = live.iter().map(|&i| logits[i]).collect();
        let (loss, g) = label_smoothed_ce_with_logits(&live_logits, target, eps);
        total += 0.5 * loss;
        let mut full = vec![0.0; logits.len()];
        for (&i, gi) in live.iter().zip(g) {
            full[i] = 0.5 * gi;
        }
        grads.push(full);
    }
    let d_end = grads.pop().unwrap();
    let d_start = grads.pop().unwrap();
    Ok((total, d_start, d_end))
}

/// Per-position start/end logits, then masked softmax for each.
pub fn qa_forward(model: &QaModel, seq: &QaSequence) -> Result<SpanDistribution, QaError> {
    let f = model.forward_with(&model.params, seq)?;
    let mask = seq.mask();
    Ok(SpanDistribution {
        start: masked_softmax(&f.start_logits, &mask),
        end: masked_softmax(&f.end_logits, &mask),
        mask,
    })
}

/// Mean of smoothed CE on start and end, `K` = number of unmasked positions.
pub fn qa_loss(dist: &SpanDistribution, gold: (usize, usize), eps: f64) -> Result<f64, QaError> {
    let live: Vec<usize> = (0..dist.mask.len()).filter(|&i| dist.mask[i]).collect();
    let mut total = 0.0;
    for (probs, g) in [(&dist.start, gold.0), (&dist.end, gold.1)] {
        let target = live.iter().position(|&i| i == g).ok_or(QaError::GoldMasked(g))?;
        let p: Vec<f64> = live.iter().map(|&i| probs[i]).collect();
        total += 0.5 * label_smoothed_ce(&p, target, eps)?;
    }
    Ok(total)
}

pub fn ensemble_distributions(dists: &[SpanDistribution]) -> Result<SpanDistribution, QaError> {
    let first = dists.first().ok_or(QaError::MaskMismatch)?;
    if dists.iter().any(|d| d.mask != first.mask || d.start.len() != first.len() || d.end.len() != first.len()) {
        return Err(QaError::MaskMismatch);
    }
    let n = dists.len() as f64;
    let mean = |pick: fn(&SpanDistribution) -> &Vec<f64>| -> Vec<f64> {
        (0..first.len())
            .map(|i| dists.iter().map(|d| pick(d)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(SpanDistribution {
        start: mean(|d| &d.start),
        end: mean(|d| &d.end),
        mask: first.mask.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    /// Sequence positions, inclusive.
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// Maximizes `P_start(s) · P_end(e)` over unmasked `s ≤ e < s + max_answer_len`;
/// ties go to the smaller `s`, then the smaller `e`.
pub fn decode_span(dist: &SpanDistribution, max_answer_len: usize) -> Result<SpanPrediction, QaError> {
    let n = dist.len();
    let mut best: Option<SpanPrediction> = None;
    for s in (0..n).filter(|&s| dist.mask[s]) {
        let last = (s + max_answer_len).min(n);
        for e in (s..last).filter(|&e| dist.mask[e]) {
            let score = dist.start[s] * dist.end[e];
            if best.is_none_or(|b| score > b.score) {
                best = Some(SpanPrediction { start: s, end: e, score });
            }
        }
    }
    best.ok_or(QaError::NoValidSpan)
}

/// Sentence char span covered by a prediction.
pub fn answer_char_span(pred: &SpanPrediction, offsets: &[Option<Span>]) -> Result<Span, QaError> {
    let at = |i: usize| {
        offsets
            .get(i)
            .copied()
            .flatten()
            .ok_or(QaError::IndexOutOfRange { index: i, len: offsets.len() })
    };
    Ok(Span::new(at(pred.start)?.begin, at(pred.end)?.end))
}

pub fn extract_answer_text(sentence: &str, pred: &SpanPrediction, offsets: &[Option<Span>]) -> Result<String, QaError> {
    let span = answer_char_span(pred, offsets)?;
    span.slice(sentence)
        .map(str::to_string)
        .ok_or(QaError::IndexOutOfRange { index: span.end, len: sentence.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedQa {
    pub model: QaModel,
    pub loss_trace: Vec<f64>,
}

pub fn train_qa_fold(examples: &[QaSequence], vocab_size: usize, config: &QaConfig, seed: u64) -> Result<TrainedQa, QaError> {
    if examples.is_empty() {
        return Err(QaError::EmptyFold);
    }
    if examples.iter().any(|e| e.gold.is_none()) {
        return Err(QaError::GoldMissing);
    }
    let mut model = QaModel::init(vocab_size, config.dim, seed);
    let mut adam = AdamState::new(&model.params, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = config.batch_size.max(1);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            model.params.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                epoch_loss += model.accumulate_grad(&examples[i], config.label_smoothing, scale)?;
            }
            adam_step(&mut model.params, &mut adam, config.lr)?;
        }
        loss_trace.push(epoch_loss / examples.len() as f64);
    }
    model.params.zero_grad();
    Ok(TrainedQa { model, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEnsemble {
    pub models: Vec<QaModel>,
}

impl QaEnsemble {
    pub fn distribution(&self, seq: &QaSequence) -> Result<SpanDistribution, QaError> {
        let dists = self
            .models
            .iter()
            .map(|m| qa_forward(m, seq))
            .collect::<Result<Vec<_>, _>>()?;
        ensemble_distributions(&dists)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaFoldReport {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub held_out: usize,
    /// Held-out examples whose decoded span equals the gold span exactly.
    pub exact_hits: usize,
    pub recall: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaCrossValidation {
    pub folds: Vec<QaFoldReport>,
    pub mean_recall: f64,
}

/// Plain k-fold training; fold `i` uses seed `seed + i`.
pub fn train_qa_ensemble(
    examples: &[QaSequence],
    vocab_size: usize,
    config: &QaConfig,
    k: usize,
    max_answer_len: usize,
    seed: u64,
    jobs: usize,
) -> Result<(QaEnsemble, QaCrossValidation), QaError> {
    if examples.is_empty() {
        return Err(QaError::EmptyFold);
    }
    let folds = evalx::stratified_kfold(&vec![(); examples.len()], k, seed)?;
    let results = run_folds(k, jobs, |f| -> Result<(QaModel, QaFoldReport), QaError> {
        let fold_seed = seed.wrapping_add(f as u64);
        let train: Vec<QaSequence> = folds.train_indices(f).into_iter().map(|i| examples[i].clone()).collect();
        let trained = train_qa_fold(&train, vocab_size, config, fold_seed)?;
        let held = folds.test_indices(f);
        let mut hits = 0;
        for &i in &held {
            let dist = qa_forward(&trained.model, &examples[i])?;
            if let Ok(p) = decode_span(&dist, max_answer_len) {
                if Some((p.start, p.end)) == examples[i].gold {
                    hits += 1;
                }
            }
        }
        let report = QaFoldReport {
            fold: f,
            seed: fold_seed,
            train_size: train.len(),
            held_out: held.len(),
            exact_hits: hits,
            recall: if held.is_empty() { 0.0 } else { hits as f64 / held.len() as f64 },
            loss_trace: trained.loss_trace,
        };
        Ok((trained.model, report))
    });
    let mut models = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for r in results {
        let (m, rep) = r?;
        models.push(m);
        reports.push(rep);
    }
    let mean_recall = reports.iter().map(|r| r.recall).sum::<f64>() / reports.len() as f64;
    Ok((QaEnsemble { models }, QaCrossValidation { folds: reports, mean_recall }))
}
