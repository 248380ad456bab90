//! Stage 2: binary relevance classifier. Sentences whose ensemble
//! probability falls below the threshold leave the cascade here.
//!
//! The encoder is mean-pooled token embeddings followed by one `tanh`
//! hidden layer and a sigmoid output.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalx::{self, prf_scores, ConfusionCounts, EvalError, PrfScores};
use crate::neuralcore::{adam_step, bce_with_logit, dot, sigmoid, AdamConfig, AdamState, Dense2D, NumError, ParameterSet};
use crate::textproc::{tokenize, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum RelevanceError {
    #[error("training fold contains a single class")]
    SingleClassFold,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error(transparent)]
    Folds(#[from] EvalError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceConfig {
    pub dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            dim: 32,
            hidden: 16,
            epochs: 30,
            lr: 1e-2,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// One training example: token ids and whether the sentence holds a pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceExample {
    pub ids: Vec<u32>,
    pub label: bool,
}

impl RelevanceExample {
    pub fn from_text(vocab: &Vocabulary, text: &str, label: bool) -> Self {
        RelevanceExample {
            ids: vocab.encode(&tokenize(text)),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub dim: usize,
    pub hidden: usize,
    params: ParameterSet,
}

const EMBED: usize = 0;
const W1: usize = 1;
const B1: usize = 2;
const W2: usize = 3;
const B2: usize = 4;

struct Forward {
    pooled: Vec<f64>,
    act: Vec<f64>,
    logit: f64,
}

impl RelevanceModel {
    pub fn init(vocab_size: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::default();
        params.push("embed", Dense2D::random(vocab_size, dim, 0.5, &mut rng));
        params.push("w1", Dense2D::glorot(dim, hidden, &mut rng));
        params.push("b1", Dense2D::zeros(1, hidden));
        params.push("w2", Dense2D::glorot(hidden, 1, &mut rng));
        params.push("b2", Dense2D::zeros(1, 1));
        RelevanceModel { dim, hidden, params }
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(EMBED).rows
    }

    /// Checks that every parameter has the shape implied by the dimensions.
    pub fn check_shapes(&self, vocab_size: usize) -> Result<(), NumError> {
        let expected = [
            (vocab_size, self.dim),
            (self.dim, self.hidden),
            (1, self.hidden),
            (self.hidden, 1),
            (1, 1),
        ];
        if self.params.len() != expected.len() {
            return Err(NumError::Shape("relevance model has wrong parameter count".into()));
        }
        for (i, shape) in expected.iter().enumerate() {
            if self.params.value(i).shape() != *shape {
                return Err(NumError::Shape(format!(
                    "relevance parameter `{}` is {:?}, expected {:?}",
                    self.params.iter().nth(i).unwrap().name,
                    self.params.value(i).shape(),
                    shape
                )));
            }
        }
        if !self.params.all_finite() {
            return Err(NumError::Shape("relevance parameters are not finite".into()));
        }
        Ok(())
    }

    fn forward_with(&self, params: &ParameterSet, ids: &[u32]) -> Forward {
        let embed = params.value(EMBED);
        let mut pooled = vec![0.0; self.dim];
        let vocab = embed.rows as u32;
        for &id in ids {
            let id = if id < vocab { id } else { crate::textproc::UNK_ID };
            for (p, e) in pooled.iter_mut().zip(embed.row(id as usize)) {
                *p += e;
            }
        }
        if !ids.is_empty() {
            let n = ids.len() as f64;
            pooled.iter_mut().for_each(|p| *p /= n);
        }
        let w1 = params.value(W1);
        let b1 = params.value(B1);
        let act: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let z: f64 = (0..self.dim).map(|i| pooled[i] * w1.get(i, j)).sum::<f64>() + b1.data[j];
                z.tanh()
            })
            .collect();
        let logit = dot(&act, &params.value(W2).data) + params.value(B2).data[0];
        Forward { pooled, act, logit }
    }

    pub fn logit(&self, ids: &[u32]) -> f64 {
        self.forward_with(&self.params, ids).logit
    }

    pub fn prob(&self, ids: &[u32]) -> f64 {
        sigmoid(self.logit(ids))
    }

    /// Loss of one example under `params`; used by gradient checks.
    pub fn loss_with(&self, params: &ParameterSet, ex: &RelevanceExample) -> f64 {
        bce_with_logit(self.forward_with(params, &ex.ids).logit, ex.label).0
    }

    /// Adds `scale ×` the example's gradient into the gradient buffers and
    /// returns its loss.
    pub fn accumulate_grad(&mut self, ex: &RelevanceExample, scale: f64) -> f64 {
        let f = self.forward_with(&self.params, &ex.ids);
        let (loss, d_logit) = bce_with_logit(f.logit, ex.label);
        let d_logit = d_logit * scale;
        let w1 = self.params.value(W1).clone();
        let w2 = self.params.value(W2).data.clone();

        self.params.grad_mut(B2).data[0] += d_logit;
        let mut d_z1 = vec![0.0; self.hidden];
        for j in 0..self.hidden {
            self.params.grad_mut(W2).data[j] += f.act[j] * d_logit;
            d_z1[j] = d_logit * w2[j] * (1.0 - f.act[j] * f.act[j]);
            self.params.grad_mut(B1).data[j] += d_z1[j];
        }
        let mut d_pooled = vec![0.0; self.dim];
        {
            let g_w1 = self.params.grad_mut(W1);
            for i in 0..self.dim {
                for j in 0..self.hidden {
                    g_w1.data[i * self.hidden + j] += f.pooled[i] * d_z1[j];
                    d_pooled[i] += d_z1[j] * w1.get(i, j);
                }
            }
        }
        if !ex.ids.is_empty() {
            let n = ex.ids.len() as f64;
            let vocab = self.vocab_size() as u32;
            let g_embed = self.params.grad_mut(EMBED);
            for &id in &ex.ids {
                let id = if id < vocab { id } else { crate::textproc::UNK_ID };
                for (g, d) in g_embed.row_mut(id as usize).iter_mut().zip(&d_pooled) {
                    *g += d / n;
                }
            }
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedRelevance {
    pub model: RelevanceModel,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch Adam on binary cross-entropy. Deterministic given `seed`.
pub fn train_relevance_fold(
    examples: &[RelevanceExample],
    vocab_size: usize,
    config: &RelevanceConfig,
    seed: u64,
) -> Result<TrainedRelevance, RelevanceError> {
    let positives = examples.iter().filter(|e| e.label).count();
    if positives == 0 || positives == examples.len() {
        return Err(RelevanceError::SingleClassFold);
    }
    let mut model = RelevanceModel::init(vocab_size, config.dim, config.hidden, seed);
    let mut adam = AdamState::new(&model.params, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
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
                epoch_loss += model.accumulate_grad(&examples[i], scale);
            }
            adam_step(&mut model.params, &mut adam, config.lr)?;
        }
        loss_trace.push(epoch_loss / examples.len() as f64);
    }
    model.params.zero_grad();
    Ok(TrainedRelevance { model, loss_trace })
}

/// `prob ≥ τ` passes to QA.
pub fn classify_relevant(prob: f64, threshold: f64) -> bool {
    prob >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceEnsemble {
    pub models: Vec<RelevanceModel>,
    pub threshold: f64,
}

impl RelevanceEnsemble {
    pub fn new(models: Vec<RelevanceModel>, threshold: f64) -> Result<Self, RelevanceError> {
        if models.is_empty() {
            return Err(RelevanceError::EmptyEnsemble);
        }
        Ok(RelevanceEnsemble { models, threshold })
    }

    /// Arithmetic mean of member probabilities.
    pub fn prob(&self, ids: &[u32]) -> f64 {
        self.models.iter().map(|m| m.prob(ids)).sum::<f64>() / self.models.len() as f64
    }

    pub fn prob_for_text(&self, vocab: &Vocabulary, text: &str) -> f64 {
        self.prob(&vocab.encode(&tokenize(text)))
    }

    pub fn passes(&self, prob: f64) -> bool {
        classify_relevant(prob, self.threshold)
    }
}

/// Held-out metrics for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub validation: ConfusionCounts,
    pub scores: PrfScores,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldReport>,
    /// Mean of per-fold validation scores.
    pub mean: PrfScores,
}

pub(crate) fn mean_scores(scores: impl Iterator<Item = PrfScores>) -> PrfScores {
    let all: Vec<PrfScores> = scores.collect();
    let n = all.len().max(1) as f64;
    PrfScores {
        precision: all.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: all.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: all.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Runs `f` over `0..n` on `jobs` threads, keeping result order.
pub(crate) fn run_folds<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

/// Stratified k-fold training. Fold `i` trains on the other folds with seed
/// `seed + i`; its held-out fold yields the validation metrics.
pub fn train_relevance_ensemble(
    examples: &[RelevanceExample],
    vocab_size: usize,
    config: &RelevanceConfig,
    k: usize,
    threshold: f64,
    seed: u64,
    jobs: usize,
) -> Result<(RelevanceEnsemble, CrossValidation), RelevanceError> {
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(RelevanceError::SingleClassFold);
    }
    let folds = evalx::stratified_kfold(&labels, k, seed)?;
    let results = run_folds(k, jobs, |f| -> Result<(RelevanceModel, FoldReport), RelevanceError> {
        let fold_seed = seed.wrapping_add(f as u64);
        let train: Vec<RelevanceExample> = folds.train_indices(f).into_iter().map(|i| examples[i].clone()).collect();
        let trained = train_relevance_fold(&train, vocab_size, config, fold_seed)?;
        let mut counts = ConfusionCounts::default();
        for i in folds.test_indices(f) {
            let predicted = classify_relevant(trained.model.prob(&examples[i].ids), threshold);
            match (predicted, examples[i].label) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
        let report = FoldReport {
            fold: f,
            seed: fold_seed,
            train_size: train.len(),
            validation: counts,
            scores: prf_scores(counts),
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
    let mean = mean_scores(reports.iter().map(|r| r.scores));
    Ok((
        RelevanceEnsemble::new(models, threshold)?,
        CrossValidation { folds: reports, mean },
    ))
}
