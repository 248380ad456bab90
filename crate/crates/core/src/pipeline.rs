//! End-to-end cascade: drug lexicon, relevance ensemble, span QA ensemble.
//! Also owns training orchestration, bundle persistence and run reports.
//!
//! Correctly discarded negatives count as true positives; there is no TN
//! cell in the end-to-end accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Label, LabeledSentence};
use crate::evalx::{
    categorize_sentence, cascade_confusion, prf_scores, span_match, CascadeTally, ConfusionCounts, EvalError,
    MatchCriterion, MultiPairRule, OutcomeCategory, PrfScores,
};
use crate::nerstage::{DrugLexicon, DrugRecognizer, NerError};
use crate::neuralcore::NumError;
use crate::relevance::{
    run_folds, train_relevance_ensemble, CrossValidation, RelevanceConfig, RelevanceEnsemble, RelevanceError,
    RelevanceExample,
};
use crate::span::Span;
use crate::spanqa::{
    answer_char_span, build_qa_sequence, decode_span, train_qa_ensemble, QaConfig, QaCrossValidation, QaEnsemble,
    QaError, QaSequence,
};
use crate::textproc::Vocabulary;

pub const BUNDLE_FORMAT: &str = "bundle-v1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ner stage: {0}")]
    Ner(#[source] NerError),
    #[error("relevance stage: {0}")]
    Relevance(#[source] RelevanceError),
    #[error("qa stage: {0}")]
    Qa(#[source] QaError),
    #[error("{0}")]
    Data(String),
    #[error("bundle format {found:?} is not supported (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("invariant violated: {0}")]
    Inconsistent(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Stage tag for errors raised while training or running a stage.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Ner(_) => Some("ner"),
            PipelineError::Relevance(_) => Some("relevance"),
            PipelineError::Qa(_) => Some("qa"),
            _ => None,
        }
    }

    /// True when the error signals a broken internal invariant rather than
    /// bad input.
    pub fn is_invariant_breach(&self) -> bool {
        matches!(
            self,
            PipelineError::Inconsistent(_)
                | PipelineError::Relevance(RelevanceError::Numeric(_))
                | PipelineError::Qa(QaError::Numeric(_))
        )
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Inconsistent(e.to_string())
    }
}

/// Which end-to-end criteria a run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchSelection {
    Exact,
    Overlap,
    #[default]
    Both,
}

impl MatchSelection {
    pub fn criteria(self) -> &'static [MatchCriterion] {
        match self {
            MatchSelection::Exact => &[MatchCriterion::Exact],
            MatchSelection::Overlap => &[MatchCriterion::Overlap],
            MatchSelection::Both => &[MatchCriterion::Exact, MatchCriterion::Overlap],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub classifier_k: usize,
    pub qa_k: usize,
    pub threshold: f64,
    pub max_answer_len: usize,
    pub min_count: usize,
    pub match_selection: MatchSelection,
    pub multi_pair: MultiPairRule,
    pub relevance: RelevanceConfig,
    pub qa: QaConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            classifier_k: 10,
            qa_k: 5,
            threshold: 0.5,
            max_answer_len: 10,
            min_count: 1,
            match_selection: MatchSelection::Both,
            multi_pair: MultiPairRule::Any,
            relevance: RelevanceConfig::default(),
            qa: QaConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Hyperparameters as published for the full-scale system. The QA
    /// rate and epoch count are meant for a pretrained encoder; on a
    /// freshly initialized one they barely move the weights.
    pub fn reference() -> Self {
        let mut c = PipelineConfig::default();
        c.relevance.lr = 1e-3;
        c.qa.lr = 3e-5;
        c.qa.epochs = 3;
        c.qa.label_smoothing = 0.1;
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.classifier_k < 2 || self.qa_k < 2 {
            return bad(format!("fold counts must be at least 2 (classifier {}, qa {})", self.classifier_k, self.qa_k));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.max_answer_len == 0 {
            return bad("max_answer_len must be positive".into());
        }
        if self.min_count == 0 {
            return bad("min_count must be positive".into());
        }
        let r = &self.relevance;
        if r.dim == 0 || r.hidden == 0 || r.epochs == 0 || r.batch_size == 0 {
            return bad("relevance dim, hidden, epochs and batch_size must be positive".into());
        }
        let q = &self.qa;
        if q.dim == 0 || q.epochs == 0 || q.batch_size == 0 {
            return bad("qa dim, epochs and batch_size must be positive".into());
        }
        for (name, lr) in [("relevance", r.lr), ("qa", q.lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} learning rate {lr} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&q.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", q.label_smoothing));
        }
        for a in [&r.adam, &q.adam] {
            if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
                return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub train_pos: usize,
    pub train_neg: usize,
    pub qa_examples: usize,
    /// Gold pairs whose AE span maps onto no token.
    pub qa_skipped: usize,
    pub relevance_cv: CrossValidation,
    pub qa_cv: QaCrossValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    pub config: PipelineConfig,
    pub vocabulary: Vocabulary,
    pub lexicon: DrugLexicon,
    pub relevance: RelevanceEnsemble,
    pub qa: QaEnsemble,
    pub summary: TrainingSummary,
}

impl TrainedBundle {
    pub fn format(&self) -> &'static str {
        BUNDLE_FORMAT
    }

    /// Checks that every component agrees on dimensions and settings.
    pub fn check_consistency(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Inconsistent(m));
        self.config.validate().map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
        if self.lexicon.is_empty() {
            return bad("drug lexicon is empty".into());
        }
        let v = self.vocabulary.len();
        if self.relevance.models.len() != self.config.classifier_k {
            return bad(format!(
                "relevance ensemble has {} members, config says {}",
                self.relevance.models.len(),
                self.config.classifier_k
            ));
        }
        if self.qa.models.len() != self.config.qa_k {
            return bad(format!("qa ensemble has {} members, config says {}", self.qa.models.len(), self.config.qa_k));
        }
        if self.relevance.threshold != self.config.threshold {
            return bad("relevance threshold differs from config".into());
        }
        let shape = |e: NumError| PipelineError::Inconsistent(format!("vocabulary of {v} tokens: {e}"));
        for m in &self.relevance.models {
            m.check_shapes(v).map_err(shape)?;
        }
        for m in &self.qa.models {
            m.check_shapes(v).map_err(shape)?;
        }
        Ok(())
    }
}

/// Trains every stage on `train`. Vocabulary and lexicon see only these
/// sentences.
pub fn train_pipeline(train: &[LabeledSentence], config: &PipelineConfig, jobs: usize) -> Result<TrainedBundle, PipelineError> {
    config.validate()?;
    for s in train {
        s.validate().map_err(PipelineError::Data)?;
    }
    let vocabulary = Vocabulary::build(train.iter().map(|s| s.text.as_str()), config.min_count);
    let lexicon = DrugLexicon::build(train).map_err(PipelineError::Ner)?;

    let rel_examples: Vec<RelevanceExample> = train
        .iter()
        .map(|s| RelevanceExample::from_text(&vocabulary, &s.text, s.label.is_positive()))
        .collect();
    log::info!("relevance: {} examples, k = {}", rel_examples.len(), config.classifier_k);
    let (relevance, relevance_cv) = train_relevance_ensemble(
        &rel_examples,
        vocabulary.len(),
        &config.relevance,
        config.classifier_k,
        config.threshold,
        config.seed,
        jobs,
    )
    .map_err(PipelineError::Relevance)?;

    let mut qa_examples: Vec<QaSequence> = Vec::new();
    let mut qa_skipped = 0;
    for s in train.iter().filter(|s| s.label.is_positive()) {
        for p in &s.pairs {
            let question = &s.text[p.drug_sent_span.begin..p.drug_sent_span.end];
            match build_qa_sequence(question, &s.text, &vocabulary, Some(p.ae_sent_span)) {
                Ok(seq) => qa_examples.push(seq),
                Err(QaError::GoldSpanUnmappable(span)) => {
                    log::debug!("skipping pair with unmappable AE span {span} in {:?}", s.doc_id);
                    qa_skipped += 1;
                }
                Err(e) => return Err(PipelineError::Qa(e)),
            }
        }
    }
    log::info!("qa: {} examples ({} skipped), k = {}", qa_examples.len(), qa_skipped, config.qa_k);
    let (qa, qa_cv) = train_qa_ensemble(
        &qa_examples,
        vocabulary.len(),
        &config.qa,
        config.qa_k,
        config.max_answer_len,
        config.seed,
        jobs,
    )
    .map_err(PipelineError::Qa)?;

    let summary = TrainingSummary {
        train_pos: train.iter().filter(|s| s.label.is_positive()).count(),
        train_neg: train.iter().filter(|s| !s.label.is_positive()).count(),
        qa_examples: qa_examples.len(),
        qa_skipped,
        relevance_cv,
        qa_cv,
    };
    Ok(TrainedBundle {
        config: config.clone(),
        vocabulary,
        lexicon,
        relevance,
        qa,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ner,
    Classifier,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Ner => "ner",
            Stage::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub char_span: Span,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugAnswer {
    pub drug: String,
    pub drug_span: Span,
    /// `None` when no span could be decoded.
    pub answer: Option<AnswerSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceTrace {
    pub sentence_id: String,
    pub drugs: Vec<crate::nerstage::DrugMention>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relevance_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eliminated_at: Option<Stage>,
    pub answers: Vec<DrugAnswer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_exact: Option<OutcomeCategory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_overlap: Option<OutcomeCategory>,
}

impl SentenceTrace {
    pub fn drug_found(&self) -> bool {
        !self.drugs.is_empty()
    }

    pub fn passed_classifier(&self) -> Option<bool> {
        self.drug_found().then(|| self.eliminated_at.is_none())
    }

    /// Stage monotonicity: nothing downstream of the eliminating stage.
    pub fn check(&self) -> Result<(), PipelineError> {
        let ok = match self.eliminated_at {
            Some(Stage::Ner) => self.drugs.is_empty() && self.relevance_prob.is_none() && self.answers.is_empty(),
            Some(Stage::Classifier) => !self.drugs.is_empty() && self.relevance_prob.is_some() && self.answers.is_empty(),
            None => {
                !self.drugs.is_empty() && self.relevance_prob.is_some() && self.answers.len() == self.drugs.len()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(PipelineError::Inconsistent(format!("trace {} violates stage order", self.sentence_id)))
        }
    }
}

/// Pushes one sentence through the cascade. Failures become eliminations.
pub fn run_sentence(bundle: &TrainedBundle, sentence_id: &str, text: &str) -> SentenceTrace {
    let mut trace = SentenceTrace {
        sentence_id: sentence_id.to_string(),
        drugs: bundle.lexicon.recognize(text),
        relevance_prob: None,
        eliminated_at: None,
        answers: Vec::new(),
        category_exact: None,
        category_overlap: None,
    };
    if trace.drugs.is_empty() {
        trace.eliminated_at = Some(Stage::Ner);
        return trace;
    }
    let prob = bundle.relevance.prob_for_text(&bundle.vocabulary, text);
    trace.relevance_prob = Some(prob);
    if !bundle.relevance.passes(prob) {
        trace.eliminated_at = Some(Stage::Classifier);
        return trace;
    }
    for m in &trace.drugs {
        let answer = build_qa_sequence(&m.surface, text, &bundle.vocabulary, None)
            .and_then(|seq| {
                let dist = bundle.qa.distribution(&seq)?;
                let pred = decode_span(&dist, bundle.config.max_answer_len)?;
                let char_span = answer_char_span(&pred, &seq.offsets)?;
                Ok(AnswerSpan {
                    text: text[char_span.begin..char_span.end].to_string(),
                    char_span,
                    score: pred.score,
                })
            })
            .map_err(|e| log::debug!("{sentence_id}: no answer for {:?}: {e}", m.surface))
            .ok();
        trace.answers.push(DrugAnswer {
            drug: m.surface.clone(),
            drug_span: m.char_span,
            answer,
        });
    }
    trace
}

/// Gold AE spans per lowercased drug surface.
fn gold_by_drug(sentence: &LabeledSentence) -> BTreeMap<String, Vec<Span>> {
    let mut map: BTreeMap<String, Vec<Span>> = BTreeMap::new();
    for p in &sentence.pairs {
        map.entry(p.drug_surface.to_lowercase()).or_default().push(p.ae_sent_span);
    }
    map
}

fn drug_answered(trace: &SentenceTrace, drug_lc: &str, gold: &[Span], criterion: MatchCriterion) -> bool {
    trace
        .answers
        .iter()
        .filter(|a| a.drug.to_lowercase() == drug_lc)
        .any(|a| a.answer.as_ref().is_some_and(|ans| span_match(ans.char_span, gold, criterion)))
}

/// Whether a positive sentence that reached QA earns `+A`.
pub fn answer_correct(sentence: &LabeledSentence, trace: &SentenceTrace, criterion: MatchCriterion, rule: MultiPairRule) -> bool {
    let gold = gold_by_drug(sentence);
    if gold.is_empty() {
        return false;
    }
    let mut hits = gold.iter().map(|(d, spans)| drug_answered(trace, d, spans, criterion));
    match rule {
        MultiPairRule::Any => hits.any(|h| h),
        MultiPairRule::All => hits.all(|h| h),
    }
}

pub fn judge_trace(
    sentence: &LabeledSentence,
    trace: &SentenceTrace,
    criterion: MatchCriterion,
    rule: MultiPairRule,
) -> Result<OutcomeCategory, PipelineError> {
    trace.check()?;
    let passed = trace.passed_classifier();
    let answered = match (passed, sentence.label) {
        (Some(true), Label::Positive) => Some(answer_correct(sentence, trace, criterion, rule)),
        (Some(true), Label::Negative) => Some(false),
        _ => None,
    };
    Ok(categorize_sentence(sentence.label, trace.drug_found(), passed, answered)?)
}

/// One value per reported criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerCriterion<T> {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub exact: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap: Option<T>,
}

impl<T> PerCriterion<T> {
    pub fn get(&self, c: MatchCriterion) -> Option<&T> {
        match c {
            MatchCriterion::Exact => self.exact.as_ref(),
            MatchCriterion::Overlap => self.overlap.as_ref(),
        }
    }

    fn set(&mut self, c: MatchCriterion, v: T) {
        match c {
            MatchCriterion::Exact => self.exact = Some(v),
            MatchCriterion::Overlap => self.overlap = Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub pipeline: PipelineConfig,
    pub match_selection: MatchSelection,
    pub multi_pair: MultiPairRule,
    /// Where the evaluated sentences came from.
    pub test_source: String,
    pub test_pos: usize,
    pub test_neg: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NerMetrics {
    pub sentences: usize,
    pub drug_found: usize,
    pub gold_pairs: usize,
    /// Gold pairs whose drug surface was recognized.
    pub gold_drugs_found: usize,
    pub gold_drug_recall: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    /// Sentences that reached the classifier.
    pub evaluated: usize,
    pub passed: usize,
    pub confusion: ConfusionCounts,
    pub scores: PrfScores,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    /// Gold pairs in positives that reached QA with their drug recognized.
    pub queried_pairs: usize,
    pub hits: PerCriterion<usize>,
    pub recall: PerCriterion<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub relevance_cv: PrfScores,
    pub qa_cv_recall: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub ner: NerMetrics,
    pub classifier: ClassifierMetrics,
    pub qa: QaMetrics,
    pub training: TrainingMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ReportConfig,
    pub stage_metrics: StageMetrics,
    pub cascade_tally: PerCriterion<CascadeTally>,
    pub end_to_end: PerCriterion<PrfScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub traces: Option<Vec<SentenceTrace>>,
}

impl RunReport {
    /// Recomputes every end-to-end score from its tally and checks the
    /// partition identity against the test size.
    pub fn verify(&self) -> Result<(), PipelineError> {
        let n = (self.config.test_pos + self.config.test_neg) as u64;
        for c in self.config.match_selection.criteria() {
            let (Some(tally), Some(scores)) = (self.cascade_tally.get(*c), self.end_to_end.get(*c)) else {
                return Err(PipelineError::Inconsistent(format!("{c:?} block missing from report")));
            };
            let counts = cascade_confusion(tally);
            if counts.total() != n || tally.total() != n {
                return Err(PipelineError::Inconsistent(format!(
                    "TP+FN+FP = {} but {} sentences were evaluated",
                    counts.total(),
                    n
                )));
            }
            if prf_scores(counts) != *scores {
                return Err(PipelineError::Inconsistent("scores differ from their tally".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub match_selection: MatchSelection,
    pub multi_pair: MultiPairRule,
    pub test_source: String,
    pub keep_traces: bool,
}

impl EvalOptions {
    pub fn from_config(config: &PipelineConfig, test_source: impl Into<String>) -> Self {
        EvalOptions {
            match_selection: config.match_selection,
            multi_pair: config.multi_pair,
            test_source: test_source.into(),
            keep_traces: false,
        }
    }
}

/// Judges precomputed traces, one per test sentence in order.
pub fn build_report(
    pipeline: &PipelineConfig,
    training: TrainingMetrics,
    test: &[LabeledSentence],
    mut traces: Vec<SentenceTrace>,
    options: &EvalOptions,
) -> Result<RunReport, PipelineError> {
    if traces.len() != test.len() {
        return Err(PipelineError::Inconsistent(format!("{} traces for {} sentences", traces.len(), test.len())));
    }
    let criteria = options.match_selection.criteria();
    let mut tallies: PerCriterion<CascadeTally> = PerCriterion::default();
    for c in criteria {
        tallies.set(*c, CascadeTally::default());
    }
    let mut m = StageMetrics {
        training,
        ..StageMetrics::default()
    };
    let mut hits: [usize; 2] = [0, 0];
    for (s, t) in test.iter().zip(traces.iter_mut()) {
        for c in criteria {
            let cat = judge_trace(s, t, *c, options.multi_pair)?;
            match c {
                MatchCriterion::Exact => {
                    tallies.exact.as_mut().unwrap().record(cat);
                    t.category_exact = Some(cat);
                }
                MatchCriterion::Overlap => {
                    tallies.overlap.as_mut().unwrap().record(cat);
                    t.category_overlap = Some(cat);
                }
            }
        }

        m.ner.sentences += 1;
        let found: Vec<String> = t.drugs.iter().map(|d| d.surface.to_lowercase()).collect();
        m.ner.gold_pairs += s.pairs.len();
        m.ner.gold_drugs_found += s.pairs.iter().filter(|p| found.contains(&p.drug_surface.to_lowercase())).count();
        if let Some(passed) = t.passed_classifier() {
            m.ner.drug_found += 1;
            m.classifier.evaluated += 1;
            let conf = &mut m.classifier.confusion;
            match (passed, s.label) {
                (true, Label::Positive) => conf.tp += 1,
                (true, Label::Negative) => conf.fp += 1,
                (false, Label::Positive) => conf.fn_ += 1,
                (false, Label::Negative) => {}
            }
            if passed {
                m.classifier.passed += 1;
            }
            if passed && s.label.is_positive() {
                for p in s.pairs.iter().filter(|p| found.contains(&p.drug_surface.to_lowercase())) {
                    m.qa.queried_pairs += 1;
                    let drug = p.drug_surface.to_lowercase();
                    for (slot, c) in [MatchCriterion::Exact, MatchCriterion::Overlap].into_iter().enumerate() {
                        if drug_answered(t, &drug, &[p.ae_sent_span], c) {
                            hits[slot] += 1;
                        }
                    }
                }
            }
        }
    }
    m.ner.gold_drug_recall = rate(m.ner.gold_drugs_found, m.ner.gold_pairs);
    m.classifier.scores = prf_scores(m.classifier.confusion);
    for (slot, c) in [MatchCriterion::Exact, MatchCriterion::Overlap].into_iter().enumerate() {
        if criteria.contains(&c) {
            m.qa.hits.set(c, hits[slot]);
            m.qa.recall.set(c, rate(hits[slot], m.qa.queried_pairs));
        }
    }

    let mut end_to_end = PerCriterion::default();
    for c in criteria {
        end_to_end.set(*c, prf_scores(cascade_confusion(tallies.get(*c).unwrap())));
    }
    let report = RunReport {
        config: ReportConfig {
            pipeline: pipeline.clone(),
            match_selection: options.match_selection,
            multi_pair: options.multi_pair,
            test_source: options.test_source.clone(),
            test_pos: test.iter().filter(|s| s.label.is_positive()).count(),
            test_neg: test.iter().filter(|s| !s.label.is_positive()).count(),
        },
        stage_metrics: m,
        cascade_tally: tallies,
        end_to_end,
        traces: options.keep_traces.then_some(traces),
    };
    report.verify()?;
    Ok(report)
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_end_to_end(
    bundle: &TrainedBundle,
    test: &[LabeledSentence],
    options: &EvalOptions,
    jobs: usize,
) -> Result<RunReport, PipelineError> {
    let traces = run_folds(test.len(), jobs, |i| {
        run_sentence(bundle, &format!("{}:{}", i, test[i].doc_id), &test[i].text)
    });
    let training = TrainingMetrics {
        relevance_cv: bundle.summary.relevance_cv.mean,
        qa_cv_recall: bundle.summary.qa_cv.mean_recall,
    };
    let mut config = bundle.config.clone();
    config.match_selection = options.match_selection;
    config.multi_pair = options.multi_pair;
    build_report(&config, training, test, traces, options)
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format: &'a str,
    checksum: String,
    payload: &'a RawValue,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    format: String,
    checksum: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn bundle_to_string(bundle: &TrainedBundle) -> Result<String, PipelineError> {
    bundle.check_consistency()?;
    let payload = serde_json::to_string(bundle).map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
    let raw = RawValue::from_string(payload).map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
    let env = EnvelopeOut {
        format: BUNDLE_FORMAT,
        checksum: sha256_hex(raw.get().as_bytes()),
        payload: &raw,
    };
    let mut out = serde_json::to_string(&env).map_err(|e| PipelineError::Inconsistent(e.to_string()))?;
    out.push('\n');
    Ok(out)
}

pub fn bundle_from_str(text: &str) -> Result<TrainedBundle, PipelineError> {
    let env: EnvelopeIn = serde_json::from_str(text).map_err(|e| PipelineError::CorruptBundle(e.to_string()))?;
    if env.format != BUNDLE_FORMAT {
        return Err(PipelineError::VersionMismatch {
            found: env.format,
            expected: BUNDLE_FORMAT.into(),
        });
    }
    if sha256_hex(env.payload.get().as_bytes()) != env.checksum {
        return Err(PipelineError::CorruptBundle("checksum mismatch".into()));
    }
    let bundle: TrainedBundle =
        serde_json::from_str(env.payload.get()).map_err(|e| PipelineError::CorruptBundle(e.to_string()))?;
    bundle.check_consistency()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &TrainedBundle, path: &Path) -> Result<(), PipelineError> {
    let text = bundle_to_string(bundle)?;
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bundle(path: &Path) -> Result<TrainedBundle, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    bundle_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, AnnotationPair};
    use crate::nerstage::DrugMention;
    use crate::spanqa::qa_forward;
    use std::sync::OnceLock;

    pub(crate) fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig {
            seed: 11,
            ..PipelineConfig::default()
        };
        c.relevance.dim = 12;
        c.relevance.hidden = 8;
        c.relevance.epochs = 12;
        c.qa.dim = 12;
        c.qa.epochs = 12;
        c
    }

    fn trained() -> &'static (Vec<LabeledSentence>, TrainedBundle) {
        static CELL: OnceLock<(Vec<LabeledSentence>, TrainedBundle)> = OnceLock::new();
        CELL.get_or_init(|| {
            let corpus = generate_synthetic_corpus(50, 50, 3);
            let bundle = train_pipeline(&corpus.sentences, &small_config(), 2).unwrap();
            (corpus.sentences, bundle)
        })
    }

    #[test]
    fn ensemble_sizes_follow_config() {
        let (_, b) = trained();
        assert_eq!(b.relevance.models.len(), 10);
        assert_eq!(b.qa.models.len(), 5);
        assert_eq!(b.summary.train_pos, 50);
        b.check_consistency().unwrap();
    }

    #[test]
    fn single_class_is_tagged_relevance() {
        let corpus = generate_synthetic_corpus(30, 0, 1);
        let err = train_pipeline(&corpus.sentences, &small_config(), 1).unwrap_err();
        assert_eq!(err.stage(), Some("relevance"));
        assert!(matches!(err, PipelineError::Relevance(RelevanceError::SingleClassFold)));
        let corpus = generate_synthetic_corpus(0, 30, 1);
        let err = train_pipeline(&corpus.sentences, &small_config(), 1).unwrap_err();
        assert_eq!(err.stage(), Some("ner"));
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        c.validate().unwrap();
        PipelineConfig::reference().validate().unwrap();
        c.threshold = 1.5;
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        let c = PipelineConfig {
            classifier_k: 1,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
        let parsed: PipelineConfig = serde_json::from_str(r#"{"seed": 4, "qa": {"epochs": 2}}"#).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(parsed.seed, 4);
        assert_eq!(parsed.qa.epochs, 2);
        assert_eq!(parsed.qa.lr, QaConfig::default().lr);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn no_drug_stops_at_ner() {
        let (_, b) = trained();
        let t = run_sentence(b, "x", "No thrombus was observed.");
        assert_eq!(t.eliminated_at, Some(Stage::Ner));
        assert!(t.answers.is_empty() && t.relevance_prob.is_none());
        t.check().unwrap();
    }

    #[test]
    fn traces_are_monotone_and_report_verifies() {
        let (train, b) = trained();
        let options = EvalOptions {
            keep_traces: true,
            ..EvalOptions::from_config(&b.config, "train")
        };
        let report = evaluate_end_to_end(b, train, &options, 2).unwrap();
        report.verify().unwrap();
        let traces = report.traces.as_ref().unwrap();
        assert_eq!(traces.len(), train.len());
        for (s, t) in train.iter().zip(traces) {
            t.check().unwrap();
            assert!(t.category_exact.is_some() && t.category_overlap.is_some());
            if let Some(p) = t.relevance_prob {
                assert_eq!(p, b.relevance.prob_for_text(&b.vocabulary, &s.text));
            }
        }
        let serial = evaluate_end_to_end(b, train, &options, 1).unwrap();
        assert_eq!(serial.to_json(), report.to_json());
    }

    #[test]
    fn memorized_positive_reaches_gold() {
        let (train, b) = trained();
        let hit = train.iter().filter(|s| s.label.is_positive()).any(|s| {
            let t = run_sentence(b, "m", &s.text);
            t.eliminated_at.is_none() && answer_correct(s, &t, MatchCriterion::Exact, MultiPairRule::Any)
        });
        assert!(hit);
    }

    #[test]
    fn negative_passing_threshold_is_neg_answered() {
        let (train, b) = trained();
        let mut open = b.clone();
        open.relevance.threshold = 0.0;
        open.config.threshold = 0.0;
        let neg = train
            .iter()
            .find(|s| !s.label.is_positive() && !open.lexicon.recognize(&s.text).is_empty())
            .expect("synthetic negatives mention drugs");
        let t = run_sentence(&open, "n", &neg.text);
        assert!(t.eliminated_at.is_none());
        assert!(!t.answers.is_empty() && t.answers.iter().all(|a| a.answer.is_some()));
        assert_eq!(
            judge_trace(neg, &t, MatchCriterion::Exact, MultiPairRule::Any).unwrap(),
            OutcomeCategory::NegAnswered
        );
    }

    fn pos(text: &str, drug: &str, ae: &str) -> LabeledSentence {
        let d = text.find(drug).unwrap();
        let a = text.find(ae).unwrap();
        let ds = Span::new(d, d + drug.len());
        let as_ = Span::new(a, a + ae.len());
        LabeledSentence {
            doc_id: "h".into(),
            text: text.into(),
            label: Label::Positive,
            pairs: vec![AnnotationPair {
                drug_surface: drug.into(),
                drug_doc_span: ds,
                ae_surface: ae.into(),
                ae_doc_span: as_,
                drug_sent_span: ds,
                ae_sent_span: as_,
            }],
        }
    }

    fn trace(text: &str, drug: Option<&str>, prob: Option<f64>, answer: Option<&str>) -> SentenceTrace {
        let drugs: Vec<DrugMention> = drug
            .map(|d| {
                let b = text.find(d).unwrap();
                vec![DrugMention {
                    surface: d.into(),
                    char_span: Span::new(b, b + d.len()),
                    source: "lexicon".into(),
                }]
            })
            .unwrap_or_default();
        let eliminated_at = match (drug, prob) {
            (None, _) => Some(Stage::Ner),
            (Some(_), Some(p)) if p < 0.5 => Some(Stage::Classifier),
            _ => None,
        };
        let answers = match (eliminated_at, drug) {
            (None, Some(d)) => {
                let b = text.find(d).unwrap();
                vec![DrugAnswer {
                    drug: d.into(),
                    drug_span: Span::new(b, b + d.len()),
                    answer: answer.map(|a| {
                        let s = text.find(a).unwrap();
                        AnswerSpan {
                            text: a.into(),
                            char_span: Span::new(s, s + a.len()),
                            score: 0.5,
                        }
                    }),
                }]
            }
            _ => vec![],
        };
        SentenceTrace {
            sentence_id: "h".into(),
            drugs,
            relevance_prob: prob,
            eliminated_at,
            answers,
            category_exact: None,
            category_overlap: None,
        }
    }

    /// Ten sentences covering all seven categories; the answer for the
    /// wrong positive overlaps the gold span without matching it.
    fn hand_fixture() -> (Vec<LabeledSentence>, Vec<SentenceTrace>) {
        let s = [
            pos("aspirin caused severe rash today", "aspirin", "severe rash"),
            pos("aspirin caused severe rash again", "aspirin", "severe rash"),
            pos("heparin led to bleeding", "heparin", "bleeding"),
            pos("he had rash from something", "something", "rash"),
            pos("heparin given and acne seen", "heparin", "acne"),
            pos("aspirin caused severe rash twice", "aspirin", "severe rash"),
            LabeledSentence::negative("h", "no drugs here"),
            LabeledSentence::negative("h", "none at all"),
            LabeledSentence::negative("h", "aspirin was fine"),
            LabeledSentence::negative("h", "heparin was well tolerated"),
        ];
        let t = vec![
            trace(s[0].text.as_str(), Some("aspirin"), Some(0.9), Some("severe rash")),
            trace(&s[1].text, Some("aspirin"), Some(0.8), Some("severe rash")),
            trace(&s[2].text, Some("heparin"), Some(0.5), Some("bleeding")),
            trace(&s[3].text, None, None, None),
            trace(&s[4].text, Some("heparin"), Some(0.2), None),
            trace(&s[5].text, Some("aspirin"), Some(0.7), Some("rash")),
            trace(&s[6].text, None, None, None),
            trace(&s[7].text, None, None, None),
            trace(&s[8].text, Some("aspirin"), Some(0.1), None),
            trace(&s[9].text, Some("heparin"), Some(0.6), Some("well")),
        ];
        (s.to_vec(), t)
    }

    #[test]
    fn hand_built_report() {
        let (test, traces) = hand_fixture();
        let options = EvalOptions {
            match_selection: MatchSelection::Both,
            multi_pair: MultiPairRule::Any,
            test_source: "hand".into(),
            keep_traces: true,
        };
        let r = build_report(&PipelineConfig::default(), TrainingMetrics::default(), &test, traces, &options).unwrap();
        use OutcomeCategory::*;
        let exact = CascadeTally::from_counts(&[
            (PosAnsweredCorrect, 3),
            (PosNoDrug, 1),
            (PosFiltered, 1),
            (PosAnsweredWrong, 1),
            (NegNoDrug, 2),
            (NegFiltered, 1),
            (NegAnswered, 1),
        ]);
        assert_eq!(r.cascade_tally.exact, Some(exact));
        // tp = 3 + 2 + 1, fn = 2, fp = 2
        let e = r.end_to_end.exact.unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (0.75, 0.75, 0.75));
        // under overlap the partial answer counts
        let o = r.end_to_end.overlap.unwrap();
        assert_eq!(o.precision, 7.0 / 8.0);
        assert_eq!(o.recall, 7.0 / 9.0);
        assert_eq!(r.stage_metrics.classifier.confusion, ConfusionCounts::new(4, 1, 1));
        assert_eq!(r.stage_metrics.qa.queried_pairs, 4);
        assert_eq!(r.stage_metrics.qa.hits.exact, Some(3));
        assert_eq!(r.stage_metrics.qa.hits.overlap, Some(4));
        assert_eq!(r.stage_metrics.ner.gold_drugs_found, 5);

        let exact_only = EvalOptions {
            match_selection: MatchSelection::Exact,
            keep_traces: false,
            ..options
        };
        let (test, traces) = hand_fixture();
        let r = build_report(&PipelineConfig::default(), TrainingMetrics::default(), &test, traces, &exact_only).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(json["end_to_end"].get("overlap").is_none());
        assert_eq!(json["end_to_end"]["exact"]["f1"], 0.75);
        assert_eq!(json["cascade_tally"]["exact"]["S_neg[-D]"], 2);
        assert!(json.get("traces").is_none());
    }

    #[test]
    fn all_negative_no_hits_is_perfect() {
        let (_, b) = trained();
        let test: Vec<LabeledSentence> = (0..5)
            .map(|i| LabeledSentence::negative("n", format!("Nothing of note on day {i}.")))
            .collect();
        let r = evaluate_end_to_end(b, &test, &EvalOptions::from_config(&b.config, "neg"), 1).unwrap();
        let e = r.end_to_end.exact.unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.cascade_tally.exact.unwrap().get(OutcomeCategory::NegNoDrug), 5);
    }

    #[test]
    fn multi_pair_rules() {
        let text = "aspirin and heparin caused rash and bleeding";
        let mut s = pos(text, "aspirin", "rash");
        s.pairs.extend(pos(text, "heparin", "bleeding").pairs);
        let mut t = trace(text, Some("aspirin"), Some(0.9), Some("rash"));
        let h = text.find("heparin").unwrap();
        t.drugs.push(DrugMention {
            surface: "heparin".into(),
            char_span: Span::new(h, h + 7),
            source: "lexicon".into(),
        });
        t.answers.push(DrugAnswer {
            drug: "heparin".into(),
            drug_span: Span::new(h, h + 7),
            answer: None,
        });
        assert!(answer_correct(&s, &t, MatchCriterion::Exact, MultiPairRule::Any));
        assert!(!answer_correct(&s, &t, MatchCriterion::Exact, MultiPairRule::All));
    }

    #[test]
    fn bundle_round_trip_is_bitwise() {
        let (train, b) = trained();
        let text = bundle_to_string(b).unwrap();
        let back = bundle_from_str(&text).unwrap();
        assert_eq!(&back, b);
        assert_eq!(bundle_to_string(&back).unwrap(), text);
        for s in train.iter().take(20) {
            assert_eq!(
                b.relevance.prob_for_text(&b.vocabulary, &s.text).to_bits(),
                back.relevance.prob_for_text(&back.vocabulary, &s.text).to_bits()
            );
            let q = &s.text[..s.text.find(' ').unwrap_or(s.text.len())];
            let seq = build_qa_sequence(q, &s.text, &b.vocabulary, None).unwrap();
            for (m1, m2) in b.qa.models.iter().zip(&back.qa.models) {
                assert_eq!(qa_forward(m1, &seq).unwrap(), qa_forward(m2, &seq).unwrap());
            }
        }
    }

    #[test]
    fn bundle_errors() {
        let (_, b) = trained();
        let text = bundle_to_string(b).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(bundle_from_str(truncated), Err(PipelineError::CorruptBundle(_))));

        let old = text.replacen("bundle-v1", "bundle-v0", 1);
        let err = bundle_from_str(&old).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bundle-v0") && msg.contains("bundle-v1"), "{msg}");

        // flip one digit inside the payload
        let pos = text.find("\"threshold\":").unwrap() + 12;
        let mut tampered = text.clone().into_bytes();
        tampered[pos] = if tampered[pos] == b'0' { b'1' } else { b'0' };
        let err = bundle_from_str(std::str::from_utf8(&tampered).unwrap()).unwrap_err();
        assert!(matches!(err, PipelineError::CorruptBundle(_)), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let missing = load_bundle(&dir.path().join("none.json")).unwrap_err();
        assert!(matches!(missing, PipelineError::Io { .. }));
    }

    #[test]
    fn dimension_mismatch_is_inconsistent() {
        let (_, b) = trained();
        let mut broken = b.clone();
        broken.vocabulary = Vocabulary::build(["just a few words"], 1);
        assert!(matches!(broken.check_consistency(), Err(PipelineError::Inconsistent(_))));
        assert!(bundle_to_string(&broken).unwrap_err().is_invariant_breach());
    }
}
