//! Cascaded drug / adverse-event extraction.
//!
//! Sentences flow through three stages. A drug recognizer drops sentences
//! without a drug mention, a relevance classifier drops sentences unlikely
//! to hold a drug/adverse-event pair, and an extractive span QA model reads
//! the adverse event for each recognized drug. [`evalx`] scores the whole
//! cascade so that correctly eliminated negatives count as successes.

pub mod corpus;
pub mod evalx;
pub mod nerstage;
pub mod neuralcore;
pub mod pipeline;
pub mod relevance;
pub mod span;
pub mod spanqa;
pub mod textproc;

pub use corpus::{AnnotationPair, Corpus, DatasetSplit, Label, LabeledSentence, SplitSpec};
pub use evalx::{
    CascadeTally, ConfusionCounts, FoldAssignment, MatchCriterion, MultiPairRule, OutcomeCategory,
    PrfScores,
};
pub use nerstage::{DrugLexicon, DrugMention, DrugRecognizer};
pub use pipeline::{PipelineConfig, RunReport, SentenceTrace, TrainedBundle};
pub use relevance::{RelevanceEnsemble, RelevanceModel};
pub use span::Span;
pub use spanqa::{QaEnsemble, QaModel, QaSequence, SpanDistribution, SpanPrediction};
pub use textproc::{Token, TokenizedText, Vocabulary};
