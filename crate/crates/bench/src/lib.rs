//! Fixtures shared by the benchmarks.

use ade_core::corpus::{generate_synthetic_corpus, LabeledSentence};
use ade_core::spanqa::{build_qa_sequence, QaSequence};
use ade_core::textproc::Vocabulary;

pub struct QaFixture {
    pub vocab: Vocabulary,
    pub sentences: Vec<LabeledSentence>,
    pub sequences: Vec<QaSequence>,
}

/// Synthetic positives with one drug question each.
pub fn qa_fixture(n: usize, seed: u64) -> QaFixture {
    let corpus = generate_synthetic_corpus(n, 0, seed);
    let vocab = Vocabulary::build(corpus.sentences.iter().map(|s| s.text.as_str()), 1);
    let sequences = corpus
        .positives()
        .map(|s| {
            let p = &s.pairs[0];
            build_qa_sequence(&p.drug_surface, &s.text, &vocab, Some(p.ae_sent_span)).expect("synthetic pair maps")
        })
        .collect();
    QaFixture {
        vocab,
        sentences: corpus.sentences,
        sequences,
    }
}
