//! Drug-related adverse effects corpus: record parsing, offset resolution,
//! deduplication, splitting and synthetic fixtures.
//!
//! The positive file holds one annotated pair per line,
//! `id|sentence|AE|AE_begin|AE_end|drug|drug_begin|drug_end`, with offsets
//! counted from the start of the source abstract. The negative file holds
//! `<id> NEG <sentence>` lines.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::span::Span;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("expected 8 pipe-separated fields, found {found}")]
    FieldCount { found: usize },
    #[error("offset field `{field}` is not an integer: {value:?}")]
    OffsetParse { field: &'static str, value: String },
    #[error("malformed record: {0}")]
    Format(String),
    #[error("annotated surface {surface:?} not found in sentence")]
    SurfaceNotFound { surface: String },
    #[error("{path}:{line}: {source}")]
    AtLine {
        path: String,
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("split requests {requested} {class} sentences but only {available} are available")]
    SplitTooLarge {
        class: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// A drug/AE annotation as it appears in the positive file, before its
/// surfaces are located inside the sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAnnotation {
    pub drug_surface: String,
    pub drug_doc_span: Span,
    pub ae_surface: String,
    pub ae_doc_span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationPair {
    pub drug_surface: String,
    pub drug_doc_span: Span,
    pub ae_surface: String,
    pub ae_doc_span: Span,
    pub drug_sent_span: Span,
    pub ae_sent_span: Span,
}

impl AnnotationPair {
    /// True when either document-level offset disagrees with the resolved
    /// sentence-level span.
    pub fn offsets_disagree(&self) -> bool {
        self.drug_doc_span != self.drug_sent_span || self.ae_doc_span != self.ae_sent_span
    }

    fn same_annotation(&self, other: &AnnotationPair) -> bool {
        self.drug_surface == other.drug_surface && self.ae_surface == other.ae_surface
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub doc_id: String,
    pub text: String,
    pub label: Label,
    pub pairs: Vec<AnnotationPair>,
}

impl LabeledSentence {
    pub fn negative(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        LabeledSentence {
            doc_id: doc_id.into(),
            text: text.into(),
            label: Label::Negative,
            pairs: Vec::new(),
        }
    }

    /// Checks the label/pairs agreement and the slice-equality invariant.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.text.is_empty() {
            return Err(format!("{}: empty sentence", self.doc_id));
        }
        match (self.label, self.pairs.is_empty()) {
            (Label::Positive, true) => return Err(format!("{}: positive without pairs", self.doc_id)),
            (Label::Negative, false) => return Err(format!("{}: negative with pairs", self.doc_id)),
            _ => {}
        }
        for pair in &self.pairs {
            for (span, surface) in [
                (pair.drug_sent_span, &pair.drug_surface),
                (pair.ae_sent_span, &pair.ae_surface),
            ] {
                if span.begin >= span.end || span.slice(&self.text) != Some(surface.as_str()) {
                    return Err(format!(
                        "{}: span {} does not slice to {:?}",
                        self.doc_id, span, surface
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Counters gathered while loading the two corpus files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub pos: usize,
    pub neg: usize,
    /// Records folded into an already-seen sentence.
    pub dedup_dropped: usize,
    /// Resolved pairs whose document-level offsets differ from the sentence span.
    pub offset_misses: usize,
    /// Pairs dropped because a surface does not occur in its sentence.
    pub unresolved_pairs: usize,
    /// Negative records whose text is also a positive sentence.
    pub label_conflicts: usize,
}

impl LoadStats {
    pub fn summary_line(&self) -> String {
        format!(
            "pos={} neg={} dedup_dropped={} offset_misses={}",
            self.pos, self.neg, self.dedup_dropped, self.offset_misses
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<LabeledSentence>,
    pub provenance: Vec<PathBuf>,
    pub stats: LoadStats,
}

impl Corpus {
    pub fn positives(&self) -> impl Iterator<Item = &LabeledSentence> {
        self.sentences.iter().filter(|s| s.label.is_positive())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &LabeledSentence> {
        self.sentences.iter().filter(|s| !s.label.is_positive())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Runs every per-sentence check plus text uniqueness.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for s in &self.sentences {
            s.validate()?;
            if !seen.insert(s.text.as_str()) {
                return Err(format!("duplicate sentence text: {:?}", s.text));
            }
        }
        Ok(())
    }
}

fn parse_offset(field: &'static str, value: &str) -> Result<usize> {
    value.trim().parse().map_err(|_| CorpusError::OffsetParse {
        field,
        value: value.to_string(),
    })
}

/// Parses one positive record into `(doc_id, sentence, annotation)`.
pub fn parse_positive_record(line: &str) -> Result<(String, String, RawAnnotation)> {
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 8 {
        return Err(CorpusError::FieldCount { found: fields.len() });
    }
    let ae_begin = parse_offset("AE_begin", fields[3])?;
    let ae_end = parse_offset("AE_end", fields[4])?;
    let drug_begin = parse_offset("drug_begin", fields[6])?;
    let drug_end = parse_offset("drug_end", fields[7])?;
    if fields[1].is_empty() {
        return Err(CorpusError::Format("empty sentence".into()));
    }
    Ok((
        fields[0].to_string(),
        fields[1].to_string(),
        RawAnnotation {
            drug_surface: fields[5].to_string(),
            drug_doc_span: Span::new(drug_begin, drug_end),
            ae_surface: fields[2].to_string(),
            ae_doc_span: Span::new(ae_begin, ae_end),
        },
    ))
}

/// Parses `<id> NEG <sentence>`; everything after the separator whitespace
/// following `NEG` is kept verbatim.
pub fn parse_negative_record(line: &str) -> Result<(String, String)> {
    let missing = || CorpusError::Format(format!("expected `<id> NEG <sentence>`: {line:?}"));
    let line = line.trim_start();
    let (id, rest) = line.split_once(char::is_whitespace).ok_or_else(missing)?;
    let rest = rest.trim_start();
    let sentence = rest.strip_prefix("NEG").ok_or_else(missing)?;
    if !sentence.starts_with(char::is_whitespace) {
        return Err(missing());
    }
    let sentence = sentence.trim_start();
    if sentence.is_empty() {
        return Err(CorpusError::Format("empty sentence".into()));
    }
    Ok((id.to_string(), sentence.to_string()))
}

fn locate(sentence: &str, surface: &str) -> Result<Span> {
    if surface.is_empty() {
        return Err(CorpusError::SurfaceNotFound {
            surface: surface.to_string(),
        });
    }
    sentence
        .find(surface)
        .map(|begin| Span::new(begin, begin + surface.len()))
        .ok_or_else(|| CorpusError::SurfaceNotFound {
            surface: surface.to_string(),
        })
}

/// Locates both surfaces inside the sentence; the first case-sensitive
/// occurrence wins.
pub fn resolve_offsets(sentence: &str, raw: &RawAnnotation) -> Result<AnnotationPair> {
    let drug_sent_span = locate(sentence, &raw.drug_surface)?;
    let ae_sent_span = locate(sentence, &raw.ae_surface)?;
    Ok(AnnotationPair {
        drug_surface: raw.drug_surface.clone(),
        drug_doc_span: raw.drug_doc_span,
        ae_surface: raw.ae_surface.clone(),
        ae_doc_span: raw.ae_doc_span,
        drug_sent_span,
        ae_sent_span,
    })
}

/// Incremental corpus builder shared by the file loader and the synthetic
/// generator.
#[derive(Default)]
struct CorpusBuilder {
    index: HashMap<String, usize>,
    sentences: Vec<LabeledSentence>,
    stats: LoadStats,
}

impl CorpusBuilder {
    fn add_positive(&mut self, doc_id: String, text: String, raw: &RawAnnotation) {
        let resolved = match resolve_offsets(&text, raw) {
            Ok(pair) => Some(pair),
            Err(e) => {
                warn!("{doc_id}: dropping pair: {e}");
                self.stats.unresolved_pairs += 1;
                None
            }
        };
        let slot = match self.index.get(&text) {
            Some(&i) => {
                self.stats.dedup_dropped += 1;
                i
            }
            None => {
                self.index.insert(text.clone(), self.sentences.len());
                self.sentences.push(LabeledSentence {
                    doc_id,
                    text,
                    label: Label::Positive,
                    pairs: Vec::new(),
                });
                self.sentences.len() - 1
            }
        };
        if let Some(pair) = resolved {
            let entry = &mut self.sentences[slot];
            if !entry.pairs.iter().any(|p| p.same_annotation(&pair)) {
                if pair.offsets_disagree() {
                    self.stats.offset_misses += 1;
                }
                entry.pairs.push(pair);
            }
        }
    }

    fn add_negative(&mut self, doc_id: String, text: String) {
        match self.index.get(&text) {
            Some(&i) => {
                self.stats.dedup_dropped += 1;
                if self.sentences[i].label.is_positive() {
                    self.stats.label_conflicts += 1;
                    warn!("{doc_id}: sentence is also annotated positive; keeping positive");
                }
            }
            None => {
                self.index.insert(text.clone(), self.sentences.len());
                self.sentences.push(LabeledSentence::negative(doc_id, text));
            }
        }
    }

    fn finish(mut self, provenance: Vec<PathBuf>) -> Corpus {
        // positives whose every pair failed to resolve cannot satisfy the
        // label invariant
        self.sentences
            .retain(|s| !(s.label.is_positive() && s.pairs.is_empty()));
        self.stats.pos = self.sentences.iter().filter(|s| s.label.is_positive()).count();
        self.stats.neg = self.sentences.len() - self.stats.pos;
        Corpus {
            sentences: self.sentences,
            provenance,
            stats: self.stats,
        }
    }
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn at_line(path: &Path, line: usize, e: CorpusError) -> CorpusError {
    CorpusError::AtLine {
        path: path.display().to_string(),
        line,
        source: Box::new(e),
    }
}

/// Builds a corpus from in-memory file contents. Blank lines are skipped.
pub fn corpus_from_str(pos: &str, neg: &str) -> Result<Corpus> {
    corpus_from_sources(pos, Path::new("<pos>"), neg, Path::new("<neg>"), Vec::new())
}

fn corpus_from_sources(
    pos: &str,
    pos_path: &Path,
    neg: &str,
    neg_path: &Path,
    provenance: Vec<PathBuf>,
) -> Result<Corpus> {
    let mut builder = CorpusBuilder::default();
    for (n, line) in pos.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, text, raw) = parse_positive_record(line).map_err(|e| at_line(pos_path, n + 1, e))?;
        builder.add_positive(id, text, &raw);
    }
    for (n, line) in neg.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = parse_negative_record(line).map_err(|e| at_line(neg_path, n + 1, e))?;
        builder.add_negative(id, text);
    }
    Ok(builder.finish(provenance))
}

pub fn load_corpus(pos_path: &Path, neg_path: &Path) -> Result<Corpus> {
    let pos = read_lines(pos_path)?;
    let neg = read_lines(neg_path)?;
    corpus_from_sources(
        &pos,
        pos_path,
        &neg,
        neg_path,
        vec![pos_path.to_path_buf(), neg_path.to_path_buf()],
    )
}

/// Re-emits sentences in the two on-disk record formats, one positive line
/// per pair.
pub fn write_records(sentences: &[LabeledSentence]) -> (String, String) {
    let mut pos = String::new();
    let mut neg = String::new();
    for s in sentences {
        match s.label {
            Label::Positive => {
                for p in &s.pairs {
                    pos.push_str(&format!(
                        "{}|{}|{}|{}|{}|{}|{}|{}\n",
                        s.doc_id,
                        s.text,
                        p.ae_surface,
                        p.ae_doc_span.begin,
                        p.ae_doc_span.end,
                        p.drug_surface,
                        p.drug_doc_span.begin,
                        p.drug_doc_span.end
                    ));
                }
            }
            Label::Negative => neg.push_str(&format!("{} NEG {}\n", s.doc_id, s.text)),
        }
    }
    (pos, neg)
}

/// How to carve a held-out test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Hold out `round(n * fraction)` sentences; the rest train.
    TestFraction(f64),
    /// Hold out exactly this many sentences; the rest train.
    TestCount(usize),
    /// Sample exact per-class counts; sentences not drawn are left out.
    Counts {
        train_pos: usize,
        train_neg: usize,
        test_pos: usize,
        test_neg: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub seed: u64,
}

fn shuffled(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v
}

/// Deterministic split of `sentences`. Both halves keep the input order.
pub fn make_splits(sentences: &[LabeledSentence], spec: SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sentences.len();
    let (mut train_idx, mut test_idx): (Vec<usize>, Vec<usize>) = match spec {
        SplitSpec::TestFraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(CorpusError::InvalidFraction(f));
            }
            let test_n = (n as f64 * f).round() as usize;
            let all: Vec<usize> = (0..n).collect();
            let order = shuffled(&all, &mut rng);
            (order[test_n..].to_vec(), order[..test_n].to_vec())
        }
        SplitSpec::TestCount(test_n) => {
            if test_n > n {
                return Err(CorpusError::SplitTooLarge {
                    class: "total",
                    requested: test_n,
                    available: n,
                });
            }
            let all: Vec<usize> = (0..n).collect();
            let order = shuffled(&all, &mut rng);
            (order[test_n..].to_vec(), order[..test_n].to_vec())
        }
        SplitSpec::Counts {
            train_pos,
            train_neg,
            test_pos,
            test_neg,
        } => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (label, class, n_train, n_test) in [
                (Label::Positive, "positive", train_pos, test_pos),
                (Label::Negative, "negative", train_neg, test_neg),
            ] {
                let members: Vec<usize> = (0..n).filter(|&i| sentences[i].label == label).collect();
                if n_train + n_test > members.len() {
                    return Err(CorpusError::SplitTooLarge {
                        class,
                        requested: n_train + n_test,
                        available: members.len(),
                    });
                }
                let order = shuffled(&members, &mut rng);
                test.extend_from_slice(&order[..n_test]);
                train.extend_from_slice(&order[n_test..n_test + n_train]);
            }
            (train, test)
        }
    };
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| sentences[i].clone()).collect(),
        test: test_idx.iter().map(|&i| sentences[i].clone()).collect(),
        seed,
    })
}

const SYNTH_DRUGS: &[&str] = &[
    "ibuprofen",
    "prednisone",
    "methotrexate",
    "warfarin",
    "amiodarone",
    "lithium",
    "cisplatin",
    "vancomycin",
    "carbamazepine",
    "clozapine",
    "isoniazid",
    "tamoxifen",
    "heparin",
    "digoxin",
    "phenytoin",
    "allopurinol",
    "rifampicin",
    "cyclosporine",
    "metformin",
    "valproate",
];

const SYNTH_AES: &[&str] = &[
    "rash",
    "hepatotoxicity",
    "nausea",
    "agranulocytosis",
    "neutropenia",
    "hyperkalemia",
    "seizures",
    "acute renal failure",
    "interstitial pneumonitis",
    "toxic epidermal necrolysis",
    "pruritic bullous eruption",
    "lactic acidosis",
    "thrombocytopenia",
    "pancreatitis",
    "QT prolongation",
    "hypothyroidism",
    "myopathy",
    "ototoxicity",
    "peripheral neuropathy",
    "angioedema",
];

// {d} drug, {a} adverse event; a leading placeholder is capitalized.
const POS_TEMPLATES: &[&str] = &[
    "The patient developed {a} after treatment with {d}.",
    "{d} induced {a} in a 54-year-old woman.",
    "We report a case of {a} associated with {d} therapy.",
    "{a} occurred during {d} administration.",
    "A 14-year-old girl developed {a} while on {d}.",
    "Severe {a} was attributed to {d}.",
    "Treatment with {d} was complicated by {a}.",
    "{a} resolved after withdrawal of {d}.",
];

const POS_TWO_PAIR: &str = "Both {a} after {d} and {b} after {e} were documented.";

const NEG_DRUG_TEMPLATES: &[&str] = &[
    "The patient received {d} for {n} weeks without complications.",
    "{d} levels were monitored every {n} days.",
    "Dosing of {d} was adjusted to {n} mg daily.",
    "Therapy with {d} was continued for {n} months.",
];

const NEG_PLAIN_TEMPLATES: &[&str] = &[
    "No thrombus was observed on echocardiography in {n} cases.",
    "Blood pressure was {n}/80 mmHg on admission.",
    "Renal function remained stable during {n} months of follow-up.",
    "A total of {n} patients were enrolled in the cohort.",
    "The biopsy specimen from case {n} showed no abnormality.",
];

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in slots {
        out = out.replace(key, value);
    }
    if template.starts_with('{') {
        out = capitalize_first(&out);
    }
    out
}

/// Case-sensitive surface used in the sentence for a slot value, accounting
/// for sentence-initial capitalization.
fn surface_in(text: &str, value: &str) -> String {
    if text.contains(value) {
        value.to_string()
    } else {
        capitalize_first(value)
    }
}

/// Templated corpus with known drug/AE spans, deterministic by seed.
///
/// Roughly one positive in eight carries two pairs. A share of the negatives
/// mention a drug so that the relevance stage has work to do.
pub fn generate_synthetic_corpus(n_pos: usize, n_neg: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut builder = CorpusBuilder::default();
    let mut seen: HashSet<String> = HashSet::new();

    let mut i = 0;
    while i < n_pos {
        let attempt_suffix = |text: String, attempts: usize| {
            if attempts > 64 {
                text.replacen('.', &format!(" in case {i}."), 1)
            } else {
                text
            }
        };
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (text, pairs) = if rng.gen_range(0..8) == 0 {
                let d = SYNTH_DRUGS[rng.gen_range(0..SYNTH_DRUGS.len())];
                let mut e = d;
                while e == d {
                    e = SYNTH_DRUGS[rng.gen_range(0..SYNTH_DRUGS.len())];
                }
                let a = SYNTH_AES[rng.gen_range(0..SYNTH_AES.len())];
                let mut b = a;
                while b == a {
                    b = SYNTH_AES[rng.gen_range(0..SYNTH_AES.len())];
                }
                let text = fill(POS_TWO_PAIR, &[("{d}", d), ("{e}", e), ("{a}", a), ("{b}", b)]);
                (text, vec![(d, a), (e, b)])
            } else {
                let t = POS_TEMPLATES[rng.gen_range(0..POS_TEMPLATES.len())];
                let d = SYNTH_DRUGS[rng.gen_range(0..SYNTH_DRUGS.len())];
                let a = SYNTH_AES[rng.gen_range(0..SYNTH_AES.len())];
                (fill(t, &[("{d}", d), ("{a}", a)]), vec![(d, a)])
            };
            let text = attempt_suffix(text, attempts);
            if seen.insert(text.clone()) {
                let doc_id = format!("syn-pos-{i}");
                for (d, a) in pairs {
                    let drug_surface = surface_in(&text, d);
                    let ae_surface = surface_in(&text, a);
                    // synthetic sentences are their own documents
                    let drug_doc_span = locate(&text, &drug_surface).expect("slot present");
                    let ae_doc_span = locate(&text, &ae_surface).expect("slot present");
                    let raw = RawAnnotation {
                        drug_surface,
                        drug_doc_span,
                        ae_surface,
                        ae_doc_span,
                    };
                    builder.add_positive(doc_id.clone(), text.clone(), &raw);
                }
                break;
            }
        }
        i += 1;
    }

    let mut j = 0;
    while j < n_neg {
        loop {
            let number = rng.gen_range(2..1000).to_string();
            let text = if rng.gen_bool(0.5) {
                let t = NEG_DRUG_TEMPLATES[rng.gen_range(0..NEG_DRUG_TEMPLATES.len())];
                let d = SYNTH_DRUGS[rng.gen_range(0..SYNTH_DRUGS.len())];
                fill(t, &[("{d}", d), ("{n}", &number)])
            } else {
                let t = NEG_PLAIN_TEMPLATES[rng.gen_range(0..NEG_PLAIN_TEMPLATES.len())];
                fill(t, &[("{n}", &number)])
            };
            if seen.insert(text.clone()) {
                builder.add_negative(format!("syn-neg-{j}"), text);
                break;
            }
        }
        j += 1;
    }
    builder.finish(Vec::new())
}

/// Drug and AE word lists backing the synthetic generator.
pub fn synthetic_vocabulary() -> (&'static [&'static str], &'static [&'static str]) {
    (SYNTH_DRUGS, SYNTH_AES)
}
