//! Stage 1: drug mention recognition. A sentence with no mention leaves the
//! cascade here.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledSentence;
use crate::span::Span;
use crate::textproc::tokenize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NerError {
    #[error("drug lexicon is empty: no positive training sentences")]
    EmptyLexicon,
    #[error("lexicon file: {0}")]
    Format(String),
}

const LEXICON_HEADER: &str = "lexicon-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugMention {
    /// Surface as written in the sentence.
    pub surface: String,
    pub char_span: Span,
    pub source: String,
}

/// Anything that maps a sentence to drug mentions.
pub trait DrugRecognizer {
    fn recognize(&self, sentence: &str) -> Vec<DrugMention>;
}

/// Gazetteer of lowercased drug surface forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "LexiconRepr", into = "LexiconRepr")]
pub struct DrugLexicon {
    entries: BTreeSet<String>,
    /// First folded token -> token counts of entries starting with it,
    /// longest first.
    index: HashMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct LexiconRepr {
    entries: Vec<String>,
}

impl From<LexiconRepr> for DrugLexicon {
    fn from(r: LexiconRepr) -> Self {
        DrugLexicon::from_entries(r.entries)
    }
}

impl From<DrugLexicon> for LexiconRepr {
    fn from(l: DrugLexicon) -> Self {
        LexiconRepr {
            entries: l.entries.into_iter().collect(),
        }
    }
}

fn normalize(entry: &str) -> String {
    entry.trim().to_lowercase()
}

impl DrugLexicon {
    /// Blank entries are ignored.
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries: BTreeSet<String> = entries
            .into_iter()
            .map(|e| normalize(e.as_ref()))
            .filter(|e| !e.is_empty())
            .collect();
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for e in &entries {
            let toks: Vec<String> = tokenize(e).folded().collect();
            if let Some(first) = toks.first() {
                let lens = index.entry(first.clone()).or_default();
                if !lens.contains(&toks.len()) {
                    lens.push(toks.len());
                }
            }
        }
        for lens in index.values_mut() {
            lens.sort_unstable_by(|a, b| b.cmp(a));
        }
        DrugLexicon { entries, index }
    }

    /// Gazetteer of the gold drug surfaces in `train`. Never pass test data.
    pub fn build(train: &[LabeledSentence]) -> Result<Self, NerError> {
        let lex = Self::from_entries(
            train
                .iter()
                .flat_map(|s| s.pairs.iter().map(|p| p.drug_surface.as_str())),
        );
        if lex.is_empty() {
            return Err(NerError::EmptyLexicon);
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.entries.contains(&normalize(surface))
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(LEXICON_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NerError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(LEXICON_HEADER) {
            return Err(NerError::Format(format!("missing {LEXICON_HEADER:?} header")));
        }
        let lex = Self::from_entries(lines);
        if lex.is_empty() {
            return Err(NerError::EmptyLexicon);
        }
        Ok(lex)
    }
}

impl DrugRecognizer for DrugLexicon {
    /// Whole-token, case-insensitive, left to right, longest entry first.
    fn recognize(&self, sentence: &str) -> Vec<DrugMention> {
        let tokens = tokenize(sentence).tokens;
        let folded: Vec<String> = tokens.iter().map(|t| t.surface.to_lowercase()).collect();
        let mut mentions = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut matched = None;
            if let Some(lens) = self.index.get(&folded[i]) {
                for &n in lens {
                    if i + n > tokens.len() {
                        continue;
                    }
                    let span = Span::new(tokens[i].char_begin, tokens[i + n - 1].char_end);
                    let surface = &sentence[span.begin..span.end];
                    if self.entries.contains(&surface.to_lowercase()) {
                        matched = Some((n, span, surface));
                        break;
                    }
                }
            }
            match matched {
                Some((n, span, surface)) => {
                    mentions.push(DrugMention {
                        surface: surface.to_string(),
                        char_span: span,
                        source: "lexicon".into(),
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        mentions
    }
}
