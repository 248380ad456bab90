//! Tokenization with offset maps, vocabulary, and char/token span
//! conversion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::span::Span;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("span {0} overlaps no token")]
    NoTokenOverlap(Span),
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub char_begin: usize,
    pub char_end: usize,
}

impl Token {
    pub fn span(&self) -> Span {
        Span::new(self.char_begin, self.char_end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub tokens: Vec<Token>,
    pub source: String,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Lowercased surfaces, the form used for vocabulary lookup.
    pub fn folded(&self) -> impl Iterator<Item = String> + '_ {
        self.tokens.iter().map(|t| t.surface.to_lowercase())
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2013}' | '\u{2014}' | '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}' | '\u{2026}'
        )
}

/// Separators split inside a word as well as at its edges, so that
/// compounds such as `methotrexate-induced` expose the drug as a token.
fn is_inner_separator(c: char) -> bool {
    matches!(c, '-' | '/')
}

fn push(tokens: &mut Vec<Token>, text: &str, begin: usize, end: usize) {
    tokens.push(Token {
        surface: text[begin..end].to_string(),
        char_begin: begin,
        char_end: end,
    });
}

/// Emits `text[start..end]` with each edge punctuation character as its own token.
fn push_piece(tokens: &mut Vec<Token>, text: &str, start: usize, end: usize) {
    let piece = &text[start..end];
    let core_begin = piece.find(|c| !is_punct(c));
    let Some(core_begin) = core_begin else {
        for (i, c) in piece.char_indices() {
            push(tokens, text, start + i, start + i + c.len_utf8());
        }
        return;
    };
    let (last_i, last_c) = piece.char_indices().rev().find(|&(_, c)| !is_punct(c)).unwrap();
    let core_end = last_i + last_c.len_utf8();
    for (i, c) in piece[..core_begin].char_indices() {
        push(tokens, text, start + i, start + i + c.len_utf8());
    }
    push(tokens, text, start + core_begin, start + core_end);
    for (i, c) in piece[core_end..].char_indices() {
        push(tokens, text, start + core_end + i, start + core_end + i + c.len_utf8());
    }
}

/// Whitespace split, then each leading or trailing punctuation character
/// becomes its own token; `-` and `/` are also split out inside words.
pub fn tokenize(text: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    let mut chunk_start: Option<usize> = None;
    let mut chunks = Vec::new();
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), chunk_start) {
            (true, Some(s)) => {
                chunks.push((s, i));
                chunk_start = None;
            }
            (false, None) => chunk_start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = chunk_start {
        chunks.push((s, text.len()));
    }

    for (start, end) in chunks {
        let mut piece_start = start;
        for (i, c) in text[start..end].char_indices() {
            let i = start + i;
            if is_inner_separator(c) {
                push_piece(&mut tokens, text, piece_start, i);
                push(&mut tokens, text, i, i + c.len_utf8());
                piece_start = i + c.len_utf8();
            }
        }
        push_piece(&mut tokens, text, piece_start, end);
    }
    TokenizedText {
        tokens,
        source: text.to_string(),
    }
}

/// Smallest inclusive token range covering every token that overlaps `span`.
pub fn char_span_to_token_span(text: &TokenizedText, span: Span) -> Result<(usize, usize), TextError> {
    let mut hits = text
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.span().overlaps(&span))
        .map(|(i, _)| i);
    let first = hits.next().ok_or(TextError::NoTokenOverlap(span))?;
    let last = hits.last().unwrap_or(first);
    Ok((first, last))
}

pub fn token_span_to_char_span(text: &TokenizedText, tok_begin: usize, tok_end: usize) -> Result<Span, TextError> {
    let len = text.tokens.len();
    if tok_end >= len {
        return Err(TextError::IndexOutOfRange { index: tok_end, len });
    }
    if tok_begin > tok_end {
        return Err(TextError::IndexOutOfRange { index: tok_begin, len });
    }
    Ok(Span::new(text.tokens[tok_begin].char_begin, text.tokens[tok_end].char_end))
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<sep>"];
const VOCAB_HEADER: &str = "vocab-v1";

/// Case-folded token to dense id map. Ids 0..=3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_count: usize,
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let ids = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary {
            ids,
            tokens: r.tokens,
            min_count: r.min_count,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            min_count: v.min_count,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Counts lowercased tokens over `texts`; tokens seen at least
    /// `min_count` times get ids in lexicographic order after the reserved ids.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let min_count = min_count.max(1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text).folded() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(counts.into_iter().filter(|(_, c)| *c >= min_count).map(|(t, _)| t));
        VocabRepr { min_count, tokens }.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(&token.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &TokenizedText) -> Vec<u32> {
        text.tokens.iter().map(|t| self.id(&t.surface)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            other => {
                return Err(TextError::VocabFormat(format!(
                    "expected header {VOCAB_HEADER:?}, found {other:?}"
                )))
            }
        }
        let mut tokens = Vec::new();
        for (n, line) in lines.enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| TextError::VocabFormat(format!("line {}: missing tab", n + 2)))?;
            let id: usize = id
                .parse()
                .map_err(|_| TextError::VocabFormat(format!("line {}: bad id {id:?}", n + 2)))?;
            if id != tokens.len() {
                return Err(TextError::VocabFormat(format!("line {}: ids must be dense", n + 2)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TextError::VocabFormat("reserved ids missing".into()));
        }
        Ok(VocabRepr { min_count: 1, tokens }.into())
    }
}
