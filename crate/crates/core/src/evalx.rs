//! Precision/recall/F1, span matching, the seven-way cascade outcome
//! lattice with its end-to-end confusion counts, and stratified k-fold
//! assignment.
//!
//! End-to-end accounting treats a correctly eliminated negative as a true
//! positive; there is no true-negative cell:
//!
//! ```text
//! TP = S_neg[-D] + S_neg[+D,-C] + S_pos[+D,+C,+A]
//! FN = S_pos[-D] + S_pos[+D,-C]
//! FP = S_pos[+D,+C,-A] + S_neg[+D,+C,-A]
//! ```

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::span::Span;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("inconsistent trace: {0}")]
    InconsistentTrace(&'static str),
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("k = {k} exceeds the size {size} of class {class}")]
    KTooLarge { k: usize, class: String, size: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    #[serde(rename = "p")]
    pub precision: f64,
    #[serde(rename = "r")]
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero denominators give zero scores.
pub fn prf_scores(c: ConfusionCounts) -> PrfScores {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrfScores {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchCriterion {
    Exact,
    Overlap,
}

/// How a positive sentence with several gold pairs earns `+A`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiPairRule {
    /// At least one recognized gold drug's prediction matches.
    #[default]
    Any,
    /// Every gold pair's drug is recognized and its prediction matches.
    All,
}

pub fn span_match(predicted: Span, gold: &[Span], criterion: MatchCriterion) -> bool {
    gold.iter().any(|g| match criterion {
        MatchCriterion::Exact => *g == predicted,
        MatchCriterion::Overlap => g.overlaps(&predicted),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeCategory {
    #[serde(rename = "S_pos[-D]")]
    PosNoDrug,
    #[serde(rename = "S_pos[+D,-C]")]
    PosFiltered,
    #[serde(rename = "S_pos[+D,+C,+A]")]
    PosAnsweredCorrect,
    #[serde(rename = "S_pos[+D,+C,-A]")]
    PosAnsweredWrong,
    #[serde(rename = "S_neg[-D]")]
    NegNoDrug,
    #[serde(rename = "S_neg[+D,-C]")]
    NegFiltered,
    #[serde(rename = "S_neg[+D,+C,-A]")]
    NegAnswered,
}

impl OutcomeCategory {
    pub const ALL: [OutcomeCategory; 7] = [
        OutcomeCategory::PosNoDrug,
        OutcomeCategory::PosFiltered,
        OutcomeCategory::PosAnsweredCorrect,
        OutcomeCategory::PosAnsweredWrong,
        OutcomeCategory::NegNoDrug,
        OutcomeCategory::NegFiltered,
        OutcomeCategory::NegAnswered,
    ];

    pub fn notation(self) -> &'static str {
        match self {
            OutcomeCategory::PosNoDrug => "S_pos[-D]",
            OutcomeCategory::PosFiltered => "S_pos[+D,-C]",
            OutcomeCategory::PosAnsweredCorrect => "S_pos[+D,+C,+A]",
            OutcomeCategory::PosAnsweredWrong => "S_pos[+D,+C,-A]",
            OutcomeCategory::NegNoDrug => "S_neg[-D]",
            OutcomeCategory::NegFiltered => "S_neg[+D,-C]",
            OutcomeCategory::NegAnswered => "S_neg[+D,+C,-A]",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Maps one sentence's trip through the cascade onto its outcome.
///
/// `passed_classifier` is present iff a drug was found; `answered_correct`
/// is required for positives that reached QA and may be omitted (or be
/// `false`) for negatives, which never have a correct answer.
pub fn categorize_sentence(
    label: Label,
    drug_found: bool,
    passed_classifier: Option<bool>,
    answered_correct: Option<bool>,
) -> Result<OutcomeCategory, EvalError> {
    use OutcomeCategory::*;
    let cat = match (label, drug_found, passed_classifier, answered_correct) {
        (_, false, Some(_), _) => return Err(EvalError::InconsistentTrace("classifier ran without a drug")),
        (_, false, None, Some(_)) => return Err(EvalError::InconsistentTrace("QA ran without a drug")),
        (_, true, None, _) => return Err(EvalError::InconsistentTrace("drug found but classifier skipped")),
        (_, true, Some(false), Some(_)) => {
            return Err(EvalError::InconsistentTrace("QA ran on a filtered sentence"))
        }
        (Label::Positive, false, None, None) => PosNoDrug,
        (Label::Positive, true, Some(false), None) => PosFiltered,
        (Label::Positive, true, Some(true), Some(true)) => PosAnsweredCorrect,
        (Label::Positive, true, Some(true), Some(false)) => PosAnsweredWrong,
        (Label::Positive, true, Some(true), None) => {
            return Err(EvalError::InconsistentTrace("positive reached QA without a verdict"))
        }
        (Label::Negative, false, None, None) => NegNoDrug,
        (Label::Negative, true, Some(false), None) => NegFiltered,
        (Label::Negative, true, Some(true), None | Some(false)) => NegAnswered,
        (Label::Negative, true, Some(true), Some(true)) => {
            return Err(EvalError::InconsistentTrace("negative cannot be answered correctly"))
        }
    };
    Ok(cat)
}

/// Count per outcome category. Serialized keyed by category notation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CascadeTally {
    counts: [u64; 7],
}

impl CascadeTally {
    pub fn from_counts(pairs: &[(OutcomeCategory, u64)]) -> Self {
        let mut t = CascadeTally::default();
        for &(c, n) in pairs {
            t.counts[c.slot()] += n;
        }
        t
    }

    pub fn record(&mut self, c: OutcomeCategory) {
        self.counts[c.slot()] += 1;
    }

    pub fn get(&self, c: OutcomeCategory) -> u64 {
        self.counts[c.slot()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OutcomeCategory, u64)> + '_ {
        OutcomeCategory::ALL.iter().map(move |&c| (c, self.get(c)))
    }
}

impl AddAssign for CascadeTally {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
    }
}

impl Add for CascadeTally {
    type Output = CascadeTally;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl FromIterator<OutcomeCategory> for CascadeTally {
    fn from_iter<T: IntoIterator<Item = OutcomeCategory>>(iter: T) -> Self {
        let mut t = CascadeTally::default();
        for c in iter {
            t.record(c);
        }
        t
    }
}

impl Serialize for CascadeTally {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(7))?;
        for (c, n) in self.iter() {
            map.serialize_entry(c.notation(), &n)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for CascadeTally {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: BTreeMap<String, u64> = BTreeMap::deserialize(d)?;
        let mut t = CascadeTally::default();
        for (k, n) in raw {
            let c = OutcomeCategory::ALL
                .iter()
                .find(|c| c.notation() == k)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown outcome category {k:?}")))?;
            t.counts[c.slot()] = n;
        }
        Ok(t)
    }
}

pub fn cascade_confusion(t: &CascadeTally) -> ConfusionCounts {
    use OutcomeCategory::*;
    ConfusionCounts {
        tp: t.get(NegNoDrug) + t.get(NegFiltered) + t.get(PosAnsweredCorrect),
        fn_: t.get(PosNoDrug) + t.get(PosFiltered),
        fp: t.get(PosAnsweredWrong) + t.get(NegAnswered),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index for each input example.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    /// Indices held out in fold `f`.
    pub fn test_indices(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    /// Indices used for training when fold `f` is held out.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != f).collect()
    }
}

/// Stratified assignment: each class is shuffled and dealt round-robin,
/// continuing the rotation across classes so that fold sizes stay level too.
pub fn stratified_kfold<L>(labels: &[L], k: usize, seed: u64) -> Result<FoldAssignment, EvalError>
where
    L: Ord + Clone + std::fmt::Debug,
{
    if k < 2 {
        return Err(EvalError::KTooSmall(k));
    }
    let mut classes: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(l.clone()).or_default().push(i);
    }
    if let Some((l, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(EvalError::KTooLarge {
            k,
            class: format!("{l:?}"),
            size: members.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in classes.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use OutcomeCategory::*;

    #[test]
    fn prf_examples() {
        let s = prf_scores(ConfusionCounts::new(3, 1, 2));
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 0.6);
        // 2·0.75·0.6 / 1.35
        assert!((s.f1 - 0.9 / 1.35).abs() < 1e-12);
        assert!((s.f1 - 0.6667).abs() < 1e-4);
        let perfect = prf_scores(ConfusionCounts::new(9, 0, 0));
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let zero = prf_scores(ConfusionCounts::default());
        assert_eq!((zero.precision, zero.recall, zero.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn span_match_examples() {
        let gold = [Span::new(32, 36)];
        for c in [MatchCriterion::Exact, MatchCriterion::Overlap] {
            assert!(span_match(Span::new(32, 36), &gold, c));
            assert!(!span_match(Span::new(32, 36), &[], c));
        }
        assert!(!span_match(Span::new(30, 36), &gold, MatchCriterion::Exact));
        assert!(span_match(Span::new(30, 36), &gold, MatchCriterion::Overlap));
        assert!(!span_match(Span::new(28, 32), &gold, MatchCriterion::Overlap));
    }

    #[test]
    fn categorize_examples() {
        assert_eq!(categorize_sentence(Label::Positive, false, None, None), Ok(PosNoDrug));
        assert_eq!(
            categorize_sentence(Label::Positive, true, Some(true), Some(true)),
            Ok(PosAnsweredCorrect)
        );
        assert_eq!(categorize_sentence(Label::Negative, true, Some(true), None), Ok(NegAnswered));
        assert!(matches!(
            categorize_sentence(Label::Positive, false, Some(true), None),
            Err(EvalError::InconsistentTrace(_))
        ));
    }

    #[test]
    fn categorize_lattice_is_total_and_single_valued() {
        let opts = [None, Some(false), Some(true)];
        let mut seen = std::collections::HashMap::new();
        for label in [Label::Positive, Label::Negative] {
            for drug in [false, true] {
                for passed in opts {
                    for answered in opts {
                        let consistent = match (drug, passed, answered) {
                            (false, None, None) => true,
                            (true, Some(false), None) => true,
                            (true, Some(true), Some(a)) => label.is_positive() || !a,
                            (true, Some(true), None) => !label.is_positive(),
                            _ => false,
                        };
                        let got = categorize_sentence(label, drug, passed, answered);
                        assert_eq!(got.is_ok(), consistent, "{label:?} {drug} {passed:?} {answered:?}");
                        if let Ok(c) = got {
                            *seen.entry(c).or_insert(0) += 1;
                            assert_eq!(c.notation().starts_with("S_pos"), label.is_positive());
                        }
                    }
                }
            }
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn cascade_hand_case() {
        let t = CascadeTally::from_counts(&[
            (NegNoDrug, 2),
            (NegFiltered, 1),
            (PosAnsweredCorrect, 3),
            (PosNoDrug, 1),
            (PosFiltered, 1),
            (PosAnsweredWrong, 1),
            (NegAnswered, 1),
        ]);
        let c = cascade_confusion(&t);
        assert_eq!(c, ConfusionCounts::new(6, 2, 2));
        let s = prf_scores(c);
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(c.total(), t.total());
    }

    #[test]
    fn all_correct_tally() {
        let t = CascadeTally::from_counts(&[(NegNoDrug, 4), (NegFiltered, 2), (PosAnsweredCorrect, 5)]);
        let s = prf_scores(cascade_confusion(&t));
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn tally_serde_uses_notation() {
        let t = CascadeTally::from_counts(&[(NegAnswered, 2)]);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"S_neg[+D,+C,-A]\":2"));
        let back: CascadeTally = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn kfold_examples() {
        let labels: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let f = stratified_kfold(&labels, 2, 1).unwrap();
        for fold in 0..2 {
            let idx = f.test_indices(fold);
            assert_eq!(idx.iter().filter(|&&i| labels[i]).count(), 2);
            assert_eq!(idx.iter().filter(|&&i| !labels[i]).count(), 2);
        }
        assert_eq!(stratified_kfold(&labels, 1, 1), Err(EvalError::KTooSmall(1)));
        assert!(matches!(stratified_kfold(&labels, 5, 1), Err(EvalError::KTooLarge { .. })));

        let pos = vec![true; 3976];
        let f = stratified_kfold(&pos, 10, 42).unwrap();
        for fold in 0..10 {
            let n = f.test_indices(fold).len();
            assert!(n == 397 || n == 398, "{n}");
        }
    }

    #[test]
    fn tally_merge_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cats: Vec<OutcomeCategory> = (0..300).map(|_| OutcomeCategory::ALL[rng.gen_range(0..7)]).collect();
        let whole: CascadeTally = cats.iter().copied().collect();
        let parts = cats
            .chunks(37)
            .map(|c| c.iter().copied().collect::<CascadeTally>())
            .fold(CascadeTally::default(), |a, b| a + b);
        assert_eq!(whole, parts);
    }

    proptest! {
        #[test]
        fn prf_matches_formula(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let s = prf_scores(ConfusionCounts::new(tp, fp, fn_));
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            prop_assert!((s.precision - p).abs() <= 1e-12);
            prop_assert!((s.recall - r).abs() <= 1e-12);
            prop_assert!((s.f1 - f).abs() <= 1e-12);
        }

        #[test]
        fn kfold_partition_and_balance(
            labels in proptest::collection::vec(0u8..3, 30..200),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            match stratified_kfold(&labels, k, seed) {
                Ok(f) => {
                    prop_assert_eq!(f.folds.len(), labels.len());
                    prop_assert!(f.folds.iter().all(|&x| x < k));
                    for class in 0u8..3 {
                        let total = labels.iter().filter(|&&l| l == class).count() as f64;
                        for fold in 0..k {
                            let n = f.test_indices(fold).iter().filter(|&&i| labels[i] == class).count() as f64;
                            prop_assert!((n - total / k as f64).abs() <= 1.0);
                        }
                    }
                }
                Err(EvalError::KTooLarge { .. }) => {
                    let mut counts = [0usize; 3];
                    labels.iter().for_each(|&l| counts[l as usize] += 1);
                    prop_assert!(counts.iter().any(|&c| c > 0 && c < k));
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
