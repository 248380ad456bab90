use serde::{Deserialize, Serialize};

/// Half-open `[begin, end)` byte range into a UTF-8 string.
///
/// Offsets always fall on `char` boundaries, so for ASCII text they are
/// identical to character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(begin: usize, end: usize) -> Self {
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.begin)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }

    /// True when the two ranges share at least one position.
    pub fn overlaps(&self, other: &Span) -> bool {
        self.begin < other.end && other.begin < self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.begin <= other.begin && other.end <= self.end
    }

    /// Slice `text` at this span, `None` if out of range or off a char boundary.
    pub fn slice<'a>(&self, text: &'a str) -> Option<&'a str> {
        if self.begin > self.end {
            return None;
        }
        text.get(self.begin..self.end)
    }
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.begin, self.end)
    }
}
