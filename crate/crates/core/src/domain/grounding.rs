//! Locating clue quotes in their source transcript.

use serde::{Deserialize, Serialize};

use super::text::{normalize_text, Normalized};
use super::Transcript;

/// Half-open char-offset range into `Transcript::raw_text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clue {
    pub quote: String,
    pub grounded: bool,
    #[serde(default)]
    pub spans: Vec<Span>,
}

impl Clue {
    pub fn ungrounded(quote: impl Into<String>) -> Clue {
        Clue {
            quote: quote.into(),
            grounded: false,
            spans: Vec::new(),
        }
    }
}

/// Splits a quote on `...` / `…` into normalized, non-empty fragments.
pub fn quote_fragments(quote: &str) -> Vec<String> {
    quote
        .replace('\u{2026}', "...")
        .split("...")
        .map(normalize_text)
        .filter(|f| !f.is_empty())
        .collect()
}

/// A transcript's normalized text, reusable across many quotes.
#[derive(Debug, Clone)]
pub struct GroundingIndex {
    normalized: Normalized,
}

impl GroundingIndex {
    pub fn new(transcript: &Transcript) -> Self {
        GroundingIndex {
            normalized: Normalized::new(&transcript.raw_text),
        }
    }

    /// Grounds one quote. A quote without ellipses yields every occurrence; a
    /// fragmented quote yields one span per fragment for the leftmost in-order
    /// chain, or nothing if any fragment is missing.
    pub fn ground(&self, quote: &str) -> Clue {
        let fragments = quote_fragments(quote);
        let hay = &self.normalized.text;
        let spans = match fragments.as_slice() {
            [] => Vec::new(),
            [single] => hay
                .match_indices(single.as_str())
                .map(|(at, m)| self.span(at, at + m.len()))
                .collect(),
            many => {
                let mut spans = Vec::with_capacity(many.len());
                let mut from = 0;
                for frag in many {
                    match hay[from..].find(frag.as_str()) {
                        Some(rel) => {
                            let at = from + rel;
                            spans.push(self.span(at, at + frag.len()));
                            from = at + frag.len();
                        }
                        None => {
                            spans.clear();
                            break;
                        }
                    }
                }
                spans
            }
        };
        Clue {
            quote: quote.to_owned(),
            grounded: !spans.is_empty(),
            spans,
        }
    }

    fn span(&self, start: usize, end: usize) -> Span {
        let (start, end) = self.normalized.source_span(start, end);
        Span { start, end }
    }
}

/// Grounds `quote` against the transcript's raw text. Exact after normalization.
pub fn ground_clue(transcript: &Transcript, quote: &str) -> Clue {
    GroundingIndex::new(transcript).ground(quote)
}
