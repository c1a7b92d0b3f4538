//! Text normalization used for clue grounding, matching and name equality.
//!
//! Normalized text is lowercase, has Unicode punctuation replaced by word
//! separators (apostrophes between two alphanumerics survive as `'`), and has
//! every whitespace run collapsed to one space with no leading or trailing
//! space.

use unicode_general_category::{get_general_category, GeneralCategory};

/// Normalizes `s` for matching. Idempotent.
pub fn normalize_text(s: &str) -> String {
    Normalized::new(s).text
}

/// Whitespace tokens of the normalized text.
pub fn word_count(s: &str) -> usize {
    normalize_text(s).split(' ').filter(|w| !w.is_empty()).count()
}

/// Distinct tokens of the normalized text.
pub fn token_set(s: &str) -> std::collections::BTreeSet<String> {
    normalize_text(s)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Normalized-string equality, used for topic names and code names.
pub fn same_name(a: &str, b: &str) -> bool {
    normalize_text(a) == normalize_text(b)
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{02BC}')
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Normalized text plus, for every byte of it, the char index in the source
/// that produced it.
#[derive(Debug, Clone)]
pub(crate) struct Normalized {
    pub text: String,
    origin: Vec<usize>,
}

impl Normalized {
    pub fn new(s: &str) -> Self {
        let chars: Vec<char> = s.chars().collect();
        let mut text = String::with_capacity(s.len());
        let mut origin = Vec::with_capacity(s.len());
        let mut pending_sep: Option<usize> = None;

        let push = |text: &mut String, origin: &mut Vec<usize>, c: char, at: usize| {
            let before = text.len();
            text.push(c);
            origin.extend(std::iter::repeat(at).take(text.len() - before));
        };

        for (i, &c) in chars.iter().enumerate() {
            let separator = if c.is_whitespace() {
                true
            } else if is_apostrophe(c) {
                let prev_alnum = pending_sep.is_none()
                    && text.chars().next_back().is_some_and(char::is_alphanumeric);
                let next_alnum = chars
                    .get(i + 1)
                    .and_then(|n| n.to_lowercase().next())
                    .is_some_and(char::is_alphanumeric);
                !(prev_alnum && next_alnum)
            } else {
                is_punctuation(c)
            };

            if separator {
                pending_sep.get_or_insert(i);
                continue;
            }
            if let Some(at) = pending_sep.take() {
                if !text.is_empty() {
                    push(&mut text, &mut origin, ' ', at);
                }
            }
            if is_apostrophe(c) {
                push(&mut text, &mut origin, '\'', i);
            } else {
                for lc in c.to_lowercase() {
                    push(&mut text, &mut origin, lc, i);
                }
            }
        }

        Normalized { text, origin }
    }

    /// Maps a byte range of the normalized text back to a char range of the source.
    pub fn source_span(&self, start: usize, end: usize) -> (usize, usize) {
        debug_assert!(start < end && end <= self.origin.len());
        (self.origin[start], self.origin[end - 1] + 1)
    }
}
