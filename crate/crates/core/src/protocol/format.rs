use super::RawTopic;
use crate::domain::CodebookEntry;

/// Quotes as a bullet list, one quoted clue per line.
pub fn format_quote_list<S: AsRef<str>>(quotes: &[S]) -> String {
    quotes
        .iter()
        .map(|q| format!("- \"{}\"", q.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders topics in the identification output format.
pub fn format_topic_blocks(topics: &[RawTopic]) -> String {
    topics
        .iter()
        .map(|t| {
            format!(
                "Identify topic: {}\n\nClues (max 200 words):\n{}\n\nReasoning (max 150 words): {}\n",
                t.topic_name,
                format_quote_list(&t.clues),
                t.reasoning
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders `### name: body` entries.
pub fn format_keyed_map<K: AsRef<str>, V: AsRef<str>>(entries: &[(K, V)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("### {}: {}", k.as_ref(), v.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_tagged(tag: &str, content: &str) -> String {
    format!("<{tag}>{content}</{tag}>")
}

pub fn format_codebook_json(entries: &[CodebookEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("codebook entries serialize")
}

impl From<&crate::domain::TopicRecord> for RawTopic {
    fn from(r: &crate::domain::TopicRecord) -> Self {
        RawTopic {
            topic_name: r.topic_name.clone(),
            clues: r.clues.iter().map(|c| c.quote.clone()).collect(),
            reasoning: r.reasoning.clone(),
        }
    }
}
