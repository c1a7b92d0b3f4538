use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ProtocolError;
use crate::domain::{normalize_text, CodebookEntry};

/// Outcome notes from a tolerant parse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub recovered: bool,
    pub messages: Vec<String>,
}

/// Topic fields as they appear in a model response, before grounding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTopic {
    pub topic_name: String,
    pub clues: Vec<String>,
    pub reasoning: String,
}

fn strip_markers(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '#' | '*' | '_' | '>'))
}

fn strip_decoration(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '#' | '[' | ']' | '"' | '\u{201c}' | '\u{201d}'))
}

/// If the line is `<label>[ n]: rest` (case-insensitive, markdown tolerant) returns `rest`.
fn labelled<'a>(line: &'a str, labels: &[&str]) -> Option<&'a str> {
    let body = strip_markers(line);
    let lower = body.to_ascii_lowercase();
    for label in labels {
        if !lower.starts_with(label) {
            continue;
        }
        let mut rest = &body[label.len()..];
        // Allow "(max 200 words)", a topic number, or closing emphasis before the colon.
        if let Some(stripped) = rest.trim_start().strip_prefix('(') {
            match stripped.find(')') {
                Some(close) => rest = &stripped[close + 1..],
                None => continue,
            }
        }
        let rest = rest.trim_start_matches(|c: char| c == ' ' || c == '*' || c == '_' || c.is_ascii_digit());
        if let Some(after) = rest.strip_prefix(':') {
            return Some(after.trim_start_matches(['*', '_']));
        }
    }
    None
}

fn topic_header(line: &str) -> Option<&str> {
    labelled(line, &["identify topic", "identified topic", "topic"])
}

fn bullet_body(line: &str) -> (&str, bool) {
    let t = line.trim();
    for marker in ["- ", "* ", "\u{2022} ", "\u{2022}", "\u{2013} "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return (rest.trim(), true);
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && digits < t.len() {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return (r.trim(), true);
        }
    }
    (t, false)
}

/// Quoted segments in a line: straight `"..."` and curly quote pairs.
fn quoted_segments(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < line.len() {
        let rest = &line[i..];
        let Some((open_rel, open)) = rest.char_indices().find(|(_, c)| *c == '"' || *c == '\u{201c}') else {
            break;
        };
        let start = i + open_rel + open.len_utf8();
        let close_chars: &[char] = if open == '"' { &['"'] } else { &['\u{201d}', '"'] };
        match line[start..].find(close_chars) {
            Some(close_rel) => {
                let seg = line[start..start + close_rel].trim();
                if !seg.is_empty() {
                    out.push(seg);
                }
                let close_len = line[start + close_rel..].chars().next().map_or(1, char::len_utf8);
                i = start + close_rel + close_len;
            }
            None => break,
        }
    }
    out
}

/// Splits a clue body into individual quotes. Each returned quote is a
/// substring of `body`.
pub fn split_quotes(body: &str) -> Vec<String> {
    let mut quotes = Vec::new();
    for line in body.lines() {
        let (content, _) = bullet_body(line);
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let segments = quoted_segments(content);
        if segments.is_empty() {
            let bare = strip_decoration(content);
            if !bare.is_empty() && bare.chars().any(char::is_alphanumeric) {
                quotes.push(bare.to_owned());
            }
        } else {
            quotes.extend(segments.into_iter().map(str::to_owned));
        }
    }
    quotes
}

enum Section {
    None,
    Clues,
    Reasoning,
}

/// Splits an identification-style response into topic blocks.
pub fn parse_topic_blocks(text: &str) -> Result<(Vec<RawTopic>, ParseDiagnostics), ProtocolError> {
    struct Block<'a> {
        name: &'a str,
        clues: Vec<&'a str>,
        reasoning: Vec<&'a str>,
        saw_clues: bool,
        saw_reasoning: bool,
    }
    let mut blocks: Vec<Block> = Vec::new();
    let mut section = Section::None;
    for line in text.lines() {
        if let Some(name) = topic_header(line) {
            blocks.push(Block {
                name: strip_decoration(name),
                clues: Vec::new(),
                reasoning: Vec::new(),
                saw_clues: false,
                saw_reasoning: false,
            });
            section = Section::None;
            continue;
        }
        let Some(block) = blocks.last_mut() else { continue };
        if let Some(rest) = labelled(line, &["clues", "clue"]) {
            block.saw_clues = true;
            block.clues.push(rest);
            section = Section::Clues;
        } else if let Some(rest) = labelled(line, &["reasoning"]) {
            block.saw_reasoning = true;
            block.reasoning.push(rest);
            section = Section::Reasoning;
        } else {
            match section {
                Section::Clues => block.clues.push(line),
                Section::Reasoning => block.reasoning.push(line),
                Section::None => {}
            }
        }
    }

    let mut diagnostics = ParseDiagnostics::default();
    if blocks.is_empty() {
        diagnostics.messages.push("no `Topic:` or `Identify topic:` header found".into());
        return Err(ProtocolError::NoBlocksFound(diagnostics));
    }
    let mut topics = Vec::new();
    for (i, block) in blocks.into_iter().enumerate() {
        let clues = split_quotes(&block.clues.join("\n"));
        let reasoning = block
            .reasoning
            .iter()
            .map(|l| l.trim())
            .collect::<Vec<_>>()
            .join("\n")
            .trim()
            .to_owned();
        let problem = if block.name.is_empty() {
            Some("empty topic name")
        } else if !block.saw_clues || clues.is_empty() {
            Some("no clues section")
        } else if !block.saw_reasoning || reasoning.is_empty() {
            Some("no reasoning section")
        } else {
            None
        };
        match problem {
            Some(p) => diagnostics
                .messages
                .push(format!("block {} (`{}`) dropped: {p}", i + 1, block.name)),
            None => topics.push(RawTopic {
                topic_name: block.name.to_owned(),
                clues,
                reasoning,
            }),
        }
    }
    if topics.is_empty() {
        return Err(ProtocolError::NoBlocksFound(diagnostics));
    }
    diagnostics.recovered = true;
    Ok((topics, diagnostics))
}

/// Splits a `### Topic: body` response into a map keyed by normalized topic name.
pub fn parse_topic_keyed_map(text: &str) -> Result<IndexMap<String, String>, ProtocolError> {
    let lines: Vec<&str> = text.lines().collect();
    let is_separator = |l: &str| {
        let t = l.trim_start();
        t.starts_with("###") || labelled(l, &["topic"]).is_some()
    };
    let has_separators = lines.iter().any(|l| is_separator(l));
    let starts_entry = |l: &str| {
        if has_separators {
            return is_separator(l);
        }
        let (content, bullet) = bullet_body(l);
        if bullet {
            return false;
        }
        match content.find(':') {
            Some(at) => {
                let name = strip_decoration(&content[..at]);
                !name.is_empty() && name.split_whitespace().count() <= 12 && !name.contains('"')
            }
            None => false,
        }
    };

    let mut segments: Vec<Vec<&str>> = Vec::new();
    for line in &lines {
        if starts_entry(line) {
            segments.push(vec![line]);
        } else if let Some(seg) = segments.last_mut() {
            seg.push(line);
        }
    }

    let mut map: IndexMap<String, String> = IndexMap::new();
    for seg in segments {
        let mut rest = seg.iter().copied();
        let mut head = "";
        for line in rest.by_ref() {
            let mut h = line.trim_start().trim_start_matches('#');
            if let Some(after) = labelled(h, &["topic"]) {
                h = after;
            }
            let h = strip_markers(h);
            if !h.trim().is_empty() {
                head = h;
                break;
            }
        }
        let (name, first_body) = match head.find(':') {
            Some(at) => (strip_decoration(&head[..at]), head[at + 1..].trim()),
            None => (strip_decoration(head), ""),
        };
        let key = normalize_text(name);
        if key.is_empty() {
            continue;
        }
        let mut body_lines: Vec<&str> = Vec::new();
        if !first_body.is_empty() {
            body_lines.push(first_body);
        }
        body_lines.extend(rest);
        let body = body_lines.join("\n").trim().to_owned();
        match map.get_mut(&key) {
            Some(existing) => {
                if !body.is_empty() {
                    if !existing.is_empty() {
                        existing.push('\n');
                    }
                    existing.push_str(&body);
                }
            }
            None => {
                map.insert(key, body);
            }
        }
    }
    if map.is_empty() {
        return Err(ProtocolError::NoEntriesFound);
    }
    Ok(map)
}

/// Trimmed content between the first `<tag>` and the next `</tag>`, case-insensitively.
pub fn extract_tagged(text: &str, tag: &str) -> Result<String, ProtocolError> {
    let lower = text.to_ascii_lowercase();
    let tag_lower = tag.to_ascii_lowercase();
    let open = format!("<{tag_lower}>");
    let close = format!("</{tag_lower}>");
    let Some(start) = lower.find(&open) else {
        return Err(ProtocolError::TagMissing(tag.to_owned()));
    };
    let content_start = start + open.len();
    match lower[content_start..].find(&close) {
        Some(rel) => Ok(text[content_start..content_start + rel].trim().to_owned()),
        None => Err(ProtocolError::TagUnclosed(tag.to_owned())),
    }
}

fn first_json_value(text: &str) -> Option<Value> {
    for (at, c) in text.char_indices() {
        if c != '[' && c != '{' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[at..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if value.is_array() || value.is_object() {
                return Some(value);
            }
        }
    }
    None
}

fn string_field(obj: &serde_json::Map<String, Value>, index: usize, field: &str) -> Result<String, ProtocolError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ProtocolError::SchemaError {
            index,
            field: field.into(),
            problem: "must be a string".into(),
        }),
        None => Err(ProtocolError::SchemaError {
            index,
            field: field.into(),
            problem: "is missing".into(),
        }),
    }
}

fn string_list(obj: &serde_json::Map<String, Value>, index: usize, field: &str, required: bool) -> Result<Vec<String>, ProtocolError> {
    let bad = |problem: &str| ProtocolError::SchemaError {
        index,
        field: field.into(),
        problem: problem.into(),
    };
    match obj.get(field) {
        None | Some(Value::Null) if !required => Ok(Vec::new()),
        None => Err(bad("is missing")),
        Some(Value::String(s)) => Ok(vec![s.clone()]),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| bad("must contain only strings")))
            .collect(),
        Some(_) => Err(bad("must be a list of strings")),
    }
}

/// Finds the first JSON array or object in `text` and reads codebook entries from it.
pub fn parse_codebook_json(text: &str) -> Result<Vec<CodebookEntry>, ProtocolError> {
    let value = first_json_value(text).ok_or(ProtocolError::JsonNotFound)?;
    let items = match value {
        Value::Array(items) => items,
        Value::Object(obj) => {
            if obj.contains_key("code_name") {
                vec![Value::Object(obj)]
            } else if let Some(items) = obj.values().find_map(|v| v.as_array().cloned()) {
                items
            } else {
                vec![Value::Object(obj)]
            }
        }
        _ => unreachable!("first_json_value yields arrays and objects"),
    };
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            let obj = item.as_object().ok_or_else(|| ProtocolError::SchemaError {
                index,
                field: "code_name".into(),
                problem: "entry is not an object".into(),
            })?;
            Ok(CodebookEntry {
                code_name: string_field(obj, index, "code_name")?,
                description: string_field(obj, index, "description")?,
                original_topics: string_list(obj, index, "original_topics", true)?,
                representative_clues: string_list(obj, index, "representative_clues", false)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationFeedback {
    pub common_issues: String,
    pub suggestions: String,
    pub raw: String,
}

/// Byte offsets (heading start, content start) of a `heading:` line.
fn find_heading(lower: &str, heading: &str) -> Option<(usize, usize)> {
    let mut from = 0;
    while let Some(rel) = lower[from..].find(heading) {
        let at = from + rel;
        let after = at + heading.len();
        let tail = &lower[after..];
        let skipped = tail.len() - tail.trim_start_matches(['*', '_', ' ']).len();
        if tail[skipped..].starts_with(':') {
            let mut content = after + skipped + 1;
            let rest = &lower[content..];
            content += rest.len() - rest.trim_start_matches(['*', '_']).len();
            let line_start = lower[..at].rfind('\n').map_or(0, |p| p + 1);
            return Some((line_start, content));
        }
        from = after;
    }
    None
}

fn clean_section(s: &str) -> String {
    s.trim().trim_end_matches(['*', '_', '#']).trim().to_owned()
}

/// Splits evaluation feedback into its two headed sections, tolerating markdown.
pub fn parse_evaluation_feedback(text: &str) -> EvaluationFeedback {
    let lower = text.to_ascii_lowercase();
    let issues = find_heading(&lower, "common issues");
    let suggestions = find_heading(&lower, "suggestions for improvement");
    let common_issues = match issues {
        Some((_, start)) => {
            let end = suggestions
                .filter(|(line, _)| *line >= start)
                .map_or(text.len(), |(line, _)| line);
            clean_section(&text[start..end])
        }
        None => String::new(),
    };
    let suggestions = match suggestions {
        Some((_, start)) => {
            let end = issues
                .filter(|(line, _)| *line >= start)
                .map_or(text.len(), |(line, _)| line);
            clean_section(&text[start..end])
        }
        None => String::new(),
    };
    EvaluationFeedback {
        common_issues,
        suggestions,
        raw: text.to_owned(),
    }
}
