use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::text::normalize_text;
use super::DomainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Interviewer,
    Respondent,
    Other,
}

impl Speaker {
    /// Maps a speaker label (`Interviewer`, `Doctor`, `Respondent`, `Patient`; any case) to a role.
    pub fn from_label(label: &str) -> Speaker {
        match label.trim().to_ascii_lowercase().as_str() {
            "interviewer" | "doctor" => Speaker::Interviewer,
            "respondent" | "patient" => Speaker::Respondent,
            _ => Speaker::Other,
        }
    }

    fn prefix(self) -> Option<&'static str> {
        match self {
            Speaker::Interviewer => Some("Interviewer"),
            Speaker::Respondent => Some("Respondent"),
            Speaker::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptFormat {
    PlainText,
    SpeakerTaggedText,
    StructuredJson,
}

impl TranscriptFormat {
    /// Guesses the format: `.json` files are structured, text with at least one
    /// recognised speaker tag is speaker-tagged, anything else is plain text.
    pub fn detect(path: Option<&Path>, content: &str) -> TranscriptFormat {
        let is_json_ext = path
            .and_then(|p| p.extension())
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json_ext || content.trim_start().starts_with('{') {
            TranscriptFormat::StructuredJson
        } else if content.lines().any(|l| split_speaker_tag(l).is_some()) {
            TranscriptFormat::SpeakerTaggedText
        } else {
            TranscriptFormat::PlainText
        }
    }
}

impl std::str::FromStr for TranscriptFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain_text" | "plain" | "text" => Ok(TranscriptFormat::PlainText),
            "speaker_tagged_text" | "speaker_tagged" | "tagged" => {
                Ok(TranscriptFormat::SpeakerTaggedText)
            }
            "structured_json" | "json" => Ok(TranscriptFormat::StructuredJson),
            other => Err(format!("unknown transcript format `{other}`")),
        }
    }
}

/// An interview transcript. For tagged and structured inputs `raw_text` is the
/// turn texts joined by newlines (speaker labels are not part of it), so clue
/// offsets never land inside a label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub title: String,
    pub turns: Vec<Turn>,
    pub raw_text: String,
    pub source_path: String,
}

impl Transcript {
    pub fn from_plain_text(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        source_path: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let raw_text = text.into();
        if normalize_text(&raw_text).is_empty() {
            return Err(DomainError::EmptyTranscript);
        }
        Ok(Transcript {
            id: id.into(),
            title: title.into(),
            turns: Vec::new(),
            raw_text,
            source_path: source_path.into(),
        })
    }

    pub fn from_turns(
        id: impl Into<String>,
        title: impl Into<String>,
        turns: Vec<Turn>,
        source_path: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let turns: Vec<Turn> = turns
            .into_iter()
            .map(|t| Turn {
                speaker: t.speaker,
                text: t.text.trim().to_owned(),
            })
            .filter(|t| !t.text.is_empty())
            .collect();
        let raw_text = turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if normalize_text(&raw_text).is_empty() {
            return Err(DomainError::EmptyTranscript);
        }
        Ok(Transcript {
            id: id.into(),
            title: title.into(),
            turns,
            raw_text,
            source_path: source_path.into(),
        })
    }

    /// The text handed to the model: labelled turns when available, else the raw text.
    pub fn dialogue(&self) -> String {
        if self.turns.is_empty() {
            return self.raw_text.clone();
        }
        self.turns
            .iter()
            .map(|t| match t.speaker.prefix() {
                Some(p) => format!("{p}: {}", t.text),
                None => t.text.clone(),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Source text of a char-offset span.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.raw_text.chars().skip(start).take(end.saturating_sub(start)).collect()
    }
}

/// Splits `"Respondent: text"` into a role and the remaining text.
fn split_speaker_tag(line: &str) -> Option<(Speaker, &str)> {
    let trimmed = line.trim_start();
    let colon = trimmed.find(':')?;
    let label = trimmed[..colon].trim_end();
    let known = ["interviewer", "respondent", "patient", "doctor"];
    if known.iter().any(|k| label.eq_ignore_ascii_case(k)) {
        Some((Speaker::from_label(label), trimmed[colon + 1..].trim()))
    } else {
        None
    }
}

fn parse_tagged(content: &str) -> Vec<Turn> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in content.lines() {
        if let Some((speaker, text)) = split_speaker_tag(line) {
            turns.push(Turn {
                speaker,
                text: text.to_owned(),
            });
            continue;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match turns.last_mut() {
            Some(last) => {
                if !last.text.is_empty() {
                    last.text.push(' ');
                }
                last.text.push_str(text);
            }
            None => turns.push(Turn {
                speaker: Speaker::Other,
                text: text.to_owned(),
            }),
        }
    }
    turns
}

#[derive(Deserialize)]
struct JsonTranscript {
    id: Option<String>,
    title: Option<String>,
    turns: Option<Vec<JsonTurn>>,
}

#[derive(Deserialize)]
struct JsonTurn {
    speaker: Option<String>,
    text: Option<String>,
}

/// Parses transcript content that has already been read into memory.
pub fn parse_transcript(
    content: &str,
    format: TranscriptFormat,
    default_id: &str,
    source_path: &str,
) -> Result<Transcript, DomainError> {
    let content = content.strip_prefix('\u{feff}').unwrap_or(content);
    if content.trim().is_empty() {
        return Err(DomainError::EmptyTranscript);
    }
    match format {
        TranscriptFormat::PlainText => {
            Transcript::from_plain_text(default_id, default_id, content, source_path)
        }
        TranscriptFormat::SpeakerTaggedText => {
            Transcript::from_turns(default_id, default_id, parse_tagged(content), source_path)
        }
        TranscriptFormat::StructuredJson => {
            let parsed: JsonTranscript = serde_json::from_str(content)
                .map_err(|e| DomainError::Format(format!("invalid transcript JSON: {e}")))?;
            let id = parsed
                .id
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| DomainError::Format("missing required field `id`".into()))?;
            let json_turns = parsed
                .turns
                .ok_or_else(|| DomainError::Format("missing required field `turns`".into()))?;
            let mut turns = Vec::with_capacity(json_turns.len());
            for (i, t) in json_turns.into_iter().enumerate() {
                let speaker = t.speaker.ok_or_else(|| {
                    DomainError::Format(format!("turn {i}: missing required field `speaker`"))
                })?;
                let text = t.text.ok_or_else(|| {
                    DomainError::Format(format!("turn {i}: missing required field `text`"))
                })?;
                turns.push(Turn {
                    speaker: Speaker::from_label(&speaker),
                    text,
                });
            }
            let title = parsed.title.unwrap_or_else(|| id.clone());
            Transcript::from_turns(id, title, turns, source_path)
        }
    }
}

/// Reads and parses a transcript file. The id of text formats is the file stem.
pub fn ingest_transcript(path: &Path, format: TranscriptFormat) -> Result<Transcript, DomainError> {
    let bytes = fs::read(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let content = String::from_utf8(bytes)
        .map_err(|_| DomainError::Format(format!("{} is not valid UTF-8", path.display())))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "transcript".to_owned());
    parse_transcript(&content, format, &stem, &path.display().to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<TranscriptFormat>,
}

/// Corpus manifest: `{"transcripts": [{"id", "path", "format"?}]}`, paths relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub transcripts: Vec<ManifestEntry>,
}

/// Loads a corpus from a manifest file or from every `.txt`/`.json` file in a
/// directory (sorted by name; a `manifest.json` inside the directory wins).
pub fn load_corpus(path: &Path) -> Result<Vec<Transcript>, DomainError> {
    let io_err = |source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let manifest_path = if path.is_dir() {
        let candidate = path.join("manifest.json");
        candidate.exists().then_some(candidate)
    } else {
        Some(path.to_path_buf())
    };

    let corpus = if let Some(manifest_path) = manifest_path {
        let text = fs::read_to_string(&manifest_path).map_err(io_err)?;
        let manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| DomainError::Format(format!("invalid corpus manifest: {e}")))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::with_capacity(manifest.transcripts.len());
        for entry in manifest.transcripts {
            let file = base.join(&entry.path);
            let format = match entry.format {
                Some(f) => f,
                None => {
                    let content = fs::read_to_string(&file).map_err(|source| DomainError::Io {
                        path: file.clone(),
                        source,
                    })?;
                    TranscriptFormat::detect(Some(&file), &content)
                }
            };
            let mut t = ingest_transcript(&file, format)?;
            t.id = entry.id;
            out.push(t);
        }
        out
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("txt") || e.eq_ignore_ascii_case("json"))
            })
            .collect();
        files.sort();
        let mut out = Vec::with_capacity(files.len());
        for file in files {
            let content = fs::read_to_string(&file).map_err(|source| DomainError::Io {
                path: file.clone(),
                source,
            })?;
            out.push(ingest_transcript(&file, TranscriptFormat::detect(Some(&file), &content))?);
        }
        out
    };

    let mut seen = HashSet::new();
    for t in &corpus {
        if !seen.insert(t.id.as_str()) {
            return Err(DomainError::DuplicateId(t.id.clone()));
        }
    }
    Ok(corpus)
}
