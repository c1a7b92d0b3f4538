//! On-disk record/replay store: one JSON file per request key.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureResponse {
    Text(String),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub request: Value,
    pub response: FixtureResponse,
    pub recorded_at: String,
}

/// Hex SHA-256 of the canonical serialization of `request`.
pub fn fixture_key<T: Serialize>(request: &T) -> (String, Value) {
    // Struct field order is fixed and alphabetical, so this is canonical.
    let canonical = serde_json::to_string(request).expect("fixture request serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let value = serde_json::from_str(&canonical).expect("round-trips");
    (hex::encode(digest), value)
}

#[derive(Debug)]
pub struct FixtureStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
    used: Mutex<Vec<String>>,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore {
            dir: dir.into(),
            write_lock: Mutex::new(()),
            used: Mutex::new(Vec::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn note_use(&self, key: &str) {
        self.used.lock().unwrap_or_else(|e| e.into_inner()).push(key.to_owned());
    }

    /// Keys read or written so far, in call order.
    pub fn used_keys(&self) -> Vec<String> {
        self.used.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn load(&self, key: &str) -> Result<FixtureResponse, GatewayError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMiss {
                    key: key.to_owned(),
                })
            }
            Err(e) => return Err(GatewayError::Fixture(format!("{}: {e}", path.display()))),
        };
        let record: FixtureRecord = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        self.note_use(key);
        Ok(record.response)
    }

    pub fn store(&self, key: &str, request: Value, response: FixtureResponse) -> Result<(), GatewayError> {
        let record = FixtureRecord {
            key: key.to_owned(),
            request,
            response,
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let fail = |e: std::io::Error| GatewayError::Fixture(format!("{}: {e}", self.dir.display()));
        fs::create_dir_all(&self.dir).map_err(fail)?;
        let path = self.path_for(key);
        let tmp = path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(&record).expect("fixture serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(fail)?;
        fs::rename(&tmp, &path).map_err(fail)?;
        self.note_use(key);
        Ok(())
    }
}
