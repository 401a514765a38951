//! Record/replay of completions keyed by a hash of the request.
//!
//! A cassette file holds one JSON record per line:
//! `{"key": <sha256 hex>, "request": {...}, "response": {...}}`.
//! Floats are written in shortest round-trip form, so replayed
//! log-probabilities are bit-identical to the recorded ones.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, Completion, CompletionRequest, TextGenerator};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CassetteRecord {
    key: String,
    request: CompletionRequest,
    response: Completion,
}

/// Hex SHA-256 of the canonical JSON encoding of `req`.
pub fn request_key(req: &CompletionRequest) -> String {
    let canonical = serde_json::to_vec(req).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

pub struct Cassette {
    path: PathBuf,
    recorder: Option<Box<dyn TextGenerator>>,
    entries: Mutex<BTreeMap<String, Completion>>,
}

impl Cassette {
    /// Replays recordings only; a miss is an error.
    pub fn replay(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            recorder: None,
            entries: Mutex::new(read_entries(path)?),
        })
    }

    /// Replays hits and forwards misses to `inner`, appending them to the file.
    pub fn record(path: &Path, inner: Box<dyn TextGenerator>) -> Result<Self> {
        let entries = if path.exists() { read_entries(path)? } else { BTreeMap::new() };
        Ok(Self {
            path: path.to_path_buf(),
            recorder: Some(inner),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn read_entries(path: &Path) -> Result<BTreeMap<String, Completion>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CassetteRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.insert(rec.key, rec.response);
    }
    Ok(out)
}

impl TextGenerator for Cassette {
    fn id(&self) -> String {
        match &self.recorder {
            Some(inner) => inner.id(),
            None => "cassette".into(),
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let key = request_key(req);
        if let Some(hit) = self.entries.lock().expect("cassette lock").get(&key) {
            return Ok(hit.clone());
        }
        let Some(inner) = &self.recorder else {
            return Err(BackendError::CassetteMiss(key));
        };
        let response = inner.complete(req)?;
        let mut entries = self.entries.lock().expect("cassette lock");
        if let Entry::Vacant(slot) = entries.entry(key) {
            let rec = CassetteRecord {
                key: slot.key().clone(),
                request: req.clone(),
                response: response.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| BackendError::MalformedBody(e.to_string()))?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| BackendError::Transport {
                    message: format!("{}: {e}", self.path.display()),
                    retryable: false,
                })?;
            writeln!(f, "{line}").map_err(|e| BackendError::Transport {
                message: format!("{}: {e}", self.path.display()),
                retryable: false,
            })?;
            slot.insert(response.clone());
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scripted::ScriptedGenerator;
    use crate::backends::TopLogprob;

    #[test]
    fn record_then_replay_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tape.jsonl");
        let lp = -0.1053605156578263_f64;
        let stub = ScriptedGenerator::new().fallback(Completion {
            text: "OK".into(),
            logprobs: vec![vec![TopLogprob::new("OK", lp), TopLogprob::new("No", 1.0e-300_f64.ln())]],
        });
        let req = CompletionRequest::new("say OK", 2);
        let rec = Cassette::record(&path, Box::new(stub)).unwrap();
        let first = rec.complete(&req).unwrap();
        assert_eq!(first.text, "OK");

        let replay = Cassette::replay(&path).unwrap();
        let again = replay.complete(&req).unwrap();
        assert_eq!(again, first);
        assert_eq!(again.logprobs[0][0].logprob.to_bits(), lp.to_bits());

        let other = CompletionRequest::new("say OK", 3);
        assert!(matches!(replay.complete(&other), Err(BackendError::CassetteMiss(_))));
    }

    #[test]
    fn key_depends_on_every_field() {
        let a = CompletionRequest::new("p", 1);
        let b = CompletionRequest::new("p", 1).with_logprobs(5);
        let mut c = a.clone();
        c.temperature = 0.5;
        assert_ne!(request_key(&a), request_key(&b));
        assert_ne!(request_key(&a), request_key(&c));
        assert_eq!(request_key(&a), request_key(&a.clone()));
    }
}
