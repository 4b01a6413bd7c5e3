//! Activation logs as JSON Lines: `{"layer":l,"domain":m,"experts":[...]}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MoeError;

/// Routed experts chosen for one token at one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationLogRecord {
    pub layer: usize,
    pub domain: usize,
    /// Strictly increasing.
    #[serde(rename = "experts")]
    pub expert_ids: Vec<usize>,
}

pub fn write_activation_log(records: &[ActivationLogRecord], mut out: impl Write) -> Result<(), MoeError> {
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_activation_log(records: &[ActivationLogRecord], path: impl AsRef<Path>) -> Result<(), MoeError> {
    let mut buf = Vec::new();
    write_activation_log(records, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Parses JSONL; expert lists are sorted on ingest, duplicates rejected.
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn parse_activation_log(text: &str) -> Result<Vec<ActivationLogRecord>, MoeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ActivationLogRecord =
            serde_json::from_str(line).map_err(|e| MoeError::MalformedLog {
                line: i + 1,
                message: e.to_string(),
            })?;
        rec.expert_ids.sort_unstable();
        if rec.expert_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(MoeError::MalformedLog {
                line: i + 1,
                message: "duplicate expert id".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_activation_log(path: impl AsRef<Path>) -> Result<Vec<ActivationLogRecord>, MoeError> {
    parse_activation_log(&fs::read_to_string(path)?)
}
