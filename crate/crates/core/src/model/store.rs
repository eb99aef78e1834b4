//! Line-delimited JSON stores: trajectory stores (`*.traj.jsonl`) and QA
//! datasets (`*.qa.jsonl`).
//!
//! A trajectory store line is the [`serialize_trajectory`] record optionally
//! extended with a `raw_turns` array holding the verbatim assistant outputs
//! that produced the trajectory; offline format scoring needs them.
//! [`deserialize_trajectory`] ignores the extra field, so the pure record
//! round-trip is unaffected.

use super::{deserialize_trajectory, serialize_trajectory, ModelError, QAItem, Trajectory};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One trajectory-store row: the trajectory plus, when known, the raw
/// assistant turns behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub trajectory: Trajectory,
    pub raw_turns: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawTurnsField {
    #[serde(default)]
    raw_turns: Option<Vec<String>>,
}

/// Renders one store line for a trajectory and its raw turns.
pub fn entry_to_line(entry: &TrajectoryEntry) -> String {
    let mut value: serde_json::Value =
        serde_json::from_str(&serialize_trajectory(&entry.trajectory))
            .expect("own serialization is valid JSON");
    if let Some(raw) = &entry.raw_turns {
        value["raw_turns"] = serde_json::json!(raw);
    }
    serde_json::to_string(&value).expect("JSON value serialization cannot fail")
}

/// Parses one store line.
pub fn entry_from_line(line: &str) -> Result<TrajectoryEntry, ModelError> {
    let trajectory = deserialize_trajectory(line)?;
    let extra: RawTurnsField =
        serde_json::from_str(line).map_err(|e| ModelError::MalformedRecord(e.to_string()))?;
    Ok(TrajectoryEntry {
        trajectory,
        raw_turns: extra.raw_turns,
    })
}

/// Writes a trajectory store, one JSON record per line.
pub fn write_trajectories(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for entry in entries {
        writeln!(w, "{}", entry_to_line(entry))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory store. Blank lines are skipped; any malformed line is
/// an error naming its line number.
pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryEntry>, ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(entry_from_line(&line).map_err(|e| {
            ModelError::MalformedRecord(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(entries)
}

/// Writes a QA dataset, one item per line.
pub fn write_qa_items(path: &Path, items: &[QAItem]) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).expect("QA item serialization cannot fail");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a QA dataset.
pub fn read_qa_items(path: &Path) -> Result<Vec<QAItem>, ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: QAItem = serde_json::from_str(&line).map_err(|e| {
            ModelError::MalformedRecord(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}
