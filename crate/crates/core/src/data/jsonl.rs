use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::EventSequence;

/// What to do with non-positive dwell times on read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DwellPolicy {
    /// Reject the record.
    #[default]
    Strict,
    /// Replace with 1 ms.
    Clamp,
}

const REQUIRED: [&str; 4] = ["events", "labels", "amount", "id"];

pub fn read_jsonl(path: &Path) -> Result<Vec<EventSequence>> {
    read_jsonl_with(path, DwellPolicy::Strict)
}

/// Reads one record per line. Blank lines are skipped and unknown fields are
/// ignored.
pub fn read_jsonl_with(path: &Path, policy: DwellPolicy) -> Result<Vec<EventSequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1, policy)?);
    }
    Ok(out)
}

pub(crate) fn parse_record(line: &str, lineno: usize, policy: DwellPolicy) -> Result<EventSequence> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Format(format!("line {lineno}: malformed JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| Error::Schema(format!("line {lineno}: expected a JSON object")))?;
    if let Some(field) = REQUIRED.iter().find(|f| !obj.contains_key(**f)) {
        return Err(Error::Schema(format!("line {lineno}: missing required field \"{field}\"")));
    }
    let mut rec: EventSequence =
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("line {lineno}: {e}")))?;
    if rec.events.is_empty() {
        return Err(Error::Schema(format!("line {lineno}: \"events\" must be nonempty")));
    }
    for (j, e) in rec.events.iter_mut().enumerate() {
        if !e.dwell_ms.is_finite() {
            return Err(Error::Schema(format!("line {lineno}: event {j} has non-finite dwell time")));
        }
        if e.dwell_ms <= 0.0 {
            match policy {
                DwellPolicy::Strict => {
                    return Err(Error::Schema(format!(
                        "line {lineno}: event {j} dwell time {} must be > 0",
                        e.dwell_ms
                    )))
                }
                DwellPolicy::Clamp => e.dwell_ms = 1.0,
            }
        }
    }
    if let Some(l) = rec.labels.iter().find(|&&l| l > 1) {
        return Err(Error::Schema(format!("line {lineno}: label {l} is not 0 or 1")));
    }
    if !rec.amount_usd.is_finite() || rec.amount_usd < 0.0 {
        return Err(Error::Schema(format!(
            "line {lineno}: \"amount\" must be a nonnegative number, got {}",
            rec.amount_usd
        )));
    }
    Ok(rec)
}

pub fn write_jsonl(records: &[EventSequence], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
