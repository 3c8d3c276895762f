use crate::error::{Error, Result};
use crate::exec::Exec;

use super::vocab::{Variable, Vocabulary};
use super::{Event, EventSequence};

/// `ln(max(t_ms, 1) / 1000)`: log-seconds with a 1 ms floor.
pub fn normalize_dwell(t_ms: f64) -> f64 {
    let t = if t_ms.is_nan() { 1.0 } else { t_ms.max(1.0) };
    (t / 1000.0).ln()
}

/// Fits `values` into exactly `n` slots: the last `n` are kept when longer,
/// and `pad` fills the front when shorter. The mask is true exactly on kept
/// values.
pub fn pad_truncate<T: Clone>(values: &[T], n: usize, pad: T) -> (Vec<T>, Vec<bool>) {
    let kept = &values[values.len().saturating_sub(n)..];
    let pad_len = n - kept.len();
    let mut out = vec![pad; pad_len];
    out.extend_from_slice(kept);
    let mut mask = vec![false; pad_len];
    mask.resize(n, true);
    (out, mask)
}

/// Integer-coded, fixed-length rows ready for embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub max_len: usize,
    pub tasks: usize,
    /// `[B×N]` page indices.
    pub page_ids: Vec<usize>,
    /// `[B×N]` category indices.
    pub category_ids: Vec<usize>,
    /// `[B×N]` normalized dwell, 0 on padding.
    pub dwell_norm: Vec<f64>,
    /// `[B×N]`, true on real events (a contiguous suffix of each row).
    pub valid_mask: Vec<bool>,
    /// `[B×T]` binary labels.
    pub labels: Vec<u8>,
    pub amounts: Vec<f64>,
    pub record_ids: Vec<String>,
}

struct Row {
    page: Vec<usize>,
    category: Vec<usize>,
    dwell: Vec<f64>,
    mask: Vec<bool>,
}

fn encode_row(vocab: &Vocabulary, events: &[Event], n: usize) -> Row {
    let (slots, mask) = pad_truncate(&events.iter().map(Some).collect::<Vec<_>>(), n, None);
    let mut row =
        Row { page: Vec::with_capacity(n), category: Vec::with_capacity(n), dwell: Vec::with_capacity(n), mask };
    for e in slots {
        match e {
            Some(e) => {
                row.page.push(vocab.index(Variable::Page, &e.page));
                row.category.push(vocab.index(Variable::Category, &e.category));
                row.dwell.push(normalize_dwell(e.dwell_ms));
            }
            None => {
                row.page.push(0);
                row.category.push(0);
                row.dwell.push(0.0);
            }
        }
    }
    row
}

/// Encodes records against a fixed vocabulary. Records are independent, so
/// the work is spread over `exec`.
pub fn encode(
    vocab: &Vocabulary,
    records: &[EventSequence],
    max_len: usize,
    tasks: usize,
    exec: Exec,
) -> Result<EncodedBatch> {
    if max_len == 0 {
        return Err(Error::Config("maximum sequence length must be at least 1".into()));
    }
    for r in records {
        if r.events.is_empty() {
            return Err(Error::Data(format!("record {:?} has no events", r.record_id)));
        }
        if r.labels.len() != tasks {
            return Err(Error::Data(format!(
                "record {:?} has {} labels, expected {tasks}",
                r.record_id,
                r.labels.len()
            )));
        }
    }
    let rows = exec.map(records.len(), |i| encode_row(vocab, &records[i].events, max_len));
    let b = records.len();
    let mut out = EncodedBatch {
        max_len,
        tasks,
        page_ids: Vec::with_capacity(b * max_len),
        category_ids: Vec::with_capacity(b * max_len),
        dwell_norm: Vec::with_capacity(b * max_len),
        valid_mask: Vec::with_capacity(b * max_len),
        labels: Vec::with_capacity(b * tasks),
        amounts: Vec::with_capacity(b),
        record_ids: Vec::with_capacity(b),
    };
    for (row, rec) in rows.into_iter().zip(records) {
        out.page_ids.extend(row.page);
        out.category_ids.extend(row.category);
        out.dwell_norm.extend(row.dwell);
        out.valid_mask.extend(row.mask);
        out.labels.extend(&rec.labels);
        out.amounts.push(rec.amount_usd);
        out.record_ids.push(rec.record_id.clone());
    }
    Ok(out)
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.amounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amounts.is_empty()
    }

    /// Number of real events kept in row `i`.
    pub fn valid_len(&self, i: usize) -> usize {
        self.valid_mask[i * self.max_len..(i + 1) * self.max_len].iter().filter(|&&m| m).count()
    }

    pub fn label(&self, row: usize, task: usize) -> u8 {
        self.labels[row * self.tasks + task]
    }

    /// Labels of one task as class indices.
    pub fn task_labels(&self, task: usize) -> Vec<usize> {
        (0..self.len()).map(|r| self.label(r, task) as usize).collect()
    }

    /// A new batch holding the given rows in the given order.
    pub fn select(&self, rows: &[usize]) -> EncodedBatch {
        let n = self.max_len;
        let t = self.tasks;
        let mut out = EncodedBatch {
            max_len: n,
            tasks: t,
            page_ids: Vec::with_capacity(rows.len() * n),
            category_ids: Vec::with_capacity(rows.len() * n),
            dwell_norm: Vec::with_capacity(rows.len() * n),
            valid_mask: Vec::with_capacity(rows.len() * n),
            labels: Vec::with_capacity(rows.len() * t),
            amounts: Vec::with_capacity(rows.len()),
            record_ids: Vec::with_capacity(rows.len()),
        };
        for &r in rows {
            out.page_ids.extend_from_slice(&self.page_ids[r * n..(r + 1) * n]);
            out.category_ids.extend_from_slice(&self.category_ids[r * n..(r + 1) * n]);
            out.dwell_norm.extend_from_slice(&self.dwell_norm[r * n..(r + 1) * n]);
            out.valid_mask.extend_from_slice(&self.valid_mask[r * n..(r + 1) * n]);
            out.labels.extend_from_slice(&self.labels[r * t..(r + 1) * t]);
            out.amounts.push(self.amounts[r]);
            out.record_ids.push(self.record_ids[r].clone());
        }
        out
    }

    /// Contiguous rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> EncodedBatch {
        self.select(&(start..end).collect::<Vec<_>>())
    }
}
