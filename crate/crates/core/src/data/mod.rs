//! Raw behavior sequences, vocabularies, preprocessing and the synthetic
//! planted-motif generator.

mod encode;
mod generator;
mod jsonl;
mod vocab;

use serde::{Deserialize, Serialize};

pub use encode::{encode, normalize_dwell, pad_truncate, EncodedBatch};
pub use generator::{generate_synthetic, GeneratorSpec, Manifest, Motif, Placement, SplitCounts, SyntheticData};
pub use jsonl::{read_jsonl, read_jsonl_with, write_jsonl, DwellPolicy};
pub use vocab::{build_vocab, Variable, Vocabulary};

/// One page view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "p")]
    pub page: String,
    #[serde(rename = "c")]
    pub category: String,
    /// Dwell time on the page in milliseconds.
    #[serde(rename = "t")]
    pub dwell_ms: f64,
}

/// A user's page-view sequence with per-task fraud labels and the
/// transaction amount.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    #[serde(rename = "id")]
    pub record_id: String,
    pub events: Vec<Event>,
    pub labels: Vec<u8>,
    #[serde(rename = "amount")]
    pub amount_usd: f64,
}
