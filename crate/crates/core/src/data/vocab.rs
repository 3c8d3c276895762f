use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::EventSequence;

/// The two categorical variables of an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    Page,
    Category,
}

impl Variable {
    pub fn name(self) -> &'static str {
        match self {
            Variable::Page => "page",
            Variable::Category => "category",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TokenIndex {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl TokenIndex {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        TokenIndex { index, tokens }
    }

    fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }
}

/// Token→index maps for page IDs and categories.
///
/// Index 0 is shared by padding, missing and rare tokens; real tokens get
/// dense indices starting at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    page: TokenIndex,
    category: TokenIndex,
}

/// Builds a vocabulary from training sequences. Tokens seen at least
/// `min_count` times are indexed in first-appearance order.
pub fn build_vocab(train: &[EventSequence], min_count: usize) -> Result<Vocabulary> {
    if train.iter().all(|s| s.events.is_empty()) {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let min_count = min_count.max(1);
    let mut counts: [(Vec<String>, HashMap<&str, usize>); 2] = Default::default();
    for e in train.iter().flat_map(|s| &s.events) {
        for (slot, tok) in [(0, e.page.as_str()), (1, e.category.as_str())] {
            let (order, seen) = &mut counts[slot];
            let c = seen.entry(tok).or_insert_with(|| {
                order.push(tok.to_string());
                0
            });
            *c += 1;
        }
    }
    let [page, category] = counts.map(|(order, seen)| {
        TokenIndex::from_tokens(order.into_iter().filter(|t| seen[t.as_str()] >= min_count).collect())
    });
    Ok(Vocabulary { page, category })
}

impl Vocabulary {
    fn table(&self, v: Variable) -> &TokenIndex {
        match v {
            Variable::Page => &self.page,
            Variable::Category => &self.category,
        }
    }

    /// Index of `token`, or 0 when it is unknown or was filtered as rare.
    pub fn index(&self, v: Variable, token: &str) -> usize {
        self.table(v).get(token)
    }

    /// Number of real tokens (the embedding table has one more row).
    pub fn size(&self, v: Variable) -> usize {
        self.table(v).tokens.len()
    }

    pub fn token(&self, v: Variable, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.table(v).tokens.get(i)).map(String::as_str)
    }

    /// Text form: one `variable<TAB>token<TAB>index` line per token.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in [Variable::Page, Variable::Category] {
            for (i, tok) in self.table(v).tokens.iter().enumerate() {
                writeln!(s, "{}\t{}\t{}", v.name(), tok, i + 1).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tables: [Vec<String>; 2] = Default::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("vocabulary line {}: expected variable<TAB>token<TAB>index", n + 1));
            let mut parts = line.split('\t');
            let (var, tok, idx) =
                (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
            if parts.next().is_some() {
                return Err(bad());
            }
            let slot = match var {
                "page" => 0,
                "category" => 1,
                other => return Err(Error::Format(format!("vocabulary line {}: unknown variable {other:?}", n + 1))),
            };
            let idx: usize = idx.parse().map_err(|_| bad())?;
            if idx != tables[slot].len() + 1 {
                return Err(Error::Format(format!(
                    "vocabulary line {}: index {idx} breaks the dense 1.. numbering",
                    n + 1
                )));
            }
            tables[slot].push(tok.to_string());
        }
        let [page, category] = tables.map(TokenIndex::from_tokens);
        Ok(Vocabulary { page, category })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for v in [Variable::Page, Variable::Category] {
            if let Some(t) = self.table(v).tokens.iter().find(|t| t.contains(['\t', '\n', '\r'])) {
                return Err(Error::Data(format!("token {t:?} cannot be stored in the vocabulary file")));
            }
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Short content hash recorded in checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }
}
