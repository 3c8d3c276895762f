//! Synthetic behavior sequences with planted fraud motifs.
//!
//! Background browsing is drawn from a Zipf page distribution with
//! log-normal dwell times. Each task owns a pool of motifs: short page-ID
//! n-grams viewed with abnormally short dwell. A record that is fraudulent
//! for task `t` gets one motif planted, drawn from the pools selected by row
//! `t` of `task_correlation`; off-diagonal mass makes tasks share motifs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::{Event, EventSequence};

/// Where motifs of fraudulent records are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Uniformly anywhere in the sequence.
    Anywhere,
    /// Ending `recent_min_back` to `recent_min_back + recent_window - 1`
    /// events before the last one. Legitimate records may carry the same
    /// motifs elsewhere (`decoy_rate`), so only the position in the sequence
    /// separates the classes.
    Recent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub train_records: usize,
    pub test_records: usize,
    pub tasks: usize,
    pub page_vocab: usize,
    pub category_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub fraud_rates: Vec<f64>,
    pub motifs_per_task: usize,
    pub motif_len: usize,
    /// Row `t`: relative weights of the motif pools a task-`t` positive
    /// draws from. Empty means the identity (no sharing).
    pub task_correlation: Vec<Vec<f64>>,
    /// Chance that a record with no positive label still carries a motif.
    pub false_motif_rate: f64,
    /// Chance that a positive record gets no motif (label noise).
    pub motif_dropout: f64,
    pub motif_dwell_ms: f64,
    pub background_dwell_ms: f64,
    pub placement: Placement,
    pub recent_window: usize,
    pub recent_min_back: usize,
    pub decoy_rate: f64,
    /// Decoy motifs end this many events before the last one (inclusive
    /// range).
    pub decoy_min_back: usize,
    pub decoy_max_back: usize,
    pub amount_median_usd: f64,
    pub amount_sigma: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            train_records: 20_000,
            test_records: 5_000,
            tasks: 3,
            page_vocab: 500,
            category_vocab: 100,
            min_len: 20,
            max_len: 150,
            fraud_rates: vec![0.02, 0.01, 0.004],
            motifs_per_task: 2,
            motif_len: 3,
            task_correlation: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.5, 0.25, 0.25]],
            false_motif_rate: 0.005,
            motif_dwell_ms: 150.0,
            background_dwell_ms: 6_000.0,
            motif_dropout: 0.02,
            placement: Placement::Anywhere,
            recent_window: 5,
            recent_min_back: 0,
            decoy_rate: 0.0,
            decoy_min_back: 20,
            decoy_max_back: 60,
            amount_median_usd: 60.0,
            amount_sigma: 1.2,
        }
    }
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GeneratorSpec = toml::from_str(text).map_err(|e| Error::Config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("generator spec serializes")
    }

    /// Normalized pool weights per task.
    pub fn sharing(&self) -> Vec<Vec<f64>> {
        if self.task_correlation.is_empty() {
            return (0..self.tasks)
                .map(|t| (0..self.tasks).map(|u| if t == u { 1.0 } else { 0.0 }).collect())
                .collect();
        }
        self.task_correlation
            .iter()
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().map(|w| w / s).collect()
            })
            .collect()
    }

    /// Pools whose motifs can mark a task-`t` positive.
    pub fn motif_pools(&self, task: usize) -> Vec<usize> {
        self.sharing()[task].iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(u, _)| u).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let prob = |name: &str, p: f64| -> Result<()> {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.fraud_rates.len() != self.tasks {
            return bad(format!("fraud_rates has {} entries for {} tasks", self.fraud_rates.len(), self.tasks));
        }
        for (t, &r) in self.fraud_rates.iter().enumerate() {
            prob(&format!("fraud_rates[{t}]"), r)?;
        }
        prob("false_motif_rate", self.false_motif_rate)?;
        prob("motif_dropout", self.motif_dropout)?;
        prob("decoy_rate", self.decoy_rate)?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] is empty", self.min_len, self.max_len));
        }
        if self.motifs_per_task == 0 || self.motif_len == 0 {
            return bad("motifs must be nonempty: motifs_per_task and motif_len must be at least 1".into());
        }
        if self.motif_len > self.min_len {
            return bad(format!("motif_len {} exceeds min_len {}", self.motif_len, self.min_len));
        }
        if self.page_vocab == 0 || self.category_vocab == 0 {
            return bad("vocabulary sizes must be at least 1".into());
        }
        if self.placement == Placement::Recent && self.recent_window == 0 {
            return bad("recent_window must be at least 1".into());
        }
        if self.decoy_min_back > self.decoy_max_back {
            return bad("decoy_min_back exceeds decoy_max_back".into());
        }
        if !self.task_correlation.is_empty() {
            if self.task_correlation.len() != self.tasks || self.task_correlation.iter().any(|r| r.len() != self.tasks)
            {
                return bad(format!("task_correlation must be {0}×{0}", self.tasks));
            }
            for (t, row) in self.task_correlation.iter().enumerate() {
                if row.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || row.iter().sum::<f64>() <= 0.0 {
                    return bad(format!("task_correlation row {t} needs nonnegative weights with positive sum"));
                }
            }
        }
        for (name, v) in [
            ("motif_dwell_ms", self.motif_dwell_ms),
            ("background_dwell_ms", self.background_dwell_ms),
            ("amount_median_usd", self.amount_median_usd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.amount_sigma >= 0.0 && self.amount_sigma.is_finite()) {
            return bad("amount_sigma must be nonnegative".into());
        }
        Ok(())
    }
}

/// A planted page n-gram.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Motif {
    pub pool: usize,
    pub pages: Vec<String>,
}

impl Motif {
    /// True if the page IDs occur as a contiguous run in `events`.
    pub fn occurs_in(&self, events: &[Event]) -> bool {
        let m = self.pages.len();
        events.len() >= m && events.windows(m).any(|w| w.iter().zip(&self.pages).all(|(e, p)| &e.page == p))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub records: usize,
    pub positives: Vec<usize>,
}

/// Realized class counts of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub tasks: usize,
    pub train: SplitCounts,
    pub test: SplitCounts,
}

pub struct SyntheticData {
    pub train: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub manifest: Manifest,
    /// Motif pools, one per task.
    pub motifs: Vec<Vec<Motif>>,
}

struct World<'a> {
    spec: &'a GeneratorSpec,
    pools: Vec<Vec<Vec<usize>>>,
    home_category: Vec<usize>,
    sharing: Vec<Vec<f64>>,
    zipf: Zipf<f64>,
    dwell: LogNormal<f64>,
    motif_jitter: Normal<f64>,
    amount: LogNormal<f64>,
}

impl World<'_> {
    fn background<R: Rng>(&self, rng: &mut R) -> Event {
        let page = (self.zipf.sample(rng) as usize).clamp(1, self.spec.page_vocab) - 1;
        let category = if rng.random::<f64>() < 0.8 {
            self.home_category[page]
        } else {
            rng.random_range(0..self.spec.category_vocab)
        };
        Event {
            page: format!("p{page}"),
            category: format!("c{category}"),
            dwell_ms: self.dwell.sample(rng).round().max(1.0),
        }
    }

    fn pick_pool<R: Rng>(&self, task: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.sharing[task];
        for (p, &w) in row.iter().enumerate() {
            acc += w;
            if u < acc {
                return p;
            }
        }
        row.iter().rposition(|&w| w > 0.0).unwrap_or(task)
    }

    /// Writes `motif` into `events` starting at a position drawn by `start`,
    /// avoiding already planted spans when possible.
    fn plant<R: Rng>(
        &self,
        events: &mut [Event],
        motif: &[usize],
        taken: &mut Vec<(usize, usize)>,
        rng: &mut R,
        start: impl Fn(&mut R) -> usize,
    ) {
        let m = motif.len();
        let mut s = start(rng);
        for _ in 0..8 {
            if taken.iter().all(|&(a, b)| s + m <= a || s >= b) {
                break;
            }
            s = start(rng);
        }
        for (j, &p) in motif.iter().enumerate() {
            let jitter = self.motif_jitter.sample(rng).exp();
            events[s + j] = Event {
                page: format!("p{p}"),
                category: format!("c{}", self.home_category[p]),
                dwell_ms: (self.spec.motif_dwell_ms * jitter).round().max(1.0),
            };
        }
        taken.push((s, s + m));
    }

    fn record(&self, seed: u64, split: u64, idx: usize, prefix: &str) -> EventSequence {
        let spec = self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split << 40) | idx as u64);

        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut events: Vec<Event> = (0..len).map(|_| self.background(&mut rng)).collect();
        let labels: Vec<u8> = spec.fraud_rates.iter().map(|&r| u8::from(rng.random::<f64>() < r)).collect();

        let m = spec.motif_len;
        let anywhere = move |r: &mut ChaCha8Rng| r.random_range(0..=len - m);
        let recent = {
            let (lo, w) = (spec.recent_min_back, spec.recent_window);
            move |r: &mut ChaCha8Rng| (len - m).saturating_sub(lo + r.random_range(0..w))
        };
        let decoy = {
            let (lo, hi) = (spec.decoy_min_back, spec.decoy_max_back);
            move |r: &mut ChaCha8Rng| (len - m).saturating_sub(r.random_range(lo..=hi))
        };

        let mut taken = Vec::new();
        for (t, &l) in labels.iter().enumerate() {
            if l == 0 || rng.random::<f64>() < spec.motif_dropout {
                continue;
            }
            let pool = self.pick_pool(t, &mut rng);
            let motif = &self.pools[pool][rng.random_range(0..spec.motifs_per_task)];
            match spec.placement {
                Placement::Anywhere => self.plant(&mut events, motif, &mut taken, &mut rng, anywhere),
                Placement::Recent => self.plant(&mut events, motif, &mut taken, &mut rng, recent),
            }
        }
        if labels.iter().all(|&l| l == 0) {
            if rng.random::<f64>() < spec.false_motif_rate {
                let motif = self.random_motif(&mut rng);
                self.plant(&mut events, motif, &mut taken, &mut rng, anywhere);
            }
            if spec.placement == Placement::Recent && rng.random::<f64>() < spec.decoy_rate {
                let motif = self.random_motif(&mut rng);
                self.plant(&mut events, motif, &mut taken, &mut rng, decoy);
            }
        }
        let amount = (self.amount.sample(&mut rng) * 100.0).round().max(1.0) / 100.0;
        EventSequence { record_id: format!("{prefix}-{idx:06}"), events, labels, amount_usd: amount }
    }

    fn random_motif<R: Rng>(&self, rng: &mut R) -> &[usize] {
        let pool = &self.pools[rng.random_range(0..self.pools.len())];
        &pool[rng.random_range(0..pool.len())]
    }
}

fn counts(records: &[EventSequence], tasks: usize) -> SplitCounts {
    SplitCounts {
        records: records.len(),
        positives: (0..tasks).map(|t| records.iter().filter(|r| r.labels[t] == 1).count()).collect(),
    }
}

/// Generates train and test splits. Output depends only on `(spec, seed)`:
/// every record draws from its own ChaCha stream, so records can be built
/// in parallel without changing the result.
pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(u64::MAX);
    let pools: Vec<Vec<Vec<usize>>> = (0..spec.tasks)
        .map(|_| {
            (0..spec.motifs_per_task)
                .map(|_| (0..spec.motif_len).map(|_| master.random_range(0..spec.page_vocab)).collect())
                .collect()
        })
        .collect();
    let home_category = (0..spec.page_vocab).map(|_| master.random_range(0..spec.category_vocab)).collect();
    let world = World {
        spec,
        pools,
        home_category,
        sharing: spec.sharing(),
        zipf: Zipf::new(spec.page_vocab as f64, 1.0).map_err(|e| Error::Config(format!("zipf: {e}")))?,
        dwell: LogNormal::new(spec.background_dwell_ms.ln(), 0.8).map_err(|e| Error::Config(e.to_string()))?,
        motif_jitter: Normal::new(0.0, 0.25).map_err(|e| Error::Config(e.to_string()))?,
        amount: LogNormal::new(spec.amount_median_usd.ln(), spec.amount_sigma)
            .map_err(|e| Error::Config(e.to_string()))?,
    };
    let exec = Exec::default();
    let train = exec.map(spec.train_records, |i| world.record(seed, 0, i, "train"));
    let test = exec.map(spec.test_records, |i| world.record(seed, 1, i, "test"));
    let manifest =
        Manifest { seed, tasks: spec.tasks, train: counts(&train, spec.tasks), test: counts(&test, spec.tasks) };
    let motifs = world
        .pools
        .iter()
        .enumerate()
        .map(|(p, pool)| {
            pool.iter().map(|m| Motif { pool: p, pages: m.iter().map(|i| format!("p{i}")).collect() }).collect()
        })
        .collect();
    Ok(SyntheticData { train, test, manifest, motifs })
}
