//! Accounting of training-data preparation cost.
//!
//! Preparation splits into an extraction phase (embedding samples) and a
//! matching phase (query–candidate distance evaluations). Hard negative
//! mining over the full database costs `n_q + n_k` extractions and
//! `n_q · n_k`-order comparisons; partial mining replaces `n_k` by a pool;
//! pair-only sampling picks positives geometrically and compares nothing.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{GeoDataset, GeoSample, Position, Role, DEFAULT_R_NEG, DEFAULT_R_POS};
use crate::sampling::{
    account_pairs, build_pairs, identical_negative_count, mine_triplets, verify_positives, Embedder, MiningConfig,
    MiningMode, PairKind, RawFeatures,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Embedding forward passes.
    pub extractions: u64,
    /// Query–candidate distance evaluations.
    pub comparisons: u64,
    /// Most embeddings held at once.
    pub peak_cached: u64,
}

impl CostLedger {
    pub fn record_extractions(&mut self, n: u64) {
        self.extractions += n;
    }

    pub fn record_comparisons(&mut self, n: u64) {
        self.comparisons += n;
    }

    pub fn observe_cached(&mut self, held: u64) {
        self.peak_cached = self.peak_cached.max(held);
    }

    /// Sums counters, keeps the larger peak.
    pub fn merge(&mut self, other: &CostLedger) {
        self.extractions += other.extractions;
        self.comparisons += other.comparisons;
        self.peak_cached = self.peak_cached.max(other.peak_cached);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrepMode {
    FullHnm,
    PartialHnm,
    Random,
    PairOnly,
}

impl PrepMode {
    pub const ALL: [PrepMode; 4] = [PrepMode::FullHnm, PrepMode::PartialHnm, PrepMode::Random, PrepMode::PairOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            PrepMode::FullHnm => "full_hnm",
            PrepMode::PartialHnm => "partial_hnm",
            PrepMode::Random => "random",
            PrepMode::PairOnly => "pair_only",
        }
    }

    fn mining(self) -> Option<MiningMode> {
        match self {
            PrepMode::FullHnm => Some(MiningMode::FullHnm),
            PrepMode::PartialHnm => Some(MiningMode::PartialHnm),
            PrepMode::Random => Some(MiningMode::Random),
            PrepMode::PairOnly => None,
        }
    }
}

impl fmt::Display for PrepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrepMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preparation mode {s:?}")))
    }
}

/// Sizes the closed forms are evaluated at.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrepCounts {
    /// Sampled queries.
    pub n_q: u64,
    /// Database size.
    pub n_k: u64,
    /// Positive images paired with queries (one per query).
    pub n_kp: u64,
    /// Σ over sampled queries of negative-set sizes.
    pub eligible_negatives: u64,
    /// Σ over sampled queries of positive-set sizes.
    pub positive_links: u64,
    /// Distinct samples across the sampled queries' positive sets.
    pub positive_pool: u64,
    pub pool: u64,
    pub identical_negatives: u64,
    pub batch_size: u64,
    pub positive_verification: bool,
}

impl PrepCounts {
    /// Counts for sampling every query of `ds` once.
    pub fn for_dataset(ds: &GeoDataset, pool: usize, eta: f64, batch_size: usize, positive_verification: bool) -> Self {
        let mut c = PrepCounts {
            n_q: ds.queries().len() as u64,
            n_k: ds.database().len() as u64,
            n_kp: ds.queries().len() as u64,
            pool: pool.min(ds.database().len()) as u64,
            identical_negatives: identical_negative_count(ds.queries().len(), eta) as u64,
            batch_size: batch_size as u64,
            positive_verification,
            ..Default::default()
        };
        let mut distinct = std::collections::BTreeSet::new();
        for q in ds.queries() {
            let pos = ds.positive_set(q);
            c.positive_links += pos.len() as u64;
            distinct.extend(pos);
            c.eligible_negatives += ds.negative_set(q).len() as u64;
        }
        c.positive_pool = distinct.len() as u64;
        c
    }
}

/// Closed-form preparation cost with unit constants.
pub fn predict_cost(mode: PrepMode, c: &PrepCounts) -> CostLedger {
    let ver = c.positive_verification;
    let links = if ver { c.positive_links } else { 0 };
    match mode {
        PrepMode::FullHnm => CostLedger {
            extractions: c.n_q + c.n_k,
            comparisons: c.eligible_negatives + links,
            peak_cached: c.n_q + c.n_k,
        },
        PrepMode::PartialHnm => {
            let extra = if ver { c.positive_pool } else { 0 };
            CostLedger {
                extractions: c.n_q + c.pool + extra,
                comparisons: c.n_q * c.pool + links,
                peak_cached: c.n_q + c.pool + extra,
            }
        }
        PrepMode::Random => CostLedger::default(),
        PrepMode::PairOnly => {
            let pairs = c.n_q + c.identical_negatives;
            let verify = if ver { c.n_q + c.positive_pool } else { 0 };
            CostLedger {
                extractions: c.n_q + c.n_kp + 2 * c.identical_negatives + verify,
                comparisons: links,
                peak_cached: (2 * pairs.min(c.batch_size)).max(verify),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterDelta {
    pub counter: &'static str,
    pub measured: u64,
    pub predicted: u64,
    pub delta: i64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerCheck {
    pub pass: bool,
    pub deltas: Vec<CounterDelta>,
}

impl LedgerCheck {
    pub fn failures(&self) -> Vec<&'static str> {
        self.deltas.iter().filter(|d| !d.ok).map(|d| d.counter).collect()
    }
}

impl fmt::Display for LedgerCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", if self.pass { "pass" } else { "FAIL" })?;
        for d in &self.deltas {
            write!(
                f,
                " {}={} (predicted {}, delta {:+}{})",
                d.counter,
                d.measured,
                d.predicted,
                d.delta,
                if d.ok { "" } else { ", out of range" }
            )?;
        }
        Ok(())
    }
}

/// Passes iff every measured counter lies in `predicted·[1−slack, 1+slack]`.
pub fn assert_ledger(measured: &CostLedger, predicted: &CostLedger, slack: f64) -> LedgerCheck {
    let slack = slack.max(0.0);
    let deltas: Vec<CounterDelta> = [
        ("extractions", measured.extractions, predicted.extractions),
        ("comparisons", measured.comparisons, predicted.comparisons),
        ("peak_cached", measured.peak_cached, predicted.peak_cached),
    ]
    .into_iter()
    .map(|(counter, m, p)| {
        let (lo, hi) = (p as f64 * (1.0 - slack), p as f64 * (1.0 + slack));
        CounterDelta {
            counter,
            measured: m,
            predicted: p,
            delta: m as i64 - p as i64,
            ok: (m as f64) >= lo && (m as f64) <= hi,
        }
    })
    .collect();
    LedgerCheck { pass: deltas.iter().all(|d| d.ok), deltas }
}

/// Dataset for cost benchmarks: `n_k` database samples over `ceil(n_k/2)`
/// places and `n_q` queries spread round-robin over those places.
pub fn bench_dataset(n_q: usize, n_k: usize, feature_dim: usize, seed: u64) -> Result<GeoDataset> {
    if n_k < 2 {
        return Err(Error::invalid(format!("bench dataset needs n_k ≥ 2, got {n_k}")));
    }
    let places = n_k.div_ceil(2);
    let grid = (places as f64).sqrt().ceil() as usize;
    let spacing = 3.0 * DEFAULT_R_NEG;
    let center = |p: usize| ((p % grid) as f64 * spacing, (p / grid) as f64 * spacing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = || -> Vec<f64> { (0..feature_dim).map(|_| normal.sample(&mut rng)).collect() };
    let jitter = DEFAULT_R_POS / 4.0;

    let mut database = Vec::with_capacity(n_k);
    for i in 0..n_k {
        let (x, y) = center(i % places);
        let dx = if i < places { jitter } else { -jitter };
        database.push(GeoSample {
            id: i as u64,
            role: Role::Database,
            position: Position::planar(x + dx, y)?,
            features: features(),
        });
    }
    let mut queries = Vec::with_capacity(n_q);
    for j in 0..n_q {
        let (x, y) = center(j % places);
        queries.push(GeoSample {
            id: (n_k + j) as u64,
            role: Role::Query,
            position: Position::planar(x, y + jitter)?,
            features: features(),
        });
    }
    GeoDataset::new(queries, database, DEFAULT_R_POS, DEFAULT_R_NEG)
}

/// Runs one epoch of preparation in `mode` over every query of `ds`.
#[allow(clippy::too_many_arguments)]
pub fn measure_preparation(
    ds: &GeoDataset,
    mode: PrepMode,
    pool: usize,
    eta: f64,
    batch_size: usize,
    positive_verification: bool,
    embed: &dyn Embedder,
    seed: u64,
) -> Result<CostLedger> {
    let mut ledger = CostLedger::default();
    let n_q = ds.queries().len();
    match mode.mining() {
        Some(mining) => {
            let cfg = MiningConfig { mode: mining, pool_size: pool, positive_verification };
            mine_triplets(ds, n_q, &cfg, embed, seed, &mut ledger)?;
        }
        None => {
            let mut pairs = build_pairs(ds, n_q, eta, seed)?;
            if positive_verification {
                pairs = verify_positives(ds, &pairs, embed, &mut ledger)?;
            }
            debug_assert_eq!(pairs.iter().filter(|p| p.kind == PairKind::QueryPositive).count(), n_q);
            account_pairs(&pairs, batch_size, &mut ledger);
        }
    }
    Ok(ledger)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchGrid {
    pub n_q: Vec<usize>,
    pub n_k: Vec<usize>,
    pub pool: usize,
    pub modes: Vec<PrepMode>,
    pub slack: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub positive_verification: bool,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            n_q: vec![10, 50, 100],
            n_k: vec![100, 1000, 5000],
            pool: 50,
            modes: PrepMode::ALL.to_vec(),
            slack: 0.05,
            eta: 0.0,
            batch_size: 64,
            feature_dim: 8,
            positive_verification: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: PrepMode,
    pub n_q: usize,
    pub n_k: usize,
    pub pool: usize,
    pub measured: CostLedger,
    pub predicted: CostLedger,
    pub check: LedgerCheck,
}

pub const BENCH_HEADER: [&str; 11] = [
    "mode",
    "n_q",
    "n_k",
    "pool",
    "extractions",
    "comparisons",
    "peak_cached",
    "predicted_extractions",
    "predicted_comparisons",
    "predicted_peak_cached",
    "pass",
];

impl BenchRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.mode.to_string(),
            self.n_q.to_string(),
            self.n_k.to_string(),
            self.pool.to_string(),
            self.measured.extractions.to_string(),
            self.measured.comparisons.to_string(),
            self.measured.peak_cached.to_string(),
            self.predicted.extractions.to_string(),
            self.predicted.comparisons.to_string(),
            self.predicted.peak_cached.to_string(),
            self.check.pass.to_string(),
        ]
    }
}

/// Measures and predicts every `(mode, n_q, n_k)` cell of the grid.
pub fn bench_mining(grid: &BenchGrid) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n_q in &grid.n_q {
        for &n_k in &grid.n_k {
            let ds = bench_dataset(n_q, n_k, grid.feature_dim, grid.seed)?;
            let counts = PrepCounts::for_dataset(&ds, grid.pool, grid.eta, grid.batch_size, grid.positive_verification);
            for &mode in &grid.modes {
                let measured = measure_preparation(
                    &ds,
                    mode,
                    grid.pool,
                    grid.eta,
                    grid.batch_size,
                    grid.positive_verification,
                    &RawFeatures,
                    grid.seed,
                )
                .map_err(|e| e.with_context(format!("{mode} at n_q={n_q}, n_k={n_k}")))?;
                let predicted = predict_cost(mode, &counts);
                let check = assert_ledger(&measured, &predicted, grid.slack);
                rows.push(BenchRow { mode, n_q, n_k, pool: grid.pool, measured, predicted, check });
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}
