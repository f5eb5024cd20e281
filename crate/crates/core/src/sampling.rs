//! Training batch construction.
//!
//! Pair-based methods get query–positive pairs plus identical-negative pairs
//! drawn from database samples outside every sampled query's positive set,
//! `round(η·m_q)` of them per epoch. The triplet baseline gets triplets whose
//! negatives are mined by embedding distance (full or partial database) or
//! drawn at random.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::costmodel::CostLedger;
use crate::error::{Error, Result};
use crate::geodata::{GeoDataset, GeoSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    QueryPositive,
    IdenticalNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub anchor_id: u64,
    pub partner_id: u64,
    pub kind: PairKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub query_id: u64,
    pub positive_id: u64,
    pub negative_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MiningMode {
    FullHnm,
    PartialHnm,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub mode: MiningMode,
    /// Database samples drawn per epoch for partial mining.
    pub pool_size: usize,
    /// Choose each positive as the embedding-nearest member of the positive
    /// set instead of uniformly. Costs one extraction per positive and one
    /// comparison per query–positive link.
    pub positive_verification: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { mode: MiningMode::FullHnm, pool_size: 100, positive_verification: false }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == MiningMode::PartialHnm && self.pool_size == 0 {
            return Err(Error::invalid("partial mining needs pool_size ≥ 1"));
        }
        Ok(())
    }
}

/// `round(η·m_q)` with ties to even.
pub fn identical_negative_count(m_q: usize, eta: f64) -> usize {
    (eta * m_q as f64).round_ties_even() as usize
}

/// Queries whose positive set is non-empty, with those sets.
fn queries_with_positives(ds: &GeoDataset) -> Vec<(&GeoSample, Vec<u64>)> {
    ds.queries().iter().map(|q| (q, ds.positive_set(q))).filter(|(_, p)| !p.is_empty()).collect()
}

/// Samples `m_q` queries without replacement, one uniform positive each, then
/// `round(η·m_q)` identical-negative pairs from database samples outside every
/// sampled query's positive set. Output order is shuffled by `rng_seed`.
pub fn build_pairs(ds: &GeoDataset, m_q: usize, eta: f64, rng_seed: u64) -> Result<Vec<Pair>> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be a finite non-negative number, got {eta}")));
    }
    let eligible = queries_with_positives(ds);
    if m_q > eligible.len() {
        return Err(Error::invalid(format!(
            "requested {m_q} queries but only {} of {} queries have a non-empty positive set (short by {})",
            eligible.len(),
            ds.queries().len(),
            m_q - eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picked = index::sample(&mut rng, eligible.len(), m_q).into_vec();

    let mut pairs = Vec::with_capacity(m_q);
    let mut positives_this_epoch = BTreeSet::new();
    for &i in &picked {
        let (q, pos) = &eligible[i];
        let partner = pos[rng.gen_range(0..pos.len())];
        positives_this_epoch.extend(pos.iter().copied());
        pairs.push(Pair { anchor_id: q.id, partner_id: partner, kind: PairKind::QueryPositive });
    }

    let n_neg = identical_negative_count(m_q, eta);
    if n_neg > 0 {
        let candidates: Vec<u64> =
            ds.database().iter().map(|s| s.id).filter(|id| !positives_this_epoch.contains(id)).collect();
        if n_neg > candidates.len() {
            return Err(Error::invalid(format!(
                "need {n_neg} identical-negative pairs (eta={eta}, m_q={m_q}) but only {} database samples lie outside the sampled positive sets (short by {})",
                candidates.len(),
                n_neg - candidates.len()
            )));
        }
        for j in index::sample(&mut rng, candidates.len(), n_neg) {
            let id = candidates[j];
            pairs.push(Pair { anchor_id: id, partner_id: id, kind: PairKind::IdenticalNegative });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Records the work of feeding `pairs` through an encoder in batches: each
/// pair contributes two view extractions, and at most two batches of views
/// are held at once.
pub fn account_pairs(pairs: &[Pair], batch_size: usize, ledger: &mut CostLedger) {
    ledger.record_extractions(2 * pairs.len() as u64);
    ledger.observe_cached(2 * pairs.len().min(batch_size) as u64);
}

/// Re-picks each query–positive partner as the embedding-nearest member of
/// the query's positive set. Identical-negative pairs pass through unchanged.
pub fn verify_positives(
    ds: &GeoDataset,
    pairs: &[Pair],
    embed: &dyn Embedder,
    ledger: &mut CostLedger,
) -> Result<Vec<Pair>> {
    let sample = |id: u64| ds.sample(id).ok_or_else(|| Error::invalid(format!("pair refers to unknown sample {id}")));
    let mut anchors = Vec::new();
    let mut sets = Vec::new();
    let mut distinct = BTreeSet::new();
    for p in pairs.iter().filter(|p| p.kind == PairKind::QueryPositive) {
        let q = sample(p.anchor_id)?;
        let pos = ds.positive_set(q);
        distinct.extend(pos.iter().copied());
        anchors.push(q);
        sets.push(pos);
    }
    let positives: Vec<&GeoSample> = distinct.iter().map(|&id| sample(id)).collect::<Result<_>>()?;
    let held = (anchors.len() + positives.len()) as u64;
    ledger.record_extractions(held);
    ledger.observe_cached(held);
    let qe = Embedded::build(embed, &anchors)?;
    let pe = Embedded::build(embed, &positives)?;
    let lookup = pe.lookup();

    let mut chosen = Vec::with_capacity(anchors.len());
    for (qi, set) in sets.iter().enumerate() {
        let cands: Vec<(u64, &[f64])> = set.iter().map(|id| (*id, pe.rows[lookup[id]].as_slice())).collect();
        ledger.record_comparisons(cands.len() as u64);
        chosen.push(nearest_normalized(&qe.rows[qi], &cands));
    }
    let mut chosen = chosen.into_iter();
    Ok(pairs
        .iter()
        .map(|p| match p.kind {
            PairKind::QueryPositive => Pair { partner_id: chosen.next().flatten().unwrap_or(p.partner_id), ..*p },
            PairKind::IdenticalNegative => *p,
        })
        .collect())
}

/// Produces embeddings for dataset samples, one row per sample.
pub trait Embedder {
    fn embed(&self, samples: &[&GeoSample]) -> Result<Tensor>;
}

/// Uses the raw feature vector as the embedding.
pub struct RawFeatures;

impl Embedder for RawFeatures {
    fn embed(&self, samples: &[&GeoSample]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        Tensor::from_rows(&rows)
    }
}

impl<F> Embedder for F
where
    F: Fn(&[&GeoSample]) -> Result<Tensor>,
{
    fn embed(&self, samples: &[&GeoSample]) -> Result<Tensor> {
        self(samples)
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return Err(Error::NumericDegeneracy(format!("cannot normalize a vector of norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Candidate id nearest to the query after L2-normalizing both sides. Ties go
/// to the smallest id.
pub fn hardest_negative(query_emb: &[f64], candidates: &[(u64, &[f64])]) -> Result<u64> {
    if candidates.is_empty() {
        return Err(Error::invalid("hardest_negative: no candidates"));
    }
    let q = unit(query_emb)?;
    let mut best: Option<(f64, u64)> = None;
    for &(id, v) in candidates {
        if v.len() != q.len() {
            return Err(Error::invalid(format!(
                "hardest_negative: candidate {id} has dimension {} but the query has {}",
                v.len(),
                q.len()
            )));
        }
        let d = sq_dist(&q, &unit(v)?);
        best = match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < id) => Some((bd, bid)),
            _ => Some((d, id)),
        };
    }
    Ok(best.expect("non-empty").1)
}

/// Same rule as [`hardest_negative`] over rows that are already unit-norm.
fn nearest_normalized(query: &[f64], candidates: &[(u64, &[f64])]) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for &(id, v) in candidates {
        let d = sq_dist(query, v);
        best = match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < id) => Some((bd, bid)),
            _ => Some((d, id)),
        };
    }
    best.map(|(_, id)| id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinedTriplets {
    pub triplets: Vec<Triplet>,
    /// Sampled queries dropped for lacking positives or negatives.
    pub skipped: usize,
}

struct Embedded {
    ids: Vec<u64>,
    rows: Vec<Vec<f64>>,
}

impl Embedded {
    fn build(embed: &dyn Embedder, samples: &[&GeoSample]) -> Result<Self> {
        let t = embed.embed(samples)?;
        if t.rows() != samples.len() {
            return Err(Error::invalid(format!("embedder returned {} rows for {} samples", t.rows(), samples.len())));
        }
        let rows = t.row_iter().map(unit).collect::<Result<Vec<_>>>()?;
        Ok(Self { ids: samples.iter().map(|s| s.id).collect(), rows })
    }

    fn lookup(&self) -> std::collections::HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

/// Builds one triplet per usable sampled query.
///
/// Every embedding computed for mining and every query–candidate distance
/// evaluation is recorded in `ledger`. Random mode embeds nothing.
pub fn mine_triplets(
    ds: &GeoDataset,
    m_q: usize,
    cfg: &MiningConfig,
    embed: &dyn Embedder,
    rng_seed: u64,
    ledger: &mut CostLedger,
) -> Result<MinedTriplets> {
    cfg.validate()?;
    let queries = ds.queries();
    if m_q > queries.len() {
        return Err(Error::invalid(format!(
            "requested {m_q} queries but the dataset has only {} (short by {})",
            queries.len(),
            m_q - queries.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let picked = index::sample(&mut rng, queries.len(), m_q).into_vec();

    struct Candidate<'a> {
        query: &'a GeoSample,
        positives: Vec<u64>,
        negatives: Vec<u64>,
    }
    let mut skipped = 0;
    let mut usable = Vec::with_capacity(m_q);
    for &i in &picked {
        let q = &queries[i];
        let positives = ds.positive_set(q);
        let negatives = ds.negative_set(q);
        if positives.is_empty() || negatives.is_empty() {
            skipped += 1;
            continue;
        }
        usable.push(Candidate { query: q, positives, negatives });
    }

    let query_refs: Vec<&GeoSample> = usable.iter().map(|c| c.query).collect();
    let sample_of = |id: u64| ds.sample(id).expect("ids come from the dataset");
    let positive_store: Option<Embedded>;

    let (query_emb, pool) = match cfg.mode {
        MiningMode::Random => (None, None),
        MiningMode::FullHnm => {
            let db: Vec<&GeoSample> = ds.database().iter().collect();
            let n = (query_refs.len() + db.len()) as u64;
            ledger.record_extractions(n);
            ledger.observe_cached(n);
            (Some(Embedded::build(embed, &query_refs)?), Some(Embedded::build(embed, &db)?))
        }
        MiningMode::PartialHnm => {
            let n = cfg.pool_size.min(ds.database().len());
            let mut idx = index::sample(&mut rng, ds.database().len(), n).into_vec();
            idx.sort_unstable();
            let pool: Vec<&GeoSample> = idx.iter().map(|&i| &ds.database()[i]).collect();
            let n = (query_refs.len() + pool.len()) as u64;
            ledger.record_extractions(n);
            ledger.observe_cached(n);
            (Some(Embedded::build(embed, &query_refs)?), Some(Embedded::build(embed, &pool)?))
        }
    };

    // full mining already holds every database embedding
    let positive_embeddings = match (cfg.positive_verification, cfg.mode) {
        (false, _) | (true, MiningMode::Random) => None,
        (true, MiningMode::FullHnm) => pool.as_ref().map(|p| (p, p.lookup())),
        (true, MiningMode::PartialHnm) => {
            let ids: BTreeSet<u64> = usable.iter().flat_map(|c| c.positives.iter().copied()).collect();
            let samples: Vec<&GeoSample> = ids.iter().map(|&id| sample_of(id)).collect();
            ledger.record_extractions(samples.len() as u64);
            let held = query_refs.len() + pool.as_ref().map_or(0, |p| p.ids.len()) + samples.len();
            ledger.observe_cached(held as u64);
            positive_store = Some(Embedded::build(embed, &samples)?);
            positive_store.as_ref().map(|p| (p, p.lookup()))
        }
    };

    // positives: uniform, or nearest in embedding space when verifying
    let mut positives = Vec::with_capacity(usable.len());
    for (qi, c) in usable.iter().enumerate() {
        let pos = match (&positive_embeddings, &query_emb) {
            (Some((pe, lookup)), Some(qe)) => {
                let cands: Vec<(u64, &[f64])> =
                    c.positives.iter().map(|id| (*id, pe.rows[lookup[id]].as_slice())).collect();
                ledger.record_comparisons(cands.len() as u64);
                nearest_normalized(&qe.rows[qi], &cands).expect("non-empty positives")
            }
            _ => c.positives[rng.gen_range(0..c.positives.len())],
        };
        positives.push(pos);
    }

    let negatives: Vec<Option<u64>> = match (&query_emb, &pool) {
        (Some(qe), Some(pool)) => {
            let lookup = pool.lookup();
            let per_query: Vec<(u64, Option<u64>)> = usable
                .par_iter()
                .enumerate()
                .map(|(qi, c)| {
                    let cands: Vec<(u64, &[f64])> = c
                        .negatives
                        .iter()
                        .filter_map(|id| lookup.get(id).map(|&j| (*id, pool.rows[j].as_slice())))
                        .collect();
                    (cands.len() as u64, nearest_normalized(&qe.rows[qi], &cands))
                })
                .collect();
            let mut out = Vec::with_capacity(per_query.len());
            for (n, best) in per_query {
                ledger.record_comparisons(n);
                out.push(best);
            }
            out
        }
        _ => usable.iter().map(|c| Some(c.negatives[rng.gen_range(0..c.negatives.len())])).collect(),
    };

    let mut triplets = Vec::with_capacity(usable.len());
    for ((c, pos), neg) in usable.iter().zip(positives).zip(negatives) {
        match neg {
            Some(neg) => triplets.push(Triplet { query_id: c.query.id, positive_id: pos, negative_id: neg }),
            // partial pool held none of this query's negatives
            None => skipped += 1,
        }
    }
    Ok(MinedTriplets { triplets, skipped })
}
