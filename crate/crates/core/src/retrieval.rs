//! Exact nearest-neighbour retrieval and Recall@N.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geodata::{distance_m, GeoDataset, GeoSample, Position};
use crate::sampling::Embedder;

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;
pub const RECALL_HEADER: [&str; 4] = ["N", "recall", "threshold_m", "n_queries"];

/// Database embeddings with unit rows, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    vectors: Tensor,
    positions: Vec<Position>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl EmbeddingIndex {
    /// Rows are L2-normalized and sorted by id. A zero row is rejected.
    pub fn from_vectors(ids: Vec<u64>, vectors: &Tensor, positions: Vec<Position>) -> Result<Self> {
        if ids.len() != vectors.rows() || ids.len() != positions.len() {
            return Err(Error::invalid(format!(
                "index needs aligned inputs, got {} ids, {} vectors, {} positions",
                ids.len(),
                vectors.rows(),
                positions.len()
            )));
        }
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        if let Some(w) = order.windows(2).find(|w| ids[w[0]] == ids[w[1]]) {
            return Err(Error::invalid(format!("duplicate id {} in index", ids[w[0]])));
        }
        let mut data = Vec::with_capacity(vectors.len());
        for &i in &order {
            let row = vectors.row(i);
            if row.iter().all(|x| *x == 0.0) {
                return Err(Error::NumericDegeneracy(format!("embedding of id {} is all zeros", ids[i])));
            }
            data.extend(normalized(row));
        }
        Ok(Self {
            ids: order.iter().map(|&i| ids[i]).collect(),
            vectors: Tensor::new(order.len(), vectors.cols(), data)?,
            positions: order.iter().map(|&i| positions[i]).collect(),
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Embeds every database sample in eval mode.
pub fn build_index(ds: &GeoDataset, embed: &dyn Embedder) -> Result<EmbeddingIndex> {
    let db: Vec<&GeoSample> = ds.database().iter().collect();
    let vectors = embed.embed(&db)?;
    EmbeddingIndex::from_vectors(db.iter().map(|s| s.id).collect(), &vectors, db.iter().map(|s| s.position).collect())
}

/// Ids of the `k` database rows closest to `q` (normalized first), nearest
/// first, ties by ascending id. `k` beyond the index size returns all rows.
pub fn knn(index: &EmbeddingIndex, q: &[f64], k: usize) -> Result<Vec<u64>> {
    if k == 0 {
        return Err(Error::invalid("knn needs k >= 1"));
    }
    if q.len() != index.dim() {
        return Err(Error::invalid(format!("query has dimension {}, index has dimension {}", q.len(), index.dim())));
    }
    let q = normalized(q);
    let mut scored: Vec<(f64, u64)> = index
        .vectors
        .row_iter()
        .zip(&index.ids)
        .map(|(row, &id)| (row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), id))
        .collect();
    let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub threshold_m: f64,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.n_values.iter().position(|&v| v == n).map(|i| self.recalls[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RECALL_HEADER)?;
        for (n, r) in self.n_values.iter().zip(&self.recalls) {
            w.write_record([n.to_string(), r.to_string(), self.threshold_m.to_string(), self.n_queries.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn print_table(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (n, r) in self.n_values.iter().zip(&self.recalls) {
            writeln!(out, "R@{n:<4} {:.4}", r)?;
        }
        Ok(())
    }
}

fn check_n_values(n_values: &[usize]) -> Result<()> {
    if n_values.is_empty() || n_values[0] == 0 || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("n_values must be strictly ascending positive integers, got {n_values:?}")));
    }
    Ok(())
}

/// 1-based rank of the first entry of `ranked` within `threshold_m` of
/// `truth`.
fn first_hit(index: &EmbeddingIndex, ranked: &[u64], truth: &Position, threshold_m: f64) -> Result<Option<usize>> {
    for (r, id) in ranked.iter().enumerate() {
        let i = index.ids.binary_search(id).expect("ids come from the index");
        if distance_m(&index.positions[i], truth)? <= threshold_m {
            return Ok(Some(r + 1));
        }
    }
    Ok(None)
}

/// Share of queries with a database sample within `threshold_m` among their
/// top-N retrievals, for each N.
pub fn recall_at_n(
    ds: &GeoDataset,
    index: &EmbeddingIndex,
    embed: &dyn Embedder,
    n_values: &[usize],
    threshold_m: f64,
) -> Result<RecallReport> {
    check_n_values(n_values)?;
    let queries: Vec<&GeoSample> = ds.queries().iter().collect();
    if queries.is_empty() {
        return Err(Error::invalid("recall needs at least one query"));
    }
    let q_emb = embed.embed(&queries)?;
    let positions: Vec<Position> = queries.iter().map(|q| q.position).collect();
    recall_from_embeddings(index, &q_emb, &positions, n_values, threshold_m)
}

/// Recall@N for query embeddings already computed.
pub fn recall_from_embeddings(
    index: &EmbeddingIndex,
    query_emb: &Tensor,
    positions: &[Position],
    n_values: &[usize],
    threshold_m: f64,
) -> Result<RecallReport> {
    check_n_values(n_values)?;
    if query_emb.rows() == 0 {
        return Err(Error::invalid("recall needs at least one query"));
    }
    if query_emb.rows() != positions.len() {
        return Err(Error::invalid("query embeddings and positions are misaligned"));
    }
    if !(threshold_m >= 0.0) {
        return Err(Error::invalid(format!("threshold must be non-negative, got {threshold_m}")));
    }
    let max_n = *n_values.last().expect("non-empty");
    let hits: Vec<Option<usize>> = (0..query_emb.rows())
        .into_par_iter()
        .map(|i| {
            let ranked = knn(index, query_emb.row(i), max_n)?;
            first_hit(index, &ranked, &positions[i], threshold_m)
        })
        .collect::<Result<_>>()?;
    let n_q = hits.len();
    let recalls = n_values
        .iter()
        .map(|&n| hits.iter().filter(|h| h.is_some_and(|r| r <= n)).count() as f64 / n_q as f64)
        .collect();
    Ok(RecallReport { n_values: n_values.to_vec(), recalls, threshold_m, n_queries: n_q })
}
