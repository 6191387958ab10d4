//! Embeddings, index snapshots and top-k cosine retrieval.
//!
//! Exact search is a full scan with a deterministic tie-break (score
//! descending, then listing id ascending) and is the oracle for the
//! approximate graph search in [`hnsw`].

mod embed;
pub mod hnsw;
mod snapshot;
mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};

pub use embed::{EmbedError, Embedder, FeatureHashEmbedder, ProviderKind, RemoteEmbedder, RemoteEmbedderConfig};
pub use hnsw::{GraphParams, HnswGraph};
pub use snapshot::{build_index, read_snapshot, write_snapshot, IndexEntry, IndexSnapshot};
pub use store::{Refresher, SnapshotStore, DEFAULT_REFRESH_INTERVAL};

/// Default embedding dimension.
pub const DEFAULT_DIMENSION: usize = 128;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VecIndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("embedding is not unit length (norm {0})")]
    NotNormalized(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot index an empty pool")]
    EmptyPool,
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("embedding failed for {} listing(s): {}", failed.len(), failed.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    EmbedFailed { failed: Vec<(String, EmbedError)> },
    #[error("snapshot has no approximate search graph")]
    NoGraph,
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A finite, L2-normalised embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalises `values` to unit length.
    pub fn normalize(mut values: Vec<f64>) -> Result<Self, VecIndexError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VecIndexError::NonFinite);
        }
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(VecIndexError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = VecIndexError;

    /// Accepts an already-normalised vector, as read back from a snapshot.
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VecIndexError::NonFinite);
        }
        let norm = l2(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(VecIndexError::NotNormalized(norm));
        }
        Ok(Self(values))
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two raw vectors, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, VecIndexError> {
    if a.len() != b.len() {
        return Err(VecIndexError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(VecIndexError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Similarity used for ranking. Both sides are unit vectors, so this is the
/// cosine; exact and graph search share it so their scores are bit-identical.
#[inline]
pub(crate) fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    dot(&a.0, &b.0)
}

/// One retrieved reference product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub id: String,
    pub score: f64,
    pub price: f64,
    pub title: String,
    pub description: String,
    pub condition: String,
}

impl RetrievedRef {
    /// Same rendering as [`crate::catalog::Listing::describe`].
    pub fn describe(&self) -> String {
        [self.title.trim(), self.description.trim(), self.condition.trim()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Top-k result, ordered by score descending then id ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub query_id: String,
    pub k: usize,
    pub hits: Vec<RetrievedRef>,
}

impl RetrievalSet {
    pub fn empty(query_id: impl Into<String>, k: usize) -> Self {
        Self {
            query_id: query_id.into(),
            k,
            hits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

/// Ranking order: higher score first, then ascending id.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k by full scan.
pub fn search_topk(index: &IndexSnapshot, query: &Embedding, k: usize) -> Result<RetrievalSet, VecIndexError> {
    search_topk_with(index, query, k, ExecMode::default())
}

/// [`search_topk`] with an explicit execution mode.
pub fn search_topk_with(
    index: &IndexSnapshot,
    query: &Embedding,
    k: usize,
    mode: ExecMode,
) -> Result<RetrievalSet, VecIndexError> {
    index.check_query(query, k)?;
    let entries = index.entries();
    let scores = exec::map(mode, entries, |e| similarity(query, &e.embedding));
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let cmp = |&a: &usize, &b: &usize| rank_order((scores[a], &entries[a].id), (scores[b], &entries[b].id));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(index.retrieval_set(&order, &scores, k))
}

/// Approximate top-k over the snapshot's graph. `ef` is the search beam; it
/// is raised to `k` when smaller.
pub fn search_topk_ann(
    index: &IndexSnapshot,
    query: &Embedding,
    k: usize,
    ef: usize,
) -> Result<RetrievalSet, VecIndexError> {
    index.check_query(query, k)?;
    let graph = index.graph().ok_or(VecIndexError::NoGraph)?;
    let found = graph.search(index.entries(), query, k, ef.max(k));
    let mut scores = vec![0.0; index.len()];
    let order: Vec<usize> = found
        .into_iter()
        .map(|(i, s)| {
            scores[i] = s;
            i
        })
        .collect();
    Ok(index.retrieval_set(&order, &scores, k))
}

/// Which search backs a retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RetrievalKind {
    #[default]
    Exact,
    Ann {
        ef: usize,
    },
}

/// Top-k references for `query_id`, never including the query's own entry.
/// `k = 0` and an empty index both give an empty set.
pub fn retrieve(
    index: &IndexSnapshot,
    query_id: &str,
    query: &Embedding,
    k: usize,
    kind: RetrievalKind,
    mode: ExecMode,
) -> Result<RetrievalSet, VecIndexError> {
    if k == 0 || index.is_empty() {
        return Ok(RetrievalSet::empty(query_id, k));
    }
    let fetch = (k + 1).min(index.len());
    let mut set = match kind {
        RetrievalKind::Exact => search_topk_with(index, query, fetch, mode)?,
        RetrievalKind::Ann { ef } => search_topk_ann(index, query, fetch, ef)?,
    };
    set.hits.retain(|h| h.id != query_id);
    set.hits.truncate(k);
    set.k = k;
    set.query_id = query_id.to_string();
    Ok(set)
}
