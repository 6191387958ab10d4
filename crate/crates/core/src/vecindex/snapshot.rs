use std::collections::HashSet;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Embedder, Embedding, GraphParams, HnswGraph, ProviderKind, RetrievalSet, RetrievedRef, VecIndexError};
use crate::catalog::{CandidatePool, Listing};
use crate::exec::{self, ExecMode};

/// One indexed reference: id, price, the text shown in prompts, and its vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub price: f64,
    pub title: String,
    pub description: String,
    pub condition: String,
    pub embedding: Embedding,
}

impl IndexEntry {
    pub fn from_listing(listing: &Listing, embedding: Embedding) -> Self {
        Self {
            id: listing.id.clone(),
            price: listing.price,
            title: listing.title.clone(),
            description: listing.description.clone(),
            condition: listing.condition.clone(),
            embedding,
        }
    }
}

/// Immutable retrieval index over a candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot {
    built_at: DateTime<Utc>,
    dimension: usize,
    provider: Option<ProviderKind>,
    entries: Vec<IndexEntry>,
    graph: Option<HnswGraph>,
}

impl IndexSnapshot {
    /// Validates entries and, when `graph_params` is given, builds the
    /// approximate search graph. An empty entry list is allowed here (the
    /// pricer answers "no evidence"); [`build_index`] rejects empty pools.
    pub fn new(
        entries: Vec<IndexEntry>,
        dimension: usize,
        built_at: DateTime<Utc>,
        graph_params: Option<GraphParams>,
    ) -> Result<Self, VecIndexError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.embedding.dim() != dimension {
                return Err(VecIndexError::Dimension {
                    expected: dimension,
                    got: e.embedding.dim(),
                });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(VecIndexError::DuplicateId(e.id.clone()));
            }
        }
        let graph = graph_params.map(|p| HnswGraph::build(&entries, p));
        Ok(Self {
            built_at,
            dimension,
            provider: None,
            entries,
            graph,
        })
    }

    pub fn with_provider(mut self, provider: ProviderKind) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn built_at(&self) -> DateTime<Utc> {
        self.built_at
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider(&self) -> Option<ProviderKind> {
        self.provider
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn graph(&self) -> Option<&HnswGraph> {
        self.graph.as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(super) fn check_query(&self, query: &Embedding, k: usize) -> Result<(), VecIndexError> {
        if k == 0 {
            return Err(VecIndexError::ZeroK);
        }
        if query.dim() != self.dimension {
            return Err(VecIndexError::Dimension {
                expected: self.dimension,
                got: query.dim(),
            });
        }
        Ok(())
    }

    pub(super) fn retrieval_set(&self, order: &[usize], scores: &[f64], k: usize) -> RetrievalSet {
        let hits = order
            .iter()
            .map(|&i| {
                let e = &self.entries[i];
                RetrievedRef {
                    id: e.id.clone(),
                    score: scores[i],
                    price: e.price,
                    title: e.title.clone(),
                    description: e.description.clone(),
                    condition: e.condition.clone(),
                }
            })
            .collect();
        RetrievalSet {
            query_id: String::new(),
            k,
            hits,
        }
    }
}

/// Embeds every pool listing and builds a snapshot. Any embedding failure
/// fails the whole build and reports every failed id.
pub fn build_index(
    pool: &CandidatePool,
    embedder: &dyn Embedder,
    graph_params: Option<GraphParams>,
    built_at: DateTime<Utc>,
) -> Result<IndexSnapshot, VecIndexError> {
    if pool.is_empty() {
        return Err(VecIndexError::EmptyPool);
    }
    let embedded = exec::map(ExecMode::default(), &pool.listings, |l| embedder.embed(l));
    let mut entries = Vec::with_capacity(pool.len());
    let mut failed = Vec::new();
    for (listing, result) in pool.listings.iter().zip(embedded) {
        match result {
            Ok(e) => entries.push(IndexEntry::from_listing(listing, e)),
            Err(err) => failed.push((listing.id.clone(), err)),
        }
    }
    if !failed.is_empty() {
        return Err(VecIndexError::EmbedFailed { failed });
    }
    Ok(IndexSnapshot::new(entries, embedder.dimension(), built_at, graph_params)?.with_provider(embedder.kind()))
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    kind: String,
    dimension: usize,
    count: usize,
    built_at: DateTime<Utc>,
    provider: Option<ProviderKind>,
    graph: Option<GraphParams>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    kind: String,
    graph: HnswGraph,
}

const HEADER_KIND: &str = "index_header";
const GRAPH_KIND: &str = "graph";

/// Line-delimited snapshot file: a header (dimension, count, built_at,
/// provider, graph parameters), one record per entry, then the graph.
pub fn write_snapshot<W: Write>(mut out: W, snapshot: &IndexSnapshot) -> Result<(), VecIndexError> {
    let header = SnapshotHeader {
        kind: HEADER_KIND.into(),
        dimension: snapshot.dimension,
        count: snapshot.entries.len(),
        built_at: snapshot.built_at,
        provider: snapshot.provider,
        graph: snapshot.graph.as_ref().map(HnswGraph::params),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for e in &snapshot.entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    if let Some(graph) = &snapshot.graph {
        serde_json::to_writer(
            &mut out,
            &GraphRecord {
                kind: GRAPH_KIND.into(),
                graph: graph.clone(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(source: R) -> Result<IndexSnapshot, VecIndexError> {
    let mut lines = source.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| VecIndexError::Snapshot("missing header".into()))??;
    let header: SnapshotHeader =
        serde_json::from_str(&header_line).map_err(|e| VecIndexError::Snapshot(format!("bad header: {e}")))?;
    if header.kind != HEADER_KIND {
        return Err(VecIndexError::Snapshot(format!("unexpected header kind {:?}", header.kind)));
    }
    let mut entries = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let line = lines
            .next()
            .ok_or_else(|| VecIndexError::Snapshot(format!("expected {} entries", header.count)))??;
        entries.push(serde_json::from_str::<IndexEntry>(&line)?);
    }
    let graph = match lines.next() {
        Some(line) => {
            let rec: GraphRecord = serde_json::from_str(&line?)?;
            if rec.graph.len() != entries.len() {
                return Err(VecIndexError::Snapshot("graph size does not match entries".into()));
            }
            Some(rec.graph)
        }
        None => None,
    };
    if graph.is_some() != header.graph.is_some() {
        return Err(VecIndexError::Snapshot("graph record does not match header".into()));
    }
    // Graph is restored as stored rather than rebuilt.
    let mut snapshot = IndexSnapshot::new(entries, header.dimension, header.built_at, None)?;
    snapshot.graph = graph;
    snapshot.provider = header.provider;
    Ok(snapshot)
}
