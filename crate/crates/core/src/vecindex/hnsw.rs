//! Hierarchical navigable small-world graph for approximate cosine search.
//!
//! Construction is sequential and seeded, so the same entries and parameters
//! always give the same graph. Ties inside the beam are broken by node index;
//! final results use the public ranking order (score, then listing id).

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rank_order, similarity, Embedding, IndexEntry};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Out-degree on upper layers; layer 0 allows twice this.
    pub m: usize,
    pub ef_construction: usize,
    /// Default search beam.
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 200,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cand {
    sim: f64,
    node: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    /// Greater means better: higher similarity, then lower node index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnswGraph {
    params: GraphParams,
    entry_point: Option<u32>,
    max_level: usize,
    /// `links[node][layer]` for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
}

impl HnswGraph {
    pub fn params(&self) -> GraphParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn build(entries: &[IndexEntry], params: GraphParams) -> Self {
        let params = GraphParams {
            m: params.m.max(2),
            ef_construction: params.ef_construction.max(1),
            ..params
        };
        let mut graph = Self {
            params,
            entry_point: None,
            max_level: 0,
            links: Vec::with_capacity(entries.len()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.m as f64).ln();
        for node in 0..entries.len() {
            let u: f64 = rng.random();
            let level = ((-(1.0 - u).ln() * level_mult).floor() as usize).min(MAX_LEVEL);
            graph.insert(entries, node as u32, level);
        }
        graph
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, entries: &[IndexEntry], node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry_point else {
            self.entry_point = Some(node);
            self.max_level = level;
            return;
        };
        let query = &entries[node as usize].embedding;
        let mut eps = vec![Cand {
            sim: similarity(query, &entries[entry as usize].embedding),
            node: entry,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            eps = self.search_layer(entries, query, &eps, 1, layer);
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(entries, query, &eps, self.params.ef_construction, layer);
            let chosen = select_neighbors(entries, &found, self.params.m);
            self.links[node as usize][layer] = chosen.clone();
            let cap = self.max_degree(layer);
            for nb in chosen {
                let list = &mut self.links[nb as usize][layer];
                list.push(node);
                if list.len() > cap {
                    let base = &entries[nb as usize].embedding;
                    let mut cands: Vec<Cand> = list
                        .iter()
                        .map(|&n| Cand {
                            sim: similarity(base, &entries[n as usize].embedding),
                            node: n,
                        })
                        .collect();
                    cands.sort_unstable_by(|a, b| b.cmp(a));
                    self.links[nb as usize][layer] = select_neighbors(entries, &cands, cap);
                }
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry_point = Some(node);
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates, best first.
    fn search_layer(
        &self,
        entries: &[IndexEntry],
        query: &Embedding,
        eps: &[Cand],
        ef: usize,
        layer: usize,
    ) -> Vec<Cand> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut best: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &ep in eps {
            if !std::mem::replace(&mut visited[ep.node as usize], true) {
                frontier.push(ep);
                best.push(Reverse(ep));
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(cur) = frontier.pop() {
            let worst = best.peek().expect("non-empty").0;
            if cur < worst && best.len() >= ef {
                break;
            }
            let Some(neighbors) = self.links[cur.node as usize].get(layer) else {
                continue;
            };
            for &nb in neighbors {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let cand = Cand {
                    sim: similarity(query, &entries[nb as usize].embedding),
                    node: nb,
                };
                if best.len() < ef || cand > best.peek().expect("non-empty").0 {
                    frontier.push(cand);
                    best.push(Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate top-k as `(entry index, score)` in ranking order.
    pub(crate) fn search(
        &self,
        entries: &[IndexEntry],
        query: &Embedding,
        k: usize,
        ef: usize,
    ) -> Vec<(usize, f64)> {
        let Some(entry) = self.entry_point else {
            return Vec::new();
        };
        let mut eps = vec![Cand {
            sim: similarity(query, &entries[entry as usize].embedding),
            node: entry,
        }];
        for layer in (1..=self.max_level).rev() {
            eps = self.search_layer(entries, query, &eps, 1, layer);
        }
        let mut found: Vec<(usize, f64)> = self
            .search_layer(entries, query, &eps, ef, 0)
            .into_iter()
            .map(|c| (c.node as usize, c.sim))
            .collect();
        found.sort_unstable_by(|a, b| rank_order((a.1, &entries[a.0].id), (b.1, &entries[b.0].id)));
        found.truncate(k);
        found
    }
}

/// Diversity-aware neighbour selection: keep a candidate only if it is closer
/// to the base than to every neighbour already kept, then top up with the
/// best pruned candidates. `cands` must be sorted best first.
fn select_neighbors(entries: &[IndexEntry], cands: &[Cand], m: usize) -> Vec<u32> {
    let mut kept: Vec<u32> = Vec::with_capacity(m);
    let mut pruned: Vec<u32> = Vec::new();
    for c in cands {
        if kept.len() >= m {
            break;
        }
        let e = &entries[c.node as usize].embedding;
        let diverse = kept
            .iter()
            .all(|&r| similarity(e, &entries[r as usize].embedding) < c.sim);
        if diverse {
            kept.push(c.node);
        } else {
            pruned.push(c.node);
        }
    }
    for p in pruned {
        if kept.len() >= m {
            break;
        }
        kept.push(p);
    }
    kept
}
