//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use pricer_core::vecindex::{Embedding, GraphParams, IndexEntry, IndexSnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BENCH_POINTS: usize = 10_000;
pub const BENCH_DIM: usize = 32;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the open interval keeps ln away from zero.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Raw (unnormalised) vectors drawn around `clusters` random centres.
pub fn clustered(n: usize, dim: usize, clusters: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..clusters).map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect()).collect();
    (0..n)
        .map(|i| centres[i % clusters].iter().map(|c| c + spread * gaussian(&mut rng)).collect())
        .collect()
}

pub fn entry(id: String, raw: &[f64]) -> IndexEntry {
    IndexEntry {
        id,
        price: 1.0,
        title: String::new(),
        description: String::new(),
        condition: String::new(),
        embedding: Embedding::normalize(raw.to_vec()).unwrap(),
    }
}

/// The 10k-point retrieval benchmark: snapshot (with graph) and query vectors.
pub fn retrieval_benchmark(n_queries: usize) -> (IndexSnapshot, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let points = clustered(BENCH_POINTS, BENCH_DIM, 50, 0.6, 11);
    let queries = clustered(n_queries, BENCH_DIM, 50, 0.6, 12);
    let entries = points.iter().enumerate().map(|(i, p)| entry(format!("P{i:05}"), p)).collect();
    let built_at = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
    let snapshot = IndexSnapshot::new(entries, BENCH_DIM, built_at, Some(GraphParams::default())).unwrap();
    (snapshot, points, queries)
}

/// Exhaustive cosine ranking over raw vectors: score descending, then id.
pub fn brute_force_topk(points: &[Vec<f64>], ids: &[String], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut scored: Vec<(String, f64)> = points
        .iter()
        .zip(ids)
        .map(|(p, id)| {
            let dot: f64 = p.iter().zip(query).map(|(a, b)| a * b).sum();
            (id.clone(), dot / (norm(p) * qn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
