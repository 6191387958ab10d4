mod common;

use std::sync::Arc;
use std::time::Duration;

use chrono::{TimeZone, Utc};
use common::{brute_force_topk, entry, retrieval_benchmark};
use pricer_core::exec::ExecMode;
use pricer_core::vecindex::{
    read_snapshot, retrieve, search_topk_ann, search_topk_with, write_snapshot, Embedding, IndexSnapshot,
    RetrievalKind, Refresher, SnapshotStore,
};

#[test]
fn exact_topk_matches_oracle_and_ann_recall() {
    let (snapshot, points, queries) = retrieval_benchmark(60);
    let ids: Vec<String> = snapshot.entries().iter().map(|e| e.id.clone()).collect();
    let mut recall = 0.0;
    for q in &queries {
        let oracle = brute_force_topk(&points, &ids, q, 50);
        let emb = Embedding::normalize(q.clone()).unwrap();
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let got = search_topk_with(&snapshot, &emb, 50, mode).unwrap();
            assert_eq!(got.ids(), oracle.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>());
            for (h, (_, s)) in got.hits.iter().zip(&oracle) {
                assert!((h.score - s).abs() < 1e-9);
            }
        }
        let ann = search_topk_ann(&snapshot, &emb, 50, 200).unwrap();
        let hit = ann.ids().iter().filter(|id| oracle.iter().any(|(o, _)| o == *id)).count();
        recall += hit as f64 / 50.0;
    }
    recall /= queries.len() as f64;
    assert!(recall >= 0.95, "recall@50 = {recall}");
}

#[test]
fn self_query_ranks_first() {
    let (snapshot, _, _) = retrieval_benchmark(0);
    for e in snapshot.entries().iter().step_by(997) {
        for set in [
            search_topk_with(&snapshot, &e.embedding, 1, ExecMode::Parallel).unwrap(),
            search_topk_ann(&snapshot, &e.embedding, 1, 200).unwrap(),
        ] {
            assert_eq!(set.hits[0].id, e.id);
            assert!((set.hits[0].score - 1.0).abs() < 1e-6);
        }
    }
}

fn small_snapshot(graph: bool) -> IndexSnapshot {
    let raw = common::clustered(300, 8, 5, 0.5, 3);
    let entries = raw.iter().enumerate().map(|(i, p)| entry(format!("E{i}"), p)).collect();
    let at = Utc.with_ymd_and_hms(2025, 2, 1, 0, 0, 0).unwrap();
    IndexSnapshot::new(entries, 8, at, graph.then(Default::default)).unwrap()
}

#[test]
fn snapshot_file_roundtrip_preserves_results() {
    let snap = small_snapshot(true);
    let mut buf = Vec::new();
    write_snapshot(&mut buf, &snap).unwrap();
    let back = read_snapshot(buf.as_slice()).unwrap();
    assert_eq!(back, snap);
    let q = &snap.entries()[17].embedding;
    assert_eq!(
        search_topk_ann(&back, q, 10, 50).unwrap(),
        search_topk_ann(&snap, q, 10, 50).unwrap()
    );

    let mut again = Vec::new();
    write_snapshot(&mut again, &back).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn truncated_snapshot_is_rejected() {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, &small_snapshot(false)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let cut: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    assert!(read_snapshot(cut.as_bytes()).is_err());
}

#[test]
fn retrieve_excludes_self_and_handles_edges() {
    let snap = small_snapshot(true);
    let me = &snap.entries()[4];
    for kind in [RetrievalKind::Exact, RetrievalKind::Ann { ef: 64 }] {
        let set = retrieve(&snap, &me.id, &me.embedding, 5, kind, ExecMode::Parallel).unwrap();
        assert_eq!(set.len(), 5);
        assert!(!set.ids().contains(&me.id.as_str()));
        assert_eq!(set.query_id, me.id);
    }
    assert!(retrieve(&snap, "x", &me.embedding, 0, RetrievalKind::Exact, ExecMode::Sequential)
        .unwrap()
        .is_empty());
    let all = retrieve(&snap, "x", &me.embedding, 10_000, RetrievalKind::Exact, ExecMode::Sequential).unwrap();
    assert_eq!(all.len(), 300);
}

#[test]
fn store_swap_keeps_existing_readers_consistent() {
    let store = Arc::new(SnapshotStore::new(small_snapshot(false)));
    let held = store.current();
    let old = store.swap(IndexSnapshot::new(Vec::new(), 8, held.built_at(), None).unwrap());
    assert_eq!(held.len(), 300);
    assert_eq!(old.len(), 300);
    assert!(store.current().is_empty());
}

#[test]
fn refresher_swaps_in_rebuilt_snapshots() {
    let store = Arc::new(SnapshotStore::new(IndexSnapshot::new(Vec::new(), 8, Utc::now(), None).unwrap()));
    let refresher = Refresher::spawn(store.clone(), Duration::from_millis(20), || Ok(small_snapshot(false)));
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while store.current().is_empty() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    refresher.stop();
    assert_eq!(store.current().len(), 300);
}

#[test]
fn failed_rebuild_keeps_previous_snapshot() {
    let store = Arc::new(SnapshotStore::new(small_snapshot(false)));
    let refresher = Refresher::spawn(store.clone(), Duration::from_millis(10), || {
        Err(pricer_core::vecindex::VecIndexError::EmptyPool)
    });
    std::thread::sleep(Duration::from_millis(60));
    refresher.stop();
    assert_eq!(store.current().len(), 300);
}
