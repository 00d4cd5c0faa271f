mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use pathsynth_core::embedding::{EmbeddingCache, Embedder, HashEmbedder};
use pathsynth_core::extraction::EntityMap;
use pathsynth_core::fixtures::{cross_document_corpus, FIXTURE_MAX_CHARS};
use pathsynth_core::graph::build_graph;
use pathsynth_core::traversal::{check_path, sample_paths, HopPolicy, PathSet, TraversalConfig, TraversalContext};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

fn sample(p: &Prepared, cfg: &TraversalConfig) -> PathSet {
    let ctx = TraversalContext {
        graph: &p.graph,
        entities: &p.entities,
        chunks: &p.chunks,
        embedder: &p.embedder,
    };
    sample_paths(&ctx, cfg).unwrap()
}

#[test]
fn long_tail_paths_are_edge_sound() {
    let p = prepare(fixture_docs("long_tail.jsonl"), FIXTURE_MAX_CHARS);
    let cfg = TraversalConfig {
        depth: 3,
        ..TraversalConfig::default()
    };
    let set = sample(&p, &cfg);
    assert!(!set.is_empty());
    let ctx = TraversalContext {
        graph: &p.graph,
        entities: &p.entities,
        chunks: &p.chunks,
        embedder: &p.embedder,
    };
    for path in &set.paths {
        check_path(path, &ctx, 3, false).unwrap();
        for w in path.steps.windows(2) {
            let prov = p.graph.provenance(&w[0].entity_id, &w[1].entity_id).expect("edge");
            assert!(!prov.is_empty());
        }
    }
}

#[test]
fn sampling_is_byte_deterministic() {
    let p = prepare(fixture_docs("long_tail.jsonl"), FIXTURE_MAX_CHARS);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TraversalConfig {
        hop_policy: HopPolicy::Mixed { ratio: 0.5 },
        ..TraversalConfig::default()
    };
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    sample(&p, &cfg).save(&a).unwrap();
    sample(&p, &cfg).save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn ring_paths_cross_documents() {
    let p = prepare(cross_document_corpus(12, 5), FIXTURE_MAX_CHARS);
    let set = sample(&p, &TraversalConfig::default());
    let multi: Vec<_> = set.paths.iter().filter(|x| x.hop_count >= 2).collect();
    assert!(!multi.is_empty());
    for path in multi {
        let docs: BTreeSet<&str> = path.chunks().map(|c| p.chunks.doc_of(c).unwrap()).collect();
        assert!(docs.len() >= 2, "{} stays in {docs:?}", path.path_id);
    }
    let same = sample(
        &p,
        &TraversalConfig {
            same_document_only: true,
            ..TraversalConfig::default()
        },
    );
    for path in &same.paths {
        let docs: BTreeSet<&str> = path.chunks().map(|c| p.chunks.doc_of(c).unwrap()).collect();
        assert_eq!(docs.len(), 1);
    }
}

#[test]
fn cache_does_not_change_paths() {
    let mut p = prepare(fixture_docs("long_tail.jsonl"), FIXTURE_MAX_CHARS);
    let cached = sample(&p, &TraversalConfig::default());
    p.embedder = Embedder::uncached(Box::new(HashEmbedder::new(64)));
    assert_eq!(sample(&p, &TraversalConfig::default()), cached);
    // warm cache, second pass served entirely from it
    let cache = Arc::new(EmbeddingCache::new());
    p.embedder = Embedder::new(Box::new(HashEmbedder::new(64)), cache.clone());
    sample(&p, &TraversalConfig::default());
    let misses = cache.misses();
    assert_eq!(sample(&p, &TraversalConfig::default()), cached);
    assert_eq!(cache.misses(), misses);
}

fn toy_paths(toy: &ToyTraversal, cfg: &TraversalConfig) -> PathSet {
    let entities = EntityMap::from_records(toy.records.clone());
    let graph = build_graph(entities.records());
    let chunks = toy.chunk_store();
    let embedder = toy.embedder();
    let ctx = TraversalContext {
        graph: &graph,
        entities: &entities,
        chunks: &chunks,
        embedder: &embedder,
    };
    sample_paths(&ctx, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn beam_bound(seed in any::<u64>(), d in 1usize..=3, w in 1usize..=3, two_hop in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = random_toy(&mut rng);
        let cfg = TraversalConfig {
            depth: d,
            beam_width: w,
            hop_policy: if two_hop && d >= 2 { HopPolicy::TwoHop } else { HopPolicy::Leaves },
            ..TraversalConfig::default()
        };
        let set = toy_paths(&toy, &cfg);
        let mut per_start: BTreeMap<(String, String), usize> = BTreeMap::new();
        for p in &set.paths {
            *per_start.entry((p.root_entity().to_string(), p.root_chunk.clone())).or_default() += 1;
            prop_assert!(p.hop_count >= 1 && p.hop_count <= d);
        }
        let bound = w.pow(d as u32);
        for (k, n) in per_start {
            prop_assert!(n <= bound, "{:?} emitted {} > {}", k, n, bound);
        }
    }

    #[test]
    fn paths_never_repeat_entities_or_chunks(seed in any::<u64>(), d in 1usize..=3, w in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = random_toy(&mut rng);
        let set = toy_paths(&toy, &TraversalConfig { depth: d, beam_width: w, ..TraversalConfig::default() });
        for p in &set.paths {
            let e: BTreeSet<&str> = p.entities().collect();
            let c: BTreeSet<&str> = p.chunks().collect();
            prop_assert_eq!(e.len(), p.steps.len());
            prop_assert_eq!(c.len(), p.steps.len());
            prop_assert_eq!(p.scores.len(), p.hop_count);
        }
    }
}
