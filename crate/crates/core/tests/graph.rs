mod support;

use std::collections::{BTreeMap, BTreeSet};

use pathsynth_core::graph::{build_graph, ContextGraph};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::random_records;

proptest! {
    #[test]
    fn symmetric_and_witnessed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng);
        let g = build_graph(&records);
        let mut chunk_entities: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &records {
            for c in &r.chunk_ids {
                chunk_entities.entry(c).or_default().insert(&r.entity_id);
            }
        }
        for x in g.nodes() {
            for y in g.neighbors(x).unwrap() {
                prop_assert!(g.neighbors(y).unwrap().contains(&x.as_str()));
                for c in g.provenance(x, y).unwrap() {
                    let present = &chunk_entities[c.as_str()];
                    prop_assert!(present.contains(x.as_str()) && present.contains(y));
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_graph(&random_records(&mut rng));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("g.jsonl");
        g.save(&f).unwrap();
        let back = ContextGraph::load(&f).unwrap();
        prop_assert_eq!(back.stats(), g.stats());
        prop_assert_eq!(back.edges().count(), g.edges().count());
        for (a, b, p) in g.edges() {
            prop_assert_eq!(back.provenance(a, b), Some(p));
        }
    }
}
