//! Shared setup for the criterion benches: the long-tail fixture pushed
//! through ingest, extraction and graph construction.

use std::sync::Arc;

use pathsynth_core::corpus::{chunk_document, ChunkPolicy, ChunkStore};
use pathsynth_core::embedding::{EmbeddingCache, Embedder, HashEmbedder};
use pathsynth_core::extraction::{build_entity_map, extract_all, AliasTable, EntityMap, RuleBasedExtractor};
use pathsynth_core::fixtures::{long_tail_corpus, LongTailSpec, FIXTURE_MAX_CHARS};
use pathsynth_core::graph::{build_graph, ContextGraph};

pub struct Prepared {
    pub chunks: ChunkStore,
    pub entities: EntityMap,
    pub graph: ContextGraph,
    pub embedder: Embedder,
}

pub fn prepare(params: &LongTailSpec) -> Prepared {
    let docs = long_tail_corpus(params);
    let chunks: Vec<_> = docs
        .iter()
        .flat_map(|d| {
            chunk_document(
                d,
                ChunkPolicy::Fixed {
                    max_chars: FIXTURE_MAX_CHARS,
                },
            )
            .expect("fixture chunks")
        })
        .collect();
    let reports = extract_all(&chunks, &RuleBasedExtractor::default()).expect("rule extraction");
    let (entities, _) = build_entity_map(&reports, &AliasTable::new());
    let graph = build_graph(entities.records());
    let embedder = Embedder::new(Box::new(HashEmbedder::new(64)), Arc::new(EmbeddingCache::new()));
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    embedder.embed_many(&texts, 8).expect("hash embeddings");
    Prepared {
        chunks: ChunkStore::new(chunks).with_titles(&docs),
        entities,
        graph,
        embedder,
    }
}
