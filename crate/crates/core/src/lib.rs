//! Graph-guided synthetic corpus generation.
//!
//! The pipeline runs in seven stages:
//!
//! 1. [`corpus`]: ingest JSON Lines documents and split them into chunks.
//! 2. [`extraction`]: find entity mentions per chunk and merge them into an
//!    entity → chunks mapping.
//! 3. [`graph`]: induce an undirected co-occurrence graph over entities.
//! 4. [`traversal`]: sample cross-document paths with a similarity-ranked
//!    breadth-first beam rooted at every entity.
//! 5. [`balance`]: partition the path set into coverage-targeted subsets,
//!    preferring least-used entities and pairing sparse entities for
//!    contrastive generation.
//! 6. [`synthesis`]: render chain-of-thought and contrastive prompts, call an
//!    LLM backend, validate and write the synthetic corpus.
//! 7. [`analysis`]: entity distribution statistics (gini, CV, coverage).
//!
//! [`pipeline`] wires the stages together behind a single [`pipeline::RunConfig`].

pub mod analysis;
pub mod balance;
pub mod corpus;
pub mod embedding;
pub mod extraction;
pub mod fixtures;
pub mod graph;
pub mod jsonl;
pub mod llm;
pub mod pipeline;
pub mod synthesis;
pub mod traversal;

pub use analysis::{compare_reports, entity_distribution, DistributionReport, DistributionSource};
pub use balance::{
    balanced_sampling, secondary_sampling, BalanceConfig, CcPair, StandardLength,
    SubsetAllocation, UtilizationLedger,
};
pub use corpus::{chunk_document, ingest_corpus, Chunk, ChunkPolicy, ChunkStore, Document};
pub use embedding::{
    similarity, EmbeddingBackend, EmbeddingCache, EmbeddingVector, Embedder, HashEmbedder,
};
pub use extraction::{
    build_entity_map, extract_entities, normalize_mention, AliasTable, EntityMap, EntityRecord,
    ExtractionReport, ExtractorBackend, RuleBasedExtractor,
};
pub use graph::{build_graph, ContextGraph, GraphStats};
pub use pipeline::{run_pipeline, validate_config, RunConfig, RunManifest};
pub use synthesis::{
    generate, render_cc_prompt, render_cot_prompt, write_synthetic_corpus, GenerationRequest,
    LlmBackend, SynthRecord,
};
pub use traversal::{sample_paths, HopPolicy, Path, PathSet, Step, TraversalConfig};
