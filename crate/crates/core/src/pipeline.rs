//! End-to-end run: ingest → extract → graph → sample → balance → generate →
//! analyze, with every stage's artifacts persisted under the work directory.
//!
//! A stage is skipped when its stamp (a digest of its parameters and input
//! files) matches and its outputs still hold the digests recorded with the
//! stamp. Wall-clock timings go to `timings.json` so that `run_manifest.json`
//! depends only on inputs, config and seeds.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, DistributionReport, SourceData};
use crate::balance::{self, BalanceConfig, StandardLength, SubsetAllocation};
use crate::corpus::{self, Chunk, ChunkPolicy, ChunkStore, Document};
use crate::embedding::{EmbeddingBackend, EmbeddingCache, Embedder, HashEmbedder, SimilarityKind};
use crate::extraction::{self, AliasTable, EntityMap, ExtractionReport, ExtractorBackend, LlmExtractor, RuleBasedExtractor};
use crate::graph::{build_graph, ContextGraph};
use crate::jsonl;
use crate::llm::{DecodeParams, LlmBackend};
use crate::synthesis::{
    self, FaultInjectingLlm, GenerationOutcome, MockLlm, RenderOptions, RetryPolicy, SynthManifest, SynthRecord,
};
use crate::traversal::{self, HopPolicy, PathSet, TraversalConfig, TraversalContext};

pub const STAGES: [&str; 7] = ["ingest", "extract", "graph", "sample", "balance", "generate", "analyze"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            PipelineError::Config(_) => None,
        }
    }
}

fn stage_err<E: Into<Box<dyn StdError + Send + Sync>>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

// ---------------------------------------------------------------------------
// config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
    pub aliases: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            work_dir: PathBuf::from("run"),
            aliases: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkingKind {
    Fixed,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub policy: ChunkingKind,
    pub max_chars: usize,
    pub breakpoint_percentile: f64,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            policy: ChunkingKind::Fixed,
            max_chars: corpus::DEFAULT_MAX_CHARS,
            breakpoint_percentile: corpus::DEFAULT_BREAKPOINT_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub backend: ExtractorKind,
    pub max_mentions: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            backend: ExtractorKind::Rules,
            max_mentions: extraction::DEFAULT_MAX_MENTIONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingKind,
    pub dim: usize,
    pub max_in_flight: usize,
    pub max_retries: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: EmbeddingKind::Hash,
            dim: 64,
            max_in_flight: 8,
            max_retries: 3,
        }
    }
}

/// Hop policy, or `auto`: sample one-hop and two-hop path sets and switch
/// from the first to the second once generated volume passes a multiple of
/// the raw corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum HopSchedule {
    #[default]
    Auto,
    Fixed(HopPolicy),
}

impl FromStr for HopSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            Ok(HopSchedule::Auto)
        } else {
            s.parse().map(HopSchedule::Fixed)
        }
    }
}

impl Serialize for HopSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            HopSchedule::Auto => s.serialize_str("auto"),
            HopSchedule::Fixed(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for HopSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraversalSection {
    pub max_start_paragraphs: usize,
    pub depth: usize,
    pub beam_width: usize,
    pub hop_policy: HopSchedule,
    pub same_document_only: bool,
    pub similarity: SimilarityKind,
}

impl Default for TraversalSection {
    fn default() -> Self {
        let t = TraversalConfig::default();
        Self {
            max_start_paragraphs: t.max_start_paragraphs,
            depth: t.depth,
            beam_width: t.beam_width,
            hop_policy: HopSchedule::Auto,
            same_document_only: false,
            similarity: t.similarity,
        }
    }
}

impl TraversalSection {
    pub fn to_config(&self, policy: HopPolicy, seed: u64) -> TraversalConfig {
        TraversalConfig {
            max_start_paragraphs: self.max_start_paragraphs,
            depth: self.depth,
            beam_width: self.beam_width,
            hop_policy: policy,
            same_document_only: self.same_document_only,
            rng_seed: seed,
            similarity: self.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceSection {
    pub target_coverage: f64,
    pub standard_length: StandardLength,
}

impl Default for BalanceSection {
    fn default() -> Self {
        Self {
            target_coverage: 1.0,
            standard_length: StandardLength::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmKind {
    Mock,
    /// Mock with injected schema and transient faults.
    Faulty,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub backend: LlmKind,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    /// Under the `auto` hop schedule, one-hop subsets are generated while
    /// generated characters stay within this multiple of the raw corpus.
    pub one_hop_volume_multiple: f64,
    /// Stop generating once this multiple of the raw corpus is reached.
    pub max_volume_multiple: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let d = DecodeParams::default();
        let r = RetryPolicy::default();
        Self {
            backend: LlmKind::Mock,
            temperature: d.temperature,
            max_tokens: d.max_tokens,
            max_retries: r.max_retries,
            max_in_flight: r.max_in_flight,
            timeout_secs: 120,
            one_hop_volume_multiple: 4.5,
            max_volume_multiple: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub buckets: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            buckets: analysis::DEFAULT_BUCKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random generator in the run.
    pub seed: u64,
    pub paths: PathsConfig,
    pub chunking: ChunkingConfig,
    pub extraction: ExtractionConfig,
    pub embedding: EmbeddingConfig,
    pub traversal: TraversalSection,
    pub balance: BalanceSection,
    pub generation: GenerationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: PathsConfig::default(),
            chunking: ChunkingConfig::default(),
            extraction: ExtractionConfig::default(),
            embedding: EmbeddingConfig::default(),
            traversal: TraversalSection::default(),
            balance: BalanceSection::default(),
            generation: GenerationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(vec![e.to_string()]))
    }

    /// Parse a config file; relative paths resolve against its directory.
    pub fn load(path: &FsPath) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(FsPath::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.corpus);
        resolve(&mut cfg.paths.work_dir);
        if let Some(a) = cfg.paths.aliases.as_mut() {
            resolve(a);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn balance_config(&self) -> BalanceConfig {
        BalanceConfig {
            target_coverage: self.balance.target_coverage,
            standard_length: self.balance.standard_length,
            rng_seed: self.seed,
        }
    }

    pub fn decode(&self) -> DecodeParams {
        DecodeParams {
            temperature: self.generation.temperature,
            max_tokens: self.generation.max_tokens,
        }
    }
}

/// Every violated precondition as "field: reason". Empty iff valid.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut push = |field: &str, why: String| out.push(format!("{field}: {why}"));
    if cfg.chunking.max_chars == 0 {
        push("chunking.max_chars", "must be positive".into());
    }
    let p = cfg.chunking.breakpoint_percentile;
    if !(0.0..=100.0).contains(&p) {
        push("chunking.breakpoint_percentile", format!("{p} outside [0, 100]"));
    }
    if cfg.extraction.max_mentions == 0 {
        push("extraction.max_mentions", "must be positive".into());
    }
    if cfg.embedding.dim == 0 {
        push("embedding.dim", "must be positive".into());
    }
    if cfg.embedding.max_in_flight == 0 {
        push("embedding.max_in_flight", "must be positive".into());
    }
    let policy = match cfg.traversal.hop_policy {
        HopSchedule::Auto => {
            if cfg.traversal.depth < 2 {
                push("traversal.hop_policy", "auto needs depth >= 2".into());
            }
            HopPolicy::OneHop
        }
        HopSchedule::Fixed(p) => p,
    };
    for (field, why) in cfg.traversal.to_config(policy, cfg.seed).violations() {
        push(&format!("traversal.{field}"), why);
    }
    for (field, why) in cfg.balance_config().violations() {
        push(&format!("balance.{field}"), why);
    }
    let t = cfg.generation.temperature;
    if !(0.0..=2.0).contains(&t) {
        push("generation.temperature", format!("{t} outside [0, 2]"));
    }
    if cfg.generation.max_tokens == 0 {
        push("generation.max_tokens", "must be positive".into());
    }
    if cfg.generation.max_in_flight == 0 {
        push("generation.max_in_flight", "must be positive".into());
    }
    if cfg.generation.one_hop_volume_multiple.is_nan() || cfg.generation.one_hop_volume_multiple < 0.0 {
        push("generation.one_hop_volume_multiple", "must be non-negative".into());
    }
    if let Some(m) = cfg.generation.max_volume_multiple {
        if m.is_nan() || m <= 0.0 {
            push("generation.max_volume_multiple", "must be positive".into());
        }
    }
    if cfg.analysis.buckets == 0 {
        push("analysis.buckets", "must be positive".into());
    }
    if !cfg!(feature = "remote")
        && (cfg.embedding.backend == EmbeddingKind::Remote
            || cfg.generation.backend == LlmKind::Remote
            || cfg.extraction.backend == ExtractorKind::Llm)
    {
        push("backend", "remote backends need the `remote` feature".into());
    }
    out
}

// ---------------------------------------------------------------------------
// manifest and stamps

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    key: String,
    outputs: BTreeMap<String, String>,
    counts: BTreeMap<String, u64>,
}

pub fn file_digest(path: &FsPath) -> std::io::Result<String> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    loop {
        let buf = std::io::BufRead::fill_buf(&mut f)?;
        if buf.is_empty() {
            break;
        }
        h.update(buf);
        let n = buf.len();
        std::io::BufRead::consume(&mut f, n);
    }
    Ok(hex::encode(h.finalize()))
}

fn json_digest<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &FsPath) -> Result<T, Box<dyn StdError + Send + Sync>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Artifact file names inside the work directory.
pub mod artifacts {
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const CHUNKS: &str = "chunks.jsonl";
    pub const EXTRACTION: &str = "extraction.jsonl";
    pub const ENTITIES: &str = "entities.jsonl";
    pub const GRAPH: &str = "graph.jsonl";
    pub const GRAPH_STATS: &str = "graph_stats.json";
    pub const PATHS: &str = "paths.jsonl";
    pub const SUBSETS: &str = "subsets.jsonl";
    pub const SYNTHETIC: &str = "synthetic.jsonl";
    pub const REJECTIONS: &str = "rejections.jsonl";
    pub const SYNTH_MANIFEST: &str = "synth_manifest.json";
    pub const ANALYSIS: &str = "analysis.json";
    pub const RAW_COUNTS: &str = "raw_counts.csv";
    pub const SYNTH_COUNTS: &str = "synth_counts.csv";
    pub const RAW_HISTOGRAM: &str = "raw_histogram.svg";
    pub const SYNTH_HISTOGRAM: &str = "synth_histogram.svg";
    pub const EMBEDDING_CACHE: &str = "embedding_cache.jsonl";
    pub const MANIFEST: &str = "run_manifest.json";
    pub const TIMINGS: &str = "timings.json";
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    work: PathBuf,
    manifest: RunManifest,
    timings: Vec<StageTiming>,
}

type Counts = BTreeMap<String, u64>;

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.work.join(".stamps").join(format!("{stage}.json"))
    }

    /// Run `compute` unless a matching stamp shows its outputs are current.
    fn stage<P: Serialize>(
        &mut self,
        stage: &'static str,
        params: &P,
        inputs: &[(&str, PathBuf)],
        outputs: &[&str],
        compute: impl FnOnce(&Self) -> Result<Counts, Box<dyn StdError + Send + Sync>>,
    ) -> Result<(), PipelineError> {
        let started = Instant::now();
        let mut input_digests = BTreeMap::new();
        for (name, path) in inputs {
            let d = file_digest(path).map_err(|e| PipelineError::Stage {
                stage,
                source: format!("cannot read {}: {e}", path.display()).into(),
            })?;
            input_digests.insert(name.to_string(), d);
        }
        let key = json_digest(&(stage, params, &input_digests));
        let current = |s: &Stamp| {
            s.key == key
                && outputs
                    .iter()
                    .all(|o| file_digest(&self.path(o)).ok().as_ref() == s.outputs.get(*o))
        };
        let stamp: Option<Stamp> = read_json(&self.stamp_path(stage)).ok();
        let (counts, output_digests, resumed) = match stamp.filter(current) {
            Some(s) => {
                log::info!("stage {stage}: outputs current, skipping");
                (s.counts, s.outputs, true)
            }
            None => {
                log::info!("stage {stage}: running");
                let counts = compute(self).map_err(|e| PipelineError::Stage { stage, source: e })?;
                let mut digests = BTreeMap::new();
                for o in outputs {
                    digests.insert(o.to_string(), file_digest(&self.path(o)).map_err(stage_err(stage))?);
                }
                let stamp = Stamp {
                    key,
                    outputs: digests.clone(),
                    counts: counts.clone(),
                };
                fs::create_dir_all(self.work.join(".stamps")).map_err(stage_err(stage))?;
                write_json(&self.stamp_path(stage), &stamp).map_err(stage_err(stage))?;
                (counts, digests, false)
            }
        };
        self.manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            inputs: input_digests,
            outputs: output_digests,
            counts,
        });
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: started.elapsed().as_millis(),
            resumed,
        });
        Ok(())
    }
}

fn counts<const N: usize>(pairs: [(&str, usize); N]) -> Counts {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v as u64)).collect()
}

// ---------------------------------------------------------------------------
// backends

pub fn make_embedder(cfg: &EmbeddingConfig, cache: Arc<EmbeddingCache>) -> Result<Embedder, String> {
    let backend: Box<dyn EmbeddingBackend> = match cfg.backend {
        EmbeddingKind::Hash => Box::new(HashEmbedder::new(cfg.dim)),
        #[cfg(feature = "remote")]
        EmbeddingKind::Remote => Box::new(
            crate::embedding::RemoteEmbedder::from_env(cfg.max_retries).map_err(|e| e.to_string())?,
        ),
        #[cfg(not(feature = "remote"))]
        EmbeddingKind::Remote => return Err("remote embeddings need the `remote` feature".into()),
    };
    Ok(Embedder::new(backend, cache))
}

pub fn make_llm(kind: LlmKind, seed: u64, timeout_secs: u64) -> Result<Box<dyn LlmBackend>, String> {
    Ok(match kind {
        LlmKind::Mock => Box::new(MockLlm),
        LlmKind::Faulty => Box::new(FaultInjectingLlm::new(seed)),
        #[cfg(feature = "remote")]
        LlmKind::Remote => Box::new(
            crate::llm::RemoteChat::from_env(std::time::Duration::from_secs(timeout_secs))
                .map_err(|e| e.to_string())?,
        ),
        #[cfg(not(feature = "remote"))]
        LlmKind::Remote => {
            let _ = timeout_secs;
            return Err("remote LLM needs the `remote` feature".into());
        }
    })
}

fn load_cache(path: &FsPath) -> Arc<EmbeddingCache> {
    match EmbeddingCache::load(path) {
        Ok(c) => Arc::new(c),
        Err(_) => Arc::new(EmbeddingCache::new()),
    }
}

// ---------------------------------------------------------------------------
// stage bodies, also used by the CLI subcommands

pub fn chunk_corpus(docs: &[Document], chunking: &ChunkingConfig, embedder: &Embedder) -> Result<Vec<Chunk>, corpus::CorpusError> {
    let policy = match chunking.policy {
        ChunkingKind::Fixed => ChunkPolicy::Fixed {
            max_chars: chunking.max_chars,
        },
        ChunkingKind::Semantic => ChunkPolicy::Semantic {
            embedder,
            breakpoint_percentile: chunking.breakpoint_percentile,
        },
    };
    let mut out = Vec::new();
    for d in docs {
        out.extend(corpus::chunk_document(d, policy)?);
    }
    Ok(out)
}

pub fn load_chunk_store(work: &FsPath) -> Result<ChunkStore, jsonl::JsonlError> {
    let chunks: Vec<Chunk> = jsonl::read_file(&work.join(artifacts::CHUNKS))?;
    let docs: Vec<Document> = jsonl::read_file(&work.join(artifacts::DOCUMENTS))?;
    Ok(ChunkStore::new(chunks).with_titles(&docs))
}

/// Sample under the configured schedule. Path ids are prefixed `h1-`/`h2-`
/// under `auto` so the two sets never collide.
pub fn sample_for_schedule(
    ctx: &TraversalContext<'_>,
    section: &TraversalSection,
    seed: u64,
) -> Result<PathSet, traversal::TraversalError> {
    match section.hop_policy {
        HopSchedule::Fixed(p) => traversal::sample_paths(ctx, &section.to_config(p, seed)),
        HopSchedule::Auto => {
            let mut all = Vec::new();
            for (tag, policy) in [("h1", HopPolicy::OneHop), ("h2", HopPolicy::TwoHop)] {
                let set = traversal::sample_paths(ctx, &section.to_config(policy, seed))?;
                all.extend(set.paths.into_iter().map(|mut p| {
                    p.path_id = format!("{tag}-{}", p.path_id);
                    p
                }));
            }
            Ok(PathSet { paths: all })
        }
    }
}

fn renumber(mut s: SubsetAllocation, index: usize) -> SubsetAllocation {
    s.subset_index = index;
    for (j, p) in s.cc_pairs.iter_mut().enumerate() {
        p.pair_id = format!("s{index:04}-cc{j:04}");
    }
    s
}

/// Balance each hop group separately (one group unless the schedule is
/// `auto`) and concatenate the subsets, one-hop first.
pub fn balance_for_schedule(
    paths: &PathSet,
    entities: &EntityMap,
    total_chunks: usize,
    schedule: HopSchedule,
    cfg: &BalanceConfig,
) -> Result<Vec<SubsetAllocation>, balance::BalanceError> {
    let groups: Vec<PathSet> = match schedule {
        HopSchedule::Fixed(_) => vec![paths.clone()],
        HopSchedule::Auto => {
            let (one, two): (Vec<_>, Vec<_>) = paths.paths.iter().cloned().partition(|p| p.hop_count == 1);
            vec![PathSet { paths: one }, PathSet { paths: two }]
        }
    };
    let mut out = Vec::new();
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let outcome = balance::secondary_sampling(g, entities, total_chunks, cfg)?;
        for s in outcome.subsets {
            let i = out.len();
            out.push(renumber(s, i));
        }
    }
    Ok(out)
}

fn subset_hop(s: &SubsetAllocation) -> Option<usize> {
    s.cot_paths.iter().map(|p| p.hop_count).max()
}

/// Generate subset by subset. Under `auto`, one-hop subsets are generated
/// while cumulative generated characters are within
/// `one_hop_volume_multiple × raw_chars`, then two-hop subsets follow.
pub fn generate_for_schedule(
    subsets: &[SubsetAllocation],
    chunks: &ChunkStore,
    entities: &EntityMap,
    cfg: &RunConfig,
    backend: &dyn LlmBackend,
) -> Result<GenerationOutcome, synthesis::SynthesisError> {
    let raw_chars: usize = chunks.chunks().iter().map(|c| c.text.chars().count()).sum();
    let options = RenderOptions {
        same_document: cfg.traversal.same_document_only,
        decode: cfg.decode(),
    };
    let policy = RetryPolicy {
        max_retries: cfg.generation.max_retries,
        max_in_flight: cfg.generation.max_in_flight,
    };
    let one_hop_cap = cfg.generation.one_hop_volume_multiple * raw_chars as f64;
    let total_cap = cfg.generation.max_volume_multiple.map(|m| m * raw_chars as f64);
    let mut out = GenerationOutcome::default();
    let mut volume = 0usize;
    let mut hop = 1;
    for s in subsets {
        let h = subset_hop(s).unwrap_or(hop);
        hop = h;
        if total_cap.is_some_and(|cap| volume as f64 >= cap) {
            log::info!("volume cap reached after {volume} generated characters");
            break;
        }
        if cfg.traversal.hop_policy == HopSchedule::Auto && h == 1 && volume as f64 > one_hop_cap {
            continue;
        }
        let requests = synthesis::build_requests(std::slice::from_ref(s), chunks, entities, &options)?;
        let batch = synthesis::generate(&requests, backend, &policy)?;
        volume += batch.records.iter().map(synthesis::generated_chars).sum::<usize>();
        out.records.extend(batch.records);
        out.rejections.extend(batch.rejections);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub raw: DistributionReport,
    pub cot: DistributionReport,
    pub cot_cc: DistributionReport,
    pub synth: DistributionReport,
    pub cot_vs_raw: analysis::ComparisonSummary,
    pub cot_cc_vs_raw: analysis::ComparisonSummary,
    pub synth_vs_raw: analysis::ComparisonSummary,
}

pub fn analyze(
    chunks: &ChunkStore,
    entities: &EntityMap,
    subsets: &[SubsetAllocation],
    records: &[SynthRecord],
    buckets: usize,
) -> Result<AnalysisSummary, analysis::AnalysisError> {
    let raw = analysis::entity_distribution(&SourceData::Raw(chunks), entities, buckets)?;
    let cot = analysis::entity_distribution(
        &SourceData::Subsets {
            subsets,
            include_cc: false,
        },
        entities,
        buckets,
    )?;
    let cot_cc = analysis::entity_distribution(
        &SourceData::Subsets {
            subsets,
            include_cc: true,
        },
        entities,
        buckets,
    )?;
    let synth = analysis::entity_distribution(&SourceData::Synth(records), entities, buckets)?;
    Ok(AnalysisSummary {
        cot_vs_raw: analysis::compare_reports(&raw, &cot)?,
        cot_cc_vs_raw: analysis::compare_reports(&raw, &cot_cc)?,
        synth_vs_raw: analysis::compare_reports(&raw, &synth)?,
        raw,
        cot,
        cot_cc,
        synth,
    })
}

// ---------------------------------------------------------------------------
// run

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest, PipelineError> {
    let violations = validate_config(cfg);
    if !violations.is_empty() {
        return Err(PipelineError::Config(violations));
    }
    let work = cfg.paths.work_dir.clone();
    fs::create_dir_all(&work).map_err(stage_err("ingest"))?;
    let mut runner = Runner {
        cfg,
        work,
        manifest: RunManifest {
            config_digest: json_digest(&cfg_fingerprint(cfg)),
            stages: Vec::new(),
        },
        timings: Vec::new(),
    };
    let cache_path = runner.path(artifacts::EMBEDDING_CACHE);
    let cache = load_cache(&cache_path);
    let embedder = make_embedder(&cfg.embedding, cache.clone()).map_err(stage_err("ingest"))?;

    runner.stage(
        "ingest",
        &(&cfg.chunking, &cfg.embedding.backend, cfg.embedding.dim),
        &[("corpus", cfg.paths.corpus.clone())],
        &[artifacts::DOCUMENTS, artifacts::CHUNKS],
        |r| {
            let docs = corpus::ingest_corpus(BufReader::new(File::open(&r.cfg.paths.corpus)?))?;
            let chunks = chunk_corpus(&docs, &r.cfg.chunking, &embedder)?;
            jsonl::write_file(&r.path(artifacts::DOCUMENTS), &docs)?;
            jsonl::write_file(&r.path(artifacts::CHUNKS), &chunks)?;
            Ok(counts([("documents", docs.len()), ("chunks", chunks.len())]))
        },
    )?;

    let mut extract_inputs = vec![("chunks", runner.path(artifacts::CHUNKS))];
    if let Some(a) = &cfg.paths.aliases {
        extract_inputs.push(("aliases", a.clone()));
    }
    runner.stage(
        "extract",
        &cfg.extraction,
        &extract_inputs,
        &[artifacts::EXTRACTION, artifacts::ENTITIES],
        |r| {
            let chunks: Vec<Chunk> = jsonl::read_file(&r.path(artifacts::CHUNKS))?;
            let aliases = match &r.cfg.paths.aliases {
                Some(p) => AliasTable::load(p)?,
                None => AliasTable::new(),
            };
            let reports: Vec<ExtractionReport> = match r.cfg.extraction.backend {
                ExtractorKind::Rules => {
                    let ex = RuleBasedExtractor {
                        max_mentions: r.cfg.extraction.max_mentions,
                    };
                    extraction::extract_all(&chunks, &ex as &dyn ExtractorBackend)?
                }
                ExtractorKind::Llm => {
                    let llm = make_llm(LlmKind::Remote, r.cfg.seed, r.cfg.generation.timeout_secs)?;
                    extraction::extract_all(&chunks, &LlmExtractor::new(llm.as_ref()))?
                }
            };
            let (map, resolved) = extraction::build_entity_map(&reports, &aliases);
            jsonl::write_file(&r.path(artifacts::EXTRACTION), &resolved)?;
            map.save(&r.path(artifacts::ENTITIES))?;
            let mentions: usize = resolved.iter().map(|x| x.resolved_entity_ids.len()).sum();
            Ok(counts([("entities", map.len()), ("mentions", mentions)]))
        },
    )?;

    runner.stage(
        "graph",
        &(),
        &[("entities", runner.path(artifacts::ENTITIES))],
        &[artifacts::GRAPH, artifacts::GRAPH_STATS],
        |r| {
            let map = EntityMap::load(&r.path(artifacts::ENTITIES))?;
            let g = build_graph(map.records());
            g.save(&r.path(artifacts::GRAPH))?;
            let stats = g.stats();
            write_json(&r.path(artifacts::GRAPH_STATS), &stats)?;
            Ok(counts([
                ("nodes", stats.node_count),
                ("edges", stats.edge_count),
                ("components", stats.component_sizes.len()),
            ]))
        },
    )?;

    runner.stage(
        "sample",
        &(&cfg.traversal, cfg.seed, &cfg.embedding.backend, cfg.embedding.dim),
        &[
            ("graph", runner.path(artifacts::GRAPH)),
            ("entities", runner.path(artifacts::ENTITIES)),
            ("chunks", runner.path(artifacts::CHUNKS)),
        ],
        &[artifacts::PATHS],
        |r| {
            let graph = ContextGraph::load(&r.path(artifacts::GRAPH))?;
            let map = EntityMap::load(&r.path(artifacts::ENTITIES))?;
            let store = load_chunk_store(&r.work)?;
            let texts: Vec<&str> = store.chunks().iter().map(|c| c.text.as_str()).collect();
            embedder.embed_many(&texts, r.cfg.embedding.max_in_flight)?;
            let ctx = TraversalContext {
                graph: &graph,
                entities: &map,
                chunks: &store,
                embedder: &embedder,
            };
            let set = sample_for_schedule(&ctx, &r.cfg.traversal, r.cfg.seed)?;
            set.save(&r.path(artifacts::PATHS))?;
            let one = set.paths.iter().filter(|p| p.hop_count == 1).count();
            Ok(counts([
                ("paths", set.len()),
                ("one_hop", one),
                ("multi_hop", set.len() - one),
            ]))
        },
    )?;
    if let Err(e) = cache.save(&cache_path) {
        log::warn!("could not persist embedding cache: {e}");
    }

    runner.stage(
        "balance",
        &(&cfg.balance, &cfg.traversal.hop_policy, cfg.seed),
        &[
            ("paths", runner.path(artifacts::PATHS)),
            ("entities", runner.path(artifacts::ENTITIES)),
            ("chunks", runner.path(artifacts::CHUNKS)),
        ],
        &[artifacts::SUBSETS],
        |r| {
            let paths = PathSet::load(&r.path(artifacts::PATHS))?;
            let map = EntityMap::load(&r.path(artifacts::ENTITIES))?;
            let chunks: Vec<Chunk> = jsonl::read_file(&r.path(artifacts::CHUNKS))?;
            let subsets = balance_for_schedule(
                &paths,
                &map,
                chunks.len(),
                r.cfg.traversal.hop_policy,
                &r.cfg.balance_config(),
            )?;
            balance::save_subsets(&r.path(artifacts::SUBSETS), &subsets)?;
            let cot: usize = subsets.iter().map(|s| s.cot_paths.len()).sum();
            let cc: usize = subsets.iter().map(|s| s.cc_pairs.len()).sum();
            Ok(counts([
                ("subsets", subsets.len()),
                ("cot_paths", cot),
                ("cc_pairs", cc),
                ("unconsumed", paths.len() - cot),
                ("subset0_covered_chunks", subsets.first().map_or(0, |s| s.covered_chunks)),
            ]))
        },
    )?;

    runner.stage(
        "generate",
        &(&cfg.generation, cfg.seed, cfg.traversal.same_document_only, &cfg.traversal.hop_policy, synthesis::TEMPLATE_VERSION),
        &[
            ("subsets", runner.path(artifacts::SUBSETS)),
            ("chunks", runner.path(artifacts::CHUNKS)),
            ("documents", runner.path(artifacts::DOCUMENTS)),
            ("entities", runner.path(artifacts::ENTITIES)),
        ],
        &[artifacts::SYNTHETIC, artifacts::REJECTIONS, artifacts::SYNTH_MANIFEST],
        |r| {
            let subsets = balance::load_subsets(&r.path(artifacts::SUBSETS))?;
            let store = load_chunk_store(&r.work)?;
            let map = EntityMap::load(&r.path(artifacts::ENTITIES))?;
            let llm = make_llm(r.cfg.generation.backend, r.cfg.seed, r.cfg.generation.timeout_secs)?;
            let outcome = generate_for_schedule(&subsets, &store, &map, r.cfg, llm.as_ref())?;
            let file = BufWriter::new(File::create(r.path(artifacts::SYNTHETIC))?);
            let m: SynthManifest = synthesis::write_synthetic_corpus(&outcome.records, outcome.rejections.len(), file)?;
            jsonl::write_file(&r.path(artifacts::REJECTIONS), &outcome.rejections)?;
            write_json(&r.path(artifacts::SYNTH_MANIFEST), &m)?;
            Ok(counts([
                ("records", m.records),
                ("cot", m.counts.get(&synthesis::Strategy::Cot).copied().unwrap_or(0)),
                ("cc", m.counts.get(&synthesis::Strategy::Cc).copied().unwrap_or(0)),
                ("rejected", m.rejected),
                ("total_tokens", m.total_tokens as usize),
                ("generated_chars", m.generated_chars),
            ]))
        },
    )?;

    runner.stage(
        "analyze",
        &cfg.analysis,
        &[
            ("chunks", runner.path(artifacts::CHUNKS)),
            ("entities", runner.path(artifacts::ENTITIES)),
            ("subsets", runner.path(artifacts::SUBSETS)),
            ("synthetic", runner.path(artifacts::SYNTHETIC)),
        ],
        &[
            artifacts::ANALYSIS,
            artifacts::RAW_COUNTS,
            artifacts::SYNTH_COUNTS,
            artifacts::RAW_HISTOGRAM,
            artifacts::SYNTH_HISTOGRAM,
        ],
        |r| {
            let store = load_chunk_store(&r.work)?;
            let map = EntityMap::load(&r.path(artifacts::ENTITIES))?;
            let subsets = balance::load_subsets(&r.path(artifacts::SUBSETS))?;
            let records: Vec<SynthRecord> = jsonl::read_file(&r.path(artifacts::SYNTHETIC))?;
            let summary = analyze(&store, &map, &subsets, &records, r.cfg.analysis.buckets)?;
            write_json(&r.path(artifacts::ANALYSIS), &summary)?;
            analysis::write_csv(&summary.raw, File::create(r.path(artifacts::RAW_COUNTS))?)?;
            analysis::write_csv(&summary.synth, File::create(r.path(artifacts::SYNTH_COUNTS))?)?;
            analysis::write_svg_histogram(&summary.raw, &r.path(artifacts::RAW_HISTOGRAM))?;
            analysis::write_svg_histogram(&summary.synth, &r.path(artifacts::SYNTH_HISTOGRAM))?;
            Ok(counts([
                ("entities", map.len()),
                ("raw_total", summary.raw.total as usize),
                ("synth_total", summary.synth.total as usize),
            ]))
        },
    )?;

    write_json(&runner.path(artifacts::MANIFEST), &runner.manifest).map_err(stage_err("analyze"))?;
    write_json(&runner.path(artifacts::TIMINGS), &runner.timings).map_err(stage_err("analyze"))?;
    Ok(runner.manifest)
}

/// Config with machine-specific paths removed, so manifests compare across
/// work directories.
fn cfg_fingerprint(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.paths = PathsConfig {
        corpus: PathBuf::from(cfg.paths.corpus.file_name().unwrap_or_default()),
        work_dir: PathBuf::new(),
        aliases: cfg.paths.aliases.as_ref().map(|a| PathBuf::from(a.file_name().unwrap_or_default())),
    };
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(validate_config(&RunConfig::default()).is_empty());
    }

    #[test]
    fn violations_name_fields() {
        let mut c = RunConfig::default();
        c.traversal.beam_width = 0;
        assert!(validate_config(&c).iter().any(|v| v.contains("beam_width")));
        let mut c = RunConfig::default();
        c.balance.target_coverage = 1.2;
        assert!(validate_config(&c).iter().any(|v| v.contains("target_coverage")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[traversal]\nbeam = 3\n").is_err());
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        let c = RunConfig::from_toml("seed = 1\n[traversal]\nbeam_width = 3\nhop_policy = \"mixed:0.5\"\n").unwrap();
        assert_eq!(c.traversal.beam_width, 3);
        assert_eq!(c.traversal.hop_policy, HopSchedule::Fixed(HopPolicy::Mixed { ratio: 0.5 }));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.balance.standard_length = StandardLength::Fixed(12);
        c.generation.max_volume_multiple = Some(9.0);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
