use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pathsynth_core::analysis::{self, DistributionSource, SourceData};
use pathsynth_core::balance::{self, BalanceConfig, StandardLength};
use pathsynth_core::corpus::{ingest_corpus, Chunk, ChunkStore, Document};
use pathsynth_core::embedding::{EmbeddingCache, SimilarityKind};
use pathsynth_core::extraction::{self, AliasTable, EntityMap, ExtractorBackend, LlmExtractor, RuleBasedExtractor};
use pathsynth_core::graph::{build_graph, ContextGraph};
use pathsynth_core::jsonl;
use pathsynth_core::llm::DecodeParams;
use pathsynth_core::pipeline::{
    self, ChunkingConfig, ChunkingKind, EmbeddingConfig, EmbeddingKind, LlmKind, PipelineError, RunConfig,
};
use pathsynth_core::synthesis::{self, RenderOptions, RetryPolicy, SynthRecord};
use pathsynth_core::traversal::{sample_paths, HopPolicy, PathSet, TraversalConfig, TraversalContext};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "pathsynth", version, about = "Graph-guided synthetic corpus generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a JSONL corpus and split it into chunks.
    Ingest(IngestArgs),
    /// Extract entity mentions and build the entity map.
    Extract(ExtractArgs),
    /// Build or inspect the co-occurrence graph.
    #[command(subcommand)]
    Graph(GraphCommand),
    /// Sample multi-hop paths by beam traversal.
    Sample(SampleArgs),
    /// Split the path set into coverage-balanced subsets.
    Balance(BalanceArgs),
    /// Render prompts for every subset and collect synthetic records.
    Generate(GenerateArgs),
    /// Entity frequency distribution report.
    Analyze(AnalyzeArgs),
    /// Run every stage from a config file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ChunkPolicyArg {
    Fixed,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Hash,
    Remote,
}

#[derive(Args)]
struct EmbeddingOpts {
    #[arg(long = "embedding-backend", value_enum, default_value = "hash")]
    backend: EmbeddingArg,
    /// Dimension of the hash embedder.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Persistent embedding cache file.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl EmbeddingOpts {
    fn config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            backend: match self.backend {
                EmbeddingArg::Hash => EmbeddingKind::Hash,
                EmbeddingArg::Remote => EmbeddingKind::Remote,
            },
            dim: self.dim,
            ..EmbeddingConfig::default()
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    chunk_policy: ChunkPolicyArg,
    #[arg(long, default_value_t = pathsynth_core::corpus::DEFAULT_MAX_CHARS)]
    max_chars: usize,
    #[arg(long, default_value_t = pathsynth_core::corpus::DEFAULT_BREAKPOINT_PERCENTILE)]
    breakpoint_percentile: f64,
    #[command(flatten)]
    embedding: EmbeddingOpts,
    /// Also write the parsed documents (titles are needed by `generate --same-document`).
    #[arg(long)]
    documents_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    #[value(alias = "rules")]
    Rule,
    Llm,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    chunks: PathBuf,
    #[arg(long, value_enum, default_value = "rule")]
    backend: ExtractorArg,
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long, default_value_t = extraction::DEFAULT_MAX_MENTIONS)]
    max_mentions: usize,
    /// Also write the per-chunk extraction reports.
    #[arg(long)]
    reports_out: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum GraphCommand {
    Build {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print node, edge, degree and component statistics as JSON.
    Stats {
        #[arg(long)]
        graph: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Dot,
    Cosine,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    /// Chunk file; supplies the texts that are embedded and scored.
    #[arg(long)]
    chunks: PathBuf,
    #[arg(short = 'S', long = "start-paragraphs", default_value_t = 3)]
    s: usize,
    #[arg(short = 'D', long = "depth", default_value_t = 2)]
    d: usize,
    #[arg(short = 'W', long = "beam-width", default_value_t = 2)]
    w: usize,
    /// leaves, one_hop, two_hop or mixed:<ratio>
    #[arg(long, default_value = "leaves")]
    hop_policy: HopPolicy,
    #[arg(long)]
    same_document: bool,
    #[arg(long, value_enum, default_value = "dot")]
    similarity: SimilarityArg,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    embedding: EmbeddingOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    paths: PathBuf,
    /// Entity map; supplies each entity's chunks for CC pairs.
    #[arg(long)]
    entities: PathBuf,
    /// Chunk file; its length is the coverage denominator.
    #[arg(long)]
    chunks: PathBuf,
    #[arg(short = 'r', long = "target-coverage", default_value_t = 1.0)]
    r: f64,
    /// auto, first_subset or a positive integer.
    #[arg(short = 'l', long = "standard-length", default_value = "auto")]
    l: StandardLength,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the selection transcript as JSONL.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmArg {
    Mock,
    Faulty,
    Remote,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    subsets: PathBuf,
    #[arg(long)]
    chunks: PathBuf,
    /// Entity map; supplies canonical names for the prompts.
    #[arg(long)]
    entities: PathBuf,
    /// Document file from `ingest --documents-out`; required with --same-document.
    #[arg(long)]
    documents: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    backend: LlmArg,
    #[arg(long, default_value_t = DecodeParams::default().temperature)]
    temperature: f64,
    #[arg(long, default_value_t = DecodeParams::default().max_tokens)]
    max_tokens: u32,
    #[arg(long, default_value_t = RetryPolicy::default().max_retries)]
    max_retries: u32,
    #[arg(long, default_value_t = RetryPolicy::default().max_in_flight)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Annotate fragments with their document title.
    #[arg(long)]
    same_document: bool,
    /// Seed for the fault-injecting backend.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    rejections_out: Option<PathBuf>,
    /// Where to write the manifest JSON; stdout when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    source: DistributionSource,
    #[arg(long)]
    entities: PathBuf,
    /// Chunk file (source raw).
    #[arg(long)]
    chunks: Option<PathBuf>,
    /// Subset file (source subsets).
    #[arg(long)]
    subsets: Option<PathBuf>,
    /// Count CC pairs along with CoT paths (source subsets).
    #[arg(long)]
    include_cc: bool,
    /// Synthetic corpus (source synth).
    #[arg(long)]
    synth: Option<PathBuf>,
    #[arg(long, default_value_t = analysis::DEFAULT_BUCKETS)]
    buckets: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's work directory.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// A failure and the exit code it maps to.
enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

type CliResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn stage(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn stage(self) -> CliResult<T> {
        self.map_err(|e| Failure::Stage(e.into()))
    }
}

fn violations(list: Vec<(&'static str, String)>) -> CliResult {
    if list.is_empty() {
        return Ok(());
    }
    let msg: Vec<String> = list.into_iter().map(|(f, why)| format!("{f}: {why}")).collect();
    Err(Failure::Config(anyhow!(msg.join("; "))))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).stage()?;
    writeln!(out).stage()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(w.flush()?)
}

fn embedder(opts: &EmbeddingOpts) -> CliResult<(pathsynth_core::embedding::Embedder, Arc<EmbeddingCache>)> {
    let cache = match &opts.cache {
        Some(p) if p.exists() => Arc::new(EmbeddingCache::load(p).stage()?),
        _ => Arc::new(EmbeddingCache::new()),
    };
    let e = pipeline::make_embedder(&opts.config(), cache.clone()).map_err(|m| Failure::Config(anyhow!(m)))?;
    Ok((e, cache))
}

fn save_cache(opts: &EmbeddingOpts, cache: &EmbeddingCache) -> CliResult {
    if let Some(p) = &opts.cache {
        cache.save(p).stage()?;
    }
    Ok(())
}

fn llm_kind(arg: LlmArg) -> LlmKind {
    match arg {
        LlmArg::Mock => LlmKind::Mock,
        LlmArg::Faulty => LlmKind::Faulty,
        LlmArg::Remote => LlmKind::Remote,
    }
}

fn ingest(a: IngestArgs) -> CliResult {
    let chunking = ChunkingConfig {
        policy: match a.chunk_policy {
            ChunkPolicyArg::Fixed => ChunkingKind::Fixed,
            ChunkPolicyArg::Semantic => ChunkingKind::Semantic,
        },
        max_chars: a.max_chars,
        breakpoint_percentile: a.breakpoint_percentile,
    };
    if chunking.max_chars == 0 || !(0.0..=100.0).contains(&chunking.breakpoint_percentile) {
        return Err(Failure::Config(anyhow!(
            "max_chars must be positive and breakpoint_percentile within [0, 100]"
        )));
    }
    let docs = ingest_corpus(open(&a.input).stage()?).stage()?;
    let (emb, cache) = embedder(&a.embedding)?;
    let chunks = pipeline::chunk_corpus(&docs, &chunking, &emb).stage()?;
    jsonl::write_file(&a.out, &chunks).stage()?;
    if let Some(p) = &a.documents_out {
        jsonl::write_file(p, &docs).stage()?;
    }
    save_cache(&a.embedding, &cache)?;
    log::info!("{} documents, {} chunks", docs.len(), chunks.len());
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult {
    if a.max_mentions == 0 {
        return Err(Failure::Config(anyhow!("max_mentions must be positive")));
    }
    let chunks: Vec<Chunk> = jsonl::read_file(&a.chunks).stage()?;
    let aliases = match &a.aliases {
        Some(p) => AliasTable::load(p).config()?,
        None => AliasTable::new(),
    };
    let reports = match a.backend {
        ExtractorArg::Rule => {
            let ex = RuleBasedExtractor {
                max_mentions: a.max_mentions,
            };
            extraction::extract_all(&chunks, &ex as &dyn ExtractorBackend).stage()?
        }
        ExtractorArg::Llm => {
            let llm = pipeline::make_llm(LlmKind::Remote, 0, a.timeout_secs).map_err(|m| Failure::Config(anyhow!(m)))?;
            extraction::extract_all(&chunks, &LlmExtractor::new(llm.as_ref())).stage()?
        }
    };
    let (map, resolved) = extraction::build_entity_map(&reports, &aliases);
    map.save(&a.out).stage()?;
    if let Some(p) = &a.reports_out {
        jsonl::write_file(p, &resolved).stage()?;
    }
    log::info!("{} entities from {} chunks", map.len(), chunks.len());
    Ok(())
}

fn graph(cmd: GraphCommand) -> CliResult {
    match cmd {
        GraphCommand::Build { entities, out } => {
            let map = EntityMap::load(&entities).stage()?;
            let g = build_graph(map.records());
            g.save(&out).stage()?;
            log::info!("{} nodes, {} edges", g.node_count(), g.edge_count());
            Ok(())
        }
        GraphCommand::Stats { graph } => {
            let g = ContextGraph::load(&graph).stage()?;
            print_json(&g.stats())
        }
    }
}

fn load_store(chunks: &Path, documents: Option<&Path>) -> CliResult<ChunkStore> {
    let list: Vec<Chunk> = jsonl::read_file(chunks).stage()?;
    let store = ChunkStore::new(list);
    Ok(match documents {
        Some(d) => {
            let docs: Vec<Document> = jsonl::read_file(d).stage()?;
            store.with_titles(&docs)
        }
        None => store,
    })
}

fn sample(a: SampleArgs) -> CliResult {
    let cfg = TraversalConfig {
        max_start_paragraphs: a.s,
        depth: a.d,
        beam_width: a.w,
        hop_policy: a.hop_policy,
        same_document_only: a.same_document,
        rng_seed: a.seed,
        similarity: match a.similarity {
            SimilarityArg::Dot => SimilarityKind::Dot,
            SimilarityArg::Cosine => SimilarityKind::Cosine,
        },
    };
    violations(cfg.violations())?;
    let graph = ContextGraph::load(&a.graph).stage()?;
    let entities = EntityMap::load(&a.entities).stage()?;
    let store = load_store(&a.chunks, None)?;
    let (emb, cache) = embedder(&a.embedding)?;
    let ctx = TraversalContext {
        graph: &graph,
        entities: &entities,
        chunks: &store,
        embedder: &emb,
    };
    let set = sample_paths(&ctx, &cfg).stage()?;
    set.save(&a.out).stage()?;
    save_cache(&a.embedding, &cache)?;
    log::info!("{} paths", set.len());
    Ok(())
}

fn balance_cmd(a: BalanceArgs) -> CliResult {
    let cfg = BalanceConfig {
        target_coverage: a.r,
        standard_length: a.l,
        rng_seed: a.seed,
    };
    violations(cfg.violations())?;
    let paths = PathSet::load(&a.paths).stage()?;
    let entities = EntityMap::load(&a.entities).stage()?;
    let chunks: Vec<Chunk> = jsonl::read_file(&a.chunks).stage()?;
    let out = match balance::secondary_sampling(&paths, &entities, chunks.len(), &cfg) {
        Err(balance::BalanceError::Config(m)) => return Err(Failure::Config(anyhow!(m))),
        other => other.stage()?,
    };
    balance::save_subsets(&a.out, &out.subsets).stage()?;
    if let Some(t) = &a.transcript {
        jsonl::write_file(t, &out.transcript).stage()?;
    }
    log::info!(
        "{} subsets, {} paths never retained",
        out.subsets.len(),
        out.unconsumed.len()
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> CliResult {
    if a.same_document && a.documents.is_none() {
        return Err(Failure::Config(anyhow!("--same-document needs --documents")));
    }
    if a.max_in_flight == 0 || !(0.0..=2.0).contains(&a.temperature) {
        return Err(Failure::Config(anyhow!(
            "max_in_flight must be positive and temperature within [0, 2]"
        )));
    }
    let subsets = balance::load_subsets(&a.subsets).stage()?;
    let store = load_store(&a.chunks, a.documents.as_deref())?;
    let entities = EntityMap::load(&a.entities).stage()?;
    let options = RenderOptions {
        same_document: a.same_document,
        decode: DecodeParams {
            temperature: a.temperature,
            max_tokens: a.max_tokens,
        },
    };
    let requests = synthesis::build_requests(&subsets, &store, &entities, &options).stage()?;
    let llm = pipeline::make_llm(llm_kind(a.backend), a.seed, a.timeout_secs).map_err(|m| Failure::Config(anyhow!(m)))?;
    let policy = RetryPolicy {
        max_retries: a.max_retries,
        max_in_flight: a.max_in_flight,
    };
    let outcome = synthesis::generate(&requests, llm.as_ref(), &policy).stage()?;
    let sink = BufWriter::new(File::create(&a.out).stage()?);
    let manifest = synthesis::write_synthetic_corpus(&outcome.records, outcome.rejections.len(), sink).stage()?;
    if let Some(p) = &a.rejections_out {
        jsonl::write_file(p, &outcome.rejections).stage()?;
    }
    match &a.manifest {
        Some(p) => write_json(p, &manifest).stage()?,
        None => print_json(&manifest)?,
    }
    if manifest.rejected > 0 {
        log::warn!("{} requests rejected", manifest.rejected);
    }
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> CliResult {
    if a.buckets == 0 {
        return Err(Failure::Config(anyhow!("buckets must be positive")));
    }
    fn need<'a>(p: &'a Option<PathBuf>, flag: &str, source: DistributionSource) -> CliResult<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Failure::Config(anyhow!("--source {source} needs --{flag}")))
    }
    let entities = EntityMap::load(&a.entities).stage()?;
    let report = match a.source {
        DistributionSource::Raw => {
            let store = load_store(need(&a.chunks, "chunks", a.source)?, None)?;
            analysis::entity_distribution(&SourceData::Raw(&store), &entities, a.buckets)
        }
        DistributionSource::Subsets => {
            let subsets = balance::load_subsets(need(&a.subsets, "subsets", a.source)?).stage()?;
            analysis::entity_distribution(
                &SourceData::Subsets {
                    subsets: &subsets,
                    include_cc: a.include_cc,
                },
                &entities,
                a.buckets,
            )
        }
        DistributionSource::Synth => {
            let records: Vec<SynthRecord> = jsonl::read_file(need(&a.synth, "synth", a.source)?).stage()?;
            analysis::entity_distribution(&SourceData::Synth(&records), &entities, a.buckets)
        }
    }
    .stage()?;
    analysis::write_csv(&report, File::create(&a.out).stage()?).stage()?;
    if let Some(p) = &a.plot {
        analysis::write_svg_histogram(&report, p).stage()?;
    }
    print_json(&serde_json::json!({
        "source": report.source,
        "entities": report.counts.len(),
        "total": report.total,
        "gini": report.gini,
        "coefficient_of_variation": report.coefficient_of_variation,
        "coverage": report.coverage,
        "top_decile_share": report.top_decile_share,
    }))
}

fn run_cmd(a: RunArgs) -> CliResult {
    let mut cfg = match RunConfig::load(&a.config) {
        Ok(c) => c,
        Err(e) => return Err(Failure::Config(e.into())),
    };
    if let Some(w) = a.work_dir {
        cfg.paths.work_dir = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    match pipeline::run_pipeline(&cfg) {
        Ok(m) => print_json(&m),
        Err(e @ PipelineError::Config(_)) => Err(Failure::Config(e.into())),
        Err(e) => Err(Failure::Stage(e.into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Extract(a) => extract(a),
        Command::Graph(c) => graph(c),
        Command::Sample(a) => sample(a),
        Command::Balance(a) => balance_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
