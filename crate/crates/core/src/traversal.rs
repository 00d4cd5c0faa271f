//! Cross-document path sampling over the context graph.
//!
//! Every entity is a root. For each root, up to `S` start paragraphs are
//! drawn; each start paragraph's embedding is the fixed query for a
//! breadth-first expansion in which every node keeps its `W` best-scoring
//! (neighbor entity, neighbor paragraph) children, down to depth `D`.

use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ChunkStore;
use crate::embedding::{EmbeddingError, EmbeddingVector, Embedder, SimilarityKind};
use crate::extraction::{EntityMap, EntityRecord};
use crate::graph::ContextGraph;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum TraversalError {
    #[error("embedding failed while sampling from root {root}: {source}")]
    Backend {
        root: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("entity {0:?} is not in the graph")]
    UnknownEntity(String),
    #[error("chunk {0:?} is not in the chunk store")]
    UnknownChunk(String),
    #[error("invalid traversal config: {0}")]
    Config(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Step {
    pub entity_id: String,
    pub chunk_id: String,
}

impl Step {
    pub fn new(entity_id: impl Into<String>, chunk_id: impl Into<String>) -> Self {
        Self {
            entity_id: entity_id.into(),
            chunk_id: chunk_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub path_id: String,
    pub root_chunk: String,
    pub hop_count: usize,
    pub steps: Vec<Step>,
    /// Similarity of each non-root step's chunk to the root chunk.
    pub scores: Vec<f64>,
}

impl Path {
    pub fn root_entity(&self) -> &str {
        &self.steps[0].entity_id
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.entity_id.as_str())
    }

    pub fn chunks(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.chunk_id.as_str())
    }
}

/// Which beam nodes become emitted paths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum HopPolicy {
    /// One path per leaf of the retained beam, depth ≤ D.
    #[default]
    Leaves,
    /// Every depth-1 node; expansion stops at depth 1.
    OneHop,
    /// Every depth-2 node only.
    TwoHop,
    /// Depth-1 and depth-2 nodes, subsampled so that `ratio` of the emitted
    /// paths are one-hop.
    Mixed { ratio: f64 },
}

impl HopPolicy {
    fn max_depth(self, depth: usize) -> usize {
        match self {
            HopPolicy::Leaves => depth,
            HopPolicy::OneHop => 1,
            HopPolicy::TwoHop | HopPolicy::Mixed { .. } => depth.min(2),
        }
    }
}

impl fmt::Display for HopPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HopPolicy::Leaves => f.write_str("leaves"),
            HopPolicy::OneHop => f.write_str("one_hop"),
            HopPolicy::TwoHop => f.write_str("two_hop"),
            HopPolicy::Mixed { ratio } => write!(f, "mixed:{ratio}"),
        }
    }
}

impl FromStr for HopPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaves" => Ok(HopPolicy::Leaves),
            "one_hop" => Ok(HopPolicy::OneHop),
            "two_hop" => Ok(HopPolicy::TwoHop),
            other => match other.strip_prefix("mixed:") {
                Some(r) => r
                    .parse::<f64>()
                    .map(|ratio| HopPolicy::Mixed { ratio })
                    .map_err(|e| format!("bad mixed ratio {r:?}: {e}")),
                None => Err(format!(
                    "unknown hop policy {other:?} (expected leaves, one_hop, two_hop, mixed:<ratio>)"
                )),
            },
        }
    }
}

impl Serialize for HopPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HopPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalConfig {
    pub max_start_paragraphs: usize,
    pub depth: usize,
    pub beam_width: usize,
    pub hop_policy: HopPolicy,
    pub same_document_only: bool,
    pub rng_seed: u64,
    pub similarity: SimilarityKind,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        Self {
            max_start_paragraphs: 3,
            depth: 2,
            beam_width: 2,
            hop_policy: HopPolicy::Leaves,
            same_document_only: false,
            rng_seed: 7,
            similarity: SimilarityKind::Dot,
        }
    }
}

impl TraversalConfig {
    /// Field name and reason for every violated precondition.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.max_start_paragraphs == 0 {
            out.push(("max_start_paragraphs", "must be at least 1".to_string()));
        }
        if self.depth == 0 {
            out.push(("depth", "must be at least 1".to_string()));
        }
        if self.beam_width == 0 {
            out.push(("beam_width", "must be at least 1".to_string()));
        }
        match self.hop_policy {
            HopPolicy::Mixed { ratio } if !(ratio > 0.0 && ratio < 1.0) => {
                out.push(("hop_policy", format!("mixed ratio {ratio} outside (0, 1)")));
            }
            HopPolicy::TwoHop | HopPolicy::Mixed { .. } if self.depth < 2 => {
                out.push(("hop_policy", format!("{} needs depth >= 2", self.hop_policy)));
            }
            _ => {}
        }
        out
    }
}

/// All sampled paths, ordered by (root entity id, start chunk order).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Consecutive runs of paths sharing a root entity.
    pub fn by_root(&self) -> Vec<(&str, &[Path])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.paths.len() {
            if i == self.paths.len() || self.paths[i].root_entity() != self.paths[start].root_entity() {
                out.push((self.paths[start].root_entity(), &self.paths[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn save(&self, path: &FsPath) -> Result<(), JsonlError> {
        jsonl::write_file(path, &self.paths)
    }

    pub fn load(path: &FsPath) -> Result<Self, JsonlError> {
        Ok(Self {
            paths: jsonl::read_file(path)?,
        })
    }
}

/// Read-only inputs shared by every traversal worker.
#[derive(Clone, Copy)]
pub struct TraversalContext<'a> {
    pub graph: &'a ContextGraph,
    pub entities: &'a EntityMap,
    pub chunks: &'a ChunkStore,
    pub embedder: &'a Embedder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entity_id: String,
    pub chunk_id: String,
    pub score: f64,
}

/// Entities and chunks already on the path, plus the document constraint.
#[derive(Debug, Clone, Default)]
pub struct Visited<'a> {
    pub entities: Vec<&'a str>,
    pub chunks: Vec<&'a str>,
    pub document: Option<&'a str>,
}

pub fn select_start_paragraphs<R: Rng + ?Sized>(
    root: &EntityRecord,
    cfg: &TraversalConfig,
    rng: &mut R,
) -> Vec<String> {
    let n = root.chunk_ids.len();
    if n <= cfg.max_start_paragraphs {
        return root.chunk_ids.clone();
    }
    let mut picked = index::sample(rng, n, cfg.max_start_paragraphs).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| root.chunk_ids[i].clone()).collect()
}

fn chunk_vector(ctx: &TraversalContext<'_>, chunk_id: &str) -> Result<EmbeddingVector, TraversalError> {
    let chunk = ctx
        .chunks
        .get(chunk_id)
        .ok_or_else(|| TraversalError::UnknownChunk(chunk_id.to_string()))?;
    ctx.embedder
        .embed(&chunk.text)
        .map_err(|source| TraversalError::Backend {
            root: String::new(),
            source,
        })
}

/// Score every unvisited (neighbor, neighbor chunk) pair against the root
/// query and keep the `W` best. Ties go to the smaller (entity id, chunk id).
pub fn expand_step(
    ctx: &TraversalContext<'_>,
    current_entity: &str,
    root_vec: &EmbeddingVector,
    cfg: &TraversalConfig,
    visited: &Visited<'_>,
) -> Result<Vec<Candidate>, TraversalError> {
    let idx = ctx
        .graph
        .node_index(current_entity)
        .ok_or_else(|| TraversalError::UnknownEntity(current_entity.to_string()))?;
    let mut pool = Vec::new();
    for &n in ctx.graph.neighbor_indices(idx) {
        let neighbor = ctx.graph.node_id(n);
        if visited.entities.contains(&neighbor) {
            continue;
        }
        let record = ctx
            .entities
            .get(neighbor)
            .ok_or_else(|| TraversalError::UnknownEntity(neighbor.to_string()))?;
        for chunk_id in &record.chunk_ids {
            if visited.chunks.contains(&chunk_id.as_str()) {
                continue;
            }
            if let Some(doc) = visited.document {
                if ctx.chunks.doc_of(chunk_id) != Some(doc) {
                    continue;
                }
            }
            let v = chunk_vector(ctx, chunk_id)?;
            let score = cfg
                .similarity
                .score(root_vec, &v)
                .map_err(|source| TraversalError::Backend {
                    root: String::new(),
                    source,
                })?;
            pool.push(Candidate {
                entity_id: neighbor.to_string(),
                chunk_id: chunk_id.clone(),
                score,
            });
        }
    }
    pool.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    pool.truncate(cfg.beam_width);
    Ok(pool)
}

struct BeamNode {
    step: Step,
    score: f64,
    parent: Option<usize>,
    depth: usize,
    children: usize,
}

fn lineage(arena: &[BeamNode], mut node: usize) -> Vec<usize> {
    let mut out = vec![node];
    while let Some(p) = arena[node].parent {
        out.push(p);
        node = p;
    }
    out.reverse();
    out
}

/// Beam expansion from one (root, start paragraph). Returns emitted paths
/// without ids, in breadth-first order.
pub fn expand_from(
    ctx: &TraversalContext<'_>,
    root: &str,
    start_chunk: &str,
    cfg: &TraversalConfig,
) -> Result<Vec<Path>, TraversalError> {
    let root_vec = chunk_vector(ctx, start_chunk)?;
    let document = if cfg.same_document_only {
        Some(
            ctx.chunks
                .doc_of(start_chunk)
                .ok_or_else(|| TraversalError::UnknownChunk(start_chunk.to_string()))?,
        )
    } else {
        None
    };
    let max_depth = cfg.hop_policy.max_depth(cfg.depth);
    let mut arena = vec![BeamNode {
        step: Step::new(root, start_chunk),
        score: f64::NAN,
        parent: None,
        depth: 0,
        children: 0,
    }];
    let mut frontier = vec![0usize];
    for _ in 0..max_depth {
        let mut next = Vec::new();
        for &node in &frontier {
            let line = lineage(&arena, node);
            let visited = Visited {
                entities: line.iter().map(|&i| arena[i].step.entity_id.as_str()).collect(),
                chunks: line.iter().map(|&i| arena[i].step.chunk_id.as_str()).collect(),
                document,
            };
            let current = arena[node].step.entity_id.clone();
            let depth = arena[node].depth;
            let children = expand_step(ctx, &current, &root_vec, cfg, &visited)?;
            arena[node].children = children.len();
            for c in children {
                next.push(arena.len());
                arena.push(BeamNode {
                    step: Step::new(c.entity_id, c.chunk_id),
                    score: c.score,
                    parent: Some(node),
                    depth: depth + 1,
                    children: 0,
                });
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }

    let emit = |n: &BeamNode| match cfg.hop_policy {
        HopPolicy::Leaves => n.depth >= 1 && (n.children == 0 || n.depth == max_depth),
        HopPolicy::OneHop => n.depth == 1,
        HopPolicy::TwoHop => n.depth == 2,
        HopPolicy::Mixed { .. } => n.depth == 1 || n.depth == 2,
    };
    Ok((0..arena.len())
        .filter(|&i| emit(&arena[i]))
        .map(|i| {
            let line = lineage(&arena, i);
            Path {
                path_id: String::new(),
                root_chunk: start_chunk.to_string(),
                hop_count: line.len() - 1,
                steps: line.iter().map(|&j| arena[j].step.clone()).collect(),
                scores: line[1..].iter().map(|&j| arena[j].score).collect(),
            }
        })
        .collect())
}

fn root_rng(seed: u64, root_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(root_index as u64);
    rng
}

fn sample_root(
    ctx: &TraversalContext<'_>,
    root: &EntityRecord,
    root_index: usize,
    cfg: &TraversalConfig,
) -> Result<Vec<Path>, TraversalError> {
    let mut rng = root_rng(cfg.rng_seed, root_index);
    let starts = select_start_paragraphs(root, cfg, &mut rng);
    let mut out = Vec::new();
    for start in &starts {
        out.extend(expand_from(ctx, &root.entity_id, start, cfg)?);
    }
    Ok(out)
}

/// Keep `ratio` of the result one-hop by uniformly dropping the surplus
/// class. Relative order is preserved.
fn apply_mix(paths: Vec<Path>, ratio: f64, seed: u64) -> Vec<Path> {
    let ones: Vec<usize> = (0..paths.len()).filter(|&i| paths[i].hop_count == 1).collect();
    let twos: Vec<usize> = (0..paths.len()).filter(|&i| paths[i].hop_count != 1).collect();
    let (n1, n2) = (ones.len() as f64, twos.len() as f64);
    let (keep1, keep2) = if n1 + n2 == 0.0 {
        (0, 0)
    } else if n1 / (n1 + n2) > ratio {
        (((ratio / (1.0 - ratio)) * n2).floor() as usize, twos.len())
    } else {
        (ones.len(), (((1.0 - ratio) / ratio) * n1).floor() as usize)
    };
    let mut rng = root_rng(seed, usize::MAX);
    let mut pick = |mut idx: Vec<usize>, keep: usize| {
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx
    };
    let mut kept: Vec<usize> = pick(ones, keep1);
    kept.extend(pick(twos, keep2));
    kept.sort_unstable();
    let mut slots: Vec<Option<Path>> = paths.into_iter().map(Some).collect();
    kept.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Sample paths from every entity as root. Roots run in parallel; the result
/// is ordered by root entity id then start chunk and is independent of
/// scheduling.
pub fn sample_paths(ctx: &TraversalContext<'_>, cfg: &TraversalConfig) -> Result<PathSet, TraversalError> {
    if let Some((field, why)) = cfg.violations().into_iter().next() {
        return Err(TraversalError::Config(format!("{field}: {why}")));
    }
    let mut roots: Vec<&EntityRecord> = ctx.entities.records().iter().collect();
    roots.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    let per_root: Vec<Vec<Path>> = roots
        .par_iter()
        .enumerate()
        .map(|(i, root)| {
            sample_root(ctx, root, i, cfg).map_err(|e| match e {
                TraversalError::Backend { source, .. } => TraversalError::Backend {
                    root: root.entity_id.clone(),
                    source,
                },
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut paths: Vec<Path> = per_root.into_iter().flatten().collect();
    if let HopPolicy::Mixed { ratio } = cfg.hop_policy {
        paths = apply_mix(paths, ratio, cfg.rng_seed);
    }
    for (i, p) in paths.iter_mut().enumerate() {
        p.path_id = format!("p{i:06}");
    }
    Ok(PathSet { paths })
}

/// Check every path invariant against the graph, entity map and chunk store.
/// Returns a description of the first violation.
pub fn check_path(
    path: &Path,
    ctx: &TraversalContext<'_>,
    max_depth: usize,
    same_document: bool,
) -> Result<(), String> {
    if path.steps.is_empty() || path.steps[0].chunk_id != path.root_chunk {
        return Err(format!("{}: first step is not the root chunk", path.path_id));
    }
    if path.hop_count != path.steps.len() - 1 || path.hop_count < 1 || path.hop_count > max_depth {
        return Err(format!("{}: bad hop count {}", path.path_id, path.hop_count));
    }
    for s in &path.steps {
        let rec = ctx
            .entities
            .get(&s.entity_id)
            .ok_or_else(|| format!("{}: unknown entity {}", path.path_id, s.entity_id))?;
        if !rec.chunk_ids.contains(&s.chunk_id) {
            return Err(format!("{}: {} not in chunk {}", path.path_id, s.entity_id, s.chunk_id));
        }
    }
    for w in path.steps.windows(2) {
        if !ctx.graph.has_edge(&w[0].entity_id, &w[1].entity_id) {
            return Err(format!(
                "{}: no edge {}-{}",
                path.path_id, w[0].entity_id, w[1].entity_id
            ));
        }
    }
    let mut ents: Vec<&str> = path.entities().collect();
    ents.sort_unstable();
    if ents.windows(2).any(|w| w[0] == w[1]) {
        return Err(format!("{}: repeated entity", path.path_id));
    }
    if same_document {
        let doc = ctx.chunks.doc_of(&path.root_chunk);
        if path.chunks().any(|c| ctx.chunks.doc_of(c) != doc) {
            return Err(format!("{}: crosses documents", path.path_id));
        }
    }
    Ok(())
}
