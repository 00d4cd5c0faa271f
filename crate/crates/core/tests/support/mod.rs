//! Reference implementations and instance generators shared by the
//! integration tests. Each oracle is written directly from the algorithm
//! description and shares no code with the library beyond plain data types.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use pathsynth_core::balance::BalanceEvent;
use pathsynth_core::corpus::{chunk_document, Chunk, ChunkPolicy, ChunkStore, Document};
use pathsynth_core::embedding::{EmbeddingCache, Embedder, HashEmbedder, StaticEmbedder};
use pathsynth_core::extraction::{build_entity_map, extract_all, AliasTable, EntityMap, EntityRecord, RuleBasedExtractor};
use pathsynth_core::graph::{build_graph, ContextGraph};
use pathsynth_core::traversal::{Path, Step};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// prepared corpora

pub struct Prepared {
    pub docs: Vec<Document>,
    pub chunks: ChunkStore,
    pub entities: EntityMap,
    pub graph: ContextGraph,
    pub embedder: Embedder,
}

pub fn prepare(docs: Vec<Document>, max_chars: usize) -> Prepared {
    let chunks: Vec<Chunk> = docs
        .iter()
        .flat_map(|d| chunk_document(d, ChunkPolicy::Fixed { max_chars }).unwrap())
        .collect();
    let reports = extract_all(&chunks, &RuleBasedExtractor::default()).unwrap();
    let (entities, _) = build_entity_map(&reports, &AliasTable::new());
    let graph = build_graph(entities.records());
    let embedder = Embedder::new(Box::new(HashEmbedder::new(64)), Arc::new(EmbeddingCache::new()));
    Prepared {
        chunks: ChunkStore::new(chunks).with_titles(&docs),
        docs,
        entities,
        graph,
        embedder,
    }
}

pub fn record(id: &str, chunks: &[String]) -> EntityRecord {
    EntityRecord {
        entity_id: id.to_string(),
        canonical_name: format!("name of {id}"),
        aliases: Default::default(),
        chunk_ids: chunks.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// graph oracle

pub type EdgeList = Vec<(String, String, Vec<String>)>;

/// Every unordered entity pair whose chunk sets intersect, with the
/// intersection as provenance.
pub fn oracle_graph(records: &[EntityRecord]) -> EdgeList {
    let mut out = Vec::new();
    for a in records {
        for b in records {
            if a.entity_id >= b.entity_id {
                continue;
            }
            let shared: Vec<String> = a
                .chunk_ids
                .iter()
                .filter(|c| b.chunk_ids.contains(c))
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if !shared.is_empty() {
                out.push((a.entity_id.clone(), b.entity_id.clone(), shared));
            }
        }
    }
    out.sort();
    out
}

pub fn random_records(rng: &mut ChaCha8Rng) -> Vec<EntityRecord> {
    let n_chunks = rng.random_range(1..=50);
    let n_entities = rng.random_range(1..=30);
    let chunk_ids: Vec<String> = (0..n_chunks).map(|i| format!("d{}#{}", i % 7, i)).collect();
    (0..n_entities)
        .map(|e| {
            let k = rng.random_range(1..=4.min(n_chunks));
            let mut picked: Vec<String> = chunk_ids.choose_multiple(rng, k).cloned().collect();
            picked.sort_by_key(|c| chunk_ids.iter().position(|x| x == c));
            record(&format!("e{e:06}"), &picked)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// traversal oracle

pub struct ToyTraversal {
    pub records: Vec<EntityRecord>,
    pub chunk_docs: BTreeMap<String, String>,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl ToyTraversal {
    pub fn chunk_store(&self) -> ChunkStore {
        ChunkStore::new(
            self.chunk_docs
                .iter()
                .enumerate()
                .map(|(i, (c, d))| Chunk {
                    chunk_id: c.clone(),
                    doc_id: d.clone(),
                    ordinal: i,
                    text: format!("text of {c}"),
                })
                .collect(),
        )
    }

    pub fn embedder(&self) -> Embedder {
        let table: HashMap<String, Vec<f64>> = self
            .vectors
            .iter()
            .map(|(c, v)| (format!("text of {c}"), v.clone()))
            .collect();
        Embedder::uncached(Box::new(StaticEmbedder::new("toy", table)))
    }

    fn dot(&self, a: &str, b: &str) -> f64 {
        let (x, y) = (&self.vectors[a], &self.vectors[b]);
        let mut s = 0.0;
        for i in 0..x.len() {
            s += x[i] * y[i];
        }
        s
    }

    fn adjacent(&self, a: &str, b: &str) -> bool {
        let ra = self.records.iter().find(|r| r.entity_id == a).unwrap();
        let rb = self.records.iter().find(|r| r.entity_id == b).unwrap();
        a != b && ra.chunk_ids.iter().any(|c| rb.chunk_ids.contains(c))
    }

    /// All valid one-step extensions of `seq`, best first.
    fn extensions(&self, seq: &[(String, String)], same_doc: bool) -> Vec<(String, String, f64)> {
        let (last_e, _) = seq.last().unwrap();
        let root_chunk = &seq[0].1;
        let mut out = Vec::new();
        for r in &self.records {
            if !self.adjacent(last_e, &r.entity_id) || seq.iter().any(|(e, _)| *e == r.entity_id) {
                continue;
            }
            for c in &r.chunk_ids {
                if seq.iter().any(|(_, x)| x == c) {
                    continue;
                }
                if same_doc && self.chunk_docs[c] != self.chunk_docs[root_chunk] {
                    continue;
                }
                out.push((r.entity_id.clone(), c.clone(), self.dot(root_chunk, c)));
            }
        }
        out.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        out
    }

    /// Enumerate every valid sequence from (root, start) up to `depth` hops,
    /// keep those whose every step ranks within the top `width` extensions
    /// of its prefix, and return the leaves as step lists.
    pub fn oracle_paths(&self, depth: usize, width: usize, same_doc: bool) -> BTreeSet<Vec<(String, String)>> {
        let mut leaves = BTreeSet::new();
        for root in &self.records {
            for start in &root.chunk_ids {
                let mut stack = vec![vec![(root.entity_id.clone(), start.clone())]];
                while let Some(seq) = stack.pop() {
                    let hops = seq.len() - 1;
                    let kept: Vec<_> = if hops < depth {
                        self.extensions(&seq, same_doc).into_iter().take(width).collect()
                    } else {
                        Vec::new()
                    };
                    if kept.is_empty() {
                        if hops >= 1 {
                            leaves.insert(seq.clone());
                        }
                        continue;
                    }
                    for (e, c, _) in kept {
                        let mut next = seq.clone();
                        next.push((e, c));
                        stack.push(next);
                    }
                }
            }
        }
        leaves
    }
}

pub fn path_steps(p: &Path) -> Vec<(String, String)> {
    p.steps.iter().map(|s| (s.entity_id.clone(), s.chunk_id.clone())).collect()
}

/// Small instance: up to 8 entities, up to 3 chunks each, 2-d embeddings on
/// a half-integer grid so that equal scores happen often.
pub fn random_toy(rng: &mut ChaCha8Rng) -> ToyTraversal {
    let n_chunks = rng.random_range(3..=10);
    let docs = rng.random_range(1..=3);
    let chunk_docs: BTreeMap<String, String> = (0..n_chunks)
        .map(|i| (format!("c{i:02}"), format!("d{}", i % docs)))
        .collect();
    let names: Vec<String> = chunk_docs.keys().cloned().collect();
    let vectors = names
        .iter()
        .map(|c| {
            let v = vec![rng.random_range(0..=2) as f64 * 0.5, rng.random_range(0..=2) as f64 * 0.5 + 0.5];
            (c.clone(), v)
        })
        .collect();
    let n_entities = rng.random_range(2..=8);
    let records = (0..n_entities)
        .map(|e| {
            let k = rng.random_range(1..=3);
            let mut picked: Vec<String> = names.choose_multiple(rng, k).cloned().collect();
            picked.sort();
            record(&format!("e{e:06}"), &picked)
        })
        .collect();
    ToyTraversal {
        records,
        chunk_docs,
        vectors,
    }
}

// ---------------------------------------------------------------------------
// balance oracle

pub struct BalanceInstance {
    pub paths: Vec<Path>,
    pub records: Vec<EntityRecord>,
    pub total_chunks: usize,
}

pub fn random_balance_instance(rng: &mut ChaCha8Rng) -> BalanceInstance {
    let total_chunks = rng.random_range(4..=14);
    let chunks: Vec<String> = (0..total_chunks).map(|i| format!("c{i:02}")).collect();
    let n_entities = rng.random_range(3..=10);
    let records: Vec<EntityRecord> = (0..n_entities)
        .map(|e| {
            let k = rng.random_range(1..=3);
            let mut picked: Vec<String> = chunks.choose_multiple(rng, k).cloned().collect();
            picked.sort();
            record(&format!("e{e:06}"), &picked)
        })
        .collect();
    let n_paths = rng.random_range(1..=12);
    let paths = (0..n_paths)
        .map(|i| {
            let len = rng.random_range(2..=3.min(n_entities));
            let ents: Vec<&EntityRecord> = records.choose_multiple(rng, len).collect();
            let steps: Vec<Step> = ents
                .iter()
                .map(|r| Step::new(r.entity_id.clone(), r.chunk_ids.choose(rng).unwrap().clone()))
                .collect();
            Path {
                path_id: format!("p{i:06}"),
                root_chunk: steps[0].chunk_id.clone(),
                hop_count: steps.len() - 1,
                steps,
                scores: vec![0.0; len - 1],
            }
        })
        .collect();
    BalanceInstance {
        paths,
        records,
        total_chunks,
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn fraction(num: i128, den: i128) -> String {
    let g = gcd(num, den).max(1);
    let (n, d) = (num / g, den / g);
    if d == 1 {
        n.to_string()
    } else {
        format!("{n}/{d}")
    }
}

/// `None` for `l` runs subset 0 uncapped and reuses its size afterwards.
pub struct OracleConfig {
    pub r_num: i128,
    pub r_den: i128,
    pub l: Option<usize>,
    pub seed: u64,
}

/// Direct transcription of the two algorithms: sort the remaining list by
/// descending utilization (ties: later input position first), pop the last
/// element, and so on.
pub fn oracle_balance(inst: &BalanceInstance, cfg: &OracleConfig) -> Vec<BalanceEvent> {
    let mut events = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut util: BTreeMap<String, u64> = inst.records.iter().map(|r| (r.entity_id.clone(), 0)).collect();
    let chunks_of: BTreeMap<String, Vec<String>> =
        inst.records.iter().map(|r| (r.entity_id.clone(), r.chunk_ids.clone())).collect();
    let mut remaining: Vec<usize> = (0..inst.paths.len()).collect();
    let mut l = cfg.l;
    let total = inst.total_chunks as i128;
    let mut subset = 0;
    while !remaining.is_empty() {
        let mut cot: Vec<usize> = Vec::new();
        let mut covered: BTreeMap<String, u32> = BTreeMap::new();
        loop {
            if remaining.is_empty() {
                break;
            }
            let pu = |i: usize, util: &BTreeMap<String, u64>| -> u64 {
                inst.paths[i].steps.iter().map(|s| util[&s.entity_id]).sum()
            };
            remaining.sort_by_key(|&i| (Reverse(pu(i, &util)), Reverse(i)));
            let p = remaining.pop().unwrap();
            let u = pu(p, &util);
            cot.push(p);
            for s in &inst.paths[p].steps {
                *util.get_mut(&s.entity_id).unwrap() += 1;
                *covered.entry(s.chunk_id.clone()).or_default() += 1;
            }
            events.push(BalanceEvent::Select {
                subset,
                path_index: p,
                utilization: u,
            });
            let c = covered.len() as i128;
            // r' >= r  <=>  c/total >= r_num/r_den
            if c * cfg.r_den >= cfg.r_num * total {
                break;
            }
            let Some(l) = l else { continue };
            if cot.len() < l {
                continue;
            }
            // Δr = (r − c/total) / r = (r_num·total − c·r_den) / (r_num·total)
            let dr_num = cfg.r_num * total - c * cfg.r_den;
            let dr_den = cfg.r_num * total;
            let mut sorted: Vec<(u64, String)> = util.iter().map(|(e, n)| (*n, e.clone())).collect();
            sorted.sort();
            let k = (dr_num * l as i128 / dr_den) as usize;
            let cut = ((dr_den - dr_num) * l as i128 / dr_den) as usize;
            let returned: Vec<usize> = cot[cut.min(cot.len())..].to_vec();
            for &p in &returned {
                remaining.push(p);
                for s in &inst.paths[p].steps {
                    *util.get_mut(&s.entity_id).unwrap() -= 1;
                    let n = covered.get_mut(&s.chunk_id).unwrap();
                    *n -= 1;
                    if *n == 0 {
                        covered.remove(&s.chunk_id);
                    }
                }
            }
            cot.truncate(cut.min(cot.len()));
            let mut sparse: Vec<String> = sorted.into_iter().take(k).map(|(_, e)| e).collect();
            sparse.shuffle(&mut rng);
            let mut pairs = Vec::new();
            let mut i = 0;
            while i + 1 < sparse.len() {
                let (x, y) = (&sparse[i], &sparse[i + 1]);
                let cx = chunks_of[x][rng.random_range(0..chunks_of[x].len())].clone();
                let cy = chunks_of[y][rng.random_range(0..chunks_of[y].len())].clone();
                pairs.push((Step::new(x.clone(), cx), Step::new(y.clone(), cy)));
                i += 2;
            }
            for (a, b) in &pairs {
                for s in [a, b] {
                    *util.get_mut(&s.entity_id).unwrap() += 1;
                    *covered.entry(s.chunk_id.clone()).or_default() += 1;
                }
            }
            events.push(BalanceEvent::CcTrigger {
                subset,
                covered: covered.len(),
                total: inst.total_chunks,
                delta_r: fraction(dr_num, dr_den),
                k,
                cut,
                returned,
                sparse,
                pairs,
            });
            break;
        }
        events.push(BalanceEvent::SubsetEnd {
            subset,
            retained: cot.clone(),
            covered: covered.len(),
        });
        if l.is_none() {
            l = Some(cot.len().max(2));
        }
        subset += 1;
        if cot.is_empty() {
            break;
        }
    }
    events
}

// ---------------------------------------------------------------------------
// pipeline helpers

pub fn demo_config(work: &std::path::Path) -> pathsynth_core::RunConfig {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut cfg = pathsynth_core::RunConfig::load(&dir.join("demo.toml")).unwrap();
    cfg.paths.work_dir = work.to_path_buf();
    cfg
}

pub fn fixture_docs(name: &str) -> Vec<Document> {
    let path = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    pathsynth_core::jsonl::read_file(&path).unwrap()
}

/// Every file under `dir` except the timing log, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != pathsynth_core::pipeline::artifacts::TIMINGS {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}
