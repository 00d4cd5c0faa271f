//! Undirected entity co-occurrence graph.
//!
//! Nodes are entity ids; an edge joins two distinct entities that share at
//! least one chunk. Edges are unweighted. The chunks witnessing each edge are
//! kept as provenance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::EntityRecord;
use crate::jsonl::{self, JsonlError};

/// Chunks with more entities than this do not induce edges.
pub const MAX_ENTITIES_PER_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("invalid graph snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextGraph {
    /// Sorted; a node's index is its position here.
    ids: Vec<String>,
    index: HashMap<String, u32>,
    adjacency: Vec<Vec<u32>>,
    /// Keyed by (low index, high index).
    provenance: BTreeMap<(u32, u32), BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    /// degree → number of nodes with that degree
    pub degree_histogram: BTreeMap<usize, usize>,
    /// Descending.
    pub component_sizes: Vec<usize>,
}

impl ContextGraph {
    fn from_parts(mut ids: Vec<String>, edges: BTreeMap<(String, String), BTreeSet<String>>) -> Self {
        ids.sort();
        ids.dedup();
        let index: HashMap<String, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let mut adjacency = vec![Vec::new(); ids.len()];
        let mut provenance = BTreeMap::new();
        for ((a, b), chunks) in edges {
            let (ia, ib) = (index[&a], index[&b]);
            let key = (ia.min(ib), ia.max(ib));
            adjacency[ia as usize].push(ib);
            adjacency[ib as usize].push(ia);
            provenance.insert(key, chunks);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            ids,
            index,
            adjacency,
            provenance,
        }
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.index.contains_key(entity)
    }

    pub fn node_index(&self, entity: &str) -> Option<u32> {
        self.index.get(entity).copied()
    }

    pub fn node_id(&self, index: u32) -> &str {
        &self.ids[index as usize]
    }

    /// Sorted neighbor indices of a node index.
    pub fn neighbor_indices(&self, index: u32) -> &[u32] {
        &self.adjacency[index as usize]
    }

    /// Sorted neighbor ids. Empty for isolated entities.
    pub fn neighbors(&self, entity: &str) -> Result<Vec<&str>, GraphError> {
        let i = self
            .node_index(entity)
            .ok_or_else(|| GraphError::UnknownEntity(entity.to_string()))?;
        Ok(self
            .neighbor_indices(i)
            .iter()
            .map(|&j| self.node_id(j))
            .collect())
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.provenance(a, b).is_some()
    }

    pub fn provenance(&self, a: &str, b: &str) -> Option<&BTreeSet<String>> {
        let (ia, ib) = (self.node_index(a)?, self.node_index(b)?);
        self.provenance.get(&(ia.min(ib), ia.max(ib)))
    }

    /// Edges as (low id, high id, provenance), in id order.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, &BTreeSet<String>)> {
        self.provenance
            .iter()
            .map(|(&(a, b), p)| (self.node_id(a), self.node_id(b), p))
    }

    pub fn degree(&self, entity: &str) -> Option<usize> {
        self.node_index(entity).map(|i| self.adjacency[i as usize].len())
    }

    pub fn stats(&self) -> GraphStats {
        graph_stats(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let lines: Vec<SnapshotLine> = self
            .ids
            .iter()
            .map(|id| SnapshotLine::Node { id: id.clone() })
            .chain(self.edges().map(|(a, b, p)| SnapshotLine::Edge {
                a: a.to_string(),
                b: b.to_string(),
                provenance: p.iter().cloned().collect(),
            }))
            .collect();
        jsonl::write_file(path, &lines)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let lines: Vec<SnapshotLine> = jsonl::read_file(path)?;
        let mut ids = Vec::new();
        let mut edges = BTreeMap::new();
        for line in lines {
            match line {
                SnapshotLine::Node { id } => ids.push(id),
                SnapshotLine::Edge { a, b, provenance } => {
                    if a == b {
                        return Err(GraphError::Snapshot(format!("self-loop on {a:?}")));
                    }
                    if provenance.is_empty() {
                        return Err(GraphError::Snapshot(format!("edge {a:?}-{b:?} has no provenance")));
                    }
                    let key = if a < b { (a, b) } else { (b, a) };
                    edges.insert(key, provenance.into_iter().collect());
                }
            }
        }
        let known: BTreeSet<&String> = ids.iter().collect();
        if let Some(((a, b), _)) = edges
            .iter()
            .find(|((a, b), _)| !known.contains(a) || !known.contains(b))
        {
            return Err(GraphError::Snapshot(format!("edge {a:?}-{b:?} references unknown node")));
        }
        Ok(Self::from_parts(ids, edges))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SnapshotLine {
    Node { id: String },
    Edge { a: String, b: String, provenance: Vec<String> },
}

/// Pairwise closure of each chunk's entity set. Chunks are processed in
/// parallel and merged into ordered maps, so output is independent of
/// scheduling.
pub fn build_graph(entity_map: &[EntityRecord]) -> ContextGraph {
    let mut per_chunk: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in entity_map {
        for c in &rec.chunk_ids {
            per_chunk.entry(c.as_str()).or_default().push(rec.entity_id.as_str());
        }
    }
    let chunk_lists: Vec<(&str, Vec<&str>)> = per_chunk.into_iter().collect();
    let pairs: Vec<Vec<(&str, &str, &str)>> = chunk_lists
        .par_iter()
        .map(|(chunk, entities)| {
            let mut ents = entities.clone();
            ents.sort_unstable();
            ents.dedup();
            if ents.len() > MAX_ENTITIES_PER_CHUNK {
                log::warn!(
                    "chunk {chunk} has {} entities (> {MAX_ENTITIES_PER_CHUNK}); skipped for edge induction",
                    ents.len()
                );
                return Vec::new();
            }
            let mut out = Vec::with_capacity(ents.len() * ents.len().saturating_sub(1) / 2);
            for (i, a) in ents.iter().enumerate() {
                for b in &ents[i + 1..] {
                    out.push((*a, *b, *chunk));
                }
            }
            out
        })
        .collect();

    let mut edges: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for (a, b, chunk) in pairs.into_iter().flatten() {
        edges
            .entry((a.to_string(), b.to_string()))
            .or_default()
            .insert(chunk.to_string());
    }
    let ids = entity_map.iter().map(|r| r.entity_id.clone()).collect();
    ContextGraph::from_parts(ids, edges)
}

pub fn neighbors<'g>(g: &'g ContextGraph, entity: &str) -> Result<Vec<&'g str>, GraphError> {
    g.neighbors(entity)
}

pub fn graph_stats(g: &ContextGraph) -> GraphStats {
    let mut degree_histogram = BTreeMap::new();
    for adj in &g.adjacency {
        *degree_histogram.entry(adj.len()).or_insert(0) += 1;
    }
    let n = g.node_count();
    let mut seen = vec![false; n];
    let mut component_sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start as u32);
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            for &w in &g.adjacency[v as usize] {
                if !seen[w as usize] {
                    seen[w as usize] = true;
                    stack.push(w);
                }
            }
        }
        component_sizes.push(size);
    }
    component_sizes.sort_unstable_by(|a, b| b.cmp(a));
    GraphStats {
        node_count: n,
        edge_count: g.edge_count(),
        degree_histogram,
        component_sizes,
    }
}
