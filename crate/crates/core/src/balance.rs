//! Secondary sampling: split a path set into coverage-targeted subsets,
//! always taking the least-utilized path next, and pair up sparse entities
//! for contrastive generation when a subset hits its length budget before
//! reaching the coverage target.
//!
//! Random draws happen only when a subset triggers contrastive pairs, in a
//! fixed order: one shuffle of the sparse entity list, then one chunk index
//! for the left side and one for the right side of each pair.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::EntityMap;
use crate::jsonl::{self, JsonlError};
use crate::traversal::{Path, PathSet, Step};

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("invalid balance config: {0}")]
    Config(String),
    #[error("path {path_id} mentions entity {entity_id} missing from the entity map")]
    UnknownEntity { path_id: String, entity_id: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// CoT length budget per subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StandardLength {
    /// ⌊total chunks / (hop + 1)⌋ with hop the longest path in the input.
    #[default]
    Auto,
    Fixed(usize),
    /// Subset 0 runs uncapped; later subsets use its size as the budget.
    FirstSubset,
}

impl fmt::Display for StandardLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StandardLength::Auto => f.write_str("auto"),
            StandardLength::Fixed(n) => write!(f, "{n}"),
            StandardLength::FirstSubset => f.write_str("first_subset"),
        }
    }
}

impl FromStr for StandardLength {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(StandardLength::Auto),
            "first_subset" => Ok(StandardLength::FirstSubset),
            n => n
                .parse::<usize>()
                .map(StandardLength::Fixed)
                .map_err(|_| format!("standard length {n:?} is not auto, first_subset or an integer")),
        }
    }
}

impl Serialize for StandardLength {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StandardLength::Fixed(n) => s.serialize_u64(*n as u64),
            other => s.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for StandardLength {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(StandardLength::Fixed(n as usize)),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub target_coverage: f64,
    pub standard_length: StandardLength,
    pub rng_seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            target_coverage: 1.0,
            standard_length: StandardLength::Auto,
            rng_seed: 7,
        }
    }
}

impl BalanceConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let r = self.target_coverage;
        if !(r > 0.0 && r <= 1.0) {
            out.push(("target_coverage", format!("{r} outside (0, 1]")));
        }
        if self.standard_length == StandardLength::Fixed(0) {
            out.push(("standard_length", "must be positive".to_string()));
        }
        out
    }
}

/// Exact rational form of a float, via its shortest round-trip decimal.
pub fn exact_ratio(x: f64) -> Ratio<i128> {
    let s = format!("{x:e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits_part = mantissa.trim_start_matches('-');
    let (int, frac) = digits_part.split_once('.').unwrap_or((digits_part, ""));
    let digits: i128 = format!("{int}{frac}").parse().expect("decimal digits");
    let scale = exp - frac.len() as i32;
    let pow = |e: i32| 10i128.pow(e.unsigned_abs());
    let v = if scale >= 0 {
        Ratio::from_integer(digits * pow(scale))
    } else {
        Ratio::new(digits, pow(scale))
    };
    if negative {
        -v
    } else {
        v
    }
}

/// Δr = (r − r')/r with r' = covered / total.
pub fn delta_r(r: f64, covered: usize, total: usize) -> Ratio<i128> {
    let r = exact_ratio(r);
    let achieved = Ratio::new(covered as i128, total.max(1) as i128);
    (r - achieved) / r
}

/// (k, cut) = (⌊Δr·l⌋, ⌊(1 − Δr)·l⌋).
pub fn cc_sizes(delta_r: Ratio<i128>, l: usize) -> (usize, usize) {
    let l = Ratio::from_integer(l as i128);
    let k = (delta_r * l).floor().to_integer().max(0) as usize;
    let cut = ((Ratio::from_integer(1) - delta_r) * l).floor().to_integer().max(0) as usize;
    (k, cut)
}

pub fn auto_standard_length(total_chunks: usize, hop: usize) -> usize {
    total_chunks / (hop + 1)
}

/// Entity usage counts across all subsets so far, plus the chunks covered by
/// the subset under construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationLedger {
    ids: Vec<String>,
    counts: Vec<u64>,
    covered: BTreeMap<String, u32>,
    total_chunks: usize,
}

impl UtilizationLedger {
    pub fn new<I: IntoIterator<Item = String>>(entity_ids: I, total_chunks: usize) -> Self {
        let mut ids: Vec<String> = entity_ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let counts = vec![0; ids.len()];
        Self {
            ids,
            counts,
            covered: BTreeMap::new(),
            total_chunks,
        }
    }

    pub fn for_entities(entities: &EntityMap, total_chunks: usize) -> Self {
        Self::new(entities.records().iter().map(|r| r.entity_id.clone()), total_chunks)
    }

    fn slot(&self, entity_id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(entity_id)).ok()
    }

    pub fn count(&self, entity_id: &str) -> u64 {
        self.slot(entity_id).map_or(0, |i| self.counts[i])
    }

    pub fn counts(&self) -> BTreeMap<&str, u64> {
        self.ids.iter().map(String::as_str).zip(self.counts.iter().copied()).collect()
    }

    pub fn covered_chunks(&self) -> impl Iterator<Item = &str> {
        self.covered.keys().map(String::as_str)
    }

    pub fn covered_count(&self) -> usize {
        self.covered.len()
    }

    pub fn total_chunks(&self) -> usize {
        self.total_chunks
    }

    pub fn coverage(&self) -> f64 {
        if self.total_chunks == 0 {
            0.0
        } else {
            self.covered.len() as f64 / self.total_chunks as f64
        }
    }

    pub fn reset_coverage(&mut self) {
        self.covered.clear();
    }

    fn bump(&mut self, slot: usize) {
        self.counts[slot] += 1;
    }

    fn unbump(&mut self, slot: usize) {
        self.counts[slot] -= 1;
    }

    fn cover(&mut self, chunk: &str) {
        *self.covered.entry(chunk.to_string()).or_insert(0) += 1;
    }

    fn uncover(&mut self, chunk: &str) {
        if let Some(n) = self.covered.get_mut(chunk) {
            *n -= 1;
            if *n == 0 {
                self.covered.remove(chunk);
            }
        }
    }
}

/// Σ of ledger counts over the path's entities.
pub fn path_utilization(path: &Path, ledger: &UtilizationLedger) -> u64 {
    path.entities().map(|e| ledger.count(e)).sum()
}

/// True iff the CoT set has reached `l` while coverage is still below `r`.
pub fn cc_trigger_check(sample_count: usize, l: usize, r: f64, ledger: &UtilizationLedger) -> bool {
    let achieved = Ratio::new(ledger.covered_count() as i128, ledger.total_chunks().max(1) as i128);
    sample_count >= l && achieved < exact_ratio(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcPair {
    pub pair_id: String,
    pub left: Step,
    pub right: Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcTrigger {
    /// Δr as "numerator/denominator".
    pub delta_r: String,
    pub k: usize,
    pub cut: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAllocation {
    pub subset_index: usize,
    pub cot_paths: Vec<Path>,
    pub cc_pairs: Vec<CcPair>,
    pub achieved_coverage: f64,
    pub covered_chunks: usize,
    pub total_chunks: usize,
    #[serde(default)]
    pub cc_trigger: Option<CcTrigger>,
}

pub fn save_subsets(path: &FsPath, subsets: &[SubsetAllocation]) -> Result<(), JsonlError> {
    jsonl::write_file(path, subsets)
}

pub fn load_subsets(path: &FsPath) -> Result<Vec<SubsetAllocation>, JsonlError> {
    jsonl::read_file(path)
}

/// One step of the algorithm, for comparison against reference runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceEvent {
    Select {
        subset: usize,
        path_index: usize,
        utilization: u64,
    },
    CcTrigger {
        subset: usize,
        covered: usize,
        total: usize,
        delta_r: String,
        k: usize,
        cut: usize,
        returned: Vec<usize>,
        sparse: Vec<String>,
        pairs: Vec<(Step, Step)>,
    },
    SubsetEnd {
        subset: usize,
        retained: Vec<usize>,
        covered: usize,
    },
}

/// Mutable algorithm state carried across subsets.
pub struct BalanceState<'a> {
    paths: &'a [Path],
    path_slots: Vec<Vec<usize>>,
    entity_chunks: Vec<&'a [String]>,
    remaining: Vec<bool>,
    remaining_count: usize,
    pub ledger: UtilizationLedger,
    rng: ChaCha8Rng,
    target: f64,
    pub transcript: Vec<BalanceEvent>,
}

impl<'a> BalanceState<'a> {
    pub fn new(
        paths: &'a [Path],
        entities: &'a EntityMap,
        total_chunks: usize,
        target_coverage: f64,
        rng_seed: u64,
    ) -> Result<Self, BalanceError> {
        let ledger = UtilizationLedger::for_entities(entities, total_chunks);
        let entity_chunks = ledger
            .ids
            .iter()
            .map(|id| entities.get(id).map(|r| r.chunk_ids.as_slice()).unwrap_or(&[]))
            .collect();
        let path_slots = paths
            .iter()
            .map(|p| {
                p.entities()
                    .map(|e| {
                        ledger.slot(e).ok_or_else(|| BalanceError::UnknownEntity {
                            path_id: p.path_id.clone(),
                            entity_id: e.to_string(),
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            paths,
            path_slots,
            entity_chunks,
            remaining: vec![true; paths.len()],
            remaining_count: paths.len(),
            ledger,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            target: target_coverage,
            transcript: Vec::new(),
        })
    }

    pub fn remaining(&self) -> Vec<usize> {
        (0..self.paths.len()).filter(|&i| self.remaining[i]).collect()
    }

    pub fn remaining_count(&self) -> usize {
        self.remaining_count
    }

    fn utilization(&self, i: usize) -> u64 {
        self.path_slots[i].iter().map(|&s| self.ledger.counts[s]).sum()
    }

    fn take(&mut self, i: usize) {
        self.remaining[i] = false;
        self.remaining_count -= 1;
        for &s in &self.path_slots[i] {
            self.ledger.bump(s);
        }
        for c in self.paths[i].chunks() {
            self.ledger.cover(c);
        }
    }

    fn give_back(&mut self, i: usize) {
        self.remaining[i] = true;
        self.remaining_count += 1;
        for &s in &self.path_slots[i] {
            self.ledger.unbump(s);
        }
        for c in self.paths[i].chunks() {
            self.ledger.uncover(c);
        }
    }

    fn reached_target(&self) -> bool {
        let achieved = Ratio::new(
            self.ledger.covered_count() as i128,
            self.ledger.total_chunks.max(1) as i128,
        );
        achieved >= exact_ratio(self.target)
    }

    /// Build one subset. `l = None` means no length budget.
    pub fn balanced_sampling(
        &mut self,
        subset_index: usize,
        l: Option<usize>,
    ) -> Result<SubsetAllocation, BalanceError> {
        self.ledger.reset_coverage();
        // Utilizations only grow while selecting, so heap keys are lower
        // bounds; an entry is trusted once its key matches the live value.
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> = (0..self.paths.len())
            .filter(|&i| self.remaining[i])
            .map(|i| Reverse((self.utilization(i), i)))
            .collect();
        let mut cot: Vec<usize> = Vec::new();
        let mut cc_pairs = Vec::new();
        let mut trigger = None;
        while let Some(Reverse((key, i))) = heap.pop() {
            if !self.remaining[i] {
                continue;
            }
            let live = self.utilization(i);
            if live != key {
                heap.push(Reverse((live, i)));
                continue;
            }
            self.take(i);
            cot.push(i);
            self.transcript.push(BalanceEvent::Select {
                subset: subset_index,
                path_index: i,
                utilization: live,
            });
            if self.reached_target() {
                break;
            }
            let Some(l) = l else { continue };
            if cot.len() < l {
                continue;
            }
            if l < 2 {
                return Err(BalanceError::Config(format!(
                    "standard length {l} is too small to form contrastive pairs (needs >= 2)"
                )));
            }
            let dr = delta_r(self.target, self.ledger.covered_count(), self.ledger.total_chunks);
            let (k, cut) = cc_sizes(dr, l);
            let mut order: Vec<usize> = (0..self.ledger.ids.len()).collect();
            order.sort_by(|&a, &b| {
                (self.ledger.counts[a], &self.ledger.ids[a]).cmp(&(self.ledger.counts[b], &self.ledger.ids[b]))
            });
            let returned: Vec<usize> = cot.split_off(cut.min(cot.len()));
            for &p in &returned {
                self.give_back(p);
            }
            let mut sparse: Vec<usize> = order.into_iter().take(k).collect();
            sparse.shuffle(&mut self.rng);
            let mut pairs = Vec::new();
            for two in sparse.chunks_exact(2) {
                let (x, y) = (two[0], two[1]);
                let cx = pick_chunk(&mut self.rng, self.entity_chunks[x]);
                let cy = pick_chunk(&mut self.rng, self.entity_chunks[y]);
                pairs.push((
                    Step::new(self.ledger.ids[x].clone(), cx),
                    Step::new(self.ledger.ids[y].clone(), cy),
                ));
            }
            for (a, b) in &pairs {
                for s in [a, b] {
                    let slot = self.ledger.slot(&s.entity_id).expect("ledger entity");
                    self.ledger.bump(slot);
                    self.ledger.cover(&s.chunk_id);
                }
            }
            self.transcript.push(BalanceEvent::CcTrigger {
                subset: subset_index,
                covered: self.ledger.covered_count(),
                total: self.ledger.total_chunks,
                delta_r: format!("{dr}"),
                k,
                cut,
                returned,
                sparse: sparse.iter().map(|&s| self.ledger.ids[s].clone()).collect(),
                pairs: pairs.clone(),
            });
            cc_pairs = pairs
                .into_iter()
                .enumerate()
                .map(|(j, (left, right))| CcPair {
                    pair_id: format!("s{subset_index:04}-cc{j:04}"),
                    left,
                    right,
                })
                .collect();
            trigger = Some(CcTrigger {
                delta_r: format!("{dr}"),
                k,
                cut,
            });
            break;
        }
        self.transcript.push(BalanceEvent::SubsetEnd {
            subset: subset_index,
            retained: cot.clone(),
            covered: self.ledger.covered_count(),
        });
        Ok(SubsetAllocation {
            subset_index,
            cot_paths: cot.iter().map(|&i| self.paths[i].clone()).collect(),
            cc_pairs,
            achieved_coverage: self.ledger.coverage(),
            covered_chunks: self.ledger.covered_count(),
            total_chunks: self.ledger.total_chunks,
            cc_trigger: trigger,
        })
    }
}

/// Entities whose chunk list is empty never reach here: every entity in the
/// map was created from at least one chunk.
fn pick_chunk(rng: &mut ChaCha8Rng, chunks: &[String]) -> String {
    chunks[rng.random_range(0..chunks.len())].clone()
}

/// Free-function form of [`BalanceState::balanced_sampling`].
pub fn balanced_sampling(
    state: &mut BalanceState<'_>,
    subset_index: usize,
    l: Option<usize>,
) -> Result<SubsetAllocation, BalanceError> {
    state.balanced_sampling(subset_index, l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    pub subsets: Vec<SubsetAllocation>,
    pub ledger: UtilizationLedger,
    /// Input path indices never retained in any subset.
    pub unconsumed: Vec<usize>,
    pub transcript: Vec<BalanceEvent>,
    /// Resolved per-subset budget (None when subset 0 ran uncapped and no
    /// further subsets were needed).
    pub standard_length: Option<usize>,
}

/// Split the path set into subsets until every path has been retained, or
/// an iteration retains none.
pub fn secondary_sampling(
    path_set: &PathSet,
    entities: &EntityMap,
    total_chunks: usize,
    cfg: &BalanceConfig,
) -> Result<BalanceOutcome, BalanceError> {
    if let Some((field, why)) = cfg.violations().into_iter().next() {
        return Err(BalanceError::Config(format!("{field}: {why}")));
    }
    let mut state = BalanceState::new(&path_set.paths, entities, total_chunks, cfg.target_coverage, cfg.rng_seed)?;
    let max_hop = path_set.paths.iter().map(|p| p.hop_count).max().unwrap_or(1);
    let mut l = match cfg.standard_length {
        StandardLength::Auto => Some(auto_standard_length(total_chunks, max_hop)),
        StandardLength::Fixed(n) => Some(n),
        StandardLength::FirstSubset => None,
    };
    let mut subsets = Vec::new();
    while state.remaining_count() > 0 {
        let subset = state.balanced_sampling(subsets.len(), l)?;
        if l.is_none() {
            l = Some(subset.cot_paths.len().max(2));
        }
        let stalled = subset.cot_paths.is_empty();
        subsets.push(subset);
        if stalled {
            log::warn!(
                "subset {} retained no paths; {} paths left unconsumed",
                subsets.len() - 1,
                state.remaining_count()
            );
            break;
        }
    }
    let unconsumed = state.remaining();
    Ok(BalanceOutcome {
        subsets,
        ledger: state.ledger,
        unconsumed,
        transcript: state.transcript,
        standard_length: l,
    })
}
