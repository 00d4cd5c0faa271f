//! Deterministic synthetic corpora used by tests, benches and the demo
//! configuration.
//!
//! Sentences are built so that [`crate::extraction::RuleBasedExtractor`]
//! finds exactly the intended entities: entity names are the only
//! capitalized words and filler text contains no determiners.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::corpus::Document;

const FIRST: &[&str] = &[
    "Harlow", "Ingrid", "Mateo", "Odile", "Soren", "Tamsin", "Vikram", "Wren", "Yusuf", "Zora",
    "Anouk", "Bruno", "Celeste", "Dario", "Elodie", "Fintan",
];
const LAST: &[&str] = &[
    "Vance", "Okafor", "Lindqvist", "Moreau", "Castillo", "Haddad", "Novak", "Brennan",
    "Kowalski", "Ferreira", "Tanaka", "Whitlock",
];

const FILLER: &[&str] = &[
    "reviewed", "budget", "plans", "near", "river", "ports", "during", "winter", "talks",
    "quietly", "approved", "new", "grain", "routes", "alongside", "local", "engineers", "studied",
    "tidal", "records", "across", "three", "seasons", "drafted", "shipping", "rules", "under",
    "pressure", "from", "traders", "mapped", "coastal", "mills", "over", "several", "months",
    "tested", "pumps", "beside", "canal", "locks", "signed", "lease", "terms", "covering",
    "storage", "yards", "audited", "ledgers",
];

/// Parameters for [`long_tail_corpus`].
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailSpec {
    pub documents: usize,
    pub sentences_per_document: usize,
    pub entities: usize,
    pub zipf_exponent: f64,
    pub min_mentions: usize,
    pub max_mentions: usize,
    pub seed: u64,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            documents: 20,
            sentences_per_document: 10,
            entities: 60,
            zipf_exponent: 1.1,
            min_mentions: 2,
            max_mentions: 3,
            seed: 2024,
        }
    }
}

/// Chunk size that makes every fixture sentence its own chunk: sentences
/// are 90 to 150 characters, so two never fit together.
pub const FIXTURE_MAX_CHARS: usize = 160;
const MIN_SENTENCE: usize = 90;
const MAX_SENTENCE: usize = 150;

pub fn entity_names(n: usize) -> Vec<String> {
    assert!(n <= FIRST.len() * LAST.len(), "not enough name combinations");
    (0..n)
        .map(|i| format!("{} {}", FIRST[i % FIRST.len()], LAST[(i / FIRST.len() + i) % LAST.len()]))
        .collect()
}

/// One sentence naming `entities` in order, padded with filler to 90–150
/// characters and ending with a period.
fn sentence<R: Rng>(entities: &[&str], rng: &mut R) -> String {
    let mut words: Vec<String> = Vec::new();
    for (i, e) in entities.iter().enumerate() {
        words.push(e.to_string());
        let n = if i + 1 == entities.len() { 2 } else { rng.random_range(2..=4) };
        for _ in 0..n {
            words.push(FILLER.choose(rng).expect("filler").to_string());
        }
    }
    let mut s = words.join(" ");
    while s.len() < MIN_SENTENCE {
        let w = FILLER.choose(rng).expect("filler");
        if s.len() + 1 + w.len() > MAX_SENTENCE - 1 {
            break;
        }
        s.push(' ');
        s.push_str(w);
    }
    s.push('.');
    debug_assert!((MIN_SENTENCE..=MAX_SENTENCE).contains(&s.len()), "{s}");
    s
}

/// Documents whose entity mentions follow a Zipf law: a few entities appear
/// in dozens of chunks while most appear in one or two.
pub fn long_tail_corpus(params: &LongTailSpec) -> Vec<Document> {
    let names = entity_names(params.entities);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let zipf = Zipf::new(params.entities as f64, params.zipf_exponent).expect("valid zipf parameters");
    (0..params.documents)
        .map(|d| {
            let sentences: Vec<String> = (0..params.sentences_per_document)
                .map(|_| {
                    let k = rng.random_range(params.min_mentions..=params.max_mentions);
                    let mut picked: Vec<usize> = Vec::with_capacity(k);
                    while picked.len() < k {
                        let i = zipf.sample(&mut rng) as usize - 1;
                        if !picked.contains(&i) {
                            picked.push(i);
                        }
                    }
                    let chosen: Vec<&str> = picked.iter().map(|&i| names[i].as_str()).collect();
                    sentence(&chosen, &mut rng)
                })
                .collect();
            Document {
                doc_id: format!("doc{d:02}"),
                title: format!("Harbor dossier {d:02}"),
                text: sentences.join(" "),
            }
        })
        .collect()
}

/// Two articles with overlapping casts, for same-document traversal.
pub fn same_document_corpus(seed: u64) -> Vec<Document> {
    let names = entity_names(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let casts: [&[usize]; 2] = [&[0, 1, 2, 3, 4, 5], &[3, 4, 5, 6, 7, 8, 9]];
    let titles = ["The northern ledger", "Letters from the southern quay"];
    casts
        .iter()
        .enumerate()
        .map(|(d, cast)| {
            let sentences: Vec<String> = (0..8)
                .map(|_| {
                    let mut pick: Vec<usize> = cast.to_vec();
                    pick.shuffle(&mut rng);
                    let chosen: Vec<&str> = pick[..2].iter().map(|&i| names[i].as_str()).collect();
                    sentence(&chosen, &mut rng)
                })
                .collect();
            Document {
                doc_id: format!("article{d}"),
                title: titles[d].to_string(),
                text: sentences.join(" "),
            }
        })
        .collect()
}

/// A ring of one-sentence documents: document `k` mentions entities `k` and
/// `k + 1`, so every entity's two chunks sit in different documents.
pub fn cross_document_corpus(n: usize, seed: u64) -> Vec<Document> {
    let names = entity_names(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let pair = [names[k].as_str(), names[(k + 1) % n].as_str()];
            Document {
                doc_id: format!("ring{k:02}"),
                title: format!("Ring note {k:02}"),
                text: sentence(&pair, &mut rng),
            }
        })
        .collect()
}
