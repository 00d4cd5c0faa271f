//! Document ingestion and chunking.
//!
//! Chunks are contiguous, whitespace-trimmed spans of the document text, so
//! joining a document's chunks with single spaces reproduces the text up to
//! whitespace normalization.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, Embedder};

pub const DEFAULT_MAX_CHARS: usize = 1200;
pub const DEFAULT_BREAKPOINT_PERCENTILE: f64 = 95.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("ingest error at line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("invalid chunk policy: {0}")]
    Policy(String),
    #[error("embedding backend failed during semantic chunking: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
}

impl Chunk {
    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal}")
    }
}

#[derive(Clone, Copy)]
pub enum ChunkPolicy<'a> {
    /// Greedy sentence packing up to `max_chars` characters per chunk.
    Fixed { max_chars: usize },
    /// Break between adjacent sentences whose cosine distance exceeds the
    /// given percentile of all adjacent distances in the document.
    Semantic {
        embedder: &'a Embedder,
        breakpoint_percentile: f64,
    },
}

impl std::fmt::Debug for ChunkPolicy<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChunkPolicy::Fixed { max_chars } => write!(f, "Fixed({max_chars})"),
            ChunkPolicy::Semantic {
                breakpoint_percentile,
                ..
            } => write!(f, "Semantic(p{breakpoint_percentile})"),
        }
    }
}

/// Read JSON Lines document records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn ingest_corpus<R: BufRead>(source: R) -> Result<Vec<Document>, CorpusError> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Ingest {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.doc_id.trim().is_empty() {
            return Err(CorpusError::Ingest {
                line: line_no,
                message: "empty doc_id".into(),
            });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Ingest {
                line: line_no,
                message: format!("document {:?} has empty text", doc.doc_id),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Byte spans of sentences in `text`. A sentence ends at `.`, `!` or `?`
/// followed by whitespace and then an uppercase letter or digit. Spans are
/// trimmed and cover every non-whitespace character of `text`.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        if start.is_none() && !ch.is_whitespace() {
            start = Some(pos);
        }
        if matches!(ch, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let saw_space = j > i + 1;
            if saw_space && j < chars.len() {
                let next = chars[j].1;
                if next.is_uppercase() || next.is_ascii_digit() {
                    if let Some(s) = start.take() {
                        spans.push((s, pos + ch.len_utf8()));
                    }
                    i = j;
                    continue;
                }
            }
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text)
        .into_iter()
        .map(|(s, e)| &text[s..e])
        .collect()
}

fn char_len(text: &str, span: (usize, usize)) -> usize {
    text[span.0..span.1].chars().count()
}

/// Split an oversize span at whitespace into pieces of at most `max_chars`
/// characters. A single token longer than `max_chars` stays whole.
fn split_on_words(text: &str, span: (usize, usize), max_chars: usize) -> Vec<(usize, usize)> {
    let mut words = Vec::new();
    let mut word_start = None;
    for (off, ch) in text[span.0..span.1].char_indices() {
        let pos = span.0 + off;
        if ch.is_whitespace() {
            if let Some(ws) = word_start.take() {
                words.push((ws, pos));
            }
        } else if word_start.is_none() {
            word_start = Some(pos);
        }
    }
    if let Some(ws) = word_start {
        words.push((ws, span.1));
    }
    pack(text, &words, max_chars)
}

fn pack(text: &str, pieces: &[(usize, usize)], max_chars: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for &piece in pieces {
        current = match current {
            None => Some(piece),
            Some(cur) if char_len(text, (cur.0, piece.1)) <= max_chars => Some((cur.0, piece.1)),
            Some(cur) => {
                out.push(cur);
                Some(piece)
            }
        };
    }
    out.extend(current);
    out
}

/// Linear-interpolated percentile (`p` in 0..=100) of a non-empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn semantic_spans(
    text: &str,
    embedder: &Embedder,
    breakpoint_percentile: f64,
) -> Result<Vec<(usize, usize)>, CorpusError> {
    let sentences = sentence_spans(text);
    if sentences.len() < 2 {
        return Ok(sentences);
    }
    let vectors = sentences
        .iter()
        .map(|&(s, e)| embedder.embed(&text[s..e]))
        .collect::<Result<Vec<_>, _>>()?;
    let distances: Vec<f64> = vectors
        .windows(2)
        .map(|w| cosine(&w[0], &w[1]).map(|c| 1.0 - c))
        .collect::<Result<_, _>>()?;
    let threshold = percentile(&distances, breakpoint_percentile);

    let mut out = Vec::new();
    let mut group_start = sentences[0].0;
    for (i, d) in distances.iter().enumerate() {
        if *d > threshold {
            out.push((group_start, sentences[i].1));
            group_start = sentences[i + 1].0;
        }
    }
    out.push((group_start, sentences[sentences.len() - 1].1));
    Ok(out)
}

pub fn chunk_document(doc: &Document, policy: ChunkPolicy<'_>) -> Result<Vec<Chunk>, CorpusError> {
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyText(doc.doc_id.clone()));
    }
    let spans = match policy {
        ChunkPolicy::Fixed { max_chars } => {
            if max_chars == 0 {
                return Err(CorpusError::Policy("max_chars must be positive".into()));
            }
            let mut pieces = Vec::new();
            for span in sentence_spans(&doc.text) {
                if char_len(&doc.text, span) > max_chars {
                    pieces.extend(split_on_words(&doc.text, span, max_chars));
                } else {
                    pieces.push(span);
                }
            }
            pack(&doc.text, &pieces, max_chars)
        }
        ChunkPolicy::Semantic {
            embedder,
            breakpoint_percentile,
        } => {
            if !(0.0..=100.0).contains(&breakpoint_percentile) {
                return Err(CorpusError::Policy(format!(
                    "breakpoint percentile {breakpoint_percentile} outside [0, 100]"
                )));
            }
            semantic_spans(&doc.text, embedder, breakpoint_percentile)?
        }
    };
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(ordinal, (s, e))| Chunk {
            chunk_id: Chunk::make_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text: doc.text[s..e].to_string(),
        })
        .collect())
}

/// Whitespace-normalized form used by the reconstruction invariant.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Chunks in corpus order with id lookup and document titles.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
    by_id: HashMap<String, usize>,
    titles: HashMap<String, String>,
}

impl ChunkStore {
    pub fn new(chunks: Vec<Chunk>) -> Self {
        let by_id = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_id.clone(), i))
            .collect();
        Self {
            chunks,
            by_id,
            titles: HashMap::new(),
        }
    }

    pub fn with_titles<'a>(mut self, docs: impl IntoIterator<Item = &'a Document>) -> Self {
        for d in docs {
            self.titles.insert(d.doc_id.clone(), d.title.clone());
        }
        self
    }

    pub fn get(&self, chunk_id: &str) -> Option<&Chunk> {
        self.by_id.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn position(&self, chunk_id: &str) -> Option<usize> {
        self.by_id.get(chunk_id).copied()
    }

    pub fn doc_of(&self, chunk_id: &str) -> Option<&str> {
        self.get(chunk_id).map(|c| c.doc_id.as_str())
    }

    pub fn title(&self, doc_id: &str) -> Option<&str> {
        self.titles.get(doc_id).map(String::as_str)
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingBackend, StaticEmbedder};
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document {
            doc_id: "d1".into(),
            title: "T".into(),
            text: text.into(),
        }
    }

    #[test]
    fn ingest_two_records_in_order() {
        let input = "{\"doc_id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\n\n{\"doc_id\":\"b\",\"title\":\"\",\"text\":\"y\"}\n";
        let docs = ingest_corpus(input.as_bytes()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].doc_id, "a");
        assert_eq!(docs[1].doc_id, "b");
    }

    #[test]
    fn ingest_rejects_duplicates_and_malformed() {
        let dup = "{\"doc_id\":\"d1\",\"title\":\"\",\"text\":\"x\"}\n{\"doc_id\":\"d1\",\"title\":\"\",\"text\":\"y\"}\n";
        match ingest_corpus(dup.as_bytes()) {
            Err(CorpusError::DuplicateDocId(id)) => assert_eq!(id, "d1"),
            other => panic!("{other:?}"),
        }
        let bad = "{\"doc_id\":\"a\",\"text\":\"x\"}\nnot json\n";
        match ingest_corpus(bad.as_bytes()) {
            Err(CorpusError::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(ingest_corpus("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn sentence_rule() {
        let s = split_sentences("Alpha rose. Beta fell! 3 items sold? yes. Done");
        assert_eq!(s, vec!["Alpha rose.", "Beta fell!", "3 items sold? yes.", "Done"]);
        assert_eq!(split_sentences("e.g. this stays. Next"), vec!["e.g. this stays.", "Next"]);
    }

    #[test]
    fn one_sentence_fixed() {
        let d = doc("Company X reported growth.");
        let chunks = chunk_document(&d, ChunkPolicy::Fixed { max_chars: 4096 }).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.text);
        assert_eq!(chunks[0].chunk_id, "d1#0");
    }

    #[test]
    fn empty_text_is_rejected() {
        let err = chunk_document(&doc("   "), ChunkPolicy::Fixed { max_chars: 10 }).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyText(_)));
    }

    #[test]
    fn fixed_keeps_sentences_whole() {
        let d = doc("Aa bb cc. Dd ee ff. Gg hh ii.");
        let chunks = chunk_document(&d, ChunkPolicy::Fixed { max_chars: 20 }).unwrap();
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["Aa bb cc. Dd ee ff.", "Gg hh ii."]);
    }

    #[test]
    fn oversize_sentence_splits_at_whitespace() {
        let d = doc("aaaa bbbb cccc dddd");
        let chunks = chunk_document(&d, ChunkPolicy::Fixed { max_chars: 9 }).unwrap();
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["aaaa bbbb", "cccc dddd"]);
    }

    #[test]
    fn percentile_interpolates() {
        // distances 0.1 and 0.9: rank 0.25 → 0.1 + 0.25 * 0.8 = 0.3
        assert!((percentile(&[0.9, 0.1], 25.0) - 0.3).abs() < 1e-12);
        assert_eq!(percentile(&[5.0], 95.0), 5.0);
    }

    #[test]
    fn semantic_breakpoint_between_second_and_third() {
        // adjacent cosine similarities 0.9 and 0.1 by construction
        let s1 = "Alpha one.";
        let s2 = "Beta two.";
        let s3 = "Gamma three.";
        let a = vec![1.0, 0.0];
        let b = vec![0.9, (1.0f64 - 0.81).sqrt()];
        // c has cosine 0.1 with b
        let theta_b = b[1].atan2(b[0]);
        let theta_c = theta_b + 0.1f64.acos();
        let c = vec![theta_c.cos(), theta_c.sin()];
        let backend = StaticEmbedder::new(
            "static",
            [(s1, a), (s2, b), (s3, c)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        );
        assert_eq!(backend.id(), "static");
        let embedder = Embedder::uncached(Box::new(backend));
        let d = doc(&format!("{s1} {s2} {s3}"));
        let chunks = chunk_document(
            &d,
            ChunkPolicy::Semantic {
                embedder: &embedder,
                breakpoint_percentile: 25.0,
            },
        )
        .unwrap();
        let texts: Vec<_> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, vec!["Alpha one. Beta two.", "Gamma three."]);
    }

    #[test]
    fn semantic_propagates_backend_error() {
        let embedder = Embedder::uncached(Box::new(StaticEmbedder::new("empty", Default::default())));
        let d = doc("One here. Two here.");
        let err = chunk_document(
            &d,
            ChunkPolicy::Semantic {
                embedder: &embedder,
                breakpoint_percentile: 95.0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Embedding(_)));
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        let word = "[A-Za-z0-9]{1,12}";
        let sep = prop_oneof![Just(" "), Just("  "), Just(". "), Just("! "), Just("\n"), Just(". \n")];
        prop::collection::vec((word, sep), 1..40).prop_map(|parts| {
            parts
                .into_iter()
                .map(|(w, s)| format!("{w}{s}"))
                .collect::<String>()
        })
    }

    proptest! {
        #[test]
        fn fixed_reconstructs_and_orders(text in text_strategy(), max_chars in 1usize..80) {
            prop_assume!(!text.trim().is_empty());
            let d = doc(&text);
            let chunks = chunk_document(&d, ChunkPolicy::Fixed { max_chars }).unwrap();
            prop_assert!(!chunks.is_empty());
            let joined = chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(normalize_whitespace(&joined), normalize_whitespace(&text));
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal, i);
                prop_assert_eq!(&c.chunk_id, &Chunk::make_id("d1", i));
                // only an unsplittable token may exceed the budget
                if c.text.chars().count() > max_chars {
                    prop_assert!(!c.text.contains(char::is_whitespace));
                }
            }
            let again = chunk_document(&d, ChunkPolicy::Fixed { max_chars }).unwrap();
            prop_assert_eq!(chunks, again);
        }

        #[test]
        fn semantic_reconstructs(text in text_strategy(), p in 0.0f64..100.0) {
            prop_assume!(!text.trim().is_empty());
            let embedder = Embedder::uncached(Box::new(crate::embedding::HashEmbedder::new(8)));
            let d = doc(&text);
            let policy = ChunkPolicy::Semantic { embedder: &embedder, breakpoint_percentile: p };
            let chunks = chunk_document(&d, policy).unwrap();
            let joined = chunks.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(normalize_whitespace(&joined), normalize_whitespace(&text));
            prop_assert_eq!(chunks, chunk_document(&d, policy).unwrap());
        }
    }
}
