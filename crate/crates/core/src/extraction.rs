//! Entity mention extraction, normalization, and the entity → chunks map.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;
use crate::jsonl::{self, JsonlError};
use crate::llm::{ChatRequest, DecodeParams, LlmBackend, LlmError};

pub const DEFAULT_MAX_MENTIONS: usize = 16;

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extractor backend failed on chunk {chunk_id}: {source}")]
    Backend { chunk_id: String, source: LlmError },
    #[error("extractor output for chunk {chunk_id} is not a list of non-empty strings: {raw:?}")]
    Format { chunk_id: String, raw: String },
    #[error("alias table: {0}")]
    Alias(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl ExtractionError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ExtractionError::Backend {
                source: LlmError::Transient(_),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub canonical_name: String,
    pub aliases: BTreeSet<String>,
    /// First-appearance order, no duplicates.
    pub chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub chunk_id: String,
    pub raw_mentions: Vec<String>,
    #[serde(default)]
    pub resolved_entity_ids: Vec<String>,
}

// ---------------------------------------------------------------------------
// normalization

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AliasLine {
    surface: String,
    canonical: String,
}

/// Surface → canonical mapping with chains resolved. Keys and values are
/// stored in basic normalized form (lowercase, trimmed, single spaces).
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    map: HashMap<String, String>,
    canonicals: HashSet<String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S, T>(pairs: I) -> Result<Self, ExtractionError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut raw = HashMap::new();
        for (s, c) in pairs {
            let s = basic_form(s.as_ref());
            let c = basic_form(c.as_ref());
            if s.is_empty() || c.is_empty() {
                return Err(ExtractionError::Alias("empty surface or canonical".into()));
            }
            if s != c {
                raw.insert(s, c);
            }
        }
        let mut map = HashMap::new();
        for start in raw.keys() {
            let mut seen = HashSet::from([start.clone()]);
            let mut cur = &raw[start];
            while let Some(next) = raw.get(cur) {
                if !seen.insert(cur.clone()) {
                    return Err(ExtractionError::Alias(format!("alias cycle through {start:?}")));
                }
                cur = next;
            }
            map.insert(start.clone(), cur.clone());
        }
        let canonicals = map.values().cloned().collect();
        Ok(Self { map, canonicals })
    }

    /// Load a JSON Lines file of `{surface, canonical}` records.
    pub fn load(path: &Path) -> Result<Self, ExtractionError> {
        let lines: Vec<AliasLine> = jsonl::read_file(path)?;
        Self::from_pairs(lines.into_iter().map(|l| (l.surface, l.canonical)))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn lookup(&self, form: &str) -> Option<&str> {
        if let Some(c) = self.map.get(form) {
            return Some(c);
        }
        self.canonicals.get(form).map(String::as_str)
    }
}

/// Lowercase, strip non-alphanumeric characters at both ends, collapse
/// internal whitespace.
fn basic_form(mention: &str) -> String {
    let lowered = mention.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Singularize one word. Every output is a fixed point of this function.
fn singularize(word: &str) -> String {
    let ends_alnum = |w: &str| w.chars().last().is_some_and(char::is_alphanumeric);
    let mut word = word;
    while let Some(stem) = word.strip_suffix("'s").filter(|s| ends_alnum(s)) {
        word = stem;
    }
    let n = word.chars().count();
    let candidate = if n > 4 && word.ends_with("ies") {
        format!("{}y", &word[..word.len() - 3])
    } else if word.ends_with("sses") || (n > 4 && word.ends_with("uses")) {
        word[..word.len() - 2].to_string()
    } else if n > 3
        && word.ends_with('s')
        && !word.ends_with("ss")
        && !word.ends_with("us")
        && !word.ends_with("is")
    {
        word[..word.len() - 1].to_string()
    } else {
        return word.to_string();
    };
    if ends_alnum(&candidate) {
        candidate
    } else {
        word.to_string()
    }
}

/// Canonical form of a mention: casing, outer punctuation, plural suffix of
/// the last word, then alias lookup. Alias mappings win over morphology.
pub fn normalize_mention(mention: &str, aliases: &AliasTable) -> String {
    let form = basic_form(mention);
    if let Some(c) = aliases.lookup(&form) {
        return c.to_string();
    }
    let morph = match form.rsplit_once(' ') {
        Some((head, last)) => format!("{head} {}", singularize(last)),
        None => singularize(&form),
    };
    match aliases.lookup(&morph) {
        Some(c) => c.to_string(),
        None => morph,
    }
}

// ---------------------------------------------------------------------------
// extractor backends

pub trait ExtractorBackend: Send + Sync {
    fn mentions(&self, chunk: &Chunk) -> Result<Vec<String>, ExtractionError>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "had", "has", "have",
    "he", "her", "his", "if", "in", "into", "is", "it", "its", "of", "on", "or", "our", "she",
    "so", "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "to",
    "was", "we", "were", "which", "while", "who", "will", "with", "yet", "after", "before",
    "however", "also", "when", "where", "what", "how", "why", "not", "no",
];

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "its", "their", "this", "these", "those", "our", "his", "her",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token.to_lowercase().as_str())
}

#[derive(Debug, Clone, Copy)]
struct Token {
    start: usize,
    end: usize,
    /// Only whitespace separates this token from the previous one.
    joined: bool,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    let mut gap_clean = false;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        let inner = (ch == '-' || ch == '\'' || ch == '&')
            && start.is_some()
            && chars.get(i + 1).is_some_and(|(_, n)| n.is_alphanumeric());
        if ch.is_alphanumeric() || inner {
            if start.is_none() {
                start = Some(pos);
            }
            continue;
        }
        if let Some(s) = start.take() {
            let joined = gap_clean && !tokens.is_empty();
            tokens.push(Token { start: s, end: pos, joined });
            gap_clean = true;
        }
        if !ch.is_whitespace() {
            gap_clean = false;
        }
    }
    if let Some(s) = start {
        let joined = gap_clean && !tokens.is_empty();
        tokens.push(Token {
            start: s,
            end: text.len(),
            joined,
        });
    }
    tokens
}

/// Offline extractor: maximal runs of capitalized tokens (leading stopwords
/// dropped) plus short lowercase noun phrases introduced by a determiner.
#[derive(Debug, Clone)]
pub struct RuleBasedExtractor {
    pub max_mentions: usize,
}

impl Default for RuleBasedExtractor {
    fn default() -> Self {
        Self {
            max_mentions: DEFAULT_MAX_MENTIONS,
        }
    }
}

impl RuleBasedExtractor {
    fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        let tokens = tokenize(text);
        let word = |t: &Token| &text[t.start..t.end];
        let capitalized = |t: &Token| word(t).chars().next().is_some_and(char::is_uppercase);
        let mut spans = Vec::new();

        let mut i = 0;
        while i < tokens.len() {
            if !capitalized(&tokens[i]) {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < tokens.len() && tokens[j].joined && capitalized(&tokens[j]) {
                j += 1;
            }
            let mut s = i;
            while s < j && is_stopword(word(&tokens[s])) {
                s += 1;
            }
            if s < j {
                spans.push((tokens[s].start, tokens[j - 1].end));
            }
            i = j;
        }

        for (i, t) in tokens.iter().enumerate() {
            if !DETERMINERS.contains(&word(t).to_lowercase().as_str()) {
                continue;
            }
            let mut j = i + 1;
            while j < tokens.len() && j - i <= 3 && tokens[j].joined {
                let w = word(&tokens[j]);
                let ok = w.chars().all(|c| c.is_lowercase() || c == '-')
                    && w.chars().count() >= 3
                    && !is_stopword(w)
                    && !w.ends_with("ly")
                    && !w.ends_with("ed");
                if !ok {
                    break;
                }
                j += 1;
            }
            if j > i + 1 {
                spans.push((tokens[i + 1].start, tokens[j - 1].end));
            }
        }
        spans
    }
}

impl ExtractorBackend for RuleBasedExtractor {
    fn mentions(&self, chunk: &Chunk) -> Result<Vec<String>, ExtractionError> {
        let text = &chunk.text;
        let mut spans = self.spans(text);
        // longest first, then position; keep the first occurrence of each string
        spans.sort_by_key(|&(s, e)| (std::cmp::Reverse(text[s..e].chars().count()), s));
        let mut seen = HashSet::new();
        let mut kept: Vec<(usize, usize)> = spans
            .into_iter()
            .filter(|&(s, e)| seen.insert(&text[s..e]))
            .take(self.max_mentions)
            .collect();
        kept.sort();
        Ok(kept.into_iter().map(|(s, e)| text[s..e].to_string()).collect())
    }
}

pub const EXTRACTION_PROMPT: &str = include_str!("../templates/extract_v1.txt");

/// LLM extractor: asks for a flat JSON array of entity strings.
pub struct LlmExtractor<'a> {
    pub llm: &'a dyn LlmBackend,
    pub template: &'a str,
    pub decode: DecodeParams,
}

impl<'a> LlmExtractor<'a> {
    pub fn new(llm: &'a dyn LlmBackend) -> Self {
        Self {
            llm,
            template: EXTRACTION_PROMPT,
            decode: DecodeParams {
                temperature: 0.0,
                max_tokens: 512,
            },
        }
    }
}

/// Accept a bare JSON array of non-empty strings, optionally inside a
/// markdown code fence.
pub fn parse_string_list(raw: &str) -> Option<Vec<String>> {
    let list: Vec<String> = serde_json::from_str(crate::llm::strip_code_fence(raw)).ok()?;
    if list.iter().any(|s| s.trim().is_empty()) {
        return None;
    }
    Some(list.into_iter().map(|s| s.trim().to_string()).collect())
}

impl ExtractorBackend for LlmExtractor<'_> {
    fn mentions(&self, chunk: &Chunk) -> Result<Vec<String>, ExtractionError> {
        let prompt = self.template.replace("{text}", &chunk.text);
        let request_id = format!("extract:{}", chunk.chunk_id);
        let resp = self
            .llm
            .complete(&ChatRequest {
                request_id: &request_id,
                prompt: &prompt,
                decode: self.decode,
                attempt: 0,
            })
            .map_err(|source| ExtractionError::Backend {
                chunk_id: chunk.chunk_id.clone(),
                source,
            })?;
        parse_string_list(&resp.text).ok_or_else(|| ExtractionError::Format {
            chunk_id: chunk.chunk_id.clone(),
            raw: resp.text,
        })
    }
}

pub fn extract_entities(
    chunk: &Chunk,
    extractor: &dyn ExtractorBackend,
) -> Result<ExtractionReport, ExtractionError> {
    Ok(ExtractionReport {
        chunk_id: chunk.chunk_id.clone(),
        raw_mentions: extractor.mentions(chunk)?,
        resolved_entity_ids: Vec::new(),
    })
}

/// Extract every chunk in parallel. Output order follows `chunks`.
pub fn extract_all(
    chunks: &[Chunk],
    extractor: &dyn ExtractorBackend,
) -> Result<Vec<ExtractionReport>, ExtractionError> {
    use rayon::prelude::*;
    chunks
        .par_iter()
        .map(|c| extract_entities(c, extractor))
        .collect()
}

// ---------------------------------------------------------------------------
// entity map

/// The entity → chunks mapping plus the resolved extraction reports.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityMap {
    records: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
}

impl EntityMap {
    pub fn from_records(records: Vec<EntityRecord>) -> Self {
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.entity_id.clone(), i))
            .collect();
        Self { records, by_id }
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.by_id.get(entity_id).map(|&i| &self.records[i])
    }

    pub fn index_of(&self, entity_id: &str) -> Option<usize> {
        self.by_id.get(entity_id).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Chunk id → entity ids whose records list that chunk, in entity order.
    pub fn chunk_entities(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for r in &self.records {
            for c in &r.chunk_ids {
                out.entry(c.as_str()).or_default().push(r.entity_id.as_str());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        Ok(Self::from_records(jsonl::read_file(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write_file(path, &self.records)
    }
}

pub fn entity_id_for(index: usize) -> String {
    format!("e{index:06}")
}

/// Merge mentions by canonical name. Reports must be in corpus order (chunk
/// ordinal); entity ids follow first appearance. Returns the map and the
/// reports with `resolved_entity_ids` filled in.
pub fn build_entity_map(
    reports: &[ExtractionReport],
    aliases: &AliasTable,
) -> (EntityMap, Vec<ExtractionReport>) {
    let mut records: Vec<EntityRecord> = Vec::new();
    let mut by_canonical: HashMap<String, usize> = HashMap::new();
    let mut resolved_reports = Vec::with_capacity(reports.len());
    let mut seen: HashSet<(usize, &str)> = HashSet::new();

    for report in reports {
        let mut resolved = Vec::new();
        for mention in &report.raw_mentions {
            let canonical = normalize_mention(mention, aliases);
            if canonical.is_empty() {
                continue;
            }
            let idx = *by_canonical.entry(canonical.clone()).or_insert_with(|| {
                records.push(EntityRecord {
                    entity_id: entity_id_for(records.len()),
                    canonical_name: canonical,
                    aliases: BTreeSet::new(),
                    chunk_ids: Vec::new(),
                });
                records.len() - 1
            });
            let rec = &mut records[idx];
            rec.aliases.insert(mention.trim().to_string());
            if seen.insert((idx, report.chunk_id.as_str())) {
                rec.chunk_ids.push(report.chunk_id.clone());
            }
            if !resolved.contains(&rec.entity_id) {
                resolved.push(rec.entity_id.clone());
            }
        }
        resolved_reports.push(ExtractionReport {
            chunk_id: report.chunk_id.clone(),
            raw_mentions: report.raw_mentions.clone(),
            resolved_entity_ids: resolved,
        });
    }
    (EntityMap::from_records(records), resolved_reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedLlm;
    use proptest::prelude::*;

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: "d".into(),
            ordinal: 0,
            text: text.into(),
        }
    }

    fn report(chunk_id: &str, mentions: &[&str]) -> ExtractionReport {
        ExtractionReport {
            chunk_id: chunk_id.into(),
            raw_mentions: mentions.iter().map(|s| s.to_string()).collect(),
            resolved_entity_ids: vec![],
        }
    }

    #[test]
    fn normalization_examples() {
        let empty = AliasTable::new();
        assert_eq!(normalize_mention("Companies", &empty), "company");
        assert_eq!(normalize_mention("Accounts Receivable", &empty), "accounts receivable");
        assert_eq!(normalize_mention("\"Classes,\"", &empty), "class");
        assert_eq!(normalize_mention("viruses", &empty), "virus");
        assert_eq!(normalize_mention("responses", &empty), "response");
        let usa = AliasTable::from_pairs([("usa", "united states")]).unwrap();
        assert_eq!(normalize_mention("USA", &usa), "united states");
        assert_eq!(normalize_mention("United States", &usa), "united states");
    }

    #[test]
    fn alias_chains_resolve_and_cycles_fail() {
        let t = AliasTable::from_pairs([("uk", "britain"), ("britain", "united kingdom")]).unwrap();
        assert_eq!(normalize_mention("UK", &t), "united kingdom");
        assert!(AliasTable::from_pairs([("a", "b"), ("b", "a")]).is_err());
    }

    #[test]
    fn rule_based_capitalized_span() {
        let r = RuleBasedExtractor::default();
        let m = r.mentions(&chunk("c", "Company X reported growth.")).unwrap();
        assert!(m.contains(&"Company X".to_string()), "{m:?}");
        assert!(r.mentions(&chunk("c", "nothing here, only 42 words.")).unwrap().is_empty());
    }

    #[test]
    fn rule_based_strips_leading_stopwords_and_finds_noun_phrases() {
        let r = RuleBasedExtractor::default();
        let m = r
            .mentions(&chunk("c", "The Orion Group flagged the accounts receivable growth."))
            .unwrap();
        assert_eq!(m, vec!["Orion Group", "accounts receivable growth"]);
        // punctuation breaks a capitalized run
        let m = r.mentions(&chunk("c", "Vega Corp, Lyra Fund")).unwrap();
        assert_eq!(m, vec!["Vega Corp", "Lyra Fund"]);
    }

    #[test]
    fn rule_based_caps_longest_first() {
        let r = RuleBasedExtractor { max_mentions: 2 };
        let m = r.mentions(&chunk("c", "Ab met Cdefgh and Ijklmnopq then Rs.")).unwrap();
        assert_eq!(m, vec!["Cdefgh", "Ijklmnopq"]);
        // mentions are substrings of the chunk
        let text = "Alpha Beta met Gamma on the big blue river.";
        for s in RuleBasedExtractor::default().mentions(&chunk("c", text)).unwrap() {
            assert!(text.contains(&s));
        }
    }

    #[test]
    fn llm_backend_passes_valid_lists() {
        let llm = ScriptedLlm::new(|_r: &ChatRequest<'_>| {
            Ok("[\"Company X\",\"accounts receivable\"]".to_string())
        });
        let ex = LlmExtractor::new(&llm);
        let rep = extract_entities(&chunk("c1", "whatever"), &ex).unwrap();
        assert_eq!(rep.raw_mentions, vec!["Company X", "accounts receivable"]);

        let fenced = ScriptedLlm::new(|_r: &ChatRequest<'_>| Ok("```json\n[\"A\"]\n```".to_string()));
        assert_eq!(
            extract_entities(&chunk("c1", "x"), &LlmExtractor::new(&fenced)).unwrap().raw_mentions,
            vec!["A"]
        );
    }

    #[test]
    fn llm_backend_rejects_bad_output() {
        let llm = ScriptedLlm::new(|_r: &ChatRequest<'_>| Ok("Company X, Y".to_string()));
        match extract_entities(&chunk("c1", "x"), &LlmExtractor::new(&llm)) {
            Err(ExtractionError::Format { raw, .. }) => assert_eq!(raw, "Company X, Y"),
            other => panic!("{other:?}"),
        }
        let blank = ScriptedLlm::new(|_r: &ChatRequest<'_>| Ok("[\"\"]".to_string()));
        assert!(extract_entities(&chunk("c1", "x"), &LlmExtractor::new(&blank)).is_err());
        let down = ScriptedLlm::new(|_r: &ChatRequest<'_>| Err(LlmError::Transient("503".into())));
        let err = extract_entities(&chunk("c1", "x"), &LlmExtractor::new(&down)).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn entity_map_examples() {
        let none = AliasTable::new();
        let (map, _) = build_entity_map(&[report("c1", &["Company X"]), report("c3", &["Company X"])], &none);
        assert_eq!(map.len(), 1);
        assert_eq!(map.records()[0].chunk_ids, vec!["c1", "c3"]);

        let (map, resolved) = build_entity_map(&[report("c1", &["companies"]), report("c2", &["Company"])], &none);
        assert_eq!(map.len(), 1);
        assert_eq!(map.records()[0].canonical_name, "company");
        assert_eq!(map.records()[0].chunk_ids, vec!["c1", "c2"]);
        assert_eq!(map.records()[0].aliases.len(), 2);
        assert_eq!(resolved[1].resolved_entity_ids, vec!["e000000"]);

        let (map, _) = build_entity_map(&[report("c1", &["alpha", "beta"])], &none);
        assert_eq!(map.len(), 2);
        assert_eq!(map.records()[1].entity_id, "e000001");
    }

    #[test]
    fn entity_map_is_idempotent_under_rereporting() {
        let none = AliasTable::new();
        let reports = vec![
            report("c1", &["Alpha", "Betas", "alpha"]),
            report("c2", &["Gamma", "beta"]),
            report("c3", &["gamma", "Delta", "Alpha"]),
        ];
        let (map, resolved) = build_entity_map(&reports, &none);
        for rec in map.records() {
            for c in &rec.chunk_ids {
                let r = resolved.iter().find(|r| &r.chunk_id == c).unwrap();
                assert!(r.resolved_entity_ids.contains(&rec.entity_id));
            }
        }
        let rereported: Vec<_> = resolved
            .iter()
            .map(|r| ExtractionReport {
                chunk_id: r.chunk_id.clone(),
                raw_mentions: r
                    .resolved_entity_ids
                    .iter()
                    .map(|id| map.get(id).unwrap().canonical_name.clone())
                    .collect(),
                resolved_entity_ids: vec![],
            })
            .collect();
        let (again, _) = build_entity_map(&rereported, &none);
        let key = |m: &EntityMap| {
            m.records()
                .iter()
                .map(|r| (r.entity_id.clone(), r.canonical_name.clone(), r.chunk_ids.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&map), key(&again));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(m in "[A-Za-z ,.'\"-]{1,24}") {
            let table = AliasTable::from_pairs([("usa", "united states"), ("big co", "bigcos")]).unwrap();
            let once = normalize_mention(&m, &table);
            prop_assert_eq!(normalize_mention(&once, &table), once.clone());
            let empty = AliasTable::new();
            let once = normalize_mention(&m, &empty);
            prop_assert_eq!(normalize_mention(&once, &empty), once);
        }
    }
}
