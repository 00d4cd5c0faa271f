//! Prompt rendering, LLM calls with validation and retry, and the synthetic
//! corpus writer.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::balance::{CcPair, SubsetAllocation};
use crate::corpus::ChunkStore;
use crate::extraction::EntityMap;
use crate::jsonl::{self, JsonlError};
pub use crate::llm::LlmBackend;
use crate::llm::{approx_tokens, strip_code_fence, ChatRequest, ChatResponse, DecodeParams, LlmError};
use crate::traversal::{Path, Step};

pub const COT_TEMPLATE: &str = include_str!("../templates/cot_v1.txt");
pub const CC_TEMPLATE: &str = include_str!("../templates/cc_v1.txt");
pub const TEMPLATE_VERSION: &str = "v1";

pub const REPAIR_INSTRUCTION: &str = "\n\nYour previous reply could not be parsed. Reply again with only the JSON object described above: valid JSON, no code fences, no text before or after it, and every field non-empty.";

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("request {request_id} failed: {source}")]
    Backend {
        request_id: String,
        #[source]
        source: LlmError,
    },
    #[error("could not start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cot,
    Cc,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Cot => "cot",
            Strategy::Cc => "cc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub entity_id: String,
    pub entity_name: String,
    pub chunk_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub strategy: Strategy,
    /// Path id or CC pair id.
    pub source_id: String,
    pub fragments: Vec<Fragment>,
    pub prompt_text: String,
    pub decode: DecodeParams,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderOptions {
    /// Annotate each fragment with its document title.
    pub same_document: bool,
    pub decode: DecodeParams,
}

fn fragment(
    step: &Step,
    chunks: &ChunkStore,
    entities: &EntityMap,
    with_title: bool,
) -> Result<Fragment, SynthesisError> {
    let chunk = chunks
        .get(&step.chunk_id)
        .ok_or_else(|| SynthesisError::Integrity(format!("unknown chunk {}", step.chunk_id)))?;
    let entity = entities
        .get(&step.entity_id)
        .ok_or_else(|| SynthesisError::Integrity(format!("unknown entity {}", step.entity_id)))?;
    let title = if with_title {
        Some(
            chunks
                .title(&chunk.doc_id)
                .filter(|t| !t.is_empty())
                .unwrap_or(&chunk.doc_id)
                .to_string(),
        )
    } else {
        None
    };
    Ok(Fragment {
        entity_id: entity.entity_id.clone(),
        entity_name: entity.canonical_name.clone(),
        chunk_id: chunk.chunk_id.clone(),
        text: chunk.text.clone(),
        title,
    })
}

/// Fragment block shared by both templates. Text sits between `<<<` and
/// `>>>` lines.
pub fn render_fragments(fragments: &[Fragment]) -> String {
    let mut out = String::new();
    for (i, f) in fragments.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("Fragment {} | entity: {}", i + 1, f.entity_name));
        if let Some(t) = &f.title {
            out.push_str(&format!(" | article title: {t}"));
        }
        out.push_str(&format!("\n<<<\n{}\n>>>\n", f.text));
    }
    out
}

pub fn render_cot_prompt(
    path: &Path,
    chunks: &ChunkStore,
    entities: &EntityMap,
    options: &RenderOptions,
) -> Result<GenerationRequest, SynthesisError> {
    if path.steps.len() < 2 {
        return Err(SynthesisError::Argument(format!(
            "path {} has fewer than 2 steps",
            path.path_id
        )));
    }
    let fragments = path
        .steps
        .iter()
        .map(|s| fragment(s, chunks, entities, options.same_document))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GenerationRequest {
        request_id: format!("cot:{}", path.path_id),
        strategy: Strategy::Cot,
        source_id: path.path_id.clone(),
        prompt_text: COT_TEMPLATE.replace("{fragments}", &render_fragments(&fragments)),
        fragments,
        decode: options.decode,
    })
}

pub fn render_cc_prompt(
    pair: &CcPair,
    chunks: &ChunkStore,
    entities: &EntityMap,
    options: &RenderOptions,
) -> Result<GenerationRequest, SynthesisError> {
    if pair.left.entity_id == pair.right.entity_id {
        return Err(SynthesisError::Argument(format!(
            "pair {} uses entity {} on both sides",
            pair.pair_id, pair.left.entity_id
        )));
    }
    let fragments = vec![
        fragment(&pair.left, chunks, entities, options.same_document)?,
        fragment(&pair.right, chunks, entities, options.same_document)?,
    ];
    let prompt_text = CC_TEMPLATE
        .replace("{fragments}", &render_fragments(&fragments))
        .replace("{entity_a}", &fragments[0].entity_name)
        .replace("{entity_b}", &fragments[1].entity_name);
    Ok(GenerationRequest {
        request_id: format!("cc:{}", pair.pair_id),
        strategy: Strategy::Cc,
        source_id: pair.pair_id.clone(),
        fragments,
        prompt_text,
        decode: options.decode,
    })
}

/// CoT requests then CC requests for each subset, in subset order.
pub fn build_requests(
    subsets: &[SubsetAllocation],
    chunks: &ChunkStore,
    entities: &EntityMap,
    options: &RenderOptions,
) -> Result<Vec<GenerationRequest>, SynthesisError> {
    let mut out = Vec::new();
    for s in subsets {
        for p in &s.cot_paths {
            out.push(render_cot_prompt(p, chunks, entities, options)?);
        }
        for c in &s.cc_pairs {
            out.push(render_cc_prompt(c, chunks, entities, options)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub request_id: String,
    pub strategy: Strategy,
    pub source_id: String,
    pub narrative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa: Option<Vec<QaPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub fragment_entities: Vec<String>,
    pub fragment_chunks: Vec<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub request_id: String,
    pub strategy: Strategy,
    pub source_id: String,
    pub reason: String,
    pub detail: String,
    pub attempts: u32,
}

struct Payload {
    narrative: String,
    qa: Option<Vec<QaPair>>,
    summary: Option<String>,
}

fn non_empty_str(v: &Value, field: &str) -> Result<String, String> {
    match v.get(field).and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        Some(_) => Err(format!("field {field:?} is empty")),
        None => Err(format!("field {field:?} missing or not a string")),
    }
}

/// Check a reply against the strategy's JSON schema.
pub fn validate_payload(strategy: Strategy, raw: &str) -> Result<(), String> {
    parse_payload(strategy, raw).map(|_| ())
}

fn parse_payload(strategy: Strategy, raw: &str) -> Result<Payload, String> {
    let v: Value = serde_json::from_str(strip_code_fence(raw)).map_err(|e| format!("not JSON: {e}"))?;
    if !v.is_object() {
        return Err("reply is not a JSON object".into());
    }
    let narrative = non_empty_str(&v, "narrative")?;
    match strategy {
        Strategy::Cot => {
            let items = v
                .get("qa")
                .and_then(Value::as_array)
                .ok_or("field \"qa\" missing or not an array")?;
            if items.is_empty() {
                return Err("field \"qa\" is empty".into());
            }
            let qa = items
                .iter()
                .map(|item| {
                    Ok(QaPair {
                        question: non_empty_str(item, "question")?,
                        answer: non_empty_str(item, "answer")?,
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(Payload {
                narrative,
                qa: Some(qa),
                summary: None,
            })
        }
        Strategy::Cc => Ok(Payload {
            narrative,
            qa: None,
            summary: Some(non_empty_str(&v, "summary")?),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts per request, shared by transient and schema failures.
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub records: Vec<SynthRecord>,
    pub rejections: Vec<Rejection>,
}

enum Settled {
    Accepted(SynthRecord),
    Rejected(Rejection),
}

fn run_request(
    req: &GenerationRequest,
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
) -> Result<Settled, SynthesisError> {
    let mut prompt = req.prompt_text.clone();
    let mut repaired = false;
    let mut attempt = 0u32;
    let (mut input_tokens, mut output_tokens) = (0u64, 0u64);
    loop {
        let call = backend.complete(&ChatRequest {
            request_id: &req.request_id,
            prompt: &prompt,
            decode: req.decode,
            attempt,
        });
        let detail = match call {
            Ok(ChatResponse {
                text,
                input_tokens: i,
                output_tokens: o,
            }) => {
                input_tokens += i;
                output_tokens += o;
                match parse_payload(req.strategy, &text) {
                    Ok(p) => {
                        if attempt > 0 {
                            log::info!("{} accepted after {} retries", req.request_id, attempt);
                        }
                        return Ok(Settled::Accepted(SynthRecord {
                            request_id: req.request_id.clone(),
                            strategy: req.strategy,
                            source_id: req.source_id.clone(),
                            narrative: p.narrative,
                            qa: p.qa,
                            summary: p.summary,
                            fragment_entities: req.fragments.iter().map(|f| f.entity_id.clone()).collect(),
                            fragment_chunks: req.fragments.iter().map(|f| f.chunk_id.clone()).collect(),
                            input_tokens,
                            output_tokens,
                            retries: attempt,
                        }));
                    }
                    Err(detail) => detail,
                }
            }
            Err(LlmError::Transient(msg)) if attempt < policy.max_retries => {
                log::debug!("{}: transient failure, retrying: {msg}", req.request_id);
                attempt += 1;
                continue;
            }
            Err(source) => {
                return Err(SynthesisError::Backend {
                    request_id: req.request_id.clone(),
                    source,
                })
            }
        };
        if attempt >= policy.max_retries {
            log::warn!("{} rejected: {detail}", req.request_id);
            return Ok(Settled::Rejected(Rejection {
                request_id: req.request_id.clone(),
                strategy: req.strategy,
                source_id: req.source_id.clone(),
                reason: "schema".into(),
                detail,
                attempts: attempt + 1,
            }));
        }
        if !repaired {
            prompt.push_str(REPAIR_INSTRUCTION);
            repaired = true;
        }
        attempt += 1;
    }
}

/// Run every request with at most `policy.max_in_flight` in flight. Results
/// come back in request order whatever the completion order.
pub fn generate(
    requests: &[GenerationRequest],
    backend: &dyn LlmBackend,
    policy: &RetryPolicy,
) -> Result<GenerationOutcome, SynthesisError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(policy.max_in_flight.max(1))
        .build()
        .map_err(|e| SynthesisError::Pool(e.to_string()))?;
    let settled: Vec<Settled> = pool.install(|| {
        requests
            .par_iter()
            .map(|r| run_request(r, backend, policy))
            .collect::<Result<_, _>>()
    })?;
    let mut out = GenerationOutcome::default();
    for s in settled {
        match s {
            Settled::Accepted(r) => out.records.push(r),
            Settled::Rejected(r) => out.rejections.push(r),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub counts: BTreeMap<Strategy, usize>,
    pub records: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
    pub rejected: usize,
    pub generated_chars: usize,
}

/// Write one record per line and return totals recounted from `records`.
pub fn write_synthetic_corpus<W: Write>(
    records: &[SynthRecord],
    rejected: usize,
    sink: W,
) -> Result<SynthManifest, SynthesisError> {
    jsonl::write_records(sink, records)?;
    Ok(manifest_for(records, rejected))
}

pub fn manifest_for(records: &[SynthRecord], rejected: usize) -> SynthManifest {
    let mut m = SynthManifest {
        rejected,
        records: records.len(),
        ..Default::default()
    };
    for r in records {
        *m.counts.entry(r.strategy).or_default() += 1;
        m.input_tokens += r.input_tokens;
        m.output_tokens += r.output_tokens;
        m.generated_chars += generated_chars(r);
    }
    m.total_tokens = m.input_tokens + m.output_tokens;
    m
}

/// Characters of generated text in a record, the volume proxy for tokens.
pub fn generated_chars(r: &SynthRecord) -> usize {
    let qa: usize = r
        .qa
        .iter()
        .flatten()
        .map(|q| q.question.chars().count() + q.answer.chars().count())
        .sum();
    r.narrative.chars().count() + qa + r.summary.as_ref().map_or(0, |s| s.chars().count())
}

/// Offline backend returning schema-valid replies that restate the prompt's
/// fragments. The strategy is read from the request id prefix.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

fn prompt_fragments(prompt: &str) -> (Vec<&str>, Vec<&str>) {
    let mut names = Vec::new();
    let mut texts = Vec::new();
    let mut lines = prompt.lines();
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("Fragment ") {
            if let Some((_, tail)) = rest.split_once("| entity: ") {
                names.push(tail.split(" | ").next().unwrap_or(tail));
            }
        } else if line == "<<<" {
            if let Some(text) = lines.next() {
                texts.push(text);
            }
        }
    }
    (names, texts)
}

impl MockLlm {
    pub fn reply(&self, request: &ChatRequest<'_>) -> String {
        let (names, texts) = prompt_fragments(request.prompt);
        let narrative = texts.join(" ");
        let first = names.first().copied().unwrap_or("the first entity");
        let last = names.last().copied().unwrap_or("the last entity");
        let payload = if request.request_id.starts_with("cc:") {
            serde_json::json!({
                "narrative": narrative,
                "summary": format!("{first} and {last} are described in separate fragments."),
            })
        } else {
            serde_json::json!({
                "narrative": narrative,
                "qa": [{
                    "question": format!("How does {first} connect to {last}?"),
                    "answer": format!("Follow the chain {}.", names.join(" -> ")),
                }],
            })
        };
        payload.to_string()
    }
}

impl LlmBackend for MockLlm {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, LlmError> {
        let text = self.reply(request);
        Ok(ChatResponse {
            input_tokens: approx_tokens(request.prompt),
            output_tokens: approx_tokens(&text),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Every attempt returns a schema-invalid reply.
    Invalid,
    /// The first attempt fails transiently.
    Transient,
}

/// [`MockLlm`] with deterministic per-request faults.
#[derive(Debug, Clone)]
pub struct FaultInjectingLlm {
    pub seed: u64,
    pub invalid_rate: f64,
    pub transient_rate: f64,
}

impl FaultInjectingLlm {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            invalid_rate: 0.2,
            transient_rate: 0.1,
        }
    }

    pub fn fault_for(&self, request_id: &str) -> Fault {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(request_id.as_bytes());
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let u = (x >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.invalid_rate {
            Fault::Invalid
        } else if u < self.invalid_rate + self.transient_rate {
            Fault::Transient
        } else {
            Fault::None
        }
    }
}

impl LlmBackend for FaultInjectingLlm {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<ChatResponse, LlmError> {
        match self.fault_for(request.request_id) {
            Fault::Transient if request.attempt == 0 => {
                Err(LlmError::Transient("injected timeout".into()))
            }
            Fault::Invalid => Ok(ChatResponse {
                text: "{\"narrative\": \"\"}".into(),
                input_tokens: approx_tokens(request.prompt),
                output_tokens: 2,
            }),
            _ => MockLlm.complete(request),
        }
    }
}
