//! Supervised fine-tuning data from bidirectional reasoning.
//!
//! For each query with a known price, the model is first shown the true
//! price and asked which references justify it (backward). Queries with no
//! such subset are dropped. The accepted subset then conditions a forward
//! pass that writes the rationale. Every accepted sample is emitted twice,
//! once per serving format.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Listing;
use crate::exec::{self, ExecMode};
use crate::gateway::{CompletionTarget, DecodingParams, GatewayError};
use crate::prompting::{
    assemble_backward_prompt, assemble_forward_prompt, assemble_pricing_prompt, parse_golden_subset, parse_pricing,
    PricingMode, PromptBundle, PromptError, RefLabel, References, Templates,
};
use crate::render_price;
use crate::vecindex::{self, EmbedError, Embedder, IndexSnapshot, RetrievalKind, RetrievalSet, VecIndexError};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("retrieval: {0}")]
    Index(#[from] VecIndexError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("query {0:?} has no positive ground-truth price")]
    NoTruth(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DatagenError {
    /// Gateway failures may succeed on a later run; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, DatagenError::Gateway(e) if e.is_retryable())
    }
}

/// Jaro similarity over Unicode scalar values.
pub fn jaro(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);
    let mut b_used = vec![false; b.len()];
    let mut a_matches = Vec::new();
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        if let Some(j) = (lo..hi).find(|&j| !b_used[j] && b[j] == *ca) {
            b_used[j] = true;
            a_matches.push(*ca);
        }
    }
    let m = a_matches.len();
    if m == 0 {
        return 0.0;
    }
    let b_matches = b.iter().zip(&b_used).filter(|(_, used)| **used).map(|(c, _)| *c);
    let half_transpositions = a_matches.iter().zip(b_matches).filter(|(x, y)| **x != *y).count();
    let t = (half_transpositions / 2) as f64;
    let m = m as f64;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

/// How pairwise similarities are combined into one homogeneity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Homogeneity {
    Accept { score: Option<f64> },
    Reject { score: f64 },
}

/// Rejects a reference set whose descriptions are too similar to one another
/// (aggregate pairwise Jaro strictly above `threshold`). Sets with fewer than
/// two references are accepted.
pub fn homogeneity_reject(refs: &RetrievalSet, threshold: f64, aggregation: Aggregation) -> Homogeneity {
    let texts: Vec<String> = refs.hits.iter().map(|h| h.describe()).collect();
    if texts.len() < 2 {
        return Homogeneity::Accept { score: None };
    }
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut pairs = 0usize;
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            let s = jaro(&texts[i], &texts[j]);
            sum += s;
            max = max.max(s);
            pairs += 1;
        }
    }
    let score = match aggregation {
        Aggregation::Mean => sum / pairs as f64,
        Aggregation::Max => max,
    };
    if score > threshold {
        Homogeneity::Reject { score }
    } else {
        Homogeneity::Accept { score: Some(score) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    HomogeneousRefs,
    NoGoldenSubset,
    Unparseable,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::HomogeneousRefs => "homogeneous_refs",
            RejectReason::NoGoldenSubset => "no_golden_subset",
            RejectReason::Unparseable => "unparseable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub query: Listing,
    pub refs: RetrievalSet,
    pub golden_ids: BTreeSet<RefLabel>,
    pub rationale: String,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backward,
    Forward,
}

/// One model call kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub stage: Stage,
    pub prompt: PromptBundle,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Verdict {
    Accepted { sample: TrainingSample },
    Rejected { reason: RejectReason, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub query_id: String,
    pub verdict: Verdict,
    pub transcripts: Vec<Transcript>,
}

fn default_k() -> usize {
    50
}

fn default_jaro_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_jaro_threshold")]
    pub jaro_threshold: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub retrieval: RetrievalKind,
    #[serde(default)]
    pub decoding: DecodingParams,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            jaro_threshold: default_jaro_threshold(),
            aggregation: Aggregation::default(),
            retrieval: RetrievalKind::default(),
            decoding: DecodingParams::default(),
        }
    }
}

/// Everything a sample build needs besides the query.
pub struct DatagenContext<'a> {
    pub index: &'a IndexSnapshot,
    pub embedder: &'a dyn Embedder,
    pub gateway: &'a dyn CompletionTarget,
    pub templates: &'a Templates,
    pub config: &'a DatagenConfig,
}

pub fn build_sft_sample(query: &Listing, ctx: &DatagenContext<'_>) -> Result<SampleOutcome, DatagenError> {
    if !(query.price.is_finite() && query.price > 0.0) {
        return Err(DatagenError::NoTruth(query.id.clone()));
    }
    let cfg = ctx.config;
    let embedding = ctx.embedder.embed(query)?;
    let refs = vecindex::retrieve(ctx.index, &query.id, &embedding, cfg.k, cfg.retrieval, ExecMode::Sequential)?;
    let mut transcripts = Vec::new();
    let reject = |reason: RejectReason, detail: String, transcripts: Vec<Transcript>| SampleOutcome {
        query_id: query.id.clone(),
        verdict: Verdict::Rejected { reason, detail },
        transcripts,
    };

    if let Homogeneity::Reject { score } = homogeneity_reject(&refs, cfg.jaro_threshold, cfg.aggregation) {
        return Ok(reject(
            RejectReason::HomogeneousRefs,
            format!("pairwise jaro {score:.4} > {}", cfg.jaro_threshold),
            transcripts,
        ));
    }
    if refs.is_empty() {
        return Ok(reject(RejectReason::NoGoldenSubset, "no references retrieved".into(), transcripts));
    }

    let prompt = assemble_backward_prompt(ctx.templates, query, &refs, query.price);
    let response = ctx.gateway.complete(&prompt, &cfg.decoding)?.text;
    let parsed = parse_golden_subset(&response, refs.len());
    transcripts.push(Transcript {
        stage: Stage::Backward,
        prompt,
        response,
    });
    let backward = match parsed {
        Ok(b) => b,
        Err(e) => return Ok(reject(RejectReason::Unparseable, format!("backward: {e}"), transcripts)),
    };
    if !backward.valid {
        return Ok(reject(RejectReason::NoGoldenSubset, backward.explanation, transcripts));
    }

    let prompt = assemble_forward_prompt(
        ctx.templates,
        query,
        &refs,
        &backward.golden_ids,
        query.price,
        &backward.explanation,
    )?;
    let response = ctx.gateway.complete(&prompt, &cfg.decoding)?.text;
    let parsed = parse_pricing(&response, PricingMode::RationaleAndPrice, refs.len());
    transcripts.push(Transcript {
        stage: Stage::Forward,
        prompt,
        response,
    });
    let forward = match parsed {
        Ok(f) => f,
        Err(e) => return Ok(reject(RejectReason::Unparseable, format!("forward: {e}"), transcripts)),
    };
    if forward.price != query.price {
        tracing::debug!(query = %query.id, got = forward.price, "forward price differs from truth; label uses truth");
    }
    Ok(SampleOutcome {
        query_id: query.id.clone(),
        verdict: Verdict::Accepted {
            sample: TrainingSample {
                query: query.clone(),
                refs,
                golden_ids: backward.golden_ids,
                rationale: forward.rationale.unwrap_or_default(),
                price: query.price,
            },
        },
        transcripts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// One supervised record: chat input and target completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRecord {
    pub format: PricingMode,
    pub messages: Vec<ChatMessage>,
    pub label: String,
    pub query_id: String,
    pub golden: BTreeSet<RefLabel>,
}

/// The price-only and rationale-and-price records for one sample. Both share
/// the same user message and differ in system prompt and label.
pub fn emit_hybrid_formats(sample: &TrainingSample, templates: &Templates) -> Result<[HybridRecord; 2], PromptError> {
    let price = render_price(sample.price);
    let record = |mode: PricingMode, label: String| -> Result<HybridRecord, PromptError> {
        let prompt = assemble_pricing_prompt(templates, &sample.query, References::Retrieved(&sample.refs), mode)?;
        Ok(HybridRecord {
            format: mode,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system,
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user,
                },
            ],
            label,
            query_id: sample.query.id.clone(),
            golden: sample.golden_ids.clone(),
        })
    };
    Ok([
        record(PricingMode::PriceOnly, format!("<price>{price}</price>"))?,
        record(
            PricingMode::RationaleAndPrice,
            format!("<reason>{}</reason><price>{price}</price>", sample.rationale),
        )?,
    ])
}

/// Results of a dataset build, in input order.
#[derive(Debug)]
pub struct DatasetBuild {
    pub outcomes: Vec<Result<SampleOutcome, DatagenError>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub queries: usize,
    pub accepted: usize,
    pub records: usize,
    pub rejected: BTreeMap<String, usize>,
    pub errors: usize,
}

impl DatasetBuild {
    pub fn accepted(&self) -> impl Iterator<Item = &TrainingSample> {
        self.outcomes.iter().filter_map(|o| match o {
            Ok(SampleOutcome {
                verdict: Verdict::Accepted { sample },
                ..
            }) => Some(sample),
            _ => None,
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut s = DatasetSummary {
            queries: self.outcomes.len(),
            ..Default::default()
        };
        for o in &self.outcomes {
            match o {
                Ok(SampleOutcome {
                    verdict: Verdict::Accepted { .. },
                    ..
                }) => s.accepted += 1,
                Ok(SampleOutcome {
                    verdict: Verdict::Rejected { reason, .. },
                    ..
                }) => *s.rejected.entry(reason.as_str().to_string()).or_default() += 1,
                Err(_) => s.errors += 1,
            }
        }
        s.records = 2 * s.accepted;
        s
    }

    /// Writes the hybrid records as JSON lines, two per accepted sample.
    pub fn write_records<W: Write>(&self, mut out: W, templates: &Templates) -> Result<usize, DatagenError> {
        let mut n = 0;
        for sample in self.accepted() {
            for r in emit_hybrid_formats(sample, templates)? {
                serde_json::to_writer(&mut out, &r).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// One JSON line per query with its verdict and transcripts; build errors
    /// are recorded with their message.
    pub fn write_audit<W: Write>(&self, mut out: W) -> Result<(), DatagenError> {
        for o in &self.outcomes {
            let line = match o {
                Ok(outcome) => serde_json::to_string(outcome),
                Err(e) => serde_json::to_string(&serde_json::json!({
                    "outcome": "error",
                    "error": e.to_string(),
                    "retryable": e.is_retryable(),
                })),
            }
            .map_err(std::io::Error::from)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Builds samples for every query. Samples are independent and run in
/// parallel; the gateway's own limit bounds in-flight calls.
pub fn build_dataset(queries: &[Listing], ctx: &DatagenContext<'_>, mode: ExecMode) -> DatasetBuild {
    let outcomes = exec::map(mode, queries, |q| build_sft_sample(q, ctx));
    DatasetBuild { outcomes }
}

/// Splits queries into a supervised share (the first `fraction` of them,
/// rounded down) and the remainder, preserving order.
pub fn split_queries(queries: &[Listing], fraction: f64) -> (&[Listing], &[Listing]) {
    let f = fraction.clamp(0.0, 1.0);
    let cut = ((queries.len() as f64) * f).floor() as usize;
    queries.split_at(cut)
}
