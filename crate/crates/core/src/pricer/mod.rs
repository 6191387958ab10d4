//! Retrieve, reason, gate: the end-to-end price suggestion.

mod eval;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::Listing;
use crate::confidence::{avg_entropy, filter_by_confidence, ConfidenceError, ConfidenceScore, GateDecision, UnavailablePolicy};
use crate::exec::ExecMode;
use crate::gateway::{CompletionTarget, DecodingParams};
use crate::prompting::{assemble_pricing_prompt, parse_pricing, PricingMode, RefLabel, References, Templates};
use crate::vecindex::{self, Embedder, IndexSnapshot, RetrievalKind, RetrievalSet, SnapshotStore};

pub use eval::{
    batch_eval, compare_targets, k_sweep, theta_sweep, Comparison, EvalItem, EvalRun, KSweepRow, PredictionRecord,
    StatusCounts,
};

fn default_k() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Entropy gate; a price is kept iff its mean price-token entropy is at
    /// most this. Required: there is no universally sensible default.
    pub theta_h: f64,
    #[serde(default)]
    pub mode: PricingMode,
    #[serde(default)]
    pub retrieval: RetrievalKind,
    #[serde(default)]
    pub unavailable: UnavailablePolicy,
    #[serde(default)]
    pub decoding: DecodingParams,
}

impl PipelineConfig {
    pub fn new(theta_h: f64) -> Self {
        Self {
            k: default_k(),
            theta_h,
            mode: PricingMode::default(),
            retrieval: RetrievalKind::default(),
            unavailable: UnavailablePolicy::default(),
            decoding: DecodingParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionStatus {
    Priced,
    AbstainedLowConfidence,
    AbstainedNoEvidence,
    Error,
}

/// Wall-clock time per stage, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latency {
    pub embed_ms: f64,
    pub retrieve_ms: f64,
    pub generate_ms: f64,
    pub parse_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSuggestion {
    pub query_id: String,
    pub status: SuggestionStatus,
    /// Present iff `status` is `priced`.
    pub price: Option<f64>,
    /// The parsed model answer before gating, when there was one.
    pub raw_price: Option<f64>,
    pub rationale: Option<String>,
    pub cited_ref_ids: BTreeSet<RefLabel>,
    /// `None` when the endpoint returned no log-probabilities.
    pub confidence: Option<ConfidenceScore>,
    pub n_refs: usize,
    pub error: Option<String>,
    pub latency: Latency,
}

pub const UNPARSEABLE_OUTPUT: &str = "unparseable_output";

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl PriceSuggestion {
    fn blank(query_id: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            status: SuggestionStatus::Error,
            price: None,
            raw_price: None,
            rationale: None,
            cited_ref_ids: BTreeSet::new(),
            confidence: None,
            n_refs: 0,
            error: None,
            latency: Latency::default(),
        }
    }

    fn fail(mut self, message: String, started: Instant) -> Self {
        self.status = SuggestionStatus::Error;
        self.price = None;
        self.error = Some(message);
        self.latency.total_ms = ms(started);
        self
    }
}

/// Shared, thread-safe pricing pipeline.
#[derive(Clone)]
pub struct Pricer {
    store: Arc<SnapshotStore>,
    embedder: Arc<dyn Embedder>,
    gateway: Arc<dyn CompletionTarget>,
    templates: Arc<Templates>,
    config: PipelineConfig,
}

impl Pricer {
    pub fn new(
        store: Arc<SnapshotStore>,
        embedder: Arc<dyn Embedder>,
        gateway: Arc<dyn CompletionTarget>,
        templates: Templates,
        config: PipelineConfig,
    ) -> Self {
        Self {
            store,
            embedder,
            gateway,
            templates: Arc::new(templates),
            config,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<SnapshotStore> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<dyn CompletionTarget> {
        &self.gateway
    }

    /// Same pipeline with another configuration.
    pub fn with_config(&self, config: PipelineConfig) -> Self {
        Self {
            config,
            ..self.clone()
        }
    }

    /// Same pipeline answering through another target.
    pub fn with_gateway(&self, gateway: Arc<dyn CompletionTarget>) -> Self {
        Self {
            gateway,
            ..self.clone()
        }
    }

    /// Prices one listing against the current snapshot.
    pub fn suggest_price(&self, query: &Listing) -> PriceSuggestion {
        let snapshot = self.store.current();
        let started = Instant::now();
        let mut out = PriceSuggestion::blank(&query.id);
        let refs = match self.retrieve(query, &snapshot, &mut out.latency) {
            Ok(r) => r,
            Err(e) => return out.fail(e, started),
        };
        self.answer(query, refs.as_ref(), out, started)
    }

    /// Stage 1. `None` means the no-retrieval ablation (`k = 0`).
    fn retrieve(
        &self,
        query: &Listing,
        snapshot: &IndexSnapshot,
        latency: &mut Latency,
    ) -> Result<Option<RetrievalSet>, String> {
        if self.config.k == 0 {
            return Ok(None);
        }
        if snapshot.is_empty() {
            return Ok(Some(RetrievalSet::empty(&query.id, self.config.k)));
        }
        let t = Instant::now();
        let embedding = self.embedder.embed(query).map_err(|e| format!("embedding: {e}"))?;
        latency.embed_ms = ms(t);
        let t = Instant::now();
        let refs = vecindex::retrieve(
            snapshot,
            &query.id,
            &embedding,
            self.config.k,
            self.config.retrieval,
            ExecMode::Sequential,
        )
        .map_err(|e| format!("retrieval: {e}"))?;
        latency.retrieve_ms = ms(t);
        Ok(Some(refs))
    }

    /// Stages 2 and 3 on a fixed reference set.
    pub(crate) fn answer(
        &self,
        query: &Listing,
        refs: Option<&RetrievalSet>,
        mut out: PriceSuggestion,
        started: Instant,
    ) -> PriceSuggestion {
        let cfg = &self.config;
        let references = match refs {
            None => References::Ablation,
            Some(r) if r.is_empty() => {
                out.status = SuggestionStatus::AbstainedNoEvidence;
                out.latency.total_ms = ms(started);
                return out;
            }
            Some(r) => References::Retrieved(r),
        };
        out.n_refs = refs.map_or(0, RetrievalSet::len);
        let prompt = match assemble_pricing_prompt(&self.templates, query, references, cfg.mode) {
            Ok(p) => p,
            Err(e) => return out.fail(format!("prompt: {e}"), started),
        };

        let t = Instant::now();
        let generation = match self.gateway.complete(&prompt, &cfg.decoding) {
            Ok(g) => g,
            Err(e) => return out.fail(format!("gateway: {e}"), started),
        };
        out.latency.generate_ms = ms(t);

        let t = Instant::now();
        let parsed = match parse_pricing(&generation.text, cfg.mode, out.n_refs) {
            Ok(p) => p,
            Err(e) => {
                tracing::debug!(query = %query.id, error = %e, "model output did not parse");
                out.latency.parse_ms = ms(t);
                return out.fail(UNPARSEABLE_OUTPUT.to_string(), started);
            }
        };
        out.raw_price = Some(parsed.price);
        out.rationale = parsed.rationale;
        out.cited_ref_ids = parsed.cited_ref_ids;
        let confidence = match avg_entropy(&generation) {
            Ok(s) => Some(s),
            Err(ConfidenceError::Unavailable(_)) => None,
            Err(e) => {
                out.latency.parse_ms = ms(t);
                return out.fail(format!("confidence: {e}"), started);
            }
        };
        out.latency.parse_ms = ms(t);
        out.confidence = confidence;

        let decision = match (&confidence, cfg.unavailable) {
            (Some(score), _) => filter_by_confidence(parsed.price, score, cfg.theta_h),
            (None, UnavailablePolicy::PassThrough) => GateDecision::Kept(parsed.price),
            (None, UnavailablePolicy::Abstain) => GateDecision::Abstained("confidence_unavailable"),
        };
        match decision {
            GateDecision::Kept(p) => {
                out.status = SuggestionStatus::Priced;
                out.price = Some(p);
            }
            GateDecision::Abstained(_) => out.status = SuggestionStatus::AbstainedLowConfidence,
        }
        out.latency.total_ms = ms(started);
        out
    }
}
