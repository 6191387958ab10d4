use std::collections::BTreeSet;
use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Latency, PipelineConfig, PriceSuggestion, Pricer, SuggestionStatus};
use crate::catalog::Listing;
use crate::confidence::{pr_sweep, ConfidenceError, PrCurve, PrItem};
use crate::exec::{self, ExecMode};
use crate::gateway::CompletionTarget;
use crate::metrics::{segment_report, within_tolerance, MetricParams, MetricsError, MetricsReport, PricePair};
use crate::prompting::RefLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query_id: String,
    pub truth: f64,
    pub segment: Option<String>,
    pub suggestion: PriceSuggestion,
}

/// One pipeline run over a dataset; items align 1:1 with the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model_id: String,
    pub config: PipelineConfig,
    pub items: Vec<EvalItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub total: usize,
    pub priced: usize,
    pub abstained_low_confidence: usize,
    pub abstained_no_evidence: usize,
    pub error: usize,
}

impl StatusCounts {
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.priced as f64 / self.total as f64
        }
    }
}

/// Output-file view of one prediction. Latencies are left out so repeated
/// runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub truth: f64,
    pub status: SuggestionStatus,
    pub price: Option<f64>,
    pub raw_price: Option<f64>,
    pub avg_entropy: Option<f64>,
    pub cited: BTreeSet<RefLabel>,
    pub n_refs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRun {
    pub fn counts(&self) -> StatusCounts {
        let mut c = StatusCounts {
            total: self.items.len(),
            ..Default::default()
        };
        for i in &self.items {
            match i.suggestion.status {
                SuggestionStatus::Priced => c.priced += 1,
                SuggestionStatus::AbstainedLowConfidence => c.abstained_low_confidence += 1,
                SuggestionStatus::AbstainedNoEvidence => c.abstained_no_evidence += 1,
                SuggestionStatus::Error => c.error += 1,
            }
        }
        c
    }

    /// Pairs for every priced item.
    pub fn priced_pairs(&self) -> Vec<PricePair> {
        self.items
            .iter()
            .filter_map(|i| {
                i.suggestion.price.map(|p| PricePair {
                    predicted: p,
                    truth: i.truth,
                    segment: i.segment.clone(),
                    category: None,
                })
            })
            .collect()
    }

    /// Metrics over priced items only.
    pub fn metrics(&self, params: &MetricParams) -> Result<MetricsReport, MetricsError> {
        segment_report(&self.priced_pairs(), params)
    }

    /// Items with both an ungated answer and a confidence score, marked
    /// correct when the ungated answer is within `tau`.
    pub fn pr_items(&self, tau: f64) -> Vec<PrItem> {
        self.items
            .iter()
            .filter_map(|i| {
                let s = &i.suggestion;
                match (s.raw_price, s.confidence) {
                    (Some(p), Some(c)) => Some(PrItem {
                        avg_entropy: c.avg_entropy,
                        correct: within_tolerance(p, i.truth, tau),
                    }),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn pr_curve(&self, thresholds: &[f64], tau: f64) -> Result<PrCurve, ConfidenceError> {
        pr_sweep(&self.pr_items(tau), thresholds)
    }

    pub fn records(&self) -> Vec<PredictionRecord> {
        self.items
            .iter()
            .map(|i| {
                let s = &i.suggestion;
                PredictionRecord {
                    query_id: i.query_id.clone(),
                    truth: i.truth,
                    status: s.status,
                    price: s.price,
                    raw_price: s.raw_price,
                    avg_entropy: s.confidence.map(|c| c.avg_entropy),
                    cited: s.cited_ref_ids.clone(),
                    n_refs: s.n_refs,
                    segment: i.segment.clone(),
                    error: s.error.clone(),
                }
            })
            .collect()
    }

    /// One JSON line per item, in input order.
    pub fn write_predictions<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn total_latency_ms(&self) -> f64 {
        self.items.iter().map(|i| i.suggestion.latency.total_ms).sum()
    }
}

fn item(query: &Listing, suggestion: PriceSuggestion) -> EvalItem {
    EvalItem {
        query_id: query.id.clone(),
        truth: query.price,
        segment: query.segment.clone(),
        suggestion,
    }
}

/// Prices every query (each listing's own price is the ground truth).
/// Failures are recorded per item; the run always completes.
pub fn batch_eval(pricer: &Pricer, queries: &[Listing], mode: ExecMode) -> EvalRun {
    let items = exec::map(mode, queries, |q| item(q, pricer.suggest_price(q)));
    EvalRun {
        model_id: pricer.gateway().model_id().to_string(),
        config: pricer.config().clone(),
        items,
    }
}

/// Runs ungated (`theta = +inf`) once and sweeps the gate over the result.
pub fn theta_sweep(
    pricer: &Pricer,
    queries: &[Listing],
    thresholds: &[f64],
    tau: f64,
    mode: ExecMode,
) -> Result<(EvalRun, PrCurve), ConfidenceError> {
    let ungated = pricer.with_config(PipelineConfig {
        theta_h: f64::INFINITY,
        ..pricer.config().clone()
    });
    let run = batch_eval(&ungated, queries, mode);
    let curve = run.pr_curve(thresholds, tau)?;
    Ok((run, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub counts: StatusCounts,
    /// `None` when nothing was priced.
    pub metrics: Option<MetricsReport>,
}

pub fn k_sweep(pricer: &Pricer, queries: &[Listing], ks: &[usize], params: &MetricParams, mode: ExecMode) -> Vec<KSweepRow> {
    ks.iter()
        .map(|&k| {
            let run = batch_eval(
                &pricer.with_config(PipelineConfig {
                    k,
                    ..pricer.config().clone()
                }),
                queries,
                mode,
            );
            KSweepRow {
                k,
                counts: run.counts(),
                metrics: run.metrics(params).ok(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSide {
    pub model_id: String,
    pub counts: StatusCounts,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: ComparisonSide,
    pub b: ComparisonSide,
}

/// Evaluates the pricer's own target and `other` on the same retrievals.
pub fn compare_targets(
    pricer: &Pricer,
    other: Arc<dyn CompletionTarget>,
    queries: &[Listing],
    params: &MetricParams,
    mode: ExecMode,
) -> (Comparison, EvalRun, EvalRun) {
    let b_pricer = pricer.with_gateway(other);
    let pairs = exec::map(mode, queries, |q| {
        let snapshot = pricer.store().current();
        let started = Instant::now();
        let mut latency = Latency::default();
        match pricer.retrieve(q, &snapshot, &mut latency) {
            Ok(refs) => {
                let mut blank = PriceSuggestion::blank(&q.id);
                blank.latency = latency;
                let a = pricer.answer(q, refs.as_ref(), blank.clone(), started);
                let b = b_pricer.answer(q, refs.as_ref(), blank, Instant::now());
                (item(q, a), item(q, b))
            }
            Err(e) => {
                let a = PriceSuggestion::blank(&q.id).fail(e, started);
                (item(q, a.clone()), item(q, a))
            }
        }
    });
    let (a_items, b_items): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let run = |p: &Pricer, items| EvalRun {
        model_id: p.gateway().model_id().to_string(),
        config: p.config().clone(),
        items,
    };
    let (ra, rb) = (run(pricer, a_items), run(&b_pricer, b_items));
    let side = |r: &EvalRun| ComparisonSide {
        model_id: r.model_id.clone(),
        counts: r.counts(),
        metrics: r.metrics(params).ok(),
    };
    (
        Comparison {
            a: side(&ra),
            b: side(&rb),
        },
        ra,
        rb,
    )
}
