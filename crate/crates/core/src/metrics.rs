//! Price-prediction error metrics.
//!
//! Logs are natural. Sums go through [`exec::sum`], whose fixed blocking makes
//! parallel and sequential results bit-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no price pairs")]
    Empty,
    #[error("pair {index} has a non-positive or non-finite price")]
    NonPositive { index: usize },
    #[error("invalid metric parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePair {
    pub predicted: f64,
    pub truth: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl PricePair {
    pub fn new(predicted: f64, truth: f64) -> Self {
        Self {
            predicted,
            truth,
            segment: None,
            category: None,
        }
    }

    pub fn relative_error(&self) -> f64 {
        (self.predicted - self.truth).abs() / self.truth
    }

    fn log_error(&self) -> f64 {
        self.predicted.ln() - self.truth.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    /// SAR relative-error tolerance.
    pub tau: f64,
    /// DAR tolerance is `dar_a / ln(truth + dar_b)`.
    pub dar_a: f64,
    pub dar_b: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            tau: 0.2,
            dar_a: 1.4,
            dar_b: 10.0,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.tau >= 0.0) || !(self.dar_a >= 0.0) || !(self.dar_b > 0.0) {
            return Err(MetricsError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check(pairs: &[PricePair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ok = |v: f64| v.is_finite() && v > 0.0;
    match pairs.iter().position(|p| !ok(p.predicted) || !ok(p.truth)) {
        Some(index) => Err(MetricsError::NonPositive { index }),
        None => Ok(()),
    }
}

/// True if the prediction is within `tau` relative error (inclusive).
pub fn within_tolerance(predicted: f64, truth: f64, tau: f64) -> bool {
    (predicted - truth).abs() / truth <= tau
}

pub fn dar_tolerance(truth: f64, a: f64, b: f64) -> f64 {
    a / (truth + b).ln()
}

fn mean_of(mode: ExecMode, pairs: &[PricePair], f: impl Fn(&PricePair) -> f64 + Sync + Send) -> f64 {
    exec::sum(mode, pairs, f) / pairs.len() as f64
}

pub fn rmsle(pairs: &[PricePair]) -> Result<f64, MetricsError> {
    rmsle_with(pairs, ExecMode::default())
}

pub fn rmsle_with(pairs: &[PricePair], mode: ExecMode) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean_of(mode, pairs, |p| p.log_error().powi(2)).sqrt())
}

pub fn male(pairs: &[PricePair]) -> Result<f64, MetricsError> {
    male_with(pairs, ExecMode::default())
}

pub fn male_with(pairs: &[PricePair], mode: ExecMode) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean_of(mode, pairs, |p| p.log_error().abs()))
}

pub fn sar(pairs: &[PricePair], tau: f64) -> Result<f64, MetricsError> {
    sar_with(pairs, tau, ExecMode::default())
}

pub fn sar_with(pairs: &[PricePair], tau: f64, mode: ExecMode) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean_of(mode, pairs, |p| f64::from(u8::from(within_tolerance(p.predicted, p.truth, tau)))))
}

pub fn dar(pairs: &[PricePair], a: f64, b: f64) -> Result<f64, MetricsError> {
    dar_with(pairs, a, b, ExecMode::default())
}

pub fn dar_with(pairs: &[PricePair], a: f64, b: f64, mode: ExecMode) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean_of(mode, pairs, |p| {
        f64::from(u8::from(p.relative_error() <= dar_tolerance(p.truth, a, b)))
    }))
}

/// All four metrics over one group of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: usize,
    pub rmsle: f64,
    pub male: f64,
    pub sar: f64,
    pub dar: f64,
}

pub fn metric_set(pairs: &[PricePair], params: &MetricParams, mode: ExecMode) -> Result<MetricSet, MetricsError> {
    params.validate()?;
    Ok(MetricSet {
        n: pairs.len(),
        rmsle: rmsle_with(pairs, mode)?,
        male: male_with(pairs, mode)?,
        sar: sar_with(pairs, params.tau, mode)?,
        dar: dar_with(pairs, params.dar_a, params.dar_b, mode)?,
    })
}

/// Overall metrics plus one column per segment label. Pairs without a
/// segment only count toward the overall column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub params: MetricParams,
    pub overall: MetricSet,
    pub segments: BTreeMap<String, MetricSet>,
}

pub fn segment_report(pairs: &[PricePair], params: &MetricParams) -> Result<MetricsReport, MetricsError> {
    segment_report_with(pairs, params, ExecMode::default())
}

pub fn segment_report_with(
    pairs: &[PricePair],
    params: &MetricParams,
    mode: ExecMode,
) -> Result<MetricsReport, MetricsError> {
    let overall = metric_set(pairs, params, mode)?;
    let mut groups: BTreeMap<&str, Vec<PricePair>> = BTreeMap::new();
    for p in pairs {
        if let Some(s) = &p.segment {
            groups.entry(s).or_default().push(p.clone());
        }
    }
    let segments = groups
        .into_iter()
        .map(|(k, v)| Ok((k.to_string(), metric_set(&v, params, mode)?)))
        .collect::<Result<_, MetricsError>>()?;
    Ok(MetricsReport {
        params: *params,
        overall,
        segments,
    })
}
