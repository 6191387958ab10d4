//! Token-entropy confidence over the generated price and the gate built on it.
//!
//! Served APIs only expose the top-k alternatives at each position, so every
//! distribution is completed with one residual bucket holding the missing
//! mass before its entropy (in nats) is taken.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{Generation, GatewayError, TopLogprob};
use crate::prompting::parse::unique_tag;
use crate::prompting::ParseError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfidenceError {
    #[error(transparent)]
    Unavailable(#[from] GatewayError),
    #[error("no price span: {0}")]
    NoPriceSpan(#[from] ParseError),
    #[error("price tag is empty")]
    EmptyPriceSpan,
    #[error("token distribution has no alternatives")]
    EmptyAlternatives,
    #[error("invalid log-probability {0}")]
    InvalidLogprob(f64),
    #[error("cannot sweep an empty run")]
    EmptyRun,
    #[error("threshold is NaN")]
    NanThreshold,
    #[error("io: {0}")]
    Io(String),
}

/// Mean token entropy over the price span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub avg_entropy: f64,
    pub n_price_tokens: usize,
    /// True if any price-token distribution needed a residual bucket.
    pub truncated: bool,
}

/// Indices of the tokens whose byte spans overlap the text between `<price>`
/// and `</price>`.
pub fn price_token_span(gen: &Generation) -> Result<Range<usize>, ConfidenceError> {
    let tokens = gen.logprobs()?;
    let tag = unique_tag(&gen.text, "price")?;
    let (lo, hi) = (tag.inner_start, tag.inner_end);
    if lo == hi {
        return Err(ConfidenceError::EmptyPriceSpan);
    }
    let overlaps = |t: &&crate::gateway::TokenLogprob| t.start < hi && t.end > lo;
    let first = tokens.iter().position(|t| overlaps(&t)).ok_or(ConfidenceError::EmptyPriceSpan)?;
    let last = tokens.iter().rposition(|t| overlaps(&t)).expect("first exists");
    Ok(first..last + 1)
}

/// Entropy and whether a residual bucket was needed.
fn entropy_with_residual(alternatives: &[TopLogprob]) -> Result<(f64, bool), ConfidenceError> {
    if alternatives.is_empty() {
        return Err(ConfidenceError::EmptyAlternatives);
    }
    let mut probs = Vec::with_capacity(alternatives.len() + 1);
    for a in alternatives {
        if !(a.logprob <= 0.0) {
            return Err(ConfidenceError::InvalidLogprob(a.logprob));
        }
        probs.push(a.logprob.exp());
    }
    let mass: f64 = probs.iter().sum();
    let residual = (1.0 - mass).max(0.0);
    // Rounding can leave a sliver of residual on an exhaustive list; ignore it.
    let truncated = residual > 1e-12;
    if truncated {
        probs.push(residual);
    }
    let total = mass + if truncated { residual } else { 0.0 };
    let h = probs
        .iter()
        .map(|p| p / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>();
    Ok((h.max(0.0), truncated))
}

/// Entropy in nats of one position's top-k distribution, renormalised with a
/// residual bucket for the probability mass outside the list.
pub fn token_entropy(alternatives: &[TopLogprob]) -> Result<f64, ConfidenceError> {
    entropy_with_residual(alternatives).map(|(h, _)| h)
}

pub fn avg_entropy(gen: &Generation) -> Result<ConfidenceScore, ConfidenceError> {
    let span = price_token_span(gen)?;
    let tokens = &gen.logprobs()?[span];
    let mut sum = 0.0;
    let mut truncated = false;
    for t in tokens {
        let (h, tr) = entropy_with_residual(&t.top)?;
        sum += h;
        truncated |= tr;
    }
    Ok(ConfidenceScore {
        avg_entropy: sum / tokens.len() as f64,
        n_price_tokens: tokens.len(),
        truncated,
    })
}

/// What to do when the endpoint returns no log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnavailablePolicy {
    #[default]
    Abstain,
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateDecision {
    Kept(f64),
    Abstained(&'static str),
}

pub const LOW_CONFIDENCE: &str = "low_confidence";

/// Keeps the price iff `avg_entropy <= theta` (inclusive).
pub fn filter_by_confidence(price: f64, score: &ConfidenceScore, theta: f64) -> GateDecision {
    if score.avg_entropy <= theta {
        GateDecision::Kept(price)
    } else {
        GateDecision::Abstained(LOW_CONFIDENCE)
    }
}

/// One evaluated item: its confidence and whether its price was adopted at
/// the SAR tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrItem {
    pub avg_entropy: f64,
    pub correct: bool,
}

fn finite_or_label<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    #[serde(serialize_with = "finite_or_label")]
    pub threshold: f64,
    pub coverage: f64,
    /// SAR over kept items; `None` when nothing is kept.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub n_items: usize,
    pub points: Vec<PrPoint>,
    /// Trapezoid area under precision over coverage, using the points with a
    /// defined precision; `None` with fewer than two such points.
    pub auc: Option<f64>,
}

/// Coverage and precision at each threshold, sorted by threshold.
pub fn pr_sweep(items: &[PrItem], thresholds: &[f64]) -> Result<PrCurve, ConfidenceError> {
    if items.is_empty() {
        return Err(ConfidenceError::EmptyRun);
    }
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(ConfidenceError::NanThreshold);
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = items.len();
    let points: Vec<PrPoint> = sorted
        .into_iter()
        .map(|theta| {
            let (kept, correct) = items
                .iter()
                .filter(|i| i.avg_entropy <= theta)
                .fold((0usize, 0usize), |(k, c), i| (k + 1, c + usize::from(i.correct)));
            PrPoint {
                threshold: theta,
                coverage: kept as f64 / n as f64,
                precision: (kept > 0).then(|| correct as f64 / kept as f64),
            }
        })
        .collect();
    let defined: Vec<(f64, f64)> = points.iter().filter_map(|p| p.precision.map(|q| (p.coverage, q))).collect();
    let auc = (defined.len() >= 2).then(|| {
        defined
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum()
    });
    Ok(PrCurve {
        n_items: n,
        points,
        auc,
    })
}

/// `threshold,coverage,precision`; undefined precision is an empty field.
pub fn write_pr_csv<W: Write>(mut out: W, curve: &PrCurve) -> Result<(), ConfidenceError> {
    let io = |e: std::io::Error| ConfidenceError::Io(e.to_string());
    writeln!(out, "threshold,coverage,precision").map_err(io)?;
    for p in &curve.points {
        let precision = p.precision.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", p.threshold, p.coverage, precision).map_err(io)?;
    }
    Ok(())
}

pub fn write_pr_summary<W: Write>(out: W, curve: &PrCurve) -> Result<(), ConfidenceError> {
    serde_json::to_writer_pretty(out, curve).map_err(|e| ConfidenceError::Io(e.to_string()))
}

/// Evenly spaced thresholds `0, step, 2*step, ..` up to `max`, plus `+inf`.
pub fn threshold_grid(max: f64, step: f64) -> Vec<f64> {
    let n = if step > 0.0 && max >= 0.0 { (max / step).floor() as usize } else { 0 };
    let mut t: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    t.push(f64::INFINITY);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn top(token: &str, p: f64) -> TopLogprob {
        TopLogprob {
            token: token.into(),
            logprob: p.ln(),
        }
    }

    fn gen(tokens: &[(&str, Vec<TopLogprob>)]) -> Generation {
        Generation::from_tokens(
            "m",
            tokens
                .iter()
                .map(|(t, top)| {
                    let lp = top.iter().find(|a| a.token == *t).map_or(0.0, |a| a.logprob);
                    (t.to_string(), lp, top.clone())
                })
                .collect(),
        )
    }

    #[test]
    fn span_excludes_tags() {
        let g = gen(&[
            ("<price>", vec![top("<price>", 1.0)]),
            ("12", vec![top("12", 1.0)]),
            ("0", vec![top("0", 1.0)]),
            ("</price>", vec![top("</price>", 1.0)]),
        ]);
        assert_eq!(price_token_span(&g).unwrap(), 1..3);
        let g = gen(&[("x<price>", vec![top("x<price>", 1.0)]), ("120", vec![top("120", 1.0)]), ("</price>", vec![top("</price>", 1.0)])]);
        assert_eq!(price_token_span(&g).unwrap(), 1..2);
    }

    #[test]
    fn span_errors() {
        let g = gen(&[("120", vec![top("120", 1.0)])]);
        assert!(matches!(price_token_span(&g), Err(ConfidenceError::NoPriceSpan(_))));
        let g = Generation::text_only("m", "<price>1</price>");
        assert!(matches!(price_token_span(&g), Err(ConfidenceError::Unavailable(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(token_entropy(&[top("a", 1.0)]).unwrap(), 0.0);
        let u4: Vec<_> = ["a", "b", "c", "d"].iter().map(|t| top(t, 0.25)).collect();
        assert!((token_entropy(&u4).unwrap() - 4f64.ln()).abs() < 1e-9);
        let h = token_entropy(&[top("a", 0.5), top("b", 0.5)]).unwrap();
        assert!((h - 0.6931).abs() < 1e-4);
        assert!(matches!(token_entropy(&[]), Err(ConfidenceError::EmptyAlternatives)));
    }

    #[test]
    fn residual_bucket_is_added() {
        // 0.5 listed, 0.5 missing: two equal buckets.
        let (h, truncated) = entropy_with_residual(&[top("a", 0.5)]).unwrap();
        assert!(truncated);
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn average_over_price_tokens() {
        let g = gen(&[
            ("<price>", vec![top("<price>", 1.0)]),
            ("1", vec![top("1", 1.0)]),
            ("2", vec![top("2", 0.5), top("3", 0.5)]),
            ("</price>", vec![top("</price>", 1.0)]),
        ]);
        let s = avg_entropy(&g).unwrap();
        assert_eq!(s.n_price_tokens, 2);
        assert!((s.avg_entropy - 0.3466).abs() < 1e-4);
        assert!(!s.truncated);
    }

    #[test]
    fn gate_is_inclusive() {
        let s = |h| ConfidenceScore {
            avg_entropy: h,
            n_price_tokens: 1,
            truncated: false,
        };
        assert_eq!(filter_by_confidence(10.0, &s(0.1), 0.5), GateDecision::Kept(10.0));
        assert_eq!(filter_by_confidence(10.0, &s(0.9), 0.5), GateDecision::Abstained(LOW_CONFIDENCE));
        assert_eq!(filter_by_confidence(10.0, &s(0.5), 0.5), GateDecision::Kept(10.0));
    }

    #[test]
    fn sweep_endpoints_and_fixture() {
        let items: Vec<PrItem> = (0..10)
            .map(|i| PrItem {
                avg_entropy: if i % 3 == 0 { 0.8 + i as f64 * 0.01 } else { 0.1 + i as f64 * 0.01 },
                correct: i % 3 != 0,
            })
            .collect();
        let c = pr_sweep(&items, &[0.5, f64::INFINITY, -1.0]).unwrap();
        assert_eq!(c.points[0].threshold, -1.0);
        assert_eq!(c.points[0].coverage, 0.0);
        assert_eq!(c.points[0].precision, None);
        assert_eq!(c.points[1].precision, Some(1.0));
        assert_eq!(c.points[2].coverage, 1.0);
        assert_eq!(c.points[2].precision, Some(0.6));
        assert!(matches!(pr_sweep(&[], &[0.0]), Err(ConfidenceError::EmptyRun)));
    }

    #[test]
    fn csv_and_summary() {
        let items = [PrItem {
            avg_entropy: 0.2,
            correct: true,
        }];
        let c = pr_sweep(&items, &[-1.0, f64::INFINITY]).unwrap();
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &c).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "threshold,coverage,precision\n-1,0,\ninf,1,1\n");
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["points"][1]["threshold"], "inf");
        assert!(json["points"][0]["precision"].is_null());
    }

    proptest! {
        #[test]
        fn entropy_bounded(ps in prop::collection::vec(1e-6f64..1.0, 1..20)) {
            let total: f64 = ps.iter().sum::<f64>() * 1.01;
            let alts: Vec<_> = ps.iter().enumerate().map(|(i, p)| top(&i.to_string(), p / total)).collect();
            let h = token_entropy(&alts).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= ((alts.len() + 1) as f64).ln() + 1e-9);
        }

        #[test]
        fn coverage_monotone(
            hs in prop::collection::vec((0.0f64..3.0, any::<bool>()), 1..50),
            ts in prop::collection::vec(-1.0f64..4.0, 1..20),
        ) {
            let items: Vec<_> = hs.iter().map(|&(h, c)| PrItem { avg_entropy: h, correct: c }).collect();
            let curve = pr_sweep(&items, &ts).unwrap();
            for w in curve.points.windows(2) {
                prop_assert!(w[0].threshold <= w[1].threshold);
                prop_assert!(w[0].coverage <= w[1].coverage);
            }
            for p in &curve.points {
                prop_assert!((0.0..=1.0).contains(&p.coverage));
                if let Some(q) = p.precision { prop_assert!((0.0..=1.0).contains(&q)); }
            }
        }
    }
}
