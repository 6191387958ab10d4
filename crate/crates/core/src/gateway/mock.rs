//! Deterministic stand-in models.
//!
//! The median pricer reads the prompt it is given the way a careful model
//! would: it treats references whose text matches Product A exactly as the
//! golden subset and answers the median of their prices. Price tokens get a
//! synthetic distribution whose entropy grows with the relative price
//! dispersion of the evidence it used, so confidence gating has a real
//! signal to work with.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{check_prompt, CompletionTarget, DecodingParams, Generation, GatewayError, TopLogprob};
use crate::fmt::round_cents;
use crate::prompting::parse::find_tags;
use crate::prompting::{join_labels, PromptBundle, PromptMode, RefLabel};
use crate::render_price;

fn default_dispersion_to_entropy() -> f64 {
    5.0
}

fn default_prior_price() -> f64 {
    1000.0
}

fn default_backward_tolerance() -> f64 {
    0.2
}

/// A scripted reply, chosen when both filters (if set) match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub mode: Option<PromptMode>,
    /// Substring the user prompt must contain.
    #[serde(default)]
    pub contains: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MockBehavior {
    MedianPricer {
        /// Rate at which price-token entropy rises with the coefficient of
        /// variation of the evidence prices.
        #[serde(default = "default_dispersion_to_entropy")]
        dispersion_to_entropy: f64,
        /// Answer used when the prompt carries no references.
        #[serde(default = "default_prior_price")]
        prior_price: f64,
        /// Backward stage: a textual match counts as golden only if its price
        /// is within this relative distance of the true price.
        #[serde(default = "default_backward_tolerance")]
        backward_tolerance: f64,
    },
    Scripted {
        rules: Vec<ScriptRule>,
        #[serde(default)]
        default: Option<String>,
    },
    Echo,
}

impl MockBehavior {
    pub fn median_pricer() -> Self {
        MockBehavior::MedianPricer {
            dispersion_to_entropy: default_dispersion_to_entropy(),
            prior_price: default_prior_price(),
            backward_tolerance: default_backward_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockTarget {
    model_id: String,
    behavior: MockBehavior,
}

impl MockTarget {
    pub fn new(model_id: impl Into<String>, behavior: MockBehavior) -> Self {
        Self {
            model_id: model_id.into(),
            behavior,
        }
    }

    pub fn median_pricer() -> Self {
        Self::new("mock-median-pricer", MockBehavior::median_pricer())
    }

    /// Always returns `response`.
    pub fn scripted(response: impl Into<String>) -> Self {
        Self::new(
            "mock-scripted",
            MockBehavior::Scripted {
                rules: Vec::new(),
                default: Some(response.into()),
            },
        )
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }
}

impl CompletionTarget for MockTarget {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &PromptBundle, params: &DecodingParams) -> Result<Generation, GatewayError> {
        check_prompt(prompt)?;
        let (text, dispersion) = match &self.behavior {
            MockBehavior::Echo => (prompt.user.clone(), 0.0),
            MockBehavior::Scripted { rules, default } => {
                let hit = rules.iter().find(|r| {
                    r.mode.is_none_or(|m| m == prompt.mode)
                        && r.contains.as_deref().is_none_or(|c| prompt.user.contains(c))
                });
                let text = hit
                    .map(|r| r.response.clone())
                    .or_else(|| default.clone())
                    .ok_or_else(|| GatewayError::Protocol("no scripted response matches the prompt".into()))?;
                (text, 0.0)
            }
            MockBehavior::MedianPricer {
                dispersion_to_entropy: _,
                prior_price,
                backward_tolerance,
            } => median_pricer_answer(prompt, *prior_price, *backward_tolerance),
        };
        let kappa = match &self.behavior {
            MockBehavior::MedianPricer {
                dispersion_to_entropy, ..
            } => *dispersion_to_entropy,
            _ => 0.0,
        };
        Ok(tokenize_answer(&self.model_id, &text, dispersion, kappa, params.top_logprobs))
    }
}

/// What the median pricer can read back out of a prompt.
struct PromptView {
    product: Option<String>,
    refs: Vec<(RefLabel, String, f64)>,
    true_price: Option<f64>,
    golden: BTreeSet<RefLabel>,
}

static REF_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^- Product B([0-9]+): (.*)\. Price: ([0-9]+(?:\.[0-9]+)?)\.$").unwrap());
static LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bB([0-9]+)\b").unwrap());

fn read_prompt(user: &str) -> PromptView {
    let mut view = PromptView {
        product: None,
        refs: Vec::new(),
        true_price: None,
        golden: BTreeSet::new(),
    };
    for line in user.lines() {
        if let Some(rest) = line.strip_prefix("Product A: ").or_else(|| line.strip_prefix("- Product A: ")) {
            view.product = Some(rest.to_string());
        } else if let Some(c) = REF_LINE.captures(line) {
            if let (Ok(rank), Ok(price)) = (c[1].parse::<usize>(), c[3].parse::<f64>()) {
                if rank >= 1 {
                    view.refs.push((RefLabel::new(rank), c[2].to_string(), price));
                }
            }
        } else if let Some(rest) = line.strip_prefix("- Price of Product A: ") {
            view.true_price = rest.trim().parse().ok();
        } else if let Some(rest) = line.strip_prefix("- Backward Reasoning: Golden subset: ") {
            let labels = rest.split('.').next().unwrap_or("");
            view.golden = LABEL
                .captures_iter(labels)
                .filter_map(|c| c[1].parse::<usize>().ok())
                .filter(|n| *n >= 1)
                .map(RefLabel::new)
                .collect();
        }
    }
    view
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Coefficient of variation (population std / mean).
fn dispersion(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn median_pricer_answer(prompt: &PromptBundle, prior_price: f64, tolerance: f64) -> (String, f64) {
    let view = read_prompt(&prompt.user);
    let matches_query = |text: &str| view.product.as_deref() == Some(text);
    match prompt.mode {
        PromptMode::Backward => {
            let truth = view.true_price.unwrap_or(f64::NAN);
            let golden: BTreeSet<RefLabel> = view
                .refs
                .iter()
                .filter(|(_, text, price)| matches_query(text) && ((price / truth) - 1.0).abs() <= tolerance)
                .map(|(l, _, _)| *l)
                .collect();
            let text = if golden.is_empty() {
                "<valid>false</valid><analysis>No retrieved product matches Product A in brand, model and condition \
                 within a similar price range.</analysis><subset></subset>"
                    .to_string()
            } else {
                let labels = join_labels(&golden);
                format!(
                    "<valid>true</valid><analysis>{labels} share brand, model and condition with Product A and are \
                     priced close to {}.</analysis><subset>{labels}</subset>",
                    render_price(truth)
                )
            };
            (text, 0.0)
        }
        PromptMode::Forward => {
            let mut prices: Vec<f64> = view
                .refs
                .iter()
                .filter(|(l, _, _)| view.golden.contains(l))
                .map(|(_, _, p)| *p)
                .collect();
            let disp = dispersion(&prices);
            let centre = if prices.is_empty() { f64::NAN } else { median(&mut prices) };
            let truth = view.true_price.unwrap_or(centre);
            let labels = join_labels(&view.golden);
            let text = format!(
                "<reason>Products {labels} match Product A in brand, model and condition. Their prices centre on {}, \
                 so Product A is priced at {}.</reason><refs>{labels}</refs><price>{}</price>",
                render_price(round_cents(centre)),
                render_price(truth),
                render_price(truth)
            );
            (text, disp)
        }
        PromptMode::PriceOnly | PromptMode::RationaleAndPrice => {
            let golden: Vec<&(RefLabel, String, f64)> = view.refs.iter().filter(|(_, t, _)| matches_query(t)).collect();
            let evidence: Vec<&(RefLabel, String, f64)> = if golden.is_empty() {
                view.refs.iter().collect()
            } else {
                golden.clone()
            };
            let (price, disp, reason) = if evidence.is_empty() {
                (
                    prior_price,
                    f64::INFINITY,
                    "No market references are available; falling back to a generic prior.".to_string(),
                )
            } else {
                let mut prices: Vec<f64> = evidence.iter().map(|e| e.2).collect();
                let disp = dispersion(&prices);
                let m = round_cents(median(&mut prices));
                let reason = if golden.is_empty() {
                    format!("No reference matches Product A exactly; using the median of all {} references.", evidence.len())
                } else {
                    let labels: BTreeSet<RefLabel> = golden.iter().map(|g| g.0).collect();
                    format!("{} match Product A in brand, model and condition; their median price is {}.", join_labels(&labels), render_price(m))
                };
                (m, disp, reason)
            };
            let cited: BTreeSet<RefLabel> = golden.iter().map(|g| g.0).collect();
            let text = if prompt.mode == PromptMode::PriceOnly {
                format!("<price>{}</price>", render_price(price))
            } else {
                format!(
                    "<reason>{reason}</reason><refs>{}</refs><price>{}</price>",
                    join_labels(&cited),
                    render_price(price)
                )
            };
            (text, disp)
        }
    }
}

const DIGITS: &str = "0123456789";

/// Splits an answer into tokens: whole tags, one token per character inside
/// `<price>`, and whitespace-prefixed words elsewhere. Price characters get a
/// distribution with chosen probability
/// `q = 1/(m+1) + m/(m+1) * exp(-kappa * dispersion)` and the rest spread
/// evenly over `m` alternative characters, so entropy rises monotonically
/// from 0 (no dispersion) to `ln(m+1)`.
fn tokenize_answer(model_id: &str, text: &str, dispersion: f64, kappa: f64, top_logprobs: u32) -> Generation {
    let price_inner = find_tags(text, "price")
        .ok()
        .and_then(|s| s.first().map(|s| (s.inner_start, s.inner_end)));
    let in_price = |i: usize| price_inner.is_some_and(|(s, e)| i >= s && i < e);
    let mut out: Vec<(String, f64, Vec<TopLogprob>)> = Vec::new();
    let certain = |tok: &str| (tok.to_string(), 0.0, vec![TopLogprob { token: tok.to_string(), logprob: 0.0 }]);
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let ch = rest.chars().next().expect("in bounds");
        if in_price(i) {
            let tok = ch.to_string();
            out.push(price_char_token(&tok, dispersion, kappa, top_logprobs));
            i += ch.len_utf8();
            continue;
        }
        if ch == '<' {
            if let Some(close) = rest.find('>') {
                let body = &rest[1..close];
                if !body.is_empty() && body.trim_start_matches('/').chars().all(|c| c.is_ascii_alphabetic()) {
                    out.push(certain(&rest[..=close]));
                    i += close + 1;
                    continue;
                }
            }
        }
        let mut end = i;
        let mut seen_word = false;
        for (off, c) in rest.char_indices() {
            let pos = i + off;
            if off > 0 && (c == '<' || in_price(pos)) {
                break;
            }
            if c.is_whitespace() {
                if seen_word {
                    break;
                }
            } else {
                seen_word = true;
            }
            end = pos + c.len_utf8();
        }
        out.push(certain(&text[i..end]));
        i = end;
    }
    Generation::from_tokens(model_id, out)
}

fn price_char_token(tok: &str, dispersion: f64, kappa: f64, top_logprobs: u32) -> (String, f64, Vec<TopLogprob>) {
    let alternatives: Vec<String> = DIGITS
        .chars()
        .map(|c| c.to_string())
        .filter(|c| c != tok)
        .take(top_logprobs.saturating_sub(1) as usize)
        .collect();
    let m = alternatives.len() as f64;
    let decay = if dispersion.is_infinite() { 0.0 } else { (-kappa * dispersion).exp() };
    let q = if alternatives.is_empty() {
        1.0
    } else {
        1.0 / (m + 1.0) + m / (m + 1.0) * decay
    };
    let mut top = vec![TopLogprob {
        token: tok.to_string(),
        logprob: q.ln(),
    }];
    if q < 1.0 {
        let p_alt = (1.0 - q) / m;
        top.extend(alternatives.into_iter().map(|token| TopLogprob {
            token,
            logprob: p_alt.ln(),
        }));
    }
    (tok.to_string(), q.ln(), top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{assemble_pricing_prompt, parse_price, PricingMode, References, Templates};
    use crate::synth::fixtures::{listing, retrieval_with};

    fn price_prompt(query_text: (&str, &str, &str), refs: &[((&str, &str, &str), f64)], mode: PricingMode) -> PromptBundle {
        let q = listing("q", query_text.0, query_text.1, query_text.2, 1.0);
        let set = retrieval_with(refs);
        assemble_pricing_prompt(&Templates::default(), &q, References::Retrieved(&set), mode).unwrap()
    }

    #[test]
    fn median_of_golden_refs() {
        let p = ("Canon EOS R6", "body only", "Good");
        let other = ("Canon EOS R5", "body only", "Good");
        let prompt = price_prompt(p, &[(p, 100.0), (other, 900.0), (p, 140.0), (p, 120.0)], PricingMode::PriceOnly);
        let g = MockTarget::median_pricer().complete(&prompt, &DecodingParams::default()).unwrap();
        assert!(g.text.contains("<price>120</price>"), "{}", g.text);
        g.validate().unwrap();
    }

    #[test]
    fn scripted_returns_exact_response() {
        let prompt = price_prompt(("a", "", ""), &[(("b", "", ""), 1.0)], PricingMode::PriceOnly);
        let r = "<reason>because</reason><price>42</price>";
        let g = MockTarget::scripted(r).complete(&prompt, &DecodingParams::default()).unwrap();
        assert_eq!(g.text, r);
        g.validate().unwrap();
    }

    #[test]
    fn scripted_rules_filter_by_mode_and_substring() {
        let target = MockTarget::new(
            "s",
            MockBehavior::Scripted {
                rules: vec![
                    ScriptRule {
                        mode: Some(PromptMode::Backward),
                        contains: None,
                        response: "back".into(),
                    },
                    ScriptRule {
                        mode: None,
                        contains: Some("zebra".into()),
                        response: "zebra!".into(),
                    },
                ],
                default: None,
            },
        );
        let p = price_prompt(("zebra lamp", "", ""), &[(("b", "", ""), 1.0)], PricingMode::PriceOnly);
        assert_eq!(target.complete(&p, &DecodingParams::default()).unwrap().text, "zebra!");
        let p = price_prompt(("lamp", "", ""), &[(("b", "", ""), 1.0)], PricingMode::PriceOnly);
        assert!(matches!(
            target.complete(&p, &DecodingParams::default()),
            Err(GatewayError::Protocol(_))
        ));
    }

    #[test]
    fn deterministic_at_temperature_zero() {
        let p = ("x", "y", "z");
        let prompt = price_prompt(p, &[(p, 10.0), (p, 12.0)], PricingMode::RationaleAndPrice);
        let m = MockTarget::median_pricer();
        let a = m.complete(&prompt, &DecodingParams::default()).unwrap();
        let b = m.complete(&prompt, &DecodingParams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(parse_price(&a.text), Ok(11.0));
    }

    #[test]
    fn price_tokens_are_single_characters_inside_tag() {
        let g = tokenize_answer("m", "<reason>ok then</reason><price>120.5</price>", 0.1, 5.0, 20);
        let toks: Vec<&str> = g.tokens.as_ref().unwrap().iter().map(|t| t.token.as_str()).collect();
        assert_eq!(
            toks,
            ["<reason>", "ok", " then", "</reason>", "<price>", "1", "2", "0", ".", "5", "</price>"]
        );
        g.validate().unwrap();
    }

    #[test]
    fn echo_returns_user_prompt() {
        let prompt = price_prompt(("a", "", ""), &[(("b", "", ""), 1.0)], PricingMode::PriceOnly);
        let g = MockTarget::new("e", MockBehavior::Echo)
            .complete(&prompt, &DecodingParams::default())
            .unwrap();
        assert_eq!(g.text, prompt.user);
    }

    #[test]
    fn behavior_config_roundtrip() {
        let b: MockBehavior = serde_json::from_str(r#"{"kind":"median-pricer"}"#).unwrap();
        assert_eq!(b, MockBehavior::median_pricer());
    }
}
