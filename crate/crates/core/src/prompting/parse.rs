use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PricingMode, RefLabel};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing <{0}> tag")]
    MissingTag(&'static str),
    #[error("expected exactly one <{tag}> tag, found {count}")]
    MultipleTags { tag: &'static str, count: usize },
    #[error("unbalanced <{0}> tag")]
    Unbalanced(&'static str),
    #[error("not a price: {0:?}")]
    InvalidPrice(String),
    #[error("price must be positive: {0:?}")]
    NonPositivePrice(String),
    #[error("not a boolean in <valid>: {0:?}")]
    InvalidFlag(String),
    #[error("unknown label {}", .0.join(", "))]
    UnknownLabels(Vec<String>),
}

/// Byte offsets of one `<tag>inner</tag>` occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TagSpan {
    pub inner_start: usize,
    pub inner_end: usize,
}

/// All non-nested occurrences of `tag`; unbalanced open/close tags are an error.
pub(crate) fn find_tags(text: &str, tag: &'static str) -> Result<Vec<TagSpan>, ParseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let opens = text.matches(&open).count();
    let closes = text.matches(&close).count();
    if opens != closes {
        return Err(ParseError::Unbalanced(tag));
    }
    let mut spans = Vec::with_capacity(opens);
    let mut pos = 0;
    while let Some(o) = text[pos..].find(&open) {
        let inner_start = pos + o + open.len();
        let c = text[inner_start..].find(&close).ok_or(ParseError::Unbalanced(tag))?;
        let inner_end = inner_start + c;
        if text[inner_start..inner_end].contains(&open) {
            return Err(ParseError::Unbalanced(tag));
        }
        spans.push(TagSpan { inner_start, inner_end });
        pos = inner_end + close.len();
    }
    Ok(spans)
}

/// The unique occurrence of `tag`.
pub(crate) fn unique_tag(text: &str, tag: &'static str) -> Result<TagSpan, ParseError> {
    let spans = find_tags(text, tag)?;
    match spans.len() {
        0 => Err(ParseError::MissingTag(tag)),
        1 => Ok(spans[0]),
        count => Err(ParseError::MultipleTags { tag, count }),
    }
}

fn optional_tag<'a>(text: &'a str, tag: &'static str) -> Result<Option<&'a str>, ParseError> {
    match unique_tag(text, tag) {
        Ok(s) => Ok(Some(&text[s.inner_start..s.inner_end])),
        Err(ParseError::MissingTag(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

static PLAIN_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[0-9]+(\.[0-9]+)?$").unwrap());
static GROUPED_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[0-9]{1,3}(,[0-9]{3})+(\.[0-9]+)?$").unwrap());
static LABEL_MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bB([0-9]+)\b").unwrap());

const CURRENCY_GLYPHS: &[char] = &['¥', '￥', '$', '€', '£', '₩', '₹', '元'];
const CURRENCY_CODES: &[&str] = &["CNY", "RMB", "USD", "EUR", "GBP"];

/// Parses a bare price value: surrounding whitespace, currency glyphs and
/// codes, and thousands separators are removed before a strict decimal parse.
pub(crate) fn parse_price_value(raw: &str) -> Result<f64, ParseError> {
    let mut s: String = raw.chars().filter(|c| !c.is_whitespace() && !CURRENCY_GLYPHS.contains(c)).collect();
    for code in CURRENCY_CODES {
        if let Some(rest) = s.strip_prefix(code).or_else(|| s.strip_suffix(code)) {
            s = rest.to_string();
            break;
        }
    }
    if GROUPED_NUMBER.is_match(&s) {
        s.retain(|c| c != ',');
    }
    if !PLAIN_NUMBER.is_match(&s) {
        if s.starts_with('-') && PLAIN_NUMBER.is_match(&s[1..]) {
            return Err(ParseError::NonPositivePrice(raw.to_string()));
        }
        return Err(ParseError::InvalidPrice(raw.to_string()));
    }
    let v: f64 = s.parse().map_err(|_| ParseError::InvalidPrice(raw.to_string()))?;
    if !(v.is_finite() && v > 0.0) {
        return Err(ParseError::NonPositivePrice(raw.to_string()));
    }
    Ok(v)
}

/// Price inside the unique `<price>…</price>` tag.
pub fn parse_price(text: &str) -> Result<f64, ParseError> {
    let span = unique_tag(text, "price")?;
    parse_price_value(&text[span.inner_start..span.inner_end])
}

/// Splits a label list and checks every label against `n_refs`. Returns the
/// labels, or every token that is not a known label.
fn parse_label_list(list: &str, n_refs: usize) -> Result<BTreeSet<RefLabel>, Vec<String>> {
    let mut labels = BTreeSet::new();
    let mut unknown = Vec::new();
    for tok in list.split(|c: char| c == ',' || c == ';' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        match tok.parse::<RefLabel>() {
            Ok(l) if l.rank() <= n_refs => {
                labels.insert(l);
            }
            _ => unknown.push(tok.to_string()),
        }
    }
    if unknown.is_empty() {
        Ok(labels)
    } else {
        Err(unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedBackward {
    pub valid: bool,
    pub golden_ids: BTreeSet<RefLabel>,
    pub explanation: String,
}

/// Parses a backward-reasoning answer. `valid` is true only when the answer
/// did not say false and named at least one label; an invalid answer always
/// has an empty subset.
pub fn parse_golden_subset(text: &str, n_refs: usize) -> Result<ParsedBackward, ParseError> {
    let flag = optional_tag(text, "valid")?
        .map(|raw| match raw.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Ok(true),
            "false" | "no" => Ok(false),
            _ => Err(ParseError::InvalidFlag(raw.to_string())),
        })
        .transpose()?;
    let subset = optional_tag(text, "subset")?;
    if flag.is_none() && subset.is_none() {
        return Err(ParseError::MissingTag("valid"));
    }
    let labels = match subset {
        Some(list) => parse_label_list(list, n_refs).map_err(ParseError::UnknownLabels)?,
        None => BTreeSet::new(),
    };
    let valid = flag.unwrap_or(true) && !labels.is_empty();
    let explanation = optional_tag(text, "analysis")?.unwrap_or(text).trim().to_string();
    Ok(ParsedBackward {
        valid,
        golden_ids: if valid { labels } else { BTreeSet::new() },
        explanation,
    })
}

/// Reference labels a rationale relies on: the `<refs>` tag when present
/// (unknown labels dropped), otherwise every whole-word mention of a known
/// label.
pub fn parse_refs(rationale: &str, n_refs: usize) -> BTreeSet<RefLabel> {
    if let Ok(spans) = find_tags(rationale, "refs") {
        if let Some(s) = spans.first() {
            return rationale[s.inner_start..s.inner_end]
                .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
                .filter_map(|t| t.parse::<RefLabel>().ok())
                .filter(|l| l.rank() <= n_refs)
                .collect();
        }
    }
    LABEL_MENTION
        .captures_iter(rationale)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .filter(|&n| n >= 1 && n <= n_refs)
        .map(RefLabel::new)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPricing {
    pub price: f64,
    pub rationale: Option<String>,
    pub cited_ref_ids: BTreeSet<RefLabel>,
}

/// Parses a pricing answer; rationale-and-price mode also requires one
/// `<reason>` tag.
pub fn parse_pricing(text: &str, mode: PricingMode, n_refs: usize) -> Result<ParsedPricing, ParseError> {
    let price = parse_price(text)?;
    let rationale = match mode {
        PricingMode::PriceOnly => optional_tag(text, "reason")?.map(|r| r.trim().to_string()),
        PricingMode::RationaleAndPrice => {
            let s = unique_tag(text, "reason")?;
            Some(text[s.inner_start..s.inner_end].trim().to_string())
        }
    };
    let cited_ref_ids = parse_refs(text, n_refs);
    Ok(ParsedPricing {
        price,
        rationale,
        cited_ref_ids,
    })
}
