//! Prompt assembly for pricing, backward and forward reasoning, and strict
//! parsing of the tagged answers.
//!
//! Reference products are labelled `B1..Bn` in retrieval order; the same
//! labels are used by every stage so a golden subset found in the backward
//! stage names the same products in the forward stage and in rewards.

pub(crate) mod parse;
mod templates;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Listing;
use crate::render_price;
use crate::vecindex::{RetrievalSet, RetrievedRef};

pub use parse::{parse_golden_subset, parse_price, parse_pricing, parse_refs, ParseError, ParsedBackward, ParsedPricing};
pub use templates::{Templates, NO_REFERENCES};

/// Reference label `B<n>`, 1-based rank in the retrieval set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RefLabel(usize);

impl RefLabel {
    /// Label for the 1-based `rank`.
    pub fn new(rank: usize) -> Self {
        assert!(rank >= 1, "reference labels are 1-based");
        Self(rank)
    }

    pub fn rank(self) -> usize {
        self.0
    }

    /// Index into the retrieval hits.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for RefLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a reference label: {0:?}")]
pub struct BadLabel(pub String);

impl FromStr for RefLabel {
    type Err = BadLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        t.strip_prefix('B')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n >= 1 && !t[1..].starts_with('+'))
            .map(RefLabel)
            .ok_or_else(|| BadLabel(s.to_string()))
    }
}

impl TryFrom<String> for RefLabel {
    type Error = BadLabel;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RefLabel> for String {
    fn from(l: RefLabel) -> Self {
        l.to_string()
    }
}

/// Renders a label set as `B1,B5`.
pub fn join_labels(labels: &BTreeSet<RefLabel>) -> String {
    labels.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    PriceOnly,
    RationaleAndPrice,
    Backward,
    Forward,
}

/// The two serving formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PricingMode {
    #[default]
    PriceOnly,
    RationaleAndPrice,
}

impl From<PricingMode> for PromptMode {
    fn from(m: PricingMode) -> Self {
        match m {
            PricingMode::PriceOnly => PromptMode::PriceOnly,
            PricingMode::RationaleAndPrice => PromptMode::RationaleAndPrice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub mode: PromptMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("retrieval-augmented prompt needs at least one reference")]
    NoReferences,
    #[error("forward prompt needs a non-empty golden subset")]
    EmptyGoldenSubset,
    #[error("golden label {0} is not among the {1} references")]
    UnknownGoldenLabel(RefLabel, usize),
}

/// Reference context for a pricing prompt.
#[derive(Debug, Clone, Copy)]
pub enum References<'a> {
    Retrieved(&'a RetrievalSet),
    /// No-retrieval ablation: the prompt carries an empty reference section.
    Ablation,
}

/// One reference line: `- Product B3: <text>. Price: 120.`
pub fn render_reference(label: RefLabel, r: &RetrievedRef) -> String {
    format!("- Product {label}: {}. Price: {}.", r.describe(), render_price(r.price))
}

/// The numbered reference block, one line per hit, in retrieval order.
pub fn render_references(refs: &RetrievalSet) -> String {
    if refs.hits.is_empty() {
        return NO_REFERENCES.to_string();
    }
    refs.hits
        .iter()
        .enumerate()
        .map(|(i, r)| render_reference(RefLabel::new(i + 1), r))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble_pricing_prompt(
    templates: &Templates,
    query: &Listing,
    refs: References<'_>,
    mode: PricingMode,
) -> Result<PromptBundle, PromptError> {
    let references = match refs {
        References::Retrieved(set) if set.hits.is_empty() => return Err(PromptError::NoReferences),
        References::Retrieved(set) => render_references(set),
        References::Ablation => NO_REFERENCES.to_string(),
    };
    let user = templates::render(
        &templates.pricing_user,
        &[("product", &query.describe()), ("references", &references)],
    );
    let system = match mode {
        PricingMode::PriceOnly => templates.system_price.clone(),
        PricingMode::RationaleAndPrice => templates.system_rationale.clone(),
    };
    Ok(PromptBundle {
        system,
        user,
        mode: mode.into(),
    })
}

pub fn assemble_backward_prompt(templates: &Templates, query: &Listing, refs: &RetrievalSet, true_price: f64) -> PromptBundle {
    let user = templates::render(
        &templates.backward,
        &[
            ("product", &query.describe()),
            ("references", &render_references(refs)),
            ("price", &render_price(true_price)),
        ],
    );
    PromptBundle {
        system: templates.system_datagen.clone(),
        user,
        mode: PromptMode::Backward,
    }
}

/// Backward-reasoning block embedded in the forward prompt.
pub fn render_backward_block(golden: &BTreeSet<RefLabel>, backward_cot: &str) -> String {
    let labels = golden.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
    let cot = backward_cot.trim();
    if cot.is_empty() {
        format!("Golden subset: {labels}.")
    } else {
        format!("Golden subset: {labels}. {cot}")
    }
}

pub fn assemble_forward_prompt(
    templates: &Templates,
    query: &Listing,
    refs: &RetrievalSet,
    golden: &BTreeSet<RefLabel>,
    true_price: f64,
    backward_cot: &str,
) -> Result<PromptBundle, PromptError> {
    if golden.is_empty() {
        return Err(PromptError::EmptyGoldenSubset);
    }
    if let Some(bad) = golden.iter().find(|l| l.rank() > refs.hits.len()) {
        return Err(PromptError::UnknownGoldenLabel(*bad, refs.hits.len()));
    }
    let user = templates::render(
        &templates.forward,
        &[
            ("product", &query.describe()),
            ("references", &render_references(refs)),
            ("price", &render_price(true_price)),
            ("backward", &render_backward_block(golden, backward_cot)),
        ],
    );
    Ok(PromptBundle {
        system: templates.system_datagen.clone(),
        user,
        mode: PromptMode::Forward,
    })
}
