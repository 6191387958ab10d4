//! Listing ingestion and candidate-pool construction.
//!
//! A [`Catalog`] is every parsed listing. A [`CandidatePool`] is the subset that
//! survives four filters applied in order: the recency window, fraud-flag
//! rules, banned phrases, and finally a click-count cutoff taken as the
//! nearest-rank percentile of the listings that passed the first three.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o error reading listings: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate listing id {0:?}")]
    DuplicateId(String),
    #[error("invalid filter rules: {0}")]
    InvalidRules(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("malformed pool manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One second-hand product as listed by a seller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub id: String,
    pub title: String,
    pub description: String,
    pub condition: String,
    pub category: String,
    pub price: f64,
    pub listed_at: DateTime<Utc>,
    pub click_count: u64,
    #[serde(default)]
    pub flags: BTreeSet<String>,
    /// Reporting segment (for example "standardized"); used only by evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
}

impl Listing {
    /// Checks the per-listing invariants that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if !(self.price.is_finite() && self.price > 0.0) {
            return Err(format!("price must be positive, got {}", self.price));
        }
        Ok(())
    }

    /// Text shown to the model and hashed by the feature-hash embedder:
    /// title, description and condition joined by commas, empty parts skipped.
    pub fn describe(&self) -> String {
        [self.title.trim(), self.description.trim(), self.condition.trim()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Parsed listings, in source order, with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    listings: Vec<Listing>,
}

impl Catalog {
    /// Builds a catalog, failing on the first duplicate id.
    pub fn new(listings: Vec<Listing>) -> Result<Self, CatalogError> {
        let mut seen = HashSet::with_capacity(listings.len());
        for l in &listings {
            if !seen.insert(l.id.as_str()) {
                return Err(CatalogError::DuplicateId(l.id.clone()));
            }
        }
        Ok(Self { listings })
    }

    pub fn listings(&self) -> &[Listing] {
        &self.listings
    }

    pub fn len(&self) -> usize {
        self.listings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listings.is_empty()
    }

    pub fn into_listings(self) -> Vec<Listing> {
        self.listings
    }
}

/// A source line that could not be turned into a [`Listing`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedLine {
    /// 1-based line number in the source.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub catalog: Catalog,
    pub rejects: Vec<RejectedLine>,
}

/// Parses a line-delimited JSON listing stream. Blank lines are skipped;
/// malformed or invalid records are reported in [`IngestReport::rejects`].
pub fn ingest_listings<R: BufRead>(source: R) -> Result<IngestReport, CatalogError> {
    let mut listings = Vec::new();
    let mut rejects = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Listing>(&line) {
            Ok(listing) => match listing.validate() {
                Ok(()) => listings.push(listing),
                Err(reason) => rejects.push(RejectedLine { line: idx + 1, reason }),
            },
            Err(e) => rejects.push(RejectedLine {
                line: idx + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok(IngestReport {
        catalog: Catalog::new(listings)?,
        rejects,
    })
}

/// Writes listings as line-delimited JSON.
pub fn write_listings<W: Write>(mut out: W, listings: &[Listing]) -> Result<(), CatalogError> {
    for l in listings {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn default_window_days() -> u32 {
    90
}

fn default_click_percentile() -> u8 {
    70
}

/// Declarative pool filter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    #[serde(default)]
    pub banned_flag_labels: BTreeSet<String>,
    /// Case-insensitive substrings matched against title and description.
    #[serde(default)]
    pub banned_phrase_patterns: Vec<String>,
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    #[serde(default = "default_click_percentile")]
    pub click_percentile: u8,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            banned_flag_labels: BTreeSet::new(),
            banned_phrase_patterns: Vec::new(),
            window_days: default_window_days(),
            click_percentile: default_click_percentile(),
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.window_days < 1 {
            return Err(CatalogError::InvalidRules("window_days must be >= 1".into()));
        }
        if self.click_percentile > 100 {
            return Err(CatalogError::InvalidRules(format!(
                "click_percentile must be in [0, 100], got {}",
                self.click_percentile
            )));
        }
        Ok(())
    }

    /// Recency rule; the window boundary is inclusive and listings dated after
    /// `as_of` are not yet part of the market.
    pub fn within_window(&self, listing: &Listing, as_of: DateTime<Utc>) -> bool {
        let age = as_of - listing.listed_at;
        age >= Duration::zero() && age <= Duration::days(i64::from(self.window_days))
    }

    pub fn passes_flags(&self, listing: &Listing) -> bool {
        listing.flags.is_disjoint(&self.banned_flag_labels)
    }

    pub fn passes_phrases(&self, listing: &Listing) -> bool {
        if self.banned_phrase_patterns.is_empty() {
            return true;
        }
        let haystack = format!("{}\n{}", listing.title, listing.description).to_lowercase();
        !self
            .banned_phrase_patterns
            .iter()
            .filter(|p| !p.is_empty())
            .any(|p| haystack.contains(&p.to_lowercase()))
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of the
/// sorted sample, with rank clamped to at least 1. `None` for an empty sample.
pub fn nearest_rank_percentile(values: &[u64], percentile: u8) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // Integer ceil(p * n / 100) avoids float rounding at exact ranks.
    let rank = (usize::from(percentile) * n).div_ceil(100).max(1);
    Some(sorted[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStatus {
    Ok,
    /// Every listing was filtered out.
    EmptyWarning,
}

/// Filtered market reference set. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub as_of: DateTime<Utc>,
    pub rules: FilterRules,
    /// Absolute click cutoff derived from the percentile; `None` when nothing
    /// survived the earlier filters.
    pub click_cutoff: Option<u64>,
    pub status: PoolStatus,
    pub listings: Vec<Listing>,
}

impl CandidatePool {
    /// True if `listing` individually satisfies every pool invariant.
    pub fn admits(&self, listing: &Listing) -> bool {
        self.rules.within_window(listing, self.as_of)
            && self.rules.passes_flags(listing)
            && self.rules.passes_phrases(listing)
            && self.click_cutoff.is_some_and(|c| listing.click_count >= c)
    }

    pub fn len(&self) -> usize {
        self.listings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listings.is_empty()
    }

    /// Re-reads the pool as a catalog (ids are unique by construction).
    pub fn to_catalog(&self) -> Catalog {
        Catalog {
            listings: self.listings.clone(),
        }
    }
}

/// Applies the four pool filters. An empty result is reported through
/// [`PoolStatus::EmptyWarning`], not as an error.
pub fn build_pool(
    catalog: &Catalog,
    rules: &FilterRules,
    as_of: DateTime<Utc>,
) -> Result<CandidatePool, CatalogError> {
    rules.validate()?;
    if catalog.is_empty() {
        return Err(CatalogError::EmptyCatalog);
    }
    let screened: Vec<&Listing> = catalog
        .listings()
        .iter()
        .filter(|l| rules.within_window(l, as_of) && rules.passes_flags(l) && rules.passes_phrases(l))
        .collect();
    let clicks: Vec<u64> = screened.iter().map(|l| l.click_count).collect();
    let click_cutoff = nearest_rank_percentile(&clicks, rules.click_percentile);
    let listings: Vec<Listing> = match click_cutoff {
        Some(cutoff) => screened
            .into_iter()
            .filter(|l| l.click_count >= cutoff)
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    let status = if listings.is_empty() {
        tracing::warn!("candidate pool is empty after filtering");
        PoolStatus::EmptyWarning
    } else {
        PoolStatus::Ok
    };
    Ok(CandidatePool {
        as_of,
        rules: rules.clone(),
        click_cutoff,
        status,
        listings,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    kind: String,
    as_of: DateTime<Utc>,
    rules: FilterRules,
    click_cutoff: Option<u64>,
    status: PoolStatus,
    count: usize,
}

const MANIFEST_KIND: &str = "pool_header";

/// Writes a pool manifest: one header record (as-of time, rule provenance,
/// cutoff, count) followed by one listing record per line.
pub fn write_pool_manifest<W: Write>(mut out: W, pool: &CandidatePool) -> Result<(), CatalogError> {
    let header = ManifestHeader {
        kind: MANIFEST_KIND.into(),
        as_of: pool.as_of,
        rules: pool.rules.clone(),
        click_cutoff: pool.click_cutoff,
        status: pool.status,
        count: pool.listings.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    write_listings(out, &pool.listings)
}

pub fn read_pool_manifest<R: BufRead>(source: R) -> Result<CandidatePool, CatalogError> {
    let mut lines = source.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CatalogError::Manifest("missing header".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| CatalogError::Manifest(format!("bad header: {e}")))?;
    if header.kind != MANIFEST_KIND {
        return Err(CatalogError::Manifest(format!("unexpected header kind {:?}", header.kind)));
    }
    let mut listings = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let listing: Listing = serde_json::from_str(&line)
            .map_err(|e| CatalogError::Manifest(format!("record {}: {e}", i + 2)))?;
        listings.push(listing);
    }
    if listings.len() != header.count {
        return Err(CatalogError::Manifest(format!(
            "header count {} but {} records",
            header.count,
            listings.len()
        )));
    }
    // Validates id uniqueness.
    let listings = Catalog::new(listings)?.into_listings();
    Ok(CandidatePool {
        as_of: header.as_of,
        rules: header.rules,
        click_cutoff: header.click_cutoff,
        status: header.status,
        listings,
    })
}
