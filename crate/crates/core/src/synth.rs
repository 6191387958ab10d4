//! Seeded synthetic marketplace with a known price oracle.
//!
//! Products are latent (brand, model, condition) tuples. Every tuple gets a
//! held-out query listing plus several clean duplicates in the catalog, all
//! with identical text so the feature-hash embedder ranks them first. Prices
//! are `base(model) * condition_multiplier * (1 + noise)`, noise uniform in
//! `±price_noise`. The catalog also carries decoys that the pool filters must
//! remove: flagged, stale, banned-phrase and low-engagement listings, the
//! first, second and last sharing the query text at badly wrong prices.

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{FilterRules, Listing};
use crate::fmt::round_cents;

const BRANDS: [&str; 25] = [
    "Aurel", "Bexa", "Corvin", "Dalto", "Elmira", "Fenwick", "Galen", "Hollis", "Istra", "Juno", "Kestrel", "Lumo",
    "Marlo", "Nerio", "Orsa", "Pellam", "Quill", "Rosco", "Selva", "Tamsin", "Ulric", "Vanta", "Wrenly", "Xaro",
    "Yarrow",
];
const LINES: [&str; 5] = ["X", "Pro", "Air", "Max", "Neo"];
const COLOURS: [&str; 6] = ["black", "white", "silver", "blue", "green", "red"];
/// Category and whether it counts as a standardized product.
const CATEGORIES: [(&str, bool); 8] = [
    ("phone", true),
    ("laptop", true),
    ("camera", true),
    ("headphones", true),
    ("sneakers", false),
    ("handbag", false),
    ("guitar", false),
    ("bicycle", false),
];
const CONDITIONS: [(&str, f64); 4] = [("Brand new", 1.0), ("Like new", 0.85), ("Good", 0.7), ("Fair", 0.5)];

pub const FRAUD_FLAG: &str = "fraud_report";
pub const BANNED_PHRASE: &str = "replica";
pub const SEGMENT_STANDARD: &str = "standardized";
pub const SEGMENT_NON_STANDARD: &str = "non-standardized";

fn default_as_of() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 6, 1, 0, 0, 0).single().expect("valid date")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// One query (and one latent tuple) per entry.
    pub n_queries: usize,
    pub duplicates_min: usize,
    pub duplicates_max: usize,
    pub price_noise: f64,
    /// Low-engagement filler listings per clean duplicate.
    pub filler_ratio: f64,
    pub as_of: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_queries: 500,
            duplicates_min: 5,
            duplicates_max: 7,
            price_noise: 0.05,
            filler_ratio: 3.0,
            as_of: default_as_of(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marketplace {
    pub as_of: DateTime<Utc>,
    /// The raw catalog, decoys included, in shuffled order.
    pub listings: Vec<Listing>,
    /// Held-out queries carrying their true price.
    pub queries: Vec<Listing>,
    /// Rules that remove every decoy.
    pub rules: FilterRules,
}

struct Tuple {
    title: String,
    description: String,
    condition: &'static str,
    category: &'static str,
    segment: &'static str,
    price: f64,
}

impl Tuple {
    fn listing(&self, id: String, price: f64, listed_at: DateTime<Utc>, clicks: u64) -> Listing {
        Listing {
            id,
            title: self.title.clone(),
            description: self.description.clone(),
            condition: self.condition.to_string(),
            category: self.category.to_string(),
            price,
            listed_at,
            click_count: clicks,
            flags: BTreeSet::new(),
            segment: Some(self.segment.to_string()),
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Marketplace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let as_of = cfg.as_of;
    let n_models = cfg.n_queries.div_ceil(CONDITIONS.len());
    let bases: Vec<f64> = (0..n_models).map(|_| (rng.random_range(50f64.ln()..5000f64.ln())).exp()).collect();
    let tuples: Vec<Tuple> = (0..cfg.n_queries)
        .map(|i| {
            let model = i / CONDITIONS.len();
            let (condition, mult) = CONDITIONS[i % CONDITIONS.len()];
            let (category, standard) = CATEGORIES[model % CATEGORIES.len()];
            Tuple {
                title: format!("{} {}-{}", BRANDS[model % BRANDS.len()], LINES[model % LINES.len()], 100 + model),
                description: format!("{} {}", COLOURS[model % COLOURS.len()], category),
                condition,
                category,
                segment: if standard { SEGMENT_STANDARD } else { SEGMENT_NON_STANDARD },
                price: bases[model] * mult,
            }
        })
        .collect();

    let noise = cfg.price_noise;
    let noisy = |rng: &mut ChaCha8Rng, p: f64| round_cents(p * (1.0 + rng.random_range(-noise..=noise))).max(0.01);
    let recent = |rng: &mut ChaCha8Rng| as_of - Duration::hours(rng.random_range(0..80 * 24));

    let mut listings = Vec::new();
    let mut queries = Vec::with_capacity(tuples.len());
    let mut next_id = 0usize;
    let mut id = || {
        next_id += 1;
        format!("L{next_id:06}")
    };
    let mut clean = 0usize;
    for (i, t) in tuples.iter().enumerate() {
        let mut q = t.listing(format!("Q{:04}", i + 1), noisy(&mut rng, t.price), as_of, 0);
        q.segment = Some(t.segment.to_string());
        queries.push(q);

        let dups = rng.random_range(cfg.duplicates_min..=cfg.duplicates_max.max(cfg.duplicates_min));
        for _ in 0..dups {
            let p = noisy(&mut rng, t.price);
            let at = recent(&mut rng);
            listings.push(t.listing(id(), p, at, rng.random_range(200..2000)));
        }
        clean += dups;

        match i % 5 {
            0 => {
                let mut l = t.listing(id(), round_cents(t.price * 0.2), recent(&mut rng), rng.random_range(200..2000));
                l.flags.insert(FRAUD_FLAG.to_string());
                listings.push(l);
            }
            1 => {
                let at = as_of - Duration::days(rng.random_range(120..300));
                listings.push(t.listing(id(), round_cents(t.price * 2.5), at, rng.random_range(200..2000)));
            }
            2 => {
                let mut l = t.listing(id(), round_cents(t.price * 0.1), recent(&mut rng), rng.random_range(200..2000));
                l.title = format!("{} {BANNED_PHRASE}", l.title);
                listings.push(l);
            }
            3 => {
                listings.push(t.listing(id(), round_cents(t.price * 0.3), recent(&mut rng), rng.random_range(0..4)));
            }
            _ => {}
        }
    }

    let n_filler = (clean as f64 * cfg.filler_ratio).round() as usize;
    for j in 0..n_filler {
        let brand = BRANDS[j % BRANDS.len()];
        let filler = Listing {
            id: id(),
            title: format!("{brand} accessory kit {}", j + 1),
            description: format!("{} spare parts", COLOURS[j % COLOURS.len()]),
            condition: "Used".into(),
            category: "accessory".into(),
            price: round_cents(rng.random_range(5.0..200.0)),
            listed_at: recent(&mut rng),
            click_count: rng.random_range(10..60),
            flags: BTreeSet::new(),
            segment: None,
        };
        listings.push(filler);
    }
    listings.shuffle(&mut rng);

    Marketplace {
        as_of,
        listings,
        queries,
        rules: FilterRules {
            banned_flag_labels: [FRAUD_FLAG.to_string()].into(),
            banned_phrase_patterns: vec![BANNED_PHRASE.to_string()],
            ..FilterRules::default()
        },
    }
}

/// Small builders shared by unit and integration tests.
pub mod fixtures {
    use super::*;
    use crate::vecindex::{RetrievalSet, RetrievedRef};

    pub fn listing(id: &str, title: &str, description: &str, condition: &str, price: f64) -> Listing {
        Listing {
            id: id.into(),
            title: title.into(),
            description: description.into(),
            condition: condition.into(),
            category: String::new(),
            price,
            listed_at: default_as_of(),
            click_count: 100,
            flags: BTreeSet::new(),
            segment: None,
        }
    }

    /// `n` distinct references `R1..Rn` with rising scores and prices.
    pub fn retrieval(n: usize) -> RetrievalSet {
        let refs: Vec<_> = (1..=n)
            .map(|i| {
                let title = format!("Item {i}");
                ((title, format!("variant {i}"), "Good".to_string()), 100.0 + 10.0 * i as f64)
            })
            .collect();
        let borrowed: Vec<_> = refs
            .iter()
            .map(|((t, d, c), p)| ((t.as_str(), d.as_str(), c.as_str()), *p))
            .collect();
        retrieval_with(&borrowed)
    }

    /// References with the given (title, description, condition) and price,
    /// in the given rank order.
    pub fn retrieval_with(refs: &[((&str, &str, &str), f64)]) -> RetrievalSet {
        let n = refs.len();
        RetrievalSet {
            query_id: "q".into(),
            k: n,
            hits: refs
                .iter()
                .enumerate()
                .map(|(i, ((t, d, c), p))| RetrievedRef {
                    id: format!("R{}", i + 1),
                    score: 1.0 - i as f64 / (n as f64 + 1.0),
                    price: *p,
                    title: t.to_string(),
                    description: d.to_string(),
                    condition: c.to_string(),
                })
                .collect(),
        }
    }
}
