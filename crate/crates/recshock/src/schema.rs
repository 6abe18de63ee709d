//! Domain types shared across the pipeline and their wire formats.
//!
//! The canonical log format is newline-delimited JSON, one [`ClickEvent`] per
//! line with field names `ts`, `user`, `product`, `category`, `ref` and the
//! optional `src`. Catalogs are CSV with the header `product_id,category`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::referrer;

/// A UTC calendar day, stored as days since the Unix epoch.
///
/// All daily aggregation buckets by UTC date.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Day(pub i32);

impl Day {
    /// Bucket an epoch timestamp (seconds) into its UTC calendar day.
    pub fn from_timestamp(secs: i64) -> Day {
        Day(secs.div_euclid(86_400) as i32)
    }

    pub fn from_date(date: NaiveDate) -> Day {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
        Day((date - epoch).num_days() as i32)
    }

    pub fn to_date(self) -> NaiveDate {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
        epoch + chrono::Duration::days(self.0 as i64)
    }

    /// Parse an ISO `YYYY-MM-DD` date.
    pub fn parse(s: &str) -> Result<Day, SchemaError> {
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map_err(|_| SchemaError::InvalidDate(s.to_string()))?;
        Ok(Day::from_date(date))
    }

    /// First second of this day as an epoch timestamp.
    pub fn start_timestamp(self) -> i64 {
        self.0 as i64 * 86_400
    }

    pub fn offset(self, days: i32) -> Day {
        Day(self.0 + days)
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_date().format("%Y-%m-%d"))
    }
}

/// Closed range of study days; days outside it never enter any statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRange {
    pub first: Day,
    pub last: Day,
}

impl StudyRange {
    pub fn new(first: Day, last: Day) -> StudyRange {
        assert!(first <= last, "study range must be non-empty");
        StudyRange { first, last }
    }

    pub fn contains(&self, day: Day) -> bool {
        self.first <= day && day <= self.last
    }

    pub fn num_days(&self) -> u32 {
        (self.last.0 - self.first.0 + 1) as u32
    }

    pub fn days(&self) -> impl Iterator<Item = Day> {
        (self.first.0..=self.last.0).map(Day)
    }
}

/// How a pageview arrived at a product page, recovered from the referral code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReferrerClass {
    /// Search-results click (`sr_*`).
    SearchResult,
    /// Query issued from a search box (`nb_sb*`).
    SearchBox,
    /// "Customers who bought this also bought" click (`pd_sim*`).
    RecSim,
    /// Any other recommendation widget (`pd_*`, non-sim).
    RecOther,
    /// Arrival flagged as an off-site origin (`ext*`).
    External,
    /// Everything else: carts, wishlists, direct navigation, unknown codes.
    DirectOther,
}

/// One logged pageview. The atomic input record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickEvent {
    /// Seconds since epoch, UTC. Always positive.
    pub timestamp: i64,
    pub user_id: String,
    pub product_id: String,
    /// Product group label; also carries seller/author subdomain markers.
    pub category: String,
    /// The raw referral code, e.g. `pd_sim_b_1`.
    pub referrer_raw: String,
    pub referrer_class: ReferrerClass,
    /// The focal product the click came from. Present iff the class is
    /// `RecSim` or `RecOther`.
    pub source_product_id: Option<String>,
}

impl ClickEvent {
    pub fn day(&self) -> Day {
        Day::from_timestamp(self.timestamp)
    }

    /// True when this view counts as direct traffic (any non-recommendation
    /// channel).
    pub fn is_direct(&self) -> bool {
        referrer::is_direct(self.referrer_class)
    }
}

/// Wire form of one log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawEvent {
    ts: i64,
    user: String,
    product: String,
    category: String,
    #[serde(rename = "ref")]
    referrer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("timestamp must be positive, got {0}")]
    InvalidTimestamp(i64),
    #[error("recommendation event missing source product (ref {0:?})")]
    MissingSource(String),
    #[error("non-recommendation event carries source product (ref {0:?})")]
    UnexpectedSource(String),
    #[error("source product equals target product {0:?}")]
    SelfReferential(String),
    #[error("empty field {0:?}")]
    EmptyField(&'static str),
    #[error("invalid date {0:?}, expected YYYY-MM-DD")]
    InvalidDate(String),
    #[error("catalog: {0}")]
    Catalog(String),
}

/// Parse one log line into a validated event.
///
/// Referrer classification is total, so the only rejections are malformed
/// JSON and violations of the event invariants (positive timestamp, source
/// product present iff the referrer is a recommendation, source distinct from
/// the target).
pub fn parse_event_line(line: &str) -> Result<ClickEvent, SchemaError> {
    let raw: RawEvent = serde_json::from_str(line)?;
    if raw.ts <= 0 {
        return Err(SchemaError::InvalidTimestamp(raw.ts));
    }
    if raw.user.is_empty() {
        return Err(SchemaError::EmptyField("user"));
    }
    if raw.product.is_empty() {
        return Err(SchemaError::EmptyField("product"));
    }
    let (class, _) = referrer::classify_referrer(&raw.referrer);
    let is_rec = matches!(class, ReferrerClass::RecSim | ReferrerClass::RecOther);
    match (&raw.src, is_rec) {
        (None, true) => return Err(SchemaError::MissingSource(raw.referrer)),
        (Some(_), false) => return Err(SchemaError::UnexpectedSource(raw.referrer)),
        _ => {}
    }
    if let Some(src) = &raw.src {
        if *src == raw.product {
            return Err(SchemaError::SelfReferential(raw.product));
        }
    }
    Ok(ClickEvent {
        timestamp: raw.ts,
        user_id: raw.user,
        product_id: raw.product,
        category: raw.category,
        referrer_raw: raw.referrer,
        referrer_class: class,
        source_product_id: raw.src,
    })
}

/// Serialize an event back to its canonical one-line form.
pub fn format_event_line(event: &ClickEvent) -> String {
    let raw = RawEvent {
        ts: event.timestamp,
        user: event.user_id.clone(),
        product: event.product_id.clone(),
        category: event.category.clone(),
        referrer: event.referrer_raw.clone(),
        src: event.source_product_id.clone(),
    };
    serde_json::to_string(&raw).expect("event serialization cannot fail")
}

/// One user's consecutive activity, split on inactivity gaps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    /// Time-ordered events.
    pub events: Vec<ClickEvent>,
}

impl Session {
    /// Session key: (user, first event timestamp).
    pub fn start_timestamp(&self) -> i64 {
        self.events.first().map(|e| e.timestamp).unwrap_or(0)
    }
}

/// Per-day counts for one product. Days absent from the map are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DayCounts {
    /// Total deduplicated views, v.
    pub views: u32,
    /// Views arriving through any non-recommendation channel, d.
    pub direct: u32,
    pub unique_users: u32,
}

/// Daily view series for one product over the study range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DailyProductSeries {
    pub product_id: String,
    pub category: String,
    pub days: BTreeMap<Day, DayCounts>,
    pub study_range: StudyRange,
}

impl DailyProductSeries {
    pub fn counts(&self, day: Day) -> DayCounts {
        self.days.get(&day).copied().unwrap_or_default()
    }

    pub fn views(&self, day: Day) -> u32 {
        self.counts(day).views
    }

    pub fn direct(&self, day: Day) -> u32 {
        self.counts(day).direct
    }

    pub fn total_views(&self) -> u64 {
        self.days.values().map(|c| c.views as u64).sum()
    }
}

/// Daily recommendation click-through counts for one (focal, recommended)
/// pair. An edge exists only if at least one click-through was observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSeries {
    pub focal_product_id: String,
    pub recommended_product_id: String,
    pub days: BTreeMap<Day, u32>,
}

impl EdgeSeries {
    pub fn clicks(&self, day: Day) -> u32 {
        self.days.get(&day).copied().unwrap_or(0)
    }

    pub fn total_clicks(&self) -> u64 {
        self.days.values().map(|&r| r as u64).sum()
    }
}

/// Extra context attached to a detected shock. Flags never exclude a shock;
/// they preserve auditability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShockFlags {
    /// The focal product has no observed out-edges; the constancy filter
    /// passes vacuously and the shock contributes zero click-through change.
    pub no_edges: bool,
    /// Another shock on the same product has a pre/post window overlapping
    /// this one's.
    pub overlapping_window: bool,
}

impl ShockFlags {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.no_edges {
            parts.push("no_edges");
        }
        if self.overlapping_window {
            parts.push("overlap");
        }
        parts.join(";")
    }
}

/// A detected natural experiment: one day on which a product's traffic
/// satisfies all shock criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub product_id: String,
    pub shock_day: Day,
    /// Views on the shock day, v_{t*}.
    pub v_shock: u32,
    /// Views on the previous day, v_{t-}.
    pub v_prev: u32,
    /// Mean daily views over the seven days before the shock.
    pub pre_window_mean: f64,
    /// Lower median of daily views over the whole study range, zeros
    /// included.
    pub median_views: u32,
    pub unique_users_shock: u32,
    /// Demand-constancy eligibility per grid level, as populated by the beta
    /// sweep. Monotone: eligible at a level implies eligible at every lower
    /// level.
    pub eligible_beta: Vec<(f64, bool)>,
    /// Largest constancy level at which every recommended item stays within
    /// the fluctuation bound: the minimum over out-edges of 1 - fluctuation /
    /// shock rise, clamped to [0, 1]. 1.0 when there are no out-edges.
    pub min_passing_beta: f64,
    pub flags: ShockFlags,
}

impl Shock {
    /// Shock rise used by the constancy bound: v_{t*} - v_{t-}.
    pub fn rise(&self) -> f64 {
        self.v_shock as f64 - self.v_prev as f64
    }
}

/// Product to category mapping plus category sizes, read from a catalog CSV.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    categories: BTreeMap<String, String>,
    category_sizes: BTreeMap<String, u32>,
}

impl Catalog {
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Catalog {
        let mut catalog = Catalog::default();
        for (product, category) in pairs {
            catalog.insert(product, category);
        }
        catalog
    }

    pub fn insert(&mut self, product: String, category: String) {
        if let Some(prev) = self.categories.insert(product, category.clone()) {
            // Re-inserting the same product must not inflate its category.
            if prev == category {
                return;
            }
            if let Some(n) = self.category_sizes.get_mut(&prev) {
                *n -= 1;
            }
        }
        *self.category_sizes.entry(category).or_insert(0) += 1;
    }

    pub fn category_of(&self, product: &str) -> Option<&str> {
        self.categories.get(product).map(|s| s.as_str())
    }

    /// Number of distinct products in the category.
    pub fn category_size(&self, category: &str) -> u32 {
        self.category_sizes.get(category).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Parse a catalog CSV with the exact header `product_id,category`.
    pub fn parse_csv(text: &str) -> Result<Catalog, SchemaError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        {
            let headers = reader
                .headers()
                .map_err(|e| SchemaError::Catalog(e.to_string()))?;
            if headers.len() < 2 || &headers[0] != "product_id" || &headers[1] != "category" {
                return Err(SchemaError::Catalog(format!(
                    "expected header product_id,category, got {:?}",
                    headers.iter().collect::<Vec<_>>().join(",")
                )));
            }
        }
        let mut catalog = Catalog::default();
        for record in reader.records() {
            let record = record.map_err(|e| SchemaError::Catalog(e.to_string()))?;
            if record.len() < 2 {
                return Err(SchemaError::Catalog(format!(
                    "row with {} fields, expected 2",
                    record.len()
                )));
            }
            catalog.insert(record[0].to_string(), record[1].to_string());
        }
        Ok(catalog)
    }

    /// Derive a catalog from events when no catalog file is available.
    pub fn from_events<'a, I: IntoIterator<Item = &'a ClickEvent>>(events: I) -> Catalog {
        let mut pairs = BTreeMap::new();
        for event in events {
            pairs
                .entry(event.product_id.clone())
                .or_insert_with(|| event.category.clone());
        }
        Catalog::from_pairs(pairs)
    }
}

/// Aggregate estimate at one constancy level of the beta grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaLevelReport {
    pub beta: f64,
    /// Shocks eligible at this level (non-increasing in beta).
    pub n_shocks: usize,
    pub rho_mean: Option<f64>,
    pub rho_se: Option<f64>,
    /// Aggregate causal fraction. May exceed 1 and is reported unclamped.
    pub lambda: Option<f64>,
}

/// Per-shock estimate as carried in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockEstimateRecord {
    pub product_id: String,
    pub shock_day: Day,
    pub category: String,
    pub rho_i: f64,
    pub delta_v: f64,
    pub delta_r_total: f64,
    /// Total focal views over the pre-shock window [t* - W, t*).
    pub pre_v_total: u64,
    /// Total outgoing click-throughs over the same window.
    pub pre_r_total: u64,
    /// Pre-shock outbound conversion rate, pre_r / pre_v.
    pub naive_rate: Option<f64>,
    pub eligible_at_primary_beta: bool,
    pub degenerate: bool,
    pub min_passing_beta: f64,
    pub flags: ShockFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRollup {
    pub category: String,
    pub n_shocks: usize,
    pub mean_rho: f64,
    /// Mean pre-shock conversion rate over the category's shocks.
    pub naive_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinitySummary {
    /// Mean affinity of shock-day visitors for the shocked product's
    /// category.
    pub shock_visit_mean: Option<f64>,
    /// Mean affinity over all retained (visit, category) pairs.
    pub overall_mean: Option<f64>,
    pub shock_visits: u64,
    pub overall_visits: u64,
}

/// Full estimation report: per-shock estimates, per-beta aggregates,
/// category rollups, and the naive comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// The primary constancy level the headline numbers refer to.
    pub beta: f64,
    /// Baseline window length W in days.
    pub window_days: u32,
    pub shocks_detected: usize,
    pub shocks_eligible: usize,
    pub rho_mean: Option<f64>,
    pub rho_se: Option<f64>,
    pub lambda: Option<f64>,
    pub per_beta: Vec<BetaLevelReport>,
    pub shocks: Vec<ShockEstimateRecord>,
    pub categories: Vec<CategoryRollup>,
    /// Fraction of all inbound traffic arriving through recommendations of
    /// any type.
    pub naive_all_traffic: Option<f64>,
    /// Mean pre-shock outbound conversion rate over eligible shocks.
    pub naive_shocked_outbound: Option<f64>,
    pub affinity: AffinitySummary,
    /// Closed date range removed before estimation, if any.
    pub excluded_dates: Option<(Day, Day)>,
}

/// Ground-truth parameters for the synthetic generator.
///
/// Rates are probabilities in [0, 1]; ranges are inclusive `(low, high)`
/// pairs sampled uniformly per product or edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Number of focal products. Each focal product gets `recs_per_focal`
    /// dedicated recommended products.
    pub n_products: u32,
    pub recs_per_focal: u32,
    /// Recurring-visitor pool size used by repeat-visitor mode. Zero means
    /// every synthetic user is a fresh single-session identity.
    pub n_users: u32,
    pub n_days: u32,
    pub start_date: Day,
    pub n_categories: u32,
    /// Mean direct views per day for focal products.
    pub focal_demand: (f64, f64),
    /// Mean direct views per day for recommended products.
    pub rec_demand: (f64, f64),
    /// Lognormal sigma of the day-to-day demand factor. Zero keeps latent
    /// demand constant.
    pub demand_noise: f64,
    /// Correlation of focal and recommended log-demand fluctuations.
    pub kappa: f64,
    /// True causal click-through rate per edge.
    pub rho: (f64, f64),
    /// Convenience correspondence rate per edge.
    pub sigma: (f64, f64),
    /// Coupling from recommended-product demand to convenience views.
    pub gamma: (f64, f64),
    /// Optional per-category override of the rho range.
    pub category_rho: BTreeMap<u32, (f64, f64)>,
    /// Number of auto-scheduled shocks (ignored when `explicit_shocks` is
    /// non-empty).
    pub shocks: u32,
    pub shock_magnitude: (f64, f64),
    /// Draw magnitudes log-uniformly instead of uniformly.
    pub magnitude_log_uniform: bool,
    /// Explicit schedule entries: (focal index, day index, magnitude).
    pub explicit_shocks: Vec<(u32, u32, f64)>,
    /// Fraction of shocks whose recommended products receive a demand burst
    /// alongside the focal shock.
    pub correlated_fraction: f64,
    /// Recommended-demand burst as a fraction of the shock magnitude.
    pub correlated_burst_ratio: f64,
    /// Demand multiplier applied inside `seasonal_days`. 1.0 disables.
    pub seasonal_boost: f64,
    /// Inclusive day-index range of the seasonal boost.
    pub seasonal_days: Option<(u32, u32)>,
    /// Emit decoy traffic (duplicates, bots, seller/author accounts) that the
    /// ingest filters must remove exactly.
    pub repeat_visitors: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_products: 50,
            recs_per_focal: 1,
            n_users: 0,
            n_days: 60,
            start_date: Day::parse("2024-01-01").unwrap(),
            n_categories: 5,
            focal_demand: (8.0, 12.0),
            rec_demand: (8.0, 12.0),
            demand_noise: 0.0,
            kappa: 0.0,
            rho: (0.01, 0.06),
            sigma: (0.1, 0.1),
            gamma: (0.5, 0.5),
            category_rho: BTreeMap::new(),
            shocks: 50,
            shock_magnitude: (100.0, 600.0),
            magnitude_log_uniform: false,
            explicit_shocks: Vec::new(),
            correlated_fraction: 0.0,
            correlated_burst_ratio: 0.8,
            seasonal_boost: 1.0,
            seasonal_days: None,
            repeat_visitors: false,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        fn rate_range(name: &str, (lo, hi): (f64, f64)) -> Result<(), String> {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(format!("{name} must be a range within [0, 1], got {lo},{hi}"));
            }
            Ok(())
        }
        if self.n_products == 0 || self.n_days == 0 {
            return Err("products and days must be positive".into());
        }
        if self.recs_per_focal == 0 {
            return Err("recs_per_focal must be positive".into());
        }
        if self.n_categories == 0 {
            return Err("categories must be positive".into());
        }
        rate_range("rho", self.rho)?;
        rate_range("sigma", self.sigma)?;
        rate_range("gamma", self.gamma)?;
        for (cat, range) in &self.category_rho {
            rate_range("rho_category", *range)?;
            if *cat >= self.n_categories {
                return Err(format!("rho_category_{cat} exceeds category count"));
            }
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(format!("kappa must be in [0, 1], got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.correlated_fraction) {
            return Err(format!(
                "correlated_fraction must be in [0, 1], got {}",
                self.correlated_fraction
            ));
        }
        if self.correlated_burst_ratio <= 0.0 {
            return Err("correlated_burst_ratio must be positive".into());
        }
        if self.shock_magnitude.0 <= 0.0 || self.shock_magnitude.0 > self.shock_magnitude.1 {
            return Err(format!(
                "shock magnitudes must be positive and ordered, got {:?}",
                self.shock_magnitude
            ));
        }
        for (_, _, magnitude) in &self.explicit_shocks {
            if *magnitude <= 0.0 {
                return Err("explicit shock magnitudes must be positive".into());
            }
        }
        for (focal, day, _) in &self.explicit_shocks {
            if *focal >= self.n_products {
                return Err(format!("explicit shock focal index {focal} out of range"));
            }
            if *day >= self.n_days {
                return Err(format!("explicit shock day index {day} out of range"));
            }
        }
        if self.demand_noise < 0.0 {
            return Err("demand_noise must be non-negative".into());
        }
        if self.focal_demand.0 <= 0.0 || self.focal_demand.0 > self.focal_demand.1 {
            return Err("focal_demand must be a positive ordered range".into());
        }
        if self.rec_demand.0 <= 0.0 || self.rec_demand.0 > self.rec_demand.1 {
            return Err("rec_demand must be a positive ordered range".into());
        }
        if self.seasonal_boost <= 0.0 {
            return Err("seasonal_boost must be positive".into());
        }
        if let Some((lo, hi)) = self.seasonal_days {
            if lo > hi || hi >= self.n_days {
                return Err("seasonal_days must be an ordered range inside the study".into());
            }
        }
        Ok(())
    }
}

/// Product ids excluded by a filter pass, with per-reason counts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExcludedProducts {
    pub products: BTreeSet<String>,
    pub too_few_visits: usize,
    pub small_category: usize,
    pub missing_from_catalog: usize,
}
