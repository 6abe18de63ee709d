//! Log reading, sessionization, within-session deduplication, and the user-
//! and product-level activity filters.
//!
//! The pipeline is batch over a closed study range: events are parsed and
//! sessionized first, user filters run on the raw (pre-dedup) sessions so
//! that bot-scale activity is judged on what was actually logged, and
//! deduplication runs on the sessions that survive.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::schema::{
    Catalog, ClickEvent, DailyProductSeries, Day, ExcludedProducts, SchemaError, Session,
    StudyRange,
};

/// Category markers that identify seller portals in the log schema.
pub const SELLER_MARKERS: [&str; 2] = ["sellercentral", "catalog-retail"];
/// Category markers that identify author/publisher portals.
pub const AUTHOR_MARKERS: [&str; 2] = ["authorcentral", "kdp"];

/// How the bot threshold is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BotRule {
    /// Mean daily visits over the whole study range exceeds the threshold.
    MeanOverRange,
    /// Any single day's visits exceed the threshold.
    MaxSingleDay,
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    /// Inactivity gap that closes a session, in seconds.
    pub session_timeout_secs: i64,
    /// Visits per day above which a user is treated as a bot (exclusive).
    pub bot_daily_visits: f64,
    pub bot_rule: BotRule,
    /// Seller-marker visits above which a user is excluded (exclusive).
    pub seller_visit_limit: u32,
    /// Minimum total visits for a product to be retained (inclusive).
    pub min_product_visits: u64,
    /// Minimum distinct catalog items in a product's category (inclusive).
    pub min_category_size: u32,
    /// Malformed-line rate above which ingestion aborts.
    pub max_malformed_rate: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            session_timeout_secs: 30 * 60,
            bot_daily_visits: 100.0,
            bot_rule: BotRule::MeanOverRange,
            seller_visit_limit: 5,
            min_product_visits: 5,
            min_category_size: 100,
            max_malformed_rate: 0.10,
        }
    }
}

/// Counters reported after ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub lines_read: u64,
    pub blank_lines: u64,
    pub malformed_lines: u64,
    pub events_parsed: u64,
    pub excluded_users: u64,
    pub events_from_excluded_users: u64,
    pub events_removed_by_dedup: u64,
    pub excluded_products: u64,
    pub retained_events: u64,
    pub study_first_day: Option<String>,
    pub study_last_day: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(
        "malformed-line rate {rate:.1}% exceeds {limit:.1}% ({malformed} of {total} lines); \
         first error: {first}"
    )]
    TooManyMalformed {
        rate: f64,
        limit: f64,
        malformed: u64,
        total: u64,
        first: String,
    },
    #[error("log contains no events")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parse a whole log, counting malformed lines.
///
/// Blank lines are skipped without counting against the malformed rate. A
/// malformed rate above the configured limit aborts with a diagnostic that
/// includes the first parse error seen.
pub fn parse_log(text: &str, config: &IngestConfig) -> Result<(Vec<ClickEvent>, IngestSummary), IngestError> {
    let mut summary = IngestSummary::default();
    let mut events = Vec::new();
    let mut first_error: Option<String> = None;
    for line in text.lines() {
        summary.lines_read += 1;
        if line.trim().is_empty() {
            summary.blank_lines += 1;
            continue;
        }
        match crate::schema::parse_event_line(line) {
            Ok(event) => {
                summary.events_parsed += 1;
                events.push(event);
            }
            Err(err) => {
                summary.malformed_lines += 1;
                if first_error.is_none() {
                    first_error = Some(format!("line {}: {err}", summary.lines_read));
                }
            }
        }
    }
    let considered = summary.events_parsed + summary.malformed_lines;
    if considered > 0 {
        let rate = summary.malformed_lines as f64 / considered as f64;
        if rate > config.max_malformed_rate {
            return Err(IngestError::TooManyMalformed {
                rate: rate * 100.0,
                limit: config.max_malformed_rate * 100.0,
                malformed: summary.malformed_lines,
                total: considered,
                first: first_error.unwrap_or_default(),
            });
        }
    }
    Ok((events, summary))
}

/// The closed study range spanned by a set of events.
pub fn study_range_of(events: &[ClickEvent]) -> Option<StudyRange> {
    let first = events.iter().map(|e| e.day()).min()?;
    let last = events.iter().map(|e| e.day()).max()?;
    Some(StudyRange::new(first, last))
}

/// Group events per user and split on inactivity gaps of at least the
/// session timeout.
///
/// Input order is irrelevant: events are sorted by a full deterministic key
/// before splitting, and sessions come back ordered by (user, start time).
pub fn sessionize(events: Vec<ClickEvent>, timeout_secs: i64) -> Vec<Session> {
    let mut per_user: HashMap<String, Vec<ClickEvent>> = HashMap::new();
    for event in events {
        per_user.entry(event.user_id.clone()).or_default().push(event);
    }
    let mut users: Vec<String> = per_user.keys().cloned().collect();
    users.sort();
    let mut sessions = Vec::new();
    for user in users {
        let mut user_events = per_user.remove(&user).unwrap();
        user_events.sort_by(|a, b| {
            (a.timestamp, &a.product_id, &a.referrer_raw, &a.source_product_id).cmp(&(
                b.timestamp,
                &b.product_id,
                &b.referrer_raw,
                &b.source_product_id,
            ))
        });
        let mut current: Vec<ClickEvent> = Vec::new();
        for event in user_events {
            if let Some(last) = current.last() {
                if event.timestamp - last.timestamp >= timeout_secs {
                    sessions.push(Session {
                        user_id: user.clone(),
                        events: std::mem::take(&mut current),
                    });
                }
            }
            current.push(event);
        }
        if !current.is_empty() {
            sessions.push(Session {
                user_id: user,
                events: current,
            });
        }
    }
    sessions
}

/// Collapse repeated views of the same product within a session to the first
/// occurrence.
///
/// A later recommendation click-through to a product already viewed in the
/// session is also dropped, which keeps per-session product counting
/// consistent and makes repeated same-edge click-throughs collapse as a
/// special case. Idempotent.
pub fn dedup_within_session(session: &Session) -> Session {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut events = Vec::with_capacity(session.events.len());
    for event in &session.events {
        if seen.insert(event.product_id.as_str()) {
            events.push(event.clone());
        }
    }
    Session {
        user_id: session.user_id.clone(),
        events,
    }
}

/// Users excluded by the bot, seller, and author rules.
///
/// Counts are taken over the raw sessions, independent of event order:
/// * bots: mean visits per study day strictly above the threshold (or any
///   single day above it, under [`BotRule::MaxSingleDay`]);
/// * sellers: strictly more than the limit of seller-marker visits;
/// * authors: at least one author-marker visit.
pub fn filter_users(
    sessions: &[Session],
    study_range: StudyRange,
    config: &IngestConfig,
) -> BTreeSet<String> {
    #[derive(Default)]
    struct UserStats {
        total: u64,
        per_day: HashMap<Day, u64>,
        seller_visits: u32,
        author_visits: u32,
    }
    let mut stats: HashMap<&str, UserStats> = HashMap::new();
    for session in sessions {
        let entry = stats.entry(session.user_id.as_str()).or_default();
        for event in &session.events {
            entry.total += 1;
            *entry.per_day.entry(event.day()).or_insert(0) += 1;
            if SELLER_MARKERS.contains(&event.category.as_str()) {
                entry.seller_visits += 1;
            }
            if AUTHOR_MARKERS.contains(&event.category.as_str()) {
                entry.author_visits += 1;
            }
        }
    }
    let days = study_range.num_days() as f64;
    let mut excluded = BTreeSet::new();
    for (user, s) in stats {
        let bot = match config.bot_rule {
            BotRule::MeanOverRange => s.total as f64 / days > config.bot_daily_visits,
            BotRule::MaxSingleDay => s
                .per_day
                .values()
                .any(|&n| n as f64 > config.bot_daily_visits),
        };
        if bot || s.seller_visits > config.seller_visit_limit || s.author_visits >= 1 {
            excluded.insert(user.to_string());
        }
    }
    excluded
}

/// Products excluded by the visit-count and category-size rules.
///
/// Products missing from the catalog are excluded and counted separately.
pub fn filter_products(
    series: &BTreeMap<String, DailyProductSeries>,
    catalog: &Catalog,
    config: &IngestConfig,
) -> ExcludedProducts {
    let mut out = ExcludedProducts::default();
    for (product, s) in series {
        if s.total_views() < config.min_product_visits {
            out.too_few_visits += 1;
            out.products.insert(product.clone());
            continue;
        }
        match catalog.category_of(product) {
            None => {
                out.missing_from_catalog += 1;
                out.products.insert(product.clone());
            }
            Some(category) => {
                if catalog.category_size(category) < config.min_category_size {
                    out.small_category += 1;
                    out.products.insert(product.clone());
                }
            }
        }
    }
    out
}
