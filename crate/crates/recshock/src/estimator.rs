//! Causal click-through estimation: per-shock Wald ratios, the aggregate
//! causal fraction, naive comparisons, and category rollups.
//!
//! Per shock, the discrete change in each outgoing click-through series is
//! divided by the change in focal views, both measured against the mean of a
//! pre-shock window (one week by default):
//!
//! ```text
//! rho_i = sum_j (r_{ij,t*} - baseline_r_ij) / (v_{i,t*} - baseline_v_i)
//! ```
//!
//! The aggregate causal fraction divides the causal upper bound on pre-shock
//! clicks by the clicks actually observed, summing across shocks before
//! dividing so products with no pre-shock click-throughs contribute without
//! producing infinities:
//!
//! ```text
//! lambda = sum_i rho_i * pre_v_i / sum_i pre_r_i
//! ```
//!
//! Values above 1 are possible numerically and are reported unclamped.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::schema::{
    CategoryRollup, ClickEvent, DailyProductSeries, Day, EdgeSeries, Shock, ShockEstimateRecord,
    ShockFlags,
};

/// Statistic used for the pre-shock baseline of each series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineStat {
    Mean,
    /// Lower median of the window's daily values.
    Median,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    /// Baseline window length W in days; the window is [t* - W, t*).
    pub window_days: u32,
    pub baseline_stat: BaselineStat,
    /// Weight per-shock estimates by their view change instead of equally.
    pub traffic_weighted: bool,
    /// Categories with fewer shocks than this merge into "other".
    pub min_category_shocks: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window_days: 7,
            baseline_stat: BaselineStat::Mean,
            traffic_weighted: false,
            min_category_shocks: 3,
        }
    }
}

/// Change in one outgoing edge around the shock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDelta {
    pub recommended_product_id: String,
    pub r_shock: u32,
    pub r_baseline: f64,
    /// `r_shock - r_baseline`; negative values are kept.
    pub delta_r: f64,
}

/// Per-shock estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockEstimate {
    pub product_id: String,
    pub shock_day: Day,
    pub category: String,
    /// Change in focal views against the pre-window baseline.
    pub delta_v: f64,
    pub per_edge: Vec<EdgeDelta>,
    pub delta_r_total: f64,
    /// Wald ratio, summed over out-edges.
    pub rho_i: f64,
    /// Focal views over [t* - W, t*).
    pub pre_v_total: u64,
    /// Outgoing click-throughs over [t* - W, t*).
    pub pre_r_total: u64,
    /// Pre-shock outbound conversion rate.
    pub naive_rate: Option<f64>,
    /// Non-positive view change; excluded from every aggregate. Cannot occur
    /// when the shock criteria hold at the same window length.
    pub degenerate: bool,
    pub min_passing_beta: f64,
    pub flags: ShockFlags,
}

fn baseline(values: &[u32], stat: BaselineStat) -> f64 {
    match stat {
        BaselineStat::Mean => values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64,
        BaselineStat::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable();
            sorted[(sorted.len() - 1) / 2] as f64
        }
    }
}

/// Estimate the causal click-through rate of one shock from its focal series
/// and outgoing edges.
pub fn estimate_rho(
    shock: &Shock,
    out_edges: &[&EdgeSeries],
    focal_series: &DailyProductSeries,
    config: &EstimatorConfig,
) -> ShockEstimate {
    let w = config.window_days as i32;
    let window: Vec<Day> = (1..=w).rev().map(|k| shock.shock_day.offset(-k)).collect();

    let v_window: Vec<u32> = window.iter().map(|&d| focal_series.views(d)).collect();
    let baseline_v = baseline(&v_window, config.baseline_stat);
    let delta_v = shock.v_shock as f64 - baseline_v;
    let pre_v_total: u64 = v_window.iter().map(|&v| v as u64).sum();

    let mut per_edge = Vec::with_capacity(out_edges.len());
    let mut delta_r_total = 0.0;
    let mut pre_r_total = 0u64;
    for edge in out_edges {
        let r_window: Vec<u32> = window.iter().map(|&d| edge.clicks(d)).collect();
        let r_baseline = baseline(&r_window, config.baseline_stat);
        let r_shock = edge.clicks(shock.shock_day);
        let delta_r = r_shock as f64 - r_baseline;
        pre_r_total += r_window.iter().map(|&r| r as u64).sum::<u64>();
        delta_r_total += delta_r;
        per_edge.push(EdgeDelta {
            recommended_product_id: edge.recommended_product_id.clone(),
            r_shock,
            r_baseline,
            delta_r,
        });
    }

    let degenerate = delta_v <= 0.0;
    let rho_i = if degenerate { 0.0 } else { delta_r_total / delta_v };
    debug_assert!(rho_i.is_finite());
    ShockEstimate {
        product_id: shock.product_id.clone(),
        shock_day: shock.shock_day,
        category: focal_series.category.clone(),
        delta_v,
        per_edge,
        delta_r_total,
        rho_i,
        pre_v_total,
        pre_r_total,
        naive_rate: if pre_v_total > 0 {
            Some(pre_r_total as f64 / pre_v_total as f64)
        } else {
            None
        },
        degenerate,
        min_passing_beta: shock.min_passing_beta,
        flags: shock.flags,
    }
}

/// Estimate every shock in parallel, in input order.
pub fn estimate_all(
    shocks: &[Shock],
    edges_by_focal: &BTreeMap<String, Vec<&EdgeSeries>>,
    series: &BTreeMap<String, DailyProductSeries>,
    config: &EstimatorConfig,
) -> Vec<ShockEstimate> {
    let empty: Vec<&EdgeSeries> = Vec::new();
    shocks
        .par_iter()
        .map(|shock| {
            let out_edges = edges_by_focal.get(&shock.product_id).unwrap_or(&empty);
            let focal = series
                .get(&shock.product_id)
                .expect("shock product must have a series");
            estimate_rho(shock, out_edges, focal, config)
        })
        .collect()
}

/// Unweighted mean of per-shock rates with its standard error (sample
/// standard deviation over the square root of n; 0 for a single shock).
/// Degenerate estimates are skipped. `None` on no data.
pub fn aggregate_rho(estimates: &[ShockEstimate], traffic_weighted: bool) -> Option<(f64, f64)> {
    let kept: Vec<&ShockEstimate> = estimates.iter().filter(|e| !e.degenerate).collect();
    if kept.is_empty() {
        return None;
    }
    let n = kept.len() as f64;
    if traffic_weighted {
        let total_weight: f64 = kept.iter().map(|e| e.delta_v).sum();
        let mean = kept.iter().map(|e| e.rho_i * e.delta_v).sum::<f64>() / total_weight;
        let var = kept
            .iter()
            .map(|e| (e.delta_v / total_weight).powi(2) * (e.rho_i - mean).powi(2))
            .sum::<f64>();
        return Some((mean, var.sqrt()));
    }
    let mean = kept.iter().map(|e| e.rho_i).sum::<f64>() / n;
    if kept.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = kept.iter().map(|e| (e.rho_i - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Aggregate causal fraction over the pre-shock windows.
///
/// Shocks whose pre-shock click total is zero still contribute their
/// numerator; nothing is divided per shock. `None` when the pooled
/// denominator is zero.
pub fn estimate_lambda(estimates: &[ShockEstimate]) -> Option<f64> {
    let mut numerator = 0.0;
    let mut denominator = 0u64;
    for e in estimates.iter().filter(|e| !e.degenerate) {
        numerator += e.rho_i * e.pre_v_total as f64;
        denominator += e.pre_r_total;
    }
    if denominator == 0 {
        return None;
    }
    Some(numerator / denominator as f64)
}

/// Scope of the naive (click-counting) estimate.
pub enum NaiveScope<'a> {
    /// Fraction of all inbound traffic arriving through recommendations of
    /// any type: `sum(v - d) / sum(v)` over every retained product-day.
    AllTraffic(&'a BTreeMap<String, DailyProductSeries>),
    /// Mean pre-shock outbound conversion rate over the given shocks.
    ShockedOutbound(&'a [ShockEstimate]),
}

/// The estimate one would report by merely counting recommendation clicks.
pub fn naive_estimate(scope: NaiveScope<'_>) -> Option<f64> {
    match scope {
        NaiveScope::AllTraffic(series) => {
            let mut views = 0u64;
            let mut direct = 0u64;
            for s in series.values() {
                for counts in s.days.values() {
                    views += counts.views as u64;
                    direct += counts.direct as u64;
                }
            }
            if views == 0 {
                return None;
            }
            Some((views - direct) as f64 / views as f64)
        }
        NaiveScope::ShockedOutbound(estimates) => {
            let rates: Vec<f64> = estimates
                .iter()
                .filter(|e| !e.degenerate)
                .filter_map(|e| e.naive_rate)
                .collect();
            if rates.is_empty() {
                return None;
            }
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }
}

/// Group estimates by category: shock count, mean causal rate, and mean
/// naive conversion rate. Categories with fewer shocks than the configured
/// minimum merge into "other". Sorted by shock count (descending), then
/// name.
pub fn category_rollup(
    estimates: &[ShockEstimate],
    min_category_shocks: usize,
) -> Vec<CategoryRollup> {
    let mut groups: BTreeMap<&str, Vec<&ShockEstimate>> = BTreeMap::new();
    for e in estimates.iter().filter(|e| !e.degenerate) {
        groups.entry(e.category.as_str()).or_default().push(e);
    }
    let mut named = Vec::new();
    let mut other: Vec<&ShockEstimate> = Vec::new();
    for (category, members) in groups {
        if members.len() < min_category_shocks {
            other.extend(members);
        } else {
            named.push((category.to_string(), members));
        }
    }
    if !other.is_empty() {
        named.push(("other".to_string(), other));
    }
    let mut out: Vec<CategoryRollup> = named
        .into_iter()
        .map(|(category, members)| {
            let n = members.len();
            let mean_rho = members.iter().map(|e| e.rho_i).sum::<f64>() / n as f64;
            let rates: Vec<f64> = members.iter().filter_map(|e| e.naive_rate).collect();
            let naive_rate = if rates.is_empty() {
                None
            } else {
                Some(rates.iter().sum::<f64>() / rates.len() as f64)
            };
            CategoryRollup {
                category,
                n_shocks: n,
                mean_rho,
                naive_rate,
            }
        })
        .collect();
    out.sort_by(|a, b| b.n_shocks.cmp(&a.n_shocks).then(a.category.cmp(&b.category)));
    out
}

/// Remove shocks whose shock day falls inside the closed date range.
pub fn exclude_dates(shocks: Vec<Shock>, range: (Day, Day)) -> Vec<Shock> {
    let (start, end) = range;
    shocks
        .into_iter()
        .filter(|s| s.shock_day < start || s.shock_day > end)
        .collect()
}

/// Per-user pageview distribution over categories, for affinity scoring.
#[derive(Debug, Clone, Default)]
pub struct UserProfiles {
    per_user: BTreeMap<String, (BTreeMap<String, u64>, u64)>,
}

impl UserProfiles {
    /// Build profiles from the retained, deduplicated events.
    pub fn build<'a, I: IntoIterator<Item = &'a ClickEvent>>(events: I) -> UserProfiles {
        let mut profiles = UserProfiles::default();
        for event in events {
            let entry = profiles
                .per_user
                .entry(event.user_id.clone())
                .or_default();
            *entry.0.entry(event.category.clone()).or_insert(0) += 1;
            entry.1 += 1;
        }
        profiles
    }

    /// Fraction of the user's pageviews that fall in the category.
    /// `None` for users with no history.
    pub fn affinity(&self, user_id: &str, category: &str) -> Option<f64> {
        let (per_category, total) = self.per_user.get(user_id)?;
        if *total == 0 {
            return None;
        }
        Some(*per_category.get(category).unwrap_or(&0) as f64 / *total as f64)
    }
}
