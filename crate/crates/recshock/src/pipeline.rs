//! End-to-end composition: ingest -> series -> shocks -> estimates -> report.

use std::collections::BTreeMap;

use crate::estimator::{self, EstimatorConfig, NaiveScope, ShockEstimate, UserProfiles};
use crate::ingest::{self, IngestConfig, IngestError, IngestSummary};
use crate::schema::{
    AffinitySummary, BetaLevelReport, Catalog, DailyProductSeries, Day, EdgeSeries,
    EstimateReport, Shock, ShockEstimateRecord, StudyRange,
};
use crate::series;
use crate::shocks::{self, ShockCriteria};

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub ingest: IngestConfig,
    pub criteria: ShockCriteria,
    pub estimator: EstimatorConfig,
    /// Primary constancy level for the headline estimates.
    pub beta: f64,
    /// Ascending sweep grid; the per-beta report has one entry per point.
    pub beta_grid: Vec<f64>,
    /// Closed date range of shocks to drop before estimation.
    pub exclude_dates: Option<(Day, Day)>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            ingest: IngestConfig::default(),
            criteria: ShockCriteria::default(),
            estimator: EstimatorConfig::default(),
            beta: 0.7,
            beta_grid: default_beta_grid(),
            exclude_dates: None,
        }
    }
}

/// The grid used throughout: {0.0, 0.1, ..., 1.0}.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Everything a run produces, for report writers and tests.
#[derive(Debug)]
pub struct PipelineArtifacts {
    pub summary: IngestSummary,
    pub study_range: StudyRange,
    pub series: BTreeMap<String, DailyProductSeries>,
    pub edges: BTreeMap<(String, String), EdgeSeries>,
    pub shocks: Vec<Shock>,
    pub sweep: Vec<(f64, usize)>,
    pub estimates: Vec<ShockEstimate>,
    pub report: EstimateReport,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("beta must be in [0, 1], got {0}")]
    InvalidBeta(f64),
}

/// Run the whole pipeline over a log.
///
/// When no catalog is supplied one is derived from the log itself, which
/// disables the missing-from-catalog exclusion but keeps category sizes
/// meaningful.
pub fn run_pipeline(
    log_text: &str,
    catalog: Option<&Catalog>,
    options: &PipelineOptions,
) -> Result<PipelineArtifacts, PipelineError> {
    if !(0.0..=1.0).contains(&options.beta) {
        return Err(PipelineError::InvalidBeta(options.beta));
    }
    let (raw_events, mut summary) = ingest::parse_log(log_text, &options.ingest)?;
    if raw_events.is_empty() {
        return Err(IngestError::Empty.into());
    }
    let study_range = ingest::study_range_of(&raw_events).unwrap();
    summary.study_first_day = Some(study_range.first.to_string());
    summary.study_last_day = Some(study_range.last.to_string());

    let derived_catalog;
    let catalog = match catalog {
        Some(c) => c,
        None => {
            derived_catalog = Catalog::from_events(raw_events.iter());
            &derived_catalog
        }
    };

    let sessions = ingest::sessionize(raw_events, options.ingest.session_timeout_secs);
    let excluded_users = ingest::filter_users(&sessions, study_range, &options.ingest);
    summary.excluded_users = excluded_users.len() as u64;
    let mut retained_raw = 0u64;
    let mut deduped: Vec<_> = Vec::with_capacity(sessions.len());
    for session in &sessions {
        if excluded_users.contains(&session.user_id) {
            summary.events_from_excluded_users += session.events.len() as u64;
            continue;
        }
        retained_raw += session.events.len() as u64;
        deduped.push(ingest::dedup_within_session(session));
    }
    let after_dedup: u64 = deduped.iter().map(|s| s.events.len() as u64).sum();
    summary.events_removed_by_dedup = retained_raw - after_dedup;

    let mut product_series = series::build_product_series(&deduped, study_range);
    let mut edge_series = series::build_edge_series(&deduped, study_range);
    let excluded_products = ingest::filter_products(&product_series, catalog, &options.ingest);
    summary.excluded_products = excluded_products.products.len() as u64;
    product_series.retain(|product, _| !excluded_products.products.contains(product));
    edge_series.retain(|(focal, rec), _| {
        !excluded_products.products.contains(focal) && !excluded_products.products.contains(rec)
    });
    let retained_events: u64 = product_series
        .values()
        .map(|s| s.total_views() as u64)
        .sum();
    summary.retained_events = retained_events;

    let mut detected = shocks::detect_all_shocks(&product_series, &options.criteria);
    if let Some(range) = options.exclude_dates {
        detected = estimator::exclude_dates(detected, range);
    }
    let edges_by_focal = series::edges_by_focal(&edge_series);
    let sweep = shocks::sweep_beta(
        &mut detected,
        &edges_by_focal,
        &product_series,
        &options.beta_grid,
        &options.criteria,
    );

    let estimates = estimator::estimate_all(
        &detected,
        &edges_by_focal,
        &product_series,
        &options.estimator,
    );

    let report = build_report(
        &detected,
        &estimates,
        &sweep,
        &product_series,
        &deduped,
        options,
    );

    Ok(PipelineArtifacts {
        summary,
        study_range,
        series: product_series,
        edges: edge_series,
        shocks: detected,
        sweep,
        estimates,
        report,
    })
}

fn eligible_at(shock: &Shock, beta: f64) -> bool {
    // Grid entries are authoritative where present; off-grid levels fall
    // back to the continuous bound.
    shock
        .eligible_beta
        .iter()
        .find(|(b, _)| (b - beta).abs() < 1e-9)
        .map(|&(_, ok)| ok)
        .unwrap_or(shock.min_passing_beta >= beta)
}

fn build_report(
    detected: &[Shock],
    estimates: &[ShockEstimate],
    sweep: &[(f64, usize)],
    product_series: &BTreeMap<String, DailyProductSeries>,
    sessions: &[crate::schema::Session],
    options: &PipelineOptions,
) -> EstimateReport {
    let eligible: Vec<ShockEstimate> = detected
        .iter()
        .zip(estimates)
        .filter(|(shock, _)| eligible_at(shock, options.beta))
        .map(|(_, e)| e.clone())
        .collect();

    let per_beta: Vec<BetaLevelReport> = sweep
        .iter()
        .map(|&(beta, n)| {
            let level: Vec<ShockEstimate> = detected
                .iter()
                .zip(estimates)
                .filter(|(shock, _)| eligible_at(shock, beta))
                .map(|(_, e)| e.clone())
                .collect();
            let rho = estimator::aggregate_rho(&level, options.estimator.traffic_weighted);
            BetaLevelReport {
                beta,
                n_shocks: n,
                rho_mean: rho.map(|(m, _)| m),
                rho_se: rho.map(|(_, se)| se),
                lambda: estimator::estimate_lambda(&level),
            }
        })
        .collect();

    let rho = estimator::aggregate_rho(&eligible, options.estimator.traffic_weighted);
    let lambda = estimator::estimate_lambda(&eligible);
    let categories =
        estimator::category_rollup(&eligible, options.estimator.min_category_shocks);
    let naive_all_traffic = estimator::naive_estimate(NaiveScope::AllTraffic(product_series));
    let naive_shocked_outbound =
        estimator::naive_estimate(NaiveScope::ShockedOutbound(&eligible));

    let records: Vec<ShockEstimateRecord> = detected
        .iter()
        .zip(estimates)
        .map(|(shock, e)| ShockEstimateRecord {
            product_id: e.product_id.clone(),
            shock_day: e.shock_day,
            category: e.category.clone(),
            rho_i: e.rho_i,
            delta_v: e.delta_v,
            delta_r_total: e.delta_r_total,
            pre_v_total: e.pre_v_total,
            pre_r_total: e.pre_r_total,
            naive_rate: e.naive_rate,
            eligible_at_primary_beta: eligible_at(shock, options.beta),
            degenerate: e.degenerate,
            min_passing_beta: e.min_passing_beta,
            flags: e.flags,
        })
        .collect();

    let affinity = affinity_summary(detected, sessions, product_series, options.beta);

    EstimateReport {
        beta: options.beta,
        window_days: options.estimator.window_days,
        shocks_detected: detected.len(),
        shocks_eligible: eligible.len(),
        rho_mean: rho.map(|(m, _)| m),
        rho_se: rho.map(|(_, se)| se),
        lambda,
        per_beta,
        shocks: records,
        categories,
        naive_all_traffic,
        naive_shocked_outbound,
        affinity,
        excluded_dates: options.exclude_dates,
    }
}

/// Mean category affinity of shock-day visitors versus all visitors, over
/// the retained deduplicated events.
fn affinity_summary(
    detected: &[Shock],
    sessions: &[crate::schema::Session],
    product_series: &BTreeMap<String, DailyProductSeries>,
    beta: f64,
) -> AffinitySummary {
    let profiles = UserProfiles::build(
        sessions
            .iter()
            .flat_map(|s| s.events.iter())
            .filter(|e| product_series.contains_key(&e.product_id)),
    );
    let shock_days: std::collections::BTreeSet<(&str, Day)> = detected
        .iter()
        .filter(|s| eligible_at(s, beta))
        .map(|s| (s.product_id.as_str(), s.shock_day))
        .collect();

    let mut shock_sum = 0.0;
    let mut shock_n = 0u64;
    let mut all_sum = 0.0;
    let mut all_n = 0u64;
    for event in sessions.iter().flat_map(|s| s.events.iter()) {
        if !product_series.contains_key(&event.product_id) {
            continue;
        }
        let Some(affinity) = profiles.affinity(&event.user_id, &event.category) else {
            continue;
        };
        all_sum += affinity;
        all_n += 1;
        if shock_days.contains(&(event.product_id.as_str(), event.day())) {
            shock_sum += affinity;
            shock_n += 1;
        }
    }
    AffinitySummary {
        shock_visit_mean: (shock_n > 0).then(|| shock_sum / shock_n as f64),
        overall_mean: (all_n > 0).then(|| all_sum / all_n as f64),
        shock_visits: shock_n,
        overall_visits: all_n,
    }
}

/// Figure CSV: `beta,n_shocks,rho_mean,rho_se`.
pub fn write_rho_vs_beta_csv(report: &EstimateReport) -> String {
    let mut out = String::from("beta,n_shocks,rho_mean,rho_se\n");
    for level in &report.per_beta {
        out.push_str(&format!(
            "{:.2},{},{},{}\n",
            level.beta,
            level.n_shocks,
            render_opt(level.rho_mean),
            render_opt(level.rho_se),
        ));
    }
    out
}

/// Figure CSV: `beta,n_shocks,lambda`.
pub fn write_lambda_vs_beta_csv(report: &EstimateReport) -> String {
    let mut out = String::from("beta,n_shocks,lambda\n");
    for level in &report.per_beta {
        out.push_str(&format!(
            "{:.2},{},{}\n",
            level.beta,
            level.n_shocks,
            render_opt(level.lambda)
        ));
    }
    out
}

/// Figure CSV: `category,n_shocks,mean_rho,naive_rate`.
pub fn write_category_rollup_csv(report: &EstimateReport) -> String {
    let mut out = String::from("category,n_shocks,mean_rho,naive_rate\n");
    for rollup in &report.categories {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            rollup.category,
            rollup.n_shocks,
            rollup.mean_rho,
            render_opt(rollup.naive_rate)
        ));
    }
    out
}

/// Half-decade histogram buckets used by both shock histograms.
const HIST_BUCKETS: [u32; 10] = [1, 2, 5, 10, 25, 50, 100, 250, 500, 1000];

fn histogram_csv(values: impl Iterator<Item = u32>, value_label: &str) -> String {
    let mut counts = vec![0u64; HIST_BUCKETS.len() + 1];
    for value in values {
        let slot = HIST_BUCKETS
            .iter()
            .position(|&hi| value < hi)
            .unwrap_or(HIST_BUCKETS.len());
        counts[slot] += 1;
    }
    let mut out = format!("bucket_lo,bucket_hi,{value_label}\n");
    let mut lo = 0u32;
    for (slot, &count) in counts.iter().enumerate() {
        if slot < HIST_BUCKETS.len() {
            out.push_str(&format!("{lo},{},{count}\n", HIST_BUCKETS[slot]));
            lo = HIST_BUCKETS[slot];
        } else {
            out.push_str(&format!("{lo},inf,{count}\n"));
        }
    }
    out
}

/// Figure CSV: shock-day view distribution over eligible shocks.
pub fn write_shock_size_histogram_csv(report: &EstimateReport, shocks: &[Shock]) -> String {
    let eligible: std::collections::BTreeSet<(&str, Day)> = report
        .shocks
        .iter()
        .filter(|r| r.eligible_at_primary_beta)
        .map(|r| (r.product_id.as_str(), r.shock_day))
        .collect();
    histogram_csv(
        shocks
            .iter()
            .filter(|s| eligible.contains(&(s.product_id.as_str(), s.shock_day)))
            .map(|s| s.v_shock),
        "n_shocks",
    )
}

/// Figure CSV: shock-day outgoing click-through distribution.
pub fn write_clickthrough_histogram_csv(report: &EstimateReport) -> String {
    histogram_csv(
        report
            .shocks
            .iter()
            .filter(|r| r.eligible_at_primary_beta)
            .map(|r| {
                // Shock-day clicks: baseline + delta, per edge, rounded back
                // to the observed integer count.
                (r.delta_r_total + (r.pre_r_total as f64 / report.window_days as f64))
                    .round()
                    .max(0.0) as u32
            }),
        "n_shocks",
    )
}

fn render_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}
