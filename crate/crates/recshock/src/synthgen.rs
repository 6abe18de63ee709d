//! Synthetic clickstream generation with ground truth.
//!
//! The generator makes the causal model executable. Per day `t` and edge
//! `(i, j)` it draws latent demands `u_it`, `u_jt` (optionally correlated and
//! noisy), materializes counts
//!
//! ```text
//! v_it  ~ Poisson(u_it + shock magnitude on scheduled days)
//! d_jt  ~ Poisson(u_jt)                    (+ burst for correlated shocks)
//! v'_it ~ Poisson(gamma_ij * u_jt)          capped at v_it
//! r_ijt = Binomial(v_it - v'_it, rho_ij) + Binomial(v'_it, sigma_ij)
//! ```
//!
//! and then emits every count as individual user events in the canonical log
//! schema, with a ground-truth sidecar recording the latent quantities and
//! the causal/convenience split of every click. Identical config and seed
//! produce byte-identical output.
//!
//! By default every synthetic user is a fresh single-session identity, which
//! makes session deduplication a no-op and keeps the sidecar accounting
//! exact. Repeat-visitor mode layers removable traffic on top: duplicate
//! views, a recurring-visitor pool, and bot/seller/author decoys that the
//! ingest filters must strip away exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::ingest::{self, IngestConfig};
use crate::schema::{ClickEvent, Day, GeneratorConfig, ReferrerClass};
use crate::series;

/// Ground-truth type of a scheduled shock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockLabel {
    /// Recommended-product demand stays flat through the shock.
    ConstantDemand,
    /// Recommended-product demand bursts alongside the focal shock.
    CorrelatedDemand,
}

/// One scheduled traffic burst.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledShock {
    pub focal_index: u32,
    pub day_index: u32,
    pub magnitude: f64,
    pub label: ShockLabel,
}

/// One sidecar line: the latent state and click decomposition of one
/// (edge, day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDayTruth {
    pub focal: String,
    pub rec: String,
    /// ISO date.
    pub day: String,
    pub u_focal: f64,
    pub u_rec: f64,
    pub v_focal: u32,
    pub d_rec: u32,
    /// Convenience views v': focal visits that correspond to latent demand
    /// for the recommended product.
    pub v_conv: u32,
    pub causal: u32,
    pub convenience: u32,
    pub rho: f64,
    pub sigma: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shock: Option<ShockLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

impl EdgeDayTruth {
    pub fn clicks(&self) -> u32 {
        self.causal + self.convenience
    }

    pub fn day(&self) -> Day {
        Day::parse(&self.day).expect("sidecar days are ISO dates")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("config: {0}")]
    Config(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("ground truth line {line}: {message}")]
    Truth { line: usize, message: String },
    #[error("log: {0}")]
    Log(String),
}

/// Everything one generation run produces.
#[derive(Debug, Clone)]
pub struct GeneratedOutput {
    /// Newline-delimited JSON events in the canonical log schema.
    pub events_ndjson: String,
    /// Newline-delimited JSON ground-truth sidecar, one line per (edge, day).
    pub truth_ndjson: String,
    /// `product_id,category` catalog covering every generated product.
    pub catalog_csv: String,
    pub schedule: Vec<ScheduledShock>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for (seed, lane, stream).
fn derive_rng(seed: u64, lane: u64, stream: u64) -> ChaCha12Rng {
    let mut state = seed ^ lane.wrapping_mul(0xA076_1D64_78BD_642F) ^ stream.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(bytes)
}

fn poisson(rng: &mut ChaCha12Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u32
}

fn binomial(rng: &mut ChaCha12Rng, n: u32, p: f64) -> u32 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p).expect("valid rate").sample(rng) as u32
}

fn uniform_in(rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Build the shock schedule: explicit entries if given, otherwise shocks
/// spread round-robin over focal products and across the usable day range.
/// Correlated labels are assigned by exact proportion in schedule order.
pub fn build_schedule(config: &GeneratorConfig) -> Result<Vec<ScheduledShock>, GenError> {
    let mut rng = derive_rng(config.seed, u64::MAX, 2);
    let mut draw_magnitude = |rng: &mut ChaCha12Rng| {
        let (lo, hi) = config.shock_magnitude;
        if config.magnitude_log_uniform {
            (uniform_in(rng, (lo.ln(), hi.ln()))).exp()
        } else {
            uniform_in(rng, (lo, hi))
        }
    };
    let mut labelled = |index: u64, shock: ScheduledShock| {
        let f = config.correlated_fraction;
        let correlated = ((index + 1) as f64 * f).floor() > (index as f64 * f).floor();
        ScheduledShock {
            label: if correlated {
                ShockLabel::CorrelatedDemand
            } else {
                ShockLabel::ConstantDemand
            },
            ..shock
        }
    };

    if !config.explicit_shocks.is_empty() {
        return Ok(config
            .explicit_shocks
            .iter()
            .enumerate()
            .map(|(s, &(focal_index, day_index, magnitude))| {
                labelled(
                    s as u64,
                    ScheduledShock {
                        focal_index,
                        day_index,
                        magnitude,
                        label: ShockLabel::ConstantDemand,
                    },
                )
            })
            .collect());
    }

    let rounds = (config.shocks.saturating_sub(1)) / config.n_products;
    let spread = config.n_days as i64 - 17 - 16 * rounds as i64;
    if config.shocks > 0 && spread < 1 {
        return Err(GenError::Config(format!(
            "{} days cannot hold {} shocks over {} products; add days or drop shocks",
            config.n_days, config.shocks, config.n_products
        )));
    }
    let spread = spread as u64;
    let mut schedule = Vec::with_capacity(config.shocks as usize);
    for s in 0..config.shocks as u64 {
        let product = (s % config.n_products as u64) as u32;
        let round = (s / config.n_products as u64) as u32;
        let day_index = 8 + (product as u64 * 7919 % spread) as u32 + 16 * round;
        schedule.push(labelled(
            s,
            ScheduledShock {
                focal_index: product,
                day_index,
                magnitude: draw_magnitude(&mut rng),
                label: ShockLabel::ConstantDemand,
            },
        ));
    }
    Ok(schedule)
}

const DIRECT_CODES: [&str; 5] = ["sr_1_1", "nb_sb_noss_1", "sr_1_2", "cart_w", "ext_site"];

struct EventSink {
    lines: String,
}

impl EventSink {
    fn push(&mut self, ts: i64, user: &str, product: &str, category: &str, referrer: &str, src: Option<&str>) {
        let (class, _) = crate::referrer::classify_referrer(referrer);
        let event = ClickEvent {
            timestamp: ts,
            user_id: user.to_string(),
            product_id: product.to_string(),
            category: category.to_string(),
            referrer_raw: referrer.to_string(),
            referrer_class: class,
            source_product_id: src.map(str::to_string),
        };
        self.lines.push_str(&crate::schema::format_event_line(&event));
        self.lines.push('\n');
    }
}

/// Generate a log, its ground-truth sidecar, and a covering catalog.
pub fn generate(config: &GeneratorConfig) -> Result<GeneratedOutput, GenError> {
    config.validate().map_err(GenError::Config)?;
    let schedule = build_schedule(config)?;
    let mut shocks_by_focal: BTreeMap<u32, Vec<&ScheduledShock>> = BTreeMap::new();
    for shock in &schedule {
        shocks_by_focal.entry(shock.focal_index).or_default().push(shock);
    }

    let recs = config.recs_per_focal;
    let product_id = |index: u32| format!("p{index:06}");
    let category_of = |group: u32| format!("cat_{:02}", group % config.n_categories);

    let mut events = EventSink {
        lines: String::new(),
    };
    let mut truth = String::new();
    let mut catalog = String::from("product_id,category\n");

    for group in 0..config.n_products {
        let focal_id = product_id(group * (recs + 1));
        let category = category_of(group);
        catalog.push_str(&format!("{focal_id},{category}\n"));
        for k in 0..recs {
            catalog.push_str(&format!("{},{category}\n", product_id(group * (recs + 1) + 1 + k)));
        }

        let mut params_rng = derive_rng(config.seed, group as u64, 0);
        let base_u_focal = uniform_in(&mut params_rng, config.focal_demand);
        let rho_range = config
            .category_rho
            .get(&(group % config.n_categories))
            .copied()
            .unwrap_or(config.rho);
        let mut edges = Vec::with_capacity(recs as usize);
        for k in 0..recs {
            let rec_id = product_id(group * (recs + 1) + 1 + k);
            edges.push((
                rec_id,
                uniform_in(&mut params_rng, config.rec_demand),
                uniform_in(&mut params_rng, rho_range),
                uniform_in(&mut params_rng, config.sigma),
                uniform_in(&mut params_rng, config.gamma),
            ));
        }

        let mut day_rng = derive_rng(config.seed, group as u64, 1);
        let group_shocks = shocks_by_focal.get(&group);
        for t in 0..config.n_days {
            let day = config.start_date.offset(t as i32);
            let day_start = day.start_timestamp();
            let shock_today = group_shocks
                .and_then(|list| list.iter().find(|s| s.day_index == t))
                .copied();

            let seasonal = match config.seasonal_days {
                Some((lo, hi)) if t >= lo && t <= hi => config.seasonal_boost,
                _ => 1.0,
            };
            // Correlated lognormal day factors with unit mean.
            let (focal_factor, rec_factors): (f64, Vec<f64>) = if config.demand_noise > 0.0 {
                let normal = Normal::new(0.0, 1.0).unwrap();
                let shared: f64 = normal.sample(&mut day_rng);
                let shift = config.demand_noise * config.demand_noise / 2.0;
                let mix = |shared: f64, own: f64| {
                    (config.demand_noise
                        * (config.kappa.sqrt() * shared + (1.0 - config.kappa).sqrt() * own)
                        - shift)
                        .exp()
                };
                let own_focal: f64 = normal.sample(&mut day_rng);
                let focal_factor = mix(shared, own_focal);
                let rec_factors = (0..recs)
                    .map(|_| mix(shared, normal.sample(&mut day_rng)))
                    .collect();
                (focal_factor, rec_factors)
            } else {
                (1.0, vec![1.0; recs as usize])
            };

            let u_focal = base_u_focal * seasonal * focal_factor;
            let magnitude = shock_today.map(|s| s.magnitude).unwrap_or(0.0);
            let v_focal = poisson(&mut day_rng, u_focal + magnitude);

            // Focal viewers: fresh single-session identities, except that in
            // repeat-visitor mode one group per day draws its first viewers
            // from the recurring pool (each pool user gets at most one slot
            // per day, so accounting stays exact).
            let pool_slots = if config.repeat_visitors
                && config.n_users > 0
                && group as u64 == t as u64 % config.n_products as u64
            {
                config.n_users.min(v_focal)
            } else {
                0
            };
            let viewer_name = |idx: u32| {
                if idx < pool_slots {
                    format!("r{idx}")
                } else {
                    format!("fu{group}d{t}n{idx}")
                }
            };
            for idx in 0..v_focal {
                let ts = day_start + 36_000 + idx as i64 * 17;
                events.push(
                    ts,
                    &viewer_name(idx),
                    &focal_id,
                    &category,
                    DIRECT_CODES[idx as usize % DIRECT_CODES.len()],
                    None,
                );
                if config.repeat_visitors && idx == 0 && (group + t) % 7 == 0 {
                    // Removable duplicate: same user, same product, same
                    // session.
                    events.push(
                        ts + 5,
                        &viewer_name(idx),
                        &focal_id,
                        &category,
                        DIRECT_CODES[idx as usize % DIRECT_CODES.len()],
                        None,
                    );
                }
            }

            for (k, (rec_id, base_u_rec, rho, sigma, gamma)) in edges.iter().enumerate() {
                let burst = match shock_today {
                    Some(s) if s.label == ShockLabel::CorrelatedDemand => {
                        s.magnitude * config.correlated_burst_ratio
                    }
                    _ => 0.0,
                };
                let u_rec = base_u_rec * seasonal * rec_factors[k] + burst;
                let d_rec = poisson(&mut day_rng, u_rec);
                let v_conv = poisson(&mut day_rng, gamma * u_rec).min(v_focal);
                let causal = binomial(&mut day_rng, v_focal - v_conv, *rho);
                let convenience = binomial(&mut day_rng, v_conv, *sigma);

                // Convenience clickers come from the convenience pool
                // [0, v_conv); causal clickers from the rest.
                let rec_code = format!("pd_sim_b_{}", k + 1);
                for c in 0..convenience {
                    let ts = day_start + 36_000 + c as i64 * 17 + 47 + k as i64;
                    events.push(ts, &viewer_name(c), rec_id, &category, &rec_code, Some(&focal_id));
                }
                for c in 0..causal {
                    let idx = v_conv + c;
                    let ts = day_start + 36_000 + idx as i64 * 17 + 47 + k as i64;
                    events.push(ts, &viewer_name(idx), rec_id, &category, &rec_code, Some(&focal_id));
                }
                for idx in 0..d_rec {
                    let ts = day_start + 43_200 + idx as i64 * 17 + k as i64;
                    events.push(
                        ts,
                        &format!("ru{group}d{t}k{k}n{idx}"),
                        rec_id,
                        &category,
                        DIRECT_CODES[idx as usize % DIRECT_CODES.len()],
                        None,
                    );
                }

                let record = EdgeDayTruth {
                    focal: focal_id.clone(),
                    rec: rec_id.clone(),
                    day: day.to_string(),
                    u_focal,
                    u_rec,
                    v_focal,
                    d_rec,
                    v_conv,
                    causal,
                    convenience,
                    rho: *rho,
                    sigma: *sigma,
                    gamma: *gamma,
                    shock: shock_today.map(|s| s.label),
                    magnitude: shock_today.map(|s| s.magnitude),
                };
                writeln!(
                    truth,
                    "{}",
                    serde_json::to_string(&record).expect("truth serialization cannot fail")
                )
                .unwrap();
            }
        }
    }

    if config.repeat_visitors {
        emit_decoys(config, &mut events);
    }

    Ok(GeneratedOutput {
        events_ndjson: events.lines,
        truth_ndjson: truth,
        catalog_csv: catalog,
        schedule,
    })
}

/// Traffic the ingest filters must remove exactly: a seller account, an
/// author account, and a bot above the daily-average threshold.
fn emit_decoys(config: &GeneratorConfig, events: &mut EventSink) {
    let day0 = config.start_date.start_timestamp();
    for k in 0..6 {
        events.push(day0 + 3_000 + k * 60, "seller_decoy", "seller_portal", "sellercentral", "cart_w", None);
    }
    events.push(day0 + 3_000, "author_decoy", "author_portal", "kdp", "cart_w", None);
    // Mean strictly above the threshold: 100 per day plus one extra visit.
    for t in 0..config.n_days {
        let start = config.start_date.offset(t as i32).start_timestamp() + 3_600;
        let n = if t == 0 { 101 } else { 100 };
        for k in 0..n {
            events.push(start + k as i64 * 20, "bot_decoy", "bot_magnet", "cat_00", "sr_1_1", None);
        }
    }
}

/// Parse the flat `key = value` generator config format.
///
/// `#` starts a comment; ranges are `low,high` pairs (a single number means
/// a degenerate range); `shock = focal,day,magnitude` lines append explicit
/// schedule entries; `rho_category_<k>` overrides the rho range of one
/// category. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<GeneratorConfig, GenError> {
    let mut config = GeneratorConfig::default();
    for (number, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| GenError::ConfigParse {
            line: number + 1,
            message,
        };
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected key = value, got {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(err(format!("empty value for {key}")));
        }

        fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid number {value:?}"))
        }
        fn range(value: &str) -> Result<(f64, f64), String> {
            match value.split_once(',') {
                Some((lo, hi)) => Ok((num(lo.trim())?, num(hi.trim())?)),
                None => {
                    let x: f64 = num(value)?;
                    Ok((x, x))
                }
            }
        }

        match key {
            "seed" => config.seed = num(value).map_err(err)?,
            "products" => config.n_products = num(value).map_err(err)?,
            "recs_per_focal" => config.recs_per_focal = num(value).map_err(err)?,
            "users" => config.n_users = num(value).map_err(err)?,
            "days" => config.n_days = num(value).map_err(err)?,
            "categories" => config.n_categories = num(value).map_err(err)?,
            "start_date" => {
                config.start_date =
                    Day::parse(value).map_err(|e| err(e.to_string()))?
            }
            "focal_demand" => config.focal_demand = range(value).map_err(err)?,
            "rec_demand" => config.rec_demand = range(value).map_err(err)?,
            "demand_noise" => config.demand_noise = num(value).map_err(err)?,
            "kappa" => config.kappa = num(value).map_err(err)?,
            "rho" => config.rho = range(value).map_err(err)?,
            "sigma" => config.sigma = range(value).map_err(err)?,
            "gamma" => config.gamma = range(value).map_err(err)?,
            "shocks" => config.shocks = num(value).map_err(err)?,
            "shock_magnitude" => config.shock_magnitude = range(value).map_err(err)?,
            "magnitude_dist" => match value {
                "uniform" => config.magnitude_log_uniform = false,
                "loguniform" => config.magnitude_log_uniform = true,
                other => return Err(err(format!("magnitude_dist must be uniform or loguniform, got {other:?}"))),
            },
            "correlated_fraction" => config.correlated_fraction = num(value).map_err(err)?,
            "correlated_burst_ratio" => config.correlated_burst_ratio = num(value).map_err(err)?,
            "seasonal_boost" => config.seasonal_boost = num(value).map_err(err)?,
            "seasonal_days" => {
                let (lo, hi) = range(value).map_err(err)?;
                config.seasonal_days = Some((lo as u32, hi as u32));
            }
            "repeat_visitors" => match value {
                "true" => config.repeat_visitors = true,
                "false" => config.repeat_visitors = false,
                other => return Err(err(format!("repeat_visitors must be true or false, got {other:?}"))),
            },
            "shock" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(err("shock entries are focal,day,magnitude".into()));
                }
                config.explicit_shocks.push((
                    num(parts[0]).map_err(&err)?,
                    num(parts[1]).map_err(&err)?,
                    num(parts[2]).map_err(&err)?,
                ));
            }
            _ if key.starts_with("rho_category_") => {
                let index: u32 = num(&key["rho_category_".len()..]).map_err(&err)?;
                config.category_rho.insert(index, range(value).map_err(err)?);
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    config.validate().map_err(GenError::Config)?;
    Ok(config)
}

/// Parse a ground-truth sidecar.
pub fn parse_truth(text: &str) -> Result<Vec<EdgeDayTruth>, GenError> {
    let mut records = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EdgeDayTruth = serde_json::from_str(line).map_err(|e| GenError::Truth {
            line: number + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Outcome of an accounting check, with per-day differences when it fails.
#[derive(Debug, Clone)]
pub struct AccountingReport {
    pub ok: bool,
    pub product_days_checked: usize,
    pub edge_days_checked: usize,
    pub mismatches: Vec<String>,
}

impl AccountingReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.ok {
            writeln!(
                out,
                "accounting ok: {} product-days, {} edge-days",
                self.product_days_checked, self.edge_days_checked
            )
            .unwrap();
        } else {
            writeln!(out, "accounting FAILED ({} differences):", self.mismatches.len()).unwrap();
            for line in self.mismatches.iter().take(50) {
                writeln!(out, "  {line}").unwrap();
            }
            if self.mismatches.len() > 50 {
                writeln!(out, "  ... and {} more", self.mismatches.len() - 50).unwrap();
            }
        }
        out
    }
}

/// Check a log against its sidecar.
///
/// The log is taken through sessionization, deduplication, and the user
/// filters (the measurement path; product/category filters do not apply, so
/// small products still verify). The reconstructed per-day counts must equal
/// the sidecar's, satisfy `v = d + sum of inbound r` on every product-day,
/// and split every edge count into `causal + convenience` exactly.
pub fn verify_accounting(log_text: &str, truth_text: &str) -> Result<AccountingReport, GenError> {
    let truth = parse_truth(truth_text)?;
    let ingest_config = IngestConfig::default();
    let (raw_events, _) = ingest::parse_log(log_text, &ingest_config)
        .map_err(|e| GenError::Log(e.to_string()))?;
    if raw_events.is_empty() {
        return Err(GenError::Log("log contains no events".into()));
    }
    let study_range = ingest::study_range_of(&raw_events).unwrap();
    let sessions = ingest::sessionize(raw_events, ingest_config.session_timeout_secs);
    let excluded = ingest::filter_users(&sessions, study_range, &ingest_config);
    let sessions: Vec<_> = sessions
        .into_iter()
        .filter(|s| !excluded.contains(&s.user_id))
        .map(|s| ingest::dedup_within_session(&s))
        .collect();
    let product_series = series::build_product_series(&sessions, study_range);
    let edge_series = series::build_edge_series(&sessions, study_range);

    let mut mismatches = Vec::new();
    let mut product_days = 0usize;
    let mut edge_days = 0usize;

    // Expected counts from the sidecar.
    let mut expected_v: BTreeMap<(&str, Day), u32> = BTreeMap::new();
    let mut expected_d: BTreeMap<(&str, Day), u32> = BTreeMap::new();
    let mut expected_r: BTreeMap<(&str, &str, Day), u32> = BTreeMap::new();
    for record in &truth {
        let day = record.day();
        if let Some(prev) = expected_v.insert((record.focal.as_str(), day), record.v_focal) {
            if prev != record.v_focal {
                mismatches.push(format!(
                    "sidecar inconsistent: {} {} has v_focal {} and {}",
                    record.focal, record.day, prev, record.v_focal
                ));
            }
        }
        // Focal traffic is all direct; recommended products take their
        // direct count from the sidecar and inbound clicks from the edges.
        expected_d.insert((record.focal.as_str(), day), record.v_focal);
        expected_d.insert((record.rec.as_str(), day), record.d_rec);
        expected_v.insert((record.rec.as_str(), day), record.d_rec);
        expected_r.insert((record.focal.as_str(), record.rec.as_str(), day), record.clicks());
        edge_days += 1;
    }
    for ((_, rec, day), clicks) in &expected_r {
        if let Some(v) = expected_v.get_mut(&(*rec, *day)) {
            *v += clicks;
        }
    }

    // Inbound click-throughs per (product, day), reconstructed from the log.
    let mut observed_inbound: BTreeMap<(&str, Day), u32> = BTreeMap::new();
    for edge in edge_series.values() {
        for (day, clicks) in &edge.days {
            *observed_inbound
                .entry((edge.recommended_product_id.as_str(), *day))
                .or_insert(0) += clicks;
        }
    }

    for ((focal, rec, day), expected) in &expected_r {
        let observed = edge_series
            .get(&(focal.to_string(), rec.to_string()))
            .map(|e| e.clicks(*day))
            .unwrap_or(0);
        if observed != *expected {
            mismatches.push(format!(
                "edge {focal}->{rec} {day}: log has {observed} click-throughs, sidecar {expected}"
            ));
        }
    }

    for ((product, day), expected) in &expected_v {
        product_days += 1;
        let observed = product_series
            .get(*product)
            .map(|s| s.counts(*day))
            .unwrap_or_default();
        if observed.views != *expected {
            mismatches.push(format!(
                "product {product} {day}: log has v={}, sidecar {expected}",
                observed.views
            ));
        }
        let expected_direct = expected_d.get(&(*product, *day)).copied().unwrap_or(0);
        if observed.direct != expected_direct {
            mismatches.push(format!(
                "product {product} {day}: log has d={}, sidecar {expected_direct}",
                observed.direct
            ));
        }
        // Eq. 1 on the reconstructed counts themselves.
        let inbound = observed_inbound.get(&(*product, *day)).copied().unwrap_or(0);
        if observed.views != observed.direct + inbound {
            mismatches.push(format!(
                "product {product} {day}: v={} but d+r={}",
                observed.views,
                observed.direct + inbound
            ));
        }
    }

    // Log products the sidecar knows nothing about (decoys must be gone).
    for (product, s) in &product_series {
        let known = truth
            .iter()
            .any(|r| r.focal == *product || r.rec == *product);
        if !known && s.total_views() > 0 {
            mismatches.push(format!("product {product}: in log but not in sidecar"));
        }
    }

    Ok(AccountingReport {
        ok: mismatches.is_empty(),
        product_days_checked: product_days,
        edge_days_checked: edge_days,
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            n_products: 4,
            recs_per_focal: 1,
            n_days: 30,
            n_categories: 2,
            shocks: 4,
            shock_magnitude: (60.0, 120.0),
            seed: 7,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = tiny_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.events_ndjson, b.events_ndjson);
        assert_eq!(a.truth_ndjson, b.truth_ndjson);
        assert_eq!(a.catalog_csv, b.catalog_csv);

        let other = generate(&GeneratorConfig {
            seed: 8,
            ..config
        })
        .unwrap();
        assert_ne!(a.events_ndjson, other.events_ndjson);
    }

    #[test]
    fn zero_rates_produce_zero_rec_clicks() {
        let config = GeneratorConfig {
            rho: (0.0, 0.0),
            sigma: (0.0, 0.0),
            ..tiny_config()
        };
        let out = generate(&config).unwrap();
        assert!(!out.events_ndjson.contains("pd_sim"));
        for record in parse_truth(&out.truth_ndjson).unwrap() {
            assert_eq!(record.clicks(), 0);
        }
    }

    #[test]
    fn freshly_generated_pair_verifies() {
        let out = generate(&tiny_config()).unwrap();
        let report = verify_accounting(&out.events_ndjson, &out.truth_ndjson).unwrap();
        assert!(report.ok, "{}", report.render());
        assert!(report.product_days_checked > 0);
    }

    #[test]
    fn deleting_one_event_breaks_accounting_with_a_located_diff() {
        let out = generate(&tiny_config()).unwrap();
        let mut lines: Vec<&str> = out.events_ndjson.lines().collect();
        let victim = lines
            .iter()
            .position(|l| l.contains("pd_sim"))
            .expect("log has rec clicks");
        lines.remove(victim);
        let broken = lines.join("\n");
        let report = verify_accounting(&broken, &out.truth_ndjson).unwrap();
        assert!(!report.ok);
        assert!(!report.mismatches.is_empty());
        assert!(report.render().contains("click-throughs"));
    }

    #[test]
    fn repeat_visitor_decoys_are_removed_exactly() {
        let config = GeneratorConfig {
            repeat_visitors: true,
            n_users: 6,
            ..tiny_config()
        };
        let out = generate(&config).unwrap();
        assert!(out.events_ndjson.contains("bot_decoy"));
        assert!(out.events_ndjson.contains("seller_decoy"));
        assert!(out.events_ndjson.contains("author_decoy"));
        let report = verify_accounting(&out.events_ndjson, &out.truth_ndjson).unwrap();
        assert!(report.ok, "{}", report.render());
    }

    #[test]
    fn schedule_splits_labels_in_exact_proportion() {
        let config = GeneratorConfig {
            n_products: 10,
            shocks: 10,
            correlated_fraction: 0.2,
            n_days: 40,
            ..tiny_config()
        };
        let schedule = build_schedule(&config).unwrap();
        let correlated = schedule
            .iter()
            .filter(|s| s.label == ShockLabel::CorrelatedDemand)
            .count();
        assert_eq!(correlated, 2);
    }

    #[test]
    fn too_many_shocks_for_the_range_is_an_error() {
        let config = GeneratorConfig {
            n_products: 1,
            shocks: 10,
            n_days: 30,
            ..tiny_config()
        };
        assert!(matches!(build_schedule(&config), Err(GenError::Config(_))));
    }

    #[test]
    fn config_round_trip_through_the_flat_format() {
        let text = "\
# comment
seed = 9
products = 12
recs_per_focal = 2
days = 45
categories = 3
focal_demand = 6, 10
rec_demand = 4
rho = 0.01,0.05
sigma = 0.2
gamma = 0.5,0.7
shocks = 12
shock_magnitude = 80,200
magnitude_dist = loguniform
correlated_fraction = 0.25
rho_category_1 = 0.02,0.02
seasonal_boost = 2.0
seasonal_days = 10,20
repeat_visitors = true
users = 5
shock = 0, 15, 90.5
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.n_products, 12);
        assert_eq!(config.recs_per_focal, 2);
        assert_eq!(config.focal_demand, (6.0, 10.0));
        assert_eq!(config.rec_demand, (4.0, 4.0));
        assert!(config.magnitude_log_uniform);
        assert_eq!(config.category_rho.get(&1), Some(&(0.02, 0.02)));
        assert_eq!(config.seasonal_days, Some((10, 20)));
        assert!(config.repeat_visitors);
        assert_eq!(config.explicit_shocks, vec![(0, 15, 90.5)]);
    }

    #[test]
    fn config_parser_rejects_bad_input() {
        assert!(matches!(
            parse_config("nonsense = 1"),
            Err(GenError::ConfigParse { .. })
        ));
        assert!(matches!(
            parse_config("rho = 0.5,2.0\n"),
            Err(GenError::Config(_))
        ));
        assert!(matches!(
            parse_config("products"),
            Err(GenError::ConfigParse { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected_before_generation() {
        let config = GeneratorConfig {
            rho: (0.5, 1.5),
            ..tiny_config()
        };
        assert!(matches!(generate(&config), Err(GenError::Config(_))));
    }
}
