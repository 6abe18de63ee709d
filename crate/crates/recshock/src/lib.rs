//! Natural-experiment analysis of recommender click-throughs in clickstream
//! logs.
//!
//! The toolkit finds days on which a product's traffic jumps suddenly
//! ("shocks"), keeps only shocks whose recommended products show constant
//! direct demand (so the jump acts as a valid instrument), and divides the
//! change in recommendation click-throughs by the change in focal views to
//! estimate how many recommendation clicks the recommender actually causes
//! rather than merely redirects. A synthetic log generator with a
//! ground-truth sidecar serves as the estimator's oracle.
//!
//! Modules follow the pipeline: [`schema`] (types and wire formats),
//! [`referrer`] (code classification), [`ingest`] (sessionization, dedup,
//! activity filters), [`series`] (daily aggregation), [`shocks`] (detection
//! and the constancy filter), [`estimator`] (causal click-through rate and
//! causal fraction), [`synthgen`] (generator and accounting verifier), and
//! [`pipeline`] (end-to-end composition).

pub mod estimator;
pub mod ingest;
pub mod pipeline;
pub mod referrer;
pub mod schema;
pub mod series;
pub mod shocks;
pub mod synthgen;

pub use schema::{
    Catalog, ClickEvent, DailyProductSeries, Day, EdgeSeries, EstimateReport, GeneratorConfig,
    ReferrerClass, Session, Shock, StudyRange,
};
