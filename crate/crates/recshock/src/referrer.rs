//! Referral-code classification.
//!
//! Arrival channels are recovered from the short referral code each pageview
//! carries (`pd_sim_b_1`, `sr_1_1`, ...). Classification is a total function
//! of the code string: unknown codes fall back to [`ReferrerClass::DirectOther`]
//! and nothing here ever fails.
//!
//! Prefix table:
//!
//! | prefix            | class          |
//! |-------------------|----------------|
//! | `pd_sim`          | `RecSim`       |
//! | `pd_` (non-sim)   | `RecOther`     |
//! | `sr_`             | `SearchResult` |
//! | `nb_sb`           | `SearchBox`    |
//! | `ext`             | `External`     |
//! | anything else     | `DirectOther`  |
//!
//! The `ext` prefix is the marker a log producer writes on codes whose
//! origin it resolved to an off-site referrer; it keeps classification a
//! pure string function.

use crate::schema::ReferrerClass;

/// Classify a referral code and extract the clicked item's 1-based position
/// where the code encodes one.
///
/// Accepts the code with or without the literal `ref=` prefix. Positions are
/// encoded as the trailing underscore-separated integer of search-result and
/// recommendation codes; search-box codes carry a trailing counter that is
/// not a list position, so none is returned for them.
pub fn classify_referrer(code: &str) -> (ReferrerClass, Option<u32>) {
    let code = code.strip_prefix("ref=").unwrap_or(code);
    let class = if code.starts_with("pd_sim") {
        ReferrerClass::RecSim
    } else if code.starts_with("pd_") {
        ReferrerClass::RecOther
    } else if code.starts_with("sr_") {
        ReferrerClass::SearchResult
    } else if code.starts_with("nb_sb") {
        ReferrerClass::SearchBox
    } else if code.starts_with("ext") {
        ReferrerClass::External
    } else {
        ReferrerClass::DirectOther
    };
    let position = match class {
        ReferrerClass::RecSim | ReferrerClass::RecOther | ReferrerClass::SearchResult => {
            trailing_integer(code)
        }
        _ => None,
    };
    (class, position)
}

/// True iff the class counts as direct traffic: everything except the two
/// recommendation channels.
pub fn is_direct(class: ReferrerClass) -> bool {
    !matches!(class, ReferrerClass::RecSim | ReferrerClass::RecOther)
}

fn trailing_integer(code: &str) -> Option<u32> {
    code.rsplit('_').next().and_then(|tail| tail.parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rec_sim_with_position() {
        assert_eq!(
            classify_referrer("pd_sim_b_1"),
            (ReferrerClass::RecSim, Some(1))
        );
        assert_eq!(
            classify_referrer("pd_sim_b_3"),
            (ReferrerClass::RecSim, Some(3))
        );
        assert_eq!(classify_referrer("pd_sim"), (ReferrerClass::RecSim, None));
    }

    #[test]
    fn search_result_with_position() {
        assert_eq!(
            classify_referrer("sr_1_1"),
            (ReferrerClass::SearchResult, Some(1))
        );
        assert_eq!(
            classify_referrer("sr_1_14"),
            (ReferrerClass::SearchResult, Some(14))
        );
    }

    #[test]
    fn search_box_has_no_position() {
        assert_eq!(
            classify_referrer("nb_sb_noss_1"),
            (ReferrerClass::SearchBox, None)
        );
        assert_eq!(
            classify_referrer("nb_sb_ss_i_1_7"),
            (ReferrerClass::SearchBox, None)
        );
    }

    #[test]
    fn other_rec_widgets() {
        assert_eq!(
            classify_referrer("pd_cp_2"),
            (ReferrerClass::RecOther, Some(2))
        );
        assert_eq!(
            classify_referrer("pd_bxgy_text_b"),
            (ReferrerClass::RecOther, None)
        );
    }

    #[test]
    fn external_marker() {
        assert_eq!(
            classify_referrer("ext_bookdeals"),
            (ReferrerClass::External, None)
        );
    }

    #[test]
    fn unknown_codes_fall_back_to_direct() {
        assert_eq!(
            classify_referrer("xyz_unknown"),
            (ReferrerClass::DirectOther, None)
        );
        assert_eq!(classify_referrer("cart"), (ReferrerClass::DirectOther, None));
        assert_eq!(classify_referrer("_"), (ReferrerClass::DirectOther, None));
    }

    #[test]
    fn ref_prefix_is_accepted() {
        assert_eq!(
            classify_referrer("ref=pd_sim_b_1"),
            (ReferrerClass::RecSim, Some(1))
        );
        assert_eq!(
            classify_referrer("ref=sr_1_2"),
            (ReferrerClass::SearchResult, Some(2))
        );
    }

    #[test]
    fn direct_covers_everything_but_recommendations() {
        assert!(!is_direct(ReferrerClass::RecSim));
        assert!(!is_direct(ReferrerClass::RecOther));
        assert!(is_direct(ReferrerClass::SearchResult));
        assert!(is_direct(ReferrerClass::SearchBox));
        assert!(is_direct(ReferrerClass::External));
        assert!(is_direct(ReferrerClass::DirectOther));
    }

    proptest! {
        /// Total and deterministic on arbitrary strings, and positions only
        /// ever come from position-bearing classes.
        #[test]
        fn classify_is_total_and_deterministic(code in ".{0,64}") {
            let first = classify_referrer(&code);
            let second = classify_referrer(&code);
            prop_assert_eq!(first, second);
            let (class, position) = first;
            if position.is_some() {
                prop_assert!(matches!(
                    class,
                    ReferrerClass::RecSim | ReferrerClass::RecOther | ReferrerClass::SearchResult
                ));
            }
        }

        /// The sim prefix always wins over the generic pd prefix.
        #[test]
        fn sim_prefix_beats_generic_pd(suffix in "[a-z0-9_]{0,16}") {
            let (class, _) = classify_referrer(&format!("pd_sim{suffix}"));
            prop_assert_eq!(class, ReferrerClass::RecSim);
        }
    }
}
