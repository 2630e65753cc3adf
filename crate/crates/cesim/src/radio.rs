//! Link-budget primitives for CE mode A.
//!
//! Everything in this module is a pure function of its arguments: repetition
//! gain, link closure, coverage-state detection with hysteresis, and subframe
//! cost accounting. One LTE subframe is 1 ms, so a transmission of
//! `payload_subframes * reps` subframes occupies exactly that many
//! milliseconds of air.
//!
//! The gain model is linear in doublings of the repetition factor:
//! `gain(r) = gain_per_doubling * log2(r)`. With the default 2.0 dB per
//! doubling, 32 repetitions yield exactly 10.0 dB of coverage gain on top of
//! the normal maximum coupling loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Conventional LTE reference value for the maximum coupling loss closable
/// without repetitions. A config default, not a correctness claim.
pub const DEFAULT_NORMAL_MCL_DB: f64 = 140.7;

/// Default coverage gain added per doubling of the repetition factor.
pub const DEFAULT_GAIN_PER_DOUBLING_DB: f64 = 2.0;

/// Default margin for coverage-state transitions, to avoid attach/detach
/// ping-pong at the coverage boundary.
pub const DEFAULT_HYSTERESIS_DB: f64 = 3.0;

/// CE mode A repetition ceiling.
pub const MODE_A_MAX_REPETITIONS: u32 = 32;

/// Default CE mode A repetition set.
pub const DEFAULT_REPETITION_SET: [u32; 6] = [1, 2, 4, 8, 16, 32];

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadioError {
    #[error("coupling loss must be finite and non-negative, got {0}")]
    InvalidCouplingLoss(f64),
    #[error("excess loss must be finite, got {0}")]
    NonFiniteExcessLoss(f64),
    #[error("{reps} repetitions are not in the configured repetition set")]
    InvalidRepetition { reps: u32 },
    #[error(
        "excess loss {excess_db} dB exceeds the {ceiling_db} dB ceiling of the repetition set"
    )]
    BeyondCeModeA { excess_db: f64, ceiling_db: f64 },
    #[error("a transmission must carry at least one payload subframe")]
    EmptyPayload,
    #[error("invalid link budget config: {0}")]
    InvalidConfig(String),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A coupling-loss sample in dB: the total attenuation between the UE and
/// base-station antenna ports. Always finite and non-negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CouplingLoss(f64);

impl CouplingLoss {
    pub fn new(db: f64) -> Result<Self, RadioError> {
        if !db.is_finite() || db < 0.0 {
            return Err(RadioError::InvalidCouplingLoss(db));
        }
        Ok(CouplingLoss(db))
    }

    pub fn db(self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for CouplingLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // dB values are always rendered with one decimal.
        write!(f, "{:.1}", self.0)
    }
}

/// A repetition factor drawn from a configured repetition set.
///
/// Construct through [`LinkBudgetConfig::repetition_factor`] or
/// [`required_repetitions`]; both enforce set membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RepetitionFactor(u32);

impl RepetitionFactor {
    pub fn get(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for RepetitionFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Thresholds and gain parameters deciding whether a transmission closes the
/// link, and at what subframe cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBudgetConfig {
    /// Maximum coupling loss closable at one repetition (the "normal
    /// coverage" boundary), in dB.
    #[serde(rename = "normal_mcl", default = "default_mcl")]
    pub normal_mcl_db: f64,
    /// Coverage gain added per doubling of repetitions, in dB.
    #[serde(rename = "gain_per_doubling", default = "default_gain")]
    pub gain_per_doubling_db: f64,
    /// Strictly increasing set of allowed repetition factors; must contain 1.
    #[serde(default = "default_set")]
    pub repetition_set: Vec<u32>,
    /// Margin for coverage-state transitions, in dB.
    #[serde(rename = "hysteresis", default = "default_hysteresis")]
    pub hysteresis_db: f64,
}

fn default_mcl() -> f64 {
    DEFAULT_NORMAL_MCL_DB
}
fn default_gain() -> f64 {
    DEFAULT_GAIN_PER_DOUBLING_DB
}
fn default_set() -> Vec<u32> {
    DEFAULT_REPETITION_SET.to_vec()
}
fn default_hysteresis() -> f64 {
    DEFAULT_HYSTERESIS_DB
}

impl Default for LinkBudgetConfig {
    fn default() -> Self {
        LinkBudgetConfig {
            normal_mcl_db: DEFAULT_NORMAL_MCL_DB,
            gain_per_doubling_db: DEFAULT_GAIN_PER_DOUBLING_DB,
            repetition_set: default_set(),
            hysteresis_db: DEFAULT_HYSTERESIS_DB,
        }
    }
}

impl LinkBudgetConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        if !self.normal_mcl_db.is_finite() || self.normal_mcl_db <= 0.0 {
            return Err(RadioError::InvalidConfig(format!(
                "normal_mcl must be a positive finite dB value, got {}",
                self.normal_mcl_db
            )));
        }
        if !self.gain_per_doubling_db.is_finite() || self.gain_per_doubling_db <= 0.0 {
            return Err(RadioError::InvalidConfig(format!(
                "gain_per_doubling must be > 0, got {}",
                self.gain_per_doubling_db
            )));
        }
        if !self.hysteresis_db.is_finite() || self.hysteresis_db < 0.0 {
            return Err(RadioError::InvalidConfig(format!(
                "hysteresis must be >= 0, got {}",
                self.hysteresis_db
            )));
        }
        if self.repetition_set.is_empty() {
            return Err(RadioError::InvalidConfig(
                "repetition_set must not be empty".into(),
            ));
        }
        if !self.repetition_set.contains(&1) {
            return Err(RadioError::InvalidConfig(
                "repetition_set must contain 1".into(),
            ));
        }
        if !self.repetition_set.windows(2).all(|w| w[0] < w[1]) {
            return Err(RadioError::InvalidConfig(
                "repetition_set must be strictly increasing".into(),
            ));
        }
        let max = *self.repetition_set.last().expect("non-empty");
        if max > MODE_A_MAX_REPETITIONS {
            return Err(RadioError::InvalidConfig(format!(
                "repetition_set max {} exceeds the CE mode A limit of {}",
                max, MODE_A_MAX_REPETITIONS
            )));
        }
        Ok(())
    }

    /// Wraps `reps` as a [`RepetitionFactor`], enforcing set membership.
    pub fn repetition_factor(&self, reps: u32) -> Result<RepetitionFactor, RadioError> {
        if self.repetition_set.contains(&reps) {
            Ok(RepetitionFactor(reps))
        } else {
            Err(RadioError::InvalidRepetition { reps })
        }
    }

    /// Largest factor in the repetition set.
    pub fn max_repetitions(&self) -> RepetitionFactor {
        RepetitionFactor(*self.repetition_set.last().expect("validated non-empty"))
    }

    /// Gain of the largest factor in the set: the most excess loss CE can
    /// absorb under this config.
    pub fn ceiling_db(&self) -> f64 {
        ce_gain_db(self.max_repetitions(), self).expect("max factor is a set member")
    }
}

/// Subframes consumed by a transmission, successful or not.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct ResourceCost {
    pub subframes: u64,
}

/// Result of evaluating one transmission against the link budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmissionOutcome {
    pub delivered: bool,
    pub reps_used: RepetitionFactor,
    pub cost: ResourceCost,
}

/// Coverage state of a vehicle as seen by its connection manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageState {
    Normal,
    Extended,
}

impl std::fmt::Display for CoverageState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoverageState::Normal => write!(f, "Normal"),
            CoverageState::Extended => write!(f, "Extended"),
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Coverage gain in dB for `reps` repetitions: `gain_per_doubling * log2(reps)`.
///
/// Monotone non-decreasing over the repetition set and exactly 0 for one
/// repetition.
pub fn ce_gain_db(reps: RepetitionFactor, cfg: &LinkBudgetConfig) -> Result<f64, RadioError> {
    if !cfg.repetition_set.contains(&reps.0) {
        return Err(RadioError::InvalidRepetition { reps: reps.0 });
    }
    Ok(cfg.gain_per_doubling_db * f64::from(reps.0).log2())
}

/// Smallest factor in the repetition set whose gain covers `excess_loss_db`
/// (negative excess means the link already closes at one repetition).
///
/// Fails with [`RadioError::BeyondCeModeA`] when even the largest factor
/// falls short: the vehicle is unreachable under this config.
pub fn required_repetitions(
    excess_loss_db: f64,
    cfg: &LinkBudgetConfig,
) -> Result<RepetitionFactor, RadioError> {
    if !excess_loss_db.is_finite() {
        return Err(RadioError::NonFiniteExcessLoss(excess_loss_db));
    }
    let need = excess_loss_db.max(0.0);
    for &reps in &cfg.repetition_set {
        let factor = RepetitionFactor(reps);
        if ce_gain_db(factor, cfg)? >= need {
            return Ok(factor);
        }
    }
    Err(RadioError::BeyondCeModeA {
        excess_db: excess_loss_db,
        ceiling_db: cfg.ceiling_db(),
    })
}

/// Evaluates one transmission: the link closes iff the coupling loss does not
/// exceed `normal_mcl + gain(reps)`. The subframe cost is charged whether or
/// not decoding succeeds; failed repetitions still burn spectrum.
pub fn evaluate_transmission(
    loss: CouplingLoss,
    reps: RepetitionFactor,
    payload_subframes: u32,
    cfg: &LinkBudgetConfig,
) -> Result<TransmissionOutcome, RadioError> {
    if payload_subframes == 0 {
        return Err(RadioError::EmptyPayload);
    }
    let gain = ce_gain_db(reps, cfg)?;
    let delivered = loss.db() <= cfg.normal_mcl_db + gain;
    Ok(TransmissionOutcome {
        delivered,
        reps_used: reps,
        cost: ResourceCost {
            subframes: u64::from(payload_subframes) * u64::from(reps.0),
        },
    })
}

/// Coverage-state transition with hysteresis: leave `Normal` only above
/// `normal_mcl + hysteresis`, return to it only below `normal_mcl -
/// hysteresis`, hold the previous state inside the band.
pub fn coverage_state(
    loss: CouplingLoss,
    previous: CoverageState,
    cfg: &LinkBudgetConfig,
) -> CoverageState {
    if loss.db() > cfg.normal_mcl_db + cfg.hysteresis_db {
        CoverageState::Extended
    } else if loss.db() < cfg.normal_mcl_db - cfg.hysteresis_db {
        CoverageState::Normal
    } else {
        previous
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> LinkBudgetConfig {
        LinkBudgetConfig::default()
    }

    fn reps(n: u32) -> RepetitionFactor {
        cfg().repetition_factor(n).unwrap()
    }

    #[test]
    fn gain_at_32_reps_is_exactly_ten_db() {
        let g = ce_gain_db(reps(32), &cfg()).unwrap();
        assert!((g - 10.0).abs() < 1e-9);
        // log2(32) is exact in f64, so the default config hits 10.0 on the nose.
        assert_eq!(g, 10.0);
    }

    #[test]
    fn gain_at_one_rep_is_zero() {
        assert_eq!(ce_gain_db(reps(1), &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn gain_at_eight_reps() {
        // 2.0 * log2(8) = 6.0, cross-checked by evaluating the formula by hand.
        assert_eq!(ce_gain_db(reps(8), &cfg()).unwrap(), 6.0);
    }

    #[test]
    fn gain_rejects_reps_outside_the_set() {
        let err = ce_gain_db(RepetitionFactor(3), &cfg()).unwrap_err();
        assert_eq!(err, RadioError::InvalidRepetition { reps: 3 });
    }

    #[test]
    fn required_repetitions_zero_excess() {
        assert_eq!(required_repetitions(0.0, &cfg()).unwrap().get(), 1);
    }

    #[test]
    fn required_repetitions_negative_excess() {
        assert_eq!(required_repetitions(-7.5, &cfg()).unwrap().get(), 1);
    }

    #[test]
    fn required_repetitions_five_db() {
        // Scanning {1,2,4,8,16,32}: g(4)=4 < 5 <= g(8)=6, so 8.
        assert_eq!(required_repetitions(5.0, &cfg()).unwrap().get(), 8);
    }

    #[test]
    fn required_repetitions_beyond_mode_a() {
        // g(32)=10.0 < 10.5: unreachable even with CE mode A.
        let err = required_repetitions(10.5, &cfg()).unwrap_err();
        assert!(matches!(err, RadioError::BeyondCeModeA { .. }));
    }

    #[test]
    fn required_repetitions_non_finite_excess() {
        assert!(matches!(
            required_repetitions(f64::NAN, &cfg()),
            Err(RadioError::NonFiniteExcessLoss(_))
        ));
    }

    #[test]
    fn transmission_closes_at_ten_db_excess_with_32_reps() {
        let c = cfg();
        let loss = CouplingLoss::new(c.normal_mcl_db + 9.9).unwrap();
        let out = evaluate_transmission(loss, reps(32), 1, &c).unwrap();
        assert!(out.delivered);
        assert_eq!(out.cost.subframes, 32);
    }

    #[test]
    fn transmission_fails_without_repetitions_outside_coverage() {
        let c = cfg();
        let loss = CouplingLoss::new(c.normal_mcl_db + 9.9).unwrap();
        let out = evaluate_transmission(loss, reps(1), 1, &c).unwrap();
        assert!(!out.delivered);
        // Spectrum is occupied whether or not decoding succeeds.
        assert_eq!(out.cost.subframes, 1);
    }

    #[test]
    fn transmission_boundary_of_normal_coverage() {
        let c = cfg();
        let loss = CouplingLoss::new(c.normal_mcl_db).unwrap();
        let out = evaluate_transmission(loss, reps(1), 4, &c).unwrap();
        assert!(out.delivered);
        assert_eq!(out.cost.subframes, 4);
    }

    #[test]
    fn transmission_rejects_empty_payload() {
        let c = cfg();
        let loss = CouplingLoss::new(100.0).unwrap();
        assert_eq!(
            evaluate_transmission(loss, reps(1), 0, &c),
            Err(RadioError::EmptyPayload)
        );
    }

    #[test]
    fn coverage_transitions_above_upper_band() {
        let c = cfg();
        let loss = CouplingLoss::new(c.normal_mcl_db + c.hysteresis_db + 0.1).unwrap();
        assert_eq!(
            coverage_state(loss, CoverageState::Normal, &c),
            CoverageState::Extended
        );
    }

    #[test]
    fn coverage_holds_inside_hysteresis_band() {
        let c = cfg();
        let loss = CouplingLoss::new(c.normal_mcl_db).unwrap();
        assert_eq!(
            coverage_state(loss, CoverageState::Extended, &c),
            CoverageState::Extended
        );
        assert_eq!(
            coverage_state(loss, CoverageState::Normal, &c),
            CoverageState::Normal
        );
    }

    #[test]
    fn coverage_returns_to_normal_at_zero_loss() {
        let c = cfg();
        let loss = CouplingLoss::new(0.0).unwrap();
        assert_eq!(
            coverage_state(loss, CoverageState::Extended, &c),
            CoverageState::Normal
        );
    }

    #[test]
    fn coupling_loss_rejects_invalid_values() {
        assert!(CouplingLoss::new(-0.1).is_err());
        assert!(CouplingLoss::new(f64::NAN).is_err());
        assert!(CouplingLoss::new(f64::INFINITY).is_err());
        assert!(CouplingLoss::new(0.0).is_ok());
    }

    #[test]
    fn config_validation_catches_bad_sets() {
        let mut c = cfg();
        c.repetition_set = vec![2, 4, 8];
        assert!(matches!(c.validate(), Err(RadioError::InvalidConfig(_))));
        c.repetition_set = vec![1, 4, 4, 8];
        assert!(matches!(c.validate(), Err(RadioError::InvalidConfig(_))));
        c.repetition_set = vec![1, 2, 64];
        assert!(matches!(c.validate(), Err(RadioError::InvalidConfig(_))));
        c.repetition_set = vec![1, 2, 4, 8, 16, 32];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn default_config_is_valid() {
        assert!(cfg().validate().is_ok());
    }

    proptest! {
        #[test]
        fn gain_is_monotone_over_the_set(pair in prop::sample::subsequence(vec![1u32, 2, 4, 8, 16, 32], 2)) {
            let c = cfg();
            let lo = ce_gain_db(RepetitionFactor(pair[0]), &c).unwrap();
            let hi = ce_gain_db(RepetitionFactor(pair[1]), &c).unwrap();
            prop_assert!(lo <= hi);
        }

        #[test]
        fn required_repetitions_is_minimal(excess in -5.0f64..12.0) {
            let c = cfg();
            match required_repetitions(excess, &c) {
                Ok(r) => {
                    let need = excess.max(0.0);
                    prop_assert!(ce_gain_db(r, &c).unwrap() >= need);
                    for &smaller in c.repetition_set.iter().filter(|&&s| s < r.get()) {
                        prop_assert!(ce_gain_db(RepetitionFactor(smaller), &c).unwrap() < need);
                    }
                }
                Err(RadioError::BeyondCeModeA { .. }) => {
                    prop_assert!(excess > c.ceiling_db());
                }
                Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other:?}"))),
            }
        }

        #[test]
        fn cost_is_linear_in_reps_and_payload(n in prop::sample::select(vec![1u32, 2, 4, 8, 16, 32]), payload in 1u32..64) {
            let c = cfg();
            let loss = CouplingLoss::new(100.0).unwrap();
            let out = evaluate_transmission(loss, RepetitionFactor(n), payload, &c).unwrap();
            prop_assert_eq!(out.cost.subframes, u64::from(n) * u64::from(payload));
        }

        #[test]
        fn coverage_never_changes_inside_the_band(offset in -3.0f64..=3.0) {
            let c = cfg();
            let loss = CouplingLoss::new(c.normal_mcl_db + offset).unwrap();
            prop_assert_eq!(coverage_state(loss, CoverageState::Normal, &c), CoverageState::Normal);
            prop_assert_eq!(coverage_state(loss, CoverageState::Extended, &c), CoverageState::Extended);
        }

        #[test]
        fn required_repetitions_round_trip_delivers(excess in 0.001f64..=10.0) {
            let c = cfg();
            let loss = CouplingLoss::new(c.normal_mcl_db + excess).unwrap();
            let r = required_repetitions(excess, &c).unwrap();
            let out = evaluate_transmission(loss, r, 1, &c).unwrap();
            prop_assert!(out.delivered);
        }
    }
}
