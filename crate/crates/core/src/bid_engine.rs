//! Optimal bids under a multiplier vector.
//!
//! All constraint multipliers collapse into one scalar, the adjusted value
//! `(1 + μC + μ_k) / (λ + λ_k + μ) · v`. A second-price buyer bids it
//! directly; a first-price buyer shades it by inverting `b + G(b)/g(b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{AuctionType, CompetitorModel, MechanismSpec};

/// Smallest denominator `λ + λ_k + μ` used for bidding.
pub const LAMBDA_MIN: f64 = 1e-9;
pub const DEFAULT_BID_CAP: f64 = 1e4;

const BISECTION_MAX_ITER: usize = 200;
const FALLBACK_GRID: usize = 10_001;

/// Multipliers feeding the combined bid formula. Window terms are `None`
/// when no window of that kind is active for the opportunity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiplierVector {
    pub lambda: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub cost_target: Option<f64>,
    #[serde(default)]
    pub window_lambda: Option<f64>,
    #[serde(default)]
    pub window_mu: Option<f64>,
}

impl MultiplierVector {
    pub fn budget_only(lambda: f64) -> Self {
        MultiplierVector {
            lambda,
            ..Default::default()
        }
    }

    pub fn numerator(&self) -> f64 {
        1.0 + self.mu * self.cost_target.unwrap_or(0.0) + self.window_mu.unwrap_or(0.0)
    }

    pub fn denominator(&self) -> f64 {
        self.lambda + self.window_lambda.unwrap_or(0.0) + self.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustedValue {
    pub value: f64,
    /// The denominator fell below [`LAMBDA_MIN`] and was clamped.
    pub clamped: bool,
}

/// The multiplier-adjusted value of an opportunity worth `v` results.
pub fn adjusted_value(v: f64, m: &MultiplierVector) -> Result<AdjustedValue> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Domain { what: "value", value: v });
    }
    let multipliers = [
        m.lambda,
        m.mu,
        m.window_lambda.unwrap_or(0.0),
        m.window_mu.unwrap_or(0.0),
    ];
    if multipliers.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::invalid("multipliers", "all multipliers must be >= 0"));
    }
    let denominator = m.denominator();
    let clamped = denominator < LAMBDA_MIN;
    let value = if m.mu == 0.0 && m.window_lambda.is_none() && m.window_mu.is_none() && !clamped {
        v / m.lambda
    } else {
        m.numerator() / denominator.max(LAMBDA_MIN) * v
    };
    Ok(AdjustedValue { value, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BidDecision {
    pub bid: f64,
    pub adjusted_value: f64,
    pub surplus_at_bid: f64,
    /// Bid came from surplus maximization rather than markup inversion.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub bid: f64,
    pub fallback: bool,
}

/// Surplus `x G(b) - H(b)` at adjusted value `x`.
pub fn surplus(mech: &MechanismSpec, adjusted: f64, b: f64) -> Result<f64> {
    Ok(adjusted * mech.win_prob(b)? - mech.expected_cost(b)?)
}

fn surplus_unchecked(mech: &MechanismSpec, adjusted: f64, b: f64) -> f64 {
    adjusted * mech.win_prob_unchecked(b) - mech.expected_cost_unchecked(b)
}

fn markup(model: &CompetitorModel, b: f64) -> f64 {
    b + model.cdf_over_pdf(b)
}

/// Solve `b + G(b)/g(b) = x` for a first-price mechanism.
///
/// The map is increasing for log-concave competitor distributions, so plain
/// bisection on `[0, x]` suffices. When the competing-bid support ends below
/// the root the bid stops at the support top, where winning is certain.
/// Empirical models get their markup checked for monotonicity and fall back
/// to maximizing the exact step-CDF surplus when it fails.
pub fn invert_markup(mech: &MechanismSpec, x: f64) -> Result<Inversion> {
    if mech.auction != AuctionType::FirstPrice {
        return Err(Error::NotFirstPrice);
    }
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::Domain { what: "adjusted value", value: x });
    }
    let reserve = mech.reserve;
    if x == 0.0 || x <= reserve {
        return Ok(Inversion { bid: 0.0, fallback: false });
    }
    let model = &mech.competitor;

    if let CompetitorModel::Empirical(e) = model {
        let monotone = markup_is_monotone(model, x);
        let mut best = (0.0, 0.0);
        let mut consider = |b: f64| {
            let s = surplus_unchecked(mech, x, b);
            if s > best.1 {
                best = (b, s);
            }
        };
        if monotone {
            consider(bisect_markup(model, x).max(reserve));
        }
        consider(reserve);
        for &s in e.samples().iter().filter(|&&s| s >= reserve && s <= x) {
            consider(s);
        }
        return Ok(Inversion {
            bid: best.0,
            fallback: !monotone,
        });
    }

    let b = bisect_markup(model, x);
    if b.is_finite() {
        Ok(Inversion {
            bid: b.max(reserve),
            fallback: false,
        })
    } else {
        Ok(Inversion {
            bid: grid_maximize(mech, x, reserve, x),
            fallback: true,
        })
    }
}

fn bisect_markup(model: &CompetitorModel, x: f64) -> f64 {
    // No bid above the support top can win more.
    let (mut lo, mut hi) = (0.0_f64, x.min(model.support_max()));
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if markup(model, mid) <= x {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn markup_is_monotone(model: &CompetitorModel, x: f64) -> bool {
    const POINTS: usize = 257;
    let mut prev = f64::NEG_INFINITY;
    for i in 1..POINTS {
        let m = markup(model, x * i as f64 / (POINTS - 1) as f64);
        if m < prev {
            return false;
        }
        prev = m;
    }
    true
}

fn grid_maximize(mech: &MechanismSpec, x: f64, lo: f64, hi: f64) -> f64 {
    let mut best = (0.0, 0.0);
    for i in 0..FALLBACK_GRID {
        let b = lo + (hi - lo) * i as f64 / (FALLBACK_GRID - 1) as f64;
        let s = surplus_unchecked(mech, x, b);
        if s > best.1 {
            best = (b, s);
        }
    }
    best.0
}

/// Bid computation with a hard cap on the submitted bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidEngine {
    pub bid_cap: f64,
}

impl Default for BidEngine {
    fn default() -> Self {
        BidEngine {
            bid_cap: DEFAULT_BID_CAP,
        }
    }
}

impl BidEngine {
    pub fn new(bid_cap: f64) -> Result<Self> {
        if !(bid_cap > 0.0 && bid_cap.is_finite()) {
            return Err(Error::invalid("bid_cap", "must be finite and > 0"));
        }
        Ok(BidEngine { bid_cap })
    }

    /// Surplus-maximizing bid at an adjusted value.
    pub fn optimal_bid(&self, mech: &MechanismSpec, adjusted: f64) -> Result<BidDecision> {
        if !(adjusted >= 0.0) {
            return Err(Error::Domain { what: "adjusted value", value: adjusted });
        }
        let (bid, fallback) = match mech.auction {
            AuctionType::SecondPrice => (adjusted.min(self.bid_cap), false),
            AuctionType::FirstPrice => {
                let inv = invert_markup(mech, adjusted)?;
                (inv.bid.min(self.bid_cap), inv.fallback)
            }
        };
        Ok(BidDecision {
            bid,
            adjusted_value: adjusted,
            surplus_at_bid: surplus_unchecked(mech, adjusted, bid),
            fallback,
        })
    }

    /// Bid for value `v` under multipliers `m`.
    pub fn bid_for(&self, mech: &MechanismSpec, v: f64, m: &MultiplierVector) -> Result<BidDecision> {
        let adj = adjusted_value(v, m)?;
        self.optimal_bid(mech, adj.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform01() -> CompetitorModel {
        CompetitorModel::uniform(0.0, 1.0).unwrap()
    }

    #[test]
    fn adjusted_value_examples() {
        let m = MultiplierVector::budget_only(2.0);
        assert_eq!(adjusted_value(1.0, &m).unwrap().value, 0.5);

        let m = MultiplierVector {
            lambda: 1.0,
            mu: 1.0,
            cost_target: Some(0.2),
            ..Default::default()
        };
        assert!((adjusted_value(1.0, &m).unwrap().value - 0.6).abs() < 1e-15);

        let m = MultiplierVector {
            lambda: 1.0,
            window_lambda: Some(1.0),
            window_mu: Some(0.5),
            ..Default::default()
        };
        assert!((adjusted_value(1.0, &m).unwrap().value - 0.75).abs() < 1e-15);
    }

    #[test]
    fn adjusted_value_clamps_small_denominator() {
        let adj = adjusted_value(1.0, &MultiplierVector::budget_only(0.0)).unwrap();
        assert!(adj.clamped);
        assert_eq!(adj.value, 1.0 / LAMBDA_MIN);
        assert!(adjusted_value(-1.0, &MultiplierVector::budget_only(1.0)).is_err());
    }

    #[test]
    fn optimal_bid_examples() {
        let engine = BidEngine::default();
        let sp = MechanismSpec::second_price(uniform01());
        assert_eq!(engine.optimal_bid(&sp, 0.5).unwrap().bid, 0.5);

        let fp = MechanismSpec::first_price(uniform01());
        let d = engine.optimal_bid(&fp, 1.0).unwrap();
        assert!((d.bid - 0.5).abs() < 1e-12);
        assert!((d.surplus_at_bid - 0.25).abs() < 1e-12);

        let ln = MechanismSpec::first_price(CompetitorModel::lognormal(0.0, 1.0).unwrap());
        assert_eq!(engine.optimal_bid(&ln, 0.0).unwrap().bid, 0.0);
        assert_eq!(engine.optimal_bid(&fp, 0.0).unwrap().bid, 0.0);
    }

    #[test]
    fn invert_markup_examples() {
        let fp = MechanismSpec::first_price(uniform01());
        assert!((invert_markup(&fp, 1.0).unwrap().bid - 0.5).abs() < 1e-12);
        assert!((invert_markup(&fp, 3.0).unwrap().bid - 1.0).abs() < 1e-12);
        assert_eq!(invert_markup(&fp, 0.0).unwrap().bid, 0.0);
        let sp = MechanismSpec::second_price(uniform01());
        assert_eq!(invert_markup(&sp, 1.0), Err(Error::NotFirstPrice));
    }

    #[test]
    fn invert_markup_residual_within_tolerance() {
        let fp = MechanismSpec::first_price(CompetitorModel::lognormal(-0.5, 0.7).unwrap());
        for &x in &[0.01, 0.3, 1.0, 4.0, 50.0] {
            let b = invert_markup(&fp, x).unwrap().bid;
            let g = fp.win_density(b).unwrap();
            let residual = b + fp.win_prob(b).unwrap() / g - x;
            assert!(residual.abs() <= 1e-9 * x.max(1.0), "x={x} residual={residual}");
            assert!(b <= x);
        }
    }

    #[test]
    fn surplus_examples() {
        let sp = MechanismSpec::second_price(uniform01());
        assert!((surplus(&sp, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let fp = MechanismSpec::first_price(uniform01());
        assert_eq!(surplus(&fp, 1.0, 0.5).unwrap(), 0.25);
        assert_eq!(surplus(&sp, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn first_price_with_reserve_bids_reserve_when_root_below() {
        // Root of 2b = 0.5 is 0.25 < reserve 0.4; surplus on [0.4, 0.5] peaks at 0.4.
        let fp = MechanismSpec::first_price(uniform01()).with_reserve(0.4);
        let d = BidEngine::default().optimal_bid(&fp, 0.5).unwrap();
        assert!((d.bid - 0.4).abs() < 1e-12);
        // Adjusted value below the reserve: nothing worth winning.
        assert_eq!(BidEngine::default().optimal_bid(&fp, 0.3).unwrap().bid, 0.0);
    }

    #[test]
    fn empirical_first_price_maximizes_step_surplus() {
        let fp = MechanismSpec::first_price(
            CompetitorModel::empirical(vec![0.1, 0.2, 0.25, 0.9, 1.5]).unwrap(),
        );
        let x = 1.2;
        let d = BidEngine::default().optimal_bid(&fp, x).unwrap();
        for i in 0..=12_000 {
            let b = i as f64 * 1e-4;
            assert!(d.surplus_at_bid >= surplus(&fp, x, b).unwrap() - 1e-12);
        }
    }

    #[test]
    fn second_price_bid_capped() {
        let engine = BidEngine::new(10.0).unwrap();
        let sp = MechanismSpec::second_price(uniform01());
        assert_eq!(engine.optimal_bid(&sp, 1e6).unwrap().bid, 10.0);
        assert!(BidEngine::new(0.0).is_err());
    }
}
