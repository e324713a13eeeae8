//! Closed-form initial budget multiplier for second-price auctions.
//!
//! With competing bids `Z ~ LN(μ, σ)` and values `V ~ LN(μ', σ')` drawn
//! independently, bidding `V/λ` spends per opportunity
//!
//! ```text
//! S(λ) = e^(μ + σ²/2) · Φ((μ' - μ - ln λ - σ²) / sqrt(σ'² + σ²))
//! ```
//!
//! which inverts analytically for a single placement and by bisection for a
//! traffic-weighted sum over placements.

use serde::{Deserialize, Serialize};

use crate::bid_engine::LAMBDA_MIN;
use crate::error::{Error, Result};
use crate::normal;

/// Log-normal priors for one placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPriors {
    pub mu: f64,
    pub sigma: f64,
    pub mu_prime: f64,
    pub sigma_prime: f64,
    /// Forecast number of opportunities.
    #[serde(default = "one")]
    pub opportunities: f64,
}

fn one() -> f64 {
    1.0
}

impl PlacementPriors {
    pub fn new(mu: f64, sigma: f64, mu_prime: f64, sigma_prime: f64, opportunities: f64) -> Result<Self> {
        let p = PlacementPriors {
            mu,
            sigma,
            mu_prime,
            sigma_prime,
            opportunities,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma", "must be > 0"));
        }
        if !(self.sigma_prime > 0.0) {
            return Err(Error::invalid("sigma_prime", "must be > 0"));
        }
        if !(self.opportunities > 0.0) {
            return Err(Error::invalid("opportunities", "must be > 0"));
        }
        if !(self.mu.is_finite() && self.mu_prime.is_finite()) {
            return Err(Error::invalid("mu", "must be finite"));
        }
        Ok(())
    }

    /// Mean competing bid `e^(μ + σ²/2)`: spend per opportunity when always winning.
    pub fn mean_competing_bid(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    fn spread(&self) -> f64 {
        self.sigma_prime.hypot(self.sigma)
    }
}

/// `E[Φ(aX + b)]` for standard normal `X`, i.e. `Φ(b / sqrt(1 + a²))`.
pub fn expected_phi_affine(a: f64, b: f64) -> f64 {
    normal::cdf(b / a.hypot(1.0))
}

/// Expected second-price spend per opportunity when bidding `v/λ`.
pub fn expected_spend_closed_form(p: &PlacementPriors, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain { what: "lambda", value: lambda });
    }
    let arg = (p.mu_prime - p.mu - lambda.ln() - p.sigma * p.sigma) / p.spread();
    Ok(p.mean_competing_bid() * normal::cdf(arg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColdStart {
    pub lambda: f64,
    /// The budget covers winning everything; `lambda` is the floor.
    pub unconstrained: bool,
}

/// Analytic `λ*` with `S(λ*) = B/T`:
/// `ln λ* = μ' - μ - σ² - sqrt(σ'² + σ²) · Φ⁻¹(B / (T e^(μ+σ²/2)))`.
pub fn solve_lambda0(p: &PlacementPriors, budget: f64, opportunities: f64) -> Result<ColdStart> {
    p.validate()?;
    if !(budget > 0.0) {
        return Err(Error::Domain { what: "budget", value: budget });
    }
    if !(opportunities > 0.0) {
        return Err(Error::Domain { what: "opportunities", value: opportunities });
    }
    let share = budget / (opportunities * p.mean_competing_bid());
    if share >= 1.0 {
        return Ok(ColdStart {
            lambda: LAMBDA_MIN,
            unconstrained: true,
        });
    }
    let ln_lambda = p.mu_prime - p.mu - p.sigma * p.sigma - p.spread() * normal::quantile(share);
    Ok(ColdStart {
        lambda: ln_lambda.exp(),
        unconstrained: false,
    })
}

/// `λ*` solving `Σ_k T_k S_k(λ*) = B` across placements.
pub fn solve_lambda0_multi(placements: &[PlacementPriors], budget: f64) -> Result<ColdStart> {
    if placements.is_empty() {
        return Err(Error::invalid("placements", "need at least one placement"));
    }
    for p in placements {
        p.validate()?;
    }
    if !(budget > 0.0) {
        return Err(Error::Domain { what: "budget", value: budget });
    }
    if let [p] = placements {
        return solve_lambda0(p, budget, p.opportunities);
    }
    let ceiling: f64 = placements
        .iter()
        .map(|p| p.opportunities * p.mean_competing_bid())
        .sum();
    if budget >= ceiling {
        return Ok(ColdStart {
            lambda: LAMBDA_MIN,
            unconstrained: true,
        });
    }
    let total = |lambda: f64| -> f64 {
        placements
            .iter()
            .map(|p| p.opportunities * expected_spend_closed_form(p, lambda).expect("lambda > 0"))
            .sum()
    };
    // Bisection in log space on the strictly decreasing aggregate spend.
    let (mut lo, mut hi) = (1e-12_f64.ln(), 1e12_f64.ln());
    if total(lo.exp()) <= budget {
        return Ok(ColdStart {
            lambda: lo.exp(),
            unconstrained: true,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid.exp()) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 {
            break;
        }
    }
    Ok(ColdStart {
        lambda: (0.5 * (lo + hi)).exp(),
        unconstrained: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LognormalFit {
    pub mu: f64,
    pub sigma: f64,
    /// `sigma` hit the 1e-6 floor (degenerate sample).
    pub floored: bool,
}

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Log-moment fit: mean and unbiased standard deviation of `ln x`.
pub fn fit_lognormal(samples: &[f64]) -> Result<LognormalFit> {
    if samples.len() < 2 {
        return Err(Error::invalid("samples", "need at least 2 samples"));
    }
    if let Some(bad) = samples.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Domain { what: "sample", value: *bad });
    }
    let n = samples.len() as f64;
    let mu = samples.iter().map(|s| s.ln()).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.ln() - mu).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt();
    Ok(if sigma < SIGMA_FLOOR {
        LognormalFit {
            mu,
            sigma: SIGMA_FLOOR,
            floored: true,
        }
    } else {
        LognormalFit {
            mu,
            sigma,
            floored: false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal};

    fn standard() -> PlacementPriors {
        PlacementPriors::new(0.0, 1.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn expected_phi_affine_examples() {
        assert!((expected_phi_affine(0.0, 1.0) - 0.841_345).abs() < 1e-6);
        assert_eq!(expected_phi_affine(1.0, 0.0), 0.5);
        assert!((expected_phi_affine(3.0, 2.0) - 0.736_455_371_567_231).abs() < 1e-12);
    }

    #[test]
    fn spend_closed_form_examples() {
        let p = standard();
        let s = expected_spend_closed_form(&p, (-1.0f64).exp()).unwrap();
        assert!((s - 0.5f64.exp() * 0.5).abs() < 1e-15);
        assert!((s - 0.824_361).abs() < 1e-6);
        assert!(expected_spend_closed_form(&p, 1e300).unwrap() < 1e-100);
        let near_zero = expected_spend_closed_form(&p, 1e-300).unwrap();
        assert!((near_zero - p.mean_competing_bid()).abs() < 1e-12);
        assert!(expected_spend_closed_form(&p, 0.0).is_err());
    }

    #[test]
    fn solve_lambda0_examples() {
        let p = standard();
        let target = 0.5f64.exp() * 0.5;
        let sol = solve_lambda0(&p, target, 1.0).unwrap();
        assert!(!sol.unconstrained);
        assert!((sol.lambda - (-1.0f64).exp()).abs() < 1e-12);

        let p2 = PlacementPriors::new(0.3, 0.8, -0.2, 0.5, 1.0).unwrap();
        let half = 0.5 * p2.mean_competing_bid();
        let sol = solve_lambda0(&p2, 100.0 * half, 100.0).unwrap();
        assert!((sol.lambda.ln() - (-0.2 - 0.3 - 0.64)).abs() < 1e-12);

        let sol = solve_lambda0(&p, p.mean_competing_bid() * 10.0, 10.0).unwrap();
        assert!(sol.unconstrained);
        assert_eq!(sol.lambda, LAMBDA_MIN);
    }

    #[test]
    fn back_substitution_residual() {
        for (mu, sigma, mp, sp, bt) in [
            (0.0, 1.0, 0.0, 1.0, 0.3),
            (-1.0, 0.4, 0.5, 1.2, 0.2),
            (1.2, 0.9, -0.7, 0.3, 1.5),
        ] {
            let p = PlacementPriors::new(mu, sigma, mp, sp, 1.0).unwrap();
            let sol = solve_lambda0(&p, bt, 1.0).unwrap();
            let s = expected_spend_closed_form(&p, sol.lambda).unwrap();
            assert!((s - bt).abs() <= 1e-9 * bt, "residual {}", s - bt);
        }
    }

    #[test]
    fn multi_placement_reductions() {
        let one = PlacementPriors::new(0.2, 0.7, 0.1, 0.9, 1000.0).unwrap();
        let single = solve_lambda0(&one, 300.0, 1000.0).unwrap();
        let via_multi = solve_lambda0_multi(&[one], 300.0).unwrap();
        assert!((single.lambda - via_multi.lambda).abs() <= 1e-9 * single.lambda);

        let half = PlacementPriors {
            opportunities: 500.0,
            ..one
        };
        let split = solve_lambda0_multi(&[half, half], 300.0).unwrap();
        assert!((split.lambda - single.lambda).abs() <= 1e-9 * single.lambda);

        let other = PlacementPriors::new(-0.5, 0.4, 0.3, 0.6, 2000.0).unwrap();
        let both = solve_lambda0_multi(&[one, other], 500.0).unwrap();
        let spend = 1000.0 * expected_spend_closed_form(&one, both.lambda).unwrap()
            + 2000.0 * expected_spend_closed_form(&other, both.lambda).unwrap();
        assert!((spend - 500.0).abs() <= 1e-6 * 500.0);

        let rich = solve_lambda0_multi(&[one, other], 1e9).unwrap();
        assert!(rich.unconstrained);
        assert!(solve_lambda0_multi(&[], 1.0).is_err());
    }

    #[test]
    fn fit_lognormal_examples() {
        let e2 = 2.0f64.exp();
        let fit = fit_lognormal(&[e2, e2, e2]).unwrap();
        assert!((fit.mu - 2.0).abs() < 1e-15);
        assert_eq!(fit.sigma, SIGMA_FLOOR);
        assert!(fit.floored);

        let fit = fit_lognormal(&[1.0f64.exp(), 3.0f64.exp()]).unwrap();
        assert!((fit.mu - 2.0).abs() < 1e-15);
        assert!((fit.sigma - 2.0f64.sqrt()).abs() < 1e-15);

        assert!(fit_lognormal(&[1.0]).is_err());
        assert!(fit_lognormal(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn fit_lognormal_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = LogNormal::new(0.5, 0.8).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = fit_lognormal(&samples).unwrap();
        assert!((fit.mu - 0.5).abs() < 0.01);
        assert!((fit.sigma - 0.8).abs() < 0.01);
    }
}
