//! Parametric auction models.
//!
//! A [`MechanismSpec`] couples an auction format with a reserve price and a
//! model of the highest competing bid. From those it derives the win
//! probability `G(b)`, the expected payment `H(b)`, their derivatives
//! `g(b)` and `h(b)`, and a sampler for realized auction outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuctionType {
    FirstPrice,
    SecondPrice,
}

/// Distribution of the highest competing bid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CompetitorModel {
    Lognormal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    Empirical(EmpiricalBids),
}

/// Sorted sample of observed competing bids with a step CDF.
///
/// The density is a Gaussian kernel estimate using Silverman's bandwidth
/// `1.06 σ̂ n^(-1/5)`, so bid inversion has a derivative to work with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmpirical", into = "RawEmpirical")]
pub struct EmpiricalBids {
    sorted: Vec<f64>,
    /// prefix[i] = sum of the i smallest samples.
    prefix: Vec<f64>,
    bandwidth: f64,
}

#[derive(Serialize, Deserialize)]
struct RawEmpirical {
    samples: Vec<f64>,
}

impl TryFrom<RawEmpirical> for EmpiricalBids {
    type Error = Error;

    fn try_from(raw: RawEmpirical) -> Result<Self> {
        EmpiricalBids::new(raw.samples)
    }
}

impl From<EmpiricalBids> for RawEmpirical {
    fn from(e: EmpiricalBids) -> Self {
        RawEmpirical { samples: e.sorted }
    }
}

impl EmpiricalBids {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("samples", "empirical model needs at least one sample"));
        }
        if samples.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("samples", "all samples must be finite and >= 0"));
        }
        samples.sort_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(samples.len() + 1);
        let mut acc = 0.0;
        prefix.push(0.0);
        for s in &samples {
            acc += s;
            prefix.push(acc);
        }
        let n = samples.len() as f64;
        let mean = acc / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        // A degenerate sample has no spread; keep the kernel from collapsing.
        let bandwidth = (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-6 * mean.max(1.0));
        Ok(EmpiricalBids {
            sorted: samples,
            prefix,
            bandwidth,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn count_le(&self, b: f64) -> usize {
        self.sorted.partition_point(|&s| s <= b)
    }

    fn is_atom(&self, b: f64) -> bool {
        let i = self.sorted.partition_point(|&s| s < b);
        let near = |s: f64| (s - b).abs() <= 1e-12 * s.abs().max(1.0);
        self.sorted.get(i).is_some_and(|&s| near(s))
            || i.checked_sub(1)
                .and_then(|j| self.sorted.get(j))
                .is_some_and(|&s| near(s))
    }

    fn kernel_density(&self, b: f64) -> f64 {
        let h = self.bandwidth;
        let n = self.sorted.len() as f64;
        self.sorted
            .iter()
            .map(|s| normal::pdf((b - s) / h))
            .sum::<f64>()
            / (n * h)
    }
}

impl CompetitorModel {
    pub fn lognormal(mu: f64, sigma: f64) -> Result<Self> {
        let m = CompetitorModel::Lognormal { mu, sigma };
        m.validate()?;
        Ok(m)
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let m = CompetitorModel::Uniform { lo, hi };
        m.validate()?;
        Ok(m)
    }

    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        Ok(CompetitorModel::Empirical(EmpiricalBids::new(samples)?))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CompetitorModel::Lognormal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(Error::invalid("mu", "must be finite"));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid("sigma", "must be > 0"));
                }
            }
            CompetitorModel::Uniform { lo, hi } => {
                if !(lo >= 0.0 && hi.is_finite() && lo < hi) {
                    return Err(Error::invalid("lo/hi", "need 0 <= lo < hi"));
                }
            }
            CompetitorModel::Empirical(_) => {}
        }
        Ok(())
    }

    /// Probability that the highest competing bid is `<= b`.
    pub fn cdf(&self, b: f64) -> f64 {
        if b <= 0.0 && !matches!(self, CompetitorModel::Empirical(_)) {
            return 0.0;
        }
        match self {
            CompetitorModel::Lognormal { mu, sigma } => normal::cdf((b.ln() - mu) / sigma),
            CompetitorModel::Uniform { lo, hi } => ((b - lo) / (hi - lo)).clamp(0.0, 1.0),
            CompetitorModel::Empirical(e) => {
                if b < 0.0 {
                    0.0
                } else {
                    e.count_le(b) as f64 / e.sorted.len() as f64
                }
            }
        }
    }

    /// Density of the competing bid. Empirical models use the kernel estimate
    /// and refuse to evaluate exactly on a sample atom.
    pub fn pdf(&self, b: f64) -> Result<f64> {
        Ok(match self {
            CompetitorModel::Lognormal { mu, sigma } => {
                if b <= 0.0 {
                    0.0
                } else {
                    normal::pdf((b.ln() - mu) / sigma) / (b * sigma)
                }
            }
            CompetitorModel::Uniform { lo, hi } => {
                if b < *lo || b > *hi {
                    0.0
                } else {
                    1.0 / (hi - lo)
                }
            }
            CompetitorModel::Empirical(e) => {
                if e.is_atom(b) {
                    return Err(Error::UnsupportedPoint(b));
                }
                e.kernel_density(b)
            }
        })
    }

    /// `F(b) / f(b)`, with the conventions `0/0 = 0` below the support and
    /// `x/0 = +inf` once the CDF is positive but the density vanishes.
    pub fn cdf_over_pdf(&self, b: f64) -> f64 {
        if let CompetitorModel::Lognormal { mu, sigma } = self {
            if b <= 0.0 {
                return 0.0;
            }
            let z = (b.ln() - mu) / sigma;
            return b * sigma * normal::mills_ratio_lower(z);
        }
        let cdf = self.cdf(b);
        if cdf <= 0.0 {
            return 0.0;
        }
        let pdf = match self {
            CompetitorModel::Empirical(e) => e.kernel_density(b),
            _ => self.pdf(b).unwrap_or(0.0),
        };
        if pdf <= 0.0 {
            f64::INFINITY
        } else {
            cdf / pdf
        }
    }

    /// Inverse CDF for `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            CompetitorModel::Lognormal { mu, sigma } => (mu + sigma * normal::quantile(u)).exp(),
            CompetitorModel::Uniform { lo, hi } => lo + u * (hi - lo),
            CompetitorModel::Empirical(e) => {
                let n = e.sorted.len();
                let i = ((u * n as f64).floor() as usize).min(n - 1);
                e.sorted[i]
            }
        }
    }

    /// Partial expectation `E[Z 1{Z <= b}]` of the competing bid `Z`.
    pub fn partial_expectation(&self, b: f64) -> f64 {
        if b <= 0.0 {
            return 0.0;
        }
        match self {
            CompetitorModel::Lognormal { mu, sigma } => {
                (mu + 0.5 * sigma * sigma).exp()
                    * normal::cdf((b.ln() - mu - sigma * sigma) / sigma)
            }
            CompetitorModel::Uniform { lo, hi } => {
                let top = b.min(*hi);
                if top <= *lo {
                    0.0
                } else {
                    (top * top - lo * lo) / (2.0 * (hi - lo))
                }
            }
            CompetitorModel::Empirical(e) => e.prefix[e.count_le(b)] / e.sorted.len() as f64,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            CompetitorModel::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            CompetitorModel::Uniform { lo, hi } => 0.5 * (lo + hi),
            CompetitorModel::Empirical(e) => e.prefix[e.sorted.len()] / e.sorted.len() as f64,
        }
    }

    /// Upper end of the support, `+inf` for unbounded families.
    pub fn support_max(&self) -> f64 {
        match self {
            CompetitorModel::Lognormal { .. } => f64::INFINITY,
            CompetitorModel::Uniform { hi, .. } => *hi,
            CompetitorModel::Empirical(e) => *e.sorted.last().expect("nonempty"),
        }
    }

    /// Shift the model in log space: every competing bid is scaled by `e^offset`.
    pub fn log_shifted(&self, offset: f64) -> CompetitorModel {
        if offset == 0.0 {
            return self.clone();
        }
        let scale = offset.exp();
        match self {
            CompetitorModel::Lognormal { mu, sigma } => CompetitorModel::Lognormal {
                mu: mu + offset,
                sigma: *sigma,
            },
            CompetitorModel::Uniform { lo, hi } => CompetitorModel::Uniform {
                lo: lo * scale,
                hi: hi * scale,
            },
            CompetitorModel::Empirical(e) => CompetitorModel::Empirical(
                EmpiricalBids::new(e.sorted.iter().map(|s| s * scale).collect())
                    .expect("scaling preserves validity"),
            ),
        }
    }
}

/// Realized competition for one auction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedLandscape {
    /// Minimum bid that wins, reserve included.
    pub clearing_bid: f64,
    /// Payment if won. For first price this is the bid placed at resolution.
    pub cost_if_won: f64,
}

impl RealizedLandscape {
    /// Resolve a (possibly counterfactual) bid against this landscape:
    /// returns the cost paid if `bid` wins.
    pub fn resolve(&self, auction: AuctionType, bid: f64) -> Option<f64> {
        if bid >= self.clearing_bid {
            Some(match auction {
                AuctionType::SecondPrice => self.clearing_bid,
                AuctionType::FirstPrice => bid,
            })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub won: bool,
    pub cost: f64,
    pub landscape: RealizedLandscape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub auction: AuctionType,
    #[serde(default)]
    pub reserve: f64,
    pub competitor: CompetitorModel,
}

fn check_bid(b: f64) -> Result<()> {
    if b >= 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain { what: "bid", value: b })
    }
}

impl MechanismSpec {
    pub fn new(auction: AuctionType, reserve: f64, competitor: CompetitorModel) -> Result<Self> {
        let m = MechanismSpec {
            auction,
            reserve,
            competitor,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn first_price(competitor: CompetitorModel) -> Self {
        MechanismSpec {
            auction: AuctionType::FirstPrice,
            reserve: 0.0,
            competitor,
        }
    }

    pub fn second_price(competitor: CompetitorModel) -> Self {
        MechanismSpec {
            auction: AuctionType::SecondPrice,
            reserve: 0.0,
            competitor,
        }
    }

    pub fn with_reserve(mut self, reserve: f64) -> Self {
        self.reserve = reserve;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reserve >= 0.0 && self.reserve.is_finite()) {
            return Err(Error::invalid("reserve", "must be finite and >= 0"));
        }
        self.competitor.validate()
    }

    /// Win probability `G(b)`; zero below the reserve, ties win.
    pub fn win_prob(&self, b: f64) -> Result<f64> {
        check_bid(b)?;
        Ok(self.win_prob_unchecked(b))
    }

    pub(crate) fn win_prob_unchecked(&self, b: f64) -> f64 {
        if b < self.reserve {
            0.0
        } else {
            self.competitor.cdf(b)
        }
    }

    /// Density `g(b)` of the win probability.
    pub fn win_density(&self, b: f64) -> Result<f64> {
        check_bid(b)?;
        if b < self.reserve {
            return Ok(0.0);
        }
        self.competitor.pdf(b)
    }

    /// Expected payment `H(b)`.
    ///
    /// Second price pays `max(c, reserve)`, so
    /// `H(b) = r F(r) + ∫_r^b z f(z) dz` for `b >= r`. First price pays the bid.
    pub fn expected_cost(&self, b: f64) -> Result<f64> {
        check_bid(b)?;
        Ok(self.expected_cost_unchecked(b))
    }

    pub(crate) fn expected_cost_unchecked(&self, b: f64) -> f64 {
        let r = self.reserve;
        if b < r {
            return 0.0;
        }
        match self.auction {
            AuctionType::FirstPrice => b * self.competitor.cdf(b),
            AuctionType::SecondPrice => {
                let pe = self.competitor.partial_expectation(b);
                if r > 0.0 {
                    r * self.competitor.cdf(r) + pe - self.competitor.partial_expectation(r)
                } else {
                    pe
                }
            }
        }
    }

    /// Derivative `h(b)` of the expected payment.
    pub fn cost_derivative(&self, b: f64) -> Result<f64> {
        let g = self.win_density(b)?;
        Ok(match self.auction {
            AuctionType::SecondPrice => b * g,
            AuctionType::FirstPrice => self.win_prob_unchecked(b) + b * g,
        })
    }

    /// Run one auction against a competing bid drawn by inverse CDF.
    pub fn simulate_outcome(&self, b: f64, draw: f64) -> Result<Outcome> {
        check_bid(b)?;
        if !(0.0..1.0).contains(&draw) {
            return Err(Error::Domain { what: "draw", value: draw });
        }
        let competing = self.competitor.quantile(draw);
        Ok(self.resolve_against(b, competing))
    }

    /// Resolve bid `b` against a known highest competing bid.
    pub fn resolve_against(&self, b: f64, competing: f64) -> Outcome {
        let clearing = competing.max(self.reserve);
        let cost_if_won = match self.auction {
            AuctionType::SecondPrice => clearing,
            AuctionType::FirstPrice => b,
        };
        let won = b >= clearing;
        Outcome {
            won,
            cost: if won { cost_if_won } else { 0.0 },
            landscape: RealizedLandscape {
                clearing_bid: clearing,
                cost_if_won,
            },
        }
    }

    /// Same mechanism with the competitor model shifted in log space.
    pub fn log_shifted(&self, offset: f64) -> MechanismSpec {
        MechanismSpec {
            auction: self.auction,
            reserve: self.reserve,
            competitor: self.competitor.log_shifted(offset),
        }
    }
}
