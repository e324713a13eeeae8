//! Online multiplier control.
//!
//! The budget multiplier is kept in normalized form `λ̃ = λ/λ'` and updated
//! once per batch from the ratio `R` of observed spend to the on-pace
//! target. Three rules are available: follow-the-leader replay, additive
//! mirror descent and multiplicative mirror descent. Cost-target and window
//! multipliers follow their own slack with the same step size.

use serde::{Deserialize, Serialize};

use crate::bid_engine::{adjusted_value, BidDecision, BidEngine, MultiplierVector, LAMBDA_MIN};
use crate::constraints::{ConstraintSet, IntervalRange};
use crate::error::{Error, Result};
use crate::mechanisms::{MechanismSpec, Outcome};
use crate::oracle::{HindsightOracle, LogRecord, OpportunityLog, LAMBDA_MAX};

/// Bounds on `λ̃`, i.e. `λ ∈ [1e-9, 1e9]·λ'`.
pub const LAMBDA_TILDE_MIN: f64 = 1e-9;
pub const LAMBDA_TILDE_MAX: f64 = 1e9;
/// Below this many charge events per batch the spend estimate is smoothed.
pub const SPARSE_CHARGES: usize = 10;
/// Half-life, in batches, of the smoothed spend rate.
pub const EWMA_HALF_LIFE: f64 = 5.0;
/// Largest spend-to-target ratio fed to the constraint multipliers.
const RATIO_CAP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacingMode {
    Ftl,
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTrigger {
    /// Update after this many opportunities.
    Opportunities(usize),
    /// Update at the end of every this many intervals.
    Intervals(usize),
}

impl Default for BatchTrigger {
    fn default() -> Self {
        BatchTrigger::Opportunities(200)
    }
}

/// Traffic forecast as configured. Missing numbers are filled in from the
/// scenario's intensity schedule by [`ForecastModel::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ForecastModel {
    Total {
        #[serde(default)]
        opportunities: Option<f64>,
    },
    Relative {
        #[serde(default)]
        shares: Option<Vec<f64>>,
    },
}

impl Default for ForecastModel {
    fn default() -> Self {
        ForecastModel::Total { opportunities: None }
    }
}

impl ForecastModel {
    /// Per-interval expected counts. `schedule` is the expected opportunity
    /// count per interval implied by the scenario.
    pub fn resolve(&self, schedule: &[f64]) -> Result<Forecast> {
        let horizon = schedule.len();
        if horizon == 0 {
            return Err(Error::Config("forecast needs a horizon of at least one interval".into()));
        }
        let scheduled: f64 = schedule.iter().sum();
        match self {
            ForecastModel::Total { opportunities } => {
                let expected = match opportunities {
                    Some(t) => {
                        if !(*t > 0.0 && t.is_finite()) {
                            return Err(Error::Config(format!("forecast opportunities must be > 0, got {t}")));
                        }
                        if scheduled > 0.0 {
                            schedule.iter().map(|x| x / scheduled * t).collect()
                        } else {
                            vec![t / horizon as f64; horizon]
                        }
                    }
                    None => schedule.to_vec(),
                };
                Forecast::new(expected, false)
            }
            ForecastModel::Relative { shares } => {
                let expected = match shares {
                    Some(r) => {
                        if r.len() != horizon {
                            return Err(Error::Config(format!(
                                "forecast shares has {} entries, horizon is {horizon}",
                                r.len()
                            )));
                        }
                        if r.iter().any(|x| !(*x >= 0.0)) {
                            return Err(Error::Config("forecast shares must be >= 0".into()));
                        }
                        let sum: f64 = r.iter().sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            return Err(Error::Config(format!("forecast shares sum to {sum}, expected 1")));
                        }
                        let scale = if scheduled > 0.0 { scheduled } else { 1.0 };
                        r.iter().map(|x| x * scale).collect()
                    }
                    None => schedule.to_vec(),
                };
                Forecast::new(expected, true)
            }
        }
    }
}

/// Resolved forecast: expected opportunity count per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    expected: Vec<f64>,
    total: f64,
    relative: bool,
}

impl Forecast {
    pub fn new(expected: Vec<f64>, relative: bool) -> Result<Self> {
        if expected.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("forecast counts must be finite and >= 0".into()));
        }
        let total = expected.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("forecast total must be > 0".into()));
        }
        Ok(Forecast {
            expected,
            total,
            relative,
        })
    }

    /// `T` opportunities spread evenly over `horizon` intervals.
    pub fn uniform(total: f64, horizon: usize) -> Result<Self> {
        Forecast::new(vec![total / horizon.max(1) as f64; horizon.max(1)], false)
    }

    pub fn is_relative(&self) -> bool {
        self.relative
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn horizon(&self) -> usize {
        self.expected.len()
    }

    /// Expected opportunities over intervals `[start, end)`.
    pub fn expected_in(&self, start: usize, end: usize) -> f64 {
        let end = end.min(self.expected.len());
        if start >= end {
            return 0.0;
        }
        self.expected[start..end].iter().sum()
    }

    /// Forecast share `r̂` of intervals `[start, end)`.
    pub fn share(&self, start: usize, end: usize) -> Result<f64> {
        if start >= self.expected.len() {
            return Err(Error::MissingForecast(start));
        }
        Ok(self.expected_in(start, end) / self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacingConfig {
    pub mode: PacingMode,
    /// Raw step `ε` in multiplier units per currency.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Dimensionless step `ξ = εB/λ'`.
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub batch: BatchTrigger,
    #[serde(default)]
    pub forecast: ForecastModel,
    #[serde(default)]
    pub mpc: bool,
    /// FTL look-back in opportunities; full history when absent.
    #[serde(default)]
    pub ftl_window: Option<usize>,
}

impl PacingConfig {
    pub fn new(mode: PacingMode, xi: f64, batch: BatchTrigger) -> Self {
        PacingConfig {
            mode,
            epsilon: None,
            xi: Some(xi),
            batch,
            forecast: ForecastModel::default(),
            mpc: false,
            ftl_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.epsilon, self.xi) {
            (Some(e), None) if e > 0.0 && e.is_finite() => {}
            (None, Some(x)) if x > 0.0 && x.is_finite() => {}
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("agent: set exactly one of epsilon and xi".into()))
            }
            _ => return Err(Error::Config("agent: step size must be finite and > 0".into())),
        }
        match self.batch {
            BatchTrigger::Opportunities(0) | BatchTrigger::Intervals(0) => {
                return Err(Error::Config("agent: batch size must be > 0".into()))
            }
            BatchTrigger::Opportunities(_) if matches!(self.forecast, ForecastModel::Relative { .. }) => {
                return Err(Error::Config(
                    "agent: relative forecast needs interval batching".into(),
                ))
            }
            _ => {}
        }
        if self.ftl_window == Some(0) {
            return Err(Error::Config("agent: ftl_window must be > 0".into()));
        }
        Ok(())
    }

    /// `ξ`, converting from `ε` when needed.
    pub fn xi_for(&self, budget: f64, lambda_prime: f64) -> f64 {
        match (self.xi, self.epsilon) {
            (Some(xi), _) => xi,
            (None, Some(eps)) => eps * budget / lambda_prime,
            (None, None) => 0.0,
        }
    }
}

/// On-pace spend for a batch of `n` opportunities: `(B/T)·n`.
pub fn total_target(budget: f64, horizon: f64, n: f64) -> f64 {
    budget / horizon * n
}

/// On-pace spend for a batch with forecast share `r̂`: `B·r̂`.
pub fn relative_target(budget: f64, share: f64) -> f64 {
    budget * share
}

/// Remaining-budget target `(B - B_{t+N})/(T - t - N)·N`; `None` once the
/// forecast horizon is used up.
pub fn mpc_target(budget: f64, spent_after: f64, horizon: f64, seen_after: f64, n: f64) -> Option<f64> {
    let remaining = horizon - seen_after;
    (remaining > 0.0).then(|| (budget - spent_after).max(0.0) / remaining * n)
}

/// Batch dual gradient: on-pace target minus spend.
pub fn dual_gradient(target: f64, spend: f64) -> f64 {
    target - spend
}

/// Spend-to-target ratio `R_dt`; `None` when the target is not positive.
pub fn compute_r_dt(target: f64, spend: f64) -> Option<f64> {
    (target > 0.0).then(|| spend / target)
}

/// `max(λ_min, λ - ε·grad)`.
pub fn update_additive(lambda: f64, epsilon: f64, grad: f64) -> f64 {
    (lambda - epsilon * grad).max(LAMBDA_MIN)
}

/// `λ·exp(-ε·grad)` clamped to `[λ_min, λ_max]`.
pub fn update_multiplicative(lambda: f64, epsilon: f64, grad: f64) -> f64 {
    (lambda * (-epsilon * grad).exp()).clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// `λ̃ - η(1 - R)` within the normalized bounds.
pub fn update_additive_normalized(lambda_tilde: f64, eta: f64, r: f64) -> f64 {
    (lambda_tilde - eta * (1.0 - r)).clamp(LAMBDA_TILDE_MIN, LAMBDA_TILDE_MAX)
}

/// `λ̃·exp(-η(1 - R))` within the normalized bounds.
pub fn update_multiplicative_normalized(lambda_tilde: f64, eta: f64, r: f64) -> f64 {
    (lambda_tilde * (-eta * (1.0 - r)).exp()).clamp(LAMBDA_TILDE_MIN, LAMBDA_TILDE_MAX)
}

/// `η = ξ·N/T`.
pub fn step_size(xi: f64, n: f64, horizon: f64) -> f64 {
    xi * n / horizon
}

/// `λ̃ = λ/λ'`.
pub fn normalize(lambda: f64, lambda_prime: f64) -> Result<f64> {
    if !(lambda_prime > 0.0 && lambda_prime.is_finite()) {
        return Err(Error::Domain { what: "lambda_prime", value: lambda_prime });
    }
    Ok(lambda / lambda_prime)
}

fn capped_ratio(observed: f64, target: f64) -> f64 {
    if target > 0.0 {
        (observed / target).min(RATIO_CAP)
    } else if observed > 0.0 {
        RATIO_CAP
    } else {
        1.0
    }
}

/// Cost-target multiplier: `[μ̃ + η(S/(C·value) - 1)]₊`.
pub fn update_cost_multiplier(mu_tilde: f64, eta: f64, spend: f64, value: f64, cost_target: f64) -> f64 {
    (mu_tilde + eta * (capped_ratio(spend, cost_target * value) - 1.0)).max(0.0)
}

/// Delivery-window multiplier: `[λ̃_k - η(1 - S/target)]₊`.
pub fn update_window_lambda(lambda_k: f64, eta: f64, spend: f64, target: f64) -> f64 {
    (lambda_k - eta * (1.0 - capped_ratio(spend, target))).max(0.0)
}

/// Guarantee-window boost: `[μ_k + η(1 - value/target)]₊`.
pub fn update_window_mu(mu_k: f64, eta: f64, value: f64, target: f64) -> f64 {
    let q = if target > 0.0 { (value / target).min(RATIO_CAP) } else { RATIO_CAP };
    (mu_k + eta * (1.0 - q)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtlStep {
    pub lambda: f64,
    /// Replayed spend stays under target even at the floor.
    pub unconstrained: bool,
}

/// Hindsight-best `λ` on `log` at an average spend of `budget_per_opportunity`.
pub fn ftl_update(oracle: &HindsightOracle, log: &OpportunityLog, budget_per_opportunity: f64) -> Result<FtlStep> {
    if log.is_empty() {
        return Err(Error::invalid("log", "FTL needs at least one past opportunity"));
    }
    let sol = oracle.solve_lambda_star(log, budget_per_opportunity * log.len() as f64)?;
    Ok(FtlStep {
        lambda: sol.lambda,
        unconstrained: sol.unconstrained,
    })
}

/// Per-batch accumulators, reset at each batch boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchAccumulator {
    pub spend: f64,
    pub opportunities: usize,
    pub value: f64,
    pub charges: usize,
    pub intervals_closed: usize,
    /// First interval touched by the batch.
    pub start_interval: Option<usize>,
    pub window_spend: f64,
    pub window_opportunities: usize,
    pub guarantee_value: f64,
    pub guarantee_opportunities: usize,
    /// Opportunities weighted by the spend plan; equals `opportunities`
    /// without one.
    pub planned: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacingState {
    pub lambda_tilde: f64,
    pub lambda_prime: f64,
    /// Cost multiplier over `λ'`.
    pub mu_tilde: f64,
    /// Active delivery-window multiplier over `λ'`.
    pub window_lambda_tilde: f64,
    /// Active guarantee boost (dimensionless).
    pub window_mu: f64,
    pub budget: f64,
    pub spent_total: f64,
    pub value_total: f64,
    pub opportunities_seen: usize,
    /// `opportunities_seen` weighted by the spend plan.
    pub planned_seen: f64,
    pub batch: BatchAccumulator,
    pub delivery_spend: Vec<f64>,
    pub guarantee_value: Vec<f64>,
    pub current_interval: usize,
    pub seen_in_interval: usize,
}

impl PacingState {
    pub fn new(budget: f64, lambda_prime: f64, constraints: &ConstraintSet) -> Result<Self> {
        if !(lambda_prime > 0.0 && lambda_prime.is_finite()) {
            return Err(Error::Domain { what: "lambda_prime", value: lambda_prime });
        }
        Ok(PacingState {
            lambda_tilde: 1.0,
            lambda_prime,
            mu_tilde: 0.0,
            window_lambda_tilde: 0.0,
            window_mu: 0.0,
            budget,
            spent_total: 0.0,
            value_total: 0.0,
            opportunities_seen: 0,
            planned_seen: 0.0,
            batch: BatchAccumulator::default(),
            delivery_spend: vec![0.0; constraints.delivery_windows.len()],
            guarantee_value: vec![0.0; constraints.guarantee_windows.len()],
            current_interval: 0,
            seen_in_interval: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_tilde * self.lambda_prime
    }

    pub fn budget_exhausted(&self) -> bool {
        self.spent_total >= self.budget
    }
}

/// One batch boundary as seen by the controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub interval: usize,
    pub opportunities: usize,
    pub spend_estimate: f64,
    pub r_dt: Option<f64>,
    pub lambda_tilde: f64,
    /// No traffic or no positive target: multipliers left unchanged.
    pub skipped: bool,
}

/// Prior quantile logs of each window's expected traffic, used to set a
/// window multiplier when its window opens.
#[derive(Debug, Clone, Default)]
pub struct WindowPriors {
    pub delivery: Vec<OpportunityLog>,
    pub guarantee: Vec<OpportunityLog>,
}

/// Smallest `x` in `[0, hi]` with `ok(x)`, assuming `ok` turns true once;
/// `hi` when it never does.
fn smallest_passing(hi: f64, mut ok: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    if ok(0.0)? {
        return Ok(0.0);
    }
    if !ok(hi)? {
        return Ok(hi);
    }
    let (mut lo, mut hi) = ((hi * 1e-12).ln(), hi.ln());
    if ok(lo.exp())? {
        return Ok(lo.exp());
    }
    for _ in 0..100 {
        if hi - lo <= 1e-6 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid.exp())? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi.exp())
}

#[derive(Debug, Clone)]
pub struct PacingAgent {
    config: PacingConfig,
    constraints: ConstraintSet,
    forecast: Forecast,
    engine: BidEngine,
    xi: f64,
    state: PacingState,
    history: OpportunityLog,
    history_mechs: Vec<Option<usize>>,
    spend_rate_ewma: Option<f64>,
    window_priors: WindowPriors,
    /// Relative spend rate per interval, scaled so the forecast traffic
    /// weighs `T` in total.
    spend_plan: Option<Vec<f64>>,
    started: bool,
}

impl PacingAgent {
    /// Agent starting at `λ = lambda0`, which also becomes the normalizer `λ'`.
    pub fn new(
        config: PacingConfig,
        constraints: ConstraintSet,
        forecast: Forecast,
        engine: BidEngine,
        lambda0: f64,
    ) -> Result<Self> {
        config.validate()?;
        constraints.validate()?;
        if config.forecast_is_relative() != forecast.is_relative() {
            return Err(Error::Config("forecast kind does not match the pacing config".into()));
        }
        let state = PacingState::new(constraints.budget, lambda0, &constraints)?;
        let xi = config.xi_for(constraints.budget, lambda0);
        Ok(PacingAgent {
            config,
            constraints,
            forecast,
            engine,
            xi,
            state,
            history: OpportunityLog::new(),
            history_mechs: Vec::new(),
            spend_rate_ewma: None,
            window_priors: WindowPriors::default(),
            spend_plan: None,
            started: false,
        })
    }

    /// Use `λ'` different from the starting multiplier.
    pub fn with_normalizer(mut self, lambda_prime: f64) -> Result<Self> {
        let lambda = self.state.lambda();
        self.state.lambda_tilde = normalize(lambda, lambda_prime)?.clamp(LAMBDA_TILDE_MIN, LAMBDA_TILDE_MAX);
        self.state.lambda_prime = lambda_prime;
        self.xi = self.config.xi_for(self.constraints.budget, lambda_prime);
        Ok(self)
    }

    /// Start the cost multiplier at `mu` (currency scale).
    pub fn with_cost_multiplier(mut self, mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::Domain { what: "mu", value: mu });
        }
        self.state.mu_tilde = mu / self.state.lambda_prime;
        Ok(self)
    }

    pub fn with_window_priors(mut self, priors: WindowPriors) -> Self {
        self.window_priors = priors;
        self
    }

    /// Pace spend unevenly: interval `t` is targeted at `weights[t]` times
    /// the flat per-opportunity rate, after rescaling so the budget is still
    /// spread over the whole forecast.
    pub fn with_spend_plan(mut self, weights: Vec<f64>) -> Result<Self> {
        let f = &self.forecast;
        if weights.len() != f.horizon() {
            return Err(Error::invalid("spend_plan", "needs one weight per forecast interval"));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("spend_plan", "weights must be finite and >= 0"));
        }
        let mass: f64 = weights.iter().enumerate().map(|(t, w)| w * f.expected_in(t, t + 1)).sum();
        if !(mass > 0.0) {
            return Err(Error::invalid("spend_plan", "plan puts no weight on forecast traffic"));
        }
        let scale = f.total() / mass;
        self.spend_plan = Some(weights.into_iter().map(|w| w * scale).collect());
        Ok(self)
    }

    fn plan_weight(&self, interval: usize) -> f64 {
        self.spend_plan
            .as_ref()
            .map_or(1.0, |p| p.get(interval).copied().unwrap_or(1.0))
    }

    /// Forecast share of `[start, end)` with the spend plan applied.
    fn planned_share(&self, start: usize, end: usize) -> Result<f64> {
        let f = &self.forecast;
        match &self.spend_plan {
            None => f.share(start, end),
            Some(p) => {
                if start >= f.horizon() {
                    return Err(Error::MissingForecast(start));
                }
                let end = end.min(f.horizon());
                let part: f64 = (start..end).map(|t| p[t] * f.expected_in(t, t + 1)).sum();
                Ok(part / f.total())
            }
        }
    }

    pub fn state(&self) -> &PacingState {
        &self.state
    }

    pub fn config(&self) -> &PacingConfig {
        &self.config
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Multipliers in effect for an opportunity in `interval`.
    pub fn multipliers(&self, interval: usize) -> MultiplierVector {
        let s = &self.state;
        let has_cost = self.constraints.cost_target.is_some();
        MultiplierVector {
            lambda: s.lambda(),
            mu: if has_cost { s.mu_tilde * s.lambda_prime } else { 0.0 },
            cost_target: self.constraints.cost_target,
            window_lambda: self
                .constraints
                .delivery_window_at(interval)
                .map(|_| s.window_lambda_tilde * s.lambda_prime),
            window_mu: self.constraints.guarantee_window_at(interval).map(|_| s.window_mu),
        }
    }

    /// Bidding has halted for `interval`: budget spent or window cap reached.
    pub fn halted(&self, interval: usize) -> bool {
        if self.state.budget_exhausted() {
            return true;
        }
        match self.constraints.delivery_window_at(interval) {
            Some(k) => self.state.delivery_spend[k] >= self.constraints.delivery_windows[k].cap,
            None => false,
        }
    }

    pub fn bid(&self, interval: usize, mech: &MechanismSpec, value: f64) -> Result<BidDecision> {
        let m = self.multipliers(interval);
        if self.halted(interval) {
            let adjusted = adjusted_value(value, &m)?.value;
            return Ok(BidDecision {
                bid: 0.0,
                adjusted_value: adjusted,
                surplus_at_bid: 0.0,
                fallback: false,
            });
        }
        self.engine.bid_for(mech, value, &m)
    }

    /// Enter `interval`. Window multipliers are zero outside their window
    /// and warm-started from the window's prior when it opens.
    pub fn begin_interval(&mut self, interval: usize) {
        let first = !self.started;
        self.started = true;
        let previous = self.state.current_interval;
        if interval != previous {
            self.state.seen_in_interval = 0;
        }
        self.state.current_interval = interval;
        let delivery = self.constraints.delivery_window_at(interval);
        if first || delivery != self.constraints.delivery_window_at(previous) {
            let warm = delivery.map_or(Ok(0.0), |k| self.warm_window_lambda(k));
            self.state.window_lambda_tilde = warm.unwrap_or(0.0);
        }
        let guarantee = self.constraints.guarantee_window_at(interval);
        if first || guarantee != self.constraints.guarantee_window_at(previous) {
            let warm = guarantee.map_or(Ok(0.0), |k| self.warm_window_mu(k));
            self.state.window_mu = warm.unwrap_or(0.0);
        }
    }

    /// `λ̃_k` bringing the window's prior spend down to its cap.
    fn warm_window_lambda(&self, k: usize) -> Result<f64> {
        let Some(prior) = self.window_priors.delivery.get(k) else {
            return Ok(0.0);
        };
        let oracle = HindsightOracle::new(self.engine);
        let cap = self.constraints.delivery_windows[k].cap;
        let base = self.multipliers(self.state.current_interval);
        let lp = self.state.lambda_prime;
        smallest_passing(LAMBDA_TILDE_MAX, |x| {
            let m = MultiplierVector {
                window_lambda: Some(x * lp),
                ..base
            };
            Ok(oracle.replay(prior, &m)?.delivery_spend <= cap)
        })
    }

    /// `μ_k` lifting the window's prior value up to its floor.
    fn warm_window_mu(&self, k: usize) -> Result<f64> {
        let Some(prior) = self.window_priors.guarantee.get(k) else {
            return Ok(0.0);
        };
        let oracle = HindsightOracle::new(self.engine);
        let floor = self.constraints.guarantee_windows[k].floor;
        let base = self.multipliers(self.state.current_interval);
        smallest_passing(crate::oracle::WINDOW_MU_MAX, |x| {
            let m = MultiplierVector {
                window_mu: Some(x),
                ..base
            };
            Ok(oracle.replay(prior, &m)?.guarantee_value >= floor)
        })
    }

    /// Record the result of one auction; returns the update when the
    /// opportunity closes a batch.
    pub fn observe(
        &mut self,
        interval: usize,
        placement: usize,
        mech: &MechanismSpec,
        value: f64,
        outcome: &Outcome,
    ) -> Result<Option<UpdateRecord>> {
        if !self.started || interval != self.state.current_interval {
            self.begin_interval(interval);
        }
        let won_value = if outcome.won { value } else { 0.0 };
        let delivery = self.constraints.delivery_window_at(interval);
        let guarantee = self.constraints.guarantee_window_at(interval);
        let weight = self.plan_weight(interval);
        {
            let s = &mut self.state;
            s.planned_seen += weight;
            s.spent_total += outcome.cost;
            s.value_total += won_value;
            s.opportunities_seen += 1;
            s.seen_in_interval += 1;
            let b = &mut s.batch;
            b.start_interval.get_or_insert(interval);
            b.spend += outcome.cost;
            b.value += won_value;
            b.opportunities += 1;
            b.planned += weight;
            b.charges += (outcome.cost > 0.0) as usize;
            if let Some(k) = delivery {
                s.delivery_spend[k] += outcome.cost;
                b.window_spend += outcome.cost;
                b.window_opportunities += 1;
            }
            if let Some(k) = guarantee {
                s.guarantee_value[k] += won_value;
                b.guarantee_value += won_value;
                b.guarantee_opportunities += 1;
            }
        }
        if self.config.mode == PacingMode::Ftl {
            self.remember(placement, mech, value, outcome)?;
        }
        match self.config.batch {
            BatchTrigger::Opportunities(n) if self.state.batch.opportunities >= n => self.update(interval).map(Some),
            _ => Ok(None),
        }
    }

    fn remember(&mut self, placement: usize, mech: &MechanismSpec, value: f64, outcome: &Outcome) -> Result<()> {
        if self.history_mechs.len() <= placement {
            self.history_mechs.resize(placement + 1, None);
        }
        let idx = match self.history_mechs[placement] {
            Some(i) if self.history.mechanisms()[i] == *mech => i,
            _ => {
                let i = self.history.add_mechanism(mech.clone());
                self.history_mechs[placement] = Some(i);
                i
            }
        };
        let time = self.state.opportunities_seen as f64;
        self.history
            .push(LogRecord::realized(time, placement, value, idx, outcome.landscape))
    }

    /// Close `interval`; returns the update when it closes a batch.
    pub fn end_interval(&mut self, interval: usize) -> Result<Option<UpdateRecord>> {
        let b = &mut self.state.batch;
        b.start_interval.get_or_insert(interval);
        b.intervals_closed += 1;
        match self.config.batch {
            BatchTrigger::Intervals(k) if b.intervals_closed >= k => self.update(interval).map(Some),
            _ => Ok(None),
        }
    }

    /// Smoothed batch spend when charges are sparse.
    fn spend_estimate(&mut self) -> f64 {
        let b = &self.state.batch;
        let n = b.opportunities as f64;
        let rate = b.spend / n;
        let alpha = 1.0 - 0.5_f64.powf(1.0 / EWMA_HALF_LIFE);
        let smoothed = match self.spend_rate_ewma {
            Some(prev) => alpha * rate + (1.0 - alpha) * prev,
            None => rate,
        };
        self.spend_rate_ewma = Some(smoothed);
        if b.charges < SPARSE_CHARGES {
            smoothed * n
        } else {
            b.spend
        }
    }

    /// Batch boundary at the end of (or within) `interval`.
    fn update(&mut self, interval: usize) -> Result<UpdateRecord> {
        let batch = std::mem::take(&mut self.state.batch);
        let n = batch.opportunities;
        let mut record = UpdateRecord {
            interval,
            opportunities: n,
            spend_estimate: batch.spend,
            r_dt: None,
            lambda_tilde: self.state.lambda_tilde,
            skipped: true,
        };
        if n == 0 {
            return Ok(record);
        }
        self.state.batch = batch;
        let spend = self.spend_estimate();
        let batch = std::mem::take(&mut self.state.batch);
        record.spend_estimate = spend;

        let start = batch.start_interval.unwrap_or(interval);
        let nf = n as f64;
        let (target, eta) = self.pace(start, interval, nf, batch.planned)?;
        self.update_constraints(&batch, interval, eta)?;
        let Some(r) = compute_r_dt(target, spend) else {
            return Ok(record);
        };
        record.r_dt = Some(r);
        let s = &mut self.state;
        s.lambda_tilde = match self.config.mode {
            PacingMode::Additive => update_additive_normalized(s.lambda_tilde, eta, r),
            PacingMode::Multiplicative => update_multiplicative_normalized(s.lambda_tilde, eta, r),
            PacingMode::Ftl => {
                let log = match self.config.ftl_window {
                    Some(w) if w < self.history.len() => {
                        self.history.slice(self.history.len() - w..self.history.len())
                    }
                    _ => self.history.clone(),
                };
                let per_opp = target / nf;
                if per_opp > 0.0 {
                    let step = ftl_update(&HindsightOracle::new(self.engine), &log, per_opp)?;
                    (step.lambda / s.lambda_prime).clamp(LAMBDA_TILDE_MIN, LAMBDA_TILDE_MAX)
                } else {
                    s.lambda_tilde
                }
            }
        };
        record.lambda_tilde = s.lambda_tilde;
        record.skipped = false;
        Ok(record)
    }

    /// On-pace spend target and step size for a batch over intervals
    /// `[start, end]` holding `n` opportunities (`planned` after weighting).
    fn pace(&self, start: usize, end: usize, n: f64, planned: f64) -> Result<(f64, f64)> {
        let s = &self.state;
        let budget = s.budget;
        let f = &self.forecast;
        if f.is_relative() {
            let share = self.planned_share(start, end + 1)?;
            let mut target = relative_target(budget, share);
            if self.config.mpc {
                let remaining_share = self.planned_share(start, f.horizon()).unwrap_or(0.0);
                let after = self.planned_share(end + 1, f.horizon()).unwrap_or(0.0);
                if remaining_share > 0.0 && after > 0.0 {
                    // Remaining budget spread over the share still to come.
                    target = (budget - s.spent_total).max(0.0) * share / after;
                }
            }
            Ok((target, self.xi * f.share(start, end + 1)?))
        } else {
            let horizon = f.total();
            let mut target = total_target(budget, horizon, planned);
            if self.config.mpc {
                if let Some(t) = mpc_target(budget, s.spent_total, horizon, s.planned_seen, planned) {
                    target = t;
                }
            }
            Ok((target, step_size(self.xi, n, horizon)))
        }
    }

    fn update_constraints(&mut self, batch: &BatchAccumulator, interval: usize, eta: f64) -> Result<()> {
        if let Some(c) = self.constraints.cost_target {
            let s = &mut self.state;
            // The target binds on the episode total, so feed back the
            // running ratio and let early excess be worked off.
            s.mu_tilde = update_cost_multiplier(s.mu_tilde, eta, s.spent_total, s.value_total, c);
        }
        if let Some(k) = self.constraints.delivery_window_at(interval) {
            let w = &self.constraints.delivery_windows[k];
            let n = batch.window_opportunities as f64;
            if n > 0.0 {
                let (target, eta_k) = self.window_pace(w.intervals, n, w.cap, self.state.delivery_spend[k] - batch.window_spend);
                let s = &mut self.state;
                s.window_lambda_tilde = update_window_lambda(s.window_lambda_tilde, eta_k, batch.window_spend, target);
            }
        }
        if let Some(k) = self.constraints.guarantee_window_at(interval) {
            let w = &self.constraints.guarantee_windows[k];
            let n = batch.guarantee_opportunities as f64;
            if n > 0.0 {
                let (target, eta_k) = self.window_pace(w.intervals, n, w.floor, self.state.guarantee_value[k] - batch.guarantee_value);
                let s = &mut self.state;
                s.window_mu = update_window_mu(s.window_mu, eta_k, batch.guarantee_value, target);
            }
        }
        Ok(())
    }

    /// Batch target and step for a window: what is left of `goal` after
    /// `before`, prorated over the window's remaining expected traffic.
    fn window_pace(&self, range: IntervalRange, n: f64, goal: f64, before: f64) -> (f64, f64) {
        let window_total = self.forecast.expected_in(range.start, range.end);
        let remaining = self.remaining_in_window(range.start, range.end);
        let target = (goal - before).max(0.0) * n / (n + remaining);
        (target, self.xi * n / window_total.max(n))
    }

    /// Expected opportunities left in a window after the current position.
    fn remaining_in_window(&self, start: usize, end: usize) -> f64 {
        let s = &self.state;
        let now = s.current_interval;
        let later = self.forecast.expected_in((now + 1).max(start), end);
        let current = if (start..end).contains(&now) {
            (self.forecast.expected_in(now, now + 1) - s.seen_in_interval as f64).max(0.0)
        } else {
            0.0
        };
        later + current
    }
}

impl PacingConfig {
    fn forecast_is_relative(&self) -> bool {
        matches!(self.forecast, ForecastModel::Relative { .. })
    }
}
