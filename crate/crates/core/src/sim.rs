//! Seeded multi-placement marketplace and episode runner.
//!
//! Opportunities arrive per interval and placement as Poisson counts and are
//! interleaved by a uniform jitter. Every random draw comes from a ChaCha8
//! stream keyed by `(seed, placement id, interval)`, so adding a placement
//! leaves the other placements' draws untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bid_engine::{BidEngine, MultiplierVector};
use crate::coldstart::{solve_lambda0_multi, PlacementPriors};
use crate::constraints::{ConstraintSet, IntervalRange};
use crate::error::{Error, Result};
use crate::mechanisms::{AuctionType, CompetitorModel, MechanismSpec, RealizedLandscape};
use crate::oracle::{HindsightOracle, KktConstraints, LogRecord, OpportunityLog};
use crate::pacing::{Forecast, PacingAgent, PacingConfig, UpdateRecord, WindowPriors};

pub const SCENARIO_VERSION: u32 = 1;

/// Value points per placement in the numeric cold start.
const COLDSTART_QUANTILES: usize = 256;

/// Log-normal value model `LN(μ', σ')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub mu: f64,
    pub sigma: f64,
}

/// Expected opportunities per interval: one number or one per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Intensity {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl Intensity {
    pub fn at(&self, interval: usize) -> f64 {
        match self {
            Intensity::Constant(x) => *x,
            Intensity::Schedule(s) => s.get(interval).copied().unwrap_or(0.0),
        }
    }
}

/// Drift knot: log-offsets applied at `interval`, linearly interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftKnot {
    pub interval: f64,
    /// Added to the competing-bid log-location `μ`.
    #[serde(default)]
    pub competitor: f64,
    /// Added to the value log-location `μ'`.
    #[serde(default)]
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriftOffsets {
    pub competitor: f64,
    pub value: f64,
}

/// Offsets at `interval` by piecewise-linear interpolation. At a repeated
/// knot position the later knot wins, which gives step changes.
pub fn apply_drift(knots: &[DriftKnot], interval: usize) -> Result<DriftOffsets> {
    let Some(first) = knots.first() else {
        return Ok(DriftOffsets::default());
    };
    let t = interval as f64;
    let last = knots[knots.len() - 1];
    if t < first.interval || t > last.interval {
        return Err(Error::Config(format!(
            "drift schedule covers [{}, {}], interval {interval} is outside",
            first.interval, last.interval
        )));
    }
    let i = knots.partition_point(|k| k.interval <= t);
    let hi = knots[i - 1];
    if hi.interval == t || i == knots.len() {
        return Ok(DriftOffsets {
            competitor: hi.competitor,
            value: hi.value,
        });
    }
    let (a, b) = (hi, knots[i]);
    let w = (t - a.interval) / (b.interval - a.interval);
    Ok(DriftOffsets {
        competitor: a.competitor + w * (b.competitor - a.competitor),
        value: a.value + w * (b.value - a.value),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub id: String,
    pub mechanism: MechanismSpec,
    pub value: ValueModel,
    pub intensity: Intensity,
    #[serde(default)]
    pub drift: Vec<DriftKnot>,
}

impl PlacementConfig {
    pub fn mechanism_at(&self, interval: usize) -> Result<MechanismSpec> {
        let off = apply_drift(&self.drift, interval)?;
        Ok(if off.competitor == 0.0 {
            self.mechanism.clone()
        } else {
            self.mechanism.log_shifted(off.competitor)
        })
    }

    pub fn value_at(&self, interval: usize) -> Result<ValueModel> {
        let off = apply_drift(&self.drift, interval)?;
        Ok(ValueModel {
            mu: self.value.mu + off.value,
            sigma: self.value.sigma,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentInit {
    /// Closed form (or its numeric counterpart) from the interval-0 priors.
    #[default]
    Coldstart,
    Lambda0(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    #[serde(flatten)]
    pub pacing: PacingConfig,
    #[serde(default)]
    pub init: AgentInit,
    /// Normalizer `λ'`; the starting multiplier when absent.
    #[serde(default)]
    pub normalizer: Option<f64>,
    #[serde(default)]
    pub bid_cap: Option<f64>,
}

fn default_interval_length() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub version: u32,
    /// Number of intervals.
    pub horizon: usize,
    #[serde(default = "default_interval_length")]
    pub interval_length: f64,
    pub placements: Vec<PlacementConfig>,
    pub constraints: ConstraintSet,
    pub agent: AgentConfig,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENARIO_VERSION {
            return Err(Error::Config(format!(
                "version: expected {SCENARIO_VERSION}, got {}",
                self.version
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon: must be > 0".into()));
        }
        if !(self.interval_length > 0.0) {
            return Err(Error::Config("interval_length: must be > 0".into()));
        }
        if self.placements.is_empty() {
            return Err(Error::Config("placements: need at least one".into()));
        }
        for (i, p) in self.placements.iter().enumerate() {
            let field = |f: &str| format!("placements[{i}] ({}).{f}", p.id);
            if self.placements[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::Config(format!("{}: duplicate id", field("id"))));
            }
            p.mechanism
                .validate()
                .map_err(|e| Error::Config(format!("{}: {e}", field("mechanism"))))?;
            if !(p.value.sigma > 0.0 && p.value.mu.is_finite()) {
                return Err(Error::Config(format!("{}: sigma must be > 0", field("value"))));
            }
            match &p.intensity {
                Intensity::Constant(x) if !(*x >= 0.0 && x.is_finite()) => {
                    return Err(Error::Config(format!("{}: must be >= 0", field("intensity"))))
                }
                Intensity::Schedule(s) if s.len() != self.horizon => {
                    return Err(Error::Config(format!(
                        "{}: schedule has {} entries, horizon is {}",
                        field("intensity"),
                        s.len(),
                        self.horizon
                    )))
                }
                Intensity::Schedule(s) if s.iter().any(|x| !(*x >= 0.0 && x.is_finite())) => {
                    return Err(Error::Config(format!("{}: must be >= 0", field("intensity"))))
                }
                _ => {}
            }
            if p.drift.windows(2).any(|w| w[1].interval < w[0].interval) {
                return Err(Error::Config(format!("{}: knots must be sorted", field("drift"))));
            }
            if !p.drift.is_empty() {
                apply_drift(&p.drift, 0)
                    .and_then(|_| apply_drift(&p.drift, self.horizon - 1))
                    .map_err(|e| Error::Config(format!("{}: {e}", field("drift"))))?;
            }
        }
        self.constraints.validate()?;
        for w in &self.constraints.delivery_windows {
            if w.intervals.end > self.horizon {
                return Err(Error::Config(format!("delivery window '{}' extends past the horizon", w.name)));
            }
        }
        for w in &self.constraints.guarantee_windows {
            if w.intervals.end > self.horizon {
                return Err(Error::Config(format!("guarantee window '{}' extends past the horizon", w.name)));
            }
        }
        self.agent.pacing.validate()?;
        if let AgentInit::Lambda0(l) = self.agent.init {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("agent.init.lambda0: must be > 0, got {l}")));
            }
        }
        if let Some(n) = self.agent.normalizer {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Config(format!("agent.normalizer: must be > 0, got {n}")));
            }
        }
        if let Some(c) = self.agent.bid_cap {
            BidEngine::new(c).map_err(|e| Error::Config(format!("agent.bid_cap: {e}")))?;
        }
        Ok(())
    }

    /// Expected opportunity count per interval summed over placements.
    pub fn schedule(&self) -> Vec<f64> {
        (0..self.horizon)
            .map(|i| self.placements.iter().map(|p| p.intensity.at(i)).sum())
            .collect()
    }

    pub fn expected_opportunities(&self, placement: usize) -> f64 {
        let p = &self.placements[placement];
        (0..self.horizon).map(|i| p.intensity.at(i)).sum()
    }

    pub fn engine(&self) -> BidEngine {
        self.agent.bid_cap.map_or_else(BidEngine::default, |c| BidEngine { bid_cap: c })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// One simulated auction before the agent acts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Opportunity {
    pub interval: usize,
    pub placement: usize,
    /// Position within the interval, in `[0, 1)`.
    pub jitter: f64,
    pub value: f64,
    /// Highest competing bid, before the reserve.
    pub competing: f64,
    /// Uniform draw deciding the realized result if won.
    pub result_draw: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn stream_rng(seed: u64, placement_id: &str, interval: usize) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(fnv1a(placement_id.as_bytes()) ^ splitmix64(interval as u64)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Mechanisms per placement and interval, deduplicated for the log.
#[derive(Debug, Clone)]
pub struct MechanismTable {
    pub specs: Vec<MechanismSpec>,
    /// `index[placement][interval]` into `specs`.
    pub index: Vec<Vec<usize>>,
}

impl MechanismTable {
    pub fn new(scenario: &ScenarioConfig) -> Result<Self> {
        let mut specs = Vec::new();
        let mut index = Vec::with_capacity(scenario.placements.len());
        for p in &scenario.placements {
            let mut row = Vec::with_capacity(scenario.horizon);
            for i in 0..scenario.horizon {
                let m = p.mechanism_at(i)?;
                match row.last() {
                    Some(&j) if specs[j] == m => row.push(j),
                    _ => {
                        specs.push(m);
                        row.push(specs.len() - 1);
                    }
                }
            }
            index.push(row);
        }
        Ok(MechanismTable { specs, index })
    }

    pub fn get(&self, placement: usize, interval: usize) -> &MechanismSpec {
        &self.specs[self.index[placement][interval]]
    }
}

/// All opportunities of the episode, ordered by interval then jitter.
pub fn generate_stream(scenario: &ScenarioConfig) -> Result<Vec<Opportunity>> {
    let mut stream = Vec::new();
    for interval in 0..scenario.horizon {
        let start = stream.len();
        for (pi, p) in scenario.placements.iter().enumerate() {
            let mech = p.mechanism_at(interval)?;
            let value = p.value_at(interval)?;
            let mut rng = stream_rng(scenario.seed, &p.id, interval);
            let rate = p.intensity.at(interval);
            let count = if rate > 0.0 {
                let d = Poisson::new(rate).map_err(|e| Error::Config(format!("intensity {rate}: {e}")))?;
                d.sample(&mut rng) as usize
            } else {
                0
            };
            for _ in 0..count {
                let jitter: f64 = rng.random();
                let z: f64 = StandardNormal.sample(&mut rng);
                let u: f64 = rng.random();
                let result_draw: f64 = rng.random();
                stream.push(Opportunity {
                    interval,
                    placement: pi,
                    jitter,
                    value: (value.mu + value.sigma * z).exp(),
                    competing: mech.competitor.quantile(u),
                    result_draw,
                });
            }
        }
        stream[start..].sort_by(|a, b| a.jitter.total_cmp(&b.jitter).then(a.placement.cmp(&b.placement)));
    }
    Ok(stream)
}

/// Realized-mode log of a stream, with window memberships.
pub fn build_log(scenario: &ScenarioConfig, table: &MechanismTable, stream: &[Opportunity]) -> Result<OpportunityLog> {
    let mut log = OpportunityLog::new();
    for m in &table.specs {
        log.add_mechanism(m.clone());
    }
    for o in stream {
        let idx = table.index[o.placement][o.interval];
        let mech = &table.specs[idx];
        let clearing = o.competing.max(mech.reserve);
        let landscape = RealizedLandscape {
            clearing_bid: clearing,
            cost_if_won: clearing,
        };
        let mut r = LogRecord::realized(o.interval as f64 + o.jitter, o.placement, o.value, idx, landscape);
        r.delivery_window = scenario.constraints.delivery_window_at(o.interval);
        r.guarantee_window = scenario.constraints.guarantee_window_at(o.interval);
        log.push(r)?;
    }
    Ok(log)
}

/// Starting multiplier from the interval-0 priors.
///
/// Second-price placements with log-normal competition and no reserve use
/// the closed form. Anything else solves the same spend balance on value
/// quantiles with expected spend from the mechanism.
pub fn coldstart_lambda(scenario: &ScenarioConfig) -> Result<f64> {
    let budget = scenario.constraints.budget;
    if !(budget > 0.0) {
        return Ok(1.0);
    }
    let mut priors = Vec::new();
    for (i, p) in scenario.placements.iter().enumerate() {
        let mech = p.mechanism_at(0)?;
        let value = p.value_at(0)?;
        let opportunities = scenario.expected_opportunities(i);
        if opportunities <= 0.0 {
            continue;
        }
        match (mech.auction, &mech.competitor) {
            (AuctionType::SecondPrice, CompetitorModel::Lognormal { mu, sigma }) if mech.reserve == 0.0 => {
                priors.push(PlacementPriors::new(*mu, *sigma, value.mu, value.sigma, opportunities)?)
            }
            _ => return numeric_coldstart(scenario),
        }
    }
    if priors.is_empty() {
        return Ok(1.0);
    }
    Ok(solve_lambda0_multi(&priors, budget)?.lambda)
}

/// Value quantiles of the interval-0 priors, each weighted so that a
/// placement carries its expected traffic over the horizon.
pub fn prior_log(scenario: &ScenarioConfig) -> Result<OpportunityLog> {
    prior_log_over(scenario, IntervalRange::new(0, scenario.horizon))
}

/// Prior quantile log for the traffic expected over `range`, with the
/// parameters in force at its first interval.
pub fn prior_log_over(scenario: &ScenarioConfig, range: IntervalRange) -> Result<OpportunityLog> {
    let mut log = OpportunityLog::new();
    let k = COLDSTART_QUANTILES;
    for (i, p) in scenario.placements.iter().enumerate() {
        let opportunities: f64 = (range.start..range.end.min(scenario.horizon))
            .map(|t| p.intensity.at(t))
            .sum();
        if opportunities <= 0.0 {
            continue;
        }
        let m = log.add_mechanism(p.mechanism_at(range.start)?);
        let value = p.value_at(range.start)?;
        for j in 0..k {
            let u = (j as f64 + 0.5) / k as f64;
            let v = (value.mu + value.sigma * crate::normal::quantile(u)).exp();
            log.push(LogRecord::expected(0.0, i, v, m).weighted(opportunities / k as f64))?;
        }
    }
    Ok(log)
}

/// Prior logs for each delivery and guarantee window, with memberships set.
pub fn window_priors(scenario: &ScenarioConfig) -> Result<WindowPriors> {
    let tagged = |range: IntervalRange, delivery: Option<usize>, guarantee: Option<usize>| -> Result<OpportunityLog> {
        let mut out = OpportunityLog::new();
        let log = prior_log_over(scenario, range)?;
        for m in log.mechanisms() {
            out.add_mechanism(m.clone());
        }
        for r in log.records() {
            let mut r = r.clone();
            r.delivery_window = delivery;
            r.guarantee_window = guarantee;
            out.push(r)?;
        }
        Ok(out)
    };
    let c = &scenario.constraints;
    Ok(WindowPriors {
        delivery: c
            .delivery_windows
            .iter()
            .enumerate()
            .map(|(k, w)| tagged(w.intervals, Some(k), None))
            .collect::<Result<_>>()?,
        guarantee: c
            .guarantee_windows
            .iter()
            .enumerate()
            .map(|(k, w)| tagged(w.intervals, None, Some(k)))
            .collect::<Result<_>>()?,
    })
}

fn numeric_coldstart(scenario: &ScenarioConfig) -> Result<f64> {
    let log = prior_log(scenario)?;
    if log.is_empty() {
        return Ok(1.0);
    }
    let oracle = HindsightOracle::new(scenario.engine());
    Ok(oracle.solve_lambda_star(&log, scenario.constraints.budget)?.lambda)
}

/// One row per opportunity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub interval: usize,
    pub opportunity_index: usize,
    pub placement_id: String,
    pub value: f64,
    pub adjusted_value: f64,
    pub bid: f64,
    pub won: u8,
    pub cost: f64,
    pub lambda_tilde: f64,
    pub mu: f64,
    pub lambda_k: f64,
    pub mu_k: f64,
    pub cum_spend: f64,
    pub cum_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowMetrics {
    pub name: String,
    pub spend: f64,
    pub value: f64,
    /// Cap for delivery windows, floor for guarantee windows.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementMetrics {
    pub id: String,
    pub opportunities: usize,
    pub wins: usize,
    pub spend: f64,
    pub value: f64,
    pub marginal_roi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub opportunities: usize,
    pub wins: usize,
    pub total_spend: f64,
    /// Value of won opportunities.
    pub total_value: f64,
    /// `Σ v G(b)` over placed bids.
    pub expected_value: f64,
    /// Bernoulli result draws on won opportunities.
    pub realized_results: usize,
    pub cost_per_result: f64,
    pub budget_utilization: f64,
    pub lambda_initial: f64,
    pub lambda_prime: f64,
    pub final_lambda_tilde: f64,
    pub final_mu: f64,
    /// `λ̃` at the end of each interval.
    pub lambda_tilde_trajectory: Vec<f64>,
    pub delivery_windows: Vec<WindowMetrics>,
    pub guarantee_windows: Vec<WindowMetrics>,
    pub placements: Vec<PlacementMetrics>,
    /// Largest value reached by each constraint multiplier.
    pub max_mu: f64,
    pub max_lambda_k: f64,
    pub max_mu_k: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trace: Vec<TraceRow>,
    pub metrics: EpisodeMetrics,
    pub updates: Vec<UpdateRecord>,
    pub stream: Vec<Opportunity>,
    pub mechanisms: MechanismTable,
}

impl Episode {
    /// Realized-mode log of the episode's opportunities.
    pub fn log(&self, scenario: &ScenarioConfig) -> Result<OpportunityLog> {
        build_log(scenario, &self.mechanisms, &self.stream)
    }
}

/// Expected counts per interval as the agent forecasts them.
pub fn resolve_forecast(scenario: &ScenarioConfig) -> Result<Forecast> {
    let schedule = scenario.schedule();
    if schedule.iter().sum::<f64>() <= 0.0 {
        return Forecast::uniform(1.0, scenario.horizon);
    }
    scenario.agent.pacing.forecast.resolve(&schedule)
}

pub fn initial_lambda(scenario: &ScenarioConfig) -> Result<f64> {
    match scenario.agent.init {
        AgentInit::Lambda0(l) => Ok(l),
        AgentInit::Coldstart => coldstart_lambda(scenario),
    }
}

/// Multipliers and per-interval spend weights planned on the priors when
/// the scenario has windows. `None` when there is nothing to plan, the
/// constraints have more than one window of a kind, or the priors say the
/// guarantee cannot be met.
pub fn window_plan(scenario: &ScenarioConfig) -> Result<Option<(MultiplierVector, Vec<f64>)>> {
    let c = &scenario.constraints;
    if c.budget <= 0.0 || (c.delivery_windows.is_empty() && c.guarantee_windows.is_empty()) {
        return Ok(None);
    }
    let Ok(kkt) = KktConstraints::try_from(c) else {
        return Ok(None);
    };
    let mut cuts = vec![0, scenario.horizon];
    for w in &c.delivery_windows {
        cuts.extend([w.intervals.start, w.intervals.end]);
    }
    for w in &c.guarantee_windows {
        cuts.extend([w.intervals.start, w.intervals.end]);
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut segments = Vec::new();
    let mut whole = OpportunityLog::new();
    for pair in cuts.windows(2) {
        let range = IntervalRange::new(pair[0], pair[1]);
        let mut seg = OpportunityLog::new();
        let prior = prior_log_over(scenario, range)?;
        let offset = whole.mechanisms().len();
        for m in prior.mechanisms() {
            seg.add_mechanism(m.clone());
            whole.add_mechanism(m.clone());
        }
        for r in prior.records() {
            let mut r = r.clone();
            r.delivery_window = c.delivery_window_at(range.start);
            r.guarantee_window = c.guarantee_window_at(range.start);
            seg.push(r.clone())?;
            r.mechanism += offset;
            whole.push(r)?;
        }
        segments.push((range, seg));
    }
    if whole.is_empty() {
        return Ok(None);
    }
    let oracle = HindsightOracle::new(scenario.engine());
    let m = match oracle.solve_kkt_grid(&whole, &kkt) {
        Ok(sol) => sol.multipliers,
        Err(Error::InfeasibleGuarantee { .. } | Error::Unsupported(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut weights = vec![0.0; scenario.horizon];
    for (range, seg) in &segments {
        let traffic: f64 = (range.start..range.end)
            .map(|t| scenario.placements.iter().map(|p| p.intensity.at(t)).sum::<f64>())
            .sum();
        if traffic <= 0.0 {
            continue;
        }
        let rate = oracle.replay(seg, &m)?.spend / traffic;
        weights[range.start..range.end].fill(rate);
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Ok(None);
    }
    Ok(Some((m, weights)))
}

/// Starting budget and cost multipliers `(λ0, μ0)`. Under a cost target the
/// cold start solves both on the prior log; `λ'` stays the budget-only value.
pub fn initial_multipliers(scenario: &ScenarioConfig) -> Result<(f64, f64)> {
    let lambda0 = initial_lambda(scenario)?;
    let budget = scenario.constraints.budget;
    match (scenario.agent.init, scenario.constraints.cost_target) {
        (AgentInit::Coldstart, Some(c)) if budget > 0.0 => {
            let log = prior_log(scenario)?;
            if log.is_empty() {
                return Ok((lambda0, 0.0));
            }
            let kkt = HindsightOracle::new(scenario.engine()).solve_kkt_grid(
                &log,
                &KktConstraints {
                    cost_target: Some(c),
                    ..KktConstraints::budget_only(budget)
                },
            )?;
            Ok((kkt.multipliers.lambda, kkt.multipliers.mu))
        }
        _ => Ok((lambda0, 0.0)),
    }
}

pub fn build_agent(scenario: &ScenarioConfig) -> Result<PacingAgent> {
    let normalizer = match scenario.agent.normalizer {
        Some(n) => n,
        None => initial_lambda(scenario)?,
    };
    let plan = window_plan(scenario)?;
    let (lambda0, mu0) = match &plan {
        Some((m, _)) if scenario.agent.init == AgentInit::Coldstart => (m.lambda, m.mu),
        _ => initial_multipliers(scenario)?,
    };
    let priors = window_priors(scenario)?;
    let agent = PacingAgent::new(
        scenario.agent.pacing.clone(),
        scenario.constraints.clone(),
        resolve_forecast(scenario)?,
        scenario.engine(),
        lambda0,
    )?
    .with_normalizer(normalizer)?
    .with_cost_multiplier(mu0)?
    .with_window_priors(priors);
    match plan {
        Some((_, weights)) => agent.with_spend_plan(weights),
        None => Ok(agent),
    }
}

/// Run the agent against the scenario's stream.
pub fn run_episode(scenario: &ScenarioConfig) -> Result<Episode> {
    scenario.validate()?;
    let table = MechanismTable::new(scenario)?;
    let stream = generate_stream(scenario)?;
    let mut agent = build_agent(scenario)?;
    run_stream(scenario, table, stream, &mut agent)
}

/// Run a prepared agent over a given stream.
pub fn run_stream(
    scenario: &ScenarioConfig,
    table: MechanismTable,
    stream: Vec<Opportunity>,
    agent: &mut PacingAgent,
) -> Result<Episode> {
    let lambda_initial = agent.state().lambda();
    let lambda_prime = agent.state().lambda_prime;
    let mut trace = Vec::with_capacity(stream.len());
    let mut updates = Vec::new();
    let mut trajectory = Vec::with_capacity(scenario.horizon);
    let mut placements: Vec<PlacementMetrics> = scenario
        .placements
        .iter()
        .map(|p| PlacementMetrics {
            id: p.id.clone(),
            opportunities: 0,
            wins: 0,
            spend: 0.0,
            value: 0.0,
            marginal_roi: None,
        })
        .collect();
    let (mut spend, mut value, mut expected_value) = (0.0, 0.0, 0.0);
    let (mut wins, mut results) = (0usize, 0usize);
    let (mut max_mu, mut max_lambda_k, mut max_mu_k) = (0.0_f64, 0.0_f64, 0.0_f64);

    let mut next = 0;
    for interval in 0..scenario.horizon {
        agent.begin_interval(interval);
        while next < stream.len() && stream[next].interval == interval {
            let o = stream[next];
            let mech = table.get(o.placement, interval);
            let m = agent.multipliers(interval);
            let decision = agent
                .bid(interval, mech, o.value)
                .map_err(|e| e.at_interval(interval))?;
            let outcome = mech.resolve_against(decision.bid, o.competing);
            if decision.bid > 0.0 {
                expected_value += o.value * mech.win_prob_unchecked(decision.bid);
            }
            spend += outcome.cost;
            let p = &mut placements[o.placement];
            p.opportunities += 1;
            if outcome.won {
                value += o.value;
                wins += 1;
                results += (o.result_draw < o.value.min(1.0)) as usize;
                p.wins += 1;
                p.spend += outcome.cost;
                p.value += o.value;
            }
            let lambda_k = m.window_lambda.unwrap_or(0.0);
            let mu_k = m.window_mu.unwrap_or(0.0);
            max_mu = max_mu.max(m.mu);
            max_lambda_k = max_lambda_k.max(lambda_k);
            max_mu_k = max_mu_k.max(mu_k);
            trace.push(TraceRow {
                interval,
                opportunity_index: next,
                placement_id: scenario.placements[o.placement].id.clone(),
                value: o.value,
                adjusted_value: decision.adjusted_value,
                bid: decision.bid,
                won: outcome.won as u8,
                cost: outcome.cost,
                lambda_tilde: m.lambda / lambda_prime,
                mu: m.mu,
                lambda_k,
                mu_k,
                cum_spend: spend,
                cum_value: value,
            });
            if let Some(u) = agent
                .observe(interval, o.placement, mech, o.value, &outcome)
                .map_err(|e| e.at_interval(interval))?
            {
                updates.push(u);
            }
            next += 1;
        }
        if let Some(u) = agent.end_interval(interval).map_err(|e| e.at_interval(interval))? {
            updates.push(u);
        }
        trajectory.push(agent.state().lambda_tilde);
    }

    let state = agent.state();
    let constraints = &scenario.constraints;
    let window_value = |k: usize, delivery: bool| -> (f64, f64) {
        let range = if delivery {
            constraints.delivery_windows[k].intervals
        } else {
            constraints.guarantee_windows[k].intervals
        };
        trace
            .iter()
            .filter(|r| range.contains(r.interval))
            .fold((0.0, 0.0), |(s, v), r| (s + r.cost, v + if r.won == 1 { r.value } else { 0.0 }))
    };
    let delivery_windows = constraints
        .delivery_windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let (s, v) = window_value(k, true);
            WindowMetrics {
                name: w.name.clone(),
                spend: s,
                value: v,
                limit: w.cap,
            }
        })
        .collect();
    let guarantee_windows = constraints
        .guarantee_windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let (s, v) = window_value(k, false);
            WindowMetrics {
                name: w.name.clone(),
                spend: s,
                value: v,
                limit: w.floor,
            }
        })
        .collect();
    let budget = constraints.budget;
    let metrics = EpisodeMetrics {
        opportunities: trace.len(),
        wins,
        total_spend: spend,
        total_value: value,
        expected_value,
        realized_results: results,
        cost_per_result: if value > 0.0 { spend / value } else { 0.0 },
        budget_utilization: if budget > 0.0 { spend / budget } else { 0.0 },
        lambda_initial,
        lambda_prime,
        final_lambda_tilde: state.lambda_tilde,
        final_mu: state.mu_tilde * state.lambda_prime,
        lambda_tilde_trajectory: trajectory,
        delivery_windows,
        guarantee_windows,
        placements,
        max_mu,
        max_lambda_k,
        max_mu_k,
    };
    Ok(Episode {
        trace,
        metrics,
        updates,
        stream,
        mechanisms: table,
    })
}

/// Oracle-side view of a finished episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub lambda_star: f64,
    pub unconstrained: bool,
    pub oracle_spend: f64,
    pub oracle_value: f64,
    pub agent_value: f64,
    /// Agent value over oracle value.
    pub value_ratio: f64,
}

/// Hindsight-optimal budget multiplier on the realized log, with the
/// agent's value as a fraction of the oracle's.
pub fn compare_with_oracle(
    oracle: &HindsightOracle,
    log: &OpportunityLog,
    budget: f64,
    agent_value: f64,
) -> Result<OracleComparison> {
    let sol = oracle.solve_lambda_star(log, budget)?;
    Ok(OracleComparison {
        lambda_star: sol.lambda,
        unconstrained: sol.unconstrained,
        oracle_spend: sol.totals.spend,
        oracle_value: sol.totals.value,
        agent_value,
        value_ratio: ratio(agent_value, sol.totals.value),
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedBidBaseline {
    pub bid: f64,
    pub spend: f64,
    pub value: f64,
}

/// The single bid that, placed on every opportunity, spends as much of
/// `budget` as possible without exceeding it.
pub fn fixed_bid_baseline(log: &OpportunityLog, budget: f64) -> Result<FixedBidBaseline> {
    let at = |bid: f64| -> Result<(f64, f64)> {
        let mut totals = (0.0, 0.0);
        for r in log.records() {
            let l = r
                .landscape
                .ok_or_else(|| Error::Unsupported("fixed-bid baseline needs a realized log".into()))?;
            if let Some(cost) = l.resolve(log.mechanisms()[r.mechanism].auction, bid) {
                totals.0 += cost;
                totals.1 += r.value;
            }
        }
        Ok(totals)
    };
    let top = log
        .records()
        .iter()
        .filter_map(|r| r.landscape.map(|l| l.clearing_bid))
        .fold(0.0_f64, f64::max);
    let (spend, value) = at(top)?;
    if spend <= budget {
        return Ok(FixedBidBaseline { bid: top, spend, value });
    }
    let (mut lo, mut hi) = (0.0, top);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid)?.0 <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (spend, value) = at(lo)?;
    Ok(FixedBidBaseline { bid: lo, spend, value })
}

/// Marginal ROI of each placement at the agent's realized spend, from the
/// expected-mode view of the episode log.
pub fn placement_marginal_roi(
    oracle: &HindsightOracle,
    log: &OpportunityLog,
    spends: &[f64],
    relative_delta: f64,
) -> Result<Vec<Option<f64>>> {
    let expected = log.to_expected();
    spends
        .iter()
        .enumerate()
        .map(|(p, &s)| {
            if s <= 0.0 {
                return Ok(None);
            }
            Ok(oracle
                .marginal_roi_at_spend(&expected, p, s, relative_delta * s)?
                .value())
        })
        .collect()
}
