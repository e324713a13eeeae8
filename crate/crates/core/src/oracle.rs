//! Hindsight-optimal multipliers from a complete opportunity log.
//!
//! The oracle replays a log under a candidate multiplier vector and searches
//! the multipliers that satisfy the KKT conditions of the constrained
//! result-maximization problem. It is the ground truth the online
//! controllers are measured against.
//!
//! Records either carry a realized landscape (the auction is resolved with
//! an indicator win and the realized payment) or only a mechanism, in which
//! case expected spend `H(b)` and expected value `v G(b)` are used.

use crate::bid_engine::{BidEngine, MultiplierVector, LAMBDA_MIN};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::mechanisms::{MechanismSpec, RealizedLandscape};

/// Upper end of the multiplier search range.
pub const LAMBDA_MAX: f64 = 1e9;
/// Largest guaranteed-delivery boost the KKT search will try.
pub const WINDOW_MU_MAX: f64 = 1e6;
/// Log-spaced grid points scanned before bisection refinement.
pub const GRID_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub time: f64,
    pub placement: usize,
    pub value: f64,
    /// Index into [`OpportunityLog::mechanisms`].
    pub mechanism: usize,
    pub landscape: Option<RealizedLandscape>,
    pub delivery_window: Option<usize>,
    pub guarantee_window: Option<usize>,
    /// Number of identical opportunities this record stands for.
    pub weight: f64,
}

impl LogRecord {
    pub fn expected(time: f64, placement: usize, value: f64, mechanism: usize) -> Self {
        LogRecord {
            time,
            placement,
            value,
            mechanism,
            landscape: None,
            delivery_window: None,
            guarantee_window: None,
            weight: 1.0,
        }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn realized(time: f64, placement: usize, value: f64, mechanism: usize, landscape: RealizedLandscape) -> Self {
        LogRecord {
            landscape: Some(landscape),
            ..LogRecord::expected(time, placement, value, mechanism)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpportunityLog {
    mechanisms: Vec<MechanismSpec>,
    records: Vec<LogRecord>,
    placements: usize,
}

impl OpportunityLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_mechanism(&mut self, mech: MechanismSpec) -> usize {
        self.mechanisms.push(mech);
        self.mechanisms.len() - 1
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if record.mechanism >= self.mechanisms.len() {
            return Err(Error::invalid("mechanism", format!("unknown index {}", record.mechanism)));
        }
        if !(record.value >= 0.0 && record.value.is_finite()) {
            return Err(Error::Domain { what: "value", value: record.value });
        }
        if !(record.weight >= 0.0 && record.weight.is_finite()) {
            return Err(Error::Domain { what: "weight", value: record.weight });
        }
        if let Some(last) = self.records.last() {
            if record.time < last.time {
                return Err(Error::invalid("time", "record times must be nondecreasing"));
            }
        }
        self.placements = self.placements.max(record.placement + 1);
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn mechanisms(&self) -> &[MechanismSpec] {
        &self.mechanisms
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn placement_count(&self) -> usize {
        self.placements
    }

    pub fn is_realized(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.landscape.is_some())
    }

    fn filtered(&self, keep: impl Fn(usize, &LogRecord) -> bool) -> OpportunityLog {
        OpportunityLog {
            mechanisms: self.mechanisms.clone(),
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, r)| keep(*i, r))
                .map(|(_, r)| r.clone())
                .collect(),
            placements: self.placements,
        }
    }

    /// Records of one placement, with placement ids preserved.
    pub fn placement_view(&self, placement: usize) -> OpportunityLog {
        self.filtered(|_, r| r.placement == placement)
    }

    /// Records with index in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> OpportunityLog {
        self.filtered(|i, _| range.contains(&i))
    }

    /// The same opportunities resolved in expectation.
    pub fn to_expected(&self) -> OpportunityLog {
        let mut log = self.clone();
        for r in &mut log.records {
            r.landscape = None;
        }
        log
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlacementTotals {
    pub spend: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayTotals {
    pub spend: f64,
    pub value: f64,
    /// Realized wins; zero for expected-mode records.
    pub wins: usize,
    pub delivery_spend: f64,
    pub guarantee_value: f64,
    pub by_placement: Vec<PlacementTotals>,
}

impl ReplayTotals {
    pub fn cost_per_result(&self) -> f64 {
        if self.value > 0.0 {
            self.spend / self.value
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBracket {
    /// Largest probed multiplier whose spend still exceeds the budget.
    pub below: f64,
    /// Smallest probed multiplier with spend within budget (the returned one).
    pub above: f64,
    /// Supremum of multipliers producing the same win set as `above`.
    pub win_set_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSolution {
    pub lambda: f64,
    /// Spend at the multiplier floor is within budget (the λ* = 0 branch).
    pub unconstrained: bool,
    pub totals: ReplayTotals,
    /// Present when spend is a step function near the solution (realized logs).
    pub bracket: Option<LambdaBracket>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub multipliers: MultiplierVector,
    pub totals: ReplayTotals,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginalRoi {
    Active(f64),
    /// The placement spends nothing at the optimum.
    Inactive,
}

impl MarginalRoi {
    pub fn value(&self) -> Option<f64> {
        match self {
            MarginalRoi::Active(x) => Some(*x),
            MarginalRoi::Inactive => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop1Check {
    pub value_slope: f64,
    pub spend_slope: f64,
    /// `|V'(λ) - λ S'(λ)|`.
    pub residual: f64,
}

/// Scalar constraints the KKT search handles: one budget, an optional cost
/// target, at most one delivery window and at most one guarantee window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktConstraints {
    pub budget: f64,
    pub cost_target: Option<f64>,
    pub delivery_cap: Option<f64>,
    pub guarantee_floor: Option<f64>,
}

impl KktConstraints {
    pub fn budget_only(budget: f64) -> Self {
        KktConstraints {
            budget,
            cost_target: None,
            delivery_cap: None,
            guarantee_floor: None,
        }
    }
}

impl TryFrom<&ConstraintSet> for KktConstraints {
    type Error = Error;

    fn try_from(set: &ConstraintSet) -> Result<Self> {
        if set.delivery_windows.len() > 1 || set.guarantee_windows.len() > 1 {
            return Err(Error::Unsupported(
                "hindsight KKT search handles at most one window of each kind".into(),
            ));
        }
        Ok(KktConstraints {
            budget: set.budget,
            cost_target: set.cost_target,
            delivery_cap: set.delivery_windows.first().map(|w| w.cap),
            guarantee_floor: set.guarantee_windows.first().map(|w| w.floor),
        })
    }
}

/// Root bracket of a monotone scalar search.
#[derive(Debug, Clone, Copy)]
struct Search {
    /// Last point violating the constraint.
    fail: f64,
    /// First point satisfying it.
    pass: f64,
    /// The constraint already holds at the lower end.
    at_floor: bool,
}

/// Find the smallest `x` in `[lo, hi]` with `ok(x)`, given that `ok` flips
/// from false to true once as `x` grows. Scans a log grid, then bisects in
/// log space. `close(x)` ends bisection early when the passing side is
/// already tight enough.
fn monotone_search(
    lo: f64,
    hi: f64,
    mut ok: impl FnMut(f64) -> bool,
    mut close: impl FnMut(f64) -> bool,
) -> Option<Search> {
    if ok(lo) {
        return Some(Search {
            fail: lo,
            pass: lo,
            at_floor: true,
        });
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    let step = (lhi - llo) / (GRID_POINTS - 1) as f64;
    let mut fail = llo;
    let mut pass = None;
    for i in 1..GRID_POINTS {
        let x = if i == GRID_POINTS - 1 { lhi } else { llo + step * i as f64 };
        if ok(x.exp()) {
            pass = Some(x);
            break;
        }
        fail = x;
    }
    let mut pass = pass?;
    for _ in 0..200 {
        if pass - fail <= 1e-13 || close(pass.exp()) {
            break;
        }
        let mid = 0.5 * (fail + pass);
        if ok(mid.exp()) {
            pass = mid;
        } else {
            fail = mid;
        }
    }
    Some(Search {
        fail: fail.exp(),
        pass: pass.exp(),
        at_floor: false,
    })
}

/// Window-only views of a log for the KKT best responses.
struct Windows {
    delivery: OpportunityLog,
    guarantee: OpportunityLog,
    overlap: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HindsightOracle {
    pub engine: BidEngine,
}

impl HindsightOracle {
    pub fn new(engine: BidEngine) -> Self {
        HindsightOracle { engine }
    }

    /// Total spend and value when every record is bid optimally under `m`.
    /// Window multipliers apply only to records inside the matching window.
    pub fn replay(&self, log: &OpportunityLog, m: &MultiplierVector) -> Result<ReplayTotals> {
        let mut totals = ReplayTotals {
            by_placement: vec![PlacementTotals::default(); log.placement_count()],
            ..Default::default()
        };
        for r in &log.records {
            let (spend, value, won) = self.resolve(log, r, m)?;
            let (spend, value) = (spend * r.weight, value * r.weight);
            totals.spend += spend;
            totals.value += value;
            totals.wins += won as usize;
            if r.delivery_window.is_some() {
                totals.delivery_spend += spend;
            }
            if r.guarantee_window.is_some() {
                totals.guarantee_value += value;
            }
            let p = &mut totals.by_placement[r.placement];
            p.spend += spend;
            p.value += value;
        }
        Ok(totals)
    }

    fn resolve(&self, log: &OpportunityLog, r: &LogRecord, m: &MultiplierVector) -> Result<(f64, f64, bool)> {
        let effective = MultiplierVector {
            window_lambda: r.delivery_window.and(m.window_lambda),
            window_mu: r.guarantee_window.and(m.window_mu),
            ..*m
        };
        let mech = &log.mechanisms[r.mechanism];
        let bid = self.engine.bid_for(mech, r.value, &effective)?.bid;
        Ok(match &r.landscape {
            Some(l) => match l.resolve(mech.auction, bid) {
                Some(cost) => (cost, r.value, true),
                None => (0.0, 0.0, false),
            },
            None => (
                mech.expected_cost_unchecked(bid),
                r.value * mech.win_prob_unchecked(bid),
                false,
            ),
        })
    }

    fn replay_lambda(&self, log: &OpportunityLog, lambda: f64) -> Result<ReplayTotals> {
        self.replay(log, &MultiplierVector::budget_only(lambda))
    }

    /// Budget multiplier matching expected spend to `budget`.
    ///
    /// Returns the floor with `unconstrained` when the budget is never
    /// binding. On step-function spend the higher (never overspending) side
    /// of the jump is returned together with the bracket.
    pub fn solve_lambda_star(&self, log: &OpportunityLog, budget: f64) -> Result<LambdaSolution> {
        if !(budget > 0.0) {
            return Err(Error::Domain { what: "budget", value: budget });
        }
        if !log.is_realized() {
            self.check_monotone_spend(log)?;
        }
        let base = MultiplierVector::budget_only(LAMBDA_MIN);
        let (lambda, totals, search) = self.solve_budget_level(log, budget, base)?;
        let unconstrained = search.at_floor;
        let bracket = if unconstrained || !log.is_realized() {
            None
        } else {
            Some(self.bracket(log, &search)?)
        };
        Ok(LambdaSolution {
            lambda,
            unconstrained,
            totals,
            bracket,
        })
    }

    fn bracket(&self, log: &OpportunityLog, search: &Search) -> Result<LambdaBracket> {
        let wins_at = |lambda: f64| -> Result<usize> { Ok(self.replay_lambda(log, lambda)?.wins) };
        let wins = wins_at(search.pass)?;
        // Win sets shrink as λ grows, so equal counts mean equal sets.
        let (mut lo, mut hi) = (search.pass.ln(), LAMBDA_MAX.ln());
        if wins_at(LAMBDA_MAX)? == wins {
            lo = hi;
        } else {
            for _ in 0..200 {
                if hi - lo <= 1e-13 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                if wins_at(mid.exp())? == wins {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        Ok(LambdaBracket {
            below: search.fail,
            above: search.pass,
            win_set_upper: lo.exp(),
        })
    }

    /// Solve λ for the budget with the other multipliers in `base` held fixed.
    fn solve_budget_level(
        &self,
        log: &OpportunityLog,
        budget: f64,
        base: MultiplierVector,
    ) -> Result<(f64, ReplayTotals, Search)> {
        let mut err = None;
        let mut spend_at = |lambda: f64| -> f64 {
            match self.replay(log, &MultiplierVector { lambda, ..base }) {
                Ok(t) => t.spend,
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            }
        };
        // Realized spend is a step function; keep bisecting to the jump.
        let realized = log.is_realized();
        let search = {
            let spend = std::cell::RefCell::new(&mut spend_at);
            monotone_search(
                LAMBDA_MIN,
                LAMBDA_MAX,
                |l| (spend.borrow_mut())(l) <= budget,
                |l| !realized && ((spend.borrow_mut())(l) - budget).abs() <= 1e-10 * budget,
            )
        };
        if let Some(e) = err {
            return Err(e);
        }
        let search = search.ok_or_else(|| {
            Error::Unsupported(format!("budget {budget} unreachable even at lambda = {LAMBDA_MAX}"))
        })?;
        let totals = self.replay(log, &MultiplierVector { lambda: search.pass, ..base })?;
        Ok((search.pass, totals, search))
    }

    fn check_monotone_spend(&self, log: &OpportunityLog) -> Result<()> {
        let (llo, lhi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|i| (llo + (lhi - llo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
            .collect();
        let mut prev: Option<(f64, f64)> = None;
        for &lambda in &grid {
            let spend = self.replay_lambda(log, lambda)?.spend;
            if let Some((pl, ps)) = prev {
                if spend > ps * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::NonMonotoneSpend {
                        record: self.offending_record(log, pl, lambda)?,
                    });
                }
            }
            prev = Some((lambda, spend));
        }
        Ok(())
    }

    fn offending_record(&self, log: &OpportunityLog, lo: f64, hi: f64) -> Result<usize> {
        for (i, r) in log.records.iter().enumerate() {
            let a = self.resolve(log, r, &MultiplierVector::budget_only(lo))?.0;
            let b = self.resolve(log, r, &MultiplierVector::budget_only(hi))?.0;
            if b > a {
                return Ok(i);
            }
        }
        Ok(0)
    }

    /// Multipliers satisfying each constraint's KKT branch: every multiplier
    /// is either zero (λ at its floor) or its constraint holds with equality.
    ///
    /// Nested search, outermost first: cost multiplier μ, budget λ, then the
    /// window multipliers. Each level scans a 64-point log grid and refines by
    /// bisection. Window multipliers only move records inside their window,
    /// so for a given λ they are solved as best responses on those records
    /// alone.
    pub fn solve_kkt_grid(&self, log: &OpportunityLog, constraints: &KktConstraints) -> Result<KktSolution> {
        if !(constraints.budget > 0.0) {
            return Err(Error::Domain { what: "budget", value: constraints.budget });
        }
        let windows = Windows {
            delivery: log.filtered(|_, r| r.delivery_window.is_some()),
            guarantee: log.filtered(|_, r| r.guarantee_window.is_some()),
            overlap: log
                .records
                .iter()
                .any(|r| r.delivery_window.is_some() && r.guarantee_window.is_some()),
        };
        if let Some(floor) = constraints.guarantee_floor {
            let most = MultiplierVector {
                window_mu: Some(WINDOW_MU_MAX),
                ..MultiplierVector::budget_only(LAMBDA_MIN)
            };
            let best = self.replay(&windows.guarantee, &most)?.guarantee_value;
            if best < floor {
                return Err(Error::InfeasibleGuarantee {
                    required: floor,
                    max_achievable: best,
                });
            }
        }
        let Some(target) = constraints.cost_target else {
            return self.solve_budget_with_windows(log, constraints, &windows, MultiplierVector::default());
        };
        let with = |mu: f64| MultiplierVector {
            mu,
            cost_target: Some(target),
            ..Default::default()
        };
        let free = self.solve_budget_with_windows(log, constraints, &windows, with(0.0))?;
        let within = |t: &ReplayTotals| t.spend <= target * t.value;
        if within(&free.totals) {
            return Ok(free);
        }
        self.nested(
            |mu| self.solve_budget_with_windows(log, constraints, &windows, with(mu)),
            |sol| within(&sol.totals),
            |sol| (sol.totals.spend - target * sol.totals.value).abs() <= 1e-7 * sol.totals.spend,
            LAMBDA_MAX,
        )
    }

    /// Budget level: the smallest λ whose spend fits, with the windows
    /// responding to every candidate λ.
    fn solve_budget_with_windows(
        &self,
        log: &OpportunityLog,
        constraints: &KktConstraints,
        windows: &Windows,
        base: MultiplierVector,
    ) -> Result<KktSolution> {
        let budget = constraints.budget;
        let realized = log.is_realized();
        let at = |lambda: f64| -> Result<KktSolution> {
            let m = self.window_response(constraints, windows, MultiplierVector { lambda, ..base })?;
            Ok(KktSolution {
                multipliers: m,
                totals: self.replay(log, &m)?,
            })
        };
        // Past the boost ceiling the floor can go unmet at large λ; such a
        // λ does not count as fitting.
        let floor = constraints.guarantee_floor.unwrap_or(0.0);
        match self.nested(
            at,
            |sol| sol.totals.spend <= budget && sol.totals.guarantee_value >= floor,
            |sol| !realized && (sol.totals.spend - budget).abs() <= 1e-10 * budget,
            LAMBDA_MAX,
        ) {
            Err(Error::Unsupported(_)) if constraints.guarantee_floor.is_some() => {
                // The floor alone costs more than the budget.
                let best = self.solve_lambda_star(&windows.guarantee, budget)?;
                Err(Error::InfeasibleGuarantee {
                    required: floor,
                    max_achievable: best.totals.guarantee_value,
                })
            }
            other => other,
        }
    }

    /// Window multipliers best responding to the rest of `m`: the smallest
    /// λ_k keeping window spend within the cap and the smallest μ_k lifting
    /// window value to the floor. Overlapping windows alternate until the
    /// pair settles.
    fn window_response(
        &self,
        constraints: &KktConstraints,
        windows: &Windows,
        mut m: MultiplierVector,
    ) -> Result<MultiplierVector> {
        let rounds = if windows.overlap { 50 } else { 1 };
        for _ in 0..rounds {
            let before = (m.window_lambda, m.window_mu);
            if let Some(cap) = constraints.delivery_cap {
                let log = &windows.delivery;
                let realized = log.is_realized();
                let with = |x: f64| MultiplierVector {
                    window_lambda: Some(x),
                    ..m
                };
                let spend = |x: f64| self.replay(log, &with(x)).map(|t| t.delivery_spend);
                let x = if spend(0.0)? <= cap {
                    0.0
                } else {
                    self.smallest(
                        |x| Ok(spend(x)? <= cap),
                        |x| Ok(!realized && (spend(x)? - cap).abs() <= 1e-10 * cap),
                        LAMBDA_MAX,
                    )?
                    .unwrap_or(LAMBDA_MAX)
                };
                m.window_lambda = Some(x);
            }
            if let Some(floor) = constraints.guarantee_floor {
                let log = &windows.guarantee;
                let realized = log.is_realized();
                let with = |x: f64| MultiplierVector {
                    window_mu: Some(x),
                    ..m
                };
                let value = |x: f64| self.replay(log, &with(x)).map(|t| t.guarantee_value);
                let x = if value(0.0)? >= floor {
                    0.0
                } else {
                    // Past the boost ceiling, bid as high as allowed.
                    self.smallest(
                        |x| Ok(value(x)? >= floor),
                        |x| Ok(!realized && (value(x)? - floor).abs() <= 1e-10 * floor),
                        WINDOW_MU_MAX,
                    )?
                    .unwrap_or(WINDOW_MU_MAX)
                };
                m.window_mu = Some(x);
            }
            if (m.window_lambda, m.window_mu) == before {
                break;
            }
        }
        Ok(m)
    }

    /// `monotone_search` over `[LAMBDA_MIN, hi]` with fallible predicates;
    /// `Some(0.0)` stands for the floor.
    fn smallest(
        &self,
        ok: impl Fn(f64) -> Result<bool>,
        close: impl Fn(f64) -> Result<bool>,
        hi: f64,
    ) -> Result<Option<f64>> {
        let err = std::cell::RefCell::new(None);
        let guard = |r: Result<bool>, fallback: bool| match r {
            Ok(b) => b,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                fallback
            }
        };
        let search = monotone_search(LAMBDA_MIN, hi, |x| guard(ok(x), true), |x| guard(close(x), true));
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        Ok(search.map(|s| if s.at_floor { 0.0 } else { s.pass }))
    }

    fn nested(
        &self,
        solve: impl Fn(f64) -> Result<KktSolution>,
        ok: impl Fn(&KktSolution) -> bool,
        close: impl Fn(&KktSolution) -> bool,
        hi: f64,
    ) -> Result<KktSolution> {
        let mut err = None;
        let mut last: Option<(f64, KktSolution)> = None;
        let cell = std::cell::RefCell::new((&mut err, &mut last));
        let eval = |x: f64| -> Option<KktSolution> {
            let mut guard = cell.borrow_mut();
            if let Some((cx, sol)) = guard.1.as_ref() {
                if *cx == x {
                    return Some(sol.clone());
                }
            }
            match solve(x) {
                Ok(sol) => {
                    *guard.1 = Some((x, sol.clone()));
                    Some(sol)
                }
                Err(e) => {
                    *guard.0 = Some(e);
                    None
                }
            }
        };
        let search = monotone_search(
            LAMBDA_MIN,
            hi,
            |x| eval(x).is_none_or(|s| ok(&s)),
            |x| eval(x).is_none_or(|s| close(&s)),
        );
        let pass = search.map(|s| s.pass);
        let result = pass.and_then(&eval);
        let (err, _) = cell.into_inner();
        if let Some(e) = err.take() {
            return Err(e);
        }
        result.ok_or_else(|| Error::Unsupported("constraint unreachable within multiplier range".into()))
    }

    /// Marginal results per unit of budget routed to `placement` at the
    /// optimum for total budget `budget`; `delta` defaults to `1e-3 · budget`.
    pub fn marginal_roi(
        &self,
        log: &OpportunityLog,
        budget: f64,
        placement: usize,
        delta: Option<f64>,
    ) -> Result<MarginalRoi> {
        let delta = delta.unwrap_or(1e-3 * budget);
        let optimum = self.solve_lambda_star(log, budget)?;
        let spend = optimum
            .totals
            .by_placement
            .get(placement)
            .map_or(0.0, |p| p.spend);
        if spend <= 0.0 {
            return Ok(MarginalRoi::Inactive);
        }
        self.marginal_roi_at_spend(log, placement, spend, delta)
    }

    /// Slope of the best achievable value on `placement` alone with respect
    /// to its budget, evaluated at `spend`. Central difference when both
    /// sides are constrained, forward difference at the unconstrained edge.
    pub fn marginal_roi_at_spend(
        &self,
        log: &OpportunityLog,
        placement: usize,
        spend: f64,
        delta: f64,
    ) -> Result<MarginalRoi> {
        if spend <= 0.0 {
            return Ok(MarginalRoi::Inactive);
        }
        if !(delta > 0.0 && delta < spend) {
            return Err(Error::Domain { what: "delta", value: delta });
        }
        let view = log.placement_view(placement);
        let at = |b: f64| self.solve_lambda_star(&view, b);
        let plus = at(spend + delta)?;
        if plus.unconstrained {
            let here = at(spend)?;
            return Ok(MarginalRoi::Active((plus.totals.value - here.totals.value) / delta));
        }
        let minus = at(spend - delta)?;
        Ok(MarginalRoi::Active(
            (plus.totals.value - minus.totals.value) / (2.0 * delta),
        ))
    }

    /// Finite-difference check of `V'(λ) = λ S'(λ)`; `delta` defaults to `1e-4 · λ`.
    pub fn prop1_residual(&self, log: &OpportunityLog, lambda: f64, delta: Option<f64>) -> Result<Prop1Check> {
        if !(lambda > 0.0) {
            return Err(Error::Domain { what: "lambda", value: lambda });
        }
        let delta = delta.unwrap_or(1e-4 * lambda);
        let up = self.replay_lambda(log, lambda + delta)?;
        let down = self.replay_lambda(log, lambda - delta)?;
        let value_slope = (up.value - down.value) / (2.0 * delta);
        let spend_slope = (up.spend - down.spend) / (2.0 * delta);
        Ok(Prop1Check {
            value_slope,
            spend_slope,
            residual: (value_slope - lambda * spend_slope).abs(),
        })
    }

    /// Dual objective `V(λ) - λ S(λ) + λ B`.
    pub fn dual_value(&self, log: &OpportunityLog, lambda: f64, budget: f64) -> Result<f64> {
        let t = self.replay_lambda(log, lambda)?;
        Ok(t.value - lambda * t.spend + lambda * budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::CompetitorModel;

    fn three_record_log() -> OpportunityLog {
        let mut log = OpportunityLog::new();
        let m = log.add_mechanism(MechanismSpec::second_price(CompetitorModel::uniform(0.0, 1.0).unwrap()));
        for (i, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            let landscape = RealizedLandscape {
                clearing_bid: 0.5,
                cost_if_won: 0.5,
            };
            log.push(LogRecord::realized(i as f64, 0, v, m, landscape)).unwrap();
        }
        log
    }

    #[test]
    fn replay_realized_small_log() {
        let oracle = HindsightOracle::default();
        let log = three_record_log();
        // λ = 5: bids 0.2, 0.4, 0.6 so only v = 3 clears 0.5.
        let t = oracle.replay(&log, &MultiplierVector::budget_only(5.0)).unwrap();
        assert_eq!((t.spend, t.value, t.wins), (0.5, 3.0, 1));
        // λ = 3: bids 1/3, 2/3, 1 win v = 2 and v = 3.
        let t = oracle.replay(&log, &MultiplierVector::budget_only(3.0)).unwrap();
        assert_eq!((t.spend, t.value, t.wins), (1.0, 5.0, 2));
        let t = oracle.replay(&log, &MultiplierVector::budget_only(1e12)).unwrap();
        assert_eq!((t.spend, t.value), (0.0, 0.0));
    }

    #[test]
    fn replay_expected_single_record() {
        let oracle = HindsightOracle::default();
        let mut log = OpportunityLog::new();
        let m = log.add_mechanism(MechanismSpec::second_price(CompetitorModel::uniform(0.0, 1.0).unwrap()));
        log.push(LogRecord::expected(0.0, 0, 1.0, m)).unwrap();
        let t = oracle.replay(&log, &MultiplierVector::budget_only(2.0)).unwrap();
        assert!((t.spend - 0.125).abs() < 1e-15);
        assert!((t.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn realized_bracket_on_small_log() {
        let oracle = HindsightOracle::default();
        let sol = oracle.solve_lambda_star(&three_record_log(), 1.0).unwrap();
        assert!(!sol.unconstrained);
        assert_eq!(sol.totals.spend, 1.0);
        assert_eq!(sol.totals.value, 5.0);
        let b = sol.bracket.expect("step spend yields a bracket");
        assert!((b.below - 2.0).abs() < 1e-9 && b.below <= 2.0);
        assert!((b.above - 2.0).abs() < 1e-9 && b.above > 2.0);
        assert!((b.win_set_upper - 4.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_budget_flagged() {
        let oracle = HindsightOracle::default();
        let sol = oracle.solve_lambda_star(&three_record_log(), 10.0).unwrap();
        assert!(sol.unconstrained);
        assert_eq!(sol.lambda, LAMBDA_MIN);
        assert_eq!(sol.totals.spend, 1.5);
    }

    #[test]
    fn log_rejects_time_regression() {
        let mut log = three_record_log();
        let bad = LogRecord::expected(0.5, 0, 1.0, 0);
        assert!(log.push(bad).is_err());
        assert!(log.push(LogRecord::expected(9.0, 0, 1.0, 7)).is_err());
    }

    #[test]
    fn kkt_without_extra_constraints_reduces_to_budget() {
        let oracle = HindsightOracle::default();
        let mut log = OpportunityLog::new();
        let m = log.add_mechanism(MechanismSpec::second_price(CompetitorModel::lognormal(0.0, 1.0).unwrap()));
        for i in 0..200 {
            log.push(LogRecord::expected(i as f64, 0, 0.5 + (i % 7) as f64 * 0.3, m)).unwrap();
        }
        let lam = oracle.solve_lambda_star(&log, 40.0).unwrap();
        let kkt = oracle.solve_kkt_grid(&log, &KktConstraints::budget_only(40.0)).unwrap();
        assert!((kkt.multipliers.lambda - lam.lambda).abs() <= 1e-9 * lam.lambda);
        assert!((kkt.totals.spend - 40.0).abs() <= 1e-6 * 40.0);
    }
}
