use std::path::{Path, PathBuf};

use autobid_core::coldstart::{
    expected_spend_closed_form, fit_lognormal, solve_lambda0, solve_lambda0_multi, ColdStart, PlacementPriors,
};
use autobid_core::oracle::{HindsightOracle, KktConstraints, OpportunityLog};
use autobid_core::sim::{
    build_log, compare_with_oracle, fixed_bid_baseline, placement_marginal_roi, run_episode, Episode,
    MechanismTable, Opportunity, ScenarioConfig, TraceRow,
};
use autobid_core::{Error, MultiplierVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{invalid, read_numbers, read_to_string, runtime, sig6, CliError, CliResult, OutDir, Pairs};

pub const TRACE_COLUMNS: [&str; 14] = [
    "interval",
    "opportunity_index",
    "placement_id",
    "value",
    "adjusted_value",
    "bid",
    "won",
    "cost",
    "lambda_tilde",
    "mu",
    "lambda_k",
    "mu_k",
    "cum_spend",
    "cum_value",
];

const RUN_FILES: [&str; 5] = [
    "trace.csv",
    "metrics.csv",
    "resolved_config.json",
    "opportunities.csv",
    "lambda_trajectory.csv",
];

/// Row of the opportunity log written next to the trace.
#[derive(Debug, Serialize, Deserialize)]
struct OpportunityRow {
    interval: usize,
    opportunity_index: usize,
    placement_id: String,
    jitter: f64,
    value: f64,
    competing_bid: f64,
    result_draw: f64,
}

fn load_scenario(path: &Path, seed: Option<u64>) -> CliResult<ScenarioConfig> {
    let text = read_to_string(path)?;
    let mut s: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(s)
}

fn write_run(out: &OutDir, scenario: &ScenarioConfig, episode: &Episode) -> CliResult<()> {
    out.write_rows("trace.csv", &episode.trace)?;
    let opportunities: Vec<_> = episode
        .stream
        .iter()
        .enumerate()
        .map(|(i, o)| OpportunityRow {
            interval: o.interval,
            opportunity_index: i,
            placement_id: scenario.placements[o.placement].id.clone(),
            jitter: o.jitter,
            value: o.value,
            competing_bid: o.competing,
            result_draw: o.result_draw,
        })
        .collect();
    out.write_rows("opportunities.csv", &opportunities)?;
    let m = &episode.metrics;
    let mut p = Pairs::default();
    p.num("opportunities", m.opportunities as f64)
        .num("wins", m.wins as f64)
        .num("total_spend", m.total_spend)
        .num("total_value", m.total_value)
        .num("expected_value", m.expected_value)
        .num("realized_results", m.realized_results as f64)
        .num("cost_per_result", m.cost_per_result)
        .num("budget", scenario.constraints.budget)
        .num("budget_utilization", m.budget_utilization)
        .num("lambda_initial", m.lambda_initial)
        .num("lambda_prime", m.lambda_prime)
        .num("final_lambda_tilde", m.final_lambda_tilde)
        .num("final_mu", m.final_mu)
        .num("max_mu", m.max_mu)
        .num("max_lambda_k", m.max_lambda_k)
        .num("max_mu_k", m.max_mu_k);
    for w in &m.delivery_windows {
        p.num(format!("delivery.{}.spend", w.name), w.spend)
            .num(format!("delivery.{}.value", w.name), w.value)
            .num(format!("delivery.{}.cap", w.name), w.limit);
    }
    for w in &m.guarantee_windows {
        p.num(format!("guarantee.{}.spend", w.name), w.spend)
            .num(format!("guarantee.{}.value", w.name), w.value)
            .num(format!("guarantee.{}.floor", w.name), w.limit);
    }
    for pl in &m.placements {
        p.num(format!("placement.{}.opportunities", pl.id), pl.opportunities as f64)
            .num(format!("placement.{}.wins", pl.id), pl.wins as f64)
            .num(format!("placement.{}.spend", pl.id), pl.spend)
            .num(format!("placement.{}.value", pl.id), pl.value);
    }
    out.write_pairs("metrics.csv", &p.0)?;
    #[derive(Serialize)]
    struct TrajectoryRow {
        interval: usize,
        lambda_tilde: f64,
    }
    let trajectory: Vec<_> = m
        .lambda_tilde_trajectory
        .iter()
        .enumerate()
        .map(|(interval, &lambda_tilde)| TrajectoryRow { interval, lambda_tilde })
        .collect();
    out.write_rows("lambda_trajectory.csv", &trajectory)?;
    let resolved = serde_json::to_string_pretty(scenario).map_err(runtime)?;
    out.write_text("resolved_config.json", &(resolved + "\n"))
}

fn summary(episode: &Episode) -> String {
    let m = &episode.metrics;
    format!(
        "spend={} results={} cost_per_result={} utilization={}",
        sig6(m.total_spend),
        sig6(m.total_value),
        sig6(m.cost_per_result),
        sig6(m.budget_utilization)
    )
}

pub fn run(scenario_path: &Path, out: &Path, seed: Option<u64>, force: bool) -> CliResult<()> {
    let scenario = load_scenario(scenario_path, seed)?;
    let out = OutDir::prepare(out, force, &RUN_FILES)?;
    let episode = run_episode(&scenario).map_err(runtime)?;
    write_run(&out, &scenario, &episode)?;
    println!("{}", summary(&episode));
    Ok(())
}

pub fn sweep(scenario_path: &Path, out: &Path, seed: Option<u64>, seeds: usize, force: bool) -> CliResult<()> {
    if seeds == 0 {
        return Err(invalid("--sweep-seeds must be at least 1"));
    }
    let scenario = load_scenario(scenario_path, seed)?;
    let root = OutDir::prepare(out, force, &["sweep.csv"])?;
    let first = scenario.seed;
    let dirs = (0..seeds as u64)
        .map(|i| root.subdir(&format!("seed_{}", first.wrapping_add(i)), &RUN_FILES))
        .collect::<CliResult<Vec<_>>>()?;

    #[derive(Serialize)]
    struct SweepRow {
        seed: u64,
        opportunities: usize,
        total_spend: f64,
        total_value: f64,
        cost_per_result: f64,
        budget_utilization: f64,
        final_lambda_tilde: f64,
    }
    let rows = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| -> CliResult<SweepRow> {
            let s = scenario.clone().with_seed(first.wrapping_add(i as u64));
            let episode = run_episode(&s).map_err(|e| runtime(format!("seed {}: {e}", s.seed)))?;
            write_run(dir, &s, &episode)?;
            let m = &episode.metrics;
            Ok(SweepRow {
                seed: s.seed,
                opportunities: m.opportunities,
                total_spend: m.total_spend,
                total_value: m.total_value,
                cost_per_result: m.cost_per_result,
                budget_utilization: m.budget_utilization,
                final_lambda_tilde: m.final_lambda_tilde,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    root.write_rows("sweep.csv", &rows)?;
    for r in &rows {
        println!(
            "seed={} spend={} results={} utilization={}",
            r.seed,
            sig6(r.total_spend),
            sig6(r.total_value),
            sig6(r.budget_utilization)
        );
    }
    Ok(())
}

fn read_opportunities(path: &Path, scenario: &ScenarioConfig) -> CliResult<Vec<Opportunity>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut stream = Vec::new();
    for row in reader.deserialize::<OpportunityRow>() {
        let row = row.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let placement = scenario
            .placements
            .iter()
            .position(|p| p.id == row.placement_id)
            .ok_or_else(|| invalid(format!("{}: unknown placement '{}'", path.display(), row.placement_id)))?;
        if row.interval >= scenario.horizon {
            return Err(invalid(format!(
                "{}: interval {} beyond horizon {}",
                path.display(),
                row.interval,
                scenario.horizon
            )));
        }
        stream.push(Opportunity {
            interval: row.interval,
            placement,
            jitter: row.jitter,
            value: row.value,
            competing: row.competing_bid,
            result_draw: row.result_draw,
        });
    }
    Ok(stream)
}

fn read_trace(path: &Path) -> CliResult<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if !header.iter().eq(TRACE_COLUMNS.iter().copied()) {
        return Err(invalid(format!(
            "{}: trace schema mismatch; expected columns {}",
            path.display(),
            TRACE_COLUMNS.join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| invalid(format!("{}: {e}", path.display()))))
        .collect()
}

fn load_log(scenario: &ScenarioConfig, path: &Path) -> CliResult<OpportunityLog> {
    let stream = read_opportunities(path, scenario)?;
    let table = MechanismTable::new(scenario)?;
    build_log(scenario, &table, &stream).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// KKT multipliers when the scenario has constraints beyond the budget.
fn kkt_report(oracle: &HindsightOracle, log: &OpportunityLog, scenario: &ScenarioConfig, p: &mut Pairs) -> CliResult<()> {
    let c = &scenario.constraints;
    if c.cost_target.is_none() && c.delivery_windows.is_empty() && c.guarantee_windows.is_empty() {
        return Ok(());
    }
    let kkt = match KktConstraints::try_from(c) {
        Ok(k) => k,
        Err(e) => {
            p.text("kkt", e);
            return Ok(());
        }
    };
    match oracle.solve_kkt_grid(log, &kkt) {
        Ok(sol) => {
            let m = sol.multipliers;
            let t = &sol.totals;
            p.text("kkt", "solved")
                .num("kkt_lambda", m.lambda)
                .num("kkt_mu", m.mu)
                .num("kkt_lambda_k", m.window_lambda.unwrap_or(0.0))
                .num("kkt_mu_k", m.window_mu.unwrap_or(0.0))
                .num("kkt_spend", t.spend)
                .num("kkt_value", t.value)
                .num("kkt_budget_residual", (t.spend - kkt.budget) / kkt.budget);
            if let Some(c) = kkt.cost_target {
                p.num("kkt_cost_per_result", t.cost_per_result()).num("cost_target", c);
            }
            if let Some(cap) = kkt.delivery_cap {
                p.num("kkt_window_spend", t.delivery_spend).num("delivery_cap", cap);
            }
            if let Some(floor) = kkt.guarantee_floor {
                p.num("kkt_window_value", t.guarantee_value).num("guarantee_floor", floor);
            }
        }
        Err(Error::InfeasibleGuarantee {
            required,
            max_achievable,
        }) => {
            p.text("kkt", "infeasible_guarantee")
                .num("guarantee_floor", required)
                .num("guarantee_max_achievable", max_achievable);
        }
        Err(e) => return Err(runtime(e)),
    }
    Ok(())
}

pub fn compare(run_dir: &Path, out: &Path, force: bool) -> CliResult<()> {
    let scenario = load_scenario(&run_dir.join("resolved_config.json"), None)?;
    let trace = read_trace(&run_dir.join("trace.csv"))?;
    let log = load_log(&scenario, &run_dir.join("opportunities.csv"))?;
    if log.len() != trace.len() {
        return Err(invalid(format!(
            "trace has {} rows but the opportunity log has {}",
            trace.len(),
            log.len()
        )));
    }
    let out = OutDir::prepare(out, force, &["compare.csv", "marginal_roi.csv"])?;

    let agent_spend: f64 = trace.iter().map(|r| r.cost).sum();
    let agent_value: f64 = trace.iter().filter(|r| r.won == 1).map(|r| r.value).sum();
    let budget = scenario.constraints.budget;
    let oracle = HindsightOracle::new(scenario.engine());
    let mut p = Pairs::default();
    p.num("budget", budget).num("agent_spend", agent_spend).num("agent_value", agent_value);

    let mut roi_rows = Vec::new();
    if budget > 0.0 {
        let cmp = compare_with_oracle(&oracle, &log, budget, agent_value).map_err(runtime)?;
        let base = fixed_bid_baseline(&log, budget).map_err(runtime)?;
        let base_ratio = if cmp.oracle_value > 0.0 { base.value / cmp.oracle_value } else { 1.0 };
        p.num("lambda_star", cmp.lambda_star)
            .text("oracle_status", if cmp.unconstrained { "unconstrained" } else { "constrained" })
            .num("oracle_spend", cmp.oracle_spend)
            .num("oracle_value", cmp.oracle_value)
            .num("value_ratio", cmp.value_ratio)
            .num("baseline_bid", base.bid)
            .num("baseline_spend", base.spend)
            .num("baseline_value", base.value)
            .num("baseline_value_ratio", base_ratio);
        kkt_report(&oracle, &log, &scenario, &mut p)?;

        let mut spends = vec![0.0; scenario.placements.len()];
        let mut values = vec![0.0; scenario.placements.len()];
        for r in &trace {
            if let Some(i) = scenario.placements.iter().position(|pl| pl.id == r.placement_id) {
                spends[i] += r.cost;
                if r.won == 1 {
                    values[i] += r.value;
                }
            }
        }
        let rois = placement_marginal_roi(&oracle, &log, &spends, 1e-3).map_err(runtime)?;
        for (i, pl) in scenario.placements.iter().enumerate() {
            roi_rows.push(RoiRow {
                placement_id: pl.id.clone(),
                spend: spends[i],
                value: values[i],
                marginal_roi: rois[i].map_or_else(|| "inactive".to_string(), |x| x.to_string()),
            });
        }
        println!(
            "value_ratio={} baseline_value_ratio={} lambda_star={}{}",
            sig6(cmp.value_ratio),
            sig6(base_ratio),
            sig6(cmp.lambda_star),
            if cmp.unconstrained { " unconstrained" } else { "" }
        );
    } else {
        p.text("oracle_status", "zero_budget").num("value_ratio", 1.0);
        println!("value_ratio=1 (zero budget)");
    }
    out.write_pairs("compare.csv", &p.0)?;
    out.write_rows("marginal_roi.csv", &roi_rows)
}

#[derive(Serialize)]
struct RoiRow {
    placement_id: String,
    spend: f64,
    value: f64,
    marginal_roi: String,
}

pub struct ColdstartInput {
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub mu_prime: Option<f64>,
    pub sigma_prime: Option<f64>,
    pub bids: Option<PathBuf>,
    pub values: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub budget: f64,
    pub opportunities: Option<f64>,
    pub out: PathBuf,
    pub force: bool,
}

fn fitted(samples: Option<&PathBuf>, loc: Option<f64>, scale: Option<f64>, what: &str) -> CliResult<(f64, f64)> {
    match (samples, loc, scale) {
        (Some(path), None, None) => {
            let fit = fit_lognormal(&read_numbers(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            if fit.floored {
                eprintln!(
                    "warning: {what} samples in {} are degenerate; sigma floored at {}",
                    path.display(),
                    fit.sigma
                );
            }
            Ok((fit.mu, fit.sigma))
        }
        (None, Some(l), Some(s)) => Ok((l, s)),
        _ => Err(invalid(format!("give either a {what} sample file or both {what} parameters"))),
    }
}

pub fn coldstart(input: &ColdstartInput) -> CliResult<()> {
    let placements: Vec<PlacementPriors> = match &input.priors {
        Some(path) => {
            let text = read_to_string(path)?;
            let list: Vec<PlacementPriors> =
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            if list.is_empty() {
                return Err(invalid(format!("{}: no placements", path.display())));
            }
            list
        }
        None => {
            let (mu, sigma) = fitted(input.bids.as_ref(), input.mu, input.sigma, "competing-bid")?;
            let (mu_prime, sigma_prime) = fitted(input.values.as_ref(), input.mu_prime, input.sigma_prime, "value")?;
            let t = input
                .opportunities
                .ok_or_else(|| invalid("--opportunities is required without --priors"))?;
            vec![PlacementPriors::new(mu, sigma, mu_prime, sigma_prime, t)?]
        }
    };
    for p in &placements {
        p.validate()?;
    }
    if !(input.budget > 0.0 && input.budget.is_finite()) {
        return Err(invalid(format!("--budget must be > 0, got {}", input.budget)));
    }
    let out = OutDir::prepare(&input.out, input.force, &["coldstart_grid.csv"])?;
    let sol: ColdStart = match placements.as_slice() {
        [p] => solve_lambda0(p, input.budget, p.opportunities)?,
        many => solve_lambda0_multi(many, input.budget)?,
    };

    #[derive(Serialize)]
    struct GridRow {
        lambda: f64,
        spend: f64,
        spend_per_opportunity: f64,
    }
    let total: f64 = placements.iter().map(|p| p.opportunities).sum();
    let center = if sol.unconstrained { 1.0 } else { sol.lambda };
    let points = 121;
    let grid = (0..points)
        .map(|i| {
            let lambda = center * 10f64.powf(-3.0 + 6.0 * i as f64 / (points - 1) as f64);
            let spend = placements
                .iter()
                .map(|p| expected_spend_closed_form(p, lambda).map(|s| s * p.opportunities))
                .sum::<autobid_core::Result<f64>>()?;
            Ok(GridRow {
                lambda,
                spend,
                spend_per_opportunity: spend / total,
            })
        })
        .collect::<autobid_core::Result<Vec<_>>>()
        .map_err(CliError::from)?;
    out.write_rows("coldstart_grid.csv", &grid)?;
    if sol.unconstrained {
        println!("lambda*={} unconstrained", sig6(sol.lambda));
    } else {
        println!("lambda*={}", sig6(sol.lambda));
    }
    Ok(())
}

pub fn oracle(scenario_path: &Path, log_path: &Path, budget: Option<f64>, out: &Path, force: bool) -> CliResult<()> {
    let scenario = load_scenario(scenario_path, None)?;
    let log = load_log(&scenario, log_path)?;
    let budget = budget.unwrap_or(scenario.constraints.budget);
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(invalid(format!("budget must be > 0, got {budget}")));
    }
    if log.is_empty() {
        return Err(invalid(format!("{}: empty log", log_path.display())));
    }
    let out = OutDir::prepare(out, force, &["oracle.csv", "curve.csv"])?;
    let oracle = HindsightOracle::new(scenario.engine());
    let sol = oracle.solve_lambda_star(&log, budget).map_err(runtime)?;
    let mut p = Pairs::default();
    p.num("budget", budget)
        .num("lambda_star", sol.lambda)
        .text("status", if sol.unconstrained { "unconstrained" } else { "constrained" })
        .num("spend", sol.totals.spend)
        .num("value", sol.totals.value)
        .num("budget_residual", (sol.totals.spend - budget) / budget);
    if let Some(b) = sol.bracket {
        p.num("bracket_below", b.below)
            .num("bracket_above", b.above)
            .num("win_set_upper", b.win_set_upper);
    }
    let mut kkt_scenario = scenario.clone();
    kkt_scenario.constraints.budget = budget;
    kkt_report(&oracle, &log, &kkt_scenario, &mut p)?;
    for (i, pl) in scenario.placements.iter().enumerate() {
        let t = sol.totals.by_placement.get(i).copied().unwrap_or_default();
        p.num(format!("placement.{}.spend", pl.id), t.spend)
            .num(format!("placement.{}.value", pl.id), t.value);
    }
    out.write_pairs("oracle.csv", &p.0)?;

    #[derive(Serialize)]
    struct CurveRow {
        lambda: f64,
        spend: f64,
        value: f64,
        dual: f64,
    }
    let center = sol.lambda.max(1e-6);
    let points = 64;
    let curve = (0..points)
        .map(|i| {
            let lambda = center * 10f64.powf(-2.0 + 4.0 * i as f64 / (points - 1) as f64);
            let t = oracle.replay(&log, &MultiplierVector::budget_only(lambda))?;
            Ok(CurveRow {
                lambda,
                spend: t.spend,
                value: t.value,
                dual: t.value - lambda * t.spend + lambda * budget,
            })
        })
        .collect::<autobid_core::Result<Vec<_>>>()
        .map_err(runtime)?;
    out.write_rows("curve.csv", &curve)?;
    println!(
        "lambda*={} spend={} value={}{}",
        sig6(sol.lambda),
        sig6(sol.totals.spend),
        sig6(sol.totals.value),
        if sol.unconstrained { " unconstrained" } else { "" }
    );
    Ok(())
}
