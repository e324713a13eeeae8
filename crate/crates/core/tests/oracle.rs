use autobid_core::bid_engine::MultiplierVector;
use autobid_core::mechanisms::{CompetitorModel, MechanismSpec, RealizedLandscape};
use autobid_core::oracle::{HindsightOracle, KktConstraints, LogRecord, OpportunityLog};
use proptest::prelude::*;

fn expected_log(values: &[f64], first_price: bool) -> OpportunityLog {
    let mut log = OpportunityLog::new();
    let c = CompetitorModel::lognormal(0.0, 0.8).unwrap();
    let m = log.add_mechanism(if first_price {
        MechanismSpec::first_price(c)
    } else {
        MechanismSpec::second_price(c)
    });
    for (i, v) in values.iter().enumerate() {
        log.push(LogRecord::expected(i as f64, 0, *v, m)).unwrap();
    }
    log
}

/// Second-price realized log from `(value, clearing bid)` pairs.
fn realized_log(items: &[(f64, f64)]) -> OpportunityLog {
    let mut log = OpportunityLog::new();
    let m = log.add_mechanism(MechanismSpec::second_price(CompetitorModel::uniform(0.0, 1.0).unwrap()));
    for (i, &(v, c)) in items.iter().enumerate() {
        let l = RealizedLandscape {
            clearing_bid: c,
            cost_if_won: c,
        };
        log.push(LogRecord::realized(i as f64, 0, v, m, l)).unwrap();
    }
    log
}

/// Best value over every win set that fits the budget.
fn best_primal(items: &[(f64, f64)], budget: f64) -> f64 {
    let mut best = 0.0_f64;
    for mask in 0u32..(1 << items.len()) {
        let (mut s, mut v) = (0.0, 0.0);
        for (i, (vi, ci)) in items.iter().enumerate() {
            if mask & (1 << i) != 0 {
                s += ci;
                v += vi;
            }
        }
        if s <= budget {
            best = best.max(v);
        }
    }
    best
}

fn items() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.1f64..5.0, 0.05f64..2.0), 1..=10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spend_and_value_fall_with_lambda(
        values in prop::collection::vec(0.05f64..6.0, 1..40),
        first_price in prop::bool::ANY,
        a in 0.05f64..5.0,
        d in 0.0f64..3.0,
    ) {
        let log = expected_log(&values, first_price);
        let o = HindsightOracle::default();
        let lo = o.replay(&log, &MultiplierVector::budget_only(a)).unwrap();
        let hi = o.replay(&log, &MultiplierVector::budget_only(a + d)).unwrap();
        prop_assert!(hi.spend <= lo.spend + 1e-9);
        prop_assert!(hi.value <= lo.value + 1e-9);
    }

    #[test]
    fn realized_spend_falls_with_lambda(items in items(), a in 0.05f64..5.0, d in 0.0f64..3.0) {
        let log = realized_log(&items);
        let o = HindsightOracle::default();
        let lo = o.replay(&log, &MultiplierVector::budget_only(a)).unwrap();
        let hi = o.replay(&log, &MultiplierVector::budget_only(a + d)).unwrap();
        prop_assert!(hi.spend <= lo.spend);
        prop_assert!(hi.wins <= lo.wins);
    }

    #[test]
    fn dual_is_convex(
        values in prop::collection::vec(0.05f64..6.0, 1..40),
        first_price in prop::bool::ANY,
        a in 0.1f64..4.0,
        d in 0.01f64..2.0,
        budget in 0.1f64..10.0,
    ) {
        let log = expected_log(&values, first_price);
        let o = HindsightOracle::default();
        let f = |l: f64| o.dual_value(&log, l, budget).unwrap();
        let mid = f(a + d);
        let chord = 0.5 * (f(a) + f(a + 2.0 * d));
        prop_assert!(mid <= chord + 1e-9 * chord.abs().max(1.0), "D(mid)={mid} chord={chord}");
    }

    #[test]
    fn weak_duality_against_enumeration(items in items(), budget in 0.1f64..6.0, lambda in 0.01f64..10.0) {
        let log = realized_log(&items);
        let dual = HindsightOracle::default().dual_value(&log, lambda, budget).unwrap();
        let primal = best_primal(&items, budget);
        prop_assert!(dual >= primal - 1e-9, "dual {dual} below primal {primal}");
    }

    #[test]
    fn oracle_never_overspends_realized(items in items(), budget in 0.1f64..6.0) {
        let log = realized_log(&items);
        let sol = HindsightOracle::default().solve_lambda_star(&log, budget).unwrap();
        prop_assert!(sol.totals.spend <= budget + 1e-12);
        prop_assert!(sol.totals.value <= best_primal(&items, budget) + 1e-9);
    }
}

#[test]
fn budget_only_kkt_matches_lambda_star() {
    let values: Vec<f64> = (1..=200).map(|i| 0.05 * i as f64).collect();
    let log = expected_log(&values, false);
    let o = HindsightOracle::default();
    let star = o.solve_lambda_star(&log, 20.0).unwrap();
    let kkt = o.solve_kkt_grid(&log, &KktConstraints::budget_only(20.0)).unwrap();
    assert!((kkt.multipliers.lambda / star.lambda - 1.0).abs() < 1e-6);
}

#[test]
fn unconstrained_budget_is_flagged() {
    let log = expected_log(&[1.0, 2.0], false);
    let sol = HindsightOracle::default().solve_lambda_star(&log, 1e6).unwrap();
    assert!(sol.unconstrained);
}

#[test]
fn cost_target_kkt_meets_target() {
    let values: Vec<f64> = (1..=300).map(|i| 0.02 * i as f64).collect();
    let log = expected_log(&values, false);
    let o = HindsightOracle::default();
    let free = o.solve_lambda_star(&log, 60.0).unwrap();
    let c = 0.8 * free.totals.cost_per_result();
    let k = KktConstraints {
        cost_target: Some(c),
        ..KktConstraints::budget_only(60.0)
    };
    let sol = o.solve_kkt_grid(&log, &k).unwrap();
    assert!(sol.multipliers.mu > 0.0);
    assert!(sol.totals.cost_per_result() <= c * (1.0 + 1e-6));
    assert!(sol.totals.spend <= 60.0 * (1.0 + 1e-6));
}

/// Second-price log over 300 time steps; the middle third sits in a
/// delivery window and the last third in a guarantee window.
fn windowed_log() -> OpportunityLog {
    let mut log = OpportunityLog::new();
    let m = log.add_mechanism(MechanismSpec::second_price(CompetitorModel::lognormal(0.0, 0.8).unwrap()));
    for i in 0..300 {
        let v = 0.2 + 0.03 * ((i * 37) % 100) as f64;
        let mut r = LogRecord::expected(i as f64, 0, v, m);
        if (100..200).contains(&i) {
            r.delivery_window = Some(0);
        }
        if i >= 200 {
            r.guarantee_window = Some(0);
        }
        log.push(r).unwrap();
    }
    log
}

fn assert_kkt(sol: &autobid_core::oracle::KktSolution, k: &KktConstraints) {
    let m = sol.multipliers;
    let t = &sol.totals;
    let binds = |x: f64, limit: f64| (x - limit).abs() <= 1e-4 * limit;
    assert!(t.spend <= k.budget * (1.0 + 1e-4));
    assert!(m.lambda <= 1e-9 || binds(t.spend, k.budget), "budget: {m:?} {t:?}");
    if let Some(cap) = k.delivery_cap {
        let lk = m.window_lambda.unwrap_or(0.0);
        assert!(t.delivery_spend <= cap * (1.0 + 1e-4));
        assert!(lk <= 1e-9 || binds(t.delivery_spend, cap), "delivery: {m:?} {t:?}");
    }
    if let Some(floor) = k.guarantee_floor {
        let mk = m.window_mu.unwrap_or(0.0);
        assert!(t.guarantee_value >= floor * (1.0 - 1e-4));
        assert!(mk <= 1e-9 || binds(t.guarantee_value, floor), "guarantee: {m:?} {t:?}");
    }
}

#[test]
fn window_kkt_branches_hold() {
    let log = windowed_log();
    let o = HindsightOracle::default();
    let free = o.solve_lambda_star(&log, 40.0).unwrap().totals;
    let delivery_free = o
        .replay(&log, &MultiplierVector::budget_only(o.solve_lambda_star(&log, 40.0).unwrap().lambda))
        .unwrap()
        .delivery_spend;
    let guarantee_free = free.guarantee_value;
    for (cap, floor) in [
        (None, None),
        (Some(0.5 * delivery_free), None),
        (Some(2.0 * delivery_free), None),
        (None, Some(1.3 * guarantee_free)),
        (None, Some(0.5 * guarantee_free)),
        (Some(0.5 * delivery_free), Some(1.3 * guarantee_free)),
    ] {
        let k = KktConstraints {
            delivery_cap: cap,
            guarantee_floor: floor,
            ..KktConstraints::budget_only(40.0)
        };
        let sol = o.solve_kkt_grid(&log, &k).unwrap();
        assert_kkt(&sol, &k);
    }
}

#[test]
fn slack_windows_keep_zero_multipliers() {
    let log = windowed_log();
    let k = KktConstraints {
        delivery_cap: Some(1e6),
        guarantee_floor: Some(1e-3),
        ..KktConstraints::budget_only(40.0)
    };
    let sol = HindsightOracle::default().solve_kkt_grid(&log, &k).unwrap();
    assert_eq!(sol.multipliers.window_lambda, Some(0.0));
    assert_eq!(sol.multipliers.window_mu, Some(0.0));
}

#[test]
fn unreachable_floor_is_reported() {
    let log = windowed_log();
    let o = HindsightOracle::default();
    // More value than the window holds.
    let k = KktConstraints {
        guarantee_floor: Some(1e6),
        ..KktConstraints::budget_only(40.0)
    };
    assert!(matches!(
        o.solve_kkt_grid(&log, &k),
        Err(autobid_core::Error::InfeasibleGuarantee { .. })
    ));
    // Reachable in the window, but not on this budget.
    let all = o
        .replay(&log, &MultiplierVector { window_mu: Some(1e6), ..MultiplierVector::budget_only(1e-9) })
        .unwrap()
        .guarantee_value;
    let k = KktConstraints {
        guarantee_floor: Some(0.99 * all),
        ..KktConstraints::budget_only(5.0)
    };
    match o.solve_kkt_grid(&log, &k) {
        Err(autobid_core::Error::InfeasibleGuarantee { max_achievable, .. }) => assert!(max_achievable < 0.99 * all),
        other => panic!("expected infeasibility, got {other:?}"),
    }
}
