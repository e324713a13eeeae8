use autobid_core::bid_engine::{adjusted_value, invert_markup, surplus, BidEngine, MultiplierVector};
use autobid_core::mechanisms::{AuctionType, CompetitorModel, MechanismSpec};
use proptest::prelude::*;

fn competitor() -> impl Strategy<Value = CompetitorModel> {
    prop_oneof![
        (-1.5f64..1.5, 0.2f64..1.5).prop_map(|(mu, sigma)| CompetitorModel::lognormal(mu, sigma).unwrap()),
        (0.0f64..1.0, 0.2f64..3.0).prop_map(|(lo, w)| CompetitorModel::uniform(lo, lo + w).unwrap()),
    ]
}

fn mechanism() -> impl Strategy<Value = MechanismSpec> {
    (competitor(), prop::bool::ANY, 0.0f64..0.5).prop_map(|(c, first, reserve)| {
        let m = if first {
            MechanismSpec::first_price(c)
        } else {
            MechanismSpec::second_price(c)
        };
        m.with_reserve(reserve)
    })
}

proptest! {
    #[test]
    fn win_prob_and_cost_are_monotone(m in mechanism(), a in 0.0f64..6.0, d in 0.0f64..2.0) {
        let (lo, hi) = (a, a + d);
        prop_assert!(m.win_prob(lo).unwrap() <= m.win_prob(hi).unwrap() + 1e-15);
        prop_assert!(m.expected_cost(lo).unwrap() <= m.expected_cost(hi).unwrap() + 1e-12);
    }

    #[test]
    fn expected_cost_bounded_by_bid(m in mechanism(), b in 0.0f64..6.0) {
        let g = m.win_prob(b).unwrap();
        let h = m.expected_cost(b).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= b * g + 1e-12);
        if m.auction == AuctionType::FirstPrice {
            prop_assert!((h - b * g).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn bid_never_exceeds_adjusted_value(
        m in mechanism(),
        v in 0.0f64..10.0,
        lambda in 0.05f64..5.0,
        mu_k in 0.0f64..2.0,
    ) {
        let mult = MultiplierVector {
            window_mu: Some(mu_k),
            ..MultiplierVector::budget_only(lambda)
        };
        let d = BidEngine::default().bid_for(&m, v, &mult).unwrap();
        let x = adjusted_value(v, &mult).unwrap().value;
        prop_assert!(d.bid >= 0.0);
        prop_assert!(d.bid <= x + 1e-12, "bid {} above adjusted value {}", d.bid, x);
    }

    #[test]
    fn shaded_bid_maximizes_surplus(c in competitor(), x in 0.1f64..8.0) {
        let m = MechanismSpec::first_price(c);
        let b = invert_markup(&m, x).unwrap().bid;
        let best = surplus(&m, x, b).unwrap();
        for i in 0..=200 {
            let probe = x * i as f64 / 200.0;
            prop_assert!(surplus(&m, x, probe).unwrap() <= best + 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn resolution_matches_clearing_rule(m in mechanism(), b in 0.0f64..4.0, c in 0.0f64..4.0) {
        let o = m.resolve_against(b, c);
        let clearing = c.max(m.reserve);
        prop_assert_eq!(o.won, b >= clearing);
        if o.won {
            let expected = match m.auction {
                AuctionType::SecondPrice => clearing,
                AuctionType::FirstPrice => b,
            };
            prop_assert_eq!(o.cost, expected);
            prop_assert_eq!(o.landscape.resolve(m.auction, b), Some(o.cost));
        } else {
            prop_assert_eq!(o.cost, 0.0);
            prop_assert_eq!(o.landscape.resolve(m.auction, b), None);
        }
    }
}

#[test]
fn second_price_bids_adjusted_value() {
    let m = MechanismSpec::second_price(CompetitorModel::lognormal(0.0, 1.0).unwrap());
    let d = BidEngine::default().bid_for(&m, 3.0, &MultiplierVector::budget_only(2.0)).unwrap();
    assert_eq!(d.bid, 1.5);
}

#[test]
fn bid_cap_binds() {
    let m = MechanismSpec::second_price(CompetitorModel::lognormal(0.0, 1.0).unwrap());
    let d = BidEngine::new(0.5).unwrap().bid_for(&m, 3.0, &MultiplierVector::budget_only(1.0)).unwrap();
    assert_eq!(d.bid, 0.5);
}

#[test]
fn empirical_first_price_bid_is_sane() {
    let samples: Vec<f64> = (1..=200).map(|i| i as f64 / 100.0).collect();
    let m = MechanismSpec::first_price(CompetitorModel::empirical(samples).unwrap());
    for x in [0.3, 1.0, 2.5, 5.0] {
        let d = BidEngine::default().optimal_bid(&m, x).unwrap();
        assert!(d.bid <= x, "x={x} bid={}", d.bid);
        assert!(d.surplus_at_bid >= 0.0);
    }
}
