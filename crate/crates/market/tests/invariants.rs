mod common;

use ces_chain::state::OfferStatus;
use ces_core::agents::{AgentPolicy, AgentSpec};
use ces_market::{MarketSession, SessionReport};
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = AgentPolicy> {
    prop_oneof![
        Just(AgentPolicy::AlwaysAccept),
        Just(AgentPolicy::AlwaysReject),
        (20.0f64..200.0).prop_map(|rho| AgentPolicy::Threshold { rho }),
        (20.0f64..200.0, 0.05f64..1.0).prop_map(|(rho, kappa)| AgentPolicy::Logistic { rho, kappa }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever the agents do, each period is covered, premiums stay within
    /// budget, the ledger mirrors the session and money is conserved.
    #[test]
    fn sessions_keep_their_books(
        policies in prop::collection::vec(policy(), 3),
        ratios in prop::collection::vec(0.5f64..=1.0, 3),
        demand in prop::collection::vec(0.0f64..25.0, 2),
        b_min in 0.0f64..20.0,
        b_span in 1.0f64..80.0,
        seed in any::<u64>(),
    ) {
        let mut scenario = common::three_sellers(AgentPolicy::AlwaysAccept, 2);
        for (i, (p, r)) in policies.iter().zip(&ratios).enumerate() {
            let mut spec = AgentSpec::new(p.clone());
            spec.delivery_ratio = *r;
            scenario.agents.insert(i + 1, spec);
        }
        let mut config = common::config();
        config.seed = seed;
        config.demand_override = Some(demand.clone());
        config.budget = [b_min, b_min + b_span];
        let mut s = MarketSession::new(scenario, config).unwrap();
        s.run().unwrap();

        let report = SessionReport::from_session(&s);
        prop_assert!(report.conservation.holds);
        prop_assert_eq!(report.ledger.rejected, 0);
        prop_assert!(s.ledger().validate().is_ok());
        let state = s.ledger().state();
        for (p, r) in s.periods().iter().zip(&report.periods) {
            prop_assert!(r.covered, "period {}", p.period);
            let premium: f64 = p.accepted_offers().map(|o| o.premium * o.quantity_mw).sum();
            prop_assert!(premium <= p.budget[1] + 1e-6, "premium {} budget {:?}", premium, p.budget);
            for o in p.offers() {
                let record = &state.offers[&o.offer_id];
                prop_assert_eq!(record.status == OfferStatus::Accepted, o.accepted == Some(true));
            }
        }
        // every accepted, metered offer is settled exactly once
        for o in state.offers.values() {
            if o.status == OfferStatus::Accepted {
                prop_assert!(o.settled.is_some());
            }
        }
    }
}
