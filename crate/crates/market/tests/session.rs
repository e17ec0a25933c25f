mod common;

use std::collections::{BTreeMap, BTreeSet};

use ces_chain::state::OfferStatus;
use ces_chain::tx::{settlement_amount, Role};
use ces_chain::{ChainEvent, Obligation, Rejection, TxBody};
use ces_core::agents::{AgentPolicy, AgentSpec};
use ces_core::grid::DeviceKind;
use ces_core::incentives::{build_ces_id, solve_ces_id, CrowdsourceeProfile, IncentiveRound, Participant};
use ces_market::events::EventKind;
use ces_market::session::{selling_capacity, RoundMode};
use ces_market::{bus_party, Cadence, MarketSession, SessionConfig, SessionError, SessionReport};

fn run(scenario: ces_core::Scenario, config: SessionConfig) -> MarketSession {
    let mut s = MarketSession::new(scenario, config).unwrap();
    s.run().unwrap();
    s
}

#[test]
fn genesis_enrolls_every_party_with_its_role() {
    let s = MarketSession::new(common::six_bus(AgentPolicy::AlwaysAccept), common::config()).unwrap();
    let state = s.ledger().state();
    assert_eq!(state.parties["operator"].role, Role::Operator);
    assert_eq!(state.parties["b0-generator"].role, Role::Generator);
    for b in [1, 4] {
        assert_eq!(state.parties[&bus_party(b)].role, Role::Type1);
    }
    for b in [2, 3, 5] {
        assert_eq!(state.parties[&bus_party(b)].role, Role::Type2);
        assert!(state.preferences.contains_key(&bus_party(b)));
    }
    assert!(s.ledger().validate().is_ok());
}

#[test]
fn day_ahead_writes_a_contract_per_member_and_period() {
    let mut s = MarketSession::new(common::six_bus(AgentPolicy::AlwaysAccept), common::config()).unwrap();
    let da = s.run_day_ahead().unwrap().clone();
    // the substation generator plus Type-1 buses 1 and 4
    assert_eq!(da.contracts.len(), 3 * 24);
    let members: BTreeSet<&str> = da.contracts.iter().map(|c| c.party.as_str()).collect();
    assert_eq!(members, BTreeSet::from(["b0-generator", "bus-1", "bus-4"]));
    for c in &da.contracts {
        let on_chain = &s.ledger().state().contracts[&c.contract_id];
        assert_eq!(on_chain.party, c.party);
        assert_eq!(on_chain.quantity, c.quantity);
        assert_eq!(on_chain.price, c.price);
        assert_eq!(c.price, da.dlmp.at(c.period, da.solution.schedule.generators.get(&c.party).map_or_else(|| c.party[4..].parse().unwrap(), |g| g.bus)).unwrap());
    }
    let gen = &da.solution.schedule.generators["b0-generator"];
    let gen_total: f64 = da.contracts.iter().filter(|c| c.party == "b0-generator").map(|c| c.quantity).sum();
    assert!((gen_total - gen.p.iter().sum::<f64>()).abs() < 1e-12);
    assert!(matches!(s.run_day_ahead(), Err(SessionError::Sequence(_))));
}

#[test]
fn no_generators_or_type1_means_no_contracts() {
    let mut scenario = common::three_sellers(AgentPolicy::AlwaysAccept, 2);
    // keep a generator (the feeder needs supply) but check Type-1 absence
    let mut s = MarketSession::new(scenario.clone(), common::config()).unwrap();
    let da = s.run_day_ahead().unwrap();
    assert!(da.contracts.iter().all(|c| c.party == "b0-generator"));

    // without any generator or Type-1 device the contract list is empty
    scenario.network.devices.retain(|d| !matches!(d.kind, DeviceKind::Generator { .. }));
    for d in scenario.network.devices.iter_mut() {
        if let DeviceKind::Uncontrollable { profile, .. } = &mut d.kind {
            profile.iter_mut().for_each(|p| *p = 0.0);
        }
    }
    let mut s = MarketSession::new(scenario, common::config()).unwrap();
    let da = s.run_day_ahead().unwrap();
    assert!(da.contracts.is_empty());
}

#[test]
fn infeasible_day_ahead_aborts_with_a_diagnostic() {
    let mut scenario = common::three_sellers(AgentPolicy::AlwaysAccept, 2);
    for d in scenario.network.devices.iter_mut() {
        if let DeviceKind::Uncontrollable { profile, .. } = &mut d.kind {
            profile.iter_mut().for_each(|p| *p = 50.0);
        }
    }
    let mut s = MarketSession::new(scenario, common::config()).unwrap();
    let err = s.run_day_ahead().unwrap_err();
    assert!(matches!(err, SessionError::DayAhead(_)), "{err}");
    assert!(err.to_string().contains("infeasible"), "{err}");
    assert!(matches!(s.open_period(0), Err(SessionError::Sequence(_))));
}

#[test]
fn all_accept_clears_every_period_without_fallback() {
    let s = run(common::six_bus(AgentPolicy::AlwaysAccept), common::config());
    for p in s.periods() {
        assert!(p.d_t > 0.0);
        assert!(p.accepted_mw >= p.d_t - 1e-9, "period {}", p.period);
        assert_eq!(p.fallback_mw(), 0.0);
        assert_eq!(p.rounds.len(), 1);
    }
    let report = SessionReport::from_session(&s);
    assert!(report.periods.iter().all(|p| p.covered));
    assert!(report.totals.premium_settled > 0.0);
}

#[test]
fn all_reject_falls_back_in_full_and_pays_no_premium() {
    let s = run(common::six_bus(AgentPolicy::AlwaysReject), common::config());
    for p in s.periods() {
        assert_eq!(p.accepted_mw, 0.0);
        assert!((p.fallback_mw() - p.d_t).abs() <= 1e-9 * p.d_t.max(1.0), "period {}", p.period);
        assert_eq!(p.rounds.len(), 2, "default of two chances");
        assert_eq!(p.rounds[1].mode, RoundMode::Resolve);
    }
    assert_eq!(s.ledger().state().total_premium(), 0);
    assert!(s.ledger().state().premium_paid.values().all(|v| *v == 0));
}

#[test]
fn all_reject_honours_max_rounds() {
    let mut config = common::config();
    config.escalation.max_rounds = 3;
    let mut s = MarketSession::new(common::six_bus(AgentPolicy::AlwaysReject), config).unwrap();
    s.run_day_ahead().unwrap();
    let p = s.run_realtime_period(0).unwrap();
    assert_eq!(p.rounds.len(), 3);
    assert!((p.fallback_mw() - p.d_t).abs() < 1e-9);
}

#[test]
fn three_sellers_cover_ten_megawatts() {
    let mut config = common::config();
    config.demand_override = Some(vec![10.0, 10.0]);
    config.budget = [0.0, 100.0];
    let mut s = MarketSession::new(common::three_sellers(AgentPolicy::AlwaysAccept, 2), config.clone()).unwrap();
    s.run_day_ahead().unwrap();
    let p = s.run_realtime_period(0).unwrap();
    assert!(p.accepted_mw >= 10.0 - 1e-9);
    assert_eq!(p.fallback_mw(), 0.0);

    // the same program solved independently from the day-ahead data
    let da = s.day_ahead().unwrap();
    let participants: Vec<Participant> = (1..=3)
        .map(|b| Participant {
            profile: CrowdsourceeProfile::new(b, config.default_eta, config.default_zeta, [0.0, 5.0]),
            lambda: da.dlmp.at(0, b).unwrap(),
            u_eq: da.setpoints[&b].u[0],
        })
        .collect();
    let round = IncentiveRound::new(0, 10.0, config.budget, participants);
    let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-6).unwrap();
    let offered: BTreeMap<usize, f64> = p.rounds[0].offers.iter().map(|o| (o.bus, o.quantity_mw)).collect();
    let expected: BTreeMap<usize, f64> = sol.allocations.iter().filter(|a| a.u_a > 1e-6).map(|a| (a.id, a.u_a)).collect();
    assert_eq!(offered, expected);
    assert!((p.accepted_mw - sol.total_quantity()).abs() < 1e-9);
}

#[test]
fn zero_shortfall_issues_no_offers() {
    let mut config = common::config();
    config.demand_override = Some(vec![0.0, 0.0]);
    let s = run(common::three_sellers(AgentPolicy::AlwaysAccept, 2), config);
    for p in s.periods() {
        assert!(p.rounds.is_empty());
        assert_eq!(p.fallback_mw(), 0.0);
    }
    assert!(s.ledger().state().offers.is_empty());
}

#[test]
fn demand_beyond_sellers_falls_back_in_full() {
    let mut config = common::config();
    config.demand_override = Some(vec![16.0, 0.0]);
    let s = run(common::three_sellers(AgentPolicy::AlwaysAccept, 2), config);
    let p = &s.periods()[0];
    assert!(p.incentive_error.is_some());
    assert!(p.rounds.is_empty());
    assert!((p.fallback_mw() - 16.0).abs() < 1e-6);
}

#[test]
fn shortfall_beyond_headroom_lands_on_the_ledger() {
    let mut config = common::config();
    config.demand_override = Some(vec![30.0, 0.0]);
    let s = run(common::three_sellers(AgentPolicy::AlwaysReject, 2), config);
    let p = &s.periods()[0];
    assert!(p.fallback.shortfall_mw > 0.0);
    let shortfalls = &s.ledger().state().shortfalls;
    assert_eq!(shortfalls.len(), 1);
    assert_eq!(shortfalls[0].period, 0);
    assert_eq!(shortfalls[0].shortfall, p.fallback.shortfall_mw);
    assert!(SessionReport::from_session(&s).periods[0].covered);
}

#[test]
fn mixed_agents_are_reproducible() {
    let a = run(common::six_bus(common::logistic()), common::config());
    let b = run(common::six_bus(common::logistic()), common::config());
    assert_eq!(SessionReport::from_session(&a).to_json(), SessionReport::from_session(&b).to_json());
    assert_eq!(a.ledger().state_hash(), b.ledger().state_hash());
    let mut other = common::config();
    other.seed = 7;
    let c = run(common::six_bus(common::logistic()), other);
    assert_ne!(a.ledger().state_hash(), c.ledger().state_hash());
}

#[test]
fn every_offer_and_response_is_on_the_ledger() {
    let s = run(common::six_bus(common::logistic()), common::config());
    let state = s.ledger().state();
    let session_offers: BTreeSet<String> = s.periods().iter().flat_map(|p| p.offers().map(|o| o.offer_id.clone())).collect();
    let ledger_offers: BTreeSet<String> = state.offers.keys().cloned().collect();
    assert_eq!(session_offers, ledger_offers);

    let mut responses: BTreeMap<String, usize> = BTreeMap::new();
    for block in s.ledger().blocks() {
        for tx in &block.txs {
            if let TxBody::OfferResponse { offer_id, .. } = &tx.body {
                *responses.entry(offer_id.clone()).or_default() += 1;
            }
        }
    }
    for p in s.periods() {
        for o in p.offers() {
            let record = &state.offers[&o.offer_id];
            match o.accepted {
                Some(true) => {
                    assert_eq!(record.status, OfferStatus::Accepted);
                    assert_eq!(responses.get(&o.offer_id), Some(&1));
                }
                _ => assert_ne!(record.status, OfferStatus::Accepted),
            }
        }
    }
    let settlements: BTreeSet<String> = s.settlements().iter().map(|r| r.tx_id.clone()).collect();
    assert!(settlements.iter().all(|id| s.ledger().find_tx(id).is_some()));
}

#[test]
fn coverage_and_budget_hold_every_period() {
    for policy in [AgentPolicy::AlwaysAccept, AgentPolicy::AlwaysReject, common::logistic()] {
        let s = run(common::six_bus(policy), common::config());
        let report = SessionReport::from_session(&s);
        for p in &report.periods {
            assert!(p.covered, "period {}", p.period);
            assert!(p.premium_settled <= p.budget[1] * s.scenario().dt + 1e-6);
        }
        assert!(report.conservation.holds);
        assert_eq!(report.ledger.rejected, 0);
    }
}

#[test]
fn settlement_pays_price_times_delivery() {
    let mut scenario = common::three_sellers(AgentPolicy::AlwaysAccept, 1);
    let mut partial = AgentSpec::new(AgentPolicy::AlwaysAccept);
    partial.delivery_ratio = 0.8;
    scenario.agents.insert(1, partial.clone());
    scenario.agents.insert(2, partial.clone());
    scenario.agents.insert(3, partial);
    let mut config = common::config();
    config.demand_override = Some(vec![6.0]);
    config.budget = [0.0, 100.0];
    let s = run(scenario, config);
    let state = s.ledger().state();
    for o in s.periods()[0].accepted_offers() {
        let record = &state.offers[&o.offer_id];
        assert_eq!(record.delivered, Some(o.quantity_mw * 0.8));
        assert_eq!(record.settled, Some(settlement_amount(o.price, o.quantity_mw * 0.8, o.quantity_mw)));
        let settlement = s.settlements().iter().find(|r| r.party == o.party).unwrap();
        assert!(settlement.items.contains(&Obligation::Offer(o.offer_id.clone())));
    }
    // one settlement per paid party
    let parties: BTreeSet<&str> = s.settlements().iter().map(|r| r.party.as_str()).collect();
    assert_eq!(parties.len(), s.settlements().len());
    assert!(s.conserves_money());
}

#[test]
fn idle_parties_get_no_settlement() {
    let mut config = common::config();
    config.demand_override = Some(vec![0.0, 0.0]);
    let s = run(common::three_sellers(AgentPolicy::AlwaysAccept, 2), config);
    let paid: BTreeSet<&str> = s.settlements().iter().map(|r| r.party.as_str()).collect();
    assert_eq!(paid, BTreeSet::from(["b0-generator"]));
}

#[test]
fn periodic_cadence_settles_as_it_goes() {
    let mut config = common::config();
    config.cadence = Cadence::Periods { n: 6 };
    let s = run(common::six_bus(AgentPolicy::AlwaysAccept), config);
    let runs: BTreeSet<u64> = s.settlements().iter().map(|r| r.height).collect();
    assert_eq!(runs.len(), 4);
    assert!(s.conserves_money());
    let state = s.ledger().state();
    assert!(state.offers.values().all(|o| o.status != OfferStatus::Accepted || o.settled.is_some()));
}

#[test]
fn manual_offers_wait_for_their_owner_and_lapse() {
    let mut config = common::config();
    config.demand_override = Some(vec![10.0, 10.0]);
    config.budget = [0.0, 100.0];
    let mut s = MarketSession::new(common::three_sellers(AgentPolicy::AlwaysAccept, 2), config).unwrap();
    s.run_day_ahead().unwrap();
    for b in 1..=3 {
        s.set_manual(b, true);
    }
    s.open_period(0).unwrap();
    let pending: Vec<(String, String)> = s.pending_offers().iter().map(|o| (o.offer_id.clone(), o.party.clone())).collect();
    assert!(!pending.is_empty());
    s.auto_respond().unwrap();
    assert_eq!(s.pending_offers().len(), pending.len(), "agents leave manual offers alone");

    let (offer, owner) = &pending[0];
    let intruder = if owner == "bus-1" { "bus-2" } else { "bus-1" };
    let ack = s.respond(intruder, offer, true).unwrap();
    assert!(matches!(ack.rejection(), Some(Rejection::Forbidden { .. })));
    let ack = s.respond(owner, "offer-nope", true).unwrap();
    assert!(matches!(ack.rejection(), Some(Rejection::UnknownOffer { .. })));
    let ack = s.respond(owner, offer, true).unwrap();
    assert!(ack.rejection().is_none());
    let (height, _, _) = s.ledger().find_tx(&ack.tx_id).unwrap();
    assert_eq!(height, ack.height);
    let again = s.respond(owner, offer, false).unwrap();
    assert!(matches!(again.rejection(), Some(Rejection::DoubleResponse { .. })));

    // the rest lapse at the deadline; late answers are refused as expired
    let closed = loop {
        if let Some(p) = s.close_round().unwrap() {
            break p;
        }
    };
    assert!(closed.accepted_offers().any(|o| &o.offer_id == offer));
    if let Some((late, late_owner)) = pending.get(1) {
        let ack = s.respond(late_owner, late, true).unwrap();
        assert!(matches!(ack.rejection(), Some(Rejection::ExpiredOffer { .. })), "{ack:?}");
    }
    assert!(matches!(s.respond("bus-99", offer, true), Err(SessionError::UnknownParty(_))));
}

#[test]
fn periods_open_in_order() {
    let mut s = MarketSession::new(common::three_sellers(AgentPolicy::AlwaysAccept, 2), common::config()).unwrap();
    s.run_day_ahead().unwrap();
    assert!(matches!(s.open_period(1), Err(SessionError::Sequence(_))));
    assert!(matches!(s.close_round(), Err(SessionError::Sequence(_))));
    s.run_realtime_period(0).unwrap();
    s.run_realtime_period(1).unwrap();
    assert!(s.is_finished());
    assert!(matches!(s.open_period(2), Err(SessionError::Sequence(_))));
}

#[test]
fn events_follow_ledger_commit_order() {
    let s = run(common::six_bus(common::logistic()), common::config());
    let mut last_height = 0;
    let mut offers_seen = 0;
    for e in s.events() {
        match &e.kind {
            EventKind::Block { height, .. } => {
                assert!(*height >= last_height);
                last_height = *height;
            }
            EventKind::Ledger { height, event, .. } => {
                assert_eq!(*height, last_height, "ledger events follow their block");
                if matches!(event, ChainEvent::OfferOpened { .. }) {
                    offers_seen += 1;
                }
            }
            _ => {}
        }
    }
    assert_eq!(offers_seen, s.ledger().state().offers.len());
    let ids: Vec<u64> = s.events().iter().map(|e| e.id).collect();
    assert_eq!(ids, (1..=ids.len() as u64).collect::<Vec<_>>());
}

#[test]
fn escalation_raises_rejected_premiums_within_budget() {
    // two sellers accept anything, the third only a premium well above its price
    let mut scenario = common::three_sellers(AgentPolicy::AlwaysAccept, 1);
    scenario.agents.insert(3, AgentSpec::new(AgentPolicy::AlwaysReject));
    let mut config = common::config();
    config.demand_override = Some(vec![14.0]);
    config.budget = [20.0, 60.0];
    config.escalation.max_rounds = 3;
    let s = run(scenario, config.clone());
    let p = &s.periods()[0];
    let first = &p.rounds[0];
    assert_eq!(first.offers.len(), 3);
    assert!(p.rounds.len() >= 2);
    assert_eq!(p.rounds[1].mode, RoundMode::Escalate);
    let before = first.offers.iter().find(|o| o.bus == 3).unwrap();
    let after = p.rounds[1].offers.iter().find(|o| o.bus == 3).unwrap();
    assert!(after.premium > before.premium);
    assert!(after.premium <= before.premium * config.escalation.gamma + 1e-9);
    let committed: f64 = p.accepted_offers().map(|o| o.payment).sum::<f64>()
        + p.rounds[1].offers.iter().map(|o| o.payment).sum::<f64>();
    assert!(committed <= config.budget[1] + 1e-9);
    assert!(p.accepted_mw + p.fallback_mw() >= 14.0 - 1e-6);
}

#[test]
fn capacity_counts_solar_battery_and_shapable_reference() {
    let scenario = common::six_bus(AgentPolicy::AlwaysAccept);
    for bus in scenario.type2_crowdsourcees() {
        for t in [3, 12, 20] {
            let mut expected = 0.0;
            for d in scenario.network.devices.iter().filter(|d| d.bus == bus) {
                expected += match &d.kind {
                    DeviceKind::Solar { profile } => profile[t],
                    DeviceKind::Battery { p_cap, .. } => *p_cap,
                    DeviceKind::Shapable {
                        energy_demand, window, ..
                    } if (window[0]..window[1]).contains(&t) => energy_demand / (window[1] - window[0]) as f64,
                    _ => 0.0,
                };
            }
            assert!((selling_capacity(&scenario, bus, t) - expected).abs() < 1e-12);
        }
    }
}
