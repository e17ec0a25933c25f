mod common;

use ces_chain::state::{OfferStatus, Outcome, Rejection};
use ces_chain::tx::{to_micros, Preferences, Role};
use ces_chain::{Obligation, TxBody, WorldState, OPERATOR};
use common::{apply_all, Harness};
use proptest::prelude::*;

fn funded(h: &mut Harness, budget: i64) -> WorldState {
    let mut s = WorldState::new();
    let r = apply_all(&mut s, &h.genesis(budget, 2));
    assert!(r.iter().all(|r| r.applied()), "{r:?}");
    s
}

fn rejection(outcome: &Outcome) -> &Rejection {
    match outcome {
        Outcome::Rejected { reason } => reason,
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn full_delivery_settles_price_times_quantity() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let txs = [
        h.offer("o1", "bus-1", 5.0, 10.004, 0.004),
        h.respond("bus-1", "o1", true),
        h.meter("bus-1", "o1", 5.0),
        h.settle("bus-1", 50_020_000, &["o1"]),
    ];
    let r = apply_all(&mut s, &txs);
    assert!(r.iter().all(|r| r.applied()), "{r:?}");
    assert_eq!(s.balance("bus-1"), 50_020_000);
    assert_eq!(s.balance(OPERATOR), to_micros(1000.0) - 50_020_000);
    assert_eq!(s.offers["o1"].settled, Some(50_020_000));
    // premium 0.004 $/MWh on 5 MWh
    assert_eq!(s.premium_paid[&3], 20_000);
}

#[test]
fn partial_delivery_settles_pro_rata() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let txs = [
        h.offer("o1", "bus-1", 5.0, 10.004, 0.0),
        h.respond("bus-1", "o1", true),
        h.meter("bus-1", "o1", 4.0),
    ];
    apply_all(&mut s, &txs);
    let wrong = h.settle("bus-1", 50_020_000, &["o1"]);
    assert_eq!(
        rejection(&s.apply(&wrong).outcome),
        &Rejection::AmountMismatch {
            claimed: 50_020_000,
            computed: 40_016_000
        }
    );
    let right = h.settle("bus-1", 40_016_000, &["o1"]);
    assert!(s.apply(&right).applied());
    assert_eq!(s.balance("bus-1"), 40_016_000);
}

#[test]
fn over_delivery_is_capped_at_quantity() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let txs = [
        h.offer("o1", "bus-1", 5.0, 10.004, 0.0),
        h.respond("bus-1", "o1", true),
        h.meter("bus-1", "o1", 9.0),
        h.settle("bus-1", 50_020_000, &["o1"]),
    ];
    assert!(apply_all(&mut s, &txs).iter().all(|r| r.applied()));
}

#[test]
fn expired_offer_response_is_rejected_without_state_change() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let offer = h.offer("o1", "bus-1", 5.0, 10.0, 0.0);
    s.apply(&offer);
    h.clock += 120_000;
    let before = s.state_hash();
    let late = h.respond("bus-1", "o1", true);
    let r = s.apply(&late);
    assert!(matches!(rejection(&r.outcome), Rejection::ExpiredOffer { .. }));
    assert_eq!(s.state_hash(), before);
    assert_eq!(s.offers["o1"].status, OfferStatus::Open);
}

#[test]
fn second_response_is_a_double_response() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    apply_all(&mut s, &[h.offer("o1", "bus-1", 5.0, 10.0, 0.0), h.respond("bus-1", "o1", false)]);
    let before = s.state_hash();
    let again = h.respond("bus-1", "o1", true);
    assert_eq!(
        rejection(&s.apply(&again).outcome),
        &Rejection::DoubleResponse { offer_id: "o1".into() }
    );
    assert_eq!(s.state_hash(), before);
}

#[test]
fn response_to_unknown_offer_or_from_someone_else() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let ghost = h.respond("bus-1", "nope", true);
    assert!(matches!(rejection(&s.apply(&ghost).outcome), Rejection::UnknownOffer { .. }));
    s.apply(&h.offer("o1", "bus-1", 5.0, 10.0, 0.0));
    let other = h.respond("bus-2", "o1", true);
    assert!(matches!(rejection(&s.apply(&other).outcome), Rejection::Forbidden { .. }));
}

#[test]
fn insufficient_budget_is_rejected() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(10.0));
    apply_all(
        &mut s,
        &[
            h.offer("o1", "bus-1", 5.0, 10.004, 0.0),
            h.respond("bus-1", "o1", true),
            h.meter("bus-1", "o1", 5.0),
        ],
    );
    let before = s.state_hash();
    let r = s.apply(&h.settle("bus-1", 50_020_000, &["o1"]));
    assert_eq!(
        rejection(&r.outcome),
        &Rejection::InsufficientBudget {
            needed: 50_020_000,
            available: 10_000_000
        }
    );
    assert_eq!(s.state_hash(), before);
}

#[test]
fn an_offer_settles_at_most_once() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    apply_all(
        &mut s,
        &[
            h.offer("o1", "bus-1", 1.0, 20.0, 0.0),
            h.respond("bus-1", "o1", true),
            h.meter("bus-1", "o1", 1.0),
            h.settle("bus-1", 20_000_000, &["o1"]),
        ],
    );
    let r = s.apply(&h.settle("bus-1", 20_000_000, &["o1"]));
    assert!(matches!(rejection(&r.outcome), Rejection::AlreadySettled { .. }));
    assert_eq!(s.balance("bus-1"), 20_000_000);
}

#[test]
fn settlement_needs_a_meter_reading_and_an_acceptance() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    apply_all(&mut s, &[h.offer("o1", "bus-1", 1.0, 20.0, 0.0), h.respond("bus-1", "o1", true)]);
    let r = s.apply(&h.settle("bus-1", 20_000_000, &["o1"]));
    assert!(matches!(rejection(&r.outcome), Rejection::MissingMeterReading { .. }));
    apply_all(&mut s, &[h.offer("o2", "bus-2", 1.0, 20.0, 0.0), h.respond("bus-2", "o2", false)]);
    let r = s.apply(&h.meter("bus-2", "o2", 1.0));
    assert!(matches!(rejection(&r.outcome), Rejection::NotAccepted { .. }));
}

#[test]
fn only_the_operator_issues_offers_and_signatures_must_verify() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let mut forged = h.offer("o1", "bus-1", 1.0, 20.0, 0.0);
    forged.signature[0] ^= 1;
    assert_eq!(rejection(&s.apply(&forged).outcome), &Rejection::BadSignature);

    let body = TxBody::BudgetDeposit { amount: 5 };
    let by_peer = h.tx("bus-1", body);
    assert!(matches!(rejection(&s.apply(&by_peer).outcome), Rejection::Forbidden { .. }));

    let stranger = h.tx("mallory", TxBody::BudgetDeposit { amount: 5 });
    assert!(matches!(rejection(&s.apply(&stranger).outcome), Rejection::UnknownSubmitter { .. }));
}

#[test]
fn duplicate_tx_id_and_enrollment_are_rejected() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let tx = h.offer("o1", "bus-1", 1.0, 20.0, 0.0);
    assert!(s.apply(&tx).applied());
    assert_eq!(rejection(&s.apply(&tx).outcome), &Rejection::DuplicateTxId);
    let again = h.enroll("bus-1", Role::Type2);
    assert!(matches!(rejection(&s.apply(&again).outcome), Rejection::AlreadyEnrolled { .. }));
}

#[test]
fn bootstrap_requires_operator_self_enrollment() {
    let mut h = Harness::new();
    let mut s = WorldState::new();
    let first = h.enroll("bus-1", Role::Type2);
    assert!(!s.apply(&first).applied());
    assert!(s.parties.is_empty());
}

#[test]
fn preferences_are_owner_only_and_validated() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1.0));
    let prefs = Preferences {
        u_min: 0.5,
        u_max: 2.0,
        eta: Some(1.0),
        zeta: None,
    };
    let ok = h.tx(
        "bus-1",
        TxBody::PreferenceUpdate {
            owner: "bus-1".into(),
            preferences: prefs.clone(),
        },
    );
    assert!(s.apply(&ok).applied());
    assert_eq!(s.preferences["bus-1"], prefs);
    let spoof = h.tx(
        "bus-2",
        TxBody::PreferenceUpdate {
            owner: "bus-1".into(),
            preferences: prefs.clone(),
        },
    );
    assert!(!s.apply(&spoof).applied());
    let bad = h.tx(
        "bus-1",
        TxBody::PreferenceUpdate {
            owner: "bus-1".into(),
            preferences: Preferences { u_min: 3.0, ..prefs },
        },
    );
    assert!(matches!(rejection(&s.apply(&bad).outcome), Rejection::Invalid { .. }));
}

#[test]
fn setpoint_contracts_settle_like_offers() {
    let mut h = Harness::new();
    let mut s = funded(&mut h, to_micros(1000.0));
    let txs = [
        h.tx(
            OPERATOR,
            TxBody::SetpointContract {
                contract_id: "c1".into(),
                party: "gen-1".into(),
                period: 3,
                quantity: 2.0,
                price: 30.0,
            },
        ),
        h.tx(
            OPERATOR,
            TxBody::MeterReading {
                party: "gen-1".into(),
                period: 3,
                obligation: Obligation::Contract("c1".into()),
                delivered: 2.0,
            },
        ),
        h.tx(
            OPERATOR,
            TxBody::Settlement {
                party: "gen-1".into(),
                amount: 60_000_000,
                items: vec![Obligation::Contract("c1".into())],
            },
        ),
    ];
    let r = apply_all(&mut s, &txs);
    assert!(r.iter().all(|r| r.applied()), "{r:?}");
    assert_eq!(s.balance("gen-1"), 60_000_000);
}

#[test]
fn equal_histories_give_equal_hashes_and_a_cent_changes_it() {
    let build = |budget| {
        let mut h = Harness::new();
        funded(&mut h, budget)
    };
    assert_eq!(build(1_000_000).state_hash(), build(1_000_000).state_hash());
    assert_ne!(build(1_000_000).state_hash(), build(1_010_000).state_hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every settlement moves exactly what leaves the operator into one
    /// party, and the total of all balances equals what was deposited.
    #[test]
    fn settlements_conserve_money(
        deals in prop::collection::vec((1u32..=500, 1u32..=5_000, 0u32..=600, any::<bool>()), 1..12)
    ) {
        let mut h = Harness::new();
        let budget = to_micros(1e6);
        let mut s = funded(&mut h, budget);
        for (k, (q, p, d, accept)) in deals.iter().enumerate() {
            let (quantity, price, delivered) = (*q as f64 / 100.0, *p as f64 / 1000.0, *d as f64 / 100.0);
            let who = if k % 2 == 0 { "bus-1" } else { "bus-2" };
            let id = format!("o{k}");
            s.apply(&h.offer(&id, who, quantity, price, 0.0));
            s.apply(&h.respond(who, &id, *accept));
            if !accept {
                continue;
            }
            s.apply(&h.meter(who, &id, delivered));
            let due = s.amount_due(&Obligation::Offer(id.clone())).unwrap();
            let before_op = s.balance(OPERATOR);
            let before_party = s.balance(who);
            prop_assert!(s.apply(&h.settle(who, due, &[&id])).applied());
            prop_assert_eq!(before_op - s.balance(OPERATOR), due);
            prop_assert_eq!(s.balance(who) - before_party, due);
            prop_assert_eq!(due, ces_chain::tx::settlement_amount(price, delivered, quantity));
        }
        prop_assert_eq!(s.balances.values().sum::<i64>(), budget);
    }

    /// A rejected transaction never changes the state hash.
    #[test]
    fn rejections_leave_state_untouched(claim in 0i64..100_000_000, delivered in 0u32..1000) {
        let mut h = Harness::new();
        let mut s = funded(&mut h, to_micros(100.0));
        apply_all(&mut s, &[h.offer("o1", "bus-1", 5.0, 10.0, 1.0), h.respond("bus-1", "o1", true), h.meter("bus-1", "o1", delivered as f64 / 100.0)]);
        let before = s.clone();
        let r = s.apply(&h.settle("bus-1", claim, &["o1"]));
        if !r.applied() {
            prop_assert_eq!(&s, &before);
            prop_assert_eq!(s.state_hash(), before.state_hash());
        }
    }
}
