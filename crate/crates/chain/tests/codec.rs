use std::path::PathBuf;

use ces_chain::codec::{Canonical, CodecError};
use ces_chain::tx::{Obligation, Preferences, Role};
use ces_chain::{EnrollmentAuthority, Hash32, Transaction, TxBody, OPERATOR};
use proptest::prelude::*;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden/offer_tx.sha256")
}

fn sample_offer() -> Transaction {
    let key = EnrollmentAuthority::from_seed(42).issue(OPERATOR);
    Transaction::signed(
        "offer-0001",
        OPERATOR,
        3_600_000,
        TxBody::IncentiveOffer {
            offer_id: "offer-0001".into(),
            crowdsourcee: "bus-7".into(),
            period: 12,
            quantity: 5.0,
            price: 10.004,
            premium: 0.004,
            expiry: 3_660_000,
        },
        &key,
    )
    .unwrap()
}

#[test]
fn encoding_is_deterministic() {
    let tx = sample_offer();
    assert_eq!(tx.to_canonical_bytes().unwrap(), tx.to_canonical_bytes().unwrap());
    assert_eq!(sample_offer(), tx);
}

#[test]
fn tx_id_changes_the_bytes() {
    let a = sample_offer();
    let mut b = a.clone();
    b.tx_id = "offer-0002".into();
    assert_ne!(a.to_canonical_bytes().unwrap(), b.to_canonical_bytes().unwrap());
}

#[test]
fn sample_offer_matches_golden_digest() {
    let digest = Hash32::digest(&sample_offer().to_canonical_bytes().unwrap());
    let golden = std::fs::read_to_string(golden_path()).expect("golden digest file");
    assert_eq!(digest.to_hex(), golden.trim());
}

#[test]
fn non_finite_price_is_unencodable() {
    let key = EnrollmentAuthority::from_seed(1).issue(OPERATOR);
    let err = Transaction::signed(
        "x",
        OPERATOR,
        0,
        TxBody::SetpointContract {
            contract_id: "c".into(),
            party: "g".into(),
            period: 0,
            quantity: 1.0,
            price: f64::INFINITY,
        },
        &key,
    )
    .unwrap_err();
    assert!(matches!(err, CodecError::Unencodable { field: "price", .. }));
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = sample_offer().to_canonical_bytes().unwrap();
    bytes.push(0);
    assert_eq!(Transaction::from_canonical_bytes(&bytes), Err(CodecError::Trailing(1)));
}

#[test]
fn json_round_trip() {
    let tx = sample_offer();
    let json = serde_json::to_string(&tx).unwrap();
    assert!(json.contains("\"type\":\"incentive-offer\""));
    assert_eq!(serde_json::from_str::<Transaction>(&json).unwrap(), tx);
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e9..1e9f64, Just(0.0), Just(-0.0)]
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z0-9-]{0,12}"
}

fn obligation() -> impl Strategy<Value = Obligation> {
    prop_oneof![ident().prop_map(Obligation::Offer), ident().prop_map(Obligation::Contract)]
}

fn body() -> impl Strategy<Value = TxBody> {
    prop_oneof![
        (ident(), 0u8..4, any::<[u8; 32]>()).prop_map(|(party, r, public_key)| TxBody::Enroll {
            party,
            role: [Role::Operator, Role::Generator, Role::Type1, Role::Type2][r as usize],
            public_key
        }),
        any::<i64>().prop_map(|amount| TxBody::BudgetDeposit { amount }),
        (ident(), finite(), finite(), prop::option::of(finite()), prop::option::of(finite())).prop_map(
            |(owner, u_min, u_max, eta, zeta)| TxBody::PreferenceUpdate {
                owner,
                preferences: Preferences { u_min, u_max, eta, zeta }
            }
        ),
        (ident(), ident(), any::<u32>(), finite(), finite()).prop_map(|(contract_id, party, period, quantity, price)| {
            TxBody::SetpointContract { contract_id, party, period, quantity, price }
        }),
        (ident(), ident(), any::<u32>(), finite(), finite(), finite(), any::<u64>()).prop_map(
            |(offer_id, crowdsourcee, period, quantity, price, premium, expiry)| TxBody::IncentiveOffer {
                offer_id,
                crowdsourcee,
                period,
                quantity,
                price,
                premium,
                expiry
            }
        ),
        (ident(), any::<bool>()).prop_map(|(offer_id, accept)| TxBody::OfferResponse { offer_id, accept }),
        (ident(), any::<u32>(), obligation(), finite()).prop_map(|(party, period, obligation, delivered)| {
            TxBody::MeterReading { party, period, obligation, delivered }
        }),
        (ident(), any::<i64>(), prop::collection::vec(obligation(), 0..4))
            .prop_map(|(party, amount, items)| TxBody::Settlement { party, amount, items }),
        (any::<u32>(), finite(), "[ -~]{0,20}").prop_map(|(period, shortfall, reason)| TxBody::ShortfallNotice {
            period,
            shortfall,
            reason
        }),
    ]
}

proptest! {
    #[test]
    fn decode_inverts_encode(body in body(), id in ident(), ts in any::<u64>(), sig in prop::collection::vec(any::<u8>(), 64)) {
        let tx = Transaction {
            tx_id: id,
            submitter: "s".into(),
            timestamp: ts,
            body,
            signature: sig.try_into().unwrap(),
        };
        let bytes = tx.to_canonical_bytes().unwrap();
        let back = Transaction::from_canonical_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_canonical_bytes().unwrap(), bytes);
        prop_assert_eq!(back, tx);
    }

    #[test]
    fn decoding_garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        if let Ok(tx) = Transaction::from_canonical_bytes(&bytes) {
            // anything accepted re-encodes to the same bytes
            prop_assert_eq!(tx.to_canonical_bytes().unwrap(), bytes);
        }
    }
}
