//! Prints the digest of the reference offer transaction.

use ces_chain::codec::Canonical;
use ces_chain::{EnrollmentAuthority, Hash32, Transaction, TxBody, OPERATOR};

fn main() {
    let key = EnrollmentAuthority::from_seed(42).issue(OPERATOR);
    let tx = Transaction::signed(
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
    .expect("finite fields");
    println!("{}", Hash32::digest(&tx.to_canonical_bytes().expect("encodable")).to_hex());
}
