#![allow(dead_code)]

use ces_chain::tx::{Micros, Role};
use ces_chain::{EnrollmentAuthority, Ledger, Receipt, Transaction, TxBody, WorldState, OPERATOR};

pub struct Harness {
    pub ca: EnrollmentAuthority,
    pub clock: u64,
    seq: u64,
}

impl Harness {
    pub fn new() -> Self {
        Self {
            ca: EnrollmentAuthority::from_seed(42),
            clock: 1_000,
            seq: 0,
        }
    }

    pub fn tx(&mut self, submitter: &str, body: TxBody) -> Transaction {
        self.seq += 1;
        self.clock += 10;
        Transaction::signed(format!("tx-{:05}", self.seq), submitter, self.clock, body, &self.ca.issue(submitter)).unwrap()
    }

    pub fn enroll(&mut self, party: &str, role: Role) -> Transaction {
        let public_key = self.ca.issue(party).public_key();
        self.tx(
            OPERATOR,
            TxBody::Enroll {
                party: party.into(),
                role,
                public_key,
            },
        )
    }

    /// Operator, a budget deposit, and Type-2 crowdsourcees `bus-1..=n`.
    pub fn genesis(&mut self, budget: Micros, crowdsourcees: usize) -> Vec<Transaction> {
        let mut txs = vec![self.enroll(OPERATOR, Role::Operator), self.tx(OPERATOR, TxBody::BudgetDeposit { amount: budget })];
        for i in 1..=crowdsourcees {
            txs.push(self.enroll(&format!("bus-{i}"), Role::Type2));
        }
        txs
    }

    pub fn offer(&mut self, offer_id: &str, to: &str, quantity: f64, price: f64, premium: f64) -> Transaction {
        let expiry = self.clock + 60_000;
        self.tx(
            OPERATOR,
            TxBody::IncentiveOffer {
                offer_id: offer_id.into(),
                crowdsourcee: to.into(),
                period: 3,
                quantity,
                price,
                premium,
                expiry,
            },
        )
    }

    pub fn respond(&mut self, who: &str, offer_id: &str, accept: bool) -> Transaction {
        self.tx(
            who,
            TxBody::OfferResponse {
                offer_id: offer_id.into(),
                accept,
            },
        )
    }

    pub fn meter(&mut self, party: &str, offer_id: &str, delivered: f64) -> Transaction {
        self.tx(
            OPERATOR,
            TxBody::MeterReading {
                party: party.into(),
                period: 3,
                obligation: ces_chain::Obligation::Offer(offer_id.into()),
                delivered,
            },
        )
    }

    pub fn settle(&mut self, party: &str, amount: Micros, offers: &[&str]) -> Transaction {
        self.tx(
            OPERATOR,
            TxBody::Settlement {
                party: party.into(),
                amount,
                items: offers.iter().map(|o| ces_chain::Obligation::Offer((*o).into())).collect(),
            },
        )
    }
}

pub fn apply_all(state: &mut WorldState, txs: &[Transaction]) -> Vec<Receipt> {
    txs.iter().map(|t| state.apply(t)).collect()
}

/// A ledger of `blocks` blocks: a genesis block, then offer/response/
/// meter/settlement rounds cycling over three crowdsourcees.
pub fn busy_ledger(blocks: u64) -> Ledger {
    let mut h = Harness::new();
    let mut ledger = Ledger::new();
    let genesis = h.genesis(1_000_000_000_000, 3);
    ledger.commit(h.clock, genesis).unwrap();
    for k in 1..blocks {
        let who = format!("bus-{}", k % 3 + 1);
        let id = format!("offer-{k}");
        let txs = match k % 4 {
            1 => vec![h.offer(&id, &who, 2.0, 31.5, 1.5)],
            2 => vec![h.respond(&format!("bus-{}", (k - 1) % 3 + 1), &format!("offer-{}", k - 1), true)],
            3 => vec![h.meter(&format!("bus-{}", (k - 2) % 3 + 1), &format!("offer-{}", k - 2), 1.5)],
            _ => vec![h.settle(&format!("bus-{}", (k - 3) % 3 + 1), 47_250_000, &[&format!("offer-{}", k - 3)])],
        };
        let receipts = ledger.commit(h.clock, txs).unwrap();
        assert!(receipts.iter().all(Receipt::applied), "block {k}: {receipts:?}");
    }
    ledger
}
