//! World state and the contracts that transition it.
//!
//! [`WorldState::apply`] is the only way balances and records change. A
//! transaction either applies completely or is rejected with the state left
//! exactly as it was; both outcomes are deterministic functions of the
//! state and the transaction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Encoder};
use crate::crypto::{verify, Hash32, PUBLIC_KEY_LEN};
use crate::tx::{settlement_amount, Micros, Obligation, Preferences, Role, Transaction, TxBody};

/// Party id of the CES operator, the account that funds settlements.
pub const OPERATOR: &str = "operator";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum Rejection {
    #[error("duplicate transaction id")]
    DuplicateTxId,
    #[error("submitter {submitter} is not enrolled")]
    UnknownSubmitter { submitter: String },
    #[error("signature does not verify")]
    BadSignature,
    #[error("{submitter} may not submit {kind}")]
    Forbidden { submitter: String, kind: String },
    #[error("{party} is already enrolled")]
    AlreadyEnrolled { party: String },
    #[error("{party} is not enrolled")]
    UnknownParty { party: String },
    #[error("unknown offer {offer_id}")]
    UnknownOffer { offer_id: String },
    #[error("offer {offer_id} expired at {expiry}")]
    ExpiredOffer { offer_id: String, expiry: u64 },
    #[error("double response to offer {offer_id}")]
    DoubleResponse { offer_id: String },
    #[error("id {id} is already in use")]
    DuplicateId { id: String },
    #[error("unknown obligation {id}")]
    UnknownObligation { id: String },
    #[error("obligation {id} was not accepted")]
    NotAccepted { id: String },
    #[error("delivery for {id} is already recorded")]
    DuplicateReading { id: String },
    #[error("no meter reading for {id}")]
    MissingMeterReading { id: String },
    #[error("obligation {id} is already settled")]
    AlreadySettled { id: String },
    #[error("settlement amount {claimed} does not match computed {computed}")]
    AmountMismatch { claimed: Micros, computed: Micros },
    #[error("insufficient operator budget: need {needed}, have {available}")]
    InsufficientBudget { needed: Micros, available: Micros },
    #[error("invalid transaction: {reason}")]
    Invalid { reason: String },
}

fn invalid(reason: impl Into<String>) -> Rejection {
    Rejection::Invalid { reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyRecord {
    pub role: Role,
    #[serde(with = "crate::tx::hex_array")]
    pub public_key: [u8; PUBLIC_KEY_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OfferStatus {
    Open,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferRecord {
    pub crowdsourcee: String,
    pub period: u32,
    pub quantity: f64,
    pub price: f64,
    pub premium: f64,
    pub expiry: u64,
    pub status: OfferStatus,
    /// Transaction that answered the offer.
    pub response_tx: Option<String>,
    pub delivered: Option<f64>,
    pub settled: Option<Micros>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractRecord {
    pub party: String,
    pub period: u32,
    pub quantity: f64,
    pub price: f64,
    pub delivered: Option<f64>,
    pub settled: Option<Micros>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortfallRecord {
    pub tx_id: String,
    pub period: u32,
    pub shortfall: f64,
    pub reason: String,
}

/// Something a contract did, for event streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum ChainEvent {
    Enrolled { party: String, role: Role },
    BudgetDeposited { amount: Micros },
    PreferencesUpdated { owner: String },
    ContractEstablished { contract_id: String, party: String, period: u32, quantity: f64, price: f64 },
    OfferOpened { offer_id: String, crowdsourcee: String, period: u32, quantity: f64, price: f64, premium: f64, expiry: u64 },
    OfferAnswered { offer_id: String, crowdsourcee: String, accepted: bool },
    DeliveryRecorded { party: String, period: u32, obligation: Obligation, delivered: f64 },
    Settled { party: String, amount: Micros, items: Vec<Obligation>, periods: Vec<u32> },
    Shortfall { period: u32, shortfall: f64, reason: String },
}

impl ChainEvent {
    /// The participant this event concerns, if any. Events without a party
    /// are operator-only.
    pub fn party(&self) -> Option<&str> {
        match self {
            ChainEvent::Enrolled { party, .. }
            | ChainEvent::ContractEstablished { party, .. }
            | ChainEvent::DeliveryRecorded { party, .. }
            | ChainEvent::Settled { party, .. } => Some(party),
            ChainEvent::PreferencesUpdated { owner } => Some(owner),
            ChainEvent::OfferOpened { crowdsourcee, .. } | ChainEvent::OfferAnswered { crowdsourcee, .. } => {
                Some(crowdsourcee)
            }
            ChainEvent::BudgetDeposited { .. } | ChainEvent::Shortfall { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Applied { events: Vec<ChainEvent> },
    Rejected { reason: Rejection },
}

/// Per-transaction result of applying a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub tx_id: String,
    pub kind: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl Receipt {
    pub fn applied(&self) -> bool {
        matches!(self.outcome, Outcome::Applied { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub parties: BTreeMap<String, PartyRecord>,
    pub balances: BTreeMap<String, Micros>,
    pub offers: BTreeMap<String, OfferRecord>,
    pub contracts: BTreeMap<String, ContractRecord>,
    pub preferences: BTreeMap<String, Preferences>,
    pub shortfalls: Vec<ShortfallRecord>,
    /// Incentive premium paid out per period.
    pub premium_paid: BTreeMap<u32, Micros>,
    pub tx_ids: BTreeSet<String>,
    /// Number of applied transactions.
    pub version: u64,
}

fn finite(field: &str, v: f64) -> Result<(), Rejection> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{field} is not finite")))
    }
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn balance(&self, party: &str) -> Micros {
        self.balances.get(party).copied().unwrap_or(0)
    }

    pub fn total_premium(&self) -> Micros {
        self.premium_paid.values().sum()
    }

    /// Executes one transaction. On rejection `self` is unchanged.
    pub fn apply(&mut self, tx: &Transaction) -> Receipt {
        let outcome = match self.check(tx) {
            Ok(()) => Outcome::Applied { events: self.commit(tx) },
            Err(reason) => Outcome::Rejected { reason },
        };
        Receipt {
            tx_id: tx.tx_id.clone(),
            kind: tx.kind().to_string(),
            outcome,
        }
    }

    fn operator_enrolled(&self) -> bool {
        self.parties.contains_key(OPERATOR)
    }

    fn require_operator(&self, tx: &Transaction) -> Result<(), Rejection> {
        if tx.submitter == OPERATOR {
            Ok(())
        } else {
            Err(Rejection::Forbidden {
                submitter: tx.submitter.clone(),
                kind: tx.kind().to_string(),
            })
        }
    }

    fn check_signature(&self, tx: &Transaction) -> Result<(), Rejection> {
        let bootstrap = !self.operator_enrolled();
        let key = match (&tx.body, bootstrap) {
            (TxBody::Enroll { party, role, public_key }, true) => {
                if party != OPERATOR || tx.submitter != OPERATOR || *role != Role::Operator {
                    return Err(invalid("the first enrollment must be the operator's own"));
                }
                *public_key
            }
            (_, true) => {
                return Err(Rejection::UnknownSubmitter {
                    submitter: tx.submitter.clone(),
                })
            }
            (_, false) => {
                self.parties
                    .get(&tx.submitter)
                    .ok_or_else(|| Rejection::UnknownSubmitter {
                        submitter: tx.submitter.clone(),
                    })?
                    .public_key
            }
        };
        let msg = tx.signing_bytes().map_err(|e: CodecError| invalid(e.to_string()))?;
        verify(&key, &msg, &tx.signature).map_err(|_| Rejection::BadSignature)
    }

    fn obligation(&self, o: &Obligation) -> Result<(&str, u32, Option<f64>, Option<Micros>), Rejection> {
        match o {
            Obligation::Offer(id) => {
                let r = self.offers.get(id).ok_or_else(|| Rejection::UnknownObligation { id: id.clone() })?;
                if r.status != OfferStatus::Accepted {
                    return Err(Rejection::NotAccepted { id: id.clone() });
                }
                Ok((&r.crowdsourcee, r.period, r.delivered, r.settled))
            }
            Obligation::Contract(id) => {
                let r = self
                    .contracts
                    .get(id)
                    .ok_or_else(|| Rejection::UnknownObligation { id: id.clone() })?;
                Ok((&r.party, r.period, r.delivered, r.settled))
            }
        }
    }

    /// Amount owed for a delivered, unsettled obligation.
    pub fn amount_due(&self, o: &Obligation) -> Result<Micros, Rejection> {
        let (_, _, delivered, settled) = self.obligation(o)?;
        if settled.is_some() {
            return Err(Rejection::AlreadySettled { id: o.id().to_string() });
        }
        let delivered = delivered.ok_or_else(|| Rejection::MissingMeterReading { id: o.id().to_string() })?;
        Ok(match o {
            Obligation::Offer(id) => {
                let r = &self.offers[id];
                settlement_amount(r.price, delivered, r.quantity)
            }
            Obligation::Contract(id) => {
                let r = &self.contracts[id];
                settlement_amount(r.price, delivered, r.quantity)
            }
        })
    }

    fn check(&self, tx: &Transaction) -> Result<(), Rejection> {
        if self.tx_ids.contains(&tx.tx_id) {
            return Err(Rejection::DuplicateTxId);
        }
        self.check_signature(tx)?;
        match &tx.body {
            TxBody::Enroll { party, .. } => {
                if self.operator_enrolled() {
                    self.require_operator(tx)?;
                }
                if self.parties.contains_key(party) {
                    return Err(Rejection::AlreadyEnrolled { party: party.clone() });
                }
            }
            TxBody::BudgetDeposit { amount } => {
                self.require_operator(tx)?;
                if *amount <= 0 {
                    return Err(invalid("deposit must be positive"));
                }
            }
            TxBody::PreferenceUpdate { owner, preferences: p } => {
                if &tx.submitter != owner {
                    return Err(Rejection::Forbidden {
                        submitter: tx.submitter.clone(),
                        kind: tx.kind().to_string(),
                    });
                }
                for (f, v) in [("u_min", p.u_min), ("u_max", p.u_max)] {
                    finite(f, v)?;
                }
                if p.u_min < 0.0 || p.u_min > p.u_max {
                    return Err(invalid("preferences need 0 <= u_min <= u_max"));
                }
                if p.eta.is_some_and(|e| !(e > 0.0)) || p.zeta.is_some_and(|z| !(z >= 0.0)) {
                    return Err(invalid("preference weights must be eta > 0, zeta >= 0"));
                }
            }
            TxBody::SetpointContract {
                contract_id,
                quantity,
                price,
                ..
            } => {
                self.require_operator(tx)?;
                if self.contracts.contains_key(contract_id) {
                    return Err(Rejection::DuplicateId { id: contract_id.clone() });
                }
                finite("quantity", *quantity)?;
                finite("price", *price)?;
            }
            TxBody::IncentiveOffer {
                offer_id,
                crowdsourcee,
                quantity,
                price,
                premium,
                expiry,
                ..
            } => {
                self.require_operator(tx)?;
                if self.offers.contains_key(offer_id) {
                    return Err(Rejection::DuplicateId { id: offer_id.clone() });
                }
                match self.parties.get(crowdsourcee) {
                    Some(p) if p.role == Role::Type2 => {}
                    Some(_) => return Err(invalid(format!("{crowdsourcee} is not a Type-2 crowdsourcee"))),
                    None => return Err(Rejection::UnknownParty { party: crowdsourcee.clone() }),
                }
                finite("price", *price)?;
                if !(*quantity >= 0.0) || !quantity.is_finite() {
                    return Err(invalid("offer quantity must be non-negative"));
                }
                if !(*premium >= 0.0) || !premium.is_finite() {
                    return Err(invalid("offer premium must be non-negative"));
                }
                if *expiry < tx.timestamp {
                    return Err(invalid("offer expires before it is issued"));
                }
            }
            TxBody::OfferResponse { offer_id, .. } => {
                let offer = self
                    .offers
                    .get(offer_id)
                    .ok_or_else(|| Rejection::UnknownOffer { offer_id: offer_id.clone() })?;
                if tx.submitter != offer.crowdsourcee {
                    return Err(Rejection::Forbidden {
                        submitter: tx.submitter.clone(),
                        kind: tx.kind().to_string(),
                    });
                }
                if offer.status != OfferStatus::Open {
                    return Err(Rejection::DoubleResponse { offer_id: offer_id.clone() });
                }
                if tx.timestamp > offer.expiry {
                    return Err(Rejection::ExpiredOffer {
                        offer_id: offer_id.clone(),
                        expiry: offer.expiry,
                    });
                }
            }
            TxBody::MeterReading {
                party,
                period,
                obligation,
                delivered,
            } => {
                self.require_operator(tx)?;
                let (owner, p, recorded, _) = self.obligation(obligation)?;
                if owner != party || p != *period {
                    return Err(invalid(format!("reading does not match obligation {}", obligation.id())));
                }
                if recorded.is_some() {
                    return Err(Rejection::DuplicateReading {
                        id: obligation.id().to_string(),
                    });
                }
                if !(*delivered >= 0.0) || !delivered.is_finite() {
                    return Err(invalid("delivered energy must be non-negative"));
                }
            }
            TxBody::Settlement { party, amount, items } => {
                self.require_operator(tx)?;
                if items.is_empty() {
                    return Err(invalid("settlement covers nothing"));
                }
                let unique: BTreeSet<_> = items.iter().collect();
                if unique.len() != items.len() {
                    return Err(invalid("settlement lists an obligation twice"));
                }
                let mut computed: Micros = 0;
                for item in items {
                    let (owner, ..) = self.obligation(item)?;
                    if owner != party {
                        return Err(invalid(format!("{} does not belong to {party}", item.id())));
                    }
                    computed += self.amount_due(item)?;
                }
                if computed != *amount {
                    return Err(Rejection::AmountMismatch {
                        claimed: *amount,
                        computed,
                    });
                }
                let available = self.balance(OPERATOR);
                if available < computed {
                    return Err(Rejection::InsufficientBudget {
                        needed: computed,
                        available,
                    });
                }
            }
            TxBody::ShortfallNotice { shortfall, .. } => {
                self.require_operator(tx)?;
                finite("shortfall", *shortfall)?;
            }
        }
        Ok(())
    }

    /// Applies a checked transaction.
    fn commit(&mut self, tx: &Transaction) -> Vec<ChainEvent> {
        self.tx_ids.insert(tx.tx_id.clone());
        self.version += 1;
        match &tx.body {
            TxBody::Enroll { party, role, public_key } => {
                self.parties.insert(
                    party.clone(),
                    PartyRecord {
                        role: *role,
                        public_key: *public_key,
                    },
                );
                vec![ChainEvent::Enrolled {
                    party: party.clone(),
                    role: *role,
                }]
            }
            TxBody::BudgetDeposit { amount } => {
                *self.balances.entry(OPERATOR.to_string()).or_default() += amount;
                vec![ChainEvent::BudgetDeposited { amount: *amount }]
            }
            TxBody::PreferenceUpdate { owner, preferences } => {
                self.preferences.insert(owner.clone(), preferences.clone());
                vec![ChainEvent::PreferencesUpdated { owner: owner.clone() }]
            }
            TxBody::SetpointContract {
                contract_id,
                party,
                period,
                quantity,
                price,
            } => {
                self.contracts.insert(
                    contract_id.clone(),
                    ContractRecord {
                        party: party.clone(),
                        period: *period,
                        quantity: *quantity,
                        price: *price,
                        delivered: None,
                        settled: None,
                    },
                );
                vec![ChainEvent::ContractEstablished {
                    contract_id: contract_id.clone(),
                    party: party.clone(),
                    period: *period,
                    quantity: *quantity,
                    price: *price,
                }]
            }
            TxBody::IncentiveOffer {
                offer_id,
                crowdsourcee,
                period,
                quantity,
                price,
                premium,
                expiry,
            } => {
                self.offers.insert(
                    offer_id.clone(),
                    OfferRecord {
                        crowdsourcee: crowdsourcee.clone(),
                        period: *period,
                        quantity: *quantity,
                        price: *price,
                        premium: *premium,
                        expiry: *expiry,
                        status: OfferStatus::Open,
                        response_tx: None,
                        delivered: None,
                        settled: None,
                    },
                );
                vec![ChainEvent::OfferOpened {
                    offer_id: offer_id.clone(),
                    crowdsourcee: crowdsourcee.clone(),
                    period: *period,
                    quantity: *quantity,
                    price: *price,
                    premium: *premium,
                    expiry: *expiry,
                }]
            }
            TxBody::OfferResponse { offer_id, accept } => {
                let offer = self.offers.get_mut(offer_id).expect("checked");
                offer.status = if *accept {
                    OfferStatus::Accepted
                } else {
                    OfferStatus::Rejected
                };
                offer.response_tx = Some(tx.tx_id.clone());
                vec![ChainEvent::OfferAnswered {
                    offer_id: offer_id.clone(),
                    crowdsourcee: offer.crowdsourcee.clone(),
                    accepted: *accept,
                }]
            }
            TxBody::MeterReading {
                party,
                period,
                obligation,
                delivered,
            } => {
                match obligation {
                    Obligation::Offer(id) => self.offers.get_mut(id).expect("checked").delivered = Some(*delivered),
                    Obligation::Contract(id) => {
                        self.contracts.get_mut(id).expect("checked").delivered = Some(*delivered)
                    }
                }
                vec![ChainEvent::DeliveryRecorded {
                    party: party.clone(),
                    period: *period,
                    obligation: obligation.clone(),
                    delivered: *delivered,
                }]
            }
            TxBody::Settlement { party, amount, items } => {
                let mut periods = BTreeSet::new();
                for item in items {
                    let due = self.amount_due(item).expect("checked");
                    match item {
                        Obligation::Offer(id) => {
                            let r = self.offers.get_mut(id).expect("checked");
                            r.settled = Some(due);
                            let delivered = r.delivered.expect("checked");
                            let premium = settlement_amount(r.premium, delivered, r.quantity);
                            *self.premium_paid.entry(r.period).or_default() += premium;
                            periods.insert(r.period);
                        }
                        Obligation::Contract(id) => {
                            let r = self.contracts.get_mut(id).expect("checked");
                            r.settled = Some(due);
                            periods.insert(r.period);
                        }
                    }
                }
                *self.balances.entry(OPERATOR.to_string()).or_default() -= amount;
                *self.balances.entry(party.clone()).or_default() += amount;
                vec![ChainEvent::Settled {
                    party: party.clone(),
                    amount: *amount,
                    items: items.clone(),
                    periods: periods.into_iter().collect(),
                }]
            }
            TxBody::ShortfallNotice {
                period,
                shortfall,
                reason,
            } => {
                self.shortfalls.push(ShortfallRecord {
                    tx_id: tx.tx_id.clone(),
                    period: *period,
                    shortfall: *shortfall,
                    reason: reason.clone(),
                });
                vec![ChainEvent::Shortfall {
                    period: *period,
                    shortfall: *shortfall,
                    reason: reason.clone(),
                }]
            }
        }
    }

    /// Digest over the canonically ordered contents of the state.
    pub fn state_hash(&self) -> Hash32 {
        Hash32::digest(&self.canonical_bytes())
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        // Every float in the state came through a validated transaction and
        // is finite, so encoding cannot fail.
        let mut e = Encoder::default();
        self.encode(&mut e).expect("world state holds only finite values");
        e.finish()
    }

    fn encode(&self, e: &mut Encoder) -> Result<(), CodecError> {
        e.u64(self.version);
        e.len("parties", self.parties.len())?;
        for (k, p) in &self.parties {
            e.str("party", k)?;
            e.str("role", &format!("{:?}", p.role))?;
            e.fixed(&p.public_key);
        }
        e.len("balances", self.balances.len())?;
        for (k, b) in &self.balances {
            e.str("party", k)?;
            e.i64(*b);
        }
        e.len("offers", self.offers.len())?;
        for (k, o) in &self.offers {
            e.str("offer_id", k)?;
            e.str("crowdsourcee", &o.crowdsourcee)?;
            e.u32(o.period);
            e.f64("quantity", o.quantity)?;
            e.f64("price", o.price)?;
            e.f64("premium", o.premium)?;
            e.u64(o.expiry);
            e.u8(o.status as u8);
            e.option(o.response_tx.as_ref(), |e, v| e.str("response_tx", v))?;
            e.option(o.delivered.as_ref(), |e, v| e.f64("delivered", *v))?;
            e.option(o.settled.as_ref(), |e, v| {
                e.i64(*v);
                Ok(())
            })?;
        }
        e.len("contracts", self.contracts.len())?;
        for (k, c) in &self.contracts {
            e.str("contract_id", k)?;
            e.str("party", &c.party)?;
            e.u32(c.period);
            e.f64("quantity", c.quantity)?;
            e.f64("price", c.price)?;
            e.option(c.delivered.as_ref(), |e, v| e.f64("delivered", *v))?;
            e.option(c.settled.as_ref(), |e, v| {
                e.i64(*v);
                Ok(())
            })?;
        }
        e.len("preferences", self.preferences.len())?;
        for (k, p) in &self.preferences {
            e.str("owner", k)?;
            TxBody::PreferenceUpdate {
                owner: k.clone(),
                preferences: p.clone(),
            }
            .encode_into(e)?;
        }
        e.len("shortfalls", self.shortfalls.len())?;
        for s in &self.shortfalls {
            e.str("tx_id", &s.tx_id)?;
            e.u32(s.period);
            e.f64("shortfall", s.shortfall)?;
            e.str("reason", &s.reason)?;
        }
        e.len("premium_paid", self.premium_paid.len())?;
        for (t, v) in &self.premium_paid {
            e.u32(*t);
            e.i64(*v);
        }
        e.len("tx_ids", self.tx_ids.len())?;
        for id in &self.tx_ids {
            e.str("tx_id", id)?;
        }
        Ok(())
    }
}
