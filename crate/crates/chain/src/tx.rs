//! Ledger transactions.
//!
//! Money on the ledger is an integer number of micro-dollars ([`Micros`]);
//! energy and prices stay floating point (MWh and $/MWh) and are converted
//! once, when an amount is computed, with round-half-away-from-zero.

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{Hash32, KeyPair, PUBLIC_KEY_LEN, SIGNATURE_LEN};

/// Micro-dollars.
pub type Micros = i64;

pub const MICROS_PER_DOLLAR: f64 = 1e6;

pub fn to_micros(dollars: f64) -> Micros {
    (dollars * MICROS_PER_DOLLAR).round() as Micros
}

pub fn to_dollars(micros: Micros) -> f64 {
    micros as f64 / MICROS_PER_DOLLAR
}

/// Amount owed for an obligation: `price × min(delivered, quantity)`, with
/// negative deliveries treated as zero.
pub fn settlement_amount(price: f64, delivered: f64, quantity: f64) -> Micros {
    to_micros(price * delivered.min(quantity).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Operator,
    Generator,
    Type1,
    Type2,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Operator => 0,
            Role::Generator => 1,
            Role::Type1 => 2,
            Role::Type2 => 3,
        }
    }

    fn from_tag(tag: u8, at: usize) -> Result<Self, CodecError> {
        Ok(match tag {
            0 => Role::Operator,
            1 => Role::Generator,
            2 => Role::Type1,
            3 => Role::Type2,
            _ => return Err(CodecError::Invalid { what: "role", at }),
        })
    }
}

/// A crowdsourcee's operating constraints and cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preferences {
    /// Lower bound on offered quantity (MWh per period).
    pub u_min: f64,
    /// Upper bound on offered quantity (MWh per period).
    pub u_max: f64,
    /// Willingness-to-pay weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Deviation-penalty weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
}

/// What a meter reading or settlement line refers to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "kebab-case")]
pub enum Obligation {
    Offer(String),
    Contract(String),
}

impl Obligation {
    pub fn id(&self) -> &str {
        match self {
            Obligation::Offer(id) | Obligation::Contract(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TxBody {
    Enroll {
        party: String,
        role: Role,
        #[serde(with = "hex_array")]
        public_key: [u8; PUBLIC_KEY_LEN],
    },
    BudgetDeposit {
        amount: Micros,
    },
    PreferenceUpdate {
        owner: String,
        preferences: Preferences,
    },
    SetpointContract {
        contract_id: String,
        party: String,
        period: u32,
        /// Scheduled energy for the period, MWh.
        quantity: f64,
        /// $/MWh.
        price: f64,
    },
    IncentiveOffer {
        offer_id: String,
        crowdsourcee: String,
        period: u32,
        /// MWh.
        quantity: f64,
        /// Total price λ + λ_a, $/MWh.
        price: f64,
        /// Incentive premium λ_a included in `price`, $/MWh.
        premium: f64,
        /// Last logical timestamp (ms) at which a response is accepted.
        expiry: u64,
    },
    OfferResponse {
        offer_id: String,
        accept: bool,
    },
    MeterReading {
        party: String,
        period: u32,
        obligation: Obligation,
        /// MWh.
        delivered: f64,
    },
    Settlement {
        party: String,
        amount: Micros,
        items: Vec<Obligation>,
    },
    ShortfallNotice {
        period: u32,
        /// MW left uncovered.
        shortfall: f64,
        reason: String,
    },
}

impl TxBody {
    pub fn kind(&self) -> &'static str {
        match self {
            TxBody::Enroll { .. } => "enroll",
            TxBody::BudgetDeposit { .. } => "budget-deposit",
            TxBody::PreferenceUpdate { .. } => "preference-update",
            TxBody::SetpointContract { .. } => "setpoint-contract",
            TxBody::IncentiveOffer { .. } => "incentive-offer",
            TxBody::OfferResponse { .. } => "offer-response",
            TxBody::MeterReading { .. } => "meter-reading",
            TxBody::Settlement { .. } => "settlement",
            TxBody::ShortfallNotice { .. } => "shortfall-notice",
        }
    }
}

fn encode_obligation(enc: &mut Encoder, o: &Obligation) -> Result<(), CodecError> {
    match o {
        Obligation::Offer(id) => {
            enc.u8(0);
            enc.str("obligation", id)
        }
        Obligation::Contract(id) => {
            enc.u8(1);
            enc.str("obligation", id)
        }
    }
}

fn decode_obligation(dec: &mut Decoder<'_>) -> Result<Obligation, CodecError> {
    let at = dec.position();
    match dec.u8()? {
        0 => Ok(Obligation::Offer(dec.str()?)),
        1 => Ok(Obligation::Contract(dec.str()?)),
        _ => Err(CodecError::Invalid { what: "obligation tag", at }),
    }
}

impl Canonical for TxBody {
    fn encode_into(&self, enc: &mut Encoder) -> Result<(), CodecError> {
        match self {
            TxBody::Enroll { party, role, public_key } => {
                enc.u8(0);
                enc.str("party", party)?;
                enc.u8(role.tag());
                enc.fixed(public_key);
            }
            TxBody::BudgetDeposit { amount } => {
                enc.u8(1);
                enc.i64(*amount);
            }
            TxBody::PreferenceUpdate { owner, preferences } => {
                enc.u8(2);
                enc.str("owner", owner)?;
                enc.f64("u_min", preferences.u_min)?;
                enc.f64("u_max", preferences.u_max)?;
                enc.option(preferences.eta.as_ref(), |e, v| e.f64("eta", *v))?;
                enc.option(preferences.zeta.as_ref(), |e, v| e.f64("zeta", *v))?;
            }
            TxBody::SetpointContract {
                contract_id,
                party,
                period,
                quantity,
                price,
            } => {
                enc.u8(3);
                enc.str("contract_id", contract_id)?;
                enc.str("party", party)?;
                enc.u32(*period);
                enc.f64("quantity", *quantity)?;
                enc.f64("price", *price)?;
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
                enc.u8(4);
                enc.str("offer_id", offer_id)?;
                enc.str("crowdsourcee", crowdsourcee)?;
                enc.u32(*period);
                enc.f64("quantity", *quantity)?;
                enc.f64("price", *price)?;
                enc.f64("premium", *premium)?;
                enc.u64(*expiry);
            }
            TxBody::OfferResponse { offer_id, accept } => {
                enc.u8(5);
                enc.str("offer_id", offer_id)?;
                enc.bool(*accept);
            }
            TxBody::MeterReading {
                party,
                period,
                obligation,
                delivered,
            } => {
                enc.u8(6);
                enc.str("party", party)?;
                enc.u32(*period);
                encode_obligation(enc, obligation)?;
                enc.f64("delivered", *delivered)?;
            }
            TxBody::Settlement { party, amount, items } => {
                enc.u8(7);
                enc.str("party", party)?;
                enc.i64(*amount);
                enc.seq("items", items, encode_obligation)?;
            }
            TxBody::ShortfallNotice { period, shortfall, reason } => {
                enc.u8(8);
                enc.u32(*period);
                enc.f64("shortfall", *shortfall)?;
                enc.str("reason", reason)?;
            }
        }
        Ok(())
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let at = dec.position();
        Ok(match dec.u8()? {
            0 => {
                let party = dec.str()?;
                let at = dec.position();
                let role = Role::from_tag(dec.u8()?, at)?;
                TxBody::Enroll {
                    party,
                    role,
                    public_key: dec.array()?,
                }
            }
            1 => TxBody::BudgetDeposit { amount: dec.i64()? },
            2 => TxBody::PreferenceUpdate {
                owner: dec.str()?,
                preferences: Preferences {
                    u_min: dec.f64()?,
                    u_max: dec.f64()?,
                    eta: dec.option(|d| d.f64())?,
                    zeta: dec.option(|d| d.f64())?,
                },
            },
            3 => TxBody::SetpointContract {
                contract_id: dec.str()?,
                party: dec.str()?,
                period: dec.u32()?,
                quantity: dec.f64()?,
                price: dec.f64()?,
            },
            4 => TxBody::IncentiveOffer {
                offer_id: dec.str()?,
                crowdsourcee: dec.str()?,
                period: dec.u32()?,
                quantity: dec.f64()?,
                price: dec.f64()?,
                premium: dec.f64()?,
                expiry: dec.u64()?,
            },
            5 => TxBody::OfferResponse {
                offer_id: dec.str()?,
                accept: dec.bool()?,
            },
            6 => TxBody::MeterReading {
                party: dec.str()?,
                period: dec.u32()?,
                obligation: decode_obligation(dec)?,
                delivered: dec.f64()?,
            },
            7 => TxBody::Settlement {
                party: dec.str()?,
                amount: dec.i64()?,
                items: dec.seq(decode_obligation)?,
            },
            8 => TxBody::ShortfallNotice {
                period: dec.u32()?,
                shortfall: dec.f64()?,
                reason: dec.str()?,
            },
            _ => return Err(CodecError::Invalid { what: "transaction tag", at }),
        })
    }
}

/// A signed transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub tx_id: String,
    pub submitter: String,
    /// Logical milliseconds.
    pub timestamp: u64,
    pub body: TxBody,
    #[serde(with = "hex_array")]
    pub signature: [u8; SIGNATURE_LEN],
}

impl Transaction {
    /// Builds and signs a transaction.
    pub fn signed(
        tx_id: impl Into<String>,
        submitter: impl Into<String>,
        timestamp: u64,
        body: TxBody,
        key: &KeyPair,
    ) -> Result<Self, CodecError> {
        let mut tx = Transaction {
            tx_id: tx_id.into(),
            submitter: submitter.into(),
            timestamp,
            body,
            signature: [0; SIGNATURE_LEN],
        };
        tx.signature = key.sign(&tx.signing_bytes()?);
        Ok(tx)
    }

    /// The bytes covered by the signature: the canonical encoding without
    /// the signature itself.
    pub fn signing_bytes(&self) -> Result<Vec<u8>, CodecError> {
        let mut enc = Encoder::default();
        self.encode_unsigned(&mut enc)?;
        Ok(enc.finish())
    }

    fn encode_unsigned(&self, enc: &mut Encoder) -> Result<(), CodecError> {
        enc.str("tx_id", &self.tx_id)?;
        enc.str("submitter", &self.submitter)?;
        enc.u64(self.timestamp);
        self.body.encode_into(enc)
    }

    pub fn digest(&self) -> Result<Hash32, CodecError> {
        Ok(Hash32::digest(&self.to_canonical_bytes()?))
    }

    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }
}

impl Canonical for Transaction {
    fn encode_into(&self, enc: &mut Encoder) -> Result<(), CodecError> {
        self.encode_unsigned(enc)?;
        enc.fixed(&self.signature);
        Ok(())
    }

    fn decode_from(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Transaction {
            tx_id: dec.str()?,
            submitter: dec.str()?,
            timestamp: dec.u64()?,
            body: TxBody::decode_from(dec)?,
            signature: dec.array()?,
        })
    }
}

/// Serializes fixed-size byte arrays as lowercase hex strings.
pub(crate) mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes")))
    }
}
