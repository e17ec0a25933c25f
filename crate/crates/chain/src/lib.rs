//! Tamper-evident ledger for crowdsourced energy markets.
//!
//! Transactions ([`tx`]) are signed with Ed25519 and encoded canonically
//! ([`codec`]); blocks chain SHA-256 header hashes over Merkle transaction
//! roots ([`block`]); the world state ([`state`]) is advanced only by the
//! settlement contracts; and a simulated PBFT ordering service
//! ([`consensus`], [`ordering`]) produces the block stream.

pub mod block;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod cutter;
pub mod ledger;
pub mod ordering;
pub mod state;
pub mod tx;

pub use block::Block;
pub use crypto::{EnrollmentAuthority, Hash32, KeyPair};
pub use ledger::Ledger;
pub use state::{ChainEvent, Receipt, Rejection, WorldState, OPERATOR};
pub use tx::{Obligation, Transaction, TxBody};
