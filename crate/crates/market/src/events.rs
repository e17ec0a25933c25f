//! The session's notification log: committed blocks, contract events and
//! round status, in the order they happened.

use ces_chain::state::{ChainEvent, Rejection};
use ces_chain::Hash32;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventKind {
    Block {
        height: u64,
        block_hash: Hash32,
        txs: usize,
    },
    /// A transaction took effect.
    Ledger {
        height: u64,
        tx_id: String,
        #[serde(flatten)]
        event: ChainEvent,
    },
    /// A transaction was ordered but refused by the contracts.
    Rejected {
        height: u64,
        tx_id: String,
        submitter: String,
        reason: Rejection,
    },
    Round {
        period: usize,
        round: usize,
        status: RoundStatus,
        /// Shortfall the period must cover, MW.
        d_t: f64,
        offers: usize,
        accepted_mw: f64,
    },
    PeriodClosed {
        period: usize,
        d_t: f64,
        accepted_mw: f64,
        fallback_mw: f64,
        shortfall_mw: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    /// Position in the log, starting at 1.
    pub id: u64,
    /// Participant the event concerns; `None` means everyone may see it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub party: Option<String>,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl SessionEvent {
    /// Whether `viewer` may see this event. The operator sees everything;
    /// budget deposits and shortfalls are operator business.
    pub fn visible_to(&self, viewer: &str, is_operator: bool) -> bool {
        if is_operator {
            return true;
        }
        match (&self.party, &self.kind) {
            (Some(p), _) => p == viewer,
            (None, EventKind::Ledger { .. }) => false,
            (None, _) => true,
        }
    }
}

/// Append-only event log with 1-based ids.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    events: Vec<SessionEvent>,
}

impl EventLog {
    pub fn push(&mut self, party: Option<String>, kind: EventKind) -> u64 {
        let id = self.events.len() as u64 + 1;
        self.events.push(SessionEvent { id, party, kind });
        id
    }

    pub fn all(&self) -> &[SessionEvent] {
        &self.events
    }

    /// Events with id greater than `after`.
    pub fn since(&self, after: u64) -> &[SessionEvent] {
        let start = (after as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn last_id(&self) -> u64 {
        self.events.len() as u64
    }
}
