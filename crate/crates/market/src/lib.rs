//! Blockchain-assisted operation of a crowdsourced energy system.
//!
//! [`MarketSession`] runs one planning horizon end to end: day-ahead market
//! clearing and setpoint contracts, per-period incentive rounds for Type-2
//! crowdsourcees with escalation and generator fallback, and settlement of
//! metered deliveries — every step ordered onto the ledger.

pub mod config;
pub mod events;
pub mod fallback;
pub mod report;
pub mod session;

pub use config::{Cadence, SessionConfig};
pub use events::{EventKind, SessionEvent};
pub use fallback::{fallback_dispatch, FallbackOutcome};
pub use report::SessionReport;
pub use session::{bus_party, MarketSession, PeriodOutcome, SessionError, TxAck};
