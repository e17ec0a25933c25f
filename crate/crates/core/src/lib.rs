//! Market equilibrium, price extraction and realtime incentive design for a
//! crowdsourced energy system on a radial distribution feeder.
//!
//! * [`grid`] holds the feeder and device data model plus scenario ingestion.
//! * [`opf`] builds and solves the multi-period branch-flow OPF as a
//!   second-order cone program and extracts locational marginal prices.
//! * [`incentives`] designs per-crowdsourcee price premiums with a
//!   linearised program and manages escalation of rejected offers.
//! * [`agents`] provides simulated accept/reject behaviour.

pub mod agents;
pub mod grid;
pub mod incentives;
pub mod opf;

pub use grid::{FeederNetwork, Scenario};
pub use opf::{OpfSolution, PriceVector};
