use ces_chain::ordering::OrderingConfig;
use ces_core::agents::{AgentPolicy, AgentSpec};
use ces_core::incentives::{EscalationPolicy, ProfileUpdate};
use ces_core::opf::OpfSettings;
use serde::{Deserialize, Serialize};

/// How often delivered energy is paid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "every", rename_all = "kebab-case")]
pub enum Cadence {
    /// Once, after the last period closes.
    #[default]
    Horizon,
    /// After every `n` closed periods (and at the end).
    Periods { n: usize },
}

impl Cadence {
    /// Whether a reconciliation is due once `closed` periods of `horizon` are done.
    pub fn due(&self, closed: usize, horizon: usize) -> bool {
        match *self {
            Cadence::Horizon => closed == horizon,
            Cadence::Periods { n } => closed == horizon || (n > 0 && closed % n == 0),
        }
    }
}

/// Everything that shapes a session besides the scenario itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Root of every random stream: agents, keys and ordering.
    pub seed: u64,
    /// Incentive budget `[b_min, b_max]` per period, $/h.
    pub budget: [f64; 2],
    pub escalation: EscalationPolicy,
    pub profile_update: ProfileUpdate,
    /// Payment weight for crowdsourcees that state no preference.
    pub default_eta: f64,
    /// Deviation weight for crowdsourcees that state no preference, $/MWh.
    pub default_zeta: f64,
    /// Behaviour of Type-2 crowdsourcees the scenario gives no agent.
    pub default_agent: AgentSpec,
    /// Response window of every offer round, logical milliseconds.
    pub offer_window_ms: u64,
    pub ordering: OrderingConfig,
    pub cadence: Cadence,
    /// Replaces the realized-minus-forecast shortfall, MW per period.
    pub demand_override: Option<Vec<f64>>,
    /// Accuracy the incentive program must reach, in $ and MW.
    pub incentive_tol: f64,
    /// Quantities below this many MW count as zero.
    pub quantity_eps: f64,
    #[serde(skip)]
    pub opf: OpfSettings,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let mut ordering = OrderingConfig::default();
        ordering.pbft.trace = false;
        Self {
            seed: 42,
            budget: [0.5, 5.0],
            escalation: EscalationPolicy::default(),
            profile_update: ProfileUpdate::default(),
            default_eta: 1.0,
            default_zeta: 1.0,
            default_agent: AgentSpec::new(AgentPolicy::AlwaysAccept),
            offer_window_ms: 60_000,
            ordering,
            cadence: Cadence::Horizon,
            demand_override: None,
            incentive_tol: 1e-6,
            quantity_eps: 1e-6,
            opf: OpfSettings::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence_always_settles_at_the_end() {
        assert!(!Cadence::Horizon.due(23, 24));
        assert!(Cadence::Horizon.due(24, 24));
        let weekly = Cadence::Periods { n: 6 };
        assert!(weekly.due(6, 24));
        assert!(!weekly.due(7, 24));
        assert!(Cadence::Periods { n: 5 }.due(24, 24));
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = SessionConfig::default();
        let back: SessionConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
