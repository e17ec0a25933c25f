//! Simulated crowdsourcee responses to incentive offers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentPolicy {
    AlwaysAccept,
    AlwaysReject,
    /// Accept iff the offered price reaches the reservation price `rho` ($/MWh).
    Threshold { rho: f64 },
    /// Accept with probability `1 / (1 + exp(-kappa (price - rho)))`.
    Logistic { rho: f64, kappa: f64 },
}

/// Agent configuration as it appears in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    #[serde(flatten)]
    pub policy: AgentPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fraction of an accepted quantity actually delivered.
    #[serde(default = "full_delivery")]
    pub delivery_ratio: f64,
}

fn full_delivery() -> f64 {
    1.0
}

impl AgentSpec {
    pub fn new(policy: AgentPolicy) -> Self {
        Self {
            policy,
            seed: None,
            delivery_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Accept,
    Reject,
}

impl Response {
    pub fn accepted(self) -> bool {
        self == Response::Accept
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfferTerms {
    /// Total price, DLMP plus premium, $/MWh.
    pub price: f64,
    /// MWh.
    pub quantity: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("logistic slope must be positive, got {0}")]
    Slope(f64),
    #[error("offer price is not finite")]
    Price,
}

/// One crowdsourcee with its own random stream.
#[derive(Debug, Clone)]
pub struct Agent {
    policy: AgentPolicy,
    rng: ChaCha8Rng,
    pub delivery_ratio: f64,
}

impl Agent {
    pub fn new(policy: AgentPolicy, seed: u64) -> Result<Self, AgentError> {
        if let AgentPolicy::Logistic { kappa, .. } = policy {
            if !(kappa > 0.0) {
                return Err(AgentError::Slope(kappa));
            }
        }
        Ok(Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            delivery_ratio: 1.0,
        })
    }

    /// `default_seed` is used when the spec carries no seed of its own.
    pub fn from_spec(spec: &AgentSpec, default_seed: u64) -> Result<Self, AgentError> {
        let mut agent = Agent::new(spec.policy.clone(), spec.seed.unwrap_or(default_seed))?;
        agent.delivery_ratio = spec.delivery_ratio;
        Ok(agent)
    }

    pub fn policy(&self) -> &AgentPolicy {
        &self.policy
    }

    pub fn acceptance_probability(&self, price: f64) -> f64 {
        match self.policy {
            AgentPolicy::AlwaysAccept => 1.0,
            AgentPolicy::AlwaysReject => 0.0,
            AgentPolicy::Threshold { rho } => {
                if price >= rho {
                    1.0
                } else {
                    0.0
                }
            }
            AgentPolicy::Logistic { rho, kappa } => 1.0 / (1.0 + (-kappa * (price - rho)).exp()),
        }
    }

    pub fn respond(&mut self, offer: &OfferTerms) -> Result<Response, AgentError> {
        if !offer.price.is_finite() {
            return Err(AgentError::Price);
        }
        let accept = match self.policy {
            AgentPolicy::Logistic { .. } => {
                let p = self.acceptance_probability(offer.price);
                self.rng.random::<f64>() < p
            }
            _ => self.acceptance_probability(offer.price) >= 1.0,
        };
        Ok(if accept { Response::Accept } else { Response::Reject })
    }
}
