//! Parsing of the compact flag values: agent behaviour and orderer faults.

use std::str::FromStr;

use anyhow::{bail, Context};
use ces_chain::consensus::FaultSpec;
use ces_core::agents::AgentPolicy;

/// Behaviour imposed on every Type-2 crowdsourcee, or the scenario's own.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentsFlag {
    Scenario,
    All(AgentPolicy),
}

/// Reservation price used when `threshold` or `logistic` is given bare, $/MWh.
pub const DEFAULT_RHO: f64 = 70.0;
/// Logistic steepness used when none is given, per $/MWh.
pub const DEFAULT_KAPPA: f64 = 0.2;

fn number(s: &str, what: &str) -> anyhow::Result<f64> {
    s.parse::<f64>().with_context(|| format!("{what} must be a number, got {s:?}"))
}

impl FromStr for AgentsFlag {
    type Err = anyhow::Error;

    /// `scenario`, `accept`, `reject`, `threshold[:RHO]` or
    /// `logistic[:RHO[:KAPPA]]`.
    fn from_str(s: &str) -> anyhow::Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let policy = match (kind, args.as_slice()) {
            ("scenario", []) => return Ok(AgentsFlag::Scenario),
            ("accept", []) => AgentPolicy::AlwaysAccept,
            ("reject", []) => AgentPolicy::AlwaysReject,
            ("threshold", []) => AgentPolicy::Threshold { rho: DEFAULT_RHO },
            ("threshold", [rho]) => AgentPolicy::Threshold { rho: number(rho, "rho")? },
            ("logistic", []) => AgentPolicy::Logistic {
                rho: DEFAULT_RHO,
                kappa: DEFAULT_KAPPA,
            },
            ("logistic", [rho]) => AgentPolicy::Logistic {
                rho: number(rho, "rho")?,
                kappa: DEFAULT_KAPPA,
            },
            ("logistic", [rho, kappa]) => AgentPolicy::Logistic {
                rho: number(rho, "rho")?,
                kappa: number(kappa, "kappa")?,
            },
            _ => bail!("unknown agent behaviour {s:?}; use scenario, accept, reject, threshold[:RHO] or logistic[:RHO[:KAPPA]]"),
        };
        Ok(AgentsFlag::All(policy))
    }
}

/// Orderer faults: `none`, or a comma-separated list of `crash:NODE` and
/// `equivocate:NODE`.
pub fn parse_faults(s: &str) -> anyhow::Result<FaultSpec> {
    let mut spec = FaultSpec::default();
    if s.trim().is_empty() || s == "none" {
        return Ok(spec);
    }
    for item in s.split(',') {
        let (kind, node) = item
            .split_once(':')
            .with_context(|| format!("fault {item:?} must look like crash:NODE or equivocate:NODE"))?;
        let node: usize = node.trim().parse().with_context(|| format!("bad node in fault {item:?}"))?;
        match kind.trim() {
            "crash" => spec.crash.push(node),
            "equivocate" => spec.equivocate.push(node),
            other => bail!("unknown fault kind {other:?}"),
        }
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_flags() {
        assert_eq!("scenario".parse::<AgentsFlag>().unwrap(), AgentsFlag::Scenario);
        assert_eq!(
            "threshold:55".parse::<AgentsFlag>().unwrap(),
            AgentsFlag::All(AgentPolicy::Threshold { rho: 55.0 })
        );
        assert_eq!(
            "logistic:60:0.5".parse::<AgentsFlag>().unwrap(),
            AgentsFlag::All(AgentPolicy::Logistic { rho: 60.0, kappa: 0.5 })
        );
        assert!("threshold:x".parse::<AgentsFlag>().is_err());
        assert!("sometimes".parse::<AgentsFlag>().is_err());
    }

    #[test]
    fn fault_lists() {
        assert_eq!(parse_faults("none").unwrap(), FaultSpec::default());
        let spec = parse_faults("crash:1,equivocate:0").unwrap();
        assert_eq!(spec.crash, vec![1]);
        assert_eq!(spec.equivocate, vec![0]);
        assert!(parse_faults("crash").is_err());
        assert!(parse_faults("melt:1").is_err());
    }
}
