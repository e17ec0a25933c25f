//! Supplementing rejected crowdsourced supply from the traditional generators.

use std::collections::BTreeMap;

use ces_core::grid::{BusKind, Device, DeviceKind, OwnerClass};
use ces_core::opf::{solve_scenario_with, OpfSettings, OpfSolution};
use ces_core::Scenario;
use serde::{Deserialize, Serialize};

/// Generator re-dispatch for one period.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FallbackOutcome {
    pub period: usize,
    /// Uncovered shortfall handed to the generators, MW.
    pub residual_mw: f64,
    /// Change of each generator's output against the day-ahead schedule, MW.
    pub adjustments: BTreeMap<String, f64>,
    /// Nodal price each generator's extra output is paid at, $/MWh.
    pub prices: BTreeMap<String, f64>,
    /// Extra network losses caused by the re-dispatch, MW.
    pub incremental_losses_mw: f64,
    /// Demand left unserved, MW; non-zero only when re-dispatch failed.
    pub shortfall_mw: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl FallbackOutcome {
    pub fn dispatched_mw(&self) -> f64 {
        self.adjustments.values().sum()
    }

    fn shortfall(period: usize, residual_mw: f64, reason: String) -> Self {
        Self {
            period,
            residual_mw,
            shortfall_mw: residual_mw,
            reason: Some(reason),
            ..Self::default()
        }
    }
}

/// Output of every generator at `t` in the day-ahead schedule, MW.
fn generator_outputs(sol: &OpfSolution, t: usize) -> BTreeMap<String, f64> {
    sol.schedule
        .generators
        .iter()
        .map(|(id, g)| (id.clone(), g.p[t] * sol.base_mva))
        .collect()
}

/// Remaining upward range of the generators at `t`, MW.
pub fn generator_headroom(scenario: &Scenario, day_ahead: &OpfSolution, t: usize) -> f64 {
    let outputs = generator_outputs(day_ahead, t);
    scenario
        .network
        .devices
        .iter()
        .filter_map(|d| match d.kind {
            DeviceKind::Generator { p_max, .. } => {
                Some((p_max * day_ahead.base_mva - outputs.get(&d.id).copied().unwrap_or(0.0)).max(0.0))
            }
            _ => None,
        })
        .sum()
}

/// One-period copy of the network in which every device except the
/// generators is frozen at its day-ahead operating point (folded into a
/// per-bus fixed load) and `extra_mw` of demand sits at the feeder head.
pub fn single_period_scenario(scenario: &Scenario, day_ahead: &OpfSolution, t: usize, extra_mw: f64) -> Scenario {
    let base = day_ahead.base_mva;
    let sched = &day_ahead.schedule;
    let mut p: BTreeMap<usize, f64> = BTreeMap::new();
    let mut q: BTreeMap<usize, f64> = BTreeMap::new();
    let mut devices: Vec<Device> = Vec::new();
    for d in &scenario.network.devices {
        let bus = d.bus;
        match &d.kind {
            DeviceKind::Generator {
                a,
                b,
                c,
                p_min,
                p_max,
                q_min,
                q_max,
                price_profile,
            } => devices.push(Device {
                kind: DeviceKind::Generator {
                    a: *a,
                    b: *b,
                    c: *c,
                    p_min: *p_min,
                    p_max: *p_max,
                    q_min: *q_min,
                    q_max: *q_max,
                    price_profile: price_profile.as_ref().map(|m| vec![m[t]]),
                },
                ..d.clone()
            }),
            DeviceKind::Solar { .. } => {
                if let Some(s) = sched.solar.get(&d.id) {
                    *p.entry(bus).or_default() -= s.p[t];
                }
            }
            DeviceKind::Battery { .. } => {
                if let Some(s) = sched.batteries.get(&d.id) {
                    *p.entry(bus).or_default() += s.p[t];
                }
            }
            DeviceKind::Shapable { .. } => {
                if let Some(s) = sched.shapable.get(&d.id) {
                    *p.entry(bus).or_default() += s.p[t];
                }
            }
            DeviceKind::Uncontrollable { .. } => {
                if let Some(s) = sched.uncontrollable.get(&d.id) {
                    *p.entry(bus).or_default() += s.p[t];
                    *q.entry(bus).or_default() += s.q[t];
                }
            }
        }
    }
    let root = scenario
        .network
        .buses
        .iter()
        .find(|b| b.kind == BusKind::SubstationRoot)
        .map(|b| b.id)
        .unwrap_or(0);
    *p.entry(root).or_default() += extra_mw / base;
    for (bus, load) in &p {
        devices.push(Device {
            id: format!("b{bus}-frozen"),
            bus: *bus,
            owner_class: OwnerClass::Utility,
            kind: DeviceKind::Uncontrollable {
                profile: vec![*load],
                q_profile: Some(vec![q.get(bus).copied().unwrap_or(0.0)]),
            },
        });
    }
    let mut network = scenario.network.clone();
    network.devices = devices;
    network.normalize();
    Scenario {
        horizon: 1,
        dt: scenario.dt,
        network,
        agents: BTreeMap::new(),
        realized: None,
    }
}

/// Network losses in MW for one period of a solution.
fn losses_mw(sol: &OpfSolution, t: usize) -> f64 {
    sol.flows.periods[t].lines.iter().map(|l| l.r * l.l).sum::<f64>() * sol.base_mva
}

/// Covers `residual_mw` of uncovered shortfall at period `t` by re-solving
/// that period with everything but the generators frozen. A residual the
/// generators cannot carry comes back as a shortfall instead.
pub fn fallback_dispatch(
    scenario: &Scenario,
    day_ahead: &OpfSolution,
    t: usize,
    residual_mw: f64,
    settings: &OpfSettings,
) -> FallbackOutcome {
    if !(residual_mw > 0.0) {
        return FallbackOutcome {
            period: t,
            ..FallbackOutcome::default()
        };
    }
    let headroom = generator_headroom(scenario, day_ahead, t);
    if residual_mw > headroom {
        return FallbackOutcome::shortfall(
            t,
            residual_mw,
            format!("residual {residual_mw:.6} MW exceeds generator headroom {headroom:.6} MW"),
        );
    }
    let single = single_period_scenario(scenario, day_ahead, t, residual_mw);
    let sol = match solve_scenario_with(&single, settings) {
        Ok(sol) => sol,
        Err(e) => return FallbackOutcome::shortfall(t, residual_mw, format!("re-dispatch failed: {e}")),
    };
    let Some(prices) = sol.dlmp.as_ref() else {
        return FallbackOutcome::shortfall(t, residual_mw, format!("re-dispatch ended {:?}", sol.status));
    };
    let before = generator_outputs(day_ahead, t);
    let after = generator_outputs(&sol, 0);
    let adjustments = after
        .iter()
        .map(|(id, p)| (id.clone(), p - before.get(id).copied().unwrap_or(0.0)))
        .collect();
    let gen_prices = sol
        .schedule
        .generators
        .iter()
        .map(|(id, g)| (id.clone(), prices.at(0, g.bus).unwrap_or(0.0)))
        .collect();
    FallbackOutcome {
        period: t,
        residual_mw,
        adjustments,
        prices: gen_prices,
        incremental_losses_mw: losses_mw(&sol, 0) - losses_mw(day_ahead, t),
        shortfall_mw: 0.0,
        reason: None,
    }
}
