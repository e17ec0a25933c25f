#![allow(dead_code)]

use std::collections::BTreeMap;

use ces_core::agents::{AgentPolicy, AgentSpec};
use ces_core::grid::synthetic::{six_bus_scenario, substation_generator};
use ces_core::grid::{Bus, BusKind, Device, DeviceKind, FeederNetwork, Line, OwnerClass, DEFAULT_V_MAX, DEFAULT_V_MIN};
use ces_core::Scenario;
use ces_market::SessionConfig;

/// The 6-bus fixture with realized load 15 % above forecast at every bus
/// and the given behaviour for every crowdsourcee.
pub fn six_bus(policy: AgentPolicy) -> Scenario {
    let mut s = six_bus_scenario();
    let mut realized = BTreeMap::new();
    for d in &s.network.devices {
        if let DeviceKind::Uncontrollable { profile, .. } = &d.kind {
            realized.insert(d.bus, profile.iter().map(|p| p * 1.15).collect());
        }
    }
    s.realized = Some(realized);
    for bus in s.type2_crowdsourcees() {
        s.agents.insert(bus, AgentSpec::new(policy.clone()));
    }
    s
}

/// Root plus three crowdsourcee buses, each with a 5 MW battery and no
/// other flexibility, so each can sell at most 5 MW.
pub fn three_sellers(policy: AgentPolicy, horizon: usize) -> Scenario {
    let bus = |id, kind| Bus {
        id,
        kind,
        v_min: DEFAULT_V_MIN,
        v_max: DEFAULT_V_MAX,
        devices: vec![],
    };
    let mut devices = vec![substation_generator(0, horizon)];
    for b in 1..=3 {
        devices.push(Device {
            id: format!("b{b}-battery"),
            bus: b,
            owner_class: OwnerClass::Type2,
            kind: DeviceKind::Battery {
                p_cap: 5.0,
                e_cap: 20.0,
                e0: 10.0,
                quad_cost: 0.0,
            },
        });
        devices.push(Device {
            id: format!("b{b}-uncontrollable"),
            bus: b,
            owner_class: OwnerClass::Utility,
            kind: DeviceKind::Uncontrollable {
                profile: vec![0.5; horizon],
                q_profile: None,
            },
        });
    }
    let mut network = FeederNetwork {
        buses: vec![
            bus(0, BusKind::SubstationRoot),
            bus(1, BusKind::Crowdsourcee),
            bus(2, BusKind::Crowdsourcee),
            bus(3, BusKind::Crowdsourcee),
        ],
        lines: (1..=3)
            .map(|to| Line {
                from: 0,
                to,
                r: 0.001,
                x: 0.002,
                s_max: 20.0,
            })
            .collect(),
        devices,
        base_mva: 1.0,
        base_kv: 12.47,
    };
    network.normalize();
    let mut s = Scenario {
        horizon,
        dt: 1.0,
        network,
        agents: BTreeMap::new(),
        realized: None,
    };
    for b in 1..=3 {
        s.agents.insert(b, AgentSpec::new(policy.clone()));
    }
    s.validate().unwrap();
    s
}

pub fn config() -> SessionConfig {
    SessionConfig::default()
}

pub fn logistic() -> AgentPolicy {
    AgentPolicy::Logistic { rho: 70.0, kappa: 0.2 }
}
