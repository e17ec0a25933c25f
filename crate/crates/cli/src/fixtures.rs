//! Bundled demo inputs: a feeder file plus a scenario file.

use std::collections::BTreeMap;

use ces_core::agents::{AgentPolicy, AgentSpec};
use ces_core::grid::synthetic::{load_profiles, radial_feeder, reactive_profiles, six_bus_feeder, six_bus_scenario_file};
use ces_core::grid::{BusKind, DerivationRules, FeederNetwork, ScenarioFile};

use crate::options::{DEFAULT_KAPPA, DEFAULT_RHO};

/// Feeder and scenario for `buses` buses. Six buses gives the canonical
/// fixture; any other size a seeded radial feeder with the device fleet
/// derived from its loads. Realized load exceeds the forecast by `surge`
/// (a fraction), and Type-2 crowdsourcees answer with the default logistic
/// behaviour.
pub fn fixture(buses: usize, seed: u64, surge: f64) -> (FeederNetwork, ScenarioFile) {
    let (net, mut file) = if buses == 6 {
        (six_bus_feeder(), six_bus_scenario_file())
    } else {
        let net = radial_feeder(buses, seed);
        let profiles = load_profiles(&net, 24, (0.03, 0.08), seed.wrapping_add(1));
        let file = ScenarioFile {
            horizon: 24,
            dt: 1.0,
            reactive_profiles: reactive_profiles(&profiles, 0.95),
            profiles,
            realized: None,
            derive: Some(DerivationRules::default()),
            agents: BTreeMap::new(),
        };
        (net, file)
    };
    file.realized = Some(
        file.profiles
            .iter()
            .map(|(bus, p)| (*bus, p.iter().map(|v| v * (1.0 + surge)).collect()))
            .collect(),
    );
    file.agents = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Crowdsourcee)
        .map(|b| {
            let spec = AgentSpec::new(AgentPolicy::Logistic {
                rho: DEFAULT_RHO,
                kappa: DEFAULT_KAPPA,
            });
            (b.id, spec)
        })
        .collect();
    (net, file)
}
