//! Deterministic synthetic feeders and load profiles.
//!
//! The 6-bus feeder is the canonical test fixture. `radial_feeder` builds
//! larger trees (the 56-bus case uses it) with line data typical of a
//! 12 kV overhead feeder on a 1 MVA base.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    derive_paper_scenario, Bus, BusId, BusKind, DerivationRules, Device, DeviceKind, FeederNetwork, GridError, Line,
    OwnerClass, Scenario, ScenarioFile, DEFAULT_V_MAX, DEFAULT_V_MIN,
};

/// Substation supply: no back-feed into transmission, price multiplier
/// peaking at midday.
pub fn substation_generator(bus: BusId, horizon: usize) -> Device {
    Device {
        id: format!("b{bus}-generator"),
        bus,
        owner_class: OwnerClass::Utility,
        kind: DeviceKind::Generator {
            a: 2.0,
            b: 30.0,
            c: 0.0,
            p_min: 0.0,
            p_max: 20.0,
            q_min: -20.0,
            q_max: 20.0,
            price_profile: Some(midday_price_profile(horizon)),
        },
    }
}

/// 1.0 at night rising to 1.5 at noon.
pub fn midday_price_profile(horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|t| {
            let hour = (t as f64 + 0.5) % 24.0;
            1.0 + 0.5 * (PI * hour / 24.0).sin().powi(2)
        })
        .collect()
}

/// Normalized residential load shape (peak 1.0 at 19:00).
pub fn residential_shape(horizon: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..horizon)
        .map(|t| {
            let h = (t as f64 + 0.5) % 24.0;
            let morning = 0.25 * (-((h - 7.5) / 1.5).powi(2)).exp();
            let evening = 0.5 * (-((h - 19.5) / 2.5).powi(2)).exp();
            0.5 + morning + evening
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

fn bus(id: BusId, kind: BusKind) -> Bus {
    Bus {
        id,
        kind,
        v_min: DEFAULT_V_MIN,
        v_max: DEFAULT_V_MAX,
        devices: vec![],
    }
}

/// Root 0 feeding 1; 1 feeds the laterals 2-3 and 4-5.
pub fn six_bus_feeder() -> FeederNetwork {
    let kinds = [
        BusKind::SubstationRoot,
        BusKind::Load,
        BusKind::Crowdsourcee,
        BusKind::Crowdsourcee,
        BusKind::Load,
        BusKind::Crowdsourcee,
    ];
    let line = |from, to, r, x| Line { from, to, r, x, s_max: 5.0 };
    let mut net = FeederNetwork {
        buses: kinds.iter().enumerate().map(|(i, k)| bus(i, *k)).collect(),
        lines: vec![
            line(0, 1, 0.003, 0.006),
            line(1, 2, 0.004, 0.005),
            line(2, 3, 0.005, 0.005),
            line(1, 4, 0.004, 0.006),
            line(4, 5, 0.006, 0.006),
        ],
        devices: vec![substation_generator(0, 24)],
        base_mva: 1.0,
        base_kv: 12.47,
    };
    net.normalize();
    net
}

/// Per-bus peaks times the residential shape with a little deterministic jitter.
pub fn load_profiles(
    net: &FeederNetwork,
    horizon: usize,
    peak_range: (f64, f64),
    seed: u64,
) -> BTreeMap<BusId, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = residential_shape(horizon);
    let mut out = BTreeMap::new();
    for b in &net.buses {
        if b.kind == BusKind::SubstationRoot {
            continue;
        }
        let peak = rng.random_range(peak_range.0..=peak_range.1);
        let mut profile: Vec<f64> = shape
            .iter()
            .map(|s| peak * s * (1.0 + rng.random_range(-0.03..0.03)))
            .collect();
        // Keep the stated peak exact.
        let max = profile.iter().cloned().fold(0.0, f64::max);
        profile.iter_mut().for_each(|p| *p *= peak / max);
        out.insert(b.id, profile);
    }
    out
}

/// Reactive profiles at a fixed lagging power factor.
pub fn reactive_profiles(profiles: &BTreeMap<BusId, Vec<f64>>, power_factor: f64) -> BTreeMap<BusId, Vec<f64>> {
    let ratio = (1.0 - power_factor * power_factor).sqrt() / power_factor;
    profiles
        .iter()
        .map(|(b, p)| (*b, p.iter().map(|v| v * ratio).collect()))
        .collect()
}

/// A random radial tree: a trunk of roughly a quarter of the buses with
/// laterals hanging off it. Roughly half of the non-root buses host Type-2
/// crowdsourcees.
pub fn radial_feeder(n_buses: usize, seed: u64) -> FeederNetwork {
    assert!(n_buses >= 2, "a feeder needs at least two buses");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buses = vec![bus(0, BusKind::SubstationRoot)];
    let mut lines = Vec::new();
    let trunk = (n_buses / 4).max(1);
    for id in 1..n_buses {
        let kind = if rng.random_bool(0.5) {
            BusKind::Crowdsourcee
        } else {
            BusKind::Load
        };
        buses.push(bus(id, kind));
        let parent = if id <= trunk {
            id - 1
        } else {
            // Attach to a trunk bus or to a recent lateral bus.
            if rng.random_bool(0.4) {
                rng.random_range(1..=trunk)
            } else {
                rng.random_range((id.saturating_sub(4)).max(1)..id)
            }
        };
        let r = rng.random_range(0.0005..0.0015);
        let x = r * rng.random_range(1.0..1.6);
        let s_max = if id <= trunk { 20.0 } else { 8.0 };
        lines.push(Line {
            from: parent,
            to: id,
            r,
            x,
            s_max,
        });
    }
    let mut net = FeederNetwork {
        buses,
        lines,
        devices: vec![substation_generator(0, 24)],
        base_mva: 1.0,
        base_kv: 12.0,
    };
    net.normalize();
    net
}

/// Scenario file for the 6-bus fixture: derived device fleet, 24 hourly periods.
pub fn six_bus_scenario_file() -> ScenarioFile {
    let net = six_bus_feeder();
    let profiles = load_profiles(&net, 24, (0.05, 0.1), 6);
    ScenarioFile {
        horizon: 24,
        dt: 1.0,
        reactive_profiles: reactive_profiles(&profiles, 0.95),
        profiles,
        realized: None,
        derive: Some(DerivationRules::default()),
        agents: BTreeMap::new(),
    }
}

pub fn six_bus_scenario() -> Scenario {
    Scenario::assemble(six_bus_feeder(), six_bus_scenario_file()).expect("fixture is valid")
}

/// The 56-bus, 24-period case with the device sizing rules applied at every bus.
pub fn paper_scenario(n_buses: usize, seed: u64) -> Result<Scenario, GridError> {
    let net = radial_feeder(n_buses, seed);
    let profiles = load_profiles(&net, 24, (0.03, 0.08), seed.wrapping_add(1));
    let reactive = reactive_profiles(&profiles, 0.95);
    derive_paper_scenario(&net, &profiles, &reactive, &DerivationRules::default())
}
