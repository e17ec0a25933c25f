use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{BusId, BusKind, Device, DeviceKind, FeederNetwork, GridError, OwnerClass, Scenario};

/// Sizing rules for the per-bus device fleet, all relative to the bus's
/// peak uncontrollable load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerivationRules {
    /// Battery power capacity as a fraction of peak load.
    pub battery_power_ratio: f64,
    /// Battery energy capacity in hours at full power.
    pub storage_hours: f64,
    /// Initial (and final) battery state of charge as a fraction of capacity.
    pub initial_soc: f64,
    /// Peak solar output as a multiple of peak load.
    pub solar_peak_ratio: f64,
    /// Shapable energy demand as a multiple of one hour at peak load.
    pub shapable_energy_ratio: f64,
    /// Hours the shapable load needs at full power.
    pub shapable_hours: f64,
    /// Allowed shapable window in clock hours, `[start, end)`.
    pub window_hours: [f64; 2],
    /// Period length in hours.
    pub dt: f64,
    /// Normalized solar shape; defaults to a half-sine from 6:00 to 18:00.
    pub solar_shape: Option<Vec<f64>>,
}

impl Default for DerivationRules {
    fn default() -> Self {
        Self {
            battery_power_ratio: 0.8,
            storage_hours: 4.0,
            initial_soc: 0.5,
            solar_peak_ratio: 1.5,
            shapable_energy_ratio: 5.0,
            shapable_hours: 7.0,
            window_hours: [9.0, 24.0],
            dt: 1.0,
            solar_shape: None,
        }
    }
}

impl DerivationRules {
    fn check(&self) -> Result<(), GridError> {
        if !(self.dt > 0.0) {
            return Err(GridError::Rule("dt must be positive".into()));
        }
        if !(0.0..=5.0).contains(&self.shapable_energy_ratio) {
            return Err(GridError::Rule("shapable energy must be at most 5x peak".into()));
        }
        if !(4.0..=10.0).contains(&self.shapable_hours) {
            return Err(GridError::Rule("shapable duration must be 4-10 hours".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return Err(GridError::Rule("initial state of charge must be in [0, 1]".into()));
        }
        if self.window_hours[0] > self.window_hours[1] {
            return Err(GridError::Rule("window start after end".into()));
        }
        Ok(())
    }

    fn solar_shape(&self, horizon: usize) -> Vec<f64> {
        if let Some(shape) = &self.solar_shape {
            return shape.clone();
        }
        (0..horizon)
            .map(|t| {
                let hour = ((t as f64 + 0.5) * self.dt) % 24.0;
                if (6.0..18.0).contains(&hour) {
                    (PI * (hour - 6.0) / 12.0).sin()
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn window(&self, horizon: usize) -> [usize; 2] {
        let start = (self.window_hours[0] / self.dt).ceil() as usize;
        let end = ((self.window_hours[1] / self.dt).floor() as usize).min(horizon);
        [start.min(end), end]
    }
}

/// Places a battery, a solar panel, a shapable load and the given
/// uncontrollable load at every non-root bus.
///
/// Devices on crowdsourcee buses are Type 2; the rest are Type 1. Existing
/// devices with the generated ids are replaced, so the result does not
/// depend on whether the input already went through this function.
pub fn derive_paper_scenario(
    network: &FeederNetwork,
    profiles: &BTreeMap<BusId, Vec<f64>>,
    reactive: &BTreeMap<BusId, Vec<f64>>,
    rules: &DerivationRules,
) -> Result<Scenario, GridError> {
    rules.check()?;
    network.topology()?;
    if let Some((bus, _)) = profiles.iter().find(|(_, p)| p.is_empty()) {
        return Err(GridError::EmptyProfile { bus: *bus });
    }
    let horizon = profiles.values().map(Vec::len).max().unwrap_or(0);
    let shape = rules.solar_shape(horizon);
    let shape_peak = shape.iter().cloned().fold(0.0, f64::max);
    if shape.len() != horizon || !(shape_peak > 0.0) {
        return Err(GridError::Rule("solar shape must match the horizon and be positive somewhere".into()));
    }
    let window = rules.window(horizon);

    let mut net = network.clone();
    let mut derived = Vec::new();
    for bus in &network.buses {
        let root = bus.kind == BusKind::SubstationRoot;
        let profile = match profiles.get(&bus.id) {
            Some(p) => p,
            None if root => continue,
            None => return Err(GridError::MissingProfile { bus: bus.id }),
        };
        if profile.is_empty() {
            return Err(GridError::EmptyProfile { bus: bus.id });
        }
        let peak = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(peak > 0.0) {
            return Err(GridError::NonpositivePeak { bus: bus.id });
        }
        derived.push(Device {
            id: format!("b{}-uncontrollable", bus.id),
            bus: bus.id,
            owner_class: OwnerClass::Utility,
            kind: DeviceKind::Uncontrollable {
                profile: profile.clone(),
                q_profile: reactive.get(&bus.id).cloned(),
            },
        });
        if root {
            continue;
        }
        let owner = if bus.kind == BusKind::Crowdsourcee {
            OwnerClass::Type2
        } else {
            OwnerClass::Type1
        };
        let p_cap = rules.battery_power_ratio * peak;
        let e_cap = rules.storage_hours * p_cap;
        derived.push(Device {
            id: format!("b{}-battery", bus.id),
            bus: bus.id,
            owner_class: owner,
            kind: DeviceKind::Battery {
                p_cap,
                e_cap,
                e0: rules.initial_soc * e_cap,
                quad_cost: 0.0,
            },
        });
        let scale = rules.solar_peak_ratio * peak / shape_peak;
        derived.push(Device {
            id: format!("b{}-solar", bus.id),
            bus: bus.id,
            owner_class: owner,
            kind: DeviceKind::Solar {
                profile: shape.iter().map(|s| s * scale).collect(),
            },
        });
        let energy = rules.shapable_energy_ratio * peak;
        derived.push(Device {
            id: format!("b{}-shapable", bus.id),
            bus: bus.id,
            owner_class: owner,
            kind: DeviceKind::Shapable {
                energy_demand: energy,
                p_max: energy / rules.shapable_hours,
                window,
                quad_cost: 0.0,
            },
        });
    }
    net.devices.retain(|d| !derived.iter().any(|n| n.id == d.id));
    net.devices.extend(derived);
    net.normalize();
    let scenario = Scenario {
        horizon,
        dt: rules.dt,
        network: net,
        agents: BTreeMap::new(),
        realized: None,
    };
    scenario.validate()?;
    Ok(scenario)
}
