//! Radial feeder and device data model.
//!
//! Power quantities are per-unit on the feeder's `base_mva`; energy is
//! per-unit power times hours. Voltage bounds are on squared magnitudes.

mod derive;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentSpec;

pub use derive::{derive_paper_scenario, DerivationRules};

/// Default squared-voltage bounds, 0.95 and 1.05 p.u.
pub const DEFAULT_V_MIN: f64 = 0.9025;
pub const DEFAULT_V_MAX: f64 = 1.1025;

pub type BusId = usize;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cycle detected: {0}")]
    CycleDetected(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("no substation-root bus")]
    MissingRoot,
    #[error("more than one substation-root bus: {0:?}")]
    DuplicateRoot(Vec<BusId>),
    #[error("invalid network: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("bus {bus}: empty load profile")]
    EmptyProfile { bus: BusId },
    #[error("bus {bus}: load profile has nonpositive peak")]
    NonpositivePeak { bus: BusId },
    #[error("bus {bus}: no load profile supplied")]
    MissingProfile { bus: BusId },
    #[error("invalid derivation rule: {0}")]
    Rule(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    SubstationRoot,
    Generator,
    Crowdsourcee,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    /// Ids of the devices attached here. Recomputed on load.
    #[serde(default)]
    pub devices: Vec<String>,
}

fn default_v_min() -> f64 {
    DEFAULT_V_MIN
}

fn default_v_max() -> f64 {
    DEFAULT_V_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    /// Parent bus (closer to the substation).
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    /// Apparent-power limit; enforced as a current limit at 1 p.u. voltage.
    pub s_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OwnerClass {
    Utility,
    Type1,
    Type2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviceKind {
    /// Cost per period is `dt * m_t * (a P^2 + b P + c)` with `P` in MW and
    /// `m_t` the optional price multiplier.
    Generator {
        a: f64,
        b: f64,
        #[serde(default)]
        c: f64,
        p_min: f64,
        p_max: f64,
        #[serde(default)]
        q_min: f64,
        #[serde(default)]
        q_max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        price_profile: Option<Vec<f64>>,
    },
    Solar {
        profile: Vec<f64>,
    },
    /// Positive battery power is charging.
    Battery {
        p_cap: f64,
        e_cap: f64,
        e0: f64,
        /// Optional convex cost on battery power, $/MW^2h.
        #[serde(default)]
        quad_cost: f64,
    },
    Shapable {
        energy_demand: f64,
        p_max: f64,
        /// Half-open period range `[start, end)`.
        window: [usize; 2],
        #[serde(default)]
        quad_cost: f64,
    },
    Uncontrollable {
        profile: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q_profile: Option<Vec<f64>>,
    },
}

impl DeviceKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            DeviceKind::Generator { .. } => "generator",
            DeviceKind::Solar { .. } => "solar",
            DeviceKind::Battery { .. } => "battery",
            DeviceKind::Shapable { .. } => "shapable",
            DeviceKind::Uncontrollable { .. } => "uncontrollable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    #[serde(default)]
    pub id: String,
    pub bus: BusId,
    pub owner_class: OwnerClass,
    #[serde(flatten)]
    pub kind: DeviceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    #[serde(default)]
    pub devices: Vec<Device>,
    pub base_mva: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingRoot,
    DuplicateRoot(Vec<BusId>),
    DuplicateBusId(BusId),
    DuplicateDeviceId(String),
    UnknownBus { context: String, bus: BusId },
    VoltageBounds { bus: BusId },
    NegativeResistance { from: BusId, to: BusId },
    NegativeReactance { from: BusId, to: BusId },
    NonpositiveLimit { from: BusId, to: BusId },
    SelfLoop { bus: BusId },
    EdgeCount { buses: usize, lines: usize },
    MultipleParents { bus: BusId },
    Cycle { bus: BusId },
    Unreachable { bus: BusId },
    RootHasParent,
    Device { id: String, message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingRoot => write!(f, "missing substation root"),
            Violation::DuplicateRoot(ids) => write!(f, "duplicate substation root {ids:?}"),
            Violation::DuplicateBusId(id) => write!(f, "duplicate bus id {id}"),
            Violation::DuplicateDeviceId(id) => write!(f, "duplicate device id {id}"),
            Violation::UnknownBus { context, bus } => write!(f, "{context} references unknown bus {bus}"),
            Violation::VoltageBounds { bus } => write!(f, "bus {bus}: v_min exceeds v_max or is nonpositive"),
            Violation::NegativeResistance { from, to } => write!(f, "line {from}->{to}: negative resistance"),
            Violation::NegativeReactance { from, to } => write!(f, "line {from}->{to}: negative reactance"),
            Violation::NonpositiveLimit { from, to } => write!(f, "line {from}->{to}: nonpositive s_max"),
            Violation::SelfLoop { bus } => write!(f, "self loop at bus {bus}"),
            Violation::EdgeCount { buses, lines } => {
                write!(f, "tree needs {} lines for {buses} buses, found {lines}", buses.saturating_sub(1))
            }
            Violation::MultipleParents { bus } => write!(f, "bus {bus} has more than one parent line"),
            Violation::Cycle { bus } => write!(f, "cycle through bus {bus}"),
            Violation::Unreachable { bus } => write!(f, "bus {bus} unreachable from root"),
            Violation::RootHasParent => write!(f, "substation root has a parent line"),
            Violation::Device { id, message } => write!(f, "device {id}: {message}"),
        }
    }
}

/// Parent/children view of a validated radial network.
#[derive(Debug, Clone)]
pub struct Topology {
    pub root: usize,
    /// Bus index of each bus's parent.
    pub parent: Vec<Option<usize>>,
    /// Line index feeding each bus (None at the root).
    pub parent_line: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Line indices leaving each bus.
    pub child_lines: Vec<Vec<usize>>,
    /// Depth-first order starting at the root.
    pub order: Vec<usize>,
}

impl FeederNetwork {
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn root_index(&self) -> Option<usize> {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::SubstationRoot)
    }

    pub fn device(&self, id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.id == id)
    }

    /// Assigns default ids to unnamed devices and rebuilds each bus's device list.
    pub fn normalize(&mut self) {
        let mut counters: BTreeMap<(BusId, &'static str), usize> = BTreeMap::new();
        for d in &mut self.devices {
            if d.id.is_empty() {
                let n = counters.entry((d.bus, d.kind.type_name())).or_default();
                d.id = if *n == 0 {
                    format!("b{}-{}", d.bus, d.kind.type_name())
                } else {
                    format!("b{}-{}-{}", d.bus, d.kind.type_name(), n)
                };
                *n += 1;
            }
        }
        for b in &mut self.buses {
            b.devices.clear();
        }
        for d in &self.devices {
            if let Some(b) = self.buses.iter_mut().find(|b| b.id == d.bus) {
                b.devices.push(d.id.clone());
            }
        }
    }

    /// Builds the parent/children view. Fails when the network is not a tree
    /// rooted at the substation.
    pub fn topology(&self) -> Result<Topology, GridError> {
        let violations = structural_violations(self);
        if let Some(err) = first_structural_error(&violations) {
            return Err(err);
        }
        if !violations.is_empty() {
            return Err(GridError::Invalid(violations));
        }
        Ok(build_topology(self).expect("structure already checked"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

fn build_topology(net: &FeederNetwork) -> Option<Topology> {
    let n = net.buses.len();
    let root = net.root_index()?;
    let mut parent = vec![None; n];
    let mut parent_line = vec![None; n];
    let mut children = vec![Vec::new(); n];
    let mut child_lines = vec![Vec::new(); n];
    for (li, line) in net.lines.iter().enumerate() {
        let f = net.bus_index(line.from)?;
        let t = net.bus_index(line.to)?;
        if parent[t].is_some() {
            return None;
        }
        parent[t] = Some(f);
        parent_line[t] = Some(li);
        children[f].push(t);
        child_lines[f].push(li);
    }
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    while let Some(b) = stack.pop() {
        if seen[b] {
            return None;
        }
        seen[b] = true;
        order.push(b);
        for &c in children[b].iter().rev() {
            stack.push(c);
        }
    }
    if order.len() != n {
        return None;
    }
    Some(Topology {
        root,
        parent,
        parent_line,
        children,
        child_lines,
        order,
    })
}

fn structural_violations(net: &FeederNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let roots: Vec<BusId> = net
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::SubstationRoot)
        .map(|b| b.id)
        .collect();
    match roots.len() {
        0 => out.push(Violation::MissingRoot),
        1 => {}
        _ => out.push(Violation::DuplicateRoot(roots.clone())),
    }
    let mut ids = BTreeSet::new();
    for b in &net.buses {
        if !ids.insert(b.id) {
            out.push(Violation::DuplicateBusId(b.id));
        }
    }
    let mut dangling = false;
    for line in &net.lines {
        for bus in [line.from, line.to] {
            if !ids.contains(&bus) {
                out.push(Violation::UnknownBus {
                    context: format!("line {}->{}", line.from, line.to),
                    bus,
                });
                dangling = true;
            }
        }
        if line.from == line.to {
            out.push(Violation::SelfLoop { bus: line.from });
        }
    }
    if dangling || out.iter().any(|v| matches!(v, Violation::DuplicateBusId(_))) {
        return out;
    }
    if net.lines.len() + 1 != net.buses.len() {
        out.push(Violation::EdgeCount {
            buses: net.buses.len(),
            lines: net.lines.len(),
        });
    }
    // Undirected cycle search, independent of line orientation.
    let n = net.buses.len();
    let index: BTreeMap<BusId, usize> = net.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    for line in &net.lines {
        let (a, b) = (index[&line.from], index[&line.to]);
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra == rb {
            out.push(Violation::Cycle { bus: line.to });
        } else {
            uf[ra] = rb;
        }
    }
    let mut parents = vec![0usize; n];
    for line in &net.lines {
        parents[index[&line.to]] += 1;
    }
    for (i, &count) in parents.iter().enumerate() {
        if count > 1 {
            out.push(Violation::MultipleParents { bus: net.buses[i].id });
        }
        if count > 0 && net.buses[i].kind == BusKind::SubstationRoot {
            out.push(Violation::RootHasParent);
        }
    }
    if out.is_empty() {
        if let Some(root) = net.root_index() {
            // Directed reachability from the root along from->to.
            let mut seen = vec![false; n];
            let mut stack = vec![root];
            while let Some(b) = stack.pop() {
                if std::mem::replace(&mut seen[b], true) {
                    continue;
                }
                for line in net.lines.iter().filter(|l| index[&l.from] == b) {
                    stack.push(index[&line.to]);
                }
            }
            for (i, s) in seen.iter().enumerate() {
                if !s {
                    out.push(Violation::Unreachable { bus: net.buses[i].id });
                }
            }
        }
    }
    out
}

fn first_structural_error(violations: &[Violation]) -> Option<GridError> {
    for v in violations {
        match v {
            Violation::MissingRoot => return Some(GridError::MissingRoot),
            Violation::DuplicateRoot(ids) => return Some(GridError::DuplicateRoot(ids.clone())),
            _ => {}
        }
    }
    for v in violations {
        if let Violation::DuplicateBusId(id) = v {
            return Some(GridError::DuplicateId(format!("bus {id}")));
        }
        if let Violation::DuplicateDeviceId(id) = v {
            return Some(GridError::DuplicateId(format!("device {id}")));
        }
    }
    for v in violations {
        if let Violation::Cycle { bus } = v {
            return Some(GridError::CycleDetected(format!("edge into bus {bus} closes a loop")));
        }
    }
    None
}

/// Checks every network invariant and returns all violations found.
pub fn validate(net: &FeederNetwork) -> Result<(), Vec<Violation>> {
    let mut out = structural_violations(net);
    let bus_ids: BTreeSet<BusId> = net.buses.iter().map(|b| b.id).collect();
    for b in &net.buses {
        if !(b.v_min > 0.0 && b.v_min <= b.v_max) {
            out.push(Violation::VoltageBounds { bus: b.id });
        }
    }
    for l in &net.lines {
        if l.r < 0.0 {
            out.push(Violation::NegativeResistance { from: l.from, to: l.to });
        }
        if l.x < 0.0 {
            out.push(Violation::NegativeReactance { from: l.from, to: l.to });
        }
        if !(l.s_max > 0.0) {
            out.push(Violation::NonpositiveLimit { from: l.from, to: l.to });
        }
    }
    let mut dev_ids = BTreeSet::new();
    for d in &net.devices {
        if !d.id.is_empty() && !dev_ids.insert(d.id.clone()) {
            out.push(Violation::DuplicateDeviceId(d.id.clone()));
        }
        if !bus_ids.contains(&d.bus) {
            out.push(Violation::UnknownBus {
                context: format!("device {}", d.id),
                bus: d.bus,
            });
        }
        for message in device_violations(&d.kind) {
            out.push(Violation::Device {
                id: d.id.clone(),
                message,
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn device_violations(kind: &DeviceKind) -> Vec<String> {
    let mut v = Vec::new();
    let nonneg = |v: &mut Vec<String>, name: &str, x: f64| {
        if !(x >= 0.0) || !x.is_finite() {
            v.push(format!("{name} must be nonnegative and finite"));
        }
    };
    match kind {
        DeviceKind::Generator {
            a, p_min, p_max, q_min, q_max, ..
        } => {
            nonneg(&mut v, "a", *a);
            if p_min > p_max {
                v.push("p_min exceeds p_max".into());
            }
            if q_min > q_max {
                v.push("q_min exceeds q_max".into());
            }
        }
        DeviceKind::Solar { profile } => {
            if profile.iter().any(|p| !(*p >= 0.0)) {
                v.push("solar profile must be nonnegative".into());
            }
        }
        DeviceKind::Battery {
            p_cap, e_cap, e0, quad_cost,
        } => {
            nonneg(&mut v, "p_cap", *p_cap);
            nonneg(&mut v, "e_cap", *e_cap);
            nonneg(&mut v, "e0", *e0);
            nonneg(&mut v, "quad_cost", *quad_cost);
            if e0 > e_cap {
                v.push("e0 exceeds e_cap".into());
            }
        }
        DeviceKind::Shapable {
            energy_demand,
            p_max,
            window,
            quad_cost,
        } => {
            nonneg(&mut v, "energy_demand", *energy_demand);
            nonneg(&mut v, "p_max", *p_max);
            nonneg(&mut v, "quad_cost", *quad_cost);
            if window[0] > window[1] {
                v.push("window start after end".into());
            }
        }
        DeviceKind::Uncontrollable { .. } => {}
    }
    v
}

/// Parses a feeder from JSON text and validates it.
pub fn parse_feeder(text: &str) -> Result<FeederNetwork, GridError> {
    let mut net: FeederNetwork = serde_json::from_str(text).map_err(|e| GridError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    net.normalize();
    if let Err(violations) = validate(&net) {
        return Err(first_structural_error(&violations).unwrap_or(GridError::Invalid(violations)));
    }
    Ok(net)
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederNetwork, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_feeder(&text)
}

/// A feeder plus a planning horizon. Every device profile has `horizon` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon: usize,
    /// Period length in hours.
    pub dt: f64,
    pub network: FeederNetwork,
    #[serde(default)]
    pub agents: BTreeMap<BusId, AgentSpec>,
    /// Realized (as opposed to forecast) uncontrollable load per bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized: Option<BTreeMap<BusId, Vec<f64>>>,
}

/// The scenario file layered on top of a feeder file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub horizon: usize,
    #[serde(default = "one")]
    pub dt: f64,
    /// Forecast uncontrollable real load per bus.
    #[serde(default)]
    pub profiles: BTreeMap<BusId, Vec<f64>>,
    #[serde(default)]
    pub reactive_profiles: BTreeMap<BusId, Vec<f64>>,
    #[serde(default)]
    pub realized: Option<BTreeMap<BusId, Vec<f64>>>,
    /// When present, batteries, solar and shapable loads are derived from
    /// the profiles with these rules.
    #[serde(default)]
    pub derive: Option<DerivationRules>,
    #[serde(default)]
    pub agents: BTreeMap<BusId, AgentSpec>,
}

fn one() -> f64 {
    1.0
}

impl Scenario {
    /// Combines a feeder with a scenario file. Profiles become uncontrollable
    /// loads unless a derivation rule set is given.
    pub fn assemble(network: FeederNetwork, file: ScenarioFile) -> Result<Scenario, GridError> {
        let mut scenario = match &file.derive {
            Some(rules) => {
                let mut rules = rules.clone();
                rules.dt = file.dt;
                derive_paper_scenario(&network, &file.profiles, &file.reactive_profiles, &rules)?
            }
            None => {
                let mut net = network;
                for (bus, profile) in &file.profiles {
                    let id = format!("b{bus}-uncontrollable");
                    net.devices.retain(|d| d.id != id);
                    net.devices.push(Device {
                        id,
                        bus: *bus,
                        owner_class: OwnerClass::Utility,
                        kind: DeviceKind::Uncontrollable {
                            profile: profile.clone(),
                            q_profile: file.reactive_profiles.get(bus).cloned(),
                        },
                    });
                }
                net.normalize();
                Scenario {
                    horizon: file.horizon,
                    dt: file.dt,
                    network: net,
                    agents: BTreeMap::new(),
                    realized: None,
                }
            }
        };
        scenario.horizon = file.horizon;
        scenario.agents = file.agents;
        scenario.realized = file.realized;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(feeder: impl AsRef<Path>, scenario: impl AsRef<Path>) -> Result<Scenario, GridError> {
        let net = load_feeder(feeder)?;
        let path = scenario.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| GridError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Scenario::assemble(net, file)
    }

    /// Checks network invariants plus the horizon-dependent device invariants.
    pub fn validate(&self) -> Result<(), GridError> {
        let mut violations = match validate(&self.network) {
            Ok(()) => Vec::new(),
            Err(v) => v,
        };
        if let Some(err) = first_structural_error(&violations) {
            return Err(err);
        }
        let t = self.horizon;
        if t == 0 {
            return Err(GridError::Rule("horizon must be at least one period".into()));
        }
        if !(self.dt > 0.0) {
            return Err(GridError::Rule("dt must be positive".into()));
        }
        for d in &self.network.devices {
            let mut bad = |message: String| {
                violations.push(Violation::Device {
                    id: d.id.clone(),
                    message,
                })
            };
            match &d.kind {
                DeviceKind::Generator { price_profile, .. } => {
                    if let Some(p) = price_profile {
                        if p.len() != t {
                            bad(format!("price profile has {} entries, horizon is {t}", p.len()));
                        }
                    }
                }
                DeviceKind::Solar { profile } => {
                    if profile.len() != t {
                        bad(format!("profile has {} entries, horizon is {t}", profile.len()));
                    }
                }
                DeviceKind::Uncontrollable { profile, q_profile } => {
                    if profile.len() != t {
                        bad(format!("profile has {} entries, horizon is {t}", profile.len()));
                    }
                    if let Some(q) = q_profile {
                        if q.len() != t {
                            bad(format!("reactive profile has {} entries, horizon is {t}", q.len()));
                        }
                    }
                }
                DeviceKind::Shapable {
                    energy_demand,
                    p_max,
                    window,
                    ..
                } => {
                    if window[1] > t {
                        bad(format!("window {window:?} outside horizon {t}"));
                    } else {
                        let cap = p_max * (window[1] - window[0]) as f64 * self.dt;
                        if *energy_demand > cap * (1.0 + 1e-12) {
                            bad(format!("energy demand {energy_demand} exceeds deliverable {cap}"));
                        }
                    }
                }
                DeviceKind::Battery { .. } => {}
            }
        }
        if let Some(realized) = &self.realized {
            for (bus, p) in realized {
                if p.len() != t {
                    violations.push(Violation::Device {
                        id: format!("realized load at bus {bus}"),
                        message: format!("{} entries, horizon is {t}", p.len()),
                    });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(GridError::Invalid(violations))
        }
    }

    /// Forecast uncontrollable real load per bus index and period (p.u.).
    pub fn forecast_load(&self) -> Vec<Vec<f64>> {
        let mut load = vec![vec![0.0; self.horizon]; self.network.buses.len()];
        for d in &self.network.devices {
            if let DeviceKind::Uncontrollable { profile, .. } = &d.kind {
                if let Some(b) = self.network.bus_index(d.bus) {
                    for (t, p) in profile.iter().enumerate().take(self.horizon) {
                        load[b][t] += p;
                    }
                }
            }
        }
        load
    }

    /// Buses holding at least one Type-2 battery, solar panel or shapable load.
    pub fn type2_crowdsourcees(&self) -> Vec<BusId> {
        let set: BTreeSet<BusId> = self
            .network
            .devices
            .iter()
            .filter(|d| d.owner_class == OwnerClass::Type2)
            .filter(|d| {
                matches!(
                    d.kind,
                    DeviceKind::Battery { .. } | DeviceKind::Solar { .. } | DeviceKind::Shapable { .. }
                )
            })
            .map(|d| d.bus)
            .collect();
        set.into_iter().collect()
    }
}
