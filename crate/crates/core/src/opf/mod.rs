//! Multi-period optimal power flow on a radial feeder and the nodal prices
//! it induces.
//!
//! [`build_ces_opf`] turns a [`Scenario`] into a [`ConicProgram`] (a convex
//! second-order-cone relaxation of the branch-flow equations); [`solve`]
//! runs it and returns the device schedule, branch flows, per-bus prices and
//! independently recomputed residuals.

mod backend;
mod program;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clarabel::solver::SolverStatus;
use serde::{Deserialize, Serialize};

use crate::grid::{BusId, DeviceKind, GridError, OwnerClass, Scenario};

pub use program::{
    build_ces_opf, build_with_cone_scaling, Affine, ConicProgram, Layout, ProgramStats, Row, SecondOrderCone, V_ROOT,
};

/// Squared-current floor below which cone gaps are measured absolutely.
pub const EXACTNESS_FLOOR: f64 = 1e-6;
/// Smallest apparent flow used when rebalancing cones, p.u.
pub const CONE_BALANCE_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum OpfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("problem is infeasible; largest certificate rows: {}", format_certificate(.certificate))]
    Infeasible { certificate: Vec<(String, f64)> },
    #[error("problem is unbounded")]
    Unbounded,
    #[error("solver hit the iteration limit after {iterations} iterations")]
    MaxIter { iterations: u32 },
    #[error("solver failed: {0}")]
    Numerical(String),
    #[error("solution status {0:?} carries no usable prices")]
    NotOptimal(OpfStatus),
}

fn format_certificate(rows: &[(String, f64)]) -> String {
    if rows.is_empty() {
        return "none".into();
    }
    rows.iter()
        .map(|(label, y)| format!("{label} ({y:.3e})"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpfStatus {
    Optimal,
    /// The solver stopped at reduced accuracy; residuals tell how much.
    Inaccurate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpfSettings {
    /// Primal and dual feasibility tolerance.
    pub tol: f64,
    /// Duality-gap tolerance; it also bounds how loose the cones can stay.
    pub gap_tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
    /// Re-solve once with cones balanced around the first answer's flows.
    pub rebalance_cones: bool,
}

impl Default for OpfSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            gap_tol: 1e-10,
            max_iter: 200,
            verbose: false,
            rebalance_cones: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSchedule {
    pub bus: BusId,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSchedule {
    pub bus: BusId,
    pub owner: OwnerClass,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySchedule {
    pub bus: BusId,
    pub owner: OwnerClass,
    /// Charging power, positive into the battery.
    pub p: Vec<f64>,
    /// Stored energy at the start of each period plus the final value.
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSchedule {
    pub bus: BusId,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Per-device power trajectories, per unit on the network base.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceSchedule {
    pub generators: BTreeMap<String, GenSchedule>,
    pub solar: BTreeMap<String, PowerSchedule>,
    pub batteries: BTreeMap<String, BatterySchedule>,
    pub shapable: BTreeMap<String, PowerSchedule>,
    pub uncontrollable: BTreeMap<String, LoadSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFlow {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    /// Sending-end real and reactive power.
    pub p: f64,
    pub q: f64,
    /// Squared current magnitude.
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusState {
    pub id: BusId,
    /// Squared voltage magnitude.
    pub v: f64,
    /// Net real and reactive injection by devices at the bus.
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodFlows {
    pub lines: Vec<LineFlow>,
    pub buses: Vec<BusState>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchFlowState {
    pub periods: Vec<PeriodFlows>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Largest nodal real or reactive mismatch, recomputed from the schedule.
    pub power_balance_inf_norm: f64,
    pub voltage_drop_inf_norm: f64,
    /// Largest relative slack in `P^2 + Q^2 <= l v`.
    pub cone_gap_max: f64,
    /// `|primal - dual| / max(1, |primal|)`.
    pub dual_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// Locational marginal prices in $/MWh, indexed `[t][bus]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    pub bus_ids: Vec<BusId>,
    pub lambda: Vec<Vec<f64>>,
}

impl PriceVector {
    pub fn horizon(&self) -> usize {
        self.lambda.len()
    }

    pub fn at(&self, t: usize, bus: BusId) -> Option<f64> {
        let b = self.bus_ids.iter().position(|id| *id == bus)?;
        self.lambda.get(t).map(|row| row[b])
    }

    pub fn max(&self) -> f64 {
        self.lambda.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,bus,dlmp\n");
        for (t, row) in self.lambda.iter().enumerate() {
            for (b, v) in self.bus_ids.iter().zip(row) {
                let _ = writeln!(out, "{t},{b},{v}");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub status: OpfStatus,
    /// Generation cost in $.
    pub objective: f64,
    pub horizon: usize,
    pub dt: f64,
    pub base_mva: f64,
    pub bus_ids: Vec<BusId>,
    pub schedule: DeviceSchedule,
    pub flows: BranchFlowState,
    /// Real-power balance multipliers in $ per p.u. injection, `[t][bus]`.
    pub balance_duals: Vec<Vec<f64>>,
    /// Present when the status is optimal.
    pub dlmp: Option<PriceVector>,
    pub residuals: Residuals,
    pub stats: ProgramStats,
    pub iterations: u32,
    pub solve_time: f64,
}

impl OpfSolution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }

    /// Recomputes nodal real and reactive mismatch from the device schedule
    /// and branch flows alone.
    pub fn balance_residual(&self) -> f64 {
        let nb = self.bus_ids.len();
        let idx: BTreeMap<BusId, usize> = self.bus_ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        let root = self.root_index();
        let mut worst: f64 = 0.0;
        for (t, period) in self.flows.periods.iter().enumerate() {
            let mut real = vec![0.0; nb];
            let mut reactive = vec![0.0; nb];
            for line in &period.lines {
                let (i, j) = (idx[&line.from], idx[&line.to]);
                real[j] += line.p - line.r * line.l;
                reactive[j] += line.q - line.x * line.l;
                real[i] -= line.p;
                reactive[i] -= line.q;
            }
            let s = &self.schedule;
            for g in s.generators.values() {
                real[idx[&g.bus]] += g.p[t];
                reactive[idx[&g.bus]] += g.q[t];
            }
            for d in s.solar.values() {
                real[idx[&d.bus]] += d.p[t];
            }
            for d in s.batteries.values() {
                real[idx[&d.bus]] -= d.p[t];
            }
            for d in s.shapable.values() {
                real[idx[&d.bus]] -= d.p[t];
            }
            for d in s.uncontrollable.values() {
                real[idx[&d.bus]] -= d.p[t];
                reactive[idx[&d.bus]] -= d.q[t];
            }
            for b in 0..nb {
                worst = worst.max(real[b].abs());
                if Some(b) != root {
                    worst = worst.max(reactive[b].abs());
                }
            }
        }
        worst
    }

    fn root_index(&self) -> Option<usize> {
        let first = self.flows.periods.first()?;
        let children: Vec<BusId> = first.lines.iter().map(|l| l.to).collect();
        self.bus_ids.iter().position(|b| !children.contains(b))
    }

    fn bus_voltage(&self, t: usize, bus: BusId) -> f64 {
        self.flows.periods[t]
            .buses
            .iter()
            .find(|b| b.id == bus)
            .map_or(V_ROOT, |b| b.v)
    }

    /// One row per bus and period: injections in MW, voltage in p.u., price.
    pub fn to_csv(&self) -> String {
        let prices = extract_dlmp(self).ok();
        let mut out = String::from("t,bus,v,net_p_mw,net_q_mvar,dlmp\n");
        for (t, period) in self.flows.periods.iter().enumerate() {
            for bus in &period.buses {
                let price = prices
                    .as_ref()
                    .and_then(|p| p.at(t, bus.id))
                    .map(|p| p.to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{t},{},{},{},{},{price}",
                    bus.id,
                    bus.v.sqrt(),
                    bus.p * self.base_mva,
                    bus.q * self.base_mva
                );
            }
        }
        out
    }
}

/// Solves a built program and maps the result back onto the network.
pub fn solve(prog: &ConicProgram, settings: &OpfSettings) -> Result<OpfSolution, OpfError> {
    let raw = backend::solve(prog, settings.tol, settings.gap_tol, settings.max_iter, settings.verbose).map_err(OpfError::Numerical)?;
    match raw.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(OpfError::Infeasible {
                certificate: certificate(prog, &raw.z),
            })
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => return Err(OpfError::Unbounded),
        SolverStatus::MaxIterations | SolverStatus::MaxTime => {
            return Err(OpfError::MaxIter {
                iterations: raw.iterations,
            })
        }
        other => return Err(OpfError::Numerical(format!("{other:?}"))),
    }
    log::debug!(
        "opf solved: {:?} in {} iterations, objective {:.6}",
        raw.status,
        raw.iterations,
        raw.obj_primal
    );
    let mut sol = extract(prog, &raw, OpfStatus::Inaccurate);
    sol.residuals.power_balance_inf_norm = sol.balance_residual();
    sol.residuals.cone_gap_max = check_exactness(&sol);
    // The gap target is deliberately tighter than the feasibility tolerance
    // to squeeze the cones; the solver may stall just short of it. The
    // answer counts as optimal when every residual meets `tol`.
    let r = &sol.residuals;
    let certified = [
        r.power_balance_inf_norm,
        r.voltage_drop_inf_norm,
        r.dual_gap,
        r.primal_residual,
        r.dual_residual,
    ]
    .iter()
    .all(|v| *v <= settings.tol);
    if certified {
        sol.status = OpfStatus::Optimal;
    }
    sol.dlmp = extract_dlmp(&sol).ok();
    Ok(sol)
}

/// Builds and solves in one step with default settings.
pub fn solve_scenario(scenario: &Scenario) -> Result<OpfSolution, OpfError> {
    solve_scenario_with(scenario, &OpfSettings::default())
}

/// Builds and solves, then re-solves once with every cone rebalanced around
/// the first answer's line flows.
///
/// Lightly loaded laterals carry currents orders of magnitude below the
/// trunk; writing their cones as `P^2 + Q^2 <= (a l)(v / a)` with
/// `a ~ 1/|S|` describes the same set but lets the interior-point method
/// close their slack much further. The better of the two answers (by cone
/// slack) is returned.
pub fn solve_scenario_with(scenario: &Scenario, settings: &OpfSettings) -> Result<OpfSolution, OpfError> {
    let first = solve(&build_ces_opf(scenario)?, settings)?;
    if !settings.rebalance_cones || first.status != OpfStatus::Optimal {
        return Ok(first);
    }
    let scaling: Vec<Vec<f64>> = first
        .flows
        .periods
        .iter()
        .map(|p| {
            p.lines
                .iter()
                .map(|l| 1.0 / (l.p * l.p + l.q * l.q).sqrt().max(CONE_BALANCE_FLOOR))
                .collect()
        })
        .collect();
    match solve(&build_with_cone_scaling(scenario, Some(&scaling))?, settings) {
        Ok(second)
            if second.status == OpfStatus::Optimal
                && second.residuals.cone_gap_max <= first.residuals.cone_gap_max =>
        {
            Ok(second)
        }
        _ => Ok(first),
    }
}

fn certificate(prog: &ConicProgram, z: &[f64]) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = prog
        .equality_labels
        .iter()
        .zip(z)
        .filter(|(_, y)| y.abs() > 1e-8)
        .map(|(l, y)| (l.clone(), *y))
        .collect();
    rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    rows.truncate(5);
    rows
}

fn extract(prog: &ConicProgram, raw: &backend::RawSolution, status: OpfStatus) -> OpfSolution {
    let lay = &prog.layout;
    let x = &raw.x;
    let horizon = lay.horizon;
    let bus_id = |b: usize| lay.bus_ids[b];

    let mut schedule = DeviceSchedule::default();
    for load in &lay.loads {
        schedule.uncontrollable.insert(
            load.id.clone(),
            LoadSchedule {
                bus: bus_id(load.bus),
                p: load.p.clone(),
                q: load.q.clone(),
            },
        );
    }
    for s in &lay.solar {
        schedule.solar.insert(
            s.id.clone(),
            PowerSchedule {
                bus: bus_id(s.bus),
                owner: s.owner,
                p: (0..horizon).map(|t| s.value(t, x)).collect(),
            },
        );
    }
    for b in &lay.batteries {
        let p: Vec<f64> = (0..horizon).map(|t| b.dev.value(t, x)).collect();
        let mut energy = vec![b.e0];
        for pt in &p {
            energy.push(energy.last().expect("seeded") + lay.dt * pt);
        }
        schedule.batteries.insert(
            b.dev.id.clone(),
            BatterySchedule {
                bus: bus_id(b.dev.bus),
                owner: b.dev.owner,
                p,
                energy,
            },
        );
    }
    for s in &lay.shapable {
        schedule.shapable.insert(
            s.id.clone(),
            PowerSchedule {
                bus: bus_id(s.bus),
                owner: s.owner,
                p: (0..horizon).map(|t| s.value(t, x)).collect(),
            },
        );
    }

    let mut periods = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let lines: Vec<LineFlow> = lay
            .lines
            .iter()
            .enumerate()
            .map(|(li, line)| LineFlow {
                from: line.from_id,
                to: line.to_id,
                r: line.r,
                x: line.x,
                p: x[lay.line_p[t][li]],
                q: x[lay.line_q[t][li]],
                l: x[lay.line_l[t][li]],
            })
            .collect();
        let buses = lay
            .bus_ids
            .iter()
            .enumerate()
            .map(|(b, id)| BusState {
                id: *id,
                v: lay.bus_v[t][b].map_or(V_ROOT, |v| x[v]),
                p: 0.0,
                q: 0.0,
            })
            .collect();
        periods.push(PeriodFlows { lines, buses });
    }

    // Generators: reactive output at the substation is whatever closes the
    // reactive balance there.
    for g in &lay.generators {
        let p: Vec<f64> = g.p.iter().map(|v| x[*v]).collect();
        let q: Vec<f64> = match &g.q {
            Some(q) => q.iter().map(|v| x[*v]).collect(),
            None => vec![0.0; horizon],
        };
        schedule.generators.insert(
            g.id.clone(),
            GenSchedule {
                bus: bus_id(g.bus),
                p,
                q,
            },
        );
    }
    if let Some(root_gen) = lay.generators.iter().find(|g| g.bus == lay.root && g.q.is_none()) {
        let mut slack = vec![0.0; horizon];
        for (t, s) in slack.iter_mut().enumerate() {
            let outflow: f64 = lay
                .lines
                .iter()
                .enumerate()
                .filter(|(_, l)| l.from == lay.root)
                .map(|(li, _)| x[lay.line_q[t][li]])
                .sum();
            *s = outflow + lay.reactive_rhs[t][lay.root];
        }
        schedule.generators.get_mut(&root_gen.id).expect("inserted").q = slack;
    }

    let idx: BTreeMap<BusId, usize> = lay.bus_ids.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    for (t, period) in periods.iter_mut().enumerate() {
        let mut add = |bus: BusId, p: f64, q: f64| {
            let b = &mut period.buses[idx[&bus]];
            b.p += p;
            b.q += q;
        };
        for g in schedule.generators.values() {
            add(g.bus, g.p[t], g.q[t]);
        }
        for d in schedule.solar.values() {
            add(d.bus, d.p[t], 0.0);
        }
        for d in schedule.batteries.values() {
            add(d.bus, -d.p[t], 0.0);
        }
        for d in schedule.shapable.values() {
            add(d.bus, -d.p[t], 0.0);
        }
        for d in schedule.uncontrollable.values() {
            add(d.bus, -d.p[t], -d.q[t]);
        }
    }

    let balance_duals: Vec<Vec<f64>> = lay
        .real_balance
        .iter()
        .map(|rows| rows.iter().map(|r| -raw.z[*r]).collect())
        .collect();

    let mut drop_residual: f64 = 0.0;
    for rows in &lay.voltage_drop {
        for r in rows {
            let row = &prog.equalities[*r];
            drop_residual = drop_residual.max((row.eval(x) - row.rhs).abs());
        }
    }

    OpfSolution {
        status,
        objective: raw.obj_primal,
        horizon,
        dt: lay.dt,
        base_mva: lay.base_mva,
        bus_ids: lay.bus_ids.clone(),
        schedule,
        flows: BranchFlowState { periods },
        balance_duals,
        dlmp: None,
        residuals: Residuals {
            power_balance_inf_norm: 0.0,
            voltage_drop_inf_norm: drop_residual,
            cone_gap_max: 0.0,
            dual_gap: (raw.obj_primal - raw.obj_dual).abs() / raw.obj_primal.abs().max(1.0),
            primal_residual: raw.r_prim,
            dual_residual: raw.r_dual,
        },
        stats: prog.stats(),
        iterations: raw.iterations,
        solve_time: raw.solve_time,
    }
}

/// Converts balance multipliers into $/MWh prices.
pub fn extract_dlmp(sol: &OpfSolution) -> Result<PriceVector, OpfError> {
    if sol.status != OpfStatus::Optimal {
        return Err(OpfError::NotOptimal(sol.status));
    }
    let scale = 1.0 / (sol.base_mva * sol.dt);
    Ok(PriceVector {
        bus_ids: sol.bus_ids.clone(),
        lambda: sol
            .balance_duals
            .iter()
            .map(|row| row.iter().map(|v| v * scale).collect())
            .collect(),
    })
}

/// Largest relative slack `(l v - P^2 - Q^2) / max(l v, floor)` over all
/// lines and periods; zero means the relaxation is tight everywhere.
pub fn check_exactness(sol: &OpfSolution) -> f64 {
    let mut worst: f64 = 0.0;
    for (t, period) in sol.flows.periods.iter().enumerate() {
        for line in &period.lines {
            let lv = line.l * sol.bus_voltage(t, line.from);
            let gap = lv - line.p * line.p - line.q * line.q;
            worst = worst.max(gap / lv.max(EXACTNESS_FLOOR));
        }
    }
    worst
}

/// What a crowdsourcee bus would sell at equilibrium, in MW per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub bus: BusId,
    /// `max(0, solar - charge + shapable reduction)`.
    pub u: Vec<f64>,
    /// The negative part: net withdrawal the owner needs from the grid.
    pub withdrawal: Vec<f64>,
}

/// Equilibrium selling setpoints for every Type-2 crowdsourcee bus.
///
/// The shapable load's reference consumption is its energy spread evenly
/// over its window; running below that reference counts as supply.
pub fn equilibrium_setpoints(scenario: &Scenario, sol: &OpfSolution) -> BTreeMap<BusId, Setpoints> {
    let horizon = sol.horizon;
    let mut net: BTreeMap<BusId, Vec<f64>> = scenario
        .type2_crowdsourcees()
        .into_iter()
        .map(|b| (b, vec![0.0; horizon]))
        .collect();
    for d in &scenario.network.devices {
        if d.owner_class != OwnerClass::Type2 {
            continue;
        }
        let Some(acc) = net.get_mut(&d.bus) else { continue };
        match &d.kind {
            DeviceKind::Solar { .. } => {
                if let Some(s) = sol.schedule.solar.get(&d.id) {
                    acc.iter_mut().zip(&s.p).for_each(|(a, p)| *a += p);
                }
            }
            DeviceKind::Battery { .. } => {
                if let Some(s) = sol.schedule.batteries.get(&d.id) {
                    acc.iter_mut().zip(&s.p).for_each(|(a, p)| *a -= p);
                }
            }
            DeviceKind::Shapable {
                energy_demand, window, ..
            } => {
                if let Some(s) = sol.schedule.shapable.get(&d.id) {
                    let len = window[1].saturating_sub(window[0]);
                    let baseline = if len > 0 {
                        energy_demand / (len as f64 * sol.dt)
                    } else {
                        0.0
                    };
                    for (t, a) in acc.iter_mut().enumerate() {
                        let reference = if (window[0]..window[1]).contains(&t) {
                            baseline
                        } else {
                            0.0
                        };
                        *a += reference - s.p[t];
                    }
                }
            }
            _ => {}
        }
    }
    net.into_iter()
        .map(|(bus, v)| {
            let u = v.iter().map(|p| p.max(0.0) * sol.base_mva).collect();
            let withdrawal = v.iter().map(|p| (-p).max(0.0) * sol.base_mva).collect();
            (bus, Setpoints { bus, u, withdrawal })
        })
        .collect()
}
