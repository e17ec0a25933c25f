//! Conic program assembly for the multi-period branch-flow OPF.

use serde::{Deserialize, Serialize};

use crate::grid::{BusId, DeviceKind, OwnerClass, Scenario};

use super::OpfError;

/// Fixed substation voltage magnitude squared.
pub const V_ROOT: f64 = 1.0;

/// One affine row `coeffs . x` paired with a right-hand side.
#[derive(Debug, Clone, Default)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, var: usize, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.coeffs.push((var, coeff));
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|(i, c)| c * x[*i]).sum()
    }
}

/// Affine map `coeffs . x + constant`, one component of a cone.
#[derive(Debug, Clone, Default)]
pub struct Affine {
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    fn var(var: usize, coeff: f64) -> Self {
        Self {
            coeffs: vec![(var, coeff)],
            constant: 0.0,
        }
    }
}

/// `components[0] >= || components[1..] ||`.
#[derive(Debug, Clone)]
pub struct SecondOrderCone {
    pub components: Vec<Affine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramStats {
    pub variables: usize,
    pub equality_rows: usize,
    pub inequality_rows: usize,
    pub cones: usize,
}

#[derive(Debug, Clone)]
pub struct LineInfo {
    pub from: usize,
    pub to: usize,
    pub from_id: BusId,
    pub to_id: BusId,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone)]
pub struct GenVars {
    pub id: String,
    pub bus: usize,
    pub p: Vec<usize>,
    pub q: Option<Vec<usize>>,
}

/// A device whose power in each period is either a variable or a constant.
#[derive(Debug, Clone)]
pub struct DeviceVars {
    pub id: String,
    pub bus: usize,
    pub owner: OwnerClass,
    pub vars: Vec<Option<usize>>,
    pub fixed: Vec<f64>,
}

impl DeviceVars {
    pub fn value(&self, t: usize, x: &[f64]) -> f64 {
        match self.vars[t] {
            Some(i) => x[i],
            None => self.fixed[t],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatteryVars {
    pub dev: DeviceVars,
    pub e0: f64,
}

#[derive(Debug, Clone)]
pub struct LoadInfo {
    pub id: String,
    pub bus: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Where each modeling quantity lives in the variable vector and row set.
#[derive(Debug, Clone)]
pub struct Layout {
    pub horizon: usize,
    pub dt: f64,
    pub base_mva: f64,
    pub root: usize,
    pub bus_ids: Vec<BusId>,
    pub lines: Vec<LineInfo>,
    /// `[t][line]`
    pub line_p: Vec<Vec<usize>>,
    pub line_q: Vec<Vec<usize>>,
    pub line_l: Vec<Vec<usize>>,
    /// `[t][bus]`; the root has no voltage variable.
    pub bus_v: Vec<Vec<Option<usize>>>,
    pub generators: Vec<GenVars>,
    pub solar: Vec<DeviceVars>,
    pub batteries: Vec<BatteryVars>,
    pub shapable: Vec<DeviceVars>,
    pub loads: Vec<LoadInfo>,
    /// Equality-row index of the real-power balance, `[t][bus]`.
    pub real_balance: Vec<Vec<usize>>,
    pub reactive_balance: Vec<Vec<Option<usize>>>,
    /// Equality-row index of each line's voltage-drop equation, `[t][line]`.
    pub voltage_drop: Vec<Vec<usize>>,
    /// Real-power balance right-hand side, `[t][bus]`.
    pub real_rhs: Vec<Vec<f64>>,
    pub reactive_rhs: Vec<Vec<f64>>,
}

/// `min 1/2 sum(quad_i x_i^2) + linear . x + constant` subject to equality
/// rows, `<=` rows, and second-order cones.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub n_vars: usize,
    pub quad_diag: Vec<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub equalities: Vec<Row>,
    pub inequalities: Vec<Row>,
    pub cones: Vec<SecondOrderCone>,
    pub equality_labels: Vec<String>,
    pub layout: Layout,
}

impl ConicProgram {
    pub fn stats(&self) -> ProgramStats {
        ProgramStats {
            variables: self.n_vars,
            equality_rows: self.equalities.len(),
            inequality_rows: self.inequalities.len(),
            cones: self.cones.len(),
        }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad: f64 = self.quad_diag.iter().zip(x).map(|(q, v)| 0.5 * q * v * v).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(c, v)| c * v).sum();
        quad + lin + self.constant
    }

    fn new_var(&mut self) -> usize {
        self.n_vars += 1;
        self.quad_diag.push(0.0);
        self.linear.push(0.0);
        self.n_vars - 1
    }

    fn bound(&mut self, var: usize, lo: f64, hi: f64) {
        if lo.is_finite() {
            let mut r = Row::new();
            r.add(var, -1.0).rhs = -lo;
            self.inequalities.push(r);
        }
        if hi.is_finite() {
            let mut r = Row::new();
            r.add(var, 1.0).rhs = hi;
            self.inequalities.push(r);
        }
    }

    fn equality(&mut self, row: Row, label: String) -> usize {
        self.equalities.push(row);
        self.equality_labels.push(label);
        self.equalities.len() - 1
    }
}

/// Assembles the relaxed multi-period OPF for a validated scenario.
///
/// Per period and per line `i -> j`:
///
/// ```text
/// P_ij - r l_ij - sum_k P_jk + inj_j = load_j          (real balance at j)
/// Q_ij - x l_ij - sum_k Q_jk + qinj_j = qload_j        (reactive balance, non-root j)
/// v_j = v_i - 2 (r P_ij + x Q_ij) + (r^2 + x^2) l_ij
/// P_ij^2 + Q_ij^2 <= l_ij v_i
/// ```
///
/// The substation voltage is fixed and the substation absorbs any reactive
/// imbalance. Batteries carry their state of charge implicitly through
/// cumulative-sum rows and must end where they started.
pub fn build_ces_opf(scenario: &Scenario) -> Result<ConicProgram, OpfError> {
    build_with_cone_scaling(scenario, None)
}

/// Like [`build_ces_opf`], with per-period, per-line cone balancing factors.
/// `scaling[t][line] = a` writes the cone as `P^2 + Q^2 <= (a l)(v / a)`, which
/// is the same set; choosing `a ~ 1/|S|` keeps both factors comparable.
pub fn build_with_cone_scaling(scenario: &Scenario, scaling: Option<&[Vec<f64>]>) -> Result<ConicProgram, OpfError> {
    scenario.validate()?;
    let net = &scenario.network;
    let topo = net.topology()?;
    let horizon = scenario.horizon;
    let dt = scenario.dt;
    let s_base = net.base_mva;
    let nb = net.buses.len();
    let bus_index = |id: BusId| net.bus_index(id).expect("validated");

    let lines: Vec<LineInfo> = net
        .lines
        .iter()
        .map(|l| LineInfo {
            from: bus_index(l.from),
            to: bus_index(l.to),
            from_id: l.from,
            to_id: l.to,
            r: l.r,
            x: l.x,
        })
        .collect();

    let mut prog = ConicProgram {
        n_vars: 0,
        quad_diag: vec![],
        linear: vec![],
        constant: 0.0,
        equalities: vec![],
        inequalities: vec![],
        cones: vec![],
        equality_labels: vec![],
        layout: Layout {
            horizon,
            dt,
            base_mva: s_base,
            root: topo.root,
            bus_ids: net.buses.iter().map(|b| b.id).collect(),
            lines: lines.clone(),
            line_p: vec![],
            line_q: vec![],
            line_l: vec![],
            bus_v: vec![],
            generators: vec![],
            solar: vec![],
            batteries: vec![],
            shapable: vec![],
            loads: vec![],
            real_balance: vec![],
            reactive_balance: vec![],
            voltage_drop: vec![],
            real_rhs: vec![vec![0.0; nb]; horizon],
            reactive_rhs: vec![vec![0.0; nb]; horizon],
        },
    };

    for _ in 0..horizon {
        let mut p = Vec::with_capacity(lines.len());
        let mut q = Vec::with_capacity(lines.len());
        let mut l = Vec::with_capacity(lines.len());
        for _ in &lines {
            p.push(prog.new_var());
            q.push(prog.new_var());
            l.push(prog.new_var());
        }
        let v: Vec<Option<usize>> = (0..nb)
            .map(|b| if b == topo.root { None } else { Some(prog.new_var()) })
            .collect();
        prog.layout.line_p.push(p);
        prog.layout.line_q.push(q);
        prog.layout.line_l.push(l);
        prog.layout.bus_v.push(v);
    }

    for d in &net.devices {
        let bus = bus_index(d.bus);
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
            } => {
                let mut pv = Vec::with_capacity(horizon);
                for t in 0..horizon {
                    let m = price_profile.as_ref().map_or(1.0, |p| p[t]);
                    let var = prog.new_var();
                    prog.quad_diag[var] += 2.0 * dt * m * a * s_base * s_base;
                    prog.linear[var] += dt * m * b * s_base;
                    prog.constant += dt * m * c;
                    prog.bound(var, *p_min, *p_max);
                    pv.push(var);
                }
                let qv = if bus != topo.root && q_max > q_min {
                    let mut qv = Vec::with_capacity(horizon);
                    for _ in 0..horizon {
                        let var = prog.new_var();
                        prog.bound(var, *q_min, *q_max);
                        qv.push(var);
                    }
                    Some(qv)
                } else {
                    None
                };
                prog.layout.generators.push(GenVars {
                    id: d.id.clone(),
                    bus,
                    p: pv,
                    q: qv,
                });
            }
            DeviceKind::Solar { profile } => {
                // Type-2 owners decide whether to sell; everyone else injects
                // whatever the panel produces.
                let curtailable = d.owner_class == OwnerClass::Type2;
                let mut vars = Vec::with_capacity(horizon);
                let mut fixed = Vec::with_capacity(horizon);
                for &avail in profile.iter().take(horizon) {
                    if curtailable && avail > 0.0 {
                        let var = prog.new_var();
                        prog.bound(var, 0.0, avail);
                        vars.push(Some(var));
                        fixed.push(0.0);
                    } else {
                        vars.push(None);
                        fixed.push(avail);
                    }
                }
                prog.layout.solar.push(DeviceVars {
                    id: d.id.clone(),
                    bus,
                    owner: d.owner_class,
                    vars,
                    fixed,
                });
            }
            DeviceKind::Battery {
                p_cap,
                e_cap,
                e0,
                quad_cost,
            } => {
                let mut vars = Vec::with_capacity(horizon);
                for _ in 0..horizon {
                    if *p_cap > 0.0 {
                        let var = prog.new_var();
                        prog.bound(var, -p_cap, *p_cap);
                        prog.quad_diag[var] += 2.0 * dt * quad_cost * s_base * s_base;
                        vars.push(Some(var));
                    } else {
                        vars.push(None);
                    }
                }
                let active: Vec<usize> = vars.iter().flatten().copied().collect();
                if !active.is_empty() {
                    // 0 <= e0 + dt * sum_{tau <= t} p_tau <= e_cap for t < T-1;
                    // the final period is pinned by the periodicity row.
                    for t in 0..horizon.saturating_sub(1) {
                        let mut upper = Row::new();
                        let mut lower = Row::new();
                        for var in &active[..=t] {
                            upper.add(*var, dt);
                            lower.add(*var, -dt);
                        }
                        upper.rhs = e_cap - e0;
                        lower.rhs = *e0;
                        prog.inequalities.push(upper);
                        prog.inequalities.push(lower);
                    }
                    let mut periodic = Row::new();
                    for var in &active {
                        periodic.add(*var, 1.0);
                    }
                    prog.equality(periodic, format!("battery {} periodicity", d.id));
                }
                prog.layout.batteries.push(BatteryVars {
                    dev: DeviceVars {
                        id: d.id.clone(),
                        bus,
                        owner: d.owner_class,
                        vars,
                        fixed: vec![0.0; horizon],
                    },
                    e0: *e0,
                });
            }
            DeviceKind::Shapable {
                energy_demand,
                p_max,
                window,
                quad_cost,
            } => {
                let mut vars = Vec::with_capacity(horizon);
                let mut total = Row::new();
                for t in 0..horizon {
                    if (window[0]..window[1]).contains(&t) && *p_max > 0.0 {
                        let var = prog.new_var();
                        prog.bound(var, 0.0, *p_max);
                        prog.quad_diag[var] += 2.0 * dt * quad_cost * s_base * s_base;
                        total.add(var, dt);
                        vars.push(Some(var));
                    } else {
                        vars.push(None);
                    }
                }
                if total.coeffs.is_empty() {
                    if *energy_demand > 0.0 {
                        return Err(OpfError::Scenario(format!(
                            "shapable load {} has demand but no usable window",
                            d.id
                        )));
                    }
                } else {
                    total.rhs = *energy_demand;
                    prog.equality(total, format!("shapable {} energy", d.id));
                }
                prog.layout.shapable.push(DeviceVars {
                    id: d.id.clone(),
                    bus,
                    owner: d.owner_class,
                    vars,
                    fixed: vec![0.0; horizon],
                });
            }
            DeviceKind::Uncontrollable { profile, q_profile } => {
                let q = q_profile.clone().unwrap_or_else(|| vec![0.0; horizon]);
                prog.layout.loads.push(LoadInfo {
                    id: d.id.clone(),
                    bus,
                    p: profile[..horizon].to_vec(),
                    q: q[..horizon].to_vec(),
                });
            }
        }
    }

    for t in 0..horizon {
        let mut real: Vec<Row> = (0..nb).map(|_| Row::new()).collect();
        let mut reactive: Vec<Row> = (0..nb).map(|_| Row::new()).collect();
        for (li, line) in lines.iter().enumerate() {
            let (p, q, l) = (
                prog.layout.line_p[t][li],
                prog.layout.line_q[t][li],
                prog.layout.line_l[t][li],
            );
            real[line.to].add(p, 1.0).add(l, -line.r);
            reactive[line.to].add(q, 1.0).add(l, -line.x);
            real[line.from].add(p, -1.0);
            reactive[line.from].add(q, -1.0);
        }
        let layout = &prog.layout;
        for g in &layout.generators {
            real[g.bus].add(g.p[t], 1.0);
            if let Some(q) = &g.q {
                reactive[g.bus].add(q[t], 1.0);
            }
        }
        for s in &layout.solar {
            match s.vars[t] {
                Some(var) => {
                    real[s.bus].add(var, 1.0);
                }
                None => real[s.bus].rhs -= s.fixed[t],
            }
        }
        for b in &layout.batteries {
            if let Some(var) = b.dev.vars[t] {
                real[b.dev.bus].add(var, -1.0);
            }
        }
        for s in &layout.shapable {
            if let Some(var) = s.vars[t] {
                real[s.bus].add(var, -1.0);
            }
        }
        for load in &layout.loads {
            real[load.bus].rhs += load.p[t];
            reactive[load.bus].rhs += load.q[t];
        }
        let mut real_rows = Vec::with_capacity(nb);
        let mut reactive_rows = Vec::with_capacity(nb);
        for (b, (row, qrow)) in real.into_iter().zip(reactive).enumerate() {
            prog.layout.real_rhs[t][b] = row.rhs;
            prog.layout.reactive_rhs[t][b] = qrow.rhs;
            let bus_id = prog.layout.bus_ids[b];
            real_rows.push(prog.equality(row, format!("t{t} real balance bus {bus_id}")));
            if b == topo.root {
                reactive_rows.push(None);
            } else {
                reactive_rows.push(Some(prog.equality(qrow, format!("t{t} reactive balance bus {bus_id}"))));
            }
        }
        prog.layout.real_balance.push(real_rows);
        prog.layout.reactive_balance.push(reactive_rows);

        let mut drops = Vec::with_capacity(lines.len());
        for (li, line) in lines.iter().enumerate() {
            let (p, q, l) = (
                prog.layout.line_p[t][li],
                prog.layout.line_q[t][li],
                prog.layout.line_l[t][li],
            );
            let vj = prog.layout.bus_v[t][line.to].expect("non-root bus");
            let vi = prog.layout.bus_v[t][line.from];
            let mut row = Row::new();
            row.add(vj, 1.0)
                .add(p, 2.0 * line.r)
                .add(q, 2.0 * line.x)
                .add(l, -(line.r * line.r + line.x * line.x));
            match vi {
                Some(vi) => {
                    row.add(vi, -1.0);
                }
                None => row.rhs = V_ROOT,
            }
            drops.push(prog.equality(row, format!("t{t} voltage drop {}->{}", line.from_id, line.to_id)));

            // ||(2P, 2Q, l - v_i)|| <= l + v_i
            let a = scaling.map_or(1.0, |s| s[t][li]);
            let v_part = |coeff: f64| match vi {
                Some(vi) => Affine::var(vi, coeff / a),
                None => Affine {
                    coeffs: vec![],
                    constant: coeff * V_ROOT / a,
                },
            };
            let mut head = v_part(1.0);
            head.coeffs.push((l, a));
            let mut tail = v_part(-1.0);
            tail.coeffs.push((l, a));
            prog.cones.push(SecondOrderCone {
                components: vec![head, Affine::var(p, 2.0), Affine::var(q, 2.0), tail],
            });
        }
        prog.layout.voltage_drop.push(drops);

        for (b, bus) in net.buses.iter().enumerate() {
            if let Some(v) = prog.layout.bus_v[t][b] {
                prog.bound(v, bus.v_min, bus.v_max);
            }
        }
        for (li, line) in net.lines.iter().enumerate() {
            let l = prog.layout.line_l[t][li];
            prog.bound(l, f64::NEG_INFINITY, line.s_max * line.s_max);
        }
    }
    Ok(prog)
}
