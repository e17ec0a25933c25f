//! Realtime incentive design for Type-2 crowdsourcees.
//!
//! The operator wants at least `d_t` MW of extra supply and is willing to
//! spend between `b_min` and `b_max` dollars per hour on premiums. Each
//! crowdsourcee `i` is offered its nodal price `lambda_i` plus a premium
//! `lambda_a_i` for a quantity `u_i`. Paying `lambda_a_i * u_i` is bilinear;
//! substituting `y_i = lambda_a_i * u_i` turns the design problem into an LP,
//! solved here with a simplex method so the answer is a vertex.

use std::fmt::Write as _;

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::grid::BusId;

/// Smallest premium payment in $/h; stands in for the strict `y > 0`.
pub const DEFAULT_Y_FLOOR: f64 = 0.01;
/// Quantities at or below this many MW carry no recovered price.
pub const PRICE_EPS: f64 = 1e-9;
/// Default premium cap as a multiple of the highest nodal price in a round.
pub const LAMBDA_A_MAX_FACTOR: f64 = 10.0;
/// Largest number of grid points the brute-force search will visit.
pub const ORACLE_MAX_POINTS: u64 = 50_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IncentiveError {
    #[error("no participants but {0} MW is needed")]
    NoParticipants(f64),
    #[error("demand {demand} MW exceeds total capacity {capacity} MW")]
    DemandUnsatisfiable { demand: f64, capacity: f64 },
    #[error("budget floor {b_min} is unreachable; at most {reachable} can be paid")]
    BudgetUnreachable { b_min: f64, reachable: f64 },
    #[error("invalid round: {0}")]
    Invalid(String),
    #[error("incentive program is infeasible")]
    Infeasible,
    #[error("incentive program is unbounded")]
    Unbounded,
    #[error("brute-force search needs {0} points, above the limit")]
    TooLarge(u64),
}

/// Historic preferences of one crowdsourcee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdsourceeProfile {
    pub id: BusId,
    /// Willingness weight on the payment; larger means costlier to engage.
    pub eta: f64,
    /// Weight on deviating from the equilibrium setpoint, $/MWh.
    pub zeta: f64,
    /// Allowed quantity range in MW.
    pub u_bounds: [f64; 2],
    /// Running estimate of the acceptance rate, in [0, 1].
    pub acceptance_stats: f64,
    /// Weight `eta` is derived from on every update.
    pub eta_base: f64,
}

impl CrowdsourceeProfile {
    pub fn new(id: BusId, eta: f64, zeta: f64, u_bounds: [f64; 2]) -> Self {
        Self {
            id,
            eta,
            zeta,
            u_bounds,
            acceptance_stats: 1.0,
            eta_base: eta,
        }
    }

    fn check(&self) -> Result<(), IncentiveError> {
        let [lo, hi] = self.u_bounds;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(IncentiveError::Invalid(format!(
                "participant {} has bounds [{lo}, {hi}]",
                self.id
            )));
        }
        if !(self.eta >= 0.0 && self.zeta >= 0.0) {
            return Err(IncentiveError::Invalid(format!(
                "participant {} has negative weights",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub profile: CrowdsourceeProfile,
    /// Nodal price at the participant's bus, $/MWh.
    pub lambda: f64,
    /// Equilibrium selling setpoint, MW.
    pub u_eq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncentiveRound {
    pub t: usize,
    /// Supply shortfall in MW; negative values (surplus) are treated as zero.
    pub d_t: f64,
    /// `[b_min, b_max]` in $/h.
    pub budget: [f64; 2],
    pub participants: Vec<Participant>,
    pub y_floor: f64,
    /// Premium cap in $/MWh; defaults to ten times the highest nodal price.
    pub lambda_a_max: Option<f64>,
}

impl IncentiveRound {
    pub fn new(t: usize, d_t: f64, budget: [f64; 2], participants: Vec<Participant>) -> Self {
        Self {
            t,
            d_t,
            budget,
            participants,
            y_floor: DEFAULT_Y_FLOOR,
            lambda_a_max: None,
        }
    }

    pub fn demand(&self) -> f64 {
        self.d_t.max(0.0)
    }

    pub fn effective_lambda_a_max(&self) -> f64 {
        self.lambda_a_max.unwrap_or_else(|| {
            let top = self.participants.iter().map(|p| p.lambda).fold(0.0, f64::max);
            LAMBDA_A_MAX_FACTOR * top
        })
    }

    /// Upper end of participant `i`'s payment at quantity `u`. Participants
    /// allowed to sell nothing may still receive the floor payment at
    /// `u = 0`, otherwise they could never be left out of a round.
    fn y_upper(&self, i: usize, u: f64, cap: f64) -> f64 {
        let p = &self.participants[i].profile;
        let slack = if p.u_bounds[0] <= 0.0 { self.y_floor } else { 0.0 };
        cap * u + slack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpStats {
    pub variables: usize,
    pub epigraph_rows: usize,
    pub budget_rows: usize,
    pub demand_rows: usize,
    /// Rows bounding each payment by the premium cap.
    pub cap_rows: usize,
}

/// A validated round ready to be solved.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub round: IncentiveRound,
    pub lambda_a_max: f64,
    pub stats: LpStats,
}

/// Validates a round and fixes the LP's shape.
pub fn build_ces_id(round: &IncentiveRound) -> Result<LinearProgram, IncentiveError> {
    let [b_min, b_max] = round.budget;
    if !(0.0 <= b_min && b_min <= b_max) {
        return Err(IncentiveError::Invalid(format!("budget [{b_min}, {b_max}]")));
    }
    if !(round.y_floor > 0.0) {
        return Err(IncentiveError::Invalid("payment floor must be positive".into()));
    }
    let demand = round.demand();
    if round.participants.is_empty() && demand > 0.0 {
        return Err(IncentiveError::NoParticipants(demand));
    }
    for p in &round.participants {
        p.profile.check()?;
        if !p.lambda.is_finite() || !p.u_eq.is_finite() {
            return Err(IncentiveError::Invalid(format!("participant {} has non-finite data", p.profile.id)));
        }
    }
    let capacity: f64 = round.participants.iter().map(|p| p.profile.u_bounds[1]).sum();
    if demand > capacity {
        return Err(IncentiveError::DemandUnsatisfiable { demand, capacity });
    }
    let cap = round.effective_lambda_a_max();
    let reachable: f64 = (0..round.participants.len())
        .map(|i| round.y_upper(i, round.participants[i].profile.u_bounds[1], cap))
        .sum();
    if b_min > reachable {
        return Err(IncentiveError::BudgetUnreachable { b_min, reachable });
    }
    let n = round.participants.len();
    Ok(LinearProgram {
        round: round.clone(),
        lambda_a_max: cap,
        stats: LpStats {
            variables: 3 * n,
            epigraph_rows: 2 * n,
            budget_rows: 2,
            demand_rows: 1,
            cap_rows: n,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub id: BusId,
    /// MW.
    pub u_a: f64,
    /// $/h.
    pub y: f64,
    /// $/MWh.
    pub lambda_a: f64,
    /// Nodal price plus premium, $/MWh.
    pub price: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncentiveSolution {
    pub t: usize,
    pub allocations: Vec<Allocation>,
    pub objective: f64,
    pub status: String,
}

impl IncentiveSolution {
    pub fn total_payment(&self) -> f64 {
        self.allocations.iter().map(|a| a.y).sum()
    }

    pub fn total_quantity(&self) -> f64 {
        self.allocations.iter().map(|a| a.u_a).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution serializes")
    }
}

/// Solves the linearized program and recovers premiums.
///
/// `tol` bounds how far the returned point may sit outside the budget and
/// demand rows before the answer is rejected as inaccurate.
pub fn solve_ces_id(lp: &LinearProgram, tol: f64) -> Result<IncentiveSolution, IncentiveError> {
    let round = &lp.round;
    let [b_min, b_max] = round.budget;
    if round.participants.is_empty() {
        return if b_min > 0.0 {
            Err(IncentiveError::Infeasible)
        } else {
            Ok(IncentiveSolution {
                t: round.t,
                allocations: vec![],
                objective: 0.0,
                status: "optimal".into(),
            })
        };
    }
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(round.participants.len());
    for p in &round.participants {
        let eta = p.profile.eta;
        let u = problem.add_var(eta * p.lambda, (p.profile.u_bounds[0], p.profile.u_bounds[1]));
        let y = problem.add_var(eta, (round.y_floor, f64::INFINITY));
        let s = problem.add_var(p.profile.zeta, (0.0, f64::INFINITY));
        vars.push((u, y, s));
    }
    for (p, (u, _, s)) in round.participants.iter().zip(&vars) {
        problem.add_constraint(expr(&[(*s, 1.0), (*u, -1.0)]), ComparisonOp::Ge, -p.u_eq);
        problem.add_constraint(expr(&[(*s, 1.0), (*u, 1.0)]), ComparisonOp::Ge, p.u_eq);
    }
    let ys: Vec<_> = vars.iter().map(|(_, y, _)| (*y, 1.0)).collect();
    problem.add_constraint(expr(&ys), ComparisonOp::Ge, b_min);
    problem.add_constraint(expr(&ys), ComparisonOp::Le, b_max);
    let us: Vec<_> = vars.iter().map(|(u, _, _)| (*u, 1.0)).collect();
    problem.add_constraint(expr(&us), ComparisonOp::Ge, round.demand());
    for (i, (u, y, _)) in vars.iter().enumerate() {
        // y - cap u <= floor slack
        let slack = round.y_upper(i, 0.0, lp.lambda_a_max);
        problem.add_constraint(expr(&[(*y, 1.0), (*u, -lp.lambda_a_max)]), ComparisonOp::Le, slack);
    }
    let solution = problem.solve().map_err(|e| match e {
        minilp::Error::Infeasible => IncentiveError::Infeasible,
        minilp::Error::Unbounded => IncentiveError::Unbounded,
    })?;

    let u: Vec<f64> = vars
        .iter()
        .zip(&round.participants)
        .map(|((u, _, _), p)| solution[*u].clamp(p.profile.u_bounds[0], p.profile.u_bounds[1]))
        .collect();
    let y: Vec<f64> = vars.iter().map(|(_, y, _)| solution[*y].max(round.y_floor)).collect();
    let lambda_a = recover_prices(&y, &u, PRICE_EPS);
    let allocations: Vec<Allocation> = round
        .participants
        .iter()
        .enumerate()
        .map(|(i, p)| Allocation {
            id: p.profile.id,
            u_a: u[i],
            y: y[i],
            lambda_a: lambda_a[i],
            price: p.lambda + lambda_a[i],
            deviation: (u[i] - p.u_eq).abs(),
        })
        .collect();
    let objective = round
        .participants
        .iter()
        .zip(&allocations)
        .map(|(p, a)| p.profile.eta * (p.lambda * a.u_a + a.y) + p.profile.zeta * a.deviation)
        .sum();
    let sol = IncentiveSolution {
        t: round.t,
        allocations,
        objective,
        status: "optimal".into(),
    };
    let paid = sol.total_payment();
    if paid < b_min - tol || paid > b_max + tol || sol.total_quantity() < round.demand() - tol {
        return Err(IncentiveError::Infeasible);
    }
    Ok(sol)
}

fn expr(terms: &[(minilp::Variable, f64)]) -> LinearExpr {
    let mut e = LinearExpr::empty();
    for (v, c) in terms {
        e.add(*v, *c);
    }
    e
}

/// `lambda_a_i = y_i / u_i` where `u_i > eps`, otherwise zero.
pub fn recover_prices(y: &[f64], u: &[f64], eps: f64) -> Vec<f64> {
    y.iter()
        .zip(u)
        .map(|(y, u)| if *u > eps { y / u } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub objective: f64,
    pub u: Vec<f64>,
    pub lambda_a: Vec<f64>,
}

/// Exhaustive search of the original bilinear problem.
///
/// Quantities run over a grid of spacing `grid_step` inside each
/// participant's bounds. For each quantity vector the best premiums are
/// found exactly: the objective is linear in the payments `lambda_a_i u_i`,
/// so the cheapest way to meet the budget floor fills the participants with
/// the smallest `eta` first. Returns `Ok(None)` when no grid point is feasible.
pub fn brute_force_oracle(round: &IncentiveRound, grid_step: f64) -> Result<Option<OracleResult>, IncentiveError> {
    if round.participants.len() > 3 {
        return Err(IncentiveError::TooLarge(u64::MAX));
    }
    if !(grid_step > 0.0) {
        return Err(IncentiveError::Invalid("grid step must be positive".into()));
    }
    let axes: Vec<Vec<f64>> = round
        .participants
        .iter()
        .map(|p| {
            let [lo, hi] = p.profile.u_bounds;
            let steps = ((hi - lo) / grid_step + 1e-9).floor() as usize;
            let mut axis: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * grid_step).collect();
            if hi - axis[steps] > 1e-12 {
                axis.push(hi);
            }
            axis
        })
        .collect();
    let points = axes.iter().map(|a| a.len() as u64).product::<u64>();
    if points > ORACLE_MAX_POINTS {
        return Err(IncentiveError::TooLarge(points));
    }
    let cap = round.effective_lambda_a_max();
    let demand = round.demand();
    let mut order: Vec<usize> = (0..round.participants.len()).collect();
    order.sort_by(|a, b| {
        round.participants[*a]
            .profile
            .eta
            .total_cmp(&round.participants[*b].profile.eta)
    });

    let mut best: Option<OracleResult> = None;
    let mut idx = vec![0usize; axes.len()];
    let mut u = vec![0.0; axes.len()];
    let mut y = vec![0.0; axes.len()];
    'grid: loop {
        for (k, i) in idx.iter().enumerate() {
            u[k] = axes[k][*i];
        }
        if u.iter().sum::<f64>() >= demand - 1e-9 {
            if let Some(obj) = best_payments(round, cap, &order, &u, &mut y) {
                if best.as_ref().is_none_or(|b| obj < b.objective - 1e-12) {
                    best = Some(OracleResult {
                        objective: obj,
                        u: u.clone(),
                        lambda_a: recover_prices(&y, &u, PRICE_EPS),
                    });
                }
            }
        }
        for k in 0..idx.len() {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                continue 'grid;
            }
            idx[k] = 0;
        }
        break;
    }
    Ok(best)
}

fn best_payments(round: &IncentiveRound, cap: f64, order: &[usize], u: &[f64], y: &mut [f64]) -> Option<f64> {
    let [b_min, b_max] = round.budget;
    let mut total = 0.0;
    for i in 0..u.len() {
        let hi = round.y_upper(i, u[i], cap);
        if hi < round.y_floor - 1e-12 {
            return None;
        }
        y[i] = round.y_floor;
        total += y[i];
    }
    if total > b_max + 1e-12 {
        return None;
    }
    for &i in order {
        if total >= b_min {
            break;
        }
        let room = round.y_upper(i, u[i], cap) - y[i];
        let add = room.min(b_min - total);
        y[i] += add;
        total += add;
    }
    if total < b_min - 1e-9 {
        return None;
    }
    Some(
        round
            .participants
            .iter()
            .enumerate()
            .map(|(i, p)| p.profile.eta * (p.lambda * u[i] + y[i]) + p.profile.zeta * (u[i] - p.u_eq).abs())
            .sum(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscalationPolicy {
    pub gamma: f64,
    pub max_rounds: usize,
}

impl Default for EscalationPolicy {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            max_rounds: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Escalation {
    Raised { lambda_a: f64 },
    Exhausted,
}

/// Raises a rejected premium by `gamma`, never above `cap` (the premium at
/// which the round's total payment would reach `b_max`).
pub fn escalate(lambda_a: f64, cap: f64, policy: &EscalationPolicy, round_index: usize) -> Escalation {
    if round_index >= policy.max_rounds || lambda_a >= cap {
        return Escalation::Exhausted;
    }
    Escalation::Raised {
        lambda_a: (lambda_a * policy.gamma).min(cap),
    }
}

/// Largest premium participant `i` can be offered at quantity `u_i` so that
/// total payments stay within `b_max`, given everyone else's payments.
pub fn budget_cap(b_max: f64, others_paid: f64, u_i: f64) -> f64 {
    if u_i <= PRICE_EPS {
        return 0.0;
    }
    ((b_max - others_paid) / u_i).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileUpdate {
    /// Weight of the newest response in the running acceptance rate.
    pub alpha: f64,
    /// Keeps `eta` finite for users who never accept.
    pub eps_h: f64,
}

impl Default for ProfileUpdate {
    fn default() -> Self {
        Self { alpha: 0.2, eps_h: 0.1 }
    }
}

/// Folds one response into a profile's acceptance rate and recomputes
/// `eta = eta_base / (rate + eps_h)`.
pub fn update_profile(profile: &CrowdsourceeProfile, accepted: bool, params: &ProfileUpdate) -> CrowdsourceeProfile {
    let hit = if accepted { 1.0 } else { 0.0 };
    let stats = ((1.0 - params.alpha) * profile.acceptance_stats + params.alpha * hit).clamp(0.0, 1.0);
    CrowdsourceeProfile {
        acceptance_stats: stats,
        eta: profile.eta_base / (stats + params.eps_h),
        ..profile.clone()
    }
}

/// Incentive trajectories as CSV, one row per participant and period.
pub fn incentives_csv(solutions: &[IncentiveSolution]) -> String {
    let mut out = String::from("t,crowdsourcee,u_a_mw,y_per_h,lambda_a,price,deviation\n");
    for s in solutions {
        for a in &s.allocations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.t, a.id, a.u_a, a.y, a.lambda_a, a.price, a.deviation
            );
        }
    }
    out
}
