//! Session reports and CSV exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ces_chain::tx::{to_dollars, Micros};
use ces_chain::Hash32;
use ces_core::grid::BusId;
use ces_core::incentives::{incentives_csv, IncentiveSolution};
use ces_core::opf::{OpfSolution, OpfStatus};
use ces_core::Scenario;
use serde::{Deserialize, Serialize};

use crate::session::{MarketSession, SettlementRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAheadReport {
    pub status: OpfStatus,
    /// Generation cost, $.
    pub objective: f64,
    pub contracts: usize,
    pub generation_mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub period: usize,
    pub d_t: f64,
    pub rounds: usize,
    pub offers: usize,
    pub accepted_offers: usize,
    pub accepted_mw: f64,
    pub fallback_mw: f64,
    pub shortfall_mw: f64,
    pub incremental_losses_mw: f64,
    /// Accepted supply plus fallback reaches `d_t`, or a shortfall was declared.
    pub covered: bool,
    /// Nodal-price part of the accepted offers, $.
    pub energy_cost: f64,
    /// Premium part of the accepted offers, $.
    pub premium_cost: f64,
    /// Extra generator energy at its fallback price, $.
    pub fallback_cost: f64,
    /// Premium actually settled on the ledger for this period, $.
    pub premium_settled: f64,
    pub budget: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incentive_error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub demand_mwh: f64,
    pub accepted_mwh: f64,
    pub fallback_mwh: f64,
    pub shortfall_mwh: f64,
    pub offers: usize,
    pub accepted_offers: usize,
    pub premium_settled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub blocks: u64,
    pub transactions: usize,
    pub rejected: usize,
    pub tip_hash: Hash32,
    pub state_hash: Hash32,
}

/// Double-entry view of the operator budget, micro-dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conservation {
    pub deposits: Micros,
    pub operator_balance: Micros,
    pub paid_out: Micros,
    pub settled: Micros,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub seed: u64,
    pub buses: usize,
    pub horizon: usize,
    pub dt: f64,
    pub base_mva: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub day_ahead: Option<DayAheadReport>,
    pub periods: Vec<PeriodReport>,
    pub totals: Totals,
    pub ledger: LedgerSummary,
    pub conservation: Conservation,
    pub settlements: Vec<SettlementRecord>,
}

impl SessionReport {
    pub fn from_session(session: &MarketSession) -> Self {
        let scenario = session.scenario();
        let dt = scenario.dt;
        let eps = session.config().quantity_eps;
        let state = session.ledger().state();
        let day_ahead = session.day_ahead().map(|da| DayAheadReport {
            status: da.solution.status,
            objective: da.solution.objective,
            contracts: da.contracts.len(),
            generation_mwh: da
                .solution
                .schedule
                .generators
                .values()
                .flat_map(|g| g.p.iter())
                .sum::<f64>()
                * da.solution.base_mva
                * dt,
        });
        let periods: Vec<PeriodReport> = session
            .periods()
            .iter()
            .map(|p| {
                let accepted: Vec<_> = p.accepted_offers().collect();
                let fallback_cost: f64 = p
                    .fallback
                    .adjustments
                    .iter()
                    .map(|(g, mw)| mw * dt * p.fallback.prices.get(g).copied().unwrap_or(0.0))
                    .sum();
                PeriodReport {
                    period: p.period,
                    d_t: p.d_t,
                    rounds: p.rounds.len(),
                    offers: p.offers().count(),
                    accepted_offers: accepted.len(),
                    accepted_mw: p.accepted_mw,
                    fallback_mw: tidy(p.fallback_mw()),
                    shortfall_mw: p.fallback.shortfall_mw,
                    incremental_losses_mw: p.fallback.incremental_losses_mw,
                    covered: p.accepted_mw + p.fallback_mw() >= p.d_t - eps || p.fallback.shortfall_mw > 0.0,
                    energy_cost: tidy(accepted.iter().map(|o| o.lambda * o.quantity_mw * dt).sum()),
                    premium_cost: tidy(accepted.iter().map(|o| o.premium * o.quantity_mw * dt).sum()),
                    fallback_cost: tidy(fallback_cost),
                    premium_settled: to_dollars(state.premium_paid.get(&(p.period as u32)).copied().unwrap_or(0)),
                    budget: p.budget,
                    incentive_error: p.incentive_error.clone(),
                }
            })
            .collect();
        let totals = Totals {
            demand_mwh: periods.iter().map(|p| p.d_t * dt).sum(),
            accepted_mwh: periods.iter().map(|p| p.accepted_mw * dt).sum(),
            fallback_mwh: periods.iter().map(|p| p.fallback_mw * dt).sum(),
            shortfall_mwh: periods.iter().map(|p| p.shortfall_mw * dt).sum(),
            offers: periods.iter().map(|p| p.offers).sum(),
            accepted_offers: periods.iter().map(|p| p.accepted_offers).sum(),
            premium_settled: to_dollars(state.total_premium()),
        };
        let ledger = session.ledger();
        let transactions = ledger.blocks().iter().map(|b| b.txs.len()).sum();
        let rejected = (0..ledger.len())
            .filter_map(|h| ledger.receipts(h))
            .flatten()
            .filter(|r| !r.applied())
            .count();
        let settled: Micros = session.settlements().iter().map(|s| s.amount).sum();
        SessionReport {
            seed: session.config().seed,
            buses: scenario.network.buses.len(),
            horizon: scenario.horizon,
            dt,
            base_mva: scenario.network.base_mva,
            day_ahead,
            periods,
            totals,
            ledger: LedgerSummary {
                blocks: ledger.len(),
                transactions,
                rejected,
                tip_hash: ledger.tip_hash(),
                state_hash: ledger.state_hash(),
            },
            conservation: Conservation {
                deposits: session.deposits(),
                operator_balance: state.balance(ces_chain::OPERATOR),
                paid_out: session.paid_out(),
                settled,
                holds: session.conserves_money(),
            },
            settlements: session.settlements().to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per period.
    pub fn periods_csv(&self) -> String {
        let mut out = String::from(
            "t,d_t_mw,rounds,offers,accepted_offers,accepted_mw,fallback_mw,shortfall_mw,energy_cost,premium_cost,fallback_cost,premium_settled\n",
        );
        for p in &self.periods {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                p.period,
                p.d_t,
                p.rounds,
                p.offers,
                p.accepted_offers,
                p.accepted_mw,
                p.fallback_mw,
                p.shortfall_mw,
                p.energy_cost,
                p.premium_cost,
                p.fallback_cost,
                p.premium_settled
            );
        }
        out
    }
}

/// Folds `-0.0` (the sum of nothing) into `0.0` for tidy output.
fn tidy(x: f64) -> f64 {
    x + 0.0
}

/// Every incentive program solved during the session, as CSV.
pub fn session_incentives_csv(session: &MarketSession) -> String {
    let solutions: Vec<IncentiveSolution> = session.periods().iter().flat_map(|p| p.solutions.clone()).collect();
    incentives_csv(&solutions)
}

/// Every offer issued during the session with its answer, as CSV.
pub fn offers_csv(session: &MarketSession) -> String {
    let mut out = String::from("t,round,mode,offer_id,bus,quantity_mw,lambda,premium,price,accepted\n");
    for p in session.periods() {
        for r in &p.rounds {
            let mode = serde_json::to_value(r.mode).expect("mode serializes");
            for o in &r.offers {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    p.period,
                    r.index,
                    mode.as_str().unwrap_or_default(),
                    o.offer_id,
                    o.bus,
                    o.quantity_mw,
                    o.lambda,
                    o.premium,
                    o.price,
                    o.accepted == Some(true)
                );
            }
        }
    }
    out
}

/// Per-bus device stack in MW, one row per bus and period: generation,
/// solar output, battery power (positive while charging), shapable and
/// fixed load, and the bus price.
pub fn bus_stack_csv(scenario: &Scenario, sol: &OpfSolution) -> String {
    #[derive(Default, Clone)]
    struct Row {
        generation: f64,
        solar: f64,
        battery: f64,
        shapable: f64,
        load: f64,
    }
    let base = sol.base_mva;
    let mut rows: BTreeMap<(usize, BusId), Row> = BTreeMap::new();
    let mut add = |bus: BusId, p: &[f64], f: fn(&mut Row) -> &mut f64| {
        for (t, v) in p.iter().enumerate() {
            *f(rows.entry((t, bus)).or_default()) += v * base;
        }
    };
    for g in sol.schedule.generators.values() {
        add(g.bus, &g.p, |r| &mut r.generation);
    }
    for s in sol.schedule.solar.values() {
        add(s.bus, &s.p, |r| &mut r.solar);
    }
    for b in sol.schedule.batteries.values() {
        add(b.bus, &b.p, |r| &mut r.battery);
    }
    for s in sol.schedule.shapable.values() {
        add(s.bus, &s.p, |r| &mut r.shapable);
    }
    for l in sol.schedule.uncontrollable.values() {
        add(l.bus, &l.p, |r| &mut r.load);
    }
    let prices = sol.dlmp.as_ref();
    let mut out = String::from("t,bus,generation_mw,solar_mw,battery_mw,shapable_mw,load_mw,dlmp\n");
    for t in 0..sol.horizon {
        for bus in scenario.network.buses.iter().map(|b| b.id) {
            let r = rows.get(&(t, bus)).cloned().unwrap_or_default();
            let price = prices.and_then(|p| p.at(t, bus)).map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{t},{bus},{},{},{},{},{},{price}",
                r.generation, r.solar, r.battery, r.shapable, r.load
            );
        }
    }
    out
}
