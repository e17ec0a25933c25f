//! The blockchain-assisted operation loop.
//!
//! A session owns the ledger and drives it through one planning horizon:
//!
//! 1. genesis enrolls every party and records Type-2 preferences;
//! 2. [`MarketSession::run_day_ahead`] clears the day-ahead market and writes
//!    one setpoint contract per generator or Type-1 party and period;
//! 3. each realtime period opens an incentive round for the shortfall `d_t`,
//!    collects responses, escalates rejections, and hands what is left to
//!    the generators;
//! 4. [`MarketSession::reconcile`] pays out metered deliveries.
//!
//! Every step is a ledger transaction ordered by the simulated PBFT service.
//! Realtime periods are an explicit state machine ([`MarketSession::open_period`],
//! [`MarketSession::respond`], [`MarketSession::close_round`]) so that human
//! participants can answer offers between the steps; headless runs use
//! [`MarketSession::run_realtime_period`], where simulated agents answer.

use std::collections::{BTreeMap, BTreeSet};

use ces_chain::codec::CodecError;
use ces_chain::ordering::{OrderingError, OrderingService};
use ces_chain::state::{OfferStatus, Outcome};
use ces_chain::tx::{settlement_amount, Micros, Preferences, Role};
use ces_chain::{EnrollmentAuthority, Hash32, KeyPair, Ledger, Obligation, Receipt, Rejection, Transaction, TxBody, OPERATOR};
use ces_core::agents::{Agent, AgentError, OfferTerms};
use ces_core::grid::{BusId, DeviceKind, GridError, OwnerClass};
use ces_core::incentives::{
    budget_cap, build_ces_id, escalate, solve_ces_id, update_profile, CrowdsourceeProfile, Escalation, IncentiveRound,
    IncentiveSolution, Participant,
};
use ces_core::opf::{equilibrium_setpoints, solve_scenario_with, OpfError, OpfSolution, PriceVector, Setpoints};
use ces_core::Scenario;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SessionConfig;
use crate::events::{EventKind, EventLog, RoundStatus, SessionEvent};
use crate::fallback::{fallback_dispatch, FallbackOutcome};

/// Ledger name of the party owning the crowdsourcee devices at `bus`.
pub fn bus_party(bus: BusId) -> String {
    format!("bus-{bus}")
}

/// Attempts to get a transaction ordered before giving up.
const MAX_SUBMISSIONS: usize = 8;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Scenario(#[from] GridError),
    #[error("day-ahead market failed: {0}")]
    DayAhead(#[source] OpfError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error("transaction {tx_id} ({kind}) was rejected: {reason:?}")]
    Rejected {
        tx_id: String,
        kind: String,
        reason: Rejection,
    },
    #[error("transaction {0} was not ordered after {MAX_SUBMISSIONS} submissions")]
    NotOrdered(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("unknown participant {0}")]
    UnknownParty(String),
    #[error("out of sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyInfo {
    pub role: Role,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bus: Option<BusId>,
}

/// The committed result of one transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxAck {
    pub tx_id: String,
    pub height: u64,
    pub block_hash: Hash32,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl TxAck {
    pub fn rejection(&self) -> Option<&Rejection> {
        match &self.outcome {
            Outcome::Rejected { reason } => Some(reason),
            Outcome::Applied { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractInfo {
    pub contract_id: String,
    pub party: String,
    pub period: usize,
    /// MWh; negative for a party that withdraws on balance.
    pub quantity: f64,
    /// $/MWh.
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAhead {
    pub solution: OpfSolution,
    pub dlmp: PriceVector,
    pub setpoints: BTreeMap<BusId, Setpoints>,
    pub contracts: Vec<ContractInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundMode {
    /// First offers of the period, straight from the incentive program.
    Initial,
    /// The program re-solved for what is still missing after most offers
    /// were rejected.
    Resolve,
    /// Rejected premiums raised by the escalation factor.
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssuedOffer {
    pub offer_id: String,
    pub bus: BusId,
    pub party: String,
    pub quantity_mw: f64,
    /// Nodal price, $/MWh.
    pub lambda: f64,
    /// Incentive premium, $/MWh.
    pub premium: f64,
    /// `lambda + premium`.
    pub price: f64,
    /// Premium payment rate `premium * quantity`, $/h.
    pub payment: f64,
    pub expiry: u64,
    /// `None` until answered; unanswered offers expire as rejections.
    pub accepted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_height: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: usize,
    pub mode: RoundMode,
    pub opened_at: u64,
    pub expiry: u64,
    pub closed: bool,
    pub offers: Vec<IssuedOffer>,
}

/// Everything that happened in one realtime period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodOutcome {
    pub period: usize,
    /// Shortfall to cover, MW.
    pub d_t: f64,
    pub budget: [f64; 2],
    /// Every incentive program solved this period, in order.
    pub solutions: Vec<IncentiveSolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incentive_error: Option<String>,
    pub rounds: Vec<RoundRecord>,
    pub accepted_mw: f64,
    /// Premium payment rate of the accepted offers, $/h.
    pub accepted_payment: f64,
    pub fallback: FallbackOutcome,
    pub closed: bool,
}

impl PeriodOutcome {
    fn new(period: usize, d_t: f64, budget: [f64; 2]) -> Self {
        Self {
            period,
            d_t,
            budget,
            solutions: Vec::new(),
            incentive_error: None,
            rounds: Vec::new(),
            accepted_mw: 0.0,
            accepted_payment: 0.0,
            fallback: FallbackOutcome {
                period,
                ..FallbackOutcome::default()
            },
            closed: false,
        }
    }

    pub fn offers(&self) -> impl Iterator<Item = &IssuedOffer> {
        self.rounds.iter().flat_map(|r| r.offers.iter())
    }

    pub fn accepted_offers(&self) -> impl Iterator<Item = &IssuedOffer> {
        self.offers().filter(|o| o.accepted == Some(true))
    }

    pub fn fallback_mw(&self) -> f64 {
        self.fallback.dispatched_mw()
    }

    fn accepted_buses(&self) -> BTreeSet<BusId> {
        self.accepted_offers().map(|o| o.bus).collect()
    }

    fn open_round(&mut self) -> Option<&mut RoundRecord> {
        self.rounds.last_mut().filter(|r| !r.closed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub tx_id: String,
    pub party: String,
    pub amount: Micros,
    pub items: Vec<Obligation>,
    pub height: u64,
}

/// One crowdsourced-energy session over a scenario's horizon.
#[derive(Debug)]
pub struct MarketSession {
    scenario: Scenario,
    config: SessionConfig,
    keys: BTreeMap<String, KeyPair>,
    parties: BTreeMap<String, PartyInfo>,
    ledger: Ledger,
    ordering: OrderingService,
    events: EventLog,
    now: u64,
    tx_seq: u64,
    agents: BTreeMap<BusId, Agent>,
    manual: BTreeSet<BusId>,
    profiles: BTreeMap<BusId, CrowdsourceeProfile>,
    day_ahead: Option<DayAhead>,
    periods: Vec<PeriodOutcome>,
    current: Option<PeriodOutcome>,
    settlements: Vec<SettlementRecord>,
    deposits: Micros,
}

fn agent_seed(seed: u64, bus: BusId) -> u64 {
    let h = Hash32::digest_parts(&[&seed.to_be_bytes(), b"agent", &(bus as u64).to_be_bytes()]);
    u64::from_be_bytes(h.0[..8].try_into().expect("8 bytes"))
}

/// MW a Type-2 bus could sell at `t`: all its solar, full battery discharge
/// and its shapable load's whole reference consumption.
pub fn selling_capacity(scenario: &Scenario, bus: BusId, t: usize) -> f64 {
    let mut cap = 0.0;
    for d in scenario.network.devices.iter().filter(|d| d.bus == bus && d.owner_class == OwnerClass::Type2) {
        cap += match &d.kind {
            DeviceKind::Solar { profile } => profile[t],
            DeviceKind::Battery { p_cap, .. } => *p_cap,
            DeviceKind::Shapable {
                energy_demand, window, ..
            } => {
                let len = window[1].saturating_sub(window[0]);
                if len > 0 && (window[0]..window[1]).contains(&t) {
                    energy_demand / (len as f64 * scenario.dt)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
    }
    cap * scenario.network.base_mva
}

impl MarketSession {
    /// Validates the scenario, enrolls every party and commits the genesis blocks.
    pub fn new(scenario: Scenario, config: SessionConfig) -> Result<Self, SessionError> {
        scenario.validate()?;
        let authority = EnrollmentAuthority::from_seed(config.seed);
        let type2: BTreeSet<BusId> = scenario.type2_crowdsourcees().into_iter().collect();
        let mut parties = BTreeMap::new();
        for d in &scenario.network.devices {
            match (&d.kind, d.owner_class) {
                (DeviceKind::Generator { .. }, _) => {
                    parties.insert(
                        d.id.clone(),
                        PartyInfo {
                            role: Role::Generator,
                            bus: Some(d.bus),
                        },
                    );
                }
                (DeviceKind::Uncontrollable { .. }, _) | (_, OwnerClass::Utility) => {}
                _ => {
                    let role = if type2.contains(&d.bus) { Role::Type2 } else { Role::Type1 };
                    parties.insert(bus_party(d.bus), PartyInfo { role, bus: Some(d.bus) });
                }
            }
        }
        let mut keys: BTreeMap<String, KeyPair> = parties.keys().map(|p| (p.clone(), authority.issue(p))).collect();
        keys.insert(OPERATOR.to_string(), authority.issue(OPERATOR));

        let mut agents = BTreeMap::new();
        for &bus in &type2 {
            let spec = scenario.agents.get(&bus).unwrap_or(&config.default_agent);
            agents.insert(bus, Agent::from_spec(spec, agent_seed(config.seed, bus))?);
        }
        let mut session = Self {
            ordering: OrderingService::new(config.ordering.clone()),
            scenario,
            config,
            keys,
            parties,
            ledger: Ledger::new(),
            events: EventLog::default(),
            now: 0,
            tx_seq: 0,
            agents,
            manual: BTreeSet::new(),
            profiles: BTreeMap::new(),
            day_ahead: None,
            periods: Vec::new(),
            current: None,
            settlements: Vec::new(),
            deposits: 0,
        };
        session.genesis()?;
        Ok(session)
    }

    fn genesis(&mut self) -> Result<(), SessionError> {
        let operator_key = self.keys[OPERATOR].public_key();
        let mut txs = vec![self.sign(
            OPERATOR,
            TxBody::Enroll {
                party: OPERATOR.into(),
                role: Role::Operator,
                public_key: operator_key,
            },
        )?];
        let parties: Vec<(String, Role)> = self.parties.iter().map(|(p, i)| (p.clone(), i.role)).collect();
        for (party, role) in &parties {
            let public_key = self.keys[party].public_key();
            txs.push(self.sign(
                OPERATOR,
                TxBody::Enroll {
                    party: party.clone(),
                    role: *role,
                    public_key,
                },
            )?);
        }
        self.commit_expecting(txs)?;

        let mut prefs = Vec::new();
        for (party, info) in self.parties.clone() {
            let (Role::Type2, Some(bus)) = (info.role, info.bus) else { continue };
            let peak = (0..self.scenario.horizon)
                .map(|t| selling_capacity(&self.scenario, bus, t))
                .fold(0.0, f64::max);
            let preferences = Preferences {
                u_min: 0.0,
                u_max: peak * self.scenario.dt,
                eta: Some(self.config.default_eta),
                zeta: Some(self.config.default_zeta),
            };
            prefs.push(self.sign(
                &party,
                TxBody::PreferenceUpdate {
                    owner: party.clone(),
                    preferences,
                },
            )?);
            self.profiles.insert(
                bus,
                CrowdsourceeProfile::new(bus, self.config.default_eta, self.config.default_zeta, [0.0, peak]),
            );
        }
        self.commit_expecting(prefs)?;
        Ok(())
    }

    // ---- accessors -------------------------------------------------------

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn events(&self) -> &[SessionEvent] {
        self.events.all()
    }

    pub fn events_since(&self, after: u64) -> &[SessionEvent] {
        self.events.since(after)
    }

    pub fn last_event_id(&self) -> u64 {
        self.events.last_id()
    }

    pub fn parties(&self) -> &BTreeMap<String, PartyInfo> {
        &self.parties
    }

    pub fn key(&self, party: &str) -> Option<&KeyPair> {
        self.keys.get(party)
    }

    pub fn day_ahead(&self) -> Option<&DayAhead> {
        self.day_ahead.as_ref()
    }

    /// Closed periods, in order.
    pub fn periods(&self) -> &[PeriodOutcome] {
        &self.periods
    }

    /// The period whose rounds are still running.
    pub fn current_period(&self) -> Option<&PeriodOutcome> {
        self.current.as_ref()
    }

    pub fn settlements(&self) -> &[SettlementRecord] {
        &self.settlements
    }

    pub fn profiles(&self) -> &BTreeMap<BusId, CrowdsourceeProfile> {
        &self.profiles
    }

    /// Total operator budget deposited so far.
    pub fn deposits(&self) -> Micros {
        self.deposits
    }

    /// Logical clock, milliseconds.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// Index of the next period to open.
    pub fn next_period(&self) -> usize {
        self.periods.len()
    }

    pub fn is_finished(&self) -> bool {
        self.periods.len() == self.scenario.horizon && self.current.is_none()
    }

    /// Hands the offers of `bus` to a human participant: agents stop
    /// answering for it, and unanswered offers expire as rejections.
    pub fn set_manual(&mut self, bus: BusId, manual: bool) {
        if manual {
            self.manual.insert(bus);
        } else {
            self.manual.remove(&bus);
        }
    }

    pub fn is_manual(&self, bus: BusId) -> bool {
        self.manual.contains(&bus)
    }

    fn period_ms(&self) -> u64 {
        (self.scenario.dt * 3_600_000.0).round() as u64
    }

    /// Logical time at which realtime period `t` begins; the day-ahead
    /// market runs in the slot before period 0.
    pub fn period_start(&self, t: usize) -> u64 {
        (t as u64 + 1) * self.period_ms()
    }

    // ---- ledger plumbing -------------------------------------------------

    fn tick(&mut self) -> u64 {
        self.now += 1;
        self.now
    }

    fn advance_to(&mut self, at: u64) {
        self.now = self.now.max(at);
    }

    fn sign(&mut self, submitter: &str, body: TxBody) -> Result<Transaction, SessionError> {
        self.tx_seq += 1;
        let tx_id = format!("tx-{:06}", self.tx_seq);
        let ts = self.tick();
        Ok(Transaction::signed(tx_id, submitter.to_string(), ts, body, &self.keys[submitter])?)
    }

    fn deposit(&mut self, amount: Micros) -> Result<Vec<Transaction>, SessionError> {
        if amount <= 0 {
            return Ok(Vec::new());
        }
        self.deposits += amount;
        Ok(vec![self.sign(OPERATOR, TxBody::BudgetDeposit { amount })?])
    }

    /// Orders `txs` into blocks, logs their events and returns one ack per
    /// transaction. Transactions a faulty orderer dropped are resubmitted.
    pub fn commit(&mut self, txs: Vec<Transaction>) -> Result<BTreeMap<String, TxAck>, SessionError> {
        let mut acks = BTreeMap::new();
        let mut pending = txs;
        for _ in 0..MAX_SUBMISSIONS {
            if pending.is_empty() {
                break;
            }
            let blocks = self.ordering.commit(&mut self.ledger, pending.clone())?;
            for block in blocks {
                let txs = self.ledger.blocks()[block.height as usize].txs.clone();
                self.events.push(
                    None,
                    EventKind::Block {
                        height: block.height,
                        block_hash: block.block_hash,
                        txs: txs.len(),
                    },
                );
                for (tx, receipt) in txs.iter().zip(&block.receipts) {
                    self.log_receipt(block.height, tx, receipt);
                    acks.insert(
                        receipt.tx_id.clone(),
                        TxAck {
                            tx_id: receipt.tx_id.clone(),
                            height: block.height,
                            block_hash: block.block_hash,
                            outcome: receipt.outcome.clone(),
                        },
                    );
                }
            }
            pending.retain(|tx| !acks.contains_key(&tx.tx_id));
            if !pending.is_empty() {
                log::warn!("{} transaction(s) missing after ordering; resubmitting", pending.len());
            }
        }
        match pending.first() {
            Some(tx) => Err(SessionError::NotOrdered(tx.tx_id.clone())),
            None => Ok(acks),
        }
    }

    fn log_receipt(&mut self, height: u64, tx: &Transaction, receipt: &Receipt) {
        match &receipt.outcome {
            Outcome::Applied { events } => {
                for event in events {
                    self.events.push(
                        event.party().map(str::to_string),
                        EventKind::Ledger {
                            height,
                            tx_id: receipt.tx_id.clone(),
                            event: event.clone(),
                        },
                    );
                }
            }
            Outcome::Rejected { reason } => {
                self.events.push(
                    Some(tx.submitter.clone()),
                    EventKind::Rejected {
                        height,
                        tx_id: receipt.tx_id.clone(),
                        submitter: tx.submitter.clone(),
                        reason: reason.clone(),
                    },
                );
            }
        }
    }

    /// Commits transactions the operator is entitled to; any rejection is a bug.
    fn commit_expecting(&mut self, txs: Vec<Transaction>) -> Result<BTreeMap<String, TxAck>, SessionError> {
        let kinds: BTreeMap<String, &'static str> = txs.iter().map(|t| (t.tx_id.clone(), t.kind())).collect();
        let acks = self.commit(txs)?;
        for ack in acks.values() {
            if let Some(reason) = ack.rejection() {
                return Err(SessionError::Rejected {
                    tx_id: ack.tx_id.clone(),
                    kind: kinds.get(&ack.tx_id).copied().unwrap_or("?").to_string(),
                    reason: reason.clone(),
                });
            }
        }
        Ok(acks)
    }

    /// Signs `body` as `party` and orders it on its own.
    pub fn submit_as(&mut self, party: &str, body: TxBody) -> Result<TxAck, SessionError> {
        if !self.keys.contains_key(party) {
            return Err(SessionError::UnknownParty(party.to_string()));
        }
        let tx = self.sign(party, body)?;
        let id = tx.tx_id.clone();
        let mut acks = self.commit(vec![tx])?;
        Ok(acks.remove(&id).expect("commit returns every transaction"))
    }

    // ---- day-ahead -------------------------------------------------------

    /// Clears the day-ahead market and writes one setpoint contract per
    /// generator or Type-1 party and period.
    pub fn run_day_ahead(&mut self) -> Result<&DayAhead, SessionError> {
        if self.day_ahead.is_some() {
            return Err(SessionError::Sequence("the day-ahead market already ran".into()));
        }
        let solution = solve_scenario_with(&self.scenario, &self.config.opf).map_err(SessionError::DayAhead)?;
        let dlmp = solution
            .dlmp
            .clone()
            .ok_or(SessionError::DayAhead(OpfError::NotOptimal(solution.status)))?;
        let setpoints = equilibrium_setpoints(&self.scenario, &solution);
        let contracts = self.day_ahead_contracts(&solution, &dlmp);
        log::info!(
            "day-ahead cleared at ${:.2}; {} setpoint contracts",
            solution.objective,
            contracts.len()
        );

        let budget: Micros = contracts
            .iter()
            .map(|c| settlement_amount(c.price, c.quantity, c.quantity))
            .sum();
        let mut txs: Vec<Transaction> = self.deposit(budget)?;
        for c in &contracts {
            txs.push(self.sign(
                OPERATOR,
                TxBody::SetpointContract {
                    contract_id: c.contract_id.clone(),
                    party: c.party.clone(),
                    period: c.period as u32,
                    quantity: c.quantity,
                    price: c.price,
                },
            )?);
        }
        self.commit_expecting(txs)?;
        Ok(self.day_ahead.insert(DayAhead {
            solution,
            dlmp,
            setpoints,
            contracts,
        }))
    }

    fn day_ahead_contracts(&self, sol: &OpfSolution, dlmp: &PriceVector) -> Vec<ContractInfo> {
        let base = sol.base_mva;
        let dt = self.scenario.dt;
        // Net Type-1 injection per party and period, p.u.
        let mut type1: BTreeMap<String, (BusId, Vec<f64>)> = BTreeMap::new();
        for d in &self.scenario.network.devices {
            if d.owner_class != OwnerClass::Type1 {
                continue;
            }
            let party = bus_party(d.bus);
            if self.parties.get(&party).map(|p| p.role) != Some(Role::Type1) {
                continue;
            }
            let (sign, p) = match &d.kind {
                DeviceKind::Solar { .. } => (1.0, sol.schedule.solar.get(&d.id).map(|s| &s.p)),
                DeviceKind::Battery { .. } => (-1.0, sol.schedule.batteries.get(&d.id).map(|s| &s.p)),
                DeviceKind::Shapable { .. } => (-1.0, sol.schedule.shapable.get(&d.id).map(|s| &s.p)),
                _ => (0.0, None),
            };
            let entry = type1.entry(party).or_insert_with(|| (d.bus, vec![0.0; sol.horizon]));
            if let Some(p) = p {
                entry.1.iter_mut().zip(p).for_each(|(a, v)| *a += sign * v);
            }
        }
        let mut out = Vec::new();
        for t in 0..sol.horizon {
            for (id, g) in &sol.schedule.generators {
                out.push(ContractInfo {
                    contract_id: format!("da-{id}-t{t:02}"),
                    party: id.clone(),
                    period: t,
                    quantity: g.p[t] * base * dt,
                    price: dlmp.at(t, g.bus).unwrap_or(0.0),
                });
            }
            for (party, (bus, p)) in &type1 {
                out.push(ContractInfo {
                    contract_id: format!("da-{party}-t{t:02}"),
                    party: party.clone(),
                    period: t,
                    quantity: p[t] * base * dt,
                    price: dlmp.at(t, *bus).unwrap_or(0.0),
                });
            }
        }
        out
    }

    // ---- realtime --------------------------------------------------------

    /// Supply shortfall at the feeder head for period `t`, MW: realized
    /// uncontrollable load minus its forecast, floored at zero.
    pub fn shortfall(&self, t: usize) -> f64 {
        if let Some(d) = &self.config.demand_override {
            return d.get(t).copied().unwrap_or(0.0).max(0.0);
        }
        let Some(realized) = &self.scenario.realized else { return 0.0 };
        let forecast = self.scenario.forecast_load();
        let net = &self.scenario.network;
        let delta: f64 = realized
            .iter()
            .filter_map(|(bus, p)| Some(p[t] - forecast[net.bus_index(*bus)?][t]))
            .sum();
        (delta * net.base_mva).max(0.0)
    }

    fn preferences(&self, bus: BusId) -> Option<&Preferences> {
        self.ledger.state().preferences.get(&bus_party(bus))
    }

    /// Incentive-program participants for period `t`, skipping `exclude`
    /// and anyone who cannot sell.
    fn participants(&mut self, t: usize, exclude: &BTreeSet<BusId>) -> Vec<Participant> {
        let da = self.day_ahead.as_ref().expect("day-ahead ran");
        let dt = self.scenario.dt;
        let eps_h = self.config.profile_update.eps_h;
        let mut out = Vec::new();
        let buses: Vec<BusId> = self.profiles.keys().copied().collect();
        for bus in buses {
            if exclude.contains(&bus) {
                continue;
            }
            let cap = selling_capacity(&self.scenario, bus, t);
            let prefs = self.preferences(bus).cloned();
            let (lo, hi) = match &prefs {
                Some(p) => (p.u_min / dt, p.u_max / dt),
                None => (0.0, cap),
            };
            let hi = hi.min(cap);
            if hi <= self.config.quantity_eps {
                continue;
            }
            let profile = self.profiles.get_mut(&bus).expect("listed");
            if let Some(eta) = prefs.as_ref().and_then(|p| p.eta) {
                if eta != profile.eta_base {
                    profile.eta_base = eta;
                    profile.eta = eta / (profile.acceptance_stats + eps_h);
                }
            }
            profile.zeta = prefs.as_ref().and_then(|p| p.zeta).unwrap_or(self.config.default_zeta);
            profile.u_bounds = [lo.min(hi), hi];
            out.push(Participant {
                profile: profile.clone(),
                lambda: da.dlmp.at(t, bus).unwrap_or(0.0),
                u_eq: da.setpoints.get(&bus).map_or(0.0, |s| s.u[t]),
            });
        }
        out
    }

    fn solve_round(&mut self, t: usize, demand: f64, budget: [f64; 2], exclude: &BTreeSet<BusId>) -> Result<IncentiveSolution, String> {
        let participants = self.participants(t, exclude);
        let round = IncentiveRound::new(t, demand, budget, participants);
        let lp = build_ces_id(&round).map_err(|e| e.to_string())?;
        solve_ces_id(&lp, self.config.incentive_tol).map_err(|e| e.to_string())
    }

    /// Offers for every allocation with a non-trivial quantity.
    fn offers_from(&self, sol: &IncentiveSolution) -> Vec<(BusId, f64, f64, f64)> {
        sol.allocations
            .iter()
            .filter(|a| a.u_a > self.config.quantity_eps)
            .map(|a| (a.id, a.u_a, a.price - a.lambda_a, a.lambda_a))
            .collect()
    }

    /// Writes one round of offers `(bus, quantity MW, lambda, premium)`.
    fn issue_round(&mut self, mode: RoundMode, offers: Vec<(BusId, f64, f64, f64)>) -> Result<(), SessionError> {
        let dt = self.scenario.dt;
        let window = self.config.offer_window_ms;
        let current = self.current.as_ref().expect("period open");
        let t = current.period;
        let index = current.rounds.len();
        let d_t = current.d_t;
        let accepted_mw = current.accepted_mw;
        let opened_at = self.now + 1;
        let expiry = opened_at + window;

        let mut issued = Vec::new();
        for (bus, quantity_mw, lambda, premium) in offers {
            let party = bus_party(bus);
            issued.push(IssuedOffer {
                offer_id: format!("offer-t{t:02}-r{index}-b{bus}"),
                bus,
                party,
                quantity_mw,
                lambda,
                premium,
                price: lambda + premium,
                payment: premium * quantity_mw,
                expiry,
                accepted: None,
                response_height: None,
            });
        }
        let budget: Micros = issued
            .iter()
            .map(|o| settlement_amount(o.price, o.quantity_mw * dt, o.quantity_mw * dt))
            .sum();
        let mut txs: Vec<Transaction> = self.deposit(budget)?;
        for o in &issued {
            txs.push(self.sign(
                OPERATOR,
                TxBody::IncentiveOffer {
                    offer_id: o.offer_id.clone(),
                    crowdsourcee: o.party.clone(),
                    period: t as u32,
                    quantity: o.quantity_mw * dt,
                    price: o.price,
                    premium: o.premium,
                    expiry,
                },
            )?);
        }
        self.commit_expecting(txs)?;
        let n = issued.len();
        self.current.as_mut().expect("period open").rounds.push(RoundRecord {
            index,
            mode,
            opened_at,
            expiry,
            closed: false,
            offers: issued,
        });
        self.events.push(
            None,
            EventKind::Round {
                period: t,
                round: index,
                status: RoundStatus::Open,
                d_t,
                offers: n,
                accepted_mw,
            },
        );
        Ok(())
    }

    /// Starts realtime period `t`: measures the shortfall, solves the
    /// incentive program and issues the first offers. A period with nothing
    /// to cover, or whose program has no answer, closes at once.
    pub fn open_period(&mut self, t: usize) -> Result<(), SessionError> {
        if self.day_ahead.is_none() {
            return Err(SessionError::Sequence("run the day-ahead market first".into()));
        }
        if self.current.is_some() {
            return Err(SessionError::Sequence(format!(
                "period {} is still open",
                self.current.as_ref().map_or(0, |c| c.period)
            )));
        }
        if t != self.periods.len() || t >= self.scenario.horizon {
            return Err(SessionError::Sequence(format!(
                "period {t} cannot open; next is {} of {}",
                self.periods.len(),
                self.scenario.horizon
            )));
        }
        self.advance_to(self.period_start(t));
        let d_t = self.shortfall(t);
        let budget = self.config.budget;
        self.current = Some(PeriodOutcome::new(t, d_t, budget));
        if d_t <= self.config.quantity_eps {
            self.finish_period()?;
            return Ok(());
        }
        match self.solve_round(t, d_t, budget, &BTreeSet::new()) {
            Ok(sol) => {
                let offers = self.offers_from(&sol);
                self.current.as_mut().expect("just opened").solutions.push(sol);
                self.issue_round(RoundMode::Initial, offers)?;
            }
            Err(e) => {
                log::warn!("period {t}: incentive program failed ({e}); falling back in full");
                self.current.as_mut().expect("just opened").incentive_error = Some(e);
                self.finish_period()?;
            }
        }
        Ok(())
    }

    /// Offers of the open round still waiting for an answer.
    pub fn pending_offers(&self) -> Vec<&IssuedOffer> {
        self.current
            .as_ref()
            .and_then(|c| c.rounds.last().filter(|r| !r.closed))
            .map(|r| r.offers.iter().filter(|o| o.accepted.is_none()).collect())
            .unwrap_or_default()
    }

    /// Submits `party`'s answer to an offer. Contract rejections (unknown,
    /// expired, answered, not yours) come back inside the ack.
    pub fn respond(&mut self, party: &str, offer_id: &str, accept: bool) -> Result<TxAck, SessionError> {
        let ack = self.submit_as(
            party,
            TxBody::OfferResponse {
                offer_id: offer_id.to_string(),
                accept,
            },
        )?;
        if ack.rejection().is_none() {
            self.record_response(offer_id, accept, ack.height);
        }
        Ok(ack)
    }

    fn record_response(&mut self, offer_id: &str, accept: bool, height: u64) {
        let params = self.config.profile_update;
        let Some(current) = self.current.as_mut() else { return };
        let Some(round) = current.open_round() else { return };
        let Some(offer) = round.offers.iter_mut().find(|o| o.offer_id == offer_id) else {
            return;
        };
        offer.accepted = Some(accept);
        offer.response_height = Some(height);
        let (bus, q, y) = (offer.bus, offer.quantity_mw, offer.payment);
        if accept {
            current.accepted_mw += q;
            current.accepted_payment += y;
        }
        if let Some(p) = self.profiles.get_mut(&bus) {
            *p = update_profile(p, accept, &params);
        }
    }

    /// Lets the simulated agents answer every pending offer they own.
    pub fn auto_respond(&mut self) -> Result<(), SessionError> {
        let dt = self.scenario.dt;
        let pending: Vec<(String, String, BusId, f64, f64)> = self
            .pending_offers()
            .into_iter()
            .filter(|o| !self.manual.contains(&o.bus))
            .map(|o| (o.offer_id.clone(), o.party.clone(), o.bus, o.price, o.quantity_mw * dt))
            .collect();
        for (offer_id, party, bus, price, quantity) in pending {
            let agent = self.agents.get_mut(&bus).ok_or_else(|| SessionError::UnknownParty(party.clone()))?;
            let accept = agent.respond(&OfferTerms { price, quantity })?.accepted();
            let ack = self.respond(&party, &offer_id, accept)?;
            if let Some(reason) = ack.rejection() {
                return Err(SessionError::Rejected {
                    tx_id: ack.tx_id.clone(),
                    kind: "offer-response".into(),
                    reason: reason.clone(),
                });
            }
        }
        Ok(())
    }

    /// Ends the open round at its deadline. Unanswered offers lapse as
    /// rejections. If supply is still short and rounds remain, the next
    /// round is issued: a re-solve with updated weights when more than half
    /// of the offers were rejected, otherwise raised premiums for the
    /// rejected ones. Returns the period's outcome once it closes.
    pub fn close_round(&mut self) -> Result<Option<PeriodOutcome>, SessionError> {
        let params = self.config.profile_update;
        let eps = self.config.quantity_eps;
        let current = self
            .current
            .as_mut()
            .ok_or_else(|| SessionError::Sequence("no period is open".into()))?;
        let t = current.period;
        let round = current
            .open_round()
            .ok_or_else(|| SessionError::Sequence(format!("period {t} has no open round")))?;
        round.closed = true;
        let expiry = round.expiry;
        let index = round.index;
        let offers = round.offers.clone();
        let mut lapsed = Vec::new();
        for o in round.offers.iter_mut().filter(|o| o.accepted.is_none()) {
            o.accepted = Some(false);
            lapsed.push(o.bus);
        }
        for bus in lapsed {
            if let Some(p) = self.profiles.get_mut(&bus) {
                *p = update_profile(p, false, &params);
            }
        }
        let current = self.current.as_ref().expect("open");
        let (d_t, accepted_mw, paid) = (current.d_t, current.accepted_mw, current.accepted_payment);
        self.events.push(
            None,
            EventKind::Round {
                period: t,
                round: index,
                status: RoundStatus::Closed,
                d_t,
                offers: offers.len(),
                accepted_mw,
            },
        );
        self.advance_to(expiry + 1);

        let remaining = d_t - accepted_mw;
        let held = index + 1;
        if remaining <= eps || held >= self.config.escalation.max_rounds {
            return self.finish_period().map(Some);
        }
        let rejected: Vec<&IssuedOffer> = offers.iter().filter(|o| o.accepted != Some(true)).collect();
        let [b_min, b_max] = self.config.budget;
        let next = if rejected.len() * 2 > offers.len() {
            let exclude = self.current.as_ref().expect("open").accepted_buses();
            let budget = [(b_min - paid).max(0.0), (b_max - paid).max(0.0)];
            match self.solve_round(t, remaining, budget, &exclude) {
                Ok(sol) => {
                    let offers = self.offers_from(&sol);
                    self.current.as_mut().expect("open").solutions.push(sol);
                    Some((RoundMode::Resolve, offers))
                }
                Err(e) => {
                    log::info!("period {t}: re-solve after rejections failed ({e})");
                    None
                }
            }
        } else {
            let mut raised = Vec::new();
            let mut committed = paid;
            for o in rejected {
                let cap = budget_cap(b_max, committed, o.quantity_mw);
                if let Escalation::Raised { lambda_a } = escalate(o.premium, cap, &self.config.escalation, held) {
                    if lambda_a > o.premium {
                        committed += lambda_a * o.quantity_mw;
                        raised.push((o.bus, o.quantity_mw, o.lambda, lambda_a));
                    }
                }
            }
            Some((RoundMode::Escalate, raised))
        };
        match next {
            Some((mode, offers)) if !offers.is_empty() => {
                self.issue_round(mode, offers)?;
                Ok(None)
            }
            _ => self.finish_period().map(Some),
        }
    }

    /// Covers what the rounds left open, records deliveries and closes the period.
    fn finish_period(&mut self) -> Result<PeriodOutcome, SessionError> {
        let mut outcome = self.current.take().expect("period open");
        let t = outcome.period;
        let dt = self.scenario.dt;
        let eps = self.config.quantity_eps;
        let residual = (outcome.d_t - outcome.accepted_mw).max(0.0);
        if residual > eps {
            let da = self.day_ahead.as_ref().expect("day-ahead ran");
            outcome.fallback = fallback_dispatch(&self.scenario, &da.solution, t, residual, &self.config.opf);
        }

        let mut contracts = Vec::new();
        for (gen, adj) in &outcome.fallback.adjustments {
            if *adj > eps {
                let price = outcome.fallback.prices.get(gen).copied().unwrap_or(0.0);
                contracts.push((format!("fb-{gen}-t{t:02}"), gen.clone(), adj * dt, price));
            }
        }
        let budget: Micros = contracts.iter().map(|(_, _, q, p)| settlement_amount(*p, *q, *q)).sum();
        let mut txs: Vec<Transaction> = self.deposit(budget)?;
        for (contract_id, party, quantity, price) in &contracts {
            txs.push(self.sign(
                OPERATOR,
                TxBody::SetpointContract {
                    contract_id: contract_id.clone(),
                    party: party.clone(),
                    period: t as u32,
                    quantity: *quantity,
                    price: *price,
                },
            )?);
        }
        if outcome.fallback.shortfall_mw > 0.0 {
            let reason = outcome.fallback.reason.clone().unwrap_or_default();
            txs.push(self.sign(
                OPERATOR,
                TxBody::ShortfallNotice {
                    period: t as u32,
                    shortfall: outcome.fallback.shortfall_mw,
                    reason,
                },
            )?);
        }

        // Meter readings: agents deliver their configured share, generators
        // and Type-1 parties deliver as scheduled.
        let mut readings: Vec<(String, Obligation, f64)> = Vec::new();
        for o in outcome.accepted_offers() {
            let ratio = if self.manual.contains(&o.bus) {
                1.0
            } else {
                self.agents.get(&o.bus).map_or(1.0, |a| a.delivery_ratio)
            };
            readings.push((o.party.clone(), Obligation::Offer(o.offer_id.clone()), o.quantity_mw * dt * ratio));
        }
        let da = self.day_ahead.as_ref().expect("day-ahead ran");
        for c in da.contracts.iter().filter(|c| c.period == t && c.quantity > 0.0) {
            readings.push((c.party.clone(), Obligation::Contract(c.contract_id.clone()), c.quantity));
        }
        for (contract_id, party, quantity, _) in contracts {
            readings.push((party, Obligation::Contract(contract_id), quantity));
        }
        for (party, obligation, delivered) in readings {
            txs.push(self.sign(
                OPERATOR,
                TxBody::MeterReading {
                    party,
                    period: t as u32,
                    obligation,
                    delivered,
                },
            )?);
        }
        self.commit_expecting(txs)?;

        outcome.closed = true;
        self.events.push(
            None,
            EventKind::PeriodClosed {
                period: t,
                d_t: outcome.d_t,
                accepted_mw: outcome.accepted_mw,
                fallback_mw: outcome.fallback_mw(),
                shortfall_mw: outcome.fallback.shortfall_mw,
            },
        );
        log::info!(
            "period {t}: d_t {:.4} MW, accepted {:.4} MW, fallback {:.4} MW, shortfall {:.4} MW",
            outcome.d_t,
            outcome.accepted_mw,
            outcome.fallback_mw(),
            outcome.fallback.shortfall_mw
        );
        self.periods.push(outcome.clone());
        if self.config.cadence.due(self.periods.len(), self.scenario.horizon) {
            self.reconcile()?;
        }
        Ok(outcome)
    }

    /// Runs period `t` headlessly: agents answer every round at once.
    pub fn run_realtime_period(&mut self, t: usize) -> Result<PeriodOutcome, SessionError> {
        self.open_period(t)?;
        loop {
            if self.current.is_none() {
                return Ok(self.periods.last().expect("closed").clone());
            }
            self.auto_respond()?;
            if let Some(outcome) = self.close_round()? {
                return Ok(outcome);
            }
        }
    }

    /// Runs whatever is left of the session headlessly.
    pub fn run(&mut self) -> Result<(), SessionError> {
        if self.day_ahead.is_none() {
            self.run_day_ahead()?;
        }
        if self.current.is_some() {
            loop {
                self.auto_respond()?;
                if self.close_round()?.is_some() {
                    break;
                }
            }
        }
        for t in self.periods.len()..self.scenario.horizon {
            self.run_realtime_period(t)?;
        }
        Ok(())
    }

    // ---- settlement ------------------------------------------------------

    /// Obligations of `party` that are metered but not yet paid.
    pub fn settleable(&self, party: &str) -> Vec<Obligation> {
        let state = self.ledger.state();
        let offers = state
            .offers
            .iter()
            .filter(|(_, r)| {
                r.crowdsourcee == party && r.status == OfferStatus::Accepted && r.delivered.is_some() && r.settled.is_none()
            })
            .map(|(id, _)| Obligation::Offer(id.clone()));
        let contracts = state
            .contracts
            .iter()
            .filter(|(_, r)| r.party == party && r.delivered.is_some() && r.settled.is_none())
            .map(|(id, _)| Obligation::Contract(id.clone()));
        offers.chain(contracts).collect()
    }

    /// Pays every party for its metered, unpaid deliveries: one settlement
    /// per party. Obligations without a meter reading wait for a later run.
    pub fn reconcile(&mut self) -> Result<Vec<SettlementRecord>, SessionError> {
        self.advance_to(self.period_start(self.periods.len()));
        let mut planned = Vec::new();
        let parties: Vec<String> = self.parties.keys().cloned().collect();
        for party in parties {
            let items = self.settleable(&party);
            if items.is_empty() {
                continue;
            }
            let state = self.ledger.state();
            let amount: Micros = items
                .iter()
                .map(|o| state.amount_due(o).expect("settleable"))
                .sum();
            planned.push((party, amount, items));
        }
        let mut txs = Vec::new();
        for (party, amount, items) in &planned {
            txs.push(self.sign(
                OPERATOR,
                TxBody::Settlement {
                    party: party.clone(),
                    amount: *amount,
                    items: items.clone(),
                },
            )?);
        }
        let ids: Vec<String> = txs.iter().map(|t| t.tx_id.clone()).collect();
        let acks = self.commit_expecting(txs)?;
        let mut out = Vec::new();
        for ((party, amount, items), id) in planned.into_iter().zip(ids) {
            out.push(SettlementRecord {
                height: acks[&id].height,
                tx_id: id,
                party,
                amount,
                items,
            });
        }
        self.settlements.extend(out.iter().cloned());
        Ok(out)
    }

    /// Sum of every non-operator balance, micro-dollars.
    pub fn paid_out(&self) -> Micros {
        self.ledger
            .state()
            .balances
            .iter()
            .filter(|(p, _)| p.as_str() != OPERATOR)
            .map(|(_, b)| b)
            .sum()
    }

    /// Double-entry check: what the operator deposited minus what it still
    /// holds equals what the parties received, to the micro-dollar.
    pub fn conserves_money(&self) -> bool {
        let operator = self.ledger.state().balance(OPERATOR);
        let settled: Micros = self.settlements.iter().map(|s| s.amount).sum();
        self.deposits - operator == self.paid_out() && settled == self.paid_out()
    }
}
