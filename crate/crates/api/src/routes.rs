//! Request handlers.

use std::convert::Infallible;
use std::collections::VecDeque;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::Json;
use ces_chain::ledger::{verify_dir, VerifyReport};
use ces_chain::tx::{Preferences, Role};
use ces_chain::{Block, Receipt, TxBody, WorldState};
use ces_core::grid::{BusId, FeederNetwork};
use ces_market::session::{PartyInfo, RoundMode};
use ces_market::{MarketSession, SessionEvent, SessionReport, TxAck};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::driver::{step, Step};
use crate::error::{ApiError, ApiResult, ErrorCode};
use crate::state::{token_for, ApiState, Caller, Credential};

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    body.map(|Json(v)| v).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.body_text()))
}

fn caller(state: &ApiState, headers: &HeaderMap) -> ApiResult<Caller> {
    state.authenticate(headers, None)
}

fn committed(ack: TxAck) -> ApiResult<Json<TxAck>> {
    match ack.rejection() {
        Some(reason) => Err(ApiError::rejected(&ack, reason)),
        None => Ok(Json(ack)),
    }
}

// ---- enrollment ------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct EnrollRequest {
    pub participant: String,
    /// Operating limits to record; defaults to those already on the ledger.
    #[serde(default)]
    pub preferences: Option<Preferences>,
}

#[derive(Debug, Serialize)]
pub struct EnrollResponse {
    #[serde(flatten)]
    pub credential: Credential,
    /// The preference transaction that recorded the enrollment.
    pub ack: TxAck,
}

/// Claims a Type-2 crowdsourcee for a human: issues its credential, records
/// its preferences on the ledger under its own signature, and stops the
/// simulated agent from answering its offers.
pub async fn enroll(
    State(state): State<ApiState>,
    body: Result<Json<EnrollRequest>, JsonRejection>,
) -> ApiResult<Json<EnrollResponse>> {
    let req = json_body(body)?;
    state.with_session(|session| {
        let party = req.participant.as_str();
        let info = session
            .parties()
            .get(party)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::Unknown, format!("no participant {party} in the scenario")))?;
        let (Role::Type2, Some(bus)) = (info.role, info.bus) else {
            return Err(ApiError::new(
                ErrorCode::Forbidden,
                format!("{party} is not a Type-2 crowdsourcee and takes no realtime decisions"),
            ));
        };
        if state.credential(party).is_some() {
            return Err(ApiError::new(ErrorCode::AlreadyEnrolled, format!("{party} is already enrolled")));
        }
        let preferences = match req.preferences.clone() {
            Some(p) => p,
            None => session.ledger().state().preferences.get(party).cloned().unwrap_or(Preferences {
                u_min: 0.0,
                u_max: 0.0,
                eta: None,
                zeta: None,
            }),
        };
        let key = session.key(party).expect("scenario parties hold keys");
        let credential = Credential {
            participant: party.to_string(),
            role: info.role,
            bus: Some(bus),
            public_key: hex_key(&key.public_key()),
            token: token_for(key),
        };
        let ack = session.submit_as(
            party,
            TxBody::PreferenceUpdate {
                owner: party.to_string(),
                preferences,
            },
        )?;
        if let Some(reason) = ack.rejection() {
            return Err(ApiError::rejected(&ack, reason));
        }
        state.register(credential.clone())?;
        session.set_manual(bus, true);
        Ok(Json(EnrollResponse { credential, ack }))
    })
}

fn hex_key(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- offers ----------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct RespondRequest {
    pub accept: bool,
}

/// Answers an offer; the ack carries the committing block.
pub async fn respond(
    State(state): State<ApiState>,
    headers: HeaderMap,
    Path(offer_id): Path<String>,
    body: Result<Json<RespondRequest>, JsonRejection>,
) -> ApiResult<Json<TxAck>> {
    let caller = caller(&state, &headers)?;
    let req = json_body(body)?;
    if caller.is_operator() {
        return Err(ApiError::new(ErrorCode::Forbidden, "the operator does not answer offers"));
    }
    let ack = state.with_session(|s| s.respond(&caller.party, &offer_id, req.accept))?;
    committed(ack)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OfferState {
    Open,
    Accepted,
    Rejected,
    /// Unanswered when its round closed.
    Lapsed,
}

#[derive(Debug, Serialize)]
pub struct OfferView {
    pub offer_id: String,
    pub period: usize,
    pub round: usize,
    pub mode: RoundMode,
    pub bus: BusId,
    pub party: String,
    pub quantity_mw: f64,
    /// Nodal price, $/MWh.
    pub lambda: f64,
    /// Incentive premium, $/MWh.
    pub premium: f64,
    /// Total offered price, $/MWh.
    pub price: f64,
    /// Logical deadline, ms.
    pub expiry: u64,
    pub state: OfferState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_height: Option<u64>,
}

fn offer_views(session: &MarketSession, viewer: &Caller) -> Vec<OfferView> {
    let periods = session.periods().iter().chain(session.current_period());
    let mut out = Vec::new();
    for p in periods {
        for r in &p.rounds {
            for o in r.offers.iter().filter(|o| viewer.is_operator() || o.party == viewer.party) {
                let state = match (o.accepted, o.response_height) {
                    (None, _) => OfferState::Open,
                    (Some(true), _) => OfferState::Accepted,
                    (Some(false), Some(_)) => OfferState::Rejected,
                    (Some(false), None) => OfferState::Lapsed,
                };
                out.push(OfferView {
                    offer_id: o.offer_id.clone(),
                    period: p.period,
                    round: r.index,
                    mode: r.mode,
                    bus: o.bus,
                    party: o.party.clone(),
                    quantity_mw: o.quantity_mw,
                    lambda: o.lambda,
                    premium: o.premium,
                    price: o.price,
                    expiry: o.expiry,
                    state,
                    response_height: o.response_height,
                });
            }
        }
    }
    out
}

/// The caller's offers (all offers for the operator), oldest first.
pub async fn offers(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Vec<OfferView>>> {
    let caller = caller(&state, &headers)?;
    Ok(Json(offer_views(&state.session(), &caller)))
}

// ---- preferences -----------------------------------------------------------

pub async fn get_preferences(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let caller = caller(&state, &headers)?;
    let session = state.session();
    let prefs = &session.ledger().state().preferences;
    if caller.is_operator() {
        return Ok(Json(serde_json::to_value(prefs).expect("preferences serialize")));
    }
    let mine = prefs
        .get(&caller.party)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("{} has no preferences", caller.party)))?;
    Ok(Json(serde_json::to_value(mine).expect("preferences serialize")))
}

/// Replaces the caller's operating limits with a signed update.
pub async fn put_preferences(
    State(state): State<ApiState>,
    headers: HeaderMap,
    body: Result<Json<Preferences>, JsonRejection>,
) -> ApiResult<Json<TxAck>> {
    let caller = caller(&state, &headers)?;
    let preferences = json_body(body)?;
    let ack = state.with_session(|s| {
        s.submit_as(
            &caller.party,
            TxBody::PreferenceUpdate {
                owner: caller.party.clone(),
                preferences,
            },
        )
    })?;
    committed(ack)
}

// ---- market data -----------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct NetworkView {
    pub horizon: usize,
    /// Period length, hours.
    pub dt: f64,
    pub network: FeederNetwork,
    pub type2_crowdsourcees: Vec<BusId>,
    pub parties: std::collections::BTreeMap<String, PartyInfo>,
}

pub async fn network(State(state): State<ApiState>) -> Json<NetworkView> {
    let session = state.session();
    let scenario = session.scenario();
    Json(NetworkView {
        horizon: scenario.horizon,
        dt: scenario.dt,
        network: scenario.network.clone(),
        type2_crowdsourcees: scenario.type2_crowdsourcees(),
        parties: session.parties().clone(),
    })
}

fn not_cleared() -> ApiError {
    ApiError::new(ErrorCode::Sequence, "the day-ahead market has not cleared yet")
}

/// Day-ahead prices for every period, $/MWh, indexed `[t][bus]`.
pub async fn dlmp(State(state): State<ApiState>) -> ApiResult<Json<Value>> {
    let session = state.session();
    let da = session.day_ahead().ok_or_else(not_cleared)?;
    Ok(Json(serde_json::to_value(&da.dlmp).expect("prices serialize")))
}

#[derive(Debug, Serialize)]
pub struct BusPrice {
    pub bus: BusId,
    /// $/MWh.
    pub dlmp: f64,
}

#[derive(Debug, Serialize)]
pub struct PeriodPrices {
    pub period: usize,
    pub prices: Vec<BusPrice>,
}

pub async fn dlmp_period(State(state): State<ApiState>, Path(period): Path<usize>) -> ApiResult<Json<PeriodPrices>> {
    let session = state.session();
    let da = session.day_ahead().ok_or_else(not_cleared)?;
    let row = da
        .dlmp
        .lambda
        .get(period)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no period {period}")))?;
    Ok(Json(PeriodPrices {
        period,
        prices: da.dlmp.bus_ids.iter().zip(row).map(|(bus, dlmp)| BusPrice { bus: *bus, dlmp: *dlmp }).collect(),
    }))
}

#[derive(Debug, Serialize)]
pub struct RoundView {
    pub period: usize,
    pub round: usize,
    pub mode: RoundMode,
    pub open: bool,
    pub opened_at: u64,
    pub expiry: u64,
    pub offers: usize,
    pub pending: usize,
}

#[derive(Debug, Serialize)]
pub struct PeriodView {
    pub period: usize,
    /// MW.
    pub d_t: f64,
    /// $ per period.
    pub budget: [f64; 2],
    pub accepted_mw: f64,
    /// Premium committed to accepted offers, $ per period.
    pub premium_committed: f64,
    pub fallback_mw: f64,
    pub closed: bool,
    pub rounds: Vec<RoundView>,
}

#[derive(Debug, Serialize)]
pub struct StatusView {
    /// Logical clock, ms.
    pub now: u64,
    pub horizon: usize,
    pub day_ahead_cleared: bool,
    pub next_period: usize,
    pub finished: bool,
    pub last_event_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub current: Option<PeriodView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_closed: Option<PeriodView>,
}

fn period_view(p: &ces_market::PeriodOutcome, dt: f64) -> PeriodView {
    PeriodView {
        period: p.period,
        d_t: p.d_t,
        budget: p.budget,
        accepted_mw: p.accepted_mw,
        premium_committed: p.accepted_payment * dt,
        fallback_mw: p.fallback_mw(),
        closed: p.closed,
        rounds: p
            .rounds
            .iter()
            .map(|r| RoundView {
                period: p.period,
                round: r.index,
                mode: r.mode,
                open: !r.closed,
                opened_at: r.opened_at,
                expiry: r.expiry,
                offers: r.offers.len(),
                pending: r.offers.iter().filter(|o| o.accepted.is_none()).count(),
            })
            .collect(),
    }
}

/// Round and period status.
pub async fn status(State(state): State<ApiState>) -> Json<StatusView> {
    let session = state.session();
    let dt = session.scenario().dt;
    Json(StatusView {
        now: session.now(),
        horizon: session.scenario().horizon,
        day_ahead_cleared: session.day_ahead().is_some(),
        next_period: session.next_period(),
        finished: session.is_finished(),
        last_event_id: session.last_event_id(),
        current: session.current_period().map(|p| period_view(p, dt)),
        last_closed: session.periods().last().map(|p| period_view(p, dt)),
    })
}

pub async fn report(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<SessionReport>> {
    caller(&state, &headers)?.require_operator()?;
    Ok(Json(SessionReport::from_session(&state.session())))
}

// ---- ledger ----------------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct BlockRange {
    #[serde(default)]
    pub from: u64,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct BlockSummary {
    pub height: u64,
    pub block_hash: String,
    pub prev_hash: String,
    pub timestamp: u64,
    pub tx_root: String,
    pub tx_ids: Vec<String>,
    pub rejected: usize,
}

#[derive(Debug, Serialize)]
pub struct BlockPage {
    pub total: u64,
    pub blocks: Vec<BlockSummary>,
}

const MAX_PAGE: usize = 500;

pub async fn blocks(
    State(state): State<ApiState>,
    headers: HeaderMap,
    Query(range): Query<BlockRange>,
) -> ApiResult<Json<BlockPage>> {
    caller(&state, &headers)?;
    let session = state.session();
    let ledger = session.ledger();
    let limit = range.limit.unwrap_or(50).min(MAX_PAGE);
    let blocks = ledger
        .blocks()
        .iter()
        .skip(range.from as usize)
        .take(limit)
        .map(|b| BlockSummary {
            height: b.height(),
            block_hash: b.block_hash.to_hex(),
            prev_hash: b.header.prev_hash.to_hex(),
            timestamp: b.header.timestamp,
            tx_root: b.header.tx_root.to_hex(),
            tx_ids: b.txs.iter().map(|t| t.tx_id.clone()).collect(),
            rejected: ledger.receipts(b.height()).map_or(0, |r| r.iter().filter(|r| !r.applied()).count()),
        })
        .collect();
    Ok(Json(BlockPage {
        total: ledger.len(),
        blocks,
    }))
}

#[derive(Debug, Serialize)]
pub struct BlockDetail {
    pub block: Block,
    pub receipts: Vec<Receipt>,
}

pub async fn block(
    State(state): State<ApiState>,
    headers: HeaderMap,
    Path(height): Path<u64>,
) -> ApiResult<Json<BlockDetail>> {
    caller(&state, &headers)?;
    let session = state.session();
    let ledger = session.ledger();
    let block = ledger
        .blocks()
        .get(height as usize)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no block at height {height}")))?;
    Ok(Json(BlockDetail {
        block: block.clone(),
        receipts: ledger.receipts(height).unwrap_or_default().to_vec(),
    }))
}

pub async fn world_state(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<WorldState>> {
    caller(&state, &headers)?;
    Ok(Json(state.session().ledger().state().clone()))
}

#[derive(Debug, Serialize)]
pub struct VerifyView {
    pub ok: bool,
    pub blocks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_bad_height: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub tip_hash: String,
    pub state_hash: String,
    /// Check of the exported block directory, when the service has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<VerifyReport>,
}

/// Re-checks hash links and transaction roots of the live chain and, if
/// configured, of the exported block files.
pub async fn verify(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<VerifyView>> {
    caller(&state, &headers)?;
    let directory = match &state.options().ledger_dir {
        Some(dir) => Some(verify_dir(dir).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?),
        None => None,
    };
    let session = state.session();
    let ledger = session.ledger();
    let fault = ledger.validate().err();
    let mut view = VerifyView {
        ok: fault.is_none(),
        blocks: ledger.len(),
        first_bad_height: fault.as_ref().map(|f| f.height),
        reason: fault.map(|f| f.reason),
        tip_hash: ledger.tip_hash().to_hex(),
        state_hash: ledger.state_hash().to_hex(),
        directory: None,
    };
    if let Some(d) = directory {
        if !d.ok {
            view.ok = false;
            if view.first_bad_height.is_none() {
                view.first_bad_height = d.first_bad_height;
                view.reason = d.reason.clone();
            }
        }
        view.directory = Some(d);
    }
    Ok(Json(view))
}

// ---- operator --------------------------------------------------------------

/// Advances the session by one step (see [`crate::driver::step`]).
pub async fn operator_step(State(state): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Step>> {
    caller(&state, &headers)?.require_operator()?;
    let s = state.clone();
    let result = tokio::task::spawn_blocking(move || s.with_session(step))
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    Ok(Json(result?))
}

// ---- event stream ----------------------------------------------------------

#[derive(Debug, Deserialize)]
pub struct StreamQuery {
    #[serde(default)]
    pub token: Option<String>,
    /// Resume after this event id.
    #[serde(default)]
    pub after: Option<u64>,
}

fn sse_event(e: &SessionEvent) -> Event {
    let value = serde_json::to_value(e).expect("events serialize");
    let kind = value.get("type").and_then(Value::as_str).unwrap_or("event").to_string();
    Event::default().id(e.id.to_string()).event(kind).data(value.to_string())
}

/// Server-sent events visible to the caller, in log order. Resumes after
/// the `Last-Event-ID` header or the `after` query value.
pub async fn events(
    State(state): State<ApiState>,
    headers: HeaderMap,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let caller = state.authenticate(&headers, q.token.as_deref())?;
    let last_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let cursor = last_id.or(q.after).unwrap_or(0);
    let rx = state.subscribe();
    let stream = futures::stream::unfold(
        (state, caller, cursor, rx, VecDeque::new()),
        |(state, caller, mut cursor, mut rx, mut buf)| async move {
            loop {
                if let Some(ev) = buf.pop_front() {
                    return Some((Ok(ev), (state, caller, cursor, rx, buf)));
                }
                rx.borrow_and_update();
                {
                    let session = state.session();
                    for e in session.events_since(cursor) {
                        cursor = e.id;
                        if e.visible_to(&caller.party, caller.is_operator()) {
                            buf.push_back(sse_event(e));
                        }
                    }
                }
                if buf.is_empty() && rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
