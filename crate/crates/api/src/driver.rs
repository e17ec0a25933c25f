//! Advancing the session from the service: one step at a time on operator
//! request, or on a wall-clock timer.

use std::time::Duration;

use ces_market::session::RoundMode;
use ces_market::{MarketSession, SessionError};
use serde::Serialize;

use crate::state::ApiState;

/// What one step did.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum Step {
    DayAhead { contracts: usize },
    /// A period opened; `round` is `None` when it closed at once (nothing
    /// to cover, or the incentive program had no answer).
    PeriodOpened { period: usize, round: Option<usize> },
    /// The open round closed and a follow-up round was issued.
    RoundOpened { period: usize, round: usize, mode: RoundMode },
    PeriodClosed { period: usize, accepted_mw: f64, fallback_mw: f64 },
    Finished,
}

fn open_round(session: &MarketSession) -> Option<(usize, usize, RoundMode)> {
    let p = session.current_period()?;
    let r = p.rounds.last().filter(|r| !r.closed)?;
    Some((p.period, r.index, r.mode))
}

/// Advances the session by one step: the day-ahead market, opening the
/// next period, or closing the open round. Simulated agents answer new
/// offers straight away; offers of enrolled humans wait for them.
pub fn step(session: &mut MarketSession) -> Result<Step, SessionError> {
    if session.day_ahead().is_none() {
        let contracts = session.run_day_ahead()?.contracts.len();
        return Ok(Step::DayAhead { contracts });
    }
    if session.current_period().is_some() {
        return match session.close_round()? {
            Some(p) => Ok(Step::PeriodClosed {
                period: p.period,
                accepted_mw: p.accepted_mw,
                fallback_mw: p.fallback_mw(),
            }),
            None => {
                session.auto_respond()?;
                let (period, round, mode) = open_round(session).expect("a follow-up round is open");
                Ok(Step::RoundOpened { period, round, mode })
            }
        };
    }
    if session.is_finished() {
        return Ok(Step::Finished);
    }
    let period = session.next_period();
    session.open_period(period)?;
    if session.current_period().is_some() {
        session.auto_respond()?;
    }
    Ok(Step::PeriodOpened {
        period,
        round: open_round(session).map(|(_, r, _)| r),
    })
}

/// Steps the session in the background, pausing `round_wait` after each
/// step that leaves a round open so humans can answer. Ends when the
/// session finishes or a step fails.
pub fn spawn_driver(state: ApiState, round_wait: Duration) -> tokio::task::JoinHandle<Result<(), SessionError>> {
    tokio::spawn(async move {
        loop {
            let s = state.clone();
            let (result, waiting) = tokio::task::spawn_blocking(move || {
                s.with_session(|session| {
                    let result = step(session);
                    (result, open_round(session).is_some())
                })
            })
            .await
            .expect("driver step does not panic");
            match result {
                Ok(Step::Finished) => return Ok(()),
                Ok(step) => log::info!("driver: {step:?}"),
                Err(e) => {
                    log::error!("driver stopped: {e}");
                    return Err(e);
                }
            }
            if waiting {
                tokio::time::sleep(round_wait).await;
            }
        }
    })
}
