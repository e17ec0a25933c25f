//! Result directory layout.

use std::fs;
use std::path::Path;

use anyhow::Context;
use ces_chain::ledger::export_blocks;
use ces_core::opf::OpfSolution;
use ces_core::Scenario;
use ces_market::report::{bus_stack_csv, offers_csv, session_incentives_csv};
use ces_market::{MarketSession, SessionReport};

/// Blocks per ledger segment file.
pub const BLOCKS_PER_SEGMENT: usize = 64;

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

/// The solution as stored on disk: wall-clock time is dropped so reruns
/// are byte-identical.
pub fn stable_solution(sol: &OpfSolution) -> OpfSolution {
    OpfSolution {
        solve_time: 0.0,
        ..sol.clone()
    }
}

/// `opf.json`, `dlmp.csv` and `bus_stack.csv` for one solution.
pub fn write_solution(dir: &Path, scenario: &Scenario, sol: &OpfSolution) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, "opf.json", stable_solution(sol).to_json())?;
    if let Some(prices) = &sol.dlmp {
        write(dir, "dlmp.csv", prices.to_csv())?;
    }
    write(dir, "bus_stack.csv", bus_stack_csv(scenario, sol))
}

/// Everything a session produced: the day-ahead solution, incentive and
/// offer histories, per-period summary, the session report, the event log
/// and the ledger as segment files.
pub fn write_session(dir: &Path, session: &MarketSession) -> anyhow::Result<SessionReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(da) = session.day_ahead() {
        write_solution(dir, session.scenario(), &da.solution)?;
    }
    let report = SessionReport::from_session(session);
    write(dir, "incentives.csv", session_incentives_csv(session))?;
    write(dir, "offers.csv", offers_csv(session))?;
    write(dir, "periods.csv", report.periods_csv())?;
    write(dir, "session.json", report.to_json())?;
    let events: String = session
        .events()
        .iter()
        .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
        .collect();
    write(dir, "events.jsonl", events)?;
    let ledger_dir = dir.join("ledger");
    if ledger_dir.exists() {
        fs::remove_dir_all(&ledger_dir).with_context(|| format!("clearing {}", ledger_dir.display()))?;
    }
    export_blocks(session.ledger().blocks(), &ledger_dir, BLOCKS_PER_SEGMENT)?;
    Ok(report)
}
