//! `ces`: solve, simulate, serve, verify and export crowdsourced-energy
//! market sessions.

mod artifacts;
mod fixtures;
mod options;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use ces_api::{ApiState, ServiceOptions};
use ces_chain::ledger::verify_dir;
use ces_core::grid::synthetic::six_bus_scenario;
use ces_core::opf::{solve_scenario, OpfSolution};
use ces_core::Scenario;
use ces_market::{MarketSession, SessionConfig};
use clap::{Args, Parser, Subcommand};

use crate::options::{parse_faults, AgentsFlag};

#[derive(Debug, Parser)]
#[command(name = "ces", version, about = "Crowdsourced energy market: solve, simulate, serve, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the day-ahead market and the realtime periods, writing results.
    Run(RunArgs),
    /// Solve the day-ahead market only.
    Solve(SolveArgs),
    /// Print one period's nodal prices from a results directory.
    Dlmp(DlmpArgs),
    /// Ledger tools.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Write a demo feeder and scenario file.
    Fixture(FixtureArgs),
}

#[derive(Debug, Subcommand)]
enum LedgerCommand {
    /// Check hash links and transaction roots of exported segment files.
    Verify {
        /// Directory of segment files (e.g. `results/ledger`).
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Feeder JSON file; with --scenario. Defaults to the bundled 6-bus fixture.
    #[arg(long, env = "CES_FEEDER", requires = "scenario")]
    feeder: Option<PathBuf>,
    /// Scenario JSON file layered on the feeder.
    #[arg(long, env = "CES_SCENARIO", requires = "feeder")]
    scenario: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> anyhow::Result<Scenario> {
        match (&self.feeder, &self.scenario) {
            (Some(f), Some(s)) => {
                Scenario::load(f, s).with_context(|| format!("loading {} with {}", f.display(), s.display()))
            }
            _ => {
                let (net, file) = fixtures::fixture(6, 0, 0.15);
                let scenario = Scenario::assemble(net, file)?;
                debug_assert_eq!(scenario.network, six_bus_scenario().network);
                Ok(scenario)
            }
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Realtime periods to run (default: the whole horizon).
    #[arg(long, env = "CES_PERIODS")]
    periods: Option<usize>,
    /// Crowdsourcee behaviour: scenario, accept, reject, threshold[:RHO], logistic[:RHO[:KAPPA]].
    #[arg(long, env = "CES_AGENTS", default_value = "scenario")]
    agents: AgentsFlag,
    /// Root of every random stream.
    #[arg(long, env = "CES_SEED")]
    seed: Option<u64>,
    /// Results directory.
    #[arg(long, env = "CES_OUT", default_value = "results")]
    out: PathBuf,
    /// Session configuration JSON (budget, escalation, cadence, ...).
    #[arg(long, env = "CES_CONFIG")]
    config: Option<PathBuf>,
    /// Serve the session over HTTP at this address instead of running headless.
    #[arg(long, env = "CES_SERVE")]
    serve: Option<SocketAddr>,
    /// With --serve: advance automatically, leaving each round open this many seconds.
    #[arg(long, env = "CES_ROUND_WAIT")]
    round_wait: Option<f64>,
    /// Number of ordering nodes; tolerates (n-1)/3 faults.
    #[arg(long, env = "CES_ORDERING_NODES")]
    ordering_nodes: Option<usize>,
    /// Orderer faults: none, or e.g. crash:1,equivocate:0.
    #[arg(long, env = "CES_FAULTS")]
    faults: Option<String>,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, env = "CES_OUT", default_value = "results")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DlmpArgs {
    #[arg(long)]
    period: usize,
    /// Results directory holding `opf.json`.
    #[arg(long, env = "CES_OUT", default_value = "results")]
    results: PathBuf,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    /// Number of buses; 6 gives the canonical fixture.
    #[arg(long, default_value_t = 6)]
    buses: usize,
    /// Seed of the synthetic feeder (ignored for 6 buses).
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Realized load above forecast, as a fraction.
    #[arg(long, default_value_t = 0.15)]
    surge: f64,
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
}

fn session_config(args: &RunArgs) -> anyhow::Result<SessionConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SessionConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.ordering.pbft.seed = config.seed;
    if let Some(n) = args.ordering_nodes {
        if n == 0 {
            bail!("--ordering-nodes must be at least 1");
        }
        config.ordering.pbft.n = n;
        config.ordering.pbft.f = (n - 1) / 3;
    }
    if let Some(faults) = &args.faults {
        config.ordering.pbft.faults = parse_faults(faults)?;
    }
    Ok(config)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut scenario = args.scenario.load()?;
    if let AgentsFlag::All(policy) = &args.agents {
        for bus in scenario.type2_crowdsourcees() {
            let spec = scenario
                .agents
                .entry(bus)
                .or_insert_with(|| ces_core::agents::AgentSpec::new(policy.clone()));
            spec.policy = policy.clone();
        }
    }
    let config = session_config(&args)?;
    let periods = args.periods.unwrap_or(scenario.horizon);
    if periods > scenario.horizon {
        bail!("--periods {periods} exceeds the horizon of {}", scenario.horizon);
    }
    let mut session = MarketSession::new(scenario, config)?;

    if let Some(addr) = args.serve {
        return serve(session, addr, args.round_wait, &args.out);
    }

    session.run_day_ahead()?;
    for t in 0..periods {
        session.run_realtime_period(t)?;
    }
    if periods < session.scenario().horizon {
        session.reconcile()?;
    }
    let report = artifacts::write_session(&args.out, &session)?;
    println!(
        "{} periods: demand {:.4} MWh, crowdsourced {:.4} MWh, fallback {:.4} MWh, premium ${:.2}; {} blocks, state {}",
        report.periods.len(),
        report.totals.demand_mwh,
        report.totals.accepted_mwh,
        report.totals.fallback_mwh,
        report.totals.premium_settled,
        report.ledger.blocks,
        report.ledger.state_hash
    );
    println!("results in {}", args.out.display());
    if !report.conservation.holds {
        bail!("settlement books do not balance: {:?}", report.conservation);
    }
    Ok(())
}

fn serve(session: MarketSession, addr: SocketAddr, round_wait: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let state = ApiState::new(
        session,
        ServiceOptions {
            ledger_dir: Some(out.join("ledger")),
        },
    );
    println!("operator token: {}", state.operator_token());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        if let Some(secs) = round_wait {
            let wait = Duration::from_secs_f64(secs.max(0.0));
            let driver = ces_api::spawn_driver(state.clone(), wait);
            let out = out.to_path_buf();
            let st = state.clone();
            tokio::spawn(async move {
                match driver.await {
                    Ok(Ok(())) => match artifacts::write_session(&out, &st.session()) {
                        Ok(_) => log::info!("session finished; results in {}", out.display()),
                        Err(e) => log::error!("writing results: {e:#}"),
                    },
                    Ok(Err(e)) => log::error!("session stopped: {e}"),
                    Err(e) => log::error!("driver task failed: {e}"),
                }
            });
        }
        ces_api::serve(state, addr).await
    })?;
    Ok(())
}

fn solve(args: SolveArgs) -> anyhow::Result<()> {
    let scenario = args.scenario.load()?;
    let sol = solve_scenario(&scenario)?;
    artifacts::write_solution(&args.out, &scenario, &sol)?;
    println!(
        "{:?}: cost ${:.4}, balance residual {:.2e}, cone gap {:.2e}, {} iterations; results in {}",
        sol.status,
        sol.objective,
        sol.residuals.power_balance_inf_norm,
        sol.residuals.cone_gap_max,
        sol.iterations,
        args.out.display()
    );
    Ok(())
}

fn dlmp(args: DlmpArgs) -> anyhow::Result<()> {
    let path = args.results.join("opf.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let sol: OpfSolution = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let prices = sol.dlmp.context("the stored solution is not optimal and has no prices")?;
    let row = prices
        .lambda
        .get(args.period)
        .with_context(|| format!("period {} is outside the horizon of {}", args.period, prices.horizon()))?;
    println!("bus,dlmp");
    for (bus, price) in prices.bus_ids.iter().zip(row) {
        println!("{bus},{price}");
    }
    Ok(())
}

fn verify_ledger(dir: &Path) -> anyhow::Result<()> {
    let report = verify_dir(dir)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.ok {
        bail!(
            "ledger invalid: first bad height {} ({})",
            report.first_bad_height.map_or_else(|| "unknown".into(), |h| h.to_string()),
            report.reason.unwrap_or_default()
        );
    }
    Ok(())
}

fn fixture(args: FixtureArgs) -> anyhow::Result<()> {
    if args.buses < 2 {
        bail!("a feeder needs at least two buses");
    }
    let (net, file) = fixtures::fixture(args.buses, args.seed, args.surge);
    // fail here rather than at load time
    Scenario::assemble(net.clone(), file.clone())?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let feeder = args.out.join(format!("feeder{}.json", args.buses));
    let scenario = args.out.join(format!("scenario{}.json", args.buses));
    std::fs::write(&feeder, net.to_json())?;
    std::fs::write(&scenario, serde_json::to_string_pretty(&file)?)?;
    println!("wrote {} and {}", feeder.display(), scenario.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Solve(args) => solve(args),
        Command::Dlmp(args) => dlmp(args),
        Command::Ledger {
            command: LedgerCommand::Verify { dir },
        } => verify_ledger(&dir),
        Command::Fixture(args) => fixture(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
