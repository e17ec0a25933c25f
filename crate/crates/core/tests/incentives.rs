use ces_core::incentives::{
    brute_force_oracle, budget_cap, build_ces_id, escalate, incentives_csv, recover_prices, solve_ces_id,
    update_profile, CrowdsourceeProfile, Escalation, EscalationPolicy, IncentiveError, IncentiveRound, Participant,
    ProfileUpdate, PRICE_EPS,
};
use proptest::prelude::*;

fn participant(id: usize, eta: f64, zeta: f64, lambda: f64, u_eq: f64, bounds: [f64; 2]) -> Participant {
    Participant {
        profile: CrowdsourceeProfile::new(id, eta, zeta, bounds),
        lambda,
        u_eq,
    }
}

fn single(b_min: f64) -> IncentiveRound {
    IncentiveRound::new(0, 5.0, [b_min, 100.0], vec![participant(1, 1.0, 100.0, 10.0, 5.0, [0.0, 10.0])])
}

#[test]
fn one_participant_structure() {
    let lp = build_ces_id(&single(0.0)).unwrap();
    assert_eq!(lp.stats.variables, 3);
    assert_eq!(lp.stats.epigraph_rows, 2);
    assert_eq!(lp.stats.budget_rows, 2);
    assert_eq!(lp.stats.demand_rows, 1);
}

#[test]
fn floor_payment_when_budget_floor_is_zero() {
    let sol = solve_ces_id(&build_ces_id(&single(0.0)).unwrap(), 1e-9).unwrap();
    let a = &sol.allocations[0];
    assert!((a.u_a - 5.0).abs() < 1e-9);
    assert!((a.y - 0.01).abs() < 1e-9);
    assert!((a.lambda_a - 0.002).abs() < 1e-12);
    assert!((sol.objective - 50.01).abs() < 1e-9);
}

#[test]
fn budget_floor_binds() {
    let sol = solve_ces_id(&build_ces_id(&single(20.0)).unwrap(), 1e-9).unwrap();
    let a = &sol.allocations[0];
    assert!((a.u_a - 5.0).abs() < 1e-9);
    assert!((a.y - 20.0).abs() < 1e-9);
    assert!((a.lambda_a - 4.0).abs() < 1e-9);
    assert!((sol.objective - 70.0).abs() < 1e-9);
    assert!((sol.total_payment() - 20.0).abs() <= 1e-9);
}

fn cheaper_takes_all() -> IncentiveRound {
    IncentiveRound::new(
        0,
        8.0,
        [0.0, 100.0],
        vec![
            participant(1, 1.0, 0.0, 10.0, 5.0, [0.0, 10.0]),
            participant(2, 1.0, 0.0, 20.0, 5.0, [0.0, 10.0]),
        ],
    )
}

#[test]
fn demand_goes_to_the_cheaper_participant() {
    let round = cheaper_takes_all();
    let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-9).unwrap();
    let u: Vec<f64> = sol.allocations.iter().map(|a| a.u_a).collect();
    assert!((u[0] - 8.0).abs() < 1e-9 && u[1].abs() < 1e-9, "{u:?}");
    assert_eq!(sol.allocations[1].lambda_a, 0.0);
    assert!(sol.allocations[0].lambda_a > 0.0);

    let oracle = brute_force_oracle(&round, 0.01).unwrap().unwrap();
    assert!((oracle.u[0] - 8.0).abs() < 1e-9 && oracle.u[1].abs() < 1e-9);
    assert!((oracle.objective - sol.objective).abs() < 1e-9);
    assert!((oracle.lambda_a[0] - sol.allocations[0].lambda_a).abs() < 1e-12);
    assert_eq!(oracle.lambda_a[1], 0.0);
}

#[test]
fn build_errors() {
    let empty = IncentiveRound::new(0, 1.0, [0.0, 10.0], vec![]);
    assert!(matches!(build_ces_id(&empty), Err(IncentiveError::NoParticipants(_))));

    let mut short = single(0.0);
    short.d_t = 11.0;
    assert!(matches!(build_ces_id(&short), Err(IncentiveError::DemandUnsatisfiable { .. })));

    let mut floor = IncentiveRound::new(0, 0.5, [20.0, 100.0], vec![participant(1, 1.0, 0.0, 1.0, 0.5, [0.1, 1.0])]);
    floor.lambda_a_max = Some(10.0);
    assert!(matches!(build_ces_id(&floor), Err(IncentiveError::BudgetUnreachable { .. })));
}

#[test]
fn surplus_is_treated_as_no_demand() {
    let mut round = single(0.0);
    round.d_t = -3.0;
    let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-9).unwrap();
    assert!(sol.total_quantity() >= 0.0);
    assert!((sol.allocations[0].u_a - 5.0).abs() < 1e-9, "deviation weight keeps u at equilibrium");
}

#[test]
fn price_recovery() {
    assert_eq!(recover_prices(&[20.0], &[5.0], PRICE_EPS), vec![4.0]);
    assert_eq!(recover_prices(&[0.01], &[1e-12], 1e-9), vec![0.0]);
}

#[test]
fn oracle_examples() {
    let oracle = brute_force_oracle(&single(20.0), 0.01).unwrap().unwrap();
    assert!((oracle.objective - 70.0).abs() <= 0.01);

    let mut short = single(0.0);
    short.d_t = 11.0;
    assert!(brute_force_oracle(&short, 0.01).unwrap().is_none());

    let mut degenerate = single(0.0);
    degenerate.budget = [0.0, 0.0];
    degenerate.participants[0].profile.zeta = 0.0;
    assert!(brute_force_oracle(&degenerate, 0.01).unwrap().is_none());
    assert!(solve_ces_id(&build_ces_id(&degenerate).unwrap(), 1e-9).is_err());

    let four = IncentiveRound::new(
        0,
        0.0,
        [0.0, 1.0],
        (0..4).map(|i| participant(i, 1.0, 0.0, 1.0, 0.0, [0.0, 1.0])).collect(),
    );
    assert!(matches!(brute_force_oracle(&four, 0.01), Err(IncentiveError::TooLarge(_))));
}

#[test]
fn escalation() {
    let policy = EscalationPolicy {
        gamma: 1.5,
        max_rounds: 2,
    };
    assert_eq!(escalate(2.0, 100.0, &policy, 0), Escalation::Raised { lambda_a: 3.0 });
    assert_eq!(escalate(4.0, 5.0, &policy, 0), Escalation::Raised { lambda_a: 5.0 });
    assert_eq!(escalate(5.0, 5.0, &policy, 1), Escalation::Exhausted);
    assert_eq!(escalate(2.0, 100.0, &policy, 2), Escalation::Exhausted);
    // b_max = 30 with 10 already paid elsewhere and u = 4: premium at most 5.
    assert_eq!(budget_cap(30.0, 10.0, 4.0), 5.0);
}

#[test]
fn profile_updates() {
    let mut p = CrowdsourceeProfile::new(1, 1.0, 0.0, [0.0, 1.0]);
    p.acceptance_stats = 0.5;
    let params = ProfileUpdate::default();
    assert!((update_profile(&p, true, &params).acceptance_stats - 0.6).abs() < 1e-12);
    assert!((update_profile(&p, false, &params).acceptance_stats - 0.4).abs() < 1e-12);
    p.acceptance_stats = 0.0;
    let after = update_profile(&p, false, &ProfileUpdate { alpha: 0.0, eps_h: 0.1 });
    assert!((after.eta - 10.0).abs() < 1e-12);
    assert_eq!(after.zeta, p.zeta);
}

#[test]
fn large_deviation_weight_pins_equilibrium() {
    let round = IncentiveRound::new(
        0,
        1.0,
        [0.0, 50.0],
        vec![
            participant(1, 1.0, 1e6, 30.0, 1.7, [0.0, 5.0]),
            participant(2, 1.0, 1e6, 10.0, 0.4, [0.0, 5.0]),
        ],
    );
    let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-9).unwrap();
    for (a, p) in sol.allocations.iter().zip(&round.participants) {
        assert!((a.u_a - p.u_eq).abs() <= 1e-6);
    }
}

#[test]
fn csv_has_a_row_per_allocation() {
    let sol = solve_ces_id(&build_ces_id(&cheaper_takes_all()).unwrap(), 1e-9).unwrap();
    let csv = incentives_csv(&[sol.clone(), sol]);
    assert_eq!(csv.lines().count(), 5);
}

fn grid(lo: i32, hi: i32) -> impl Strategy<Value = f64> {
    (lo..=hi).prop_map(|v| v as f64 / 100.0)
}

prop_compose! {
    /// Instances with data on the 0.01 grid and strictly positive lower bounds.
    fn on_grid_round()(
        n in 1usize..=3,
        seeds in prop::collection::vec((grid(10, 100), grid(0, 120), grid(100, 5000), grid(0, 10000), grid(0, 300)), 3),
        demand_frac in 0.0f64..1.0,
        b_frac in 0.0f64..1.0,
    ) -> IncentiveRound {
        let participants: Vec<Participant> = seeds[..n]
            .iter()
            .enumerate()
            .map(|(i, (u_min, span, lambda, zeta, u_eq))| {
                let eta = [0.5, 1.0, 2.0][i % 3];
                participant(i, eta, *zeta, *lambda, *u_eq, [*u_min, u_min + span])
            })
            .collect();
        let cap: f64 = participants.iter().map(|p| p.profile.u_bounds[1]).sum();
        let d = (demand_frac * cap * 100.0).floor() / 100.0;
        let top = participants.iter().map(|p| p.lambda).fold(0.0, f64::max) * 10.0;
        // Keep the premium cap slack: the cheapest payer can absorb the
        // whole floor at its minimum quantity, so no quantity is raised just
        // to make room for payments and every vertex stays on the grid.
        let cheapest = participants.iter().min_by(|a, b| a.profile.eta.total_cmp(&b.profile.eta)).unwrap();
        let floor_room = cheapest.profile.u_bounds[0] * top;
        let b_min = (b_frac * floor_room * 100.0).floor() / 100.0;
        IncentiveRound::new(0, d, [b_min, b_min + 50.0], participants)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_program_matches_bilinear_search(round in on_grid_round()) {
        let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-9).unwrap();
        let oracle = brute_force_oracle(&round, 0.01).unwrap().expect("feasible by construction");
        prop_assert!((sol.objective - oracle.objective).abs() <= 0.01 + 1e-6,
            "lp {} oracle {}", sol.objective, oracle.objective);
    }

    #[test]
    fn linear_program_lower_bounds_search_with_binding_caps(round in on_grid_round(), b_extra in grid(0, 3000)) {
        let mut round = round;
        round.budget[0] += b_extra;
        round.budget[1] += b_extra;
        if let Ok(lp) = build_ces_id(&round) {
            let sol = solve_ces_id(&lp, 1e-9).unwrap();
            let oracle = brute_force_oracle(&round, 0.01).unwrap().expect("feasible when buildable");
            prop_assert!(oracle.objective >= sol.objective - 1e-6);
        }
    }

    #[test]
    fn solutions_respect_budget_and_demand(round in on_grid_round()) {
        let sol = solve_ces_id(&build_ces_id(&round).unwrap(), 1e-9).unwrap();
        let paid = sol.total_payment();
        prop_assert!(paid >= round.budget[0] - 1e-9 && paid <= round.budget[1] + 1e-9);
        prop_assert!(sol.total_quantity() >= round.d_t - 1e-9);
        for (a, p) in sol.allocations.iter().zip(&round.participants) {
            prop_assert!(a.y >= round.y_floor - 1e-12);
            prop_assert!(a.u_a >= p.profile.u_bounds[0] - 1e-12 && a.u_a <= p.profile.u_bounds[1] + 1e-12);
            if a.u_a > PRICE_EPS {
                prop_assert!((a.lambda_a - a.y / a.u_a).abs() < 1e-12);
                prop_assert!(a.lambda_a > 0.0);
            }
        }
    }

    #[test]
    fn escalation_never_decreases_or_exceeds_cap(start in 0.01f64..50.0, gamma in 1.0f64..3.0, cap in 0.01f64..100.0, rounds in 1usize..6) {
        let policy = EscalationPolicy { gamma, max_rounds: rounds };
        let mut price = start.min(cap);
        for k in 0..rounds + 1 {
            match escalate(price, cap, &policy, k) {
                Escalation::Raised { lambda_a } => {
                    prop_assert!(lambda_a >= price && lambda_a <= cap);
                    price = lambda_a;
                }
                Escalation::Exhausted => break,
            }
        }
    }
}
