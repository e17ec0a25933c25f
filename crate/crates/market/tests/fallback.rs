mod common;

use ces_core::agents::AgentPolicy;
use ces_core::opf::{solve_scenario, OpfSettings};
use ces_market::fallback::{generator_headroom, single_period_scenario};
use ces_market::fallback_dispatch;

#[test]
fn nothing_to_cover_changes_nothing() {
    let scenario = common::six_bus(AgentPolicy::AlwaysAccept);
    let da = solve_scenario(&scenario).unwrap();
    for residual in [0.0, -1.0, f64::NAN] {
        let out = fallback_dispatch(&scenario, &da, 3, residual, &OpfSettings::default());
        assert!(out.adjustments.is_empty());
        assert_eq!(out.shortfall_mw, 0.0);
        assert_eq!(out.dispatched_mw(), 0.0);
    }
}

#[test]
fn frozen_single_period_reproduces_the_day_ahead_point() {
    let scenario = common::six_bus(AgentPolicy::AlwaysAccept);
    let da = solve_scenario(&scenario).unwrap();
    for t in [2, 12, 19] {
        let single = single_period_scenario(&scenario, &da, t, 0.0);
        assert_eq!(single.horizon, 1);
        let sol = solve_scenario(&single).unwrap();
        let before = da.schedule.generators["b0-generator"].p[t];
        let after = sol.schedule.generators["b0-generator"].p[0];
        assert!((before - after).abs() < 1e-6, "t={t}: {before} vs {after}");
    }
}

#[test]
fn generators_cover_the_residual_plus_extra_losses() {
    let scenario = common::six_bus(AgentPolicy::AlwaysAccept);
    let da = solve_scenario(&scenario).unwrap();
    for (t, residual) in [(4, 0.05), (12, 0.5), (19, 2.0)] {
        let out = fallback_dispatch(&scenario, &da, t, residual, &OpfSettings::default());
        assert!(out.reason.is_none(), "{:?}", out.reason);
        assert_eq!(out.shortfall_mw, 0.0);
        assert!(out.incremental_losses_mw >= -1e-9);
        let covered = out.dispatched_mw() - out.incremental_losses_mw;
        assert!((covered - residual).abs() < 1e-6, "t={t}: {covered} vs {residual}");
        // paid at the marginal price of the re-solved period
        let price = out.prices["b0-generator"];
        assert!(price > 0.0);
    }
}

#[test]
fn beyond_headroom_is_a_shortfall() {
    let scenario = common::six_bus(AgentPolicy::AlwaysAccept);
    let da = solve_scenario(&scenario).unwrap();
    let headroom = generator_headroom(&scenario, &da, 10);
    assert!(headroom > 0.0);
    let out = fallback_dispatch(&scenario, &da, 10, headroom + 1.0, &OpfSettings::default());
    assert!(out.adjustments.is_empty());
    assert_eq!(out.shortfall_mw, headroom + 1.0);
    assert!(out.reason.unwrap().contains("headroom"));
}
