//! The shipped reference scenarios and their pass/fail thresholds.

use serde::Serialize;

use super::{run_scenario_with, RunMetrics, ScenarioConfig, ScenarioError};
use crate::economics::CostModel;
use crate::system::{ModuleStatus, TelemetryRecord};

pub const TEST1_JSON: &str = include_str!("../../data/test1.json");
pub const TEST2_JSON: &str = include_str!("../../data/test2.json");
pub const TEST3_JSON: &str = include_str!("../../data/test3.json");
pub const FIG7_JSON: &str = include_str!("../../data/fig7_conditioning.json");
pub const SECONDLIFE_COSTS_JSON: &str = include_str!("../../data/tableIII_secondlife.json");
pub const STANDARD_COSTS_JSON: &str = include_str!("../../data/tableIII_standard.json");
pub const SCHEMA_JSON: &str = include_str!("../../data/scenario.schema.json");

pub const V_BAND: (f64, f64) = (11.0, 13.0);
pub const STD_LIMIT_NOMINAL_V: f64 = 0.050;
pub const STD_LIMIT_FAILURE_V: f64 = 0.100;
pub const SHARE_TOLERANCE: f64 = 0.01;
pub const CONVERGED_SPREAD: f64 = 0.02;

pub fn test1() -> ScenarioConfig {
    ScenarioConfig::from_json_str(TEST1_JSON).expect("shipped test1.json parses")
}

pub fn test2() -> ScenarioConfig {
    ScenarioConfig::from_json_str(TEST2_JSON).expect("shipped test2.json parses")
}

pub fn test3() -> ScenarioConfig {
    ScenarioConfig::from_json_str(TEST3_JSON).expect("shipped test3.json parses")
}

pub fn fig7() -> ScenarioConfig {
    ScenarioConfig::from_json_str(FIG7_JSON).expect("shipped fig7_conditioning.json parses")
}

pub fn secondlife_costs() -> CostModel {
    serde_json::from_str(SECONDLIFE_COSTS_JSON).expect("shipped cost model parses")
}

pub fn standard_costs() -> CostModel {
    serde_json::from_str(STANDARD_COSTS_JSON).expect("shipped cost model parses")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub scenario: &'static str,
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(scenario: &'static str, check: &'static str, passed: bool, detail: String) -> GoldenCheck {
    GoldenCheck { scenario, check, passed, detail }
}

fn relative_spread(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (max - min) / mean
}

/// Per-step facts the checks need, gathered without keeping the stream.
#[derive(Default)]
struct Watch {
    band_violations: u64,
    worst_share_error: f64,
    window_violations: u64,
}

fn band_ok(rec: &TelemetryRecord) -> bool {
    !rec.converged || (V_BAND.0..=V_BAND.1).contains(&rec.v_bus)
}

fn all_discharging(rec: &TelemetryRecord) -> bool {
    rec.converged && rec.modules.iter().all(|m| m.status == ModuleStatus::Discharge)
}

fn run_test1(out: &mut Vec<GoldenCheck>) -> Result<RunMetrics, ScenarioError> {
    let cfg = test1();
    let caps: Vec<f64> = cfg.cells.iter().map(|c| c.capacity_ah).collect();
    let mut w = Watch::default();
    let metrics = run_scenario_with(&cfg, &mut |rec| {
        w.band_violations += u64::from(!band_ok(rec));
        if all_discharging(rec) {
            for k in 1..rec.modules.len() {
                let want = caps[k] / caps[0];
                let got = rec.modules[k].i_out / rec.modules[0].i_out;
                w.worst_share_error = w.worst_share_error.max((got / want - 1.0).abs());
            }
        }
    })?;
    out.push(check("test1", "bus band", w.band_violations == 0, format!("{} steps outside band", w.band_violations)));
    out.push(check(
        "test1",
        "bus std-dev",
        metrics.v_bus_std <= STD_LIMIT_NOMINAL_V,
        format!("std {:.4} V, mean {:.4} V", metrics.v_bus_std, metrics.v_bus_mean),
    ));
    out.push(check(
        "test1",
        "capacity-proportional currents",
        w.worst_share_error <= SHARE_TOLERANCE,
        format!("worst ratio error {:.3}%", 100.0 * w.worst_share_error),
    ));
    let cut: Option<Vec<f64>> = metrics.cutoff_time_s.iter().copied().collect();
    let (ok, detail) = match cut {
        Some(t) => (relative_spread(&t) <= SHARE_TOLERANCE, format!("cut-off times {t:?} s, spread {:.3}%", 100.0 * relative_spread(&t))),
        None => (false, "not every cell reached cut-off".into()),
    };
    out.push(check("test1", "synchronized cut-off", ok, detail));
    Ok(metrics)
}

fn run_test2(out: &mut Vec<GoldenCheck>) -> Result<RunMetrics, ScenarioError> {
    let cfg = test2();
    let windows: Vec<(f64, f64)> = cfg.cells.iter().map(|c| (c.profile().v_min, c.profile().v_max)).collect();
    let mut w = Watch::default();
    let metrics = run_scenario_with(&cfg, &mut |rec| {
        w.band_violations += u64::from(!band_ok(rec));
        for (m, &(lo, hi)) in rec.modules.iter().zip(&windows) {
            if m.v_cell.is_finite() && !(lo..=hi).contains(&m.v_cell) {
                w.window_violations += 1;
            }
        }
        if all_discharging(rec) {
            let i: Vec<f64> = rec.modules.iter().map(|m| m.i_cell).collect();
            for a in 0..i.len() {
                for b in a + 1..i.len() {
                    w.worst_share_error = w.worst_share_error.max((i[a] - i[b]).abs() / i[a].max(i[b]));
                }
            }
        }
    })?;
    out.push(check("test2", "bus band", w.band_violations == 0, format!("{} steps outside band", w.band_violations)));
    out.push(check(
        "test2",
        "bus std-dev",
        metrics.v_bus_std <= STD_LIMIT_NOMINAL_V,
        format!("std {:.4} V, mean {:.4} V", metrics.v_bus_std, metrics.v_bus_mean),
    ));
    out.push(check(
        "test2",
        "equal cell currents",
        w.worst_share_error <= SHARE_TOLERANCE,
        format!("worst pairwise difference {:.3}%", 100.0 * w.worst_share_error),
    ));
    out.push(check(
        "test2",
        "chemistry voltage windows",
        w.window_violations == 0,
        format!("{} samples outside their window", w.window_violations),
    ));
    Ok(metrics)
}

fn run_test3(out: &mut Vec<GoldenCheck>, nominal_std: f64) -> Result<RunMetrics, ScenarioError> {
    let cfg = test3();
    let fail_t = cfg.events.first().map_or(f64::INFINITY, |e| e.t_s);
    let failed = match cfg.events.first().map(|e| e.event) {
        Some(crate::system::EventKind::FailCell(k)) => k,
        _ => 0,
    };
    let dt = cfg.dt_s;
    let n = cfg.cells.len();
    let mut w = Watch::default();
    let mut nonzero_after = 0u64;
    let mut prev: Option<TelemetryRecord> = None;
    let mut rose = None;
    let mut post_q = vec![0.0; n];
    let metrics = run_scenario_with(&cfg, &mut |rec| {
        w.band_violations += u64::from(!band_ok(rec));
        if rec.t >= fail_t - 1e-9 {
            if rec.modules[failed].i_cell != 0.0 || rec.modules[failed].i_out != 0.0 {
                nonzero_after += 1;
            }
            for (q, m) in post_q.iter_mut().zip(&rec.modules) {
                *q += m.i_cell.max(0.0) * dt / 3600.0;
            }
            if rose.is_none() {
                let p = prev.as_ref().expect("failure is not at t = 0");
                rose = Some((0..n).filter(|&k| k != failed).all(|k| rec.modules[k].i_out > p.modules[k].i_out));
            }
        } else {
            prev = Some(rec.clone());
        }
    })?;
    out.push(check("test3", "bus band", w.band_violations == 0, format!("{} steps outside band", w.band_violations)));
    out.push(check(
        "test3",
        "bus std-dev",
        metrics.v_bus_std <= STD_LIMIT_FAILURE_V && metrics.v_bus_std > nominal_std,
        format!("std {:.4} V (tests I/II max {:.4} V), mean {:.4} V", metrics.v_bus_std, nominal_std, metrics.v_bus_mean),
    ));
    out.push(check("test3", "failed cell carries no current", nonzero_after == 0, format!("{nonzero_after} non-zero samples")));
    out.push(check("test3", "survivors pick up the load", rose == Some(true), format!("{rose:?}")));
    let survivors: Vec<f64> = (0..n).filter(|&k| k != failed).map(|k| post_q[k]).collect();
    let spread = (survivors[0] - survivors[1]).abs() / survivors[0].max(survivors[1]);
    out.push(check(
        "test3",
        "equal post-failure discharge",
        spread <= SHARE_TOLERANCE,
        format!("{survivors:.5?} A·h, difference {:.3}%", 100.0 * spread),
    ));
    Ok(metrics)
}

fn run_fig7(out: &mut Vec<GoldenCheck>) -> Result<RunMetrics, ScenarioError> {
    let metrics = run_scenario_with(&fig7(), &mut |_| {})?;
    let spreads = metrics.discharge_spreads();
    let late: Vec<Option<f64>> = spreads.iter().skip(2).copied().collect();
    let ok = !late.is_empty() && late.iter().all(|s| s.is_some_and(|s| s <= CONVERGED_SPREAD));
    let shown: Vec<String> = spreads.iter().map(|s| s.map_or("n/a".into(), |s| format!("{:.2}%", 100.0 * s))).collect();
    out.push(check("fig7", "cycle spread from cycle 3", ok, format!("spreads per cycle [{}]", shown.join(", "))));
    Ok(metrics)
}

/// Runs every golden scenario and returns one line per threshold.
pub fn evaluate_all() -> Result<Vec<GoldenCheck>, ScenarioError> {
    let mut out = Vec::new();
    let m1 = run_test1(&mut out)?;
    let m2 = run_test2(&mut out)?;
    run_test3(&mut out, m1.v_bus_std.max(m2.v_bus_std))?;
    run_fig7(&mut out)?;
    let second = secondlife_costs();
    let standard = standard_costs();
    let (t1, t2) = (crate::economics::total_cost(&second), crate::economics::total_cost(&standard));
    let (n1, n2) = (crate::economics::npv_lifetime(&second), crate::economics::npv_lifetime(&standard));
    out.push(check(
        "costs",
        "totals and NPV",
        (t1 - 37.47).abs() <= 0.01 + 1e-9 && t2 == 40.05 && (n1 - 37.47).abs() <= 0.01 + 1e-9 && (n2 - 61.39).abs() <= 0.01 + 1e-9,
        format!("totals {t1:.2} / {t2:.2}, NPV {n1:.2} / {n2:.2}"),
    ));
    Ok(out)
}
