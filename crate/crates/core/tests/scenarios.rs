use packsim_core::bus::{solve_bus_constant_power, BusError};
use packsim_core::converter::Characteristic;
use packsim_core::scenario::{csv_header, emit_csv, golden, run_conditioning_sim, run_scenario, ScenarioConfig, ScenarioError};
use packsim_core::system::ModuleStatus;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(json: &str) -> ScenarioConfig {
    ScenarioConfig::from_json_str(json).unwrap()
}

#[test]
fn ten_steps_give_header_and_eleven_rows() {
    let cfg = config(
        r#"{"cells": [{"chemistry": "NMC", "capacity_ah": 0.1}, {"chemistry": "LFP", "capacity_ah": 0.1},
            {"chemistry": "NCA", "capacity_ah": 0.1}],
            "load": {"kind": "resistive", "value": 47.0}, "dt_s": 1.0, "duration_s": 10.0}"#,
    );
    let (records, metrics) = run_scenario(&cfg).unwrap();
    assert_eq!(records.len(), 10);
    assert_eq!(metrics.steps, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    emit_csv(&records, 3, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], csv_header(3));
    assert!(lines.iter().all(|l| l.split(',').count() == 23));
    assert!(!text.contains('\r'));
}

#[test]
fn validation_lists_every_problem() {
    let cfg = config(
        r#"{"cells": [{"chemistry": "NMC", "capacity_ah": -1.0, "soc": 1.5}],
            "load": {"kind": "resistive", "value": 0.0}, "dt_s": 0.0, "duration_s": 10.0}"#,
    );
    let Err(ScenarioError::Invalid(issues)) = cfg.validate() else { panic!("expected validation issues") };
    let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
    for want in ["dt_s", "cells[0].capacity_ah", "cells[0].soc", "load"] {
        assert!(fields.iter().any(|f| f.starts_with(want)), "{want} missing from {fields:?}");
    }
}

#[test]
fn unknown_field_is_a_parse_error() {
    let err = ScenarioConfig::from_json_str(r#"{"cells": [], "dt": 1.0}"#).unwrap_err();
    assert!(matches!(err, ScenarioError::Parse(_)));
}

#[test]
fn golden_scenarios_pass_their_checks() {
    let checks = golden::evaluate_all().unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn equal_cells_finish_together() {
    let cfg = config(
        r#"{"cells": [{"chemistry": "NMC", "capacity_ah": 1.0, "soc": 0.5}, {"chemistry": "NMC", "capacity_ah": 1.0, "soc": 0.5}],
            "dt_s": 1.0, "bms": {"kb_scale": 0.3},
            "conditioning": {"charge_power_w": 8.0, "discharge_power_w": 10.0, "cycles": 2}}"#,
    );
    let (_, metrics) = run_conditioning_sim(&cfg).unwrap();
    let spreads = metrics.discharge_spreads();
    assert_eq!(spreads.len(), 2);
    assert!(spreads.iter().all(|s| *s == Some(0.0)), "{spreads:?}");
}

#[test]
fn conditioning_learns_the_capacity_ratio() {
    let cfg = config(
        r#"{"cells": [{"chemistry": "NMC", "capacity_ah": 1.0, "soc": 0.5}, {"chemistry": "NMC", "capacity_ah": 2.0, "soc": 0.5}],
            "dt_s": 1.0, "bms": {"kb_scale": 0.3},
            "conditioning": {"charge_power_w": 8.0, "discharge_power_w": 10.0, "cycles": 3}}"#,
    );
    let (records, metrics) = run_conditioning_sim(&cfg).unwrap();
    let last = metrics.cycles.iter().filter(|c| c.phase == packsim_core::bms::conditioning::Phase::Discharge).next_back().unwrap();
    let rec = records
        .iter()
        .find(|r| r.t > last.start_t && r.converged && r.modules.iter().all(|m| m.status == ModuleStatus::Discharge))
        .unwrap();
    let ratio = rec.modules[1].i_cell / rec.modules[0].i_cell;
    assert!((ratio - 2.0).abs() / 2.0 < 0.02, "ratio {ratio}");
    assert!(last.spread.unwrap() <= 0.02);
}

#[test]
fn pv_source_charges_the_pack() {
    let cfg = config(
        r#"{"cells": [{"chemistry": "NMC", "capacity_ah": 1.0, "soc": 0.3}, {"chemistry": "LFP", "capacity_ah": 1.5, "soc": 0.3}],
            "source": {"kind": "pv", "v_oc": 20.0, "i_sc": 0.8, "shape": 8.0},
            "events": [{"t_s": 300.0, "event": {"set_irradiance": 0.5}}],
            "dt_s": 1.0, "duration_s": 600.0}"#,
    );
    let (records, metrics) = run_scenario(&cfg).unwrap();
    assert!(metrics.charged_ah.iter().all(|&q| q > 0.0), "{:?}", metrics.charged_ah);
    assert!(records.iter().all(|r| r.converged));
    let charge_power = |t0: f64, t1: f64| {
        let sel: Vec<f64> = records
            .iter()
            .filter(|r| r.t >= t0 && r.t < t1)
            .map(|r| r.modules.iter().map(|m| -m.i_out * r.v_bus).sum::<f64>())
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    // half the light, roughly half the harvested power
    let (full, half) = (charge_power(200.0, 300.0), charge_power(500.0, 600.0));
    assert!(half < 0.7 * full && half > 0.3 * full, "{full} W then {half} W");
}

/// High-voltage root of `v Σ (v0 - v)/r = p` by a 1 µV scan around a coarse bracket.
fn scan_root(chars: &[Option<Characteristic>], p: f64) -> Option<f64> {
    let f = |v: f64| v * chars.iter().flatten().map(|c| (c.v0 - v) / c.r_droop).sum::<f64>() - p;
    let v_open = {
        let g: f64 = chars.iter().flatten().map(|c| 1.0 / c.r_droop).sum();
        chars.iter().flatten().map(|c| c.v0 / c.r_droop).sum::<f64>() / g
    };
    // coarse 1 mV walk down from open circuit, then 1 µV inside the crossing
    let mut v = v_open;
    while f(v - 1e-3) < 0.0 {
        v -= 1e-3;
        if v < 0.5 * v_open {
            return None;
        }
    }
    let lo = v - 1e-3;
    let mut best = (lo, f64::INFINITY);
    for k in 0..=1000 {
        let x = lo + k as f64 * 1e-6;
        if f(x).abs() < best.1 {
            best = (x, f(x).abs());
        }
    }
    Some(best.0)
}

#[test]
fn constant_power_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let chars: Vec<Option<Characteristic>> = (0..n)
            .map(|_| Some(Characteristic { v0: rng.gen_range(11.5..12.5), r_droop: rng.gen_range(0.05..2.0) }))
            .collect();
        let g: f64 = chars.iter().flatten().map(|c| 1.0 / c.r_droop).sum();
        let a: f64 = chars.iter().flatten().map(|c| c.v0 / c.r_droop).sum();
        let p_max = a * a / (4.0 * g);
        let p = rng.gen_range(0.0..0.9) * p_max;
        let sol = solve_bus_constant_power(&chars, p).unwrap();
        let want = scan_root(&chars, p).expect("root above half the open-circuit voltage");
        assert!((sol.v_bus - want).abs() <= 1e-6, "{} vs {want}", sol.v_bus);
        let supplied: f64 = sol.i_out.iter().sum();
        assert!((supplied * sol.v_bus - p).abs() <= 1e-6 * p.max(1.0));
        checked += 1;
    }
    assert_eq!(checked, 1000);
    let chars = [Some(Characteristic { v0: 12.0, r_droop: 1.0 })];
    assert!(matches!(solve_bus_constant_power(&chars, 40.0), Err(BusError::Infeasible { .. })));
}
