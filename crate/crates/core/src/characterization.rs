//! Triage of recovered cells: voltage check, conditioning cycle and a
//! Coulomb-counted capacity test, plus population statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bms::CoulombCounter;
use crate::cell::{self, CellError, CellState, Chemistry, ChemistryProfile, DEFAULT_R_INTERNAL};
use crate::converter::cv_charge_current;

/// Cells resting below this are written off without cycling (V).
pub const DEFECTIVE_BELOW_V: f64 = 0.7;
/// CV termination current of the capacity test (A).
pub const CV_CUTOFF_A: f64 = 0.05;
/// CV hold of the initial cycle (s).
pub const INITIAL_CV_HOLD_S: f64 = 20.0 * 60.0;
pub const RETENTION_BIN_WIDTH: f64 = 0.1;
pub const RETENTION_MAX: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriageError {
    #[error("nominal capacity must be positive, got {0}")]
    NominalCapacity(f64),
    #[error("population is empty")]
    EmptyPopulation,
    #[error("time step must be positive, got {0}")]
    Step(f64),
    #[error("{phase} did not finish within {limit_s} s")]
    Stalled { phase: &'static str, limit_s: f64 },
    #[error(transparent)]
    Cell(#[from] CellError),
}

/// A recovered cell as it arrives on the bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageCell {
    pub id: String,
    pub chemistry: Chemistry,
    pub capacity_true_ah: f64,
    pub nominal_ah: f64,
    #[serde(default = "half")]
    pub soc: f64,
    #[serde(default = "default_r")]
    pub r_internal: f64,
    /// Resting voltage if it differs from the model's OCV (deeply discharged cells).
    #[serde(default)]
    pub initial_voltage_v: Option<f64>,
}

fn half() -> f64 {
    0.5
}

fn default_r() -> f64 {
    DEFAULT_R_INTERNAL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageOptions {
    pub dt_s: f64,
    /// Extra capacity tests after the first (long-term cycling sets).
    pub repeat_capacity_tests: u32,
    /// Any single phase longer than this is abandoned (s).
    pub phase_limit_s: f64,
}

impl Default for TriageOptions {
    fn default() -> Self {
        Self { dt_s: 1.0, repeat_capacity_tests: 0, phase_limit_s: 24.0 * 3600.0 }
    }
}

/// A batch of cells to triage, as read from a population file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    #[serde(default)]
    pub options: TriageOptions,
    pub cells: Vec<TriageCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub id: String,
    pub initial_voltage: f64,
    pub defective: bool,
    pub measured_capacity_ah: f64,
    /// Measured over nominal; 0 for defective cells.
    pub retention: f64,
    /// Capacity measured by each repeated test.
    pub repeat_capacities_ah: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub count: usize,
    pub defective: usize,
    /// Counts per 10 % retention bin from 0 to 120 %.
    pub histogram: Vec<usize>,
    pub fraction_above_70: f64,
    pub fraction_at_least_50: f64,
}

fn cc_charge(cell: &mut CellState, current: f64, opts: &TriageOptions) -> Result<(), TriageError> {
    let dt = opts.dt_s;
    let v_max = cell.chemistry.v_max;
    let mut t = 0.0;
    loop {
        let next = cell::soc_after(cell, -current, dt);
        if next > 1.0 || cell::ocv(&cell.chemistry, next)? + current * cell.r_internal > v_max {
            return Ok(());
        }
        *cell = cell::step_cell(cell, -current, dt)?;
        t += dt;
        if t > opts.phase_limit_s {
            return Err(TriageError::Stalled { phase: "CC charge", limit_s: opts.phase_limit_s });
        }
    }
}

/// CV at `v_max` until the current drops to `cutoff` or `hold_s` elapses.
fn cv_charge(cell: &mut CellState, cap: f64, cutoff: f64, hold_s: Option<f64>, opts: &TriageOptions) -> Result<(), TriageError> {
    let dt = opts.dt_s;
    let mut t = 0.0;
    loop {
        let i = cv_charge_current(cell, cell.chemistry.v_max, cap, dt);
        let done = match hold_s {
            Some(h) => t >= h,
            None => -i <= cutoff,
        };
        if done || i == 0.0 {
            return Ok(());
        }
        *cell = cell::step_cell(cell, i, dt)?;
        t += dt;
        if t > opts.phase_limit_s {
            return Err(TriageError::Stalled { phase: "CV charge", limit_s: opts.phase_limit_s });
        }
    }
}

/// CC discharge to the cut-off voltage; returns the counted charge (A·h).
fn cc_discharge(cell: &mut CellState, current: f64, opts: &TriageOptions) -> Result<f64, TriageError> {
    let dt = opts.dt_s;
    let v_min = cell.chemistry.v_min;
    let mut counter = CoulombCounter::default();
    loop {
        let next = cell::soc_after(cell, current, dt);
        if next < 0.0 || cell::ocv(&cell.chemistry, next)? - current * cell.r_internal < v_min {
            return Ok(counter.ah());
        }
        *cell = cell::step_cell(cell, current, dt)?;
        counter.add(current, dt);
        if counter.samples() as f64 * dt > opts.phase_limit_s {
            return Err(TriageError::Stalled { phase: "CC discharge", limit_s: opts.phase_limit_s });
        }
    }
}

fn capacity_test(cell: &mut CellState, rate: f64, opts: &TriageOptions) -> Result<f64, TriageError> {
    cc_charge(cell, rate, opts)?;
    cv_charge(cell, rate, CV_CUTOFF_A, None, opts)?;
    cc_discharge(cell, rate, opts)
}

/// Runs the bench protocol on one simulated cell.
pub fn triage_protocol(input: &TriageCell, opts: &TriageOptions) -> Result<TriageReport, TriageError> {
    if !(input.nominal_ah > 0.0) {
        return Err(TriageError::NominalCapacity(input.nominal_ah));
    }
    if !(opts.dt_s > 0.0) {
        return Err(TriageError::Step(opts.dt_s));
    }
    let profile = ChemistryProfile::default_for(input.chemistry);
    let mut cell = CellState::with_params(profile, input.capacity_true_ah, input.soc, input.r_internal, cell::DEFAULT_TEMPERATURE_C)?;
    let initial_voltage = input.initial_voltage_v.unwrap_or_else(|| cell.ocv());
    if initial_voltage < DEFECTIVE_BELOW_V {
        return Ok(TriageReport {
            id: input.id.clone(),
            initial_voltage,
            defective: true,
            measured_capacity_ah: 0.0,
            retention: 0.0,
            repeat_capacities_ah: Vec::new(),
        });
    }
    // C/2 of the nameplate rating
    let rate = 0.5 * input.nominal_ah;

    cc_charge(&mut cell, rate, opts)?;
    cv_charge(&mut cell, rate, 0.0, Some(INITIAL_CV_HOLD_S), opts)?;
    cc_discharge(&mut cell, rate, opts)?;

    let measured = capacity_test(&mut cell, rate, opts)?;
    let repeats = (0..opts.repeat_capacity_tests).map(|_| capacity_test(&mut cell, rate, opts)).collect::<Result<Vec<_>, _>>()?;
    Ok(TriageReport {
        id: input.id.clone(),
        initial_voltage,
        defective: false,
        measured_capacity_ah: measured,
        retention: (measured / input.nominal_ah).min(RETENTION_MAX),
        repeat_capacities_ah: repeats,
    })
}

/// Retention histogram and headline fractions. Defective cells count with
/// zero retention.
pub fn population_stats(reports: &[TriageReport]) -> Result<PopulationStats, TriageError> {
    if reports.is_empty() {
        return Err(TriageError::EmptyPopulation);
    }
    let bins = (RETENTION_MAX / RETENTION_BIN_WIDTH).round() as usize;
    let mut histogram = vec![0; bins];
    for r in reports {
        // nudge so that 0.7 lands in the 70 % bin despite 0.7 / 0.1 < 7
        let k = ((r.retention / RETENTION_BIN_WIDTH) + 1e-9).floor().max(0.0) as usize;
        histogram[k.min(bins - 1)] += 1;
    }
    let n = reports.len() as f64;
    let above_70 = reports.iter().filter(|r| r.retention > 0.7).count() as f64;
    let at_least_50 = reports.iter().filter(|r| r.retention >= 0.5).count() as f64;
    Ok(PopulationStats {
        count: reports.len(),
        defective: reports.iter().filter(|r| r.defective).count(),
        histogram,
        fraction_above_70: above_70 / n,
        fraction_at_least_50: at_least_50 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(true_ah: f64, nominal: f64) -> TriageCell {
        TriageCell {
            id: "c".into(),
            chemistry: Chemistry::NMC,
            capacity_true_ah: true_ah,
            nominal_ah: nominal,
            soc: 0.5,
            r_internal: DEFAULT_R_INTERNAL,
            initial_voltage_v: None,
        }
    }

    fn report(retention: f64) -> TriageReport {
        TriageReport {
            id: String::new(),
            initial_voltage: 3.7,
            defective: false,
            measured_capacity_ah: retention,
            retention,
            repeat_capacities_ah: Vec::new(),
        }
    }

    #[test]
    fn degraded_cell_retention() {
        let r = triage_protocol(&input(1.75, 2.5), &TriageOptions::default()).unwrap();
        assert!((r.retention - 0.7).abs() <= 0.01, "{}", r.retention);
        assert!(!r.defective);
    }

    #[test]
    fn healthy_cell_retention() {
        let r = triage_protocol(&input(2.5, 2.5), &TriageOptions::default()).unwrap();
        assert!((r.retention - 1.0).abs() <= 0.01, "{}", r.retention);
    }

    #[test]
    fn dead_cell_is_defective() {
        let c = TriageCell { initial_voltage_v: Some(0.5), ..input(2.0, 2.5) };
        let r = triage_protocol(&c, &TriageOptions::default()).unwrap();
        assert!(r.defective);
        assert_eq!(r.retention, 0.0);
    }

    #[test]
    fn repeated_tests_agree() {
        let opts = TriageOptions { repeat_capacity_tests: 2, ..Default::default() };
        let r = triage_protocol(&input(2.0, 2.5), &opts).unwrap();
        for q in &r.repeat_capacities_ah {
            assert!((q - r.measured_capacity_ah).abs() / r.measured_capacity_ah <= 0.01);
        }
    }

    #[test]
    fn zero_nominal_is_rejected() {
        assert!(matches!(triage_protocol(&input(1.0, 0.0), &TriageOptions::default()), Err(TriageError::NominalCapacity(_))));
    }

    #[test]
    fn stats_examples() {
        let one = population_stats(&[report(0.8)]).unwrap();
        assert_eq!((one.fraction_above_70, one.fraction_at_least_50), (1.0, 1.0));
        assert_eq!(one.histogram[8], 1);

        let pop: Vec<_> = [0.9, 0.75, 0.6, 0.3].iter().map(|&r| report(r)).collect();
        let s = population_stats(&pop).unwrap();
        assert_eq!(s.fraction_above_70, 0.5);
        assert_eq!(s.fraction_at_least_50, 0.75);
        assert_eq!(s.histogram.iter().sum::<usize>(), 4);
        assert_eq!(population_stats(&[report(0.7)]).unwrap().histogram[7], 1);
        assert_eq!(population_stats(&[]), Err(TriageError::EmptyPopulation));
    }
}
