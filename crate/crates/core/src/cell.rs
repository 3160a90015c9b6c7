//! Equivalent-circuit Li-ion cell: a piecewise-linear OCV curve in series
//! with an internal resistance, with SOC tracked by Coulomb integration.
//!
//! Currents follow the discharge-positive convention everywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds per hour, for ampere-hour bookkeeping.
pub const SECONDS_PER_HOUR: f64 = 3600.0;

/// Default internal resistance (ohms) for a simulated cell.
pub const DEFAULT_R_INTERNAL: f64 = 0.05;

/// Default exogenous cell temperature (°C).
pub const DEFAULT_TEMPERATURE_C: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error("state of charge {0} outside [0, 1]")]
    SocDomain(f64),
    #[error("cell has failed (open circuit)")]
    Failed,
    #[error("over-discharge: state of charge would reach {soc} ({overshoot} below 0)")]
    OverDischarge { soc: f64, overshoot: f64 },
    #[error("over-charge: state of charge would reach {soc} ({overshoot} above 1)")]
    OverCharge { soc: f64, overshoot: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("invalid cell parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid chemistry profile {name}: {reason}")]
    InvalidProfile { name: String, reason: String },
}

/// Cathode chemistry family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chemistry {
    NMC,
    LFP,
    NCA,
    LCO,
}

impl Chemistry {
    pub const ALL: [Chemistry; 4] = [Chemistry::NMC, Chemistry::LFP, Chemistry::NCA, Chemistry::LCO];

    pub fn as_str(self) -> &'static str {
        match self {
            Chemistry::NMC => "NMC",
            Chemistry::LFP => "LFP",
            Chemistry::NCA => "NCA",
            Chemistry::LCO => "LCO",
        }
    }
}

impl std::fmt::Display for Chemistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// Shared SOC knots for the layered-oxide curves: dense near empty so the
// low-SOC knee is steep.
const OXIDE_SOC: [f64; 11] = [0.0, 0.01, 0.03, 0.07, 0.15, 0.30, 0.45, 0.60, 0.75, 0.90, 1.0];
const NMC_OCV: [f64; 11] = [3.00, 3.30, 3.42, 3.50, 3.58, 3.66, 3.74, 3.84, 3.96, 4.08, 4.20];
const NCA_OCV: [f64; 11] = [3.00, 3.28, 3.40, 3.48, 3.56, 3.64, 3.72, 3.82, 3.94, 4.07, 4.20];
const LCO_OCV: [f64; 11] = [3.00, 3.35, 3.50, 3.60, 3.68, 3.74, 3.80, 3.88, 3.98, 4.09, 4.20];
// LFP: flat plateau around 3.3 V with sharp knees at both ends.
const LFP_SOC: [f64; 11] = [0.0, 0.01, 0.03, 0.07, 0.15, 0.30, 0.50, 0.70, 0.90, 0.97, 1.0];
const LFP_OCV: [f64; 11] = [2.00, 2.80, 3.05, 3.20, 3.25, 3.28, 3.30, 3.32, 3.34, 3.40, 3.60];

/// OCV curve and operating limits for one cathode chemistry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemistryProfile {
    pub name: Chemistry,
    /// `(soc, ocv)` knots, strictly increasing in SOC.
    pub ocv_table: Vec<(f64, f64)>,
    pub v_max: f64,
    pub v_min: f64,
    pub t_max: f64,
    pub t_min_charge: f64,
    pub t_min_discharge: f64,
    pub i_max: f64,
}

impl ChemistryProfile {
    /// Built-in profile with the safety-limit defaults.
    pub fn default_for(name: Chemistry) -> Self {
        let (socs, ocvs): (&[f64], &[f64]) = match name {
            Chemistry::NMC => (&OXIDE_SOC, &NMC_OCV),
            Chemistry::NCA => (&OXIDE_SOC, &NCA_OCV),
            Chemistry::LCO => (&OXIDE_SOC, &LCO_OCV),
            Chemistry::LFP => (&LFP_SOC, &LFP_OCV),
        };
        let (v_min, v_max) = match name {
            Chemistry::LFP => (2.0, 3.6),
            _ => (3.0, 4.2),
        };
        Self {
            name,
            ocv_table: socs.iter().copied().zip(ocvs.iter().copied()).collect(),
            v_max,
            v_min,
            t_max: 60.0,
            t_min_charge: 0.0,
            t_min_discharge: -10.0,
            i_max: 3.0,
        }
    }

    pub fn nmc() -> Self {
        Self::default_for(Chemistry::NMC)
    }

    pub fn lfp() -> Self {
        Self::default_for(Chemistry::LFP)
    }

    pub fn nca() -> Self {
        Self::default_for(Chemistry::NCA)
    }

    pub fn lco() -> Self {
        Self::default_for(Chemistry::LCO)
    }

    /// Checks the table shape and the endpoint constraints.
    pub fn validate(&self) -> Result<(), CellError> {
        let bad = |reason: String| CellError::InvalidProfile { name: self.name.to_string(), reason };
        let t = &self.ocv_table;
        if t.len() < 2 {
            return Err(bad("ocv_table needs at least two knots".into()));
        }
        if t.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
            return Err(bad("ocv_table contains non-finite values".into()));
        }
        for w in t.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(bad(format!("soc knots not strictly increasing at {}", w[1].0)));
            }
            if w[1].1 < w[0].1 {
                return Err(bad(format!("ocv decreases at soc {}", w[1].0)));
            }
        }
        let (first, last) = (t[0], t[t.len() - 1]);
        if first.0 != 0.0 || last.0 != 1.0 {
            return Err(bad("ocv_table must span soc 0 to 1".into()));
        }
        if first.1 != self.v_min || last.1 != self.v_max {
            return Err(bad("ocv(0) must equal v_min and ocv(1) must equal v_max".into()));
        }
        if !(self.v_min < self.v_max) {
            return Err(bad("v_min must be below v_max".into()));
        }
        if !(self.i_max > 0.0) {
            return Err(bad("i_max must be positive".into()));
        }
        if !(self.t_min_discharge <= self.t_min_charge && self.t_min_charge < self.t_max) {
            return Err(bad("temperature limits must satisfy t_min_discharge <= t_min_charge < t_max".into()));
        }
        Ok(())
    }
}

/// Open-circuit voltage at `soc` by linear interpolation over the table.
pub fn ocv(profile: &ChemistryProfile, soc: f64) -> Result<f64, CellError> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(CellError::SocDomain(soc));
    }
    let t = &profile.ocv_table;
    // first knot with soc_k >= soc
    let idx = t.partition_point(|&(s, _)| s < soc);
    if idx == 0 {
        return Ok(t[0].1);
    }
    if idx == t.len() {
        return Ok(t[t.len() - 1].1);
    }
    let (s0, v0) = t[idx - 1];
    let (s1, v1) = t[idx];
    if soc == s1 {
        return Ok(v1);
    }
    Ok(v0 + (v1 - v0) * (soc - s0) / (s1 - s0))
}

/// Inverse of [`ocv`]: the lowest SOC whose OCV reaches `v`, clamped to [0, 1].
pub fn soc_from_ocv(profile: &ChemistryProfile, v: f64) -> f64 {
    let t = &profile.ocv_table;
    if v <= t[0].1 {
        return 0.0;
    }
    if v >= t[t.len() - 1].1 {
        return 1.0;
    }
    let idx = t.partition_point(|&(_, o)| o < v);
    let (s0, v0) = t[idx - 1];
    let (s1, v1) = t[idx];
    if v1 == v0 {
        return s0;
    }
    s0 + (s1 - s0) * (v - v0) / (v1 - v0)
}

/// The simulated physical cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub chemistry: ChemistryProfile,
    /// Ampere-hours.
    pub capacity_true: f64,
    pub soc: f64,
    pub r_internal: f64,
    /// °C, exogenous.
    pub temperature: f64,
    pub failed: bool,
}

impl CellState {
    pub fn new(chemistry: ChemistryProfile, capacity_ah: f64, soc: f64) -> Result<Self, CellError> {
        Self::with_params(chemistry, capacity_ah, soc, DEFAULT_R_INTERNAL, DEFAULT_TEMPERATURE_C)
    }

    pub fn with_params(
        chemistry: ChemistryProfile,
        capacity_ah: f64,
        soc: f64,
        r_internal: f64,
        temperature: f64,
    ) -> Result<Self, CellError> {
        chemistry.validate()?;
        if !(capacity_ah > 0.0 && capacity_ah.is_finite()) {
            return Err(CellError::InvalidParameter(format!("capacity must be positive, got {capacity_ah}")));
        }
        if !(0.0..=1.0).contains(&soc) {
            return Err(CellError::SocDomain(soc));
        }
        if !(r_internal >= 0.0 && r_internal.is_finite()) {
            return Err(CellError::InvalidParameter(format!("r_internal must be >= 0, got {r_internal}")));
        }
        if !temperature.is_finite() {
            return Err(CellError::InvalidParameter("temperature must be finite".into()));
        }
        Ok(Self { chemistry, capacity_true: capacity_ah, soc, r_internal, temperature, failed: false })
    }

    pub fn ocv(&self) -> f64 {
        // soc is kept inside [0, 1] by construction and by step_cell
        ocv(&self.chemistry, self.soc).expect("cell soc within [0, 1]")
    }

    /// Charge the cell can still deliver (A·h).
    pub fn remaining_ah(&self) -> f64 {
        self.soc * self.capacity_true
    }
}

/// `v = ocv(soc) - current * r_internal`.
pub fn terminal_voltage(cell: &CellState, current: f64) -> Result<f64, CellError> {
    if cell.failed {
        return Err(CellError::Failed);
    }
    Ok(cell.ocv() - current * cell.r_internal)
}

/// SOC after drawing `current` for `dt` seconds, without range checks.
pub fn soc_after(cell: &CellState, current: f64, dt: f64) -> f64 {
    cell.soc - current * dt / (cell.capacity_true * SECONDS_PER_HOUR)
}

/// Integrates one step of cell current (rectangular rule, unit coulombic efficiency).
pub fn step_cell(cell: &CellState, current: f64, dt: f64) -> Result<CellState, CellError> {
    if !(dt > 0.0) {
        return Err(CellError::NonPositiveStep(dt));
    }
    let soc = soc_after(cell, current, dt);
    if soc < 0.0 {
        return Err(CellError::OverDischarge { soc, overshoot: -soc });
    }
    if soc > 1.0 {
        return Err(CellError::OverCharge { soc, overshoot: soc - 1.0 });
    }
    Ok(CellState { soc, ..cell.clone() })
}

/// Open-circuit failure: the cell no longer passes current.
pub fn fail_cell(cell: &CellState) -> CellState {
    CellState { failed: true, ..cell.clone() }
}
