use serde::{Deserialize, Serialize};

use super::BmsError;
use crate::cell::{ChemistryProfile, CellState};
use crate::converter::Mode;

/// Hardware sampling rate of the monitor (Hz). The simulator checks every step.
pub const SAMPLE_RATE_HZ: f64 = 5000.0;

/// Operating envelope enforced by the safety monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyLimits {
    pub t_max: f64,
    pub t_min_charge: f64,
    pub t_min_discharge: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub i_max: f64,
    pub sample_rate_hz: f64,
}

/// Optional per-scenario tightening of [`SafetyLimits`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyOverrides {
    pub t_max: Option<f64>,
    pub t_min_charge: Option<f64>,
    pub t_min_discharge: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub i_max: Option<f64>,
}

impl SafetyLimits {
    pub fn for_profile(profile: &ChemistryProfile) -> Self {
        Self {
            t_max: profile.t_max,
            t_min_charge: profile.t_min_charge,
            t_min_discharge: profile.t_min_discharge,
            v_min: profile.v_min,
            v_max: profile.v_max,
            i_max: profile.i_max,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }

    /// Applies overrides; each may only make the envelope narrower.
    pub fn tightened(mut self, o: &SafetyOverrides) -> Result<Self, BmsError> {
        fn lower(field: &'static str, cur: &mut f64, req: Option<f64>) -> Result<(), BmsError> {
            match req {
                Some(r) if r > *cur || r.is_nan() => Err(BmsError::LooserOverride { field, requested: r, current: *cur }),
                Some(r) => {
                    *cur = r;
                    Ok(())
                }
                None => Ok(()),
            }
        }
        fn raise(field: &'static str, cur: &mut f64, req: Option<f64>) -> Result<(), BmsError> {
            match req {
                Some(r) if r < *cur || r.is_nan() => Err(BmsError::LooserOverride { field, requested: r, current: *cur }),
                Some(r) => {
                    *cur = r;
                    Ok(())
                }
                None => Ok(()),
            }
        }
        lower("t_max", &mut self.t_max, o.t_max)?;
        raise("t_min_charge", &mut self.t_min_charge, o.t_min_charge)?;
        raise("t_min_discharge", &mut self.t_min_discharge, o.t_min_discharge)?;
        raise("v_min", &mut self.v_min, o.v_min)?;
        lower("v_max", &mut self.v_max, o.v_max)?;
        lower("i_max", &mut self.i_max, o.i_max)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShutdownReason {
    CellFailed,
    OverTemperature,
    UnderTemperatureCharge,
    UnderTemperatureDischarge,
    OverVoltage,
    UnderVoltage,
    OverCurrent,
}

impl std::fmt::Display for ShutdownReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ShutdownReason::CellFailed => "cell-failed",
            ShutdownReason::OverTemperature => "over-temperature",
            ShutdownReason::UnderTemperatureCharge => "under-temperature-charge",
            ShutdownReason::UnderTemperatureDischarge => "under-temperature-discharge",
            ShutdownReason::OverVoltage => "over-voltage",
            ShutdownReason::UnderVoltage => "under-voltage",
            ShutdownReason::OverCurrent => "over-current",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafetyVerdict {
    Ok,
    Shutdown(ShutdownReason),
}

/// Evaluates one sample against the limits.
///
/// The cell counts as charging when the mode is 2 or 3 or the current is
/// negative. Reasons are reported in this order: failed cell, temperature,
/// voltage, current. The voltage window is inclusive.
pub fn check_safety(cell: &CellState, mode: Mode, i_cell: f64, limits: &SafetyLimits) -> SafetyVerdict {
    use ShutdownReason::*;
    if cell.failed {
        return SafetyVerdict::Shutdown(CellFailed);
    }
    let charging = mode.is_charging() || i_cell < 0.0;
    let t = cell.temperature;
    if t > limits.t_max {
        return SafetyVerdict::Shutdown(OverTemperature);
    }
    if charging && t < limits.t_min_charge {
        return SafetyVerdict::Shutdown(UnderTemperatureCharge);
    }
    if !charging && t < limits.t_min_discharge {
        return SafetyVerdict::Shutdown(UnderTemperatureDischarge);
    }
    let v = cell.ocv() - i_cell * cell.r_internal;
    if v > limits.v_max {
        return SafetyVerdict::Shutdown(OverVoltage);
    }
    if v < limits.v_min {
        return SafetyVerdict::Shutdown(UnderVoltage);
    }
    if i_cell.abs() > limits.i_max {
        return SafetyVerdict::Shutdown(OverCurrent);
    }
    SafetyVerdict::Ok
}
