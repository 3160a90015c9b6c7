use serde::{Deserialize, Serialize};

use super::BmsError;
use crate::cell::SECONDS_PER_HOUR;

/// Lowest bus voltage the default droop scaling allows at full load (V).
pub const V_FLOOR: f64 = 11.0;

/// Rectangular-rule charge integral of `(current A, dt s)` samples, in A·h.
pub fn coulomb_count(samples: &[(f64, f64)]) -> Result<f64, BmsError> {
    let mut q = 0.0;
    for (index, &(i, dt)) in samples.iter().enumerate() {
        if !(dt > 0.0) {
            return Err(BmsError::NonPositiveStep { index, dt });
        }
        q += i * dt;
    }
    Ok(q / SECONDS_PER_HOUR)
}

/// Running Coulomb counter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoulombCounter {
    ampere_seconds: f64,
    samples: u64,
}

impl CoulombCounter {
    pub fn add(&mut self, current: f64, dt: f64) {
        self.ampere_seconds += current * dt;
        self.samples += 1;
    }

    pub fn ah(&self) -> f64 {
        self.ampere_seconds / SECONDS_PER_HOUR
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Capacity estimate and the droop gain derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub q_est: f64,
    pub cycle_index: u32,
    pub last_discharge_q: f64,
    pub last_charge_q: f64,
    pub k_b: f64,
}

impl CapacityEstimate {
    pub fn new(q_est: f64, k_b: f64) -> Self {
        Self { q_est, cycle_index: 0, last_discharge_q: 0.0, last_charge_q: 0.0, k_b }
    }
}

/// Cycle-boundary update: adopt the measured capacity and rescale `k_b`.
pub fn update_kb(est: &CapacityEstimate, measured_q: f64, kb_scale: f64) -> Result<CapacityEstimate, BmsError> {
    if !(measured_q > 0.0) || !measured_q.is_finite() {
        return Err(BmsError::InvalidMeasurement(measured_q));
    }
    Ok(CapacityEstimate { q_est: measured_q, k_b: kb_scale / measured_q, cycle_index: est.cycle_index + 1, ..*est })
}

/// Droop scale (V·h) that keeps the bus above `v_floor` when every module
/// carries `full_load_cell_current` in total on the cell side.
///
/// With `k_b = kb_scale / q`, each module's droop is
/// `kb_scale * i_total / Σq`, which equals `v_ref - v_floor` at full load.
pub fn default_kb_scale(v_ref: f64, v_floor: f64, total_q_ah: f64, full_load_cell_current: f64) -> f64 {
    (v_ref - v_floor) * total_q_ah / full_load_cell_current
}
