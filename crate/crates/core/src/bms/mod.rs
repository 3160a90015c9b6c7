//! Per-module battery management: safety monitor, Coulomb-counting capacity
//! estimation with droop-gain updates, LFP detection and P&O MPPT.
//!
//! Every BMS instance is confined to its own module. Nothing here looks at
//! another module's state.

mod capacity;
pub mod conditioning;
mod lfp;
mod mppt;
mod safety;

pub use capacity::{coulomb_count, default_kb_scale, update_kb, CapacityEstimate, CoulombCounter, V_FLOOR};
pub use conditioning::{conditioning_cycle, ConditioningOptions};
pub use lfp::{detect_lfp, GRADIENT_RATIO, KNEE_MAX_V, MIN_TRACE_POINTS};
pub use mppt::{mppt_step, MpptState, DEFAULT_MPPT_STEP_A};
pub use safety::{check_safety, SafetyLimits, SafetyOverrides, SafetyVerdict, ShutdownReason};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BmsError {
    #[error("sample {index} has non-positive time step {dt}")]
    NonPositiveStep { index: usize, dt: f64 },
    #[error("measured capacity must be positive, got {0}")]
    InvalidMeasurement(f64),
    #[error("charge trace has {got} usable points, need at least {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("safety override for {field} loosens the limit ({requested} vs {current})")]
    LooserOverride { field: &'static str, requested: f64, current: f64 },
    #[error("conditioning cycle failed: {0}")]
    Conditioning(String),
}

/// Bookkeeping the BMS carries between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BmsState {
    pub estimate: CapacityEstimate,
    /// Charge delivered since the last charge ended.
    pub discharge_count: CoulombCounter,
    /// Charge absorbed since the last discharge ended.
    pub charge_count: CoulombCounter,
    /// The running discharge started from a completed charge.
    pub full_reference: bool,
    /// The running charge started from a discharge cut-off.
    pub empty_reference: bool,
    pub mppt: Option<MpptState>,
    /// `(terminal V, charged A·h)` samples recorded during Mode 2.
    pub charge_trace: Vec<(f64, f64)>,
    pub lfp_detected: Option<bool>,
}

impl BmsState {
    pub fn new(estimate: CapacityEstimate) -> Self {
        Self {
            estimate,
            discharge_count: CoulombCounter::default(),
            charge_count: CoulombCounter::default(),
            full_reference: false,
            empty_reference: false,
            mppt: None,
            charge_trace: Vec::new(),
            lfp_detected: None,
        }
    }
}
