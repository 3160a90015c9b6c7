//! Shared DC bus: droop sources in parallel with a load, and the PV source curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converter::Characteristic;

/// Newton tolerance on the bus voltage (V).
pub const NEWTON_TOL_V: f64 = 1e-9;
pub const NEWTON_MAX_ITER: usize = 100;
/// Open-circuit voltage derating above 25 °C (fraction per °C).
pub const PV_VOC_DERATE_PER_C: f64 = 0.003;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("no module is sourcing the bus")]
    NoSource,
    #[error("module {index} has non-positive droop resistance {r}")]
    InvalidDroop { index: usize, r: f64 },
    #[error("invalid load: {0}")]
    InvalidLoad(String),
    #[error("load of {p_load} W exceeds the {p_max} W the sources can deliver")]
    Infeasible { p_load: f64, p_max: f64 },
    #[error("bus solve did not converge; iterates {trace:?}")]
    Diverged { trace: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LoadModel {
    /// Ohms.
    Resistive(f64),
    /// Watts.
    ConstantPower(f64),
    None,
}

impl LoadModel {
    /// Load current drawn at bus voltage `v`.
    pub fn current_at(&self, v: f64) -> f64 {
        match *self {
            LoadModel::Resistive(r) => v / r,
            LoadModel::ConstantPower(p) if v > 0.0 => p / v,
            LoadModel::ConstantPower(_) | LoadModel::None => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), BusError> {
        match *self {
            LoadModel::Resistive(r) if !(r > 0.0 && r.is_finite()) => {
                Err(BusError::InvalidLoad(format!("resistance must be > 0, got {r}")))
            }
            LoadModel::ConstantPower(p) if !(p >= 0.0 && p.is_finite()) => {
                Err(BusError::InvalidLoad(format!("power must be >= 0, got {p}")))
            }
            _ => Ok(()),
        }
    }
}

/// Parametric PV panel: `i = irradiance * i_sc * (1 - (v / v_oc)^shape)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvParams {
    pub v_oc: f64,
    pub i_sc: f64,
    pub shape: f64,
    #[serde(default = "one")]
    pub irradiance: f64,
    #[serde(default = "ambient")]
    pub temperature_c: f64,
}

fn one() -> f64 {
    1.0
}

fn ambient() -> f64 {
    25.0
}

impl PvParams {
    /// Open-circuit voltage after temperature derating.
    pub fn v_oc_effective(&self) -> f64 {
        let excess = (self.temperature_c - 25.0).max(0.0);
        self.v_oc * (1.0 - PV_VOC_DERATE_PER_C * excess)
    }

    pub fn i_short_circuit(&self) -> f64 {
        self.irradiance * self.i_sc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceModel {
    /// Stiff supply.
    Grid { volts: f64 },
    Pv(PvParams),
    /// Supply that delivers a fixed power at a nominal voltage; modules split
    /// it in proportion to their droop conductance.
    PowerLimited { watts: f64, volts: f64 },
}

impl SourceModel {
    /// Voltage a module sees at its output before it draws any current.
    pub fn open_circuit_voltage(&self) -> f64 {
        match self {
            SourceModel::Grid { volts } | SourceModel::PowerLimited { volts, .. } => *volts,
            SourceModel::Pv(p) => p.v_oc_effective(),
        }
    }
}

/// One timestep's bus operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSolution {
    pub v_bus: f64,
    pub i_out: Vec<f64>,
    pub i_cell: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

struct Aggregate {
    conductance: f64,
    weighted_v0: f64,
}

fn aggregate(chars: &[Option<Characteristic>]) -> Result<Aggregate, BusError> {
    let mut agg = Aggregate { conductance: 0.0, weighted_v0: 0.0 };
    let mut any = false;
    for (index, c) in chars.iter().enumerate() {
        if let Some(c) = c {
            if !(c.r_droop > 0.0 && c.r_droop.is_finite()) {
                return Err(BusError::InvalidDroop { index, r: c.r_droop });
            }
            agg.conductance += 1.0 / c.r_droop;
            agg.weighted_v0 += c.v0 / c.r_droop;
            any = true;
        }
    }
    if !any {
        return Err(BusError::NoSource);
    }
    Ok(agg)
}

fn currents_at(chars: &[Option<Characteristic>], v: f64) -> Vec<f64> {
    chars.iter().map(|c| c.map_or(0.0, |c| (c.v0 - v) / c.r_droop)).collect()
}

/// Closed-form solve with a resistive load. `None` entries are excluded modules.
pub fn solve_bus_resistive(chars: &[Option<Characteristic>], r_load: f64) -> Result<BusSolution, BusError> {
    LoadModel::Resistive(r_load).validate()?;
    let agg = aggregate(chars)?;
    let v_bus = agg.weighted_v0 / (agg.conductance + 1.0 / r_load);
    Ok(BusSolution { v_bus, i_out: currents_at(chars, v_bus), i_cell: Vec::new(), converged: true, iterations: 1 })
}

/// Open-circuit solve: every module idles at the conductance-weighted mean of `v0`.
pub fn solve_bus_unloaded(chars: &[Option<Characteristic>]) -> Result<BusSolution, BusError> {
    let agg = aggregate(chars)?;
    let v_bus = agg.weighted_v0 / agg.conductance;
    Ok(BusSolution { v_bus, i_out: currents_at(chars, v_bus), i_cell: Vec::new(), converged: true, iterations: 0 })
}

/// Constant-power load: high-voltage root of `v * Σ(v0_i - v)/r_i = p_load`
/// by Newton iteration safeguarded with bisection.
pub fn solve_bus_constant_power(chars: &[Option<Characteristic>], p_load: f64) -> Result<BusSolution, BusError> {
    LoadModel::ConstantPower(p_load).validate()?;
    let agg = aggregate(chars)?;
    let (g, a) = (agg.conductance, agg.weighted_v0);
    let v_open = a / g;
    if p_load == 0.0 {
        return solve_bus_unloaded(chars);
    }
    let v_peak = a / (2.0 * g);
    let p_max = a * a / (4.0 * g);
    if p_load > p_max {
        return Err(BusError::Infeasible { p_load, p_max });
    }

    // f decreases on [v_peak, v_open]: f(v_peak) >= 0 >= f(v_open)
    let f = |v: f64| v * (a - g * v) - p_load;
    let (mut lo, mut hi) = (v_peak, v_open);
    let mut v = v_open;
    let mut trace = Vec::with_capacity(NEWTON_MAX_ITER);
    for iter in 1..=NEWTON_MAX_ITER {
        let fv = f(v);
        if fv == 0.0 {
            return Ok(BusSolution { v_bus: v, i_out: currents_at(chars, v), i_cell: Vec::new(), converged: true, iterations: iter });
        }
        if fv > 0.0 {
            lo = v;
        } else {
            hi = v;
        }
        let slope = a - 2.0 * g * v;
        let mut next = if slope != 0.0 { v - fv / slope } else { f64::NAN };
        if !(next >= lo && next <= hi) {
            next = 0.5 * (lo + hi);
        }
        trace.push(next);
        let step = (next - v).abs();
        v = next;
        if step < NEWTON_TOL_V {
            // one more Newton step takes the quadratic convergence to machine
            // precision, which keeps the current balance well inside 1e-9 A
            let slope = a - 2.0 * g * v;
            if slope != 0.0 {
                let polished = v - f(v) / slope;
                if polished >= lo && polished <= hi {
                    v = polished;
                }
            }
            return Ok(BusSolution { v_bus: v, i_out: currents_at(chars, v), i_cell: Vec::new(), converged: true, iterations: iter });
        }
    }
    Err(BusError::Diverged { trace })
}

/// Solves with whichever load model is attached.
pub fn solve_bus(chars: &[Option<Characteristic>], load: &LoadModel) -> Result<BusSolution, BusError> {
    match *load {
        LoadModel::Resistive(r) => solve_bus_resistive(chars, r),
        LoadModel::ConstantPower(p) => solve_bus_constant_power(chars, p),
        LoadModel::None => solve_bus_unloaded(chars),
    }
}

/// Panel current at terminal voltage `v`.
pub fn pv_current(pv: &PvParams, v: f64) -> f64 {
    let v_oc = pv.v_oc_effective();
    if v >= v_oc {
        return 0.0;
    }
    let x = (v.max(0.0) / v_oc).powf(pv.shape);
    pv.i_short_circuit() * (1.0 - x)
}

/// Panel voltage at which it delivers current `i` (inverse of [`pv_current`]).
pub fn pv_voltage(pv: &PvParams, i: f64) -> f64 {
    let isc = pv.i_short_circuit();
    if isc <= 0.0 || i >= isc {
        return 0.0;
    }
    let frac = 1.0 - i.max(0.0) / isc;
    pv.v_oc_effective() * frac.powf(1.0 / pv.shape)
}
