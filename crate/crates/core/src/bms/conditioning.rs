//! Start-up conditioning: equal-current CCCV charge with a timed CV hold,
//! full discharge, corrected recharge. Each module's BMS counts charge on
//! its own; the estimates fall out of the cycle boundaries.

use serde::{Deserialize, Serialize};

use super::{BmsError, CapacityEstimate, SafetyLimits};
use crate::bus::{LoadModel, SourceModel};
use crate::converter::PowerModule;
use crate::system::{SystemConfig, SystemState, TelemetryEvent, TelemetryRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningOptions {
    pub system: SystemConfig,
    /// Bus voltage of the charging supply (V).
    pub charge_bus_v: f64,
    /// A phase that runs longer than this is abandoned (s).
    pub max_phase_s: f64,
}

impl Default for ConditioningOptions {
    fn default() -> Self {
        Self { system: SystemConfig::default(), charge_bus_v: 16.0, max_phase_s: 12.0 * 3600.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Charge,
    Discharge,
}

/// Outcome of one charge or discharge phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// 1-based count within its kind.
    pub index: u32,
    pub start_t: f64,
    /// Per-module completion time relative to `start_t`; `None` for modules
    /// that were not live or never completed.
    pub completion_s: Vec<Option<f64>>,
    /// `(max - min) / mean` of the live modules' completion times.
    pub spread: Option<f64>,
    pub timed_out: bool,
}

/// Relative spread of completion times; `None` if any is missing.
pub fn completion_spread(times: &[Option<f64>]) -> Option<f64> {
    let t: Vec<f64> = times.iter().copied().collect::<Option<Vec<_>>>()?;
    if t.is_empty() {
        return None;
    }
    let max = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = t.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    (mean > 0.0).then(|| (max - min) / mean)
}

/// Drives a pack through charge and discharge phases.
pub struct Conditioner {
    pub system: SystemState,
    pub charge_power: f64,
    pub discharge_power: f64,
    pub charge_bus_v: f64,
    pub max_phase_s: f64,
    charges: u32,
    discharges: u32,
}

impl Conditioner {
    pub fn new(mut system: SystemState, charge_power: f64, discharge_power: f64, opts: &ConditioningOptions) -> Self {
        system.config.shed_load_on_cutoff = true;
        Self {
            system,
            charge_power,
            discharge_power,
            charge_bus_v: opts.charge_bus_v,
            max_phase_s: opts.max_phase_s,
            charges: 0,
            discharges: 0,
        }
    }

    /// Charges every live module; with `cv_hold_s` the CV phase ends on time
    /// instead of on the cutoff current.
    pub fn charge(&mut self, cv_hold_s: Option<f64>, sink: &mut dyn FnMut(&TelemetryRecord)) -> PhaseRecord {
        for m in self.system.modules.iter_mut() {
            m.cv_hold_limit_s = cv_hold_s;
        }
        self.system.load = LoadModel::None;
        self.system.attach_source(SourceModel::PowerLimited { watts: self.charge_power, volts: self.charge_bus_v });
        self.charges += 1;
        let rec = self.run_phase(Phase::Charge, self.charges, sink);
        for m in self.system.modules.iter_mut() {
            m.cv_hold_limit_s = None;
        }
        rec
    }

    /// Discharges every live module to cut-off at constant total power.
    pub fn discharge(&mut self, sink: &mut dyn FnMut(&TelemetryRecord)) -> PhaseRecord {
        self.system.detach_source();
        self.system.load = LoadModel::ConstantPower(self.discharge_power);
        self.discharges += 1;
        let rec = self.run_phase(Phase::Discharge, self.discharges, sink);
        self.system.load = LoadModel::None;
        rec
    }

    fn run_phase(&mut self, phase: Phase, index: u32, sink: &mut dyn FnMut(&TelemetryRecord)) -> PhaseRecord {
        let start_t = self.system.time();
        let n = self.system.modules.len();
        let live: Vec<bool> = self.system.modules.iter().map(|m| m.is_live()).collect();
        let mut completion = vec![None; n];
        let mut timed_out = false;
        // a module may already be full (or empty) when the phase opens
        loop {
            let rec = self.system.step(&[]);
            for ev in &rec.events {
                match (phase, ev) {
                    (Phase::Charge, TelemetryEvent::ChargeComplete { module, .. })
                    | (Phase::Discharge, TelemetryEvent::CutOff { module, .. }) => {
                        completion[*module] = Some(rec.t - start_t);
                    }
                    _ => {}
                }
            }
            sink(&rec);
            let done = match phase {
                Phase::Charge => self.system.all_charged(),
                Phase::Discharge => self.system.all_depleted(),
            };
            if done {
                break;
            }
            if self.system.time() - start_t > self.max_phase_s {
                timed_out = true;
                break;
            }
        }
        let completion_s: Vec<Option<f64>> = completion
            .into_iter()
            .zip(&live)
            .zip(&self.system.modules)
            .map(|((c, &was_live), m)| if was_live && m.is_live() { c } else { None })
            .collect();
        let still_live: Vec<Option<f64>> =
            completion_s.iter().zip(&self.system.modules).filter(|(_, m)| m.is_live()).map(|(c, _)| *c).collect();
        PhaseRecord { phase, index, start_t, spread: completion_spread(&still_live), completion_s, timed_out }
    }
}

/// Runs the three start-up steps and returns each module's final estimate.
/// Modules shut down by the safety monitor keep their last estimate.
pub fn conditioning_cycle(
    modules: Vec<PowerModule>,
    limits: Vec<SafetyLimits>,
    charge_power: f64,
    discharge_power: f64,
    opts: &ConditioningOptions,
) -> Result<Vec<CapacityEstimate>, BmsError> {
    if let Some(k) = modules.iter().position(|m| !m.is_live()) {
        return Err(BmsError::Conditioning(format!("module {k} is not healthy")));
    }
    if !(charge_power > 0.0 && discharge_power > 0.0) {
        return Err(BmsError::Conditioning("charge and discharge power must be positive".into()));
    }
    let hold = opts.system.cv_time_limit_s;
    let system = SystemState::new(modules, limits, LoadModel::None, opts.system.clone());
    let mut c = Conditioner::new(system, charge_power, discharge_power, opts);
    let mut sink = |_: &TelemetryRecord| {};
    for rec in [c.charge(Some(hold), &mut sink), c.discharge(&mut sink), c.charge(None, &mut sink)] {
        if rec.timed_out {
            return Err(BmsError::Conditioning(format!("{:?} phase {} timed out", rec.phase, rec.index)));
        }
    }
    Ok(c.system.modules.iter().map(|m| m.bms.estimate).collect())
}
