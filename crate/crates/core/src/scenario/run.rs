use serde::{Deserialize, Serialize};

use super::{ScenarioConfig, ScenarioError};
use crate::bms::conditioning::{completion_spread, Conditioner, Phase, PhaseRecord};
use crate::bms::{ConditioningOptions, ShutdownReason};
use crate::cell::SECONDS_PER_HOUR;
use crate::system::{EventKind, SystemState, TelemetryEvent, TelemetryRecord};

/// Hard stop for runs that never reach their termination condition.
pub const MAX_STEPS: u64 = 50_000_000;

/// Summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: u64,
    pub duration_s: f64,
    /// Steps whose bus solve converged with a supplied bus.
    pub v_bus_samples: u64,
    pub v_bus_mean: f64,
    /// Population variance (V²).
    pub v_bus_variance: f64,
    pub v_bus_std: f64,
    pub v_bus_min: f64,
    pub v_bus_max: f64,
    /// True charge each cell delivered (A·h).
    pub discharged_ah: Vec<f64>,
    pub charged_ah: Vec<f64>,
    /// First cut-off time of each module (s).
    pub cutoff_time_s: Vec<Option<f64>>,
    pub cycles: Vec<PhaseRecord>,
    pub final_q_est: Vec<f64>,
    pub final_k_b: Vec<f64>,
    pub shutdowns: Vec<Option<ShutdownReason>>,
    pub events: u64,
}

impl RunMetrics {
    /// Spreads of the discharge phases in order.
    pub fn discharge_spreads(&self) -> Vec<Option<f64>> {
        self.cycles.iter().filter(|c| c.phase == Phase::Discharge).map(|c| c.spread).collect()
    }
}

/// Sample mean and population variance, two-pass.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

struct OpenPhase {
    phase: Phase,
    index: u32,
    start_t: f64,
    live: Vec<bool>,
    completion: Vec<Option<f64>>,
}

/// Folds telemetry into [`RunMetrics`].
pub struct MetricsAccumulator {
    n: usize,
    steps: u64,
    end_t: f64,
    v: Vec<f64>,
    discharged_as: Vec<f64>,
    charged_as: Vec<f64>,
    cutoff: Vec<Option<f64>>,
    shutdowns: Vec<Option<ShutdownReason>>,
    events: u64,
    open: Option<OpenPhase>,
    phases: Vec<PhaseRecord>,
    counts: (u32, u32),
    track_phases: bool,
}

impl MetricsAccumulator {
    pub fn new(n: usize, track_phases: bool) -> Self {
        Self {
            n,
            steps: 0,
            end_t: 0.0,
            v: Vec::new(),
            discharged_as: vec![0.0; n],
            charged_as: vec![0.0; n],
            cutoff: vec![None; n],
            shutdowns: vec![None; n],
            events: 0,
            open: None,
            phases: Vec::new(),
            counts: (0, 0),
            track_phases,
        }
    }

    fn close_phase(&mut self, end_live: &[bool]) {
        if let Some(p) = self.open.take() {
            let completion_s: Vec<Option<f64>> = (0..self.n).map(|k| if p.live[k] && end_live[k] { p.completion[k] } else { None }).collect();
            let survivors: Vec<Option<f64>> = (0..self.n).filter(|&k| end_live[k]).map(|k| p.completion[k]).collect();
            self.phases.push(PhaseRecord {
                phase: p.phase,
                index: p.index,
                start_t: p.start_t,
                spread: completion_spread(&survivors),
                completion_s,
                timed_out: false,
            });
        }
    }

    /// Consumes one record. `source_attached` and `live` describe the pack
    /// during that step.
    pub fn observe(&mut self, rec: &TelemetryRecord, dt: f64, source_attached: bool, live: &[bool]) {
        self.steps += 1;
        self.end_t = rec.t + dt;
        if rec.converged && rec.v_bus > 0.0 {
            self.v.push(rec.v_bus);
        }
        for (k, m) in rec.modules.iter().enumerate() {
            if m.i_cell > 0.0 {
                self.discharged_as[k] += m.i_cell * dt;
            } else {
                self.charged_as[k] -= m.i_cell * dt;
            }
        }
        if self.track_phases {
            let phase = if source_attached { Phase::Charge } else { Phase::Discharge };
            if self.open.as_ref().map(|p| p.phase) != Some(phase) {
                self.close_phase(live);
                let index = match phase {
                    Phase::Charge => {
                        self.counts.0 += 1;
                        self.counts.0
                    }
                    Phase::Discharge => {
                        self.counts.1 += 1;
                        self.counts.1
                    }
                };
                self.open = Some(OpenPhase { phase, index, start_t: rec.t, live: live.to_vec(), completion: vec![None; self.n] });
            }
        }
        for ev in &rec.events {
            self.events += 1;
            match *ev {
                TelemetryEvent::CutOff { module, .. } => {
                    self.cutoff[module].get_or_insert(rec.t);
                    if let Some(p) = self.open.as_mut().filter(|p| p.phase == Phase::Discharge) {
                        p.completion[module].get_or_insert(rec.t - p.start_t);
                    }
                }
                TelemetryEvent::ChargeComplete { module, .. } => {
                    if let Some(p) = self.open.as_mut().filter(|p| p.phase == Phase::Charge) {
                        p.completion[module].get_or_insert(rec.t - p.start_t);
                    }
                }
                TelemetryEvent::SafetyShutdown { module, reason } => {
                    self.shutdowns[module].get_or_insert(reason);
                }
                _ => {}
            }
        }
    }

    pub fn finish(mut self, system: &SystemState, extra_phases: Vec<PhaseRecord>) -> RunMetrics {
        let live: Vec<bool> = system.modules.iter().map(|m| m.is_live()).collect();
        self.close_phase(&live);
        let (mean, var) = mean_variance(&self.v);
        let min = self.v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut cycles = self.phases;
        cycles.extend(extra_phases);
        RunMetrics {
            steps: self.steps,
            duration_s: self.end_t,
            v_bus_samples: self.v.len() as u64,
            v_bus_mean: mean,
            v_bus_variance: var,
            v_bus_std: var.sqrt(),
            v_bus_min: if self.v.is_empty() { 0.0 } else { min },
            v_bus_max: if self.v.is_empty() { 0.0 } else { max },
            discharged_ah: self.discharged_as.iter().map(|q| q / SECONDS_PER_HOUR).collect(),
            charged_ah: self.charged_as.iter().map(|q| q / SECONDS_PER_HOUR).collect(),
            cutoff_time_s: self.cutoff,
            cycles,
            final_q_est: system.modules.iter().map(|m| m.q_est()).collect(),
            final_k_b: system.modules.iter().map(|m| m.k_b()).collect(),
            shutdowns: self.shutdowns,
            events: self.events,
        }
    }
}

fn build_system(config: &ScenarioConfig) -> Result<SystemState, ScenarioError> {
    let (modules, limits) = config.build_modules()?;
    let mut sys = SystemState::new(modules, limits, config.load, config.system_config());
    sys.source = config.source;
    Ok(sys)
}

/// Runs a scenario, handing each record to `sink` as it is produced.
pub fn run_scenario_with(config: &ScenarioConfig, sink: &mut dyn FnMut(&TelemetryRecord)) -> Result<RunMetrics, ScenarioError> {
    config.validate()?;
    if config.conditioning.is_some() {
        return run_conditioning_with(config, sink);
    }
    let mut sys = build_system(config)?;
    let dt = config.dt_s;
    // tolerance for event times that are not exact multiples of dt
    let eps = 1e-9 * dt;
    let mut acc = MetricsAccumulator::new(sys.modules.len(), true);
    let mut next_event = 0;
    let mut fired: Vec<EventKind> = Vec::new();
    loop {
        let t = sys.time();
        if config.duration_s.is_some_and(|d| t >= d - eps) || sys.step_index >= MAX_STEPS {
            break;
        }
        fired.clear();
        while next_event < config.events.len() && config.events[next_event].t_s <= t + eps {
            fired.push(config.events[next_event].event);
            next_event += 1;
        }
        let rec = sys.step(&fired);
        let live: Vec<bool> = sys.modules.iter().map(|m| m.is_live()).collect();
        acc.observe(&rec, dt, sys.source.is_some(), &live);
        sink(&rec);
        let pending = next_event < config.events.len();
        if config.stop_when_depleted && !pending && sys.source.is_none() && sys.all_depleted() {
            break;
        }
    }
    Ok(acc.finish(&sys, Vec::new()))
}

/// Runs a scenario and keeps the whole telemetry stream in memory.
pub fn run_scenario(config: &ScenarioConfig) -> Result<(Vec<TelemetryRecord>, RunMetrics), ScenarioError> {
    let mut records = Vec::new();
    let metrics = run_scenario_with(config, &mut |r| records.push(r.clone()))?;
    Ok((records, metrics))
}

/// Balancing charge followed by `cycles` discharge-charge cycles under the
/// configured power levels.
pub fn run_conditioning_with(config: &ScenarioConfig, sink: &mut dyn FnMut(&TelemetryRecord)) -> Result<RunMetrics, ScenarioError> {
    config.validate()?;
    let spec = config.conditioning.ok_or_else(|| ScenarioError::Build("no conditioning section".into()))?;
    let mut sys = build_system(config)?;
    sys.source = None;
    let opts = ConditioningOptions { system: sys.config.clone(), charge_bus_v: spec.charge_bus_v, max_phase_s: spec.max_phase_s };
    let mut c = Conditioner::new(sys, spec.charge_power_w, spec.discharge_power_w, &opts);
    let dt = config.dt_s;
    let mut acc = MetricsAccumulator::new(c.system.modules.len(), false);
    let mut phases = Vec::new();
    {
        let mut observe = |rec: &TelemetryRecord, attached: bool, live: &[bool]| {
            acc.observe(rec, dt, attached, live);
            sink(rec);
        };
        let n = c.system.modules.len();
        let all_live = vec![true; n];
        phases.push(c.charge(Some(config.bms.cv_time_limit_s), &mut |r| observe(r, true, &all_live)));
        for _ in 0..spec.cycles {
            phases.push(c.discharge(&mut |r| observe(r, false, &all_live)));
            phases.push(c.charge(None, &mut |r| observe(r, true, &all_live)));
        }
    }
    Ok(acc.finish(&c.system, phases))
}

/// Runs a conditioning scenario in memory.
pub fn run_conditioning_sim(config: &ScenarioConfig) -> Result<(Vec<TelemetryRecord>, RunMetrics), ScenarioError> {
    let mut records = Vec::new();
    let metrics = run_conditioning_with(config, &mut |r| records.push(r.clone()))?;
    Ok((records, metrics))
}
