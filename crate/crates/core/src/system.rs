//! One simulation tick of the whole pack: mode selection, bus solve, cut-off
//! and safety checks, SOC integration, BMS bookkeeping and telemetry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bms::{self, check_safety, MpptState, SafetyLimits, SafetyVerdict, ShutdownReason};
use crate::bus::{self, BusSolution, LoadModel, PvParams, SourceModel};
use crate::cell::{self, ocv, CellState};
use crate::converter::{
    self, cell_current_for_power, cv_charge_current, select_mode, Characteristic, DroopSignal, Mode, ModeInputs,
    PowerModule,
};

/// Fixed-point iterations allowed when the droop acts on cell current.
const DROOP_FIXED_POINT_MAX: usize = 200;
const DROOP_FIXED_POINT_TOL: f64 = 1e-13;

/// Whole-pack simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub dt: f64,
    pub kb_scale: f64,
    pub cv_time_limit_s: f64,
    pub mppt_step_a: f64,
    /// MPPT perturbation period (s of simulated time).
    pub mppt_period_s: f64,
    pub lfp_detect: bool,
    /// Refresh `k_b` from Coulomb counts at cycle boundaries.
    pub kb_update: bool,
    /// Scale a constant-power load down as modules reach cut-off, so that
    /// each remaining module keeps its share.
    pub shed_load_on_cutoff: bool,
    /// Standard deviation of the BMS current-sensor noise (A).
    pub sensor_noise_a: f64,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            kb_scale: 0.6,
            cv_time_limit_s: 1200.0,
            mppt_step_a: bms::DEFAULT_MPPT_STEP_A,
            mppt_period_s: 1.0,
            lfp_detect: false,
            kb_update: true,
            shed_load_on_cutoff: false,
            sensor_noise_a: 0.0,
            seed: 0,
        }
    }
}

/// Externally scheduled events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FailCell(usize),
    SetIrradiance(f64),
    AttachSource(f64),
    DetachSource,
}

/// Something that happened during a tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TelemetryEvent {
    Scheduled { event: EventKind },
    ModeChange { module: usize, from: Mode, to: Mode },
    CutOff { module: usize, discharged_ah: f64 },
    ChargeComplete { module: usize, charged_ah: f64 },
    SafetyShutdown { module: usize, reason: ShutdownReason },
    KbUpdated { module: usize, q_est: f64, k_b: f64 },
    LfpDetection { module: usize, detected: bool },
    SourceOvervoltage { module: usize, volts: f64 },
    BusUnsupplied,
    BusError { message: String },
    CellError { module: usize, message: String },
}

/// Per-module operating status as reported in telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleStatus {
    Discharge,
    ChargeCc,
    ChargeCv,
    Shutdown,
    Idle,
    Failed,
}

impl ModuleStatus {
    pub fn label(self) -> &'static str {
        match self {
            ModuleStatus::Discharge => "discharge",
            ModuleStatus::ChargeCc => "cc",
            ModuleStatus::ChargeCv => "cv",
            ModuleStatus::Shutdown => "shutdown",
            ModuleStatus::Idle => "idle",
            ModuleStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleTelemetry {
    pub status: ModuleStatus,
    pub i_out: f64,
    pub i_cell: f64,
    /// Terminal voltage; NaN for a failed (open) cell.
    pub v_cell: f64,
    pub soc: f64,
    pub q_est: f64,
    pub k_b: f64,
}

/// State at the start of a step and the currents applied during it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub t: f64,
    /// 0 when nothing supplies the bus.
    pub v_bus: f64,
    pub converged: bool,
    pub modules: Vec<ModuleTelemetry>,
    pub events: Vec<TelemetryEvent>,
}

/// The simulated pack.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub config: SystemConfig,
    pub step_index: u64,
    pub modules: Vec<PowerModule>,
    pub limits: Vec<SafetyLimits>,
    pub load: LoadModel,
    pub source: Option<SourceModel>,
    pub v_bus: f64,
    pub last_solution: Option<BusSolution>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl SystemState {
    pub fn new(modules: Vec<PowerModule>, limits: Vec<SafetyLimits>, load: LoadModel, config: SystemConfig) -> Self {
        assert_eq!(modules.len(), limits.len(), "one safety envelope per module");
        let v_bus = modules.first().map_or(converter::NOMINAL_V_REF, |m| m.v_ref);
        let noise = (config.sensor_noise_a > 0.0).then(|| Normal::new(0.0, config.sensor_noise_a).expect("finite std"));
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise,
            config,
            step_index: 0,
            modules,
            limits,
            load,
            source: None,
            v_bus,
            last_solution: None,
        }
    }

    /// Simulation time at the start of the next step.
    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.config.dt
    }

    /// Every live module is at cut-off (or none is live).
    pub fn all_depleted(&self) -> bool {
        self.modules.iter().filter(|m| m.is_live()).all(|m| m.depleted)
    }

    /// Every live module has finished charging.
    pub fn all_charged(&self) -> bool {
        self.modules.iter().filter(|m| m.is_live()).all(|m| m.charge_done)
    }

    pub fn attach_source(&mut self, source: SourceModel) {
        self.source = Some(source);
    }

    pub fn detach_source(&mut self) {
        self.source = None;
    }

    fn status(m: &PowerModule, source_attached: bool) -> ModuleStatus {
        if m.cell.failed {
            return ModuleStatus::Failed;
        }
        match m.mode {
            Mode::Shutdown => ModuleStatus::Shutdown,
            Mode::ChargeCC => ModuleStatus::ChargeCc,
            Mode::ChargeCV => ModuleStatus::ChargeCv,
            Mode::Discharge if m.depleted || m.charge_done || source_attached => ModuleStatus::Idle,
            Mode::Discharge => ModuleStatus::Discharge,
        }
    }

    fn apply_event(&mut self, ev: EventKind, events: &mut Vec<TelemetryEvent>) {
        events.push(TelemetryEvent::Scheduled { event: ev });
        match ev {
            EventKind::FailCell(i) => {
                if let Some(m) = self.modules.get_mut(i) {
                    m.cell = cell::fail_cell(&m.cell);
                    m.i_cell = 0.0;
                    m.i_out = 0.0;
                }
            }
            EventKind::SetIrradiance(f) => {
                if let Some(SourceModel::Pv(pv)) = self.source.as_mut() {
                    pv.irradiance = f;
                }
            }
            EventKind::AttachSource(v) => self.source = Some(SourceModel::Grid { volts: v }),
            EventKind::DetachSource => self.source = None,
        }
    }

    fn shutdown(&mut self, k: usize, reason: ShutdownReason, events: &mut Vec<TelemetryEvent>) {
        let m = &mut self.modules[k];
        if m.mode != Mode::Shutdown {
            events.push(TelemetryEvent::ModeChange { module: k, from: m.mode, to: Mode::Shutdown });
        }
        m.mode = Mode::Shutdown;
        m.i_cell = 0.0;
        m.i_out = 0.0;
        events.push(TelemetryEvent::SafetyShutdown { module: k, reason });
    }

    fn finish_charge(&mut self, k: usize, events: &mut Vec<TelemetryEvent>) {
        let kb_scale = self.config.kb_scale;
        let kb_update = self.config.kb_update;
        let m = &mut self.modules[k];
        let q = m.bms.charge_count.ah();
        m.charge_done = true;
        m.cv_since = None;
        m.bms.estimate.last_charge_q = q;
        events.push(TelemetryEvent::ChargeComplete { module: k, charged_ah: q });
        if kb_update && m.bms.empty_reference {
            if let Ok(est) = bms::update_kb(&m.bms.estimate, q, kb_scale) {
                m.bms.estimate = est;
                events.push(TelemetryEvent::KbUpdated { module: k, q_est: est.q_est, k_b: est.k_b });
            }
        }
        m.bms.empty_reference = false;
        m.bms.full_reference = true;
        m.bms.discharge_count.reset();
    }

    fn cut_off(&mut self, k: usize, events: &mut Vec<TelemetryEvent>) {
        let kb_scale = self.config.kb_scale;
        let kb_update = self.config.kb_update;
        let m = &mut self.modules[k];
        let q = m.bms.discharge_count.ah();
        m.depleted = true;
        m.i_cell = 0.0;
        m.i_out = 0.0;
        m.bms.estimate.last_discharge_q = q;
        events.push(TelemetryEvent::CutOff { module: k, discharged_ah: q });
        if kb_update && m.bms.full_reference {
            if let Ok(est) = bms::update_kb(&m.bms.estimate, q, kb_scale) {
                m.bms.estimate = est;
                events.push(TelemetryEvent::KbUpdated { module: k, q_est: est.q_est, k_b: est.k_b });
            }
        }
        m.bms.full_reference = false;
    }

    /// Mode-selection pass at the start of a step.
    fn select_modes(&mut self, t: f64, events: &mut Vec<TelemetryEvent>) {
        let source = self.source;
        let prev_v = self.v_bus;
        for k in 0..self.modules.len() {
            if !self.modules[k].is_live() {
                continue;
            }
            let m = &self.modules[k];
            let sensed = match source {
                None => prev_v.min(m.v_ref),
                Some(SourceModel::Pv(ref pv)) if m.mode.is_charging() => prev_v.min(pv.v_oc_effective()),
                Some(ref s) => s.open_circuit_voltage(),
            };
            if source.is_none() && m.charge_done {
                self.modules[k].charge_done = false;
            }
            let m = &self.modules[k];
            let hold = m.cv_hold_limit_s;
            let inputs = ModeInputs {
                v_out_sensed: sensed,
                current: m.mode,
                cell_v: m.cell.ocv() - m.i_cell * m.cell.r_internal,
                v_max: self.limits[k].v_max,
                i_cell: m.i_cell,
                // a time-limited hold ignores the cutoff current
                cutoff: if hold.is_some() { -1.0 } else { m.cutoff_current() },
                charge_latched: m.charge_done,
            };
            let mut sel = match select_mode(&inputs) {
                Ok(sel) => sel,
                Err(converter::ControlError::SourceOvervoltage(v)) => {
                    events.push(TelemetryEvent::SourceOvervoltage { module: k, volts: v });
                    let m = &mut self.modules[k];
                    events.push(TelemetryEvent::ModeChange { module: k, from: m.mode, to: Mode::Shutdown });
                    m.mode = Mode::Shutdown;
                    m.i_cell = 0.0;
                    m.i_out = 0.0;
                    continue;
                }
                Err(_) => continue,
            };
            if let (Mode::ChargeCV, Some(limit), Some(since)) = (sel.mode, hold, m.cv_since) {
                if t - since >= limit {
                    sel = converter::ModeSelection { mode: Mode::Discharge, charge_complete: true };
                }
            }
            let from = m.mode;
            if sel.mode != from {
                self.enter_mode(k, sel.mode, sel.charge_complete, t, events);
            }
        }
    }

    fn enter_mode(&mut self, k: usize, to: Mode, charge_complete: bool, t: f64, events: &mut Vec<TelemetryEvent>) {
        let from = self.modules[k].mode;
        events.push(TelemetryEvent::ModeChange { module: k, from, to });
        let mppt_step = self.config.mppt_step_a;
        let lfp_detect = self.config.lfp_detect;
        let is_pv = matches!(self.source, Some(SourceModel::Pv(_)));
        let i_max = self.limits[k].i_max;
        {
            let m = &mut self.modules[k];
            if !from.is_charging() && to.is_charging() {
                m.bms.empty_reference = m.depleted;
                m.depleted = false;
                m.bms.charge_count.reset();
                m.bms.charge_trace.clear();
                m.lag.reset(0.0);
                m.bms.mppt = is_pv.then(|| MpptState::new(0.0, mppt_step, i_max));
            }
            if to == Mode::ChargeCV {
                m.cv_since = Some(t);
                if lfp_detect && from == Mode::ChargeCC {
                    if let Ok(detected) = bms::detect_lfp(&m.bms.charge_trace) {
                        m.bms.lfp_detected = Some(detected);
                        events.push(TelemetryEvent::LfpDetection { module: k, detected });
                    }
                }
            }
            m.mode = to;
        }
        if from.is_charging() && !to.is_charging() {
            if charge_complete {
                self.finish_charge(k, events);
            } else {
                let m = &mut self.modules[k];
                m.bms.full_reference = false;
                m.bms.empty_reference = false;
                m.bms.discharge_count.reset();
            }
            let m = &mut self.modules[k];
            m.cv_since = None;
            m.i_cell = 0.0;
        }
    }

    /// Charge current magnitude the module asks for in Mode 2 (before the lag).
    fn cc_target(&self, k: usize, pv_bus: f64) -> f64 {
        let m = &self.modules[k];
        let i_max = self.limits[k].i_max;
        match self.source {
            Some(SourceModel::Grid { .. }) => (m.params.charge_c_rate * m.q_est()).min(i_max),
            Some(SourceModel::PowerLimited { watts, .. }) => {
                let total: f64 = self.modules.iter().filter(|m| m.is_live()).map(|m| 1.0 / m.k_b()).sum();
                let share = watts * (1.0 / m.k_b()) / total;
                let p_cell = m.efficiency * share;
                cell_current_for_power(&m.cell, -p_cell).map(|i| -i).unwrap_or(i_max).min(i_max)
            }
            Some(SourceModel::Pv(_)) => {
                let panel = m.bms.mppt.map_or(0.0, |s| s.i_ref);
                let p_cell = m.efficiency * pv_bus * panel;
                cell_current_for_power(&m.cell, -p_cell).map(|i| -i).unwrap_or(i_max).min(i_max)
            }
            None => 0.0,
        }
    }

    /// Charging currents when a source holds the bus. Returns the bus voltage.
    fn solve_charging(&mut self, t: f64, events: &mut Vec<TelemetryEvent>) -> (f64, bool) {
        let dt = self.config.dt;
        let source = self.source.expect("charging needs a source");
        let v_bus = match source {
            SourceModel::Grid { volts } | SourceModel::PowerLimited { volts, .. } => volts,
            SourceModel::Pv(pv) => match self.pv_operating_voltage(&pv) {
                Some(v) => v,
                None => {
                    events.push(TelemetryEvent::BusError { message: "PV source cannot supply the demand".into() });
                    for m in self.modules.iter_mut() {
                        m.i_cell = 0.0;
                        m.i_out = 0.0;
                    }
                    return (0.0, false);
                }
            },
        };
        for k in 0..self.modules.len() {
            let charging = self.modules[k].is_live() && self.modules[k].mode.is_charging();
            if !charging {
                let m = &mut self.modules[k];
                m.i_cell = 0.0;
                m.i_out = 0.0;
                continue;
            }
            let target = self.cc_target(k, v_bus);
            let v_max = self.limits[k].v_max;
            if self.modules[k].mode == Mode::ChargeCC {
                let m = &mut self.modules[k];
                m.i_ref = target;
                let i = -m.lag.update(target, dt);
                let soc_next = cell::soc_after(&m.cell, i, dt);
                let over = soc_next > 1.0 || ocv(&m.cell.chemistry, soc_next).unwrap_or(f64::INFINITY) - i * m.cell.r_internal > v_max;
                if over {
                    self.enter_mode(k, Mode::ChargeCV, false, t, events);
                } else {
                    m.i_cell = i;
                }
            }
            let m = &mut self.modules[k];
            if m.mode == Mode::ChargeCV {
                let cap = target.max(m.lag.value).min(self.limits[k].i_max);
                m.i_cell = cv_charge_current(&m.cell, m.v_batt_ref.min(v_max), cap, dt);
            }
            let v_cell = m.cell.ocv() - m.i_cell * m.cell.r_internal;
            m.i_out = converter::reflect_to_output(m.efficiency, v_bus, m.i_cell, v_cell);
        }
        (v_bus, true)
    }

    /// Highest bus voltage at which the panel covers load plus charge demand.
    fn pv_operating_voltage(&self, pv: &PvParams) -> Option<f64> {
        let v_oc = pv.v_oc_effective();
        let demand_panel: f64 = self
            .modules
            .iter()
            .filter(|m| m.is_live() && m.mode.is_charging())
            .map(|m| m.bms.mppt.map_or(0.0, |s| s.i_ref))
            .sum();
        let g = |v: f64| bus::pv_current(pv, v) - self.load.current_at(v) - demand_panel;
        let n = 400;
        let mut hi = v_oc;
        if g(hi) >= 0.0 {
            return Some(hi);
        }
        for j in 1..=n {
            let lo = v_oc * (1.0 - j as f64 / n as f64);
            if lo <= 0.0 {
                break;
            }
            if g(lo) >= 0.0 {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..100 {
                    let mid = 0.5 * (a + b);
                    if g(mid) >= 0.0 {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                return Some(a);
            }
            hi = lo;
        }
        None
    }

    fn droop_gain(m: &PowerModule, v_bus: f64, v_cell: f64, i_out: f64) -> f64 {
        match m.params.droop_signal {
            DroopSignal::OutputCurrent => 1.0,
            DroopSignal::CellCurrent => {
                if i_out >= 0.0 {
                    v_bus / (m.efficiency * v_cell)
                } else {
                    m.efficiency * v_bus / v_cell
                }
            }
        }
    }

    /// Droop bus solve for the given participants, iterating the cell-current
    /// feedback to a fixed point.
    fn solve_discharge(&mut self, part: &[bool], load: &LoadModel) -> Result<BusSolution, bus::BusError> {
        let n = self.modules.len();
        let mut v_guess = if self.v_bus > 0.0 { self.v_bus } else { converter::NOMINAL_V_REF };
        let mut v_cells: Vec<f64> = self.modules.iter().map(|m| m.cell.ocv() - m.i_cell.max(0.0) * m.cell.r_internal).collect();
        let mut i_outs: Vec<f64> = self.modules.iter().map(|m| m.i_out.max(0.0)).collect();
        let mut last: Option<BusSolution> = None;
        for iter in 1..=DROOP_FIXED_POINT_MAX {
            let chars: Vec<Option<Characteristic>> = (0..n)
                .map(|k| {
                    if !part[k] {
                        return None;
                    }
                    let m = &self.modules[k];
                    let gain = Self::droop_gain(m, v_guess, v_cells[k].max(1e-3), i_outs[k]);
                    converter::output_characteristic(m).ok().map(|c| c.scaled(gain))
                })
                .collect();
            let mut sol = bus::solve_bus(&chars, load)?;
            let mut i_cells = vec![0.0; n];
            let mut delta: f64 = (sol.v_bus - v_guess).abs() / sol.v_bus.abs().max(1.0);
            for k in (0..n).filter(|&k| part[k]) {
                let m = &self.modules[k];
                let p_out = sol.v_bus * sol.i_out[k];
                let p_cell = if p_out >= 0.0 { p_out / m.efficiency } else { p_out * m.efficiency };
                let i = cell_current_for_power(&m.cell, p_cell).unwrap_or_else(|_| {
                    // beyond the cell's power capability: its maximum-power current
                    if m.cell.r_internal > 0.0 { m.cell.ocv() / (2.0 * m.cell.r_internal) } else { f64::INFINITY }
                });
                let v_cell = m.cell.ocv() - i * m.cell.r_internal;
                delta = delta.max((v_cell - v_cells[k]).abs() / v_cell.abs().max(1.0));
                i_cells[k] = i;
                v_cells[k] = v_cell;
                i_outs[k] = sol.i_out[k];
            }
            sol.i_cell = i_cells;
            sol.iterations = iter;
            v_guess = sol.v_bus;
            let one_pass = part.iter().zip(&self.modules).all(|(&p, m)| !p || m.params.droop_signal == DroopSignal::OutputCurrent);
            if delta <= DROOP_FIXED_POINT_TOL || one_pass {
                return Ok(sol);
            }
            last = Some(sol);
        }
        let mut sol = last.expect("at least one iteration");
        sol.converged = false;
        Ok(sol)
    }

    fn effective_load(&self, part: &[bool]) -> LoadModel {
        match self.load {
            LoadModel::ConstantPower(p) if self.config.shed_load_on_cutoff => {
                let live: f64 = self.modules.iter().filter(|m| m.is_live()).map(|m| 1.0 / m.k_b()).sum();
                let active: f64 = self.modules.iter().zip(part).filter(|(_, &p)| p).map(|(m, _)| 1.0 / m.k_b()).sum();
                if live > 0.0 {
                    LoadModel::ConstantPower(p * active / live)
                } else {
                    LoadModel::ConstantPower(p)
                }
            }
            other => other,
        }
    }

    /// Discharge solve with cut-off and safety exclusion until stable.
    fn run_discharge(&mut self, events: &mut Vec<TelemetryEvent>) -> (f64, bool) {
        let dt = self.config.dt;
        let n = self.modules.len();
        let mut part: Vec<bool> =
            self.modules.iter().map(|m| m.is_live() && m.mode == Mode::Discharge && !m.depleted && !m.charge_done).collect();
        for (k, m) in self.modules.iter_mut().enumerate() {
            if !part[k] {
                m.i_cell = 0.0;
                m.i_out = 0.0;
            }
        }
        loop {
            if !part.iter().any(|&p| p) {
                events.push(TelemetryEvent::BusUnsupplied);
                for m in self.modules.iter_mut() {
                    m.i_cell = 0.0;
                    m.i_out = 0.0;
                }
                self.last_solution = None;
                return (0.0, false);
            }
            let load = self.effective_load(&part);
            let sol = match self.solve_discharge(&part, &load) {
                Ok(sol) => sol,
                Err(e) => {
                    events.push(TelemetryEvent::BusError { message: e.to_string() });
                    for m in self.modules.iter_mut() {
                        m.i_cell = 0.0;
                        m.i_out = 0.0;
                    }
                    self.last_solution = None;
                    return (0.0, false);
                }
            };
            let mut changed = false;
            for k in 0..n {
                if !part[k] {
                    continue;
                }
                let i = sol.i_cell[k];
                let m = &self.modules[k];
                if i > 0.0 {
                    let soc_next = cell::soc_after(&m.cell, i, dt);
                    let v_end = if soc_next < 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        ocv(&m.cell.chemistry, soc_next).unwrap_or(f64::NEG_INFINITY) - i * m.cell.r_internal
                    };
                    if v_end < self.limits[k].v_min {
                        part[k] = false;
                        self.cut_off(k, events);
                        changed = true;
                        continue;
                    }
                }
                if let SafetyVerdict::Shutdown(reason) = check_safety(&m.cell, Mode::Discharge, i, &self.limits[k]) {
                    part[k] = false;
                    self.shutdown(k, reason, events);
                    changed = true;
                }
            }
            if changed {
                continue;
            }
            for k in 0..n {
                let m = &mut self.modules[k];
                if part[k] {
                    m.i_cell = sol.i_cell[k];
                    m.i_out = sol.i_out[k];
                } else {
                    m.i_cell = 0.0;
                    m.i_out = 0.0;
                }
            }
            let v = sol.v_bus;
            let ok = sol.converged;
            self.last_solution = Some(sol);
            return (v, ok);
        }
    }

    /// Advances the pack by one step, firing `scheduled` events first.
    pub fn step(&mut self, scheduled: &[EventKind]) -> TelemetryRecord {
        let dt = self.config.dt;
        let t = self.time();
        let mut events = Vec::new();
        for &ev in scheduled {
            self.apply_event(ev, &mut events);
        }
        self.select_modes(t, &mut events);

        let (v_bus, converged) = if self.source.is_some() {
            let (v, ok) = self.solve_charging(t, &mut events);
            // idle and charging modules are still monitored
            for k in 0..self.modules.len() {
                if !self.modules[k].is_live() {
                    continue;
                }
                let m = &self.modules[k];
                if let SafetyVerdict::Shutdown(reason) = check_safety(&m.cell, m.mode, m.i_cell, &self.limits[k]) {
                    self.shutdown(k, reason, &mut events);
                }
            }
            (v, ok)
        } else {
            let (v, ok) = self.run_discharge(&mut events);
            for k in 0..self.modules.len() {
                let m = &self.modules[k];
                if !m.is_live() || m.i_cell != 0.0 {
                    continue;
                }
                if let SafetyVerdict::Shutdown(reason) = check_safety(&m.cell, m.mode, 0.0, &self.limits[k]) {
                    self.shutdown(k, reason, &mut events);
                }
            }
            (v, ok)
        };

        // the MPPT sees the power it actually got this step
        if let Some(SourceModel::Pv(_)) = self.source {
            let every = ((self.config.mppt_period_s / dt).round() as u64).max(1);
            if self.step_index % every == 0 {
                for m in self.modules.iter_mut().filter(|m| m.mode == Mode::ChargeCC) {
                    if let Some(s) = m.bms.mppt {
                        let p = v_bus * s.i_ref;
                        let mut next = bms::mppt_step(&s, p);
                        let v_cell = m.cell.ocv();
                        if v_bus > 0.0 {
                            next.i_cap = next.i_cap.min(m.cell.chemistry.i_max * v_cell / (m.efficiency * v_bus)).max(next.i_min);
                            next.i_ref = next.i_ref.min(next.i_cap);
                        }
                        m.bms.mppt = Some(next);
                    }
                }
            }
        }

        let source_attached = self.source.is_some();
        let modules: Vec<ModuleTelemetry> = self
            .modules
            .iter()
            .map(|m| ModuleTelemetry {
                status: Self::status(m, source_attached),
                i_out: m.i_out,
                i_cell: m.i_cell,
                v_cell: cell::terminal_voltage(&m.cell, m.i_cell).unwrap_or(f64::NAN),
                soc: m.cell.soc,
                q_est: m.q_est(),
                k_b: m.k_b(),
            })
            .collect();

        self.integrate(dt, &mut events);

        self.v_bus = v_bus;
        for m in self.modules.iter_mut() {
            m.v_out = v_bus;
        }
        self.step_index += 1;
        TelemetryRecord { t, v_bus, converged, modules, events }
    }

    fn integrate(&mut self, dt: f64, events: &mut Vec<TelemetryEvent>) {
        for k in 0..self.modules.len() {
            let i = self.modules[k].i_cell;
            if !self.modules[k].is_live() || i == 0.0 {
                continue;
            }
            match cell::step_cell(&self.modules[k].cell, i, dt) {
                Ok(next) => self.modules[k].cell = next,
                Err(e) => {
                    events.push(TelemetryEvent::CellError { module: k, message: e.to_string() });
                    let m = &mut self.modules[k];
                    m.mode = Mode::Shutdown;
                    m.i_cell = 0.0;
                    m.i_out = 0.0;
                    continue;
                }
            }
            let measured = match self.noise {
                Some(n) => i + n.sample(&mut self.rng),
                None => i,
            };
            let m = &mut self.modules[k];
            if i > 0.0 {
                m.bms.discharge_count.add(measured, dt);
            } else {
                m.bms.charge_count.add(-measured, dt);
                if m.mode == Mode::ChargeCC {
                    let v = m.cell.ocv() - i * m.cell.r_internal;
                    let q = m.bms.charge_count.ah();
                    m.bms.charge_trace.push((v, q));
                }
            }
        }
    }
}

/// Functional form of [`SystemState::step`].
pub fn step_system(state: &SystemState, scheduled: &[EventKind]) -> (SystemState, TelemetryRecord) {
    let mut next = state.clone();
    let rec = next.step(scheduled);
    (next, rec)
}

/// Builds the pack from cells with default module parameters.
pub fn build_modules(cells: Vec<CellState>, params: &[converter::ModuleParams], kb_scale: f64) -> Vec<PowerModule> {
    cells
        .into_iter()
        .zip(params)
        .map(|(c, p)| {
            let q = c.capacity_true;
            PowerModule::new(c, p.clone(), kb_scale, q)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::ChemistryProfile;
    use crate::converter::ModuleParams;
    use approx::assert_abs_diff_eq;

    fn pack(caps: &[f64], load: LoadModel) -> SystemState {
        let cells: Vec<_> = caps.iter().map(|&c| CellState::new(ChemistryProfile::nmc(), c, 1.0).unwrap()).collect();
        let limits = cells.iter().map(|c| SafetyLimits::for_profile(&c.chemistry)).collect();
        let params = vec![ModuleParams::default(); caps.len()];
        let cfg = SystemConfig { kb_scale: 0.15, ..Default::default() };
        SystemState::new(build_modules(cells, &params, cfg.kb_scale), limits, load, cfg)
    }

    #[test]
    fn droop_shares_cell_current_by_capacity() {
        let mut s = pack(&[0.075, 0.1, 0.15], LoadModel::Resistive(47.0));
        let rec = s.step(&[]);
        assert!(rec.converged);
        let i: Vec<f64> = rec.modules.iter().map(|m| m.i_cell).collect();
        assert_abs_diff_eq!(i[1] / i[0], 100.0 / 75.0, epsilon = 1e-3);
        assert_abs_diff_eq!(i[2] / i[0], 2.0, epsilon = 1e-3);
        let sum: f64 = rec.modules.iter().map(|m| m.i_out).sum();
        assert_abs_diff_eq!(sum, rec.v_bus / 47.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_load_keeps_soc() {
        let mut s = pack(&[1.0, 2.0], LoadModel::None);
        for _ in 0..10 {
            let rec = s.step(&[]);
            assert!(rec.modules.iter().all(|m| m.i_cell == 0.0 && m.i_out == 0.0));
        }
        assert!(s.modules.iter().all(|m| m.cell.soc == 1.0));
    }

    #[test]
    fn all_failed_reports_unsupplied_bus() {
        let mut s = pack(&[1.0, 1.0], LoadModel::Resistive(47.0));
        let rec = s.step(&[EventKind::FailCell(0), EventKind::FailCell(1)]);
        assert_eq!(rec.v_bus, 0.0);
        assert!(!rec.converged);
        assert!(rec.events.contains(&TelemetryEvent::BusUnsupplied));
    }

    #[test]
    fn failure_shifts_load_to_survivors_in_same_tick() {
        let mut s = pack(&[0.11, 0.275, 0.275], LoadModel::Resistive(47.0));
        let before = s.step(&[]);
        let after = s.step(&[EventKind::FailCell(0)]);
        assert_eq!(after.modules[0].i_cell, 0.0);
        assert_eq!(after.modules[0].status, ModuleStatus::Failed);
        for k in 1..3 {
            assert!(after.modules[k].i_out > before.modules[k].i_out);
        }
        let sum: f64 = after.modules.iter().map(|m| m.i_out).sum();
        assert_abs_diff_eq!(sum, after.v_bus / 47.0, epsilon = 1e-9);
    }

    #[test]
    fn grid_charge_runs_cc_then_cv_then_completes() {
        let mut s = pack(&[0.5], LoadModel::None);
        s.modules[0].cell.soc = 0.3;
        s.attach_source(SourceModel::Grid { volts: 16.0 });
        let mut saw = (false, false, false);
        for _ in 0..20_000 {
            let rec = s.step(&[]);
            match rec.modules[0].status {
                ModuleStatus::ChargeCc => saw.0 = true,
                ModuleStatus::ChargeCv => {
                    saw.1 = true;
                    assert!(rec.modules[0].v_cell <= 4.2);
                }
                _ => {}
            }
            if rec.events.iter().any(|e| matches!(e, TelemetryEvent::ChargeComplete { .. })) {
                saw.2 = true;
                break;
            }
        }
        assert_eq!(saw, (true, true, true));
        assert!(s.modules[0].cell.soc > 0.98);
        // latched: no restart while the source stays attached
        for _ in 0..10 {
            let rec = s.step(&[]);
            assert_eq!(rec.modules[0].status, ModuleStatus::Idle);
        }
    }

    #[test]
    fn overvoltage_source_shuts_down() {
        let mut s = pack(&[0.5], LoadModel::None);
        let rec = s.step(&[EventKind::AttachSource(24.0)]);
        assert_eq!(rec.modules[0].status, ModuleStatus::Shutdown);
        // absorbing
        let rec = s.step(&[EventKind::DetachSource]);
        assert_eq!(rec.modules[0].status, ModuleStatus::Shutdown);
    }

    #[test]
    fn hot_cell_is_shut_down() {
        let mut s = pack(&[0.5, 0.5], LoadModel::Resistive(47.0));
        s.modules[1].cell.temperature = 65.0;
        let rec = s.step(&[]);
        assert_eq!(rec.modules[1].status, ModuleStatus::Shutdown);
        assert!(rec.events.contains(&TelemetryEvent::SafetyShutdown { module: 1, reason: ShutdownReason::OverTemperature }));
        assert!(rec.modules[0].i_out > 0.0);
    }
}
