use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScenarioError;
use crate::bms::{self, SafetyLimits, SafetyOverrides};
use crate::bus::{LoadModel, SourceModel};
use crate::cell::{CellState, Chemistry, ChemistryProfile, DEFAULT_R_INTERNAL, DEFAULT_TEMPERATURE_C};
use crate::converter::{ModuleParams, PowerModule, CHARGE_BAND_HIGH, CHARGE_BAND_LOW};
use crate::system::{EventKind, SystemConfig};

/// Either a built-in chemistry by name or a full custom profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChemistrySpec {
    Named(Chemistry),
    Custom(ChemistryProfile),
}

impl ChemistrySpec {
    pub fn profile(&self) -> ChemistryProfile {
        match self {
            ChemistrySpec::Named(c) => ChemistryProfile::default_for(*c),
            ChemistrySpec::Custom(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub chemistry: ChemistrySpec,
    pub capacity_ah: f64,
    #[serde(default = "default_r")]
    pub r_internal: f64,
    #[serde(default = "full")]
    pub soc: f64,
    #[serde(default = "default_temperature")]
    pub temperature_c: f64,
    /// Replaces the profile's current rating (A).
    #[serde(default)]
    pub i_max_a: Option<f64>,
}

impl CellSpec {
    pub fn profile(&self) -> ChemistryProfile {
        let mut p = self.chemistry.profile();
        if let Some(i) = self.i_max_a {
            p.i_max = i;
        }
        p
    }
}

fn default_r() -> f64 {
    DEFAULT_R_INTERNAL
}

fn full() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE_C
}

fn default_dt() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledEvent {
    pub t_s: f64,
    pub event: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmsConfig {
    /// Droop scale `k_b · q_est` (V·h); derived from the pack when absent.
    pub kb_scale: Option<f64>,
    pub cv_time_limit_s: f64,
    pub mppt_step_a: f64,
    pub mppt_period_s: f64,
    pub lfp_detect: bool,
    pub kb_update: bool,
    pub sensor_noise_a: f64,
}

impl Default for BmsConfig {
    fn default() -> Self {
        let s = SystemConfig::default();
        Self {
            kb_scale: None,
            cv_time_limit_s: s.cv_time_limit_s,
            mppt_step_a: s.mppt_step_a,
            mppt_period_s: s.mppt_period_s,
            lfp_detect: s.lfp_detect,
            kb_update: s.kb_update,
            sensor_noise_a: s.sensor_noise_a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSpec {
    pub charge_power_w: f64,
    pub discharge_power_w: f64,
    /// Discharge-charge cycles after the initial balancing charge.
    pub cycles: u32,
    #[serde(default = "default_charge_bus")]
    pub charge_bus_v: f64,
    #[serde(default = "default_phase_limit")]
    pub max_phase_s: f64,
}

fn default_charge_bus() -> f64 {
    16.0
}

fn default_phase_limit() -> f64 {
    12.0 * 3600.0
}

/// Declarative description of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub cells: Vec<CellSpec>,
    /// Per-module parameters; empty means defaults for every module.
    #[serde(default)]
    pub modules: Vec<ModuleParams>,
    #[serde(default = "no_load")]
    pub load: LoadModel,
    #[serde(default)]
    pub source: Option<SourceModel>,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// End the run once every live cell is at cut-off and nothing is pending.
    #[serde(default = "yes")]
    pub stop_when_depleted: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bms: BmsConfig,
    #[serde(default)]
    pub safety: SafetyOverrides,
    #[serde(default)]
    pub conditioning: Option<ConditioningSpec>,
}

fn no_load() -> LoadModel {
    LoadModel::None
}

/// One problem found by [`ScenarioConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

struct Issues(Vec<ValidationIssue>);

impl Issues {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(ValidationIssue { field: field.into(), message: message.into() });
    }

    fn positive(&mut self, field: impl Into<String>, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be a positive finite number, got {v}"));
        }
    }

    fn non_negative(&mut self, field: impl Into<String>, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(field, format!("must be a non-negative finite number, got {v}"));
        }
    }
}

impl ScenarioConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json_str(&text)
    }

    /// Every violation in the file, not just the first.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut is = Issues(Vec::new());
        let n = self.cells.len();
        if n == 0 {
            is.push("cells", "at least one cell is required");
        }
        for (k, c) in self.cells.iter().enumerate() {
            let f = |name: &str| format!("cells[{k}].{name}");
            is.positive(f("capacity_ah"), c.capacity_ah);
            is.non_negative(f("r_internal"), c.r_internal);
            if !(0.0..=1.0).contains(&c.soc) {
                is.push(f("soc"), format!("must lie in [0, 1], got {}", c.soc));
            }
            if !c.temperature_c.is_finite() {
                is.push(f("temperature_c"), "must be finite");
            }
            if let Some(i) = c.i_max_a {
                is.positive(f("i_max_a"), i);
            }
            if let Err(e) = c.profile().validate() {
                is.push(f("chemistry"), e.to_string());
            } else if let Err(e) = SafetyLimits::for_profile(&c.profile()).tightened(&self.safety) {
                is.push("safety", format!("cell {k}: {e}"));
            }
        }
        if !self.modules.is_empty() && self.modules.len() != n {
            is.push("modules", format!("expected 0 or {n} entries, got {}", self.modules.len()));
        }
        for (k, m) in self.modules.iter().enumerate() {
            let f = |name: &str| format!("modules[{k}].{name}");
            is.positive(f("v_ref"), m.v_ref);
            if !(m.efficiency > 0.0 && m.efficiency <= 1.0) {
                is.push(f("efficiency"), format!("must lie in (0, 1], got {}", m.efficiency));
            }
            is.non_negative(f("lag_tau_s"), m.lag_tau_s);
            if let Some(c) = m.cutoff_a {
                is.non_negative(f("cutoff_a"), c);
            }
            if let Some(kb) = m.kb_init {
                is.positive(f("kb_init"), kb);
            }
            is.positive(f("charge_c_rate"), m.charge_c_rate);
        }
        if let Err(e) = self.load.validate() {
            is.push("load", e.to_string());
        }
        match self.source {
            Some(SourceModel::Grid { volts }) => is.positive("source.volts", volts),
            Some(SourceModel::PowerLimited { watts, volts }) => {
                is.positive("source.watts", watts);
                is.positive("source.volts", volts);
            }
            Some(SourceModel::Pv(pv)) => {
                is.positive("source.v_oc", pv.v_oc);
                is.positive("source.i_sc", pv.i_sc);
                is.positive("source.shape", pv.shape);
                is.non_negative("source.irradiance", pv.irradiance);
                if !pv.temperature_c.is_finite() {
                    is.push("source.temperature_c", "must be finite");
                }
            }
            None => {}
        }
        let mut last_t = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            let f = |name: &str| format!("events[{k}].{name}");
            if !(e.t_s >= 0.0 && e.t_s.is_finite()) {
                is.push(f("t_s"), format!("must be a non-negative time, got {}", e.t_s));
            } else if e.t_s < last_t {
                is.push(f("t_s"), format!("event times must be non-decreasing ({} after {last_t})", e.t_s));
            } else {
                last_t = e.t_s;
            }
            match e.event {
                EventKind::FailCell(i) if i >= n => is.push(f("event"), format!("fail_cell index {i} out of range for {n} cells")),
                EventKind::SetIrradiance(x) => is.non_negative(f("event"), x),
                EventKind::AttachSource(v) => is.positive(f("event"), v),
                _ => {}
            }
        }
        is.positive("dt_s", self.dt_s);
        if let Some(d) = self.duration_s {
            is.positive("duration_s", d);
        }
        let b = &self.bms;
        if let Some(s) = b.kb_scale {
            is.positive("bms.kb_scale", s);
        }
        is.positive("bms.cv_time_limit_s", b.cv_time_limit_s);
        is.positive("bms.mppt_step_a", b.mppt_step_a);
        is.positive("bms.mppt_period_s", b.mppt_period_s);
        is.non_negative("bms.sensor_noise_a", b.sensor_noise_a);
        if let Some(c) = self.conditioning {
            is.positive("conditioning.charge_power_w", c.charge_power_w);
            is.positive("conditioning.discharge_power_w", c.discharge_power_w);
            is.positive("conditioning.max_phase_s", c.max_phase_s);
            if c.cycles < 2 {
                is.push("conditioning.cycles", format!("at least 2 cycles are required, got {}", c.cycles));
            }
            if !(CHARGE_BAND_LOW..=CHARGE_BAND_HIGH).contains(&c.charge_bus_v) {
                is.push(
                    "conditioning.charge_bus_v",
                    format!("must lie in the charging band [{CHARGE_BAND_LOW}, {CHARGE_BAND_HIGH}] V, got {}", c.charge_bus_v),
                );
            }
            if !self.events.is_empty() {
                is.push("events", "scheduled events are not supported in a conditioning run");
            }
            if self.source.is_some() {
                is.push("source", "a conditioning run supplies its own charging source");
            }
        } else if self.duration_s.is_none() {
            let drains = !matches!(self.load, LoadModel::None);
            let ever_sourced = self.source.is_some() || self.events.iter().any(|e| matches!(e.event, EventKind::AttachSource(_)));
            if !self.stop_when_depleted || !drains || ever_sourced {
                is.push("duration_s", "required unless a load drains the pack to cut-off with no source attached");
            }
        }
        if is.0.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(is.0))
        }
    }

    pub fn module_params(&self) -> Vec<ModuleParams> {
        if self.modules.is_empty() {
            vec![ModuleParams::default(); self.cells.len()]
        } else {
            self.modules.clone()
        }
    }

    /// Droop scale: explicit, or sized so the bus stays above the floor when
    /// every cell carries its rated current.
    pub fn kb_scale(&self) -> f64 {
        self.bms.kb_scale.unwrap_or_else(|| {
            let v_ref = self.module_params().first().map_or(crate::converter::NOMINAL_V_REF, |m| m.v_ref);
            let q: f64 = self.cells.iter().map(|c| c.capacity_ah).sum();
            let i: f64 = self.cells.iter().map(|c| c.profile().i_max).sum();
            bms::default_kb_scale(v_ref, bms::V_FLOOR, q, i)
        })
    }

    pub fn system_config(&self) -> SystemConfig {
        SystemConfig {
            dt: self.dt_s,
            kb_scale: self.kb_scale(),
            cv_time_limit_s: self.bms.cv_time_limit_s,
            mppt_step_a: self.bms.mppt_step_a,
            mppt_period_s: self.bms.mppt_period_s,
            lfp_detect: self.bms.lfp_detect,
            kb_update: self.bms.kb_update,
            shed_load_on_cutoff: false,
            sensor_noise_a: self.bms.sensor_noise_a,
            seed: self.seed,
        }
    }

    /// Modules and their safety envelopes. The BMS starts from the nameplate
    /// capacity unless the module fixes its initial gain.
    pub fn build_modules(&self) -> Result<(Vec<PowerModule>, Vec<SafetyLimits>), ScenarioError> {
        let kb_scale = self.kb_scale();
        let mut modules = Vec::with_capacity(self.cells.len());
        let mut limits = Vec::with_capacity(self.cells.len());
        for (spec, params) in self.cells.iter().zip(self.module_params()) {
            let profile = spec.profile();
            let lim = SafetyLimits::for_profile(&profile).tightened(&self.safety).map_err(|e| ScenarioError::Build(e.to_string()))?;
            let cell = CellState::with_params(profile, spec.capacity_ah, spec.soc, spec.r_internal, spec.temperature_c)
                .map_err(|e| ScenarioError::Build(e.to_string()))?;
            modules.push(PowerModule::new(cell, params, kb_scale, spec.capacity_ah));
            limits.push(lim);
        }
        Ok((modules, limits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"cells":[{"chemistry":"NMC","capacity_ah":1.0}],"load":{"kind":"resistive","value":47}}"#;

    #[test]
    fn minimal_config_parses_and_validates() {
        let c = ScenarioConfig::from_json_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.dt_s, 1.0);
        assert_eq!(c.cells[0].soc, 1.0);
        assert_eq!(c.load, LoadModel::Resistive(47.0));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let bad = MINIMAL.replace("\"load\"", "\"lode\"");
        assert!(matches!(ScenarioConfig::from_json_str(&bad), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"{
            "cells":[{"chemistry":"NMC","capacity_ah":-1.0,"soc":1.5}],
            "load":{"kind":"resistive","value":0},
            "events":[{"t_s":5,"event":{"fail_cell":3}},{"t_s":1,"event":"detach_source"}],
            "dt_s":0
        }"#;
        let c = ScenarioConfig::from_json_str(text).unwrap();
        let Err(ScenarioError::Invalid(issues)) = c.validate() else { panic!("expected validation failure") };
        let fields: Vec<&str> = issues.iter().map(|i| i.field.as_str()).collect();
        for f in ["cells[0].capacity_ah", "cells[0].soc", "load", "events[0].event", "events[1].t_s", "dt_s"] {
            assert!(fields.contains(&f), "missing {f} in {fields:?}");
        }
    }

    #[test]
    fn custom_profile_and_event_forms() {
        let text = r#"{
            "cells":[{"chemistry":{"name":"LFP","ocv_table":[[0,2.0],[0.5,3.3],[1,3.6]],"v_max":3.6,"v_min":2.0,
                      "t_max":60,"t_min_charge":0,"t_min_discharge":-10,"i_max":3}, "capacity_ah":1.0}],
            "load":{"kind":"constant_power","value":2},
            "events":[{"t_s":1,"event":{"set_irradiance":0.5}},{"t_s":2,"event":{"attach_source":16}},{"t_s":3,"event":"detach_source"}],
            "duration_s": 10
        }"#;
        let c = ScenarioConfig::from_json_str(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.events[1].event, EventKind::AttachSource(16.0));
        assert_eq!(c.cells[0].profile().ocv_table.len(), 3);
    }

    #[test]
    fn open_ended_run_needs_a_duration() {
        let text = r#"{"cells":[{"chemistry":"NMC","capacity_ah":1.0}]}"#;
        let c = ScenarioConfig::from_json_str(text).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn looser_safety_override_is_invalid() {
        let text = r#"{"cells":[{"chemistry":"NMC","capacity_ah":1.0}],"load":{"kind":"resistive","value":47},
                       "safety":{"t_max":80}}"#;
        let c = ScenarioConfig::from_json_str(text).unwrap();
        assert!(c.validate().is_err());
    }
}
