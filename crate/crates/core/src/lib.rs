//! Simulator of a modular second-life Li-ion storage pack with one
//! bidirectional converter per cell.
//!
//! Cells share a 12 V DC bus through droop-controlled converters whose gains
//! the per-module BMS sets from Coulomb-counted capacity, so that unequal
//! cells discharge in step without any communication between modules.

pub mod bms;
pub mod bus;
pub mod cell;
pub mod characterization;
pub mod converter;
pub mod economics;
pub mod scenario;
pub mod system;

pub use bms::{
    check_safety, conditioning_cycle, coulomb_count, detect_lfp, mppt_step, update_kb, BmsError, BmsState,
    CapacityEstimate, MpptState, SafetyLimits, SafetyOverrides, SafetyVerdict, ShutdownReason,
};
pub use bus::{
    pv_current, pv_voltage, solve_bus, solve_bus_constant_power, solve_bus_resistive, BusError, BusSolution,
    LoadModel, PvParams, SourceModel,
};
pub use cell::{fail_cell, ocv, step_cell, terminal_voltage, CellError, CellState, Chemistry, ChemistryProfile};
pub use characterization::{population_stats, triage_protocol, PopulationStats, TriageReport};
pub use converter::{
    droop_reference, output_characteristic, reflect_to_cell, select_mode, Characteristic, ControlError, DroopSignal,
    Mode, ModuleParams, PowerModule,
};
pub use economics::{npv_lifetime, total_cost, CostModel};
pub use scenario::{emit_csv, run_conditioning_sim, run_scenario, RunMetrics, ScenarioConfig, ScenarioError};
pub use system::{step_system, EventKind, SystemConfig, SystemState, TelemetryEvent, TelemetryRecord};
