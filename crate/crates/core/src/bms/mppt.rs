/// Default perturbation step (A).
pub const DEFAULT_MPPT_STEP_A: f64 = 0.050;

/// Fixed-step perturb-and-observe tracker on a current reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpptState {
    pub i_ref: f64,
    pub step_size: f64,
    pub last_power: f64,
    pub direction: f64,
    /// Reference applied when a cell is first attached.
    pub i_min: f64,
    /// Upper clamp derived from the cell's charge-current limit.
    pub i_cap: f64,
}

impl MpptState {
    /// Tracker for a newly attached cell: starts at the minimum reference.
    pub fn new(i_min: f64, step_size: f64, i_cap: f64) -> Self {
        Self { i_ref: i_min, step_size, last_power: f64::NEG_INFINITY, direction: 1.0, i_min, i_cap: i_cap.max(i_min) }
    }
}

/// One P&O update given the power measured at the current reference.
pub fn mppt_step(state: &MpptState, measured_power: f64) -> MpptState {
    // no power means the reference is past what the source can deliver
    let mut direction = if measured_power <= 0.0 {
        if state.i_ref > state.i_min {
            -1.0
        } else {
            1.0
        }
    } else if measured_power >= state.last_power {
        state.direction
    } else {
        -state.direction
    };
    let i_ref = (state.i_ref + direction * state.step_size).clamp(state.i_min, state.i_cap);
    // pinned at the floor: turn back up, otherwise equal readings keep it there
    if i_ref <= state.i_min && direction < 0.0 {
        direction = 1.0;
    }
    MpptState { i_ref, direction, last_power: measured_power, ..*state }
}
