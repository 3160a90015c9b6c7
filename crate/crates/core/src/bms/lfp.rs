use super::BmsError;

pub const MIN_TRACE_POINTS: usize = 10;
/// End-of-charge gradient must exceed this multiple of the mid-trace median.
pub const GRADIENT_RATIO: f64 = 5.0;
/// Highest voltage at which an LFP knee is accepted (V).
pub const KNEE_MAX_V: f64 = 3.65;

const FINAL_FRACTION: f64 = 0.05;

/// Detects the LFP end-of-charge knee in a monotone CC charge trace of
/// `(terminal V, charged A·h)` points.
pub fn detect_lfp(trace: &[(f64, f64)]) -> Result<bool, BmsError> {
    let need = MIN_TRACE_POINTS;
    if trace.len() < need {
        return Err(BmsError::InsufficientData { got: trace.len(), need });
    }
    let q0 = trace[0].1;
    let (v_end, q_end) = trace[trace.len() - 1];
    let span = q_end - q0;
    if !(span > 0.0) {
        return Err(BmsError::InsufficientData { got: 0, need });
    }

    let lo = q0 + 0.25 * span;
    let hi = q0 + 0.75 * span;
    let mut mid: Vec<f64> = trace
        .windows(2)
        .filter(|w| w[0].1 >= lo && w[1].1 <= hi && w[1].1 > w[0].1)
        .map(|w| (w[1].0 - w[0].0) / (w[1].1 - w[0].1))
        .collect();
    if mid.is_empty() {
        return Err(BmsError::InsufficientData { got: 0, need: 1 });
    }
    mid.sort_by(f64::total_cmp);
    let n = mid.len();
    let median = if n % 2 == 1 { mid[n / 2] } else { 0.5 * (mid[n / 2 - 1] + mid[n / 2]) };

    let q_start = q_end - FINAL_FRACTION * span;
    let v_start = voltage_at(trace, q_start);
    let final_gradient = (v_end - v_start) / (q_end - q_start);

    Ok(final_gradient > GRADIENT_RATIO * median.max(0.0) && v_end <= KNEE_MAX_V)
}

fn voltage_at(trace: &[(f64, f64)], q: f64) -> f64 {
    let idx = trace.partition_point(|&(_, qk)| qk < q);
    if idx == 0 {
        return trace[0].0;
    }
    if idx == trace.len() {
        return trace[trace.len() - 1].0;
    }
    let (v0, q0) = trace[idx - 1];
    let (v1, q1) = trace[idx];
    if q1 == q0 {
        return v1;
    }
    v0 + (v1 - v0) * (q - q0) / (q1 - q0)
}
