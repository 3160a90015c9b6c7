//! Fixtures shared by the benchmarks.

use packsim_core::converter::Characteristic;

/// `n` droop sources with capacity-scaled gains spread over 0.5 to 2.5 A·h.
pub fn characteristics(n: usize) -> Vec<Option<Characteristic>> {
    (0..n)
        .map(|k| {
            let q = 0.5 + 2.0 * k as f64 / n.max(1) as f64;
            Some(Characteristic { v0: 12.0, r_droop: 0.3 / q })
        })
        .collect()
}
