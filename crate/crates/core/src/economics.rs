//! Bill-of-materials totals and lifetime net present value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("line item {name:?} has negative or non-finite cost {usd}")]
    NegativeCost { name: String, usd: f64 },
    #[error("discount rate must lie in [0, 1), got {0}")]
    DiscountRate(f64),
    #[error("lifetime must be at least 1 year, got {0}")]
    Lifetime(f64),
    #[error("replacement period must be positive, got {0}")]
    Period(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineItem {
    pub name: String,
    pub usd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replacement {
    pub cost_usd: f64,
    pub period_years: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default)]
    pub name: String,
    pub line_items: Vec<LineItem>,
    pub lifetime_years: f64,
    pub discount_rate: f64,
    #[serde(default)]
    pub replacement: Option<Replacement>,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for item in &self.line_items {
            if !(item.usd >= 0.0 && item.usd.is_finite()) {
                return Err(CostError::NegativeCost { name: item.name.clone(), usd: item.usd });
            }
        }
        if !(0.0..1.0).contains(&self.discount_rate) {
            return Err(CostError::DiscountRate(self.discount_rate));
        }
        if !(self.lifetime_years >= 1.0) {
            return Err(CostError::Lifetime(self.lifetime_years));
        }
        if let Some(r) = self.replacement {
            if !(r.period_years > 0.0) {
                return Err(CostError::Period(r.period_years));
            }
            if !(r.cost_usd >= 0.0 && r.cost_usd.is_finite()) {
                return Err(CostError::NegativeCost { name: "replacement".into(), usd: r.cost_usd });
            }
        }
        Ok(())
    }
}

/// Rounds half-up to whole cents. The small bias absorbs binary
/// representation error such as 0.125 stored as 0.12499999.
pub fn round_cents(usd: f64) -> f64 {
    ((usd * 100.0) + 0.5 + 1e-7).floor() / 100.0
}

/// Unrounded sum of the line items.
pub fn total_cost_exact(model: &CostModel) -> f64 {
    model.line_items.iter().map(|i| i.usd).sum()
}

/// Sum of the line items in cents.
pub fn total_cost(model: &CostModel) -> f64 {
    round_cents(total_cost_exact(model))
}

/// Times (years) at which replacements fall: period multiples strictly
/// inside the lifetime.
pub fn replacement_times(model: &CostModel) -> Vec<f64> {
    let Some(r) = model.replacement else { return Vec::new() };
    (1..).map(|k| k as f64 * r.period_years).take_while(|&t| t < model.lifetime_years).collect()
}

/// Unrounded present value of the purchase plus discounted replacements.
pub fn npv_exact(model: &CostModel) -> f64 {
    let cost = model.replacement.map_or(0.0, |r| r.cost_usd);
    let base = 1.0 + model.discount_rate;
    total_cost_exact(model) + replacement_times(model).iter().map(|&t| cost / base.powf(t)).sum::<f64>()
}

/// Lifetime net present value in cents.
pub fn npv_lifetime(model: &CostModel) -> f64 {
    round_cents(npv_exact(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(items: &[f64], replacement: Option<Replacement>) -> CostModel {
        CostModel {
            name: String::new(),
            line_items: items.iter().enumerate().map(|(k, &usd)| LineItem { name: format!("item{k}"), usd }).collect(),
            lifetime_years: 10.0,
            discount_rate: 0.02,
            replacement,
        }
    }

    #[test]
    fn empty_model_costs_nothing() {
        assert_eq!(total_cost(&model(&[], None)), 0.0);
        assert_eq!(npv_lifetime(&model(&[], None)), 0.0);
    }

    #[test]
    fn replacements_fall_strictly_inside_lifetime() {
        let m = model(&[], Some(Replacement { cost_usd: 8.0, period_years: 3.0 }));
        assert_eq!(replacement_times(&m), vec![3.0, 6.0, 9.0]);
        let m = CostModel { lifetime_years: 9.0, ..m };
        assert_eq!(replacement_times(&m), vec![3.0, 6.0]);
    }

    #[test]
    fn zero_rate_adds_replacement_at_face_value() {
        let m = CostModel {
            discount_rate: 0.0,
            lifetime_years: 4.0,
            ..model(&[10.0], Some(Replacement { cost_usd: 8.0, period_years: 3.0 }))
        };
        assert_eq!(npv_lifetime(&m), 18.0);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_cents(0.125), 0.13);
        assert_eq!(round_cents(0.124), 0.12);
        assert_eq!(round_cents(37.46), 37.46);
    }

    #[test]
    fn validation() {
        assert!(model(&[-1.0], None).validate().is_err());
        assert!(CostModel { discount_rate: 1.0, ..model(&[], None) }.validate().is_err());
        assert!(CostModel { lifetime_years: 0.5, ..model(&[], None) }.validate().is_err());
        assert!(model(&[], Some(Replacement { cost_usd: 1.0, period_years: 0.0 })).validate().is_err());
        assert!(model(&[1.0], None).validate().is_ok());
    }

    proptest! {
        #[test]
        fn npv_without_replacement_is_total(items in proptest::collection::vec(0.0f64..100.0, 0..8), r in 0.0f64..0.5) {
            let m = CostModel { discount_rate: r, ..model(&items, None) };
            prop_assert_eq!(npv_exact(&m), total_cost_exact(&m));
        }

        #[test]
        fn npv_non_increasing_in_rate(a in 0.0f64..0.5, b in 0.0f64..0.5, cost in 0.0f64..50.0) {
            let rep = Some(Replacement { cost_usd: cost, period_years: 3.0 });
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m_lo = CostModel { discount_rate: lo, ..model(&[5.0], rep) };
            let m_hi = CostModel { discount_rate: hi, ..model(&[5.0], rep) };
            prop_assert!(npv_exact(&m_hi) <= npv_exact(&m_lo) + 1e-12);
        }
    }
}
