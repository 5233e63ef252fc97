//! Duan smearing: from log-scale predictions to dollar-scale means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmearingFactor {
    pub b: f64,
    pub n_validation: usize,
    pub source: String,
}

/// `b = mean(exp(y - ŷ))` over validation observations on the log-dollar scale.
pub fn fit_smearing_factor(y: &[f64], y_hat: &[f64], source: &str) -> Result<SmearingFactor> {
    if y.is_empty() {
        return Err(Error::config(
            "validation",
            "cannot fit a smearing factor on no observations",
        ));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Alignment(format!(
            "{} actuals against {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    let b = y.iter().zip(y_hat).map(|(a, p)| (a - p).exp()).sum::<f64>() / y.len() as f64;
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Domain(format!(
            "smearing factor {b} is not a positive finite number"
        )));
    }
    Ok(SmearingFactor {
        b,
        n_validation: y.len(),
        source: source.to_string(),
    })
}

/// `Ŷ = exp(ŷ) · b`.
pub fn apply_correction(y_hat: &[f64], factor: &SmearingFactor) -> Vec<f64> {
    y_hat.iter().map(|p| p.exp() * factor.b).collect()
}

/// Separate factors per group (for example per development quarter). Groups
/// unseen in validation fall back to the pooled factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedSmearing {
    pub pooled: SmearingFactor,
    pub groups: BTreeMap<i64, SmearingFactor>,
}

impl GroupedSmearing {
    pub fn fit(y: &[f64], y_hat: &[f64], keys: &[i64], source: &str) -> Result<Self> {
        let pooled = fit_smearing_factor(y, y_hat, source)?;
        if keys.len() != y.len() {
            return Err(Error::Alignment(
                "group keys do not match observations".into(),
            ));
        }
        let mut buckets: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((a, p), k) in y.iter().zip(y_hat).zip(keys) {
            let e = buckets.entry(*k).or_default();
            e.0.push(*a);
            e.1.push(*p);
        }
        let groups = buckets
            .into_iter()
            .map(|(k, (a, p))| fit_smearing_factor(&a, &p, source).map(|f| (k, f)))
            .collect::<Result<_>>()?;
        Ok(GroupedSmearing { pooled, groups })
    }

    pub fn factor(&self, key: i64) -> &SmearingFactor {
        self.groups.get(&key).unwrap_or(&self.pooled)
    }

    pub fn apply(&self, y_hat: &[f64], keys: &[i64]) -> Vec<f64> {
        y_hat
            .iter()
            .zip(keys)
            .map(|(p, k)| p.exp() * self.factor(*k).b)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_residuals_give_unit_factor() {
        let y = [1.0, 5.0, 9.0];
        assert_eq!(fit_smearing_factor(&y, &y, "m").unwrap().b, 1.0);
    }

    #[test]
    fn ln2_residuals_give_two() {
        let y = [3.0, 7.5];
        let p: Vec<f64> = y.iter().map(|v| v - 2f64.ln()).collect();
        let f = fit_smearing_factor(&y, &p, "m").unwrap();
        assert!((f.b - 2.0).abs() < 1e-12);
        let corrected = apply_correction(&p, &f);
        for (c, a) in corrected.iter().zip(&y) {
            assert!((c - a.exp()).abs() <= 1e-12 * a.exp());
        }
    }

    #[test]
    fn mixed_residuals() {
        let f = fit_smearing_factor(&[0.0, 3f64.ln()], &[0.0, 0.0], "m").unwrap();
        assert!((f.b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn apply_examples() {
        let unit = SmearingFactor {
            b: 1.0,
            n_validation: 1,
            source: "m".into(),
        };
        assert_eq!(apply_correction(&[0.7], &unit), vec![0.7f64.exp()]);
        let f = SmearingFactor { b: 2.5, ..unit };
        assert_eq!(apply_correction(&[0.0], &f), vec![2.5]);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(
            fit_smearing_factor(&[], &[], "m"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            fit_smearing_factor(&[1.0], &[1.0, 2.0], "m"),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn grouped_falls_back_to_pooled() {
        let y = [1.0, 2.0, 3.0];
        let p = [1.0, 2.0 - 2f64.ln(), 3.0];
        let g = GroupedSmearing::fit(&y, &p, &[1, 2, 1], "m").unwrap();
        assert!((g.factor(2).b - 2.0).abs() < 1e-12);
        assert_eq!(g.factor(1).b, 1.0);
        assert_eq!(g.factor(9).b, g.pooled.b);
    }

    proptest! {
        #[test]
        fn refit_after_correction_is_unit(
            pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40)
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| p.0 + 8.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.1 + 8.0).collect();
            let f = fit_smearing_factor(&y, &p, "m").unwrap();
            let shifted: Vec<f64> = apply_correction(&p, &f).iter().map(|v| v.ln()).collect();
            let g = fit_smearing_factor(&y, &shifted, "m").unwrap();
            prop_assert!((g.b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn correction_preserves_order(a in -5.0f64..5.0, d in 1e-6f64..5.0, b in 0.1f64..10.0) {
            let f = SmearingFactor { b, n_validation: 1, source: "m".into() };
            let out = apply_correction(&[a, a + d], &f);
            prop_assert!(out[0] < out[1]);
        }
    }
}
