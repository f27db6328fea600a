//! Identification coefficients.
//!
//! For an instance with propensity p = P(S = s− | x) and protected marginal π = P(S = s−):
//!
//! ```text
//! ξ(s−, x) = p / π
//! ξ(s+, x) = (1 − p) / (1 − π)
//! ```
//!
//! so that π·ξ(s−, x) + (1 − π)·ξ(s+, x) = 1 for every x.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::util::std_dev;

pub const PROPENSITY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcRow {
    pub id: String,
    pub group: Group,
    pub propensity: f64,
    pub xi: f64,
}

/// One row per dataset instance, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcTable {
    pub marginal: f64,
    pub rows: Vec<IcRow>,
    /// Population standard deviation of ξ over the protected rows.
    pub sigma_minus: f64,
    /// Number of propensities clamped into [1e-6, 1 − 1e-6].
    pub clamped: usize,
}

/// Empirical P(S = s−) over the whole dataset.
pub fn compute_marginal(dataset: &Dataset) -> Result<f64> {
    let m = dataset.count(Group::Protected);
    if m == 0 {
        return Err(Error::MissingGroup("protected"));
    }
    if m == dataset.len() {
        return Err(Error::MissingGroup("unprotected"));
    }
    Ok(m as f64 / dataset.len() as f64)
}

pub fn identification_coefficient(group: Group, propensity: f64, marginal: f64) -> f64 {
    match group {
        Group::Protected => propensity / marginal,
        Group::Unprotected => (1.0 - propensity) / (1.0 - marginal),
    }
}

pub fn compute_ic(
    dataset: &Dataset,
    propensity_model: &dyn Predictor,
    marginal: f64,
) -> Result<IcTable> {
    if !(marginal > 0.0 && marginal < 1.0) {
        return Err(Error::Config(format!(
            "marginal {marginal} must lie in (0, 1)"
        )));
    }
    if propensity_model.includes_protected() {
        return Err(Error::Config(
            "propensity model must not read the protected column".into(),
        ));
    }
    let raw: Vec<f64> = dataset
        .instances
        .par_iter()
        .map(|inst| propensity_model.predict_proba(inst))
        .collect::<Result<_>>()?;
    Ok(table_from_propensities(dataset, &raw, marginal))
}

pub(crate) fn table_from_propensities(dataset: &Dataset, raw: &[f64], marginal: f64) -> IcTable {
    let mut clamped = 0;
    let rows: Vec<IcRow> = dataset
        .instances
        .iter()
        .zip(raw)
        .map(|(inst, &p)| {
            let q = p.clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP);
            if q != p {
                clamped += 1;
            }
            IcRow {
                id: inst.id.clone(),
                group: inst.s,
                propensity: q,
                xi: identification_coefficient(inst.s, q, marginal),
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!(
            "{clamped} propensities clamped to [{PROPENSITY_CLAMP}, 1 - {PROPENSITY_CLAMP}]"
        );
    }
    let protected: Vec<f64> = rows
        .iter()
        .filter(|r| r.group == Group::Protected)
        .map(|r| r.xi)
        .collect();
    IcTable {
        marginal,
        sigma_minus: std_dev(&protected, 0),
        rows,
        clamped,
    }
}

impl IcTable {
    /// Residual of π·ξ(s−, x) + (1 − π)·ξ(s+, x) − 1 for a row, using its own propensity.
    pub fn identity_residual(&self, row: &IcRow) -> f64 {
        let a = identification_coefficient(Group::Protected, row.propensity, self.marginal);
        let b = identification_coefficient(Group::Unprotected, row.propensity, self.marginal);
        self.marginal * a + (1.0 - self.marginal) * b - 1.0
    }

    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut out = String::from(preamble);
        out.push_str("id,group,propensity,xi\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&r.id),
                r.group,
                r.propensity,
                r.xi
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(identification_coefficient(Group::Protected, 0.5, 0.5), 1.0);
        assert_eq!(
            identification_coefficient(Group::Unprotected, 0.5, 0.5),
            1.0
        );
        assert_eq!(identification_coefficient(Group::Protected, 0.5, 0.25), 2.0);
        let plus = identification_coefficient(Group::Unprotected, 0.5, 0.25);
        assert!((plus - 2.0 / 3.0).abs() < 1e-15);
        assert!((0.25 * 2.0 + 0.75 * plus - 1.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_of_sme_counts() {
        let m: f64 = 1719.0 / 4159.0;
        assert!((m - 0.41332).abs() < 1e-5);
        assert!((100.0 * m - 41.33).abs() < 0.005);
    }

    proptest! {
        #[test]
        fn weighted_identity_holds(p in 1e-6f64..(1.0 - 1e-6), pi in 0.001f64..0.999) {
            let a = identification_coefficient(Group::Protected, p, pi);
            let b = identification_coefficient(Group::Unprotected, p, pi);
            prop_assert!((pi * a + (1.0 - pi) * b - 1.0).abs() < 1e-9);
            prop_assert!(a >= 0.0 && b >= 0.0);
        }

        #[test]
        fn balanced_marginal_sums_to_two(p in 0.0f64..1.0) {
            let a = identification_coefficient(Group::Protected, p, 0.5);
            let b = identification_coefficient(Group::Unprotected, p, 0.5);
            prop_assert!((a + b - 2.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_propensity(p in 0.01f64..0.98, d in 0.001f64..0.01, pi in 0.05f64..0.95) {
            prop_assert!(identification_coefficient(Group::Protected, p + d, pi)
                > identification_coefficient(Group::Protected, p, pi));
            prop_assert!(identification_coefficient(Group::Unprotected, p + d, pi)
                < identification_coefficient(Group::Unprotected, p, pi));
        }
    }
}
