//! Stability of audit verdicts when the protected group is under-sampled.
//!
//! PUT is the share of audited protected instances labelled unfair. IOR is the
//! share of instances audited in both a baseline and a variant run whose verdict
//! did not change.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditResult, Category};
use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::pipeline::{run_audit, run_audit_with, PipelineConfig, PipelineRun, RunOverrides};
use crate::util::{derive_seed, mean, rng_for, std_dev};

/// Smallest protected count an under-sampled dataset may keep.
pub const MIN_PROTECTED: usize = 50;

/// Protected-group shares used for the imbalance study by default.
pub const DEFAULT_OMEGAS: [f64; 6] = [0.3633, 0.3133, 0.2633, 0.2133, 0.1633, 0.1133];

/// Drops protected instances uniformly at random so that the protected share is
/// as close to `target_omega` as whole instances allow. Unprotected instances and
/// the original row order are kept.
pub fn undersample_to_omega(dataset: &Dataset, target_omega: f64, seed: u64) -> Result<Dataset> {
    let infeasible = |reason: String| Error::InfeasibleOmega {
        target: target_omega,
        reason,
    };
    if !(target_omega > 0.0 && target_omega < 1.0) {
        return Err(infeasible("target must lie in (0, 1)".into()));
    }
    let protected: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.instances[i].s == Group::Protected)
        .collect();
    let m = protected.len();
    let u = dataset.len() - m;
    let keep = (target_omega * u as f64 / (1.0 - target_omega)).round() as usize;
    if keep > m {
        return Err(infeasible(format!(
            "needs {keep} protected instances but only {m} exist; only under-sampling is supported"
        )));
    }
    if keep < MIN_PROTECTED {
        return Err(infeasible(format!(
            "leaves {keep} protected instances, fewer than {MIN_PROTECTED}"
        )));
    }
    if keep == m {
        return Ok(dataset.clone());
    }
    let mut rng = rng_for(seed, "undersample");
    let mut kept: Vec<usize> = index::sample(&mut rng, m, keep)
        .into_iter()
        .map(|k| protected[k])
        .collect();
    kept.extend((0..dataset.len()).filter(|&i| dataset.instances[i].s == Group::Unprotected));
    kept.sort_unstable();
    dataset.subset(&kept)
}

/// #unfair / #audited, ignoring `Unknown`.
pub fn compute_put(results: &[AuditResult]) -> Result<f64> {
    let audited = results
        .iter()
        .filter(|r| r.category != Category::Unknown)
        .count();
    if audited == 0 {
        return Err(Error::NoAuditable);
    }
    let unfair = results.iter().filter(|r| r.category.is_unfair()).count();
    Ok(unfair as f64 / audited as f64)
}

/// Share of instances audited in both runs with the same verdict. The three-way
/// comparison ignores the slight/extreme distinction.
pub fn compute_ior(
    baseline: &[AuditResult],
    variant: &[AuditResult],
    five_way: bool,
) -> Result<f64> {
    let base: HashMap<&str, Category> = baseline
        .iter()
        .filter(|r| r.category != Category::Unknown)
        .map(|r| (r.id.as_str(), r.category))
        .collect();
    let (mut common, mut same) = (0usize, 0usize);
    for r in variant.iter().filter(|r| r.category != Category::Unknown) {
        if let Some(&b) = base.get(r.id.as_str()) {
            common += 1;
            let equal = if five_way {
                b == r.category
            } else {
                b.side() == r.category.side()
            };
            same += usize::from(equal);
        }
    }
    if common == 0 {
        return Err(Error::EmptyIntersection);
    }
    Ok(same as f64 / common as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalanceConfig {
    pub omegas: Vec<f64>,
    pub repeats: usize,
    /// Reuse the baseline δ in every variant run.
    pub freeze_delta: bool,
    /// Re-run model selection per variant; otherwise refit at the baseline strengths.
    pub reselect: bool,
    pub five_way: bool,
    pub seed: u64,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        ImbalanceConfig {
            omegas: DEFAULT_OMEGAS.to_vec(),
            repeats: 5,
            freeze_delta: false,
            reselect: true,
            five_way: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaLevel {
    pub target_omega: f64,
    pub achieved_omega: f64,
    pub repeats: usize,
    pub put_mean: f64,
    pub put_sd: f64,
    pub ior_mean: f64,
    pub ior_sd: f64,
    /// Audited (non-Unknown) instances per repeat.
    pub audited: Vec<usize>,
    /// Set when a single repeat makes the standard deviations meaningless.
    pub single_repeat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub baseline_omega: f64,
    pub baseline_put: f64,
    pub levels: Vec<OmegaLevel>,
    pub notes: Vec<String>,
}

struct Repeat {
    level: usize,
    omega: f64,
    put: f64,
    ior: f64,
    audited: usize,
}

/// Baseline audit, then `repeats` under-sampled audits per target share, each a
/// full pipeline run. Targets that cannot be reached are skipped with a note.
pub fn run_imbalance_study(
    dataset: &Dataset,
    pipeline: &PipelineConfig,
    study: &ImbalanceConfig,
) -> Result<(PipelineRun, ImbalanceReport)> {
    if study.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let baseline = run_audit(dataset, pipeline)?;
    let baseline_put = compute_put(&baseline.results)?;
    let overrides = RunOverrides {
        delta: study.freeze_delta.then_some(baseline.peers.delta),
        strengths: (!study.reselect).then(|| {
            (
                baseline.selection[0].chosen_strength,
                baseline.selection[1].chosen_strength,
            )
        }),
    };

    let mut notes = Vec::new();
    let mut feasible = Vec::new();
    let current = dataset.omega();
    for &omega in &study.omegas {
        if omega > current + 1e-12 {
            notes.push(format!(
                "omega {omega} skipped: above the baseline share {current:.4}"
            ));
            continue;
        }
        match undersample_to_omega(dataset, omega, 0) {
            Ok(_) => feasible.push(omega),
            Err(e) => notes.push(format!("omega {omega} skipped: {e}")),
        }
    }
    let jobs: Vec<(usize, usize)> = (0..feasible.len())
        .flat_map(|l| (0..study.repeats).map(move |r| (l, r)))
        .collect();
    let repeats: Vec<Repeat> = jobs
        .par_iter()
        .map(|&(level, r)| {
            let omega = feasible[level];
            let seed = derive_seed(study.seed, &format!("imbalance/{omega}/{r}"));
            let data = undersample_to_omega(dataset, omega, seed)?;
            let run = run_audit_with(&data, pipeline, overrides)?;
            Ok(Repeat {
                level,
                omega: data.omega(),
                put: compute_put(&run.results)?,
                ior: compute_ior(&baseline.results, &run.results, study.five_way)?,
                audited: run
                    .results
                    .iter()
                    .filter(|r| r.category != Category::Unknown)
                    .count(),
            })
        })
        .collect::<Result<_>>()?;

    let levels = feasible
        .iter()
        .enumerate()
        .map(|(l, &target)| {
            let rs: Vec<&Repeat> = repeats.iter().filter(|r| r.level == l).collect();
            let puts: Vec<f64> = rs.iter().map(|r| r.put).collect();
            let iors: Vec<f64> = rs.iter().map(|r| r.ior).collect();
            let sd = |xs: &[f64]| if xs.len() > 1 { std_dev(xs, 1) } else { 0.0 };
            OmegaLevel {
                target_omega: target,
                achieved_omega: mean(&rs.iter().map(|r| r.omega).collect::<Vec<_>>()),
                repeats: rs.len(),
                put_mean: mean(&puts),
                put_sd: sd(&puts),
                ior_mean: mean(&iors),
                ior_sd: sd(&iors),
                audited: rs.iter().map(|r| r.audited).collect(),
                single_repeat: rs.len() == 1,
            }
        })
        .collect();
    Ok((
        baseline,
        ImbalanceReport {
            baseline_omega: current,
            baseline_put,
            levels,
            notes,
        },
    ))
}

impl ImbalanceReport {
    /// omega, put_mean, put_sd, ior_mean, ior_sd, one row per level.
    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut out = String::from(preamble);
        for n in &self.notes {
            out.push_str(&format!("# note: {n}\n"));
        }
        out.push_str("omega,put_mean,put_sd,ior_mean,ior_sd\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.target_omega, l.put_mean, l.put_sd, l.ior_mean, l.ior_sd
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use proptest::prelude::*;

    fn result(id: &str, category: Category) -> AuditResult {
        AuditResult {
            id: id.into(),
            row: 0,
            p_a: 0.5,
            peer_count: 40,
            observed_y: 1,
            stats: None,
            category,
        }
    }

    fn cats(n_unfair: usize, n_fair: usize) -> Vec<AuditResult> {
        (0..n_unfair)
            .map(|i| result(&format!("u{i}"), Category::SlightlyDiscriminated))
            .chain((0..n_fair).map(|i| result(&format!("f{i}"), Category::FairlyTreated)))
            .collect()
    }

    #[test]
    fn put_examples() {
        assert_eq!(compute_put(&cats(4, 6)).unwrap(), 0.4);
        assert_eq!(compute_put(&cats(0, 5)).unwrap(), 0.0);
        let mut with_unknown = cats(1, 1);
        with_unknown.push(result("x", Category::Unknown));
        assert_eq!(compute_put(&with_unknown).unwrap(), 0.5);
        assert!(matches!(
            compute_put(&[result("x", Category::Unknown)]),
            Err(Error::NoAuditable)
        ));
    }

    #[test]
    fn ior_examples() {
        let base = cats(10, 10);
        assert_eq!(compute_ior(&base, &base, false).unwrap(), 1.0);
        let mut variant = base.clone();
        variant[0].category = Category::FairlyTreated;
        assert_eq!(compute_ior(&base, &variant, false).unwrap(), 0.95);
        // extremeness changes only count under the five-way comparison
        let mut variant = base.clone();
        variant[0].category = Category::ExtremelyDiscriminated;
        assert_eq!(compute_ior(&base, &variant, false).unwrap(), 1.0);
        assert_eq!(compute_ior(&base, &variant, true).unwrap(), 0.95);
        let other = vec![result("zz", Category::FairlyTreated)];
        assert!(matches!(
            compute_ior(&base, &other, false),
            Err(Error::EmptyIntersection)
        ));
    }

    fn toy(m: usize, u: usize) -> Dataset {
        let (ds, _) = crate::synth::generate(&{
            let mut s = crate::synth::sme_preset(1);
            s.n = 100;
            s
        })
        .unwrap();
        let instances = (0..m + u)
            .map(|i| Instance {
                id: format!("r{i}"),
                x: ds.instances[i % 100].x.clone(),
                s: if i < m {
                    Group::Protected
                } else {
                    Group::Unprotected
                },
                y: (i % 3 != 0) as u8,
            })
            .collect();
        Dataset::new(ds.schema.clone(), ds.labels.clone(), instances).unwrap()
    }

    #[test]
    fn undersampling_hits_target() {
        let ds = toy(1719, 2440);
        let out = undersample_to_omega(&ds, 0.3633, 1).unwrap();
        let m = out.count(Group::Protected);
        assert_eq!(out.count(Group::Unprotected), 2440);
        assert_eq!(m, (0.3633f64 * 2440.0 / (1.0 - 0.3633)).round() as usize);
        // within one instance of the target share
        let step = 1.0 / out.len() as f64;
        assert!((out.omega() - 0.3633).abs() <= step);
        let unprotected = |d: &Dataset| {
            d.instances
                .iter()
                .filter(|i| i.s == Group::Unprotected)
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(unprotected(&out), unprotected(&ds));
        assert_eq!(undersample_to_omega(&ds, 0.3633, 1).unwrap(), out);
    }

    #[test]
    fn undersampling_edge_cases() {
        let ds = toy(400, 600);
        assert_eq!(undersample_to_omega(&ds, 0.4, 3).unwrap(), ds);
        assert!(matches!(
            undersample_to_omega(&ds, 0.5, 3),
            Err(Error::InfeasibleOmega { .. })
        ));
        assert!(matches!(
            undersample_to_omega(&ds, 0.05, 3),
            Err(Error::InfeasibleOmega { .. })
        ));
    }

    proptest! {
        #[test]
        fn put_ior_ignore_order(
            labels in prop::collection::vec(0usize..6, 1..40),
            shift in 0usize..40,
        ) {
            let rs: Vec<AuditResult> = labels
                .iter()
                .enumerate()
                .map(|(i, &c)| result(&format!("i{i}"), Category::ALL[c]))
                .collect();
            let mut rotated = rs.clone();
            rotated.rotate_left(shift % rs.len());
            if rs.iter().any(|r| r.category != Category::Unknown) {
                prop_assert_eq!(compute_put(&rs).unwrap(), compute_put(&rotated).unwrap());
                prop_assert_eq!(compute_ior(&rs, &rotated, false).unwrap(), 1.0);
                let put = compute_put(&rs).unwrap();
                prop_assert!((0.0..=1.0).contains(&put));
            }
        }
    }
}
