//! Watch-out lists for fairly treated rejections.
//!
//! A protected instance that was treated like its peers but still rejected is
//! compared feature by feature with its accepted peers. For each actionable feature
//! the mid-rank tail probability
//!
//! ```text
//! q = (#peers strictly worse + ½·#ties) / #peers
//! ```
//!
//! is computed on a better-is-higher scale, and the feature is flagged when q ≤ α.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{AuditResult, Category};
use crate::data::{Dataset, Direction, FeatureSchema, Instance};
use crate::error::{Error, Result};
use crate::ic::csv_field;
use crate::peers::PeerSet;

pub const DEFAULT_MIN_ACCEPTED_PEERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub feature: String,
    pub value: String,
    pub q: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub accepted_peers: usize,
    pub tests: Vec<FeatureTest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: String,
    pub flagged: usize,
    pub explained: usize,
    /// flagged / explained, in percent.
    pub percentage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub explained: usize,
    pub features: Vec<FeatureSummary>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutcome {
    pub records: Vec<ExplanationRecord>,
    /// (instance id, reason) for gated-in instances that were not explained.
    pub skipped: Vec<(String, String)>,
}

/// Non-intrinsic features with a declared better direction.
pub fn eligible_features(schema: &FeatureSchema) -> Vec<usize> {
    schema
        .entries
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.intrinsic && f.better_direction != Direction::None)
        .map(|(i, _)| i)
        .collect()
}

fn oriented(direction: Direction, v: f64) -> f64 {
    match direction {
        Direction::Lower => -v,
        _ => v,
    }
}

/// Mid-rank tail probability of `value` among `peers`, larger is better.
pub fn tail_probability(value: f64, peers: &[f64]) -> f64 {
    let worse = peers.iter().filter(|&&p| p < value).count() as f64;
    let ties = peers.iter().filter(|&&p| p == value).count() as f64;
    (worse + 0.5 * ties) / peers.len() as f64
}

/// Tests every eligible feature of `instance` against `accepted_peers`.
pub fn explain_instance(
    instance: &Instance,
    accepted_peers: &[&Instance],
    dataset: &Dataset,
    alpha: f64,
) -> Result<Vec<FeatureTest>> {
    if accepted_peers.is_empty() {
        return Err(Error::NotEnoughPeers {
            needed: 1,
            available: 0,
        });
    }
    let schema = &dataset.schema;
    Ok(eligible_features(schema)
        .into_iter()
        .map(|j| {
            let dir = schema.entries[j].better_direction;
            let peers: Vec<f64> = accepted_peers
                .iter()
                .map(|p| oriented(dir, p.x[j]))
                .collect();
            let q = tail_probability(oriented(dir, instance.x[j]), &peers);
            FeatureTest {
                feature: schema.entries[j].name.clone(),
                value: dataset.format_value(j, instance.x[j]),
                q,
                flagged: q <= alpha,
            }
        })
        .collect())
}

/// Explains every (FairlyTreated, y = 0) result with at least `min_accepted`
/// accepted peers. Other results never produce a record.
pub fn explain_all(
    dataset: &Dataset,
    results: &[AuditResult],
    peers: &PeerSet,
    alpha: f64,
    min_accepted: usize,
) -> Result<ExplainOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "explanation alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let by_row: BTreeMap<usize, &crate::peers::PeerEntry> =
        peers.entries.iter().map(|e| (e.row, e)).collect();
    let no_features = eligible_features(&dataset.schema).is_empty();
    let outcomes: Vec<std::result::Result<ExplanationRecord, (String, String)>> = results
        .par_iter()
        .filter(|r| r.category == Category::FairlyTreated && r.observed_y == 0)
        .map(|r| {
            let Some(entry) = by_row.get(&r.row) else {
                return Err((r.id.clone(), "no peer entry".to_string()));
            };
            let accepted: Vec<&Instance> = entry
                .peers
                .iter()
                .map(|&j| &dataset.instances[j])
                .filter(|p| p.y == 1)
                .collect();
            if accepted.len() < min_accepted.max(1) {
                return Err((
                    r.id.clone(),
                    format!("{} accepted peers, need {min_accepted}", accepted.len()),
                ));
            }
            let tests = explain_instance(&dataset.instances[r.row], &accepted, dataset, alpha)
                .map_err(|e| (r.id.clone(), e.to_string()))?;
            Ok(ExplanationRecord {
                id: r.id.clone(),
                accepted_peers: accepted.len(),
                tests,
                note: no_features.then(|| "no eligible features".to_string()),
            })
        })
        .collect();
    let mut out = ExplainOutcome::default();
    for o in outcomes {
        match o {
            Ok(rec) => out.records.push(rec),
            Err(skip) => out.skipped.push(skip),
        }
    }
    Ok(out)
}

pub fn aggregate_explanations(records: &[ExplanationRecord]) -> ExplanationReport {
    let mut report = ExplanationReport {
        explained: records.len(),
        ..Default::default()
    };
    if records.is_empty() {
        report.notes.push("no instances were explained".into());
        return report;
    }
    // first-seen feature order, which is schema order for records from explain_all
    let mut order: Vec<String> = Vec::new();
    let mut flagged: BTreeMap<String, usize> = BTreeMap::new();
    for rec in records {
        for t in &rec.tests {
            if !flagged.contains_key(&t.feature) {
                order.push(t.feature.clone());
            }
            *flagged.entry(t.feature.clone()).or_default() += usize::from(t.flagged);
        }
    }
    if order.is_empty() {
        report.notes.push("no eligible features".into());
    }
    report.features = order
        .into_iter()
        .map(|f| {
            let k = flagged[&f];
            FeatureSummary {
                percentage: 100.0 * k as f64 / records.len() as f64,
                flagged: k,
                explained: records.len(),
                feature: f,
            }
        })
        .collect();
    report
}

/// One line per (instance, feature).
pub fn write_records_csv(records: &[ExplanationRecord], path: &Path, preamble: &str) -> Result<()> {
    let mut out = String::from(preamble);
    out.push_str("instance_id,feature,value,q,flagged\n");
    for r in records {
        for t in &r.tests {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.id),
                csv_field(&t.feature),
                csv_field(&t.value),
                t.q,
                t.flagged
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-feature flagged percentage, one row per feature.
pub fn write_summary_csv(report: &ExplanationReport, path: &Path, preamble: &str) -> Result<()> {
    let mut out = String::from(preamble);
    for n in &report.notes {
        out.push_str(&format!("# note: {n}\n"));
    }
    out.push_str("feature,percentage_worse,flagged,explained\n");
    for f in &report.features {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&f.feature),
            f.percentage,
            f.flagged,
            f.explained
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_ties_give_half() {
        assert_eq!(tail_probability(2.0, &[2.0; 25]), 0.5);
    }

    #[test]
    fn strictly_worst_gives_zero() {
        let peers: Vec<f64> = (0..40).map(|i| 1.0 + i as f64).collect();
        assert_eq!(tail_probability(0.0, &peers), 0.0);
        assert_eq!(tail_probability(100.0, &peers), 1.0);
    }

    #[test]
    fn aggregate_ratio() {
        let rec = |id: &str, flag: bool| ExplanationRecord {
            id: id.into(),
            accepted_peers: 20,
            tests: vec![FeatureTest {
                feature: "BI".into(),
                value: "yes".into(),
                q: 0.0,
                flagged: flag,
            }],
            note: None,
        };
        let r = aggregate_explanations(&[
            rec("a", true),
            rec("b", true),
            rec("c", false),
            rec("d", true),
        ]);
        assert_eq!(r.features[0].percentage, 75.0);
        assert_eq!(r.features[0].flagged, 3);
        let empty = aggregate_explanations(&[]);
        assert_eq!(empty.explained, 0);
        assert!(empty.features.is_empty());
        assert_eq!(empty.notes.len(), 1);
    }

    proptest! {
        #[test]
        fn flipping_direction_complements(
            v in 0u8..4,
            peers in prop::collection::vec(0u8..4, 1..60),
        ) {
            let p: Vec<f64> = peers.iter().map(|&x| x as f64).collect();
            let neg: Vec<f64> = p.iter().map(|x| -x).collect();
            let q = tail_probability(v as f64, &p);
            let flipped = tail_probability(-(v as f64), &neg);
            prop_assert!((q + flipped - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_relabel(
            v in 0u8..5,
            peers in prop::collection::vec(0u8..5, 1..60),
            offsets in prop::collection::vec(0.1f64..3.0, 5),
        ) {
            // strictly increasing relabel of levels 0..5
            let map: Vec<f64> = offsets.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).collect();
            let raw: Vec<f64> = peers.iter().map(|&x| x as f64).collect();
            let relabelled: Vec<f64> = peers.iter().map(|&x| map[x as usize]).collect();
            prop_assert_eq!(
                tail_probability(v as f64, &raw),
                tail_probability(map[v as usize], &relabelled)
            );
        }

        #[test]
        fn q_in_unit_interval(v in -5.0f64..5.0, peers in prop::collection::vec(-5.0f64..5.0, 1..50)) {
            let q = tail_probability(v, &peers);
            prop_assert!((0.0..=1.0).contains(&q));
        }
    }
}
