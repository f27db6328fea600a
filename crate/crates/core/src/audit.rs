//! Per-instance audit: sample peer means, z-test against the instance's own
//! probability, and categorize the treatment.

use std::collections::BTreeMap;
use std::fmt;

use libm::erfc;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::ic::IcTable;
use crate::model::Predictor;
use crate::peers::{PeerSet, PeerStatus, DEFAULT_DELTA_MULTIPLIER, DEFAULT_MIN_PEERS};
use crate::util::{mean, rng_for, std_dev};

const DEGENERATE_SD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatistic {
    /// z = (m − p_a) / (sd / √N)
    #[default]
    GrandMean,
    /// z = (m − p_a) / sd
    Dispersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub delta_multiplier: f64,
    /// Absolute δ; takes precedence over the multiplier when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_override: Option<f64>,
    /// N, number of peer subsets per instance.
    pub subsets: usize,
    /// K, peers per subset.
    pub subset_size: usize,
    pub min_peers: usize,
    pub alpha: f64,
    pub extreme_factor: f64,
    pub test_statistic: TestStatistic,
    pub one_sided: bool,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            delta_multiplier: DEFAULT_DELTA_MULTIPLIER,
            delta_override: None,
            subsets: 100,
            subset_size: 30,
            min_peers: DEFAULT_MIN_PEERS,
            alpha: 0.05,
            extreme_factor: 0.1,
            test_statistic: TestStatistic::GrandMean,
            one_sided: false,
            seed: 0,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.delta_multiplier > 0.0 && self.delta_multiplier.is_finite()) {
            return fail(format!(
                "delta_multiplier must be positive, got {}",
                self.delta_multiplier
            ));
        }
        if let Some(d) = self.delta_override {
            if !(d > 0.0) {
                return fail(format!("delta_override must be positive, got {d}"));
            }
        }
        if self.subsets < 2 {
            return fail(format!(
                "subsets (N) must be at least 2, got {}",
                self.subsets
            ));
        }
        if self.subset_size == 0 {
            return fail("subset_size (K) must be at least 1".into());
        }
        if self.subset_size > self.min_peers {
            return fail(format!(
                "subset_size (K = {}) cannot exceed min_peers ({})",
                self.subset_size, self.min_peers
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.extreme_factor >= 0.0) {
            return fail(format!(
                "extreme_factor must be nonnegative, got {}",
                self.extreme_factor
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    ExtremelyDiscriminated,
    SlightlyDiscriminated,
    FairlyTreated,
    SlightlyPrivileged,
    ExtremelyPrivileged,
    Unknown,
}

/// Treatment with the extremeness sub-label dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Discriminated,
    Fair,
    Privileged,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ExtremelyDiscriminated,
        Category::SlightlyDiscriminated,
        Category::FairlyTreated,
        Category::SlightlyPrivileged,
        Category::ExtremelyPrivileged,
        Category::Unknown,
    ];

    pub fn abbreviation(self) -> &'static str {
        match self {
            Category::ExtremelyDiscriminated => "ED",
            Category::SlightlyDiscriminated => "SD",
            Category::FairlyTreated => "FT",
            Category::SlightlyPrivileged => "SP",
            Category::ExtremelyPrivileged => "EP",
            Category::Unknown => "UN",
        }
    }

    pub fn side(self) -> Option<Side> {
        match self {
            Category::ExtremelyDiscriminated | Category::SlightlyDiscriminated => {
                Some(Side::Discriminated)
            }
            Category::FairlyTreated => Some(Side::Fair),
            Category::SlightlyPrivileged | Category::ExtremelyPrivileged => Some(Side::Privileged),
            Category::Unknown => None,
        }
    }

    pub fn is_unfair(self) -> bool {
        matches!(self.side(), Some(Side::Discriminated | Side::Privileged))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditStats {
    /// Sample means T̄_i of the N peer subsets.
    pub t_bars: Vec<f64>,
    pub peer_mean: f64,
    pub peer_sd: f64,
    #[serde(with = "crate::util::extended_float")]
    pub z: f64,
    pub p_value: f64,
    /// Largest |ξ_a − mean subset ξ| over the sampled subsets.
    pub max_subset_ic_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub id: String,
    /// Dataset row of the audited instance.
    pub row: usize,
    /// P(Ŷ = 1 | s−, x) for the instance itself.
    pub p_a: f64,
    pub peer_count: usize,
    pub observed_y: u8,
    /// Absent exactly when the category is `Unknown`.
    pub stats: Option<AuditStats>,
    pub category: Category,
}

/// Draws `n` subsets of `k` distinct positions out of `0..len`, independently.
pub fn sample_subsets(
    len: usize,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if k > len {
        return Err(Error::NotEnoughPeers {
            needed: k,
            available: len,
        });
    }
    Ok((0..n)
        .map(|_| index::sample(rng, len, k).into_vec())
        .collect())
}

/// Means of `n` random `k`-subsets of `peer_probs`, deterministic in `seed`.
pub fn sample_peer_means(peer_probs: &[f64], k: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_for(seed, "peer-subsets");
    let subsets = sample_subsets(peer_probs.len(), k, n, &mut rng)?;
    Ok(subsets
        .iter()
        .map(|s| s.iter().map(|&j| peer_probs[j]).sum::<f64>() / k as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// P(Z ≥ z) for a standard normal Z.
pub fn upper_tail(z: f64) -> f64 {
    if z == f64::INFINITY {
        0.0
    } else if z == f64::NEG_INFINITY {
        1.0
    } else {
        0.5 * erfc(z / std::f64::consts::SQRT_2)
    }
}

/// z statistic of the peer sample means against p_a, with m = mean(t̄) and sd the
/// sample standard deviation of t̄. The grand-mean form is the dispersion form
/// times √N.
pub fn z_test(t_bars: &[f64], p_a: f64, variant: TestStatistic) -> Result<ZTest> {
    if t_bars.len() < 2 {
        return Err(Error::Config(format!(
            "z-test needs at least 2 sample means, got {}",
            t_bars.len()
        )));
    }
    let m = mean(t_bars);
    let sd = std_dev(t_bars, 1);
    let diff = m - p_a;
    if sd < DEGENERATE_SD {
        return Ok(if diff.abs() < DEGENERATE_SD {
            ZTest {
                z: 0.0,
                p_value: 1.0,
            }
        } else {
            ZTest {
                z: f64::INFINITY.copysign(diff),
                p_value: 0.0,
            }
        });
    }
    let z_disp = diff / sd;
    let z = match variant {
        TestStatistic::Dispersion => z_disp,
        TestStatistic::GrandMean => z_disp * (t_bars.len() as f64).sqrt(),
    };
    Ok(ZTest {
        z,
        p_value: two_sided_p(z),
    })
}

/// Treatment category. `p_value ≥ alpha` is fair; otherwise the instance is on the
/// discriminated side when its own probability is below the peer mean, and the
/// label is extreme when the gap exceeds `extreme_factor × p_a`.
pub fn categorize(
    p_a: f64,
    peer_mean: f64,
    p_value: f64,
    alpha: f64,
    extreme_factor: f64,
) -> Category {
    if p_value >= alpha || p_a == peer_mean {
        return Category::FairlyTreated;
    }
    let extreme = (p_a - peer_mean).abs() > extreme_factor * p_a;
    match (p_a < peer_mean, extreme) {
        (true, true) => Category::ExtremelyDiscriminated,
        (true, false) => Category::SlightlyDiscriminated,
        (false, false) => Category::SlightlyPrivileged,
        (false, true) => Category::ExtremelyPrivileged,
    }
}

/// Audits every protected instance in `dataset`. `ic` and `peers` must come from the
/// same dataset. Each instance draws from its own RNG stream keyed on (seed, id),
/// so the output does not depend on scheduling.
pub fn audit_all(
    dataset: &Dataset,
    outcome_model: &dyn Predictor,
    ic: &IcTable,
    peers: &PeerSet,
    config: &AuditConfig,
) -> Result<Vec<AuditResult>> {
    config.validate()?;
    if ic.rows.len() != dataset.len() {
        return Err(Error::Dimension {
            expected: dataset.len(),
            actual: ic.rows.len(),
        });
    }
    if !outcome_model.includes_protected() {
        log::warn!("outcome model ignores the protected label");
    }
    let probs: Vec<f64> = dataset
        .instances
        .par_iter()
        .map(|i| outcome_model.predict_proba(i))
        .collect::<Result<_>>()?;

    peers
        .entries
        .par_iter()
        .map(|entry| {
            let inst = &dataset.instances[entry.row];
            if inst.s != Group::Protected || inst.id != entry.id {
                return Err(Error::UnknownId(entry.id.clone()));
            }
            let p_a = probs[entry.row];
            let base = AuditResult {
                id: inst.id.clone(),
                row: entry.row,
                p_a,
                peer_count: entry.peers.len(),
                observed_y: inst.y,
                stats: None,
                category: Category::Unknown,
            };
            if entry.status == PeerStatus::Unknown || entry.peers.len() < config.min_peers {
                return Ok(base);
            }
            let mut rng = rng_for(config.seed, &format!("audit/{}", inst.id));
            let subsets = sample_subsets(
                entry.peers.len(),
                config.subset_size,
                config.subsets,
                &mut rng,
            )?;
            let k = config.subset_size as f64;
            let xi_a = ic.rows[entry.row].xi;
            let mut t_bars = Vec::with_capacity(subsets.len());
            let mut max_gap: f64 = 0.0;
            for subset in &subsets {
                let mut t = 0.0;
                let mut xi = 0.0;
                for &j in subset {
                    let row = entry.peers[j];
                    t += probs[row];
                    xi += ic.rows[row].xi;
                }
                t_bars.push(t / k);
                let gap = (xi_a - xi / k).abs();
                if gap > peers.delta {
                    return Err(Error::BoundViolation {
                        id: inst.id.clone(),
                        gap,
                        delta: peers.delta,
                    });
                }
                max_gap = max_gap.max(gap);
            }
            let test = z_test(&t_bars, p_a, config.test_statistic)?;
            let peer_mean = mean(&t_bars);
            let p_value = if config.one_sided {
                // smaller of the two one-sided p-values, direction read from the sign of z
                upper_tail(test.z).min(upper_tail(-test.z))
            } else {
                test.p_value
            };
            let category = categorize(p_a, peer_mean, p_value, config.alpha, config.extreme_factor);
            Ok(AuditResult {
                stats: Some(AuditStats {
                    peer_sd: std_dev(&t_bars, 1),
                    peer_mean,
                    t_bars,
                    z: test.z,
                    p_value,
                    max_subset_ic_gap: max_gap,
                }),
                category,
                ..base
            })
        })
        .collect()
}

pub fn category_counts(results: &[AuditResult]) -> BTreeMap<Category, usize> {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for r in results {
        *counts.entry(r.category).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRejection {
    pub category: Category,
    pub members: usize,
    /// Share of members with observed y = 0.
    pub rejection_rate: f64,
    /// Mean over members of their peers' rejection rate.
    pub peer_rejection_mean: f64,
    /// Sample standard deviation of the per-member peer rejection rates.
    pub peer_rejection_sd: f64,
}

/// Rejection rates per audited category, with the matching peer rejection rates.
/// Empty categories are left out and named in the returned notes.
pub fn category_rejection_stats(
    results: &[AuditResult],
    dataset: &Dataset,
    peers: &PeerSet,
) -> (Vec<CategoryRejection>, Vec<String>) {
    let by_row: BTreeMap<usize, &crate::peers::PeerEntry> =
        peers.entries.iter().map(|e| (e.row, e)).collect();
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for cat in Category::ALL
        .into_iter()
        .filter(|&c| c != Category::Unknown)
    {
        let members: Vec<&AuditResult> = results.iter().filter(|r| r.category == cat).collect();
        if members.is_empty() {
            notes.push(format!("category {cat} has no members; row omitted"));
            continue;
        }
        let rejection_rate =
            members.iter().filter(|r| r.observed_y == 0).count() as f64 / members.len() as f64;
        let peer_rates: Vec<f64> = members
            .iter()
            .filter_map(|r| by_row.get(&r.row))
            .filter(|e| !e.peers.is_empty())
            .map(|e| {
                e.peers
                    .iter()
                    .filter(|&&j| dataset.instances[j].y == 0)
                    .count() as f64
                    / e.peers.len() as f64
            })
            .collect();
        rows.push(CategoryRejection {
            category: cat,
            members: members.len(),
            rejection_rate,
            peer_rejection_mean: if peer_rates.is_empty() {
                0.0
            } else {
                mean(&peer_rates)
            },
            peer_rejection_sd: std_dev(&peer_rates, 1),
        });
    }
    (rows, notes)
}
