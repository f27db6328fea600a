//! δ-peer identification: an unprotected instance j is a peer of protected
//! instance a when |ξ_a − ξ_j| < δ.
//!
//! Unprotected coefficients are sorted once and each protected instance takes the
//! window (ξ_a − δ, ξ_a + δ) by binary search; [`identify_peers_brute_force`] is
//! the quadratic reference scan.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Group;
use crate::error::{Error, Result};
use crate::ic::{csv_field, IcTable};

pub const DEFAULT_DELTA_MULTIPLIER: f64 = 0.3;
pub const DEFAULT_MIN_PEERS: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerStatus {
    Auditable,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub id: String,
    /// Row of the protected instance in the IC table (= dataset order).
    pub row: usize,
    /// IC-table rows of the peers, ascending.
    pub peers: Vec<usize>,
    pub status: PeerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSet {
    pub delta: f64,
    pub min_peers: usize,
    /// One entry per protected instance, in dataset order.
    pub entries: Vec<PeerEntry>,
}

/// δ = multiplier × σ(ξ over the protected group).
pub fn resolve_delta(ic: &IcTable, multiplier: f64) -> Result<f64> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::Config(format!(
            "delta multiplier must be positive, got {multiplier}"
        )));
    }
    if !(ic.sigma_minus > 0.0) {
        return Err(Error::ZeroSpread);
    }
    Ok(multiplier * ic.sigma_minus)
}

fn check_args(delta: f64, min_peers: usize) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if min_peers == 0 {
        return Err(Error::Config("min_peers must be at least 1".into()));
    }
    Ok(())
}

fn entry(ic: &IcTable, row: usize, peers: Vec<usize>, min_peers: usize) -> PeerEntry {
    PeerEntry {
        id: ic.rows[row].id.clone(),
        row,
        status: if peers.len() < min_peers {
            PeerStatus::Unknown
        } else {
            PeerStatus::Auditable
        },
        peers,
    }
}

pub fn identify_peers(ic: &IcTable, delta: f64, min_peers: usize) -> Result<PeerSet> {
    check_args(delta, min_peers)?;
    let mut pool: Vec<(f64, usize)> = ic
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.group == Group::Unprotected)
        .map(|(i, r)| (r.xi, i))
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let protected: Vec<usize> = ic
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.group == Group::Protected)
        .map(|(i, _)| i)
        .collect();

    let entries = protected
        .par_iter()
        .map(|&row| {
            let xa = ic.rows[row].xi;
            // Both predicates are monotone along the sorted pool and use the same
            // arithmetic as the pairwise test, so the window is exact.
            let lo = pool.partition_point(|&(v, _)| v <= xa && !((xa - v).abs() < delta));
            let hi = pool.partition_point(|&(v, _)| v < xa || (v - xa).abs() < delta);
            let mut peers: Vec<usize> = pool[lo..hi.max(lo)].iter().map(|&(_, j)| j).collect();
            peers.sort_unstable();
            entry(ic, row, peers, min_peers)
        })
        .collect();
    Ok(PeerSet {
        delta,
        min_peers,
        entries,
    })
}

/// Reference double loop over every (protected, unprotected) pair.
pub fn identify_peers_brute_force(ic: &IcTable, delta: f64, min_peers: usize) -> Result<PeerSet> {
    check_args(delta, min_peers)?;
    let mut entries = Vec::new();
    for (a, ra) in ic.rows.iter().enumerate() {
        if ra.group != Group::Protected {
            continue;
        }
        let mut peers = Vec::new();
        for (j, rj) in ic.rows.iter().enumerate() {
            if rj.group == Group::Unprotected && (ra.xi - rj.xi).abs() < delta {
                peers.push(j);
            }
        }
        entries.push(entry(ic, a, peers, min_peers));
    }
    Ok(PeerSet {
        delta,
        min_peers,
        entries,
    })
}

impl PeerSet {
    pub fn auditable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == PeerStatus::Auditable)
            .count()
    }

    /// (protected_id, peer_count, status) per protected instance.
    pub fn write_csv(&self, path: &Path, preamble: &str) -> Result<()> {
        let mut out = String::from(preamble);
        out.push_str("protected_id,peer_count,status\n");
        for e in &self.entries {
            let status = match e.status {
                PeerStatus::Auditable => "auditable",
                PeerStatus::Unknown => "unknown",
            };
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(&e.id),
                e.peers.len(),
                status
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Full (protected_id, peer_id) edge list.
    pub fn write_edges_csv(&self, ic: &IcTable, path: &Path, preamble: &str) -> Result<()> {
        let mut out = String::from(preamble);
        out.push_str("protected_id,peer_id\n");
        for e in &self.entries {
            for &p in &e.peers {
                out.push_str(&format!(
                    "{},{}\n",
                    csv_field(&e.id),
                    csv_field(&ic.rows[p].id)
                ));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ic::IcRow;
    use proptest::prelude::*;

    pub(crate) fn table(protected: &[f64], unprotected: &[f64]) -> IcTable {
        let mut rows = Vec::new();
        for (i, &xi) in protected.iter().enumerate() {
            rows.push(IcRow {
                id: format!("p{i}"),
                group: Group::Protected,
                propensity: 0.5,
                xi,
            });
        }
        for (i, &xi) in unprotected.iter().enumerate() {
            rows.push(IcRow {
                id: format!("u{i}"),
                group: Group::Unprotected,
                propensity: 0.5,
                xi,
            });
        }
        let sigma = crate::util::std_dev(protected, 0);
        IcTable {
            marginal: 0.5,
            rows,
            sigma_minus: sigma,
            clamped: 0,
        }
    }

    #[test]
    fn threshold_rule() {
        let ic = table(&[1.0], &[1.1, 1.25]);
        let ps = identify_peers(&ic, 0.2, 1).unwrap();
        assert_eq!(ps.entries[0].peers, vec![1]);
        // a peer exactly δ away is excluded
        let ic = table(&[1.0], &[1.5, 0.5, 1.0]);
        let ps = identify_peers(&ic, 0.5, 1).unwrap();
        assert_eq!(ps.entries[0].peers, vec![3]);
    }

    #[test]
    fn infinite_delta_takes_everyone() {
        let ic = table(&[0.3, 2.0], &[0.1, 5.0, 1.0]);
        let ps = identify_peers(&ic, f64::INFINITY, 3).unwrap();
        for e in &ps.entries {
            assert_eq!(e.peers, vec![2, 3, 4]);
            assert_eq!(e.status, PeerStatus::Auditable);
        }
    }

    #[test]
    fn delta_resolution() {
        let mut ic = table(&[1.0, 1.4], &[1.0]);
        ic.sigma_minus = 0.2;
        assert!((resolve_delta(&ic, 0.3).unwrap() - 0.06).abs() < 1e-15);
        assert!(resolve_delta(&ic, 0.0).is_err());
        ic.sigma_minus = 0.0;
        assert!(matches!(resolve_delta(&ic, 0.3), Err(Error::ZeroSpread)));
    }

    #[test]
    fn floor_marks_unknown() {
        let ic = table(&[1.0, 3.0], &[1.0, 1.01, 1.02]);
        let ps = identify_peers(&ic, 0.1, 3).unwrap();
        assert_eq!(ps.entries[0].status, PeerStatus::Auditable);
        assert_eq!(ps.entries[1].status, PeerStatus::Unknown);
        assert!(ps.entries[1].peers.is_empty());
        assert_eq!(ps.auditable(), 1);
    }

    proptest! {
        #[test]
        fn window_equals_brute_force(
            protected in prop::collection::vec(0.0f64..3.0, 1..40),
            unprotected in prop::collection::vec(0.0f64..3.0, 1..80),
            delta in 0.001f64..1.0,
        ) {
            let ic = table(&protected, &unprotected);
            prop_assert_eq!(identify_peers(&ic, delta, 5).unwrap(), identify_peers_brute_force(&ic, delta, 5).unwrap());
        }

        #[test]
        fn peers_grow_with_delta(
            protected in prop::collection::vec(0.0f64..3.0, 1..20),
            unprotected in prop::collection::vec(0.0f64..3.0, 1..50),
            d1 in 0.001f64..0.5, extra in 0.0f64..0.5,
        ) {
            let ic = table(&protected, &unprotected);
            let small = identify_peers(&ic, d1, 1).unwrap();
            let large = identify_peers(&ic, d1 + extra, 1).unwrap();
            for (a, b) in small.entries.iter().zip(&large.entries) {
                prop_assert!(a.peers.iter().all(|p| b.peers.contains(p)));
            }
        }

        #[test]
        fn equal_coefficients_share_peers(
            xi in 0.0f64..3.0,
            unprotected in prop::collection::vec(0.0f64..3.0, 1..50),
            delta in 0.01f64..1.0,
        ) {
            let ic = table(&[xi, xi], &unprotected);
            let ps = identify_peers(&ic, delta, 1).unwrap();
            prop_assert_eq!(&ps.entries[0].peers, &ps.entries[1].peers);
            for &p in &ps.entries[0].peers {
                prop_assert_eq!(ic.rows[p].group, Group::Unprotected);
                prop_assert!((ic.rows[p].xi - xi).abs() < delta);
            }
        }
    }
}
