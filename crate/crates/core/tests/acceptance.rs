//! Acceptance gate. Each criterion is its own test and writes one PASS/FAIL line
//! straight to stdout, so the lines appear even when the harness captures output.
//! A shared lock runs the criteria one at a time so the runtime budgets are
//! measured without interference.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use peerfair::audit::{z_test, AuditConfig, AuditResult, Category, Side, TestStatistic};
use peerfair::data::{Dataset, Encoder, Group};
use peerfair::explain::{aggregate_explanations, explain_all};
use peerfair::ic::{compute_ic, compute_marginal};
use peerfair::model::{fit_model, Target};
use peerfair::peers::{
    identify_peers, identify_peers_brute_force, resolve_delta, PeerEntry, PeerSet, PeerStatus,
};
use peerfair::pipeline::{run_audit, PipelineConfig};
use peerfair::robustness::{run_imbalance_study, ImbalanceConfig};
use peerfair::synth::{generate, oracle_gap, sme_preset, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(number: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {number:02} {name:<32} {} | {detail} | {:.2}s\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {number} failed: {detail}");
}

const SEEDS: [u64; 10] = [101, 102, 103, 104, 105, 106, 107, 108, 109, 110];

fn null_spec(seed: u64) -> SynthSpec {
    let mut spec = sme_preset(seed);
    spec.n = 10_000;
    spec.direct_bias = 0.0;
    spec.zero_propensity_effects();
    spec
}

fn config(seed: u64, statistic: TestStatistic) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.audit.seed = seed;
    c.audit.test_statistic = statistic;
    c
}

fn audited(results: &[AuditResult]) -> impl Iterator<Item = &AuditResult> {
    results.iter().filter(|r| r.category != Category::Unknown)
}

fn side_fraction(results: &[AuditResult], side: Side) -> f64 {
    let n = audited(results).count();
    audited(results)
        .filter(|r| r.category.side() == Some(side))
        .count() as f64
        / n as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_01_ic_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let (ds, _) = generate(&sme_preset(1)).unwrap();
    let g = fit_model(&ds, &Encoder::fit(&ds), Target::Protected, 1.0).unwrap();
    let start = Instant::now();
    let marginal = compute_marginal(&ds).unwrap();
    let ic = compute_ic(&ds, &g, marginal).unwrap();
    let mut worst: f64 = 0.0;
    for row in &ic.rows {
        // ξ of the row's own group plus the coefficient it would have under the other label
        let minus = row.propensity / marginal;
        let plus = (1.0 - row.propensity) / (1.0 - marginal);
        let own = if row.group == Group::Protected {
            minus
        } else {
            plus
        };
        assert_eq!(own, row.xi);
        worst = worst.max((marginal * minus + (1.0 - marginal) * plus - 1.0).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "IC identity",
        ds.len() >= 1000 && worst <= 1e-9 && elapsed < Duration::from_secs(1),
        &format!("n = {}, max residual {worst:.2e}", ds.len()),
        elapsed,
    );
}

#[test]
fn criterion_02_peer_window_equals_brute_force() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut pairs = 0usize;
    for k in 0..50u64 {
        let mut spec = sme_preset(1000 + k);
        spec.n = rng.random_range(100..=500);
        let (ds, _) = generate(&spec).unwrap();
        let g = fit_model(&ds, &Encoder::fit(&ds), Target::Protected, 1.0).unwrap();
        let ic = compute_ic(&ds, &g, compute_marginal(&ds).unwrap()).unwrap();
        let delta = resolve_delta(&ic, rng.random_range(0.05..1.0)).unwrap();
        let fast = identify_peers(&ic, delta, 35).unwrap();
        let slow = identify_peers_brute_force(&ic, delta, 35).unwrap();
        pairs += slow.entries.iter().map(|e| e.peers.len()).sum::<usize>();
        if fast != slow {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "peer window = brute force",
        mismatches == 0 && elapsed < Duration::from_secs(10),
        &format!("50 datasets, {mismatches} mismatches, {pairs} peer pairs"),
        elapsed,
    );
}

#[test]
fn criterion_03_proposition_bound() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ds, _) = generate(&sme_preset(3)).unwrap();
    // audit_all aborts with BoundViolation on the first subset outside the bound
    let run = run_audit(&ds, &config(3, TestStatistic::GrandMean));
    let elapsed = start.elapsed();
    let (pass, detail) = match run {
        Ok(run) => {
            let delta = run.peers.delta;
            let stats: Vec<_> = run
                .results
                .iter()
                .filter_map(|r| r.stats.as_ref())
                .collect();
            let worst = stats
                .iter()
                .map(|s| s.max_subset_ic_gap)
                .fold(0.0, f64::max);
            let subsets = stats.iter().map(|s| s.t_bars.len()).sum::<usize>();
            (
                worst <= delta && subsets == 100 * stats.len(),
                format!("{subsets} subsets, max gap {worst:.4e} <= delta {delta:.4e}"),
            )
        }
        Err(e) => (false, e.to_string()),
    };
    verdict(3, "Proposition bound", pass, &detail, elapsed);
}

#[test]
fn criterion_04_z_test_closed_form() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    // (t_bars, p_a, z_disp, p_disp, z_grand, p_grand); z by hand, p from an external normal table
    #[allow(clippy::type_complexity)]
    let cases: [(&[f64], f64, f64, f64, f64, f64); 2] = [
        (
            &[0.7, 0.8, 0.9, 1.0],
            0.8,
            0.15f64.sqrt(),
            0.6985353583033391,
            0.6f64.sqrt(),
            0.4385780260810005,
        ),
        (
            &[0.61, 0.64, 0.58, 0.66, 0.60, 0.63],
            0.55,
            2.415229457698236,
            0.015725299754505526,
            5.9160797830996055,
            3.2970532689974904e-09,
        ),
    ];
    for (t, p_a, zd, pd, zg, pg) in cases {
        let d = z_test(t, p_a, TestStatistic::Dispersion).unwrap();
        let g = z_test(t, p_a, TestStatistic::GrandMean).unwrap();
        for (got, want) in [(d.z, zd), (d.p_value, pd), (g.z, zg), (g.p_value, pg)] {
            worst = worst.max((got - want).abs());
        }
        ok &= g.z == d.z * (t.len() as f64).sqrt();
    }
    let exact = z_test(&[0.8; 5], 0.8, TestStatistic::GrandMean).unwrap();
    ok &= exact.z == 0.0 && exact.p_value == 1.0;
    verdict(
        4,
        "z-test closed form",
        ok && worst <= 1e-12,
        &format!("max abs error {worst:.2e}, z_grand = z_disp * sqrt(N) exactly: {ok}"),
        start.elapsed(),
    );
}

#[test]
fn criterion_05_config_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let snapshot = "\
train_fraction = 0.8
cv_folds = 5
strength_grid = [0.01, 0.1, 1.0, 10.0, 100.0]
min_accepted_peers = 10

[audit]
delta_multiplier = 0.3
subsets = 100
subset_size = 30
min_peers = 35
alpha = 0.05
extreme_factor = 0.1
test_statistic = \"grand_mean\"
one_sided = false
seed = 0
";
    let got = PipelineConfig::default().to_toml_string().unwrap();
    let a = AuditConfig::default();
    let fields = a.delta_multiplier == 0.3
        && a.subsets == 100
        && a.subset_size == 30
        && a.min_peers == 35
        && a.alpha == 0.05
        && a.extreme_factor == 0.1;
    verdict(
        5,
        "config fidelity",
        got == snapshot && fields,
        if got == snapshot {
            "snapshot matches"
        } else {
            "snapshot differs"
        },
        start.elapsed(),
    );
    assert_eq!(got, snapshot);
}

#[test]
fn criterion_06_null_calibration() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut flagged = Vec::new();
    for seed in SEEDS {
        let (ds, _) = generate(&null_spec(seed)).unwrap();
        let run = run_audit(&ds, &config(seed, TestStatistic::Dispersion)).unwrap();
        flagged.push(
            audited(&run.results)
                .filter(|r| r.category.is_unfair())
                .count() as f64
                / audited(&run.results).count() as f64,
        );
    }
    let elapsed = start.elapsed();
    let m = mean(&flagged);
    verdict(
        6,
        "null calibration (dispersion)",
        m <= 0.25 && elapsed < Duration::from_secs(120),
        &format!(
            "mean flagged {m:.4} (per seed {:?})",
            flagged
                .iter()
                .map(|f| (f * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        ),
        elapsed,
    );
}

#[test]
fn criterion_07_bias_detection() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let biases = [0.0, -0.5, -1.0, -1.5];
    let mut table: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (name, statistic) in [
        ("grand_mean", TestStatistic::GrandMean),
        ("dispersion", TestStatistic::Dispersion),
    ] {
        let fractions: Vec<f64> = biases
            .iter()
            .map(|&b| {
                let per_seed: Vec<f64> = SEEDS
                    .iter()
                    .map(|&seed| {
                        let mut spec = sme_preset(seed);
                        spec.direct_bias = b;
                        let (ds, _) = generate(&spec).unwrap();
                        let run = run_audit(&ds, &config(seed, statistic)).unwrap();
                        side_fraction(&run.results, Side::Discriminated)
                    })
                    .collect();
                mean(&per_seed)
            })
            .collect();
        table.insert(name, fractions);
    }
    let elapsed = start.elapsed();
    let increasing = table.values().all(|f| f.windows(2).all(|w| w[1] > w[0]));
    let majority = table.values().all(|f| f[3] > 0.5);
    let detail = table
        .iter()
        .map(|(k, v)| {
            format!(
                "{k}: {:?}",
                v.iter()
                    .map(|x| (x * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        7,
        "bias detection",
        increasing && majority && elapsed < Duration::from_secs(300),
        &format!("discriminated share at b = 0, -0.5, -1, -1.5 -> {detail}"),
        elapsed,
    );
}

#[test]
fn criterion_08_counterfactual_approximation() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let (ds, truth) = generate(&null_spec(seed)).unwrap();
        let run = run_audit(&ds, &config(seed, TestStatistic::GrandMean)).unwrap();
        gaps.push(oracle_gap(&truth, &run.results).unwrap().mean);
    }
    let m = mean(&gaps);
    verdict(
        8,
        "oracle gap",
        m <= 0.05,
        &format!("mean gap {m:.4} over {} seeds", SEEDS.len()),
        start.elapsed(),
    );
}

#[test]
fn criterion_09_imbalance_stability() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ds, _) = generate(&sme_preset(9)).unwrap();
    let study = ImbalanceConfig {
        omegas: vec![0.36, 0.31, 0.26, 0.21, 0.16, 0.11],
        repeats: 5,
        seed: 9,
        ..Default::default()
    };
    let (_, report) =
        run_imbalance_study(&ds, &config(9, TestStatistic::GrandMean), &study).unwrap();
    let elapsed = start.elapsed();
    let ok = report.levels.len() == 6
        && report
            .levels
            .iter()
            .all(|l| l.ior_mean >= 0.9 && l.put_sd <= 0.05)
        && elapsed < Duration::from_secs(900);
    let detail = report
        .levels
        .iter()
        .map(|l| {
            format!(
                "w={:.2} IOR {:.3} PUT {:.3}±{:.3}",
                l.target_omega, l.ior_mean, l.put_mean, l.put_sd
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        9,
        "imbalance stability",
        ok,
        &format!("baseline w={:.4}; {detail}", report.baseline_omega),
        elapsed,
    );
}

/// Cohort whose decisions depend on risk alone; explained instances are rejected
/// protected firms moved to the worst risk level, compared with 60 accepted peers.
fn planted_cohort() -> (Dataset, Vec<AuditResult>, PeerSet) {
    let mut spec = sme_preset(10);
    spec.n = 6000;
    for f in &mut spec.features {
        f.outcome_effects.iter_mut().for_each(|e| *e = 0.0);
        if f.spec.name == "RI" {
            f.outcome_effects = vec![0.0, -0.5, -1.5, -4.0];
        }
    }
    spec.calibrate(0.4133, 0.815).unwrap();
    let (mut ds, _) = generate(&spec).unwrap();
    let ri = ds.schema.feature("RI").unwrap().0;
    let worst = (ds.schema.entries[ri].levels.len() - 1) as f64;
    let accepted: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.instances[i].s == Group::Unprotected && ds.instances[i].y == 1)
        .collect();
    let explained: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.instances[i].s == Group::Protected && ds.instances[i].y == 0)
        .take(200)
        .collect();
    for &i in &explained {
        ds.instances[i].x[ri] = worst;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut results = Vec::new();
    let mut entries = Vec::new();
    for &i in &explained {
        let peers = rand::seq::index::sample(&mut rng, accepted.len(), 60)
            .into_iter()
            .map(|k| accepted[k])
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        entries.push(PeerEntry {
            id: ds.instances[i].id.clone(),
            row: i,
            peers,
            status: PeerStatus::Auditable,
        });
        results.push(AuditResult {
            id: ds.instances[i].id.clone(),
            row: i,
            p_a: 0.5,
            peer_count: 60,
            observed_y: 0,
            stats: None,
            category: Category::FairlyTreated,
        });
    }
    (
        ds,
        results,
        PeerSet {
            delta: 0.1,
            min_peers: 35,
            entries,
        },
    )
}

#[test]
fn criterion_10_explanation_planting() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ds, results, peers) = planted_cohort();
    let outcome = explain_all(&ds, &results, &peers, 0.05, 10).unwrap();
    let report = aggregate_explanations(&outcome.records);
    let ri = report
        .features
        .iter()
        .find(|f| f.feature == "RI")
        .map_or(0.0, |f| f.percentage);
    let others = report
        .features
        .iter()
        .filter(|f| f.feature != "RI")
        .map(|f| f.percentage)
        .fold(0.0, f64::max);
    verdict(
        10,
        "explanation planting",
        report.explained == results.len() && ri >= 80.0 && others < 20.0,
        &format!(
            "{} explained, RI {ri:.1}%, max other {others:.1}%",
            report.explained
        ),
        start.elapsed(),
    );
}

#[test]
fn criterion_11_gating() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut ok = true;
    let mut explained = 0;
    let mut detail = String::new();
    for (seed, statistic) in [
        (11, TestStatistic::GrandMean),
        (12, TestStatistic::Dispersion),
    ] {
        let (ds, _) = generate(&sme_preset(seed)).unwrap();
        let run = run_audit(&ds, &config(seed, statistic)).unwrap();
        let outcome = run.explain(&ds).unwrap();
        let eligible: std::collections::HashSet<&str> = run
            .results
            .iter()
            .filter(|r| r.category == Category::FairlyTreated && r.observed_y == 0)
            .map(|r| r.id.as_str())
            .collect();
        ok &= outcome
            .records
            .iter()
            .all(|r| eligible.contains(r.id.as_str()));
        ok &= outcome.records.len() + outcome.skipped.len() == eligible.len();
        explained += outcome.records.len();
        for r in &run.results {
            ok &= (r.category == Category::Unknown) == r.stats.is_none();
            ok &= (r.category == Category::Unknown) == (r.peer_count < run.config.audit.min_peers);
        }
        let protected = ds.count(Group::Protected);
        let partition: usize = Category::ALL
            .iter()
            .map(|&c| run.results.iter().filter(|r| r.category == c).count())
            .sum();
        ok &= partition == protected && run.results.len() == protected;
        let unknown = run
            .results
            .iter()
            .filter(|r| r.category == Category::Unknown)
            .count();
        detail.push_str(&format!(
            "seed {seed}: {protected} protected, {unknown} unknown; "
        ));
    }
    // gate holds on a hand-built mix of categories too
    let (ds, mut results, peers) = planted_cohort();
    for (k, r) in results.iter_mut().enumerate() {
        r.category = Category::ALL[k % 6];
        r.observed_y = (k % 4 == 0) as u8;
    }
    let outcome = explain_all(&ds, &results, &peers, 0.05, 10).unwrap();
    let by_id: BTreeMap<&str, &AuditResult> = results.iter().map(|r| (r.id.as_str(), r)).collect();
    ok &= outcome.records.iter().all(|rec| {
        by_id[rec.id.as_str()].category == Category::FairlyTreated
            && by_id[rec.id.as_str()].observed_y == 0
    });
    verdict(
        11,
        "gating",
        ok,
        &format!("{detail}{explained} explanation records, all gated"),
        start.elapsed(),
    );
}

#[test]
fn criterion_12_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (ds, truth) = generate(&sme_preset(12)).unwrap();
    peerfair::synth::write_bundle(&data, &ds, &truth).unwrap();
    let mut reports = Vec::new();
    for (k, threads) in ["1", "8", "1", "8"].iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let code = peerfair::cli::run([
            "peerfair",
            "--threads",
            threads,
            "audit",
            "--data",
            data.join("data.csv").to_str().unwrap(),
            "--schema",
            data.join("schema.toml").to_str().unwrap(),
            "--seed",
            "12",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        reports.push(std::fs::read(out.join("audit_report.json")).unwrap());
    }
    let identical = reports.windows(2).all(|w| w[0] == w[1]);
    verdict(
        12,
        "determinism (1 vs 8 threads)",
        identical,
        &format!(
            "{} runs, report {} bytes, identical: {identical}",
            reports.len(),
            reports[0].len()
        ),
        start.elapsed(),
    );
}
