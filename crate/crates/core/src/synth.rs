//! Synthetic decision data with a known causal structure.
//!
//! Features X are drawn independently, the protected label from
//! logit P(S = s− | x) = γ₀ + Σ γ(x), and the decision from
//! logit P(Y = 1 | x, s) = β₀ + Σ β(x) + b·1[s = s−]. The generator records the
//! true favourable probability under both labels so audit verdicts can be scored.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::AuditResult;
use crate::data::{
    Dataset, Direction, FeatureKind, FeatureSchema, FeatureSpec, Group, Instance, Labels,
};
use crate::error::{Error, Result};
use crate::ic::csv_field;
use crate::util::{logistic, mean, rng_for};

const CALIBRATION_DRAWS: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "snake_case")]
pub enum Generator {
    /// One probability per level of the feature.
    Categorical {
        probabilities: Vec<f64>,
    },
    Normal {
        mean: f64,
        sd: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeature {
    #[serde(flatten)]
    pub spec: FeatureSpec,
    pub generator: Generator,
    /// Logit contribution to P(S = s−): one entry per level, or a single slope on
    /// the standardized value for continuous features.
    #[serde(default)]
    pub propensity_effects: Vec<f64>,
    /// Logit contribution to P(Y = 1), laid out like `propensity_effects`.
    #[serde(default)]
    pub outcome_effects: Vec<f64>,
}

impl SynthFeature {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match &self.generator {
            Generator::Categorical { probabilities } => {
                let u: f64 = rng.random();
                let total: f64 = probabilities.iter().sum();
                let mut acc = 0.0;
                for (i, p) in probabilities.iter().enumerate() {
                    acc += p / total;
                    if u < acc {
                        return i as f64;
                    }
                }
                (probabilities.len() - 1) as f64
            }
            Generator::Normal { mean, sd } => Normal::new(*mean, *sd)
                .expect("validated normal parameters")
                .sample(rng),
        }
    }

    fn effect(&self, effects: &[f64], value: f64) -> f64 {
        if effects.is_empty() {
            return 0.0;
        }
        match &self.generator {
            Generator::Categorical { .. } => effects[value as usize],
            Generator::Normal { mean, sd } => effects[0] * (value - mean) / sd,
        }
    }

    fn validate(&self) -> Result<()> {
        let name = &self.spec.name;
        let width = match &self.generator {
            Generator::Categorical { probabilities } => {
                if !self.spec.kind.is_categorical() || probabilities.len() != self.spec.levels.len()
                {
                    return Err(Error::Synth(format!(
                        "feature `{name}`: need one probability per level"
                    )));
                }
                if probabilities.iter().any(|p| !(*p >= 0.0))
                    || probabilities.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::Synth(format!("feature `{name}`: bad probabilities")));
                }
                probabilities.len()
            }
            Generator::Normal { mean, sd } => {
                if self.spec.kind != FeatureKind::Continuous || !mean.is_finite() || !(*sd > 0.0) {
                    return Err(Error::Synth(format!(
                        "feature `{name}`: normal generator needs a continuous feature and sd > 0"
                    )));
                }
                1
            }
        };
        for (label, effects) in [
            ("propensity", &self.propensity_effects),
            ("outcome", &self.outcome_effects),
        ] {
            if !effects.is_empty() && effects.len() != width {
                return Err(Error::Synth(format!(
                    "feature `{name}`: {label} effects need {width} entries, got {}",
                    effects.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub propensity_intercept: f64,
    pub outcome_intercept: f64,
    /// b, added to the outcome logit of protected instances.
    #[serde(default)]
    pub direct_bias: f64,
    #[serde(default = "default_protected_column")]
    pub protected_column: String,
    #[serde(default = "default_outcome_column")]
    pub outcome_column: String,
    pub labels: Labels,
    pub features: Vec<SynthFeature>,
}

fn default_protected_column() -> String {
    "group".into()
}

fn default_outcome_column() -> String {
    "outcome".into()
}

/// True favourable probabilities of one generated instance under both labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub p_minus: f64,
    pub p_plus: f64,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub ids: Vec<String>,
    pub rows: Vec<TruthRow>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::Synth(format!(
                "n must be at least 100, got {}",
                self.n
            )));
        }
        for f in &self.features {
            f.validate()?;
        }
        self.schema().validate()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            protected_column: self.protected_column.clone(),
            protected_value: self.labels.protected.clone(),
            outcome_column: self.outcome_column.clone(),
            favourable_value: self.labels.favourable.clone(),
            id_column: Some("id".into()),
            entries: self.features.iter().map(|f| f.spec.clone()).collect(),
        }
    }

    fn propensity_logit(&self, x: &[f64]) -> f64 {
        self.propensity_intercept
            + self
                .features
                .iter()
                .zip(x)
                .map(|(f, &v)| f.effect(&f.propensity_effects, v))
                .sum::<f64>()
    }

    /// Outcome logit with s = s+.
    fn outcome_logit(&self, x: &[f64]) -> f64 {
        self.outcome_intercept
            + self
                .features
                .iter()
                .zip(x)
                .map(|(f, &v)| f.effect(&f.outcome_effects, v))
                .sum::<f64>()
    }

    pub fn truth(&self, x: &[f64]) -> TruthRow {
        let eta = self.outcome_logit(x);
        TruthRow {
            p_minus: logistic(eta + self.direct_bias),
            p_plus: logistic(eta),
            propensity: logistic(self.propensity_logit(x)),
        }
    }

    fn sample_x(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.features.iter().map(|f| f.sample(rng)).collect()
    }

    /// Removes every dependence of S on X.
    pub fn zero_propensity_effects(&mut self) {
        for f in &mut self.features {
            f.propensity_effects.iter_mut().for_each(|e| *e = 0.0);
        }
    }

    /// Sets both intercepts so the expected protected share and favourable rate
    /// hit the targets, by bisection over a fixed Monte Carlo sample of X.
    pub fn calibrate(&mut self, target_marginal: f64, target_rate: f64) -> Result<()> {
        for t in [target_marginal, target_rate] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Synth(format!(
                    "calibration target {t} outside (0, 1)"
                )));
            }
        }
        let mut rng = rng_for(self.seed, "calibration");
        let xs: Vec<Vec<f64>> = (0..CALIBRATION_DRAWS)
            .map(|_| self.sample_x(&mut rng))
            .collect();
        self.propensity_intercept = 0.0;
        self.outcome_intercept = 0.0;
        let prop: Vec<f64> = xs.iter().map(|x| self.propensity_logit(x)).collect();
        self.propensity_intercept = bisect(|c| mean_logistic(&prop, c) - target_marginal);
        let pi: Vec<f64> = prop
            .iter()
            .map(|&e| logistic(e + self.propensity_intercept))
            .collect();
        let out: Vec<f64> = xs.iter().map(|x| self.outcome_logit(x)).collect();
        let b = self.direct_bias;
        self.outcome_intercept = bisect(|c| {
            let rate = out
                .iter()
                .zip(&pi)
                .map(|(&e, &p)| p * logistic(e + c + b) + (1.0 - p) * logistic(e + c))
                .sum::<f64>()
                / out.len() as f64;
            rate - target_rate
        });
        Ok(())
    }
}

fn mean_logistic(etas: &[f64], shift: f64) -> f64 {
    etas.iter().map(|&e| logistic(e + shift)).sum::<f64>() / etas.len() as f64
}

/// Root of an increasing function on [−30, 30].
fn bisect(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws the dataset; instance i uses its own RNG stream keyed on (seed, i).
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let width = (spec.n - 1).to_string().len();
    let drawn: Vec<(Instance, TruthRow)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(spec.seed, &format!("synth/{i}"));
            let x = spec.sample_x(&mut rng);
            let truth = spec.truth(&x);
            let s = if rng.random::<f64>() < truth.propensity {
                Group::Protected
            } else {
                Group::Unprotected
            };
            let p = if s == Group::Protected {
                truth.p_minus
            } else {
                truth.p_plus
            };
            let y = u8::from(rng.random::<f64>() < p);
            (
                Instance {
                    id: format!("{i:0width$}"),
                    x,
                    s,
                    y,
                },
                truth,
            )
        })
        .collect();
    let (instances, rows): (Vec<Instance>, Vec<TruthRow>) = drawn.into_iter().unzip();
    let ids = instances.iter().map(|i| i.id.clone()).collect();
    let dataset =
        Dataset::new(spec.schema(), spec.labels.clone(), instances).map_err(|e| match e {
            Error::MissingGroup(g) => Error::Synth(format!("generated data has no {g} instances")),
            other => other,
        })?;
    Ok((dataset, GroundTruth { ids, rows }))
}

impl GroundTruth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,p_minus,p_plus,propensity\n");
        for (id, r) in self.ids.iter().zip(&self.rows) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(id),
                r.p_minus,
                r.p_plus,
                r.propensity
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    pub instances: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

/// |peer_mean − true P(Y = 1 | x, s+)| over the audited instances.
pub fn oracle_gap(truth: &GroundTruth, results: &[AuditResult]) -> Result<OracleGap> {
    let index: std::collections::HashMap<&str, usize> = truth
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut gaps = Vec::new();
    for r in results {
        let Some(stats) = &r.stats else { continue };
        let &i = index
            .get(r.id.as_str())
            .ok_or_else(|| Error::UnknownId(r.id.clone()))?;
        gaps.push((stats.peer_mean - truth.rows[i].p_plus).abs());
    }
    if gaps.is_empty() {
        return Err(Error::NoAuditable);
    }
    gaps.sort_by(f64::total_cmp);
    let quantile = |q: f64| gaps[((gaps.len() - 1) as f64 * q).round() as usize];
    Ok(OracleGap {
        instances: gaps.len(),
        mean: mean(&gaps),
        median: quantile(0.5),
        p90: quantile(0.9),
        max: gaps[gaps.len() - 1],
    })
}

/// Writes `data.csv`, `schema.toml` and `ground_truth.csv` into `dir`.
pub fn write_bundle(dir: &Path, dataset: &Dataset, truth: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset.write_csv(&dir.join("data.csv"))?;
    dataset.schema.write(&dir.join("schema.toml"))?;
    truth.write_csv(&dir.join("ground_truth.csv"))
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn categorical(
    name: &str,
    kind: FeatureKind,
    levels: &[&str],
    probabilities: &[f64],
    better_direction: Direction,
    intrinsic: bool,
    propensity_effects: &[f64],
    outcome_effects: &[f64],
) -> SynthFeature {
    SynthFeature {
        spec: FeatureSpec {
            name: name.into(),
            kind,
            levels: levels.iter().map(|s| s.to_string()).collect(),
            better_direction,
            intrinsic,
        },
        generator: Generator::Categorical {
            probabilities: probabilities.to_vec(),
        },
        propensity_effects: propensity_effects.to_vec(),
        outcome_effects: outcome_effects.to_vec(),
    }
}

pub const SME_N: usize = 4159;
pub const SME_MARGINAL: f64 = 1719.0 / 4159.0;
pub const SME_FAVOURABLE_RATE: f64 = 3391.0 / 4159.0;

/// Loan-application shaped generator: fifteen features with the category shares of
/// a UK small-business finance survey, micro-firms as the protected group, and
/// intercepts calibrated to 41.33% micro-firms and an 81.5% approval rate.
pub fn sme_preset(seed: u64) -> SynthSpec {
    use Direction::{Higher, Lower, None as Neutral};
    use FeatureKind::{Binary, Nominal, Ordinal};
    let yes_no = ["no", "yes"];
    let features = vec![
        categorical(
            "PT",
            Binary,
            &yes_no,
            &[0.9094, 0.0906],
            Lower,
            false,
            &[0.0, 0.0],
            &[0.0, -0.8],
        ),
        categorical(
            "FQ",
            Binary,
            &yes_no,
            &[0.4566, 0.5434],
            Higher,
            false,
            &[0.0, -0.3],
            &[0.0, 0.2],
        ),
        categorical(
            "WP",
            Binary,
            &yes_no,
            &[0.3758, 0.6242],
            Higher,
            false,
            &[0.0, -0.4],
            &[0.0, 0.2],
        ),
        categorical(
            "RI",
            Ordinal,
            &["minimal", "low", "average", "above_average"],
            &[0.1959, 0.4311, 0.2598, 0.1131],
            Lower,
            false,
            &[0.0, 0.0, 0.2, 0.4],
            &[0.0, -0.1, -0.4, -0.8],
        ),
        categorical(
            "PS",
            Binary,
            &yes_no,
            &[0.7025, 0.2975],
            Lower,
            false,
            &[0.0, 0.0],
            &[0.0, -0.15],
        ),
        categorical(
            "BI",
            Binary,
            &yes_no,
            &[0.4016, 0.5984],
            Lower,
            false,
            &[0.0, 0.0],
            &[0.0, -0.15],
        ),
        categorical(
            "LP",
            Ordinal,
            &["loss", "broken_even", "profit"],
            &[0.8607, 0.0869, 0.0525],
            Higher,
            false,
            &[0.0, 0.0, 0.0],
            &[0.0, 0.2, 0.4],
        ),
        categorical(
            "TG",
            Ordinal,
            &["declined", "stayed_same", "grown_lt_20", "grown_gt_20"],
            &[0.1230, 0.3369, 0.4033, 0.1369],
            Higher,
            false,
            &[0.0, 0.0, 0.0, 0.0],
            &[0.0, 0.15, 0.25, 0.3],
        ),
        categorical(
            "FI",
            Binary,
            &yes_no,
            &[0.6717, 0.3283],
            Higher,
            false,
            &[0.0, 0.2],
            &[0.0, -0.1],
        ),
        categorical(
            "CP",
            Binary,
            &yes_no,
            &[0.1848, 0.8152],
            Higher,
            false,
            &[0.0, -0.2],
            &[0.0, 0.3],
        ),
        categorical(
            "RM",
            Binary,
            &yes_no,
            &[0.1906, 0.8094],
            Higher,
            false,
            &[0.0, -0.8],
            &[0.0, 0.3],
        ),
        categorical(
            "PR",
            Nominal,
            &[
                "construction",
                "agriculture",
                "fishing",
                "health_social",
                "hotels_restaurants",
                "manufacturing",
                "real_estate_business",
                "transport_communication",
                "wholesale_retail",
                "other_services",
            ],
            &[
                0.0664, 0.1082, 0.1201, 0.1262, 0.1168, 0.0869, 0.1668, 0.0963, 0.1123, 0.0963,
            ],
            Neutral,
            true,
            &[0.0, 0.3, 0.0, -0.3, 0.3, -0.3, 0.0, 0.0, 0.0, 0.3],
            &[0.0, 0.2, 0.0, 0.1, -0.2, 0.1, 0.2, 0.0, -0.1, -0.2],
        ),
        categorical(
            "LS",
            Nominal,
            &["sole_proprietorship", "partnership", "llp", "llc"],
            &[0.0488, 0.1057, 0.0750, 0.7705],
            Neutral,
            true,
            &[1.2, 0.6, 0.2, 0.0],
            &[0.0, 0.1, 0.2, 0.2],
        ),
        categorical(
            "SU",
            Binary,
            &yes_no,
            &[0.975, 0.025],
            Neutral,
            true,
            &[0.0, 0.8],
            &[0.0, -0.5],
        ),
        categorical(
            "LSE",
            Binary,
            &yes_no,
            &[0.2361, 0.7639],
            Neutral,
            true,
            &[0.0, -0.2],
            &[0.0, 0.0],
        ),
    ];
    let mut spec = SynthSpec {
        n: SME_N,
        seed,
        propensity_intercept: 0.0,
        outcome_intercept: 0.0,
        direct_bias: 0.0,
        protected_column: "size".into(),
        outcome_column: "decision".into(),
        labels: Labels {
            protected: "micro".into(),
            unprotected: "non_micro".into(),
            favourable: "approved".into(),
            unfavourable: "rejected".into(),
        },
        features,
    };
    // calibrated on a seed-independent sample so every seed shares the same intercepts
    let mut calibration = spec.clone();
    calibration.seed = 0;
    calibration
        .calibrate(SME_MARGINAL, SME_FAVOURABLE_RATE)
        .expect("preset targets lie in (0, 1)");
    spec.propensity_intercept = calibration.propensity_intercept;
    spec.outcome_intercept = calibration.outcome_intercept;
    spec
}
