//! End-to-end audit: split, model selection, identification coefficients, δ-peers
//! and per-instance verdicts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::{audit_all, AuditConfig, AuditResult};
use crate::data::{split, Dataset, Encoder};
use crate::error::{Error, Result};
use crate::explain::{explain_all, ExplainOutcome, DEFAULT_MIN_ACCEPTED_PEERS};
use crate::ic::{compute_ic, compute_marginal, IcTable};
use crate::model::{
    evaluate_auc, fit_model, select_model_with_encoder, ModelSelectionReport, ProbabilityModel,
    Target, DEFAULT_GRID,
};
use crate::peers::{identify_peers, resolve_delta, PeerSet};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub cv_folds: usize,
    pub strength_grid: Vec<f64>,
    /// Significance level of the explanation test; the audit alpha when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explain_alpha: Option<f64>,
    pub min_accepted_peers: usize,
    pub audit: AuditConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_fraction: 0.8,
            cv_folds: 5,
            strength_grid: DEFAULT_GRID.to_vec(),
            explain_alpha: None,
            min_accepted_peers: DEFAULT_MIN_ACCEPTED_PEERS,
            audit: AuditConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config(format!(
                "cv_folds must be at least 2, got {}",
                self.cv_folds
            )));
        }
        if self.strength_grid.is_empty()
            || self
                .strength_grid
                .iter()
                .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Config(
                "strength_grid needs finite nonnegative entries".into(),
            ));
        }
        if let Some(a) = self.explain_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!(
                    "explain_alpha must lie in (0, 1), got {a}"
                )));
            }
        }
        self.audit.validate()
    }

    pub fn explain_alpha(&self) -> f64 {
        self.explain_alpha.unwrap_or(self.audit.alpha)
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Knobs used by the robustness harness to pin parts of a run to a baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOverrides {
    /// Use this δ instead of resolving it from the run's own coefficients.
    pub delta: Option<f64>,
    /// Skip model selection and fit (outcome, propensity) at these strengths.
    pub strengths: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub outcome_model: ProbabilityModel,
    pub propensity_model: ProbabilityModel,
    pub selection: Vec<ModelSelectionReport>,
    pub ic: IcTable,
    pub peers: PeerSet,
    pub results: Vec<AuditResult>,
    pub notes: Vec<String>,
}

pub fn run_audit(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineRun> {
    run_audit_with(dataset, config, RunOverrides::default())
}

pub fn run_audit_with(
    dataset: &Dataset,
    config: &PipelineConfig,
    overrides: RunOverrides,
) -> Result<PipelineRun> {
    config.validate()?;
    let seed = config.audit.seed;
    let mut notes = vec![
        "models are fitted on the training split and then scored on every instance, \
         so training instances are audited with in-sample predictions"
            .to_string(),
    ];
    let (train, test) = split(dataset, config.train_fraction, derive_seed(seed, "split"))?;
    let encoder = Encoder::fit(&train);

    let mut fit =
        |target: Target, fixed: Option<f64>| -> Result<(ProbabilityModel, ModelSelectionReport)> {
            let (model, mut report) = match fixed {
                Some(strength) => {
                    let model = fit_model(&train, &encoder, target, strength)?;
                    let report = ModelSelectionReport {
                        target,
                        folds: 0,
                        grid: vec![strength],
                        cv_auc: vec![],
                        chosen_strength: strength,
                        skipped_folds: vec![],
                        test_auc: None,
                    };
                    (model, report)
                }
                None => select_model_with_encoder(
                    &train,
                    &encoder,
                    target,
                    &config.strength_grid,
                    config.cv_folds,
                    derive_seed(seed, &format!("select/{target:?}")),
                )?,
            };
            match evaluate_auc(&model, &test) {
                Ok(a) => report.test_auc = Some(a),
                Err(e) => notes.push(format!("{target:?} test AUC unavailable: {e}")),
            }
            if model.separation {
                notes.push(format!(
                    "{target:?} model shows separation; probabilities are clamped"
                ));
            }
            Ok((model, report))
        };
    let (outcome_model, f_report) = fit(Target::Outcome, overrides.strengths.map(|s| s.0))?;
    let (propensity_model, g_report) = fit(Target::Protected, overrides.strengths.map(|s| s.1))?;

    let marginal = compute_marginal(dataset)?;
    let ic = compute_ic(dataset, &propensity_model, marginal)?;
    if ic.clamped > 0 {
        notes.push(format!("{} propensities clamped", ic.clamped));
    }
    let delta = match (overrides.delta, config.audit.delta_override) {
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => resolve_delta(&ic, config.audit.delta_multiplier)?,
    };
    let peers = identify_peers(&ic, delta, config.audit.min_peers)?;
    let results = audit_all(dataset, &outcome_model, &ic, &peers, &config.audit)?;
    Ok(PipelineRun {
        config: config.clone(),
        train_size: train.len(),
        test_size: test.len(),
        outcome_model,
        propensity_model,
        selection: vec![f_report, g_report],
        ic,
        peers,
        results,
        notes,
    })
}

impl PipelineRun {
    pub fn explain(&self, dataset: &Dataset) -> Result<ExplainOutcome> {
        explain_all(
            dataset,
            &self.results,
            &self.peers,
            self.config.explain_alpha(),
            self.config.min_accepted_peers,
        )
    }
}
