//! Self-describing outputs: the run manifest, the audit report document and the
//! plot-ready CSV files. Every CSV starts with a `# manifest: {...}` line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audit::{
    category_counts, category_rejection_stats, AuditResult, Category, CategoryRejection,
};
use crate::data::{Dataset, IngestSummary};
use crate::error::{Error, Result};
use crate::ic::csv_field;
use crate::model::ModelSelectionReport;
use crate::pipeline::{PipelineConfig, PipelineRun};
use crate::robustness::compute_put;

pub const TOOL: &str = "peerfair";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: PipelineConfig,
    pub dataset_fingerprint: String,
    pub schema_hash: String,
    pub rows: usize,
    pub outcome_model_hash: String,
    pub propensity_model_hash: String,
    pub selection: Vec<ModelSelectionReport>,
    pub ingest: IngestSummary,
    pub notes: Vec<String>,
    /// Extra settings of the command, such as the imbalance study parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
    /// Present only when SOURCE_DATE_EPOCH is set, so default runs stay byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, dataset: &Dataset, run: &PipelineRun) -> Self {
        RunManifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: run.config.clone(),
            dataset_fingerprint: dataset.fingerprint(),
            schema_hash: dataset.schema.hash(),
            rows: dataset.len(),
            outcome_model_hash: run.outcome_model.hash(),
            propensity_model_hash: run.propensity_model.hash(),
            selection: run.selection.clone(),
            ingest: dataset.ingest.clone(),
            notes: run.notes.clone(),
            extra: None,
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .filter(|s| !s.trim().is_empty())
                .map(|s| format!("unix:{}", s.trim())),
        }
    }

    /// Single comment line embedding the manifest as compact JSON.
    pub fn preamble(&self) -> String {
        format!(
            "# manifest: {}\n",
            serde_json::to_string(self).expect("manifest serializes")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStats {
    pub peer_mean: f64,
    pub peer_sd: f64,
    #[serde(with = "crate::util::extended_float")]
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub p_a: f64,
    pub peer_count: usize,
    pub observed_y: u8,
    pub category: Category,
    #[serde(flatten)]
    pub stats: Option<RecordStats>,
}

impl From<&AuditResult> for InstanceRecord {
    fn from(r: &AuditResult) -> Self {
        InstanceRecord {
            id: r.id.clone(),
            p_a: r.p_a,
            peer_count: r.peer_count,
            observed_y: r.observed_y,
            category: r.category,
            stats: r.stats.as_ref().map(|s| RecordStats {
                peer_mean: s.peer_mean,
                peer_sd: s.peer_sd,
                z: s.z,
                p_value: s.p_value,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub protected: usize,
    pub auditable: usize,
    pub unknown: usize,
    pub marginal: f64,
    pub sigma_minus: f64,
    pub delta: f64,
    pub categories: BTreeMap<Category, usize>,
    /// Share of audited instances labelled unfair; absent when nothing was audited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub put: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub manifest: RunManifest,
    pub summary: AuditSummary,
    pub instances: Vec<InstanceRecord>,
}

impl AuditReport {
    pub fn new(manifest: RunManifest, run: &PipelineRun) -> Self {
        let categories = category_counts(&run.results);
        let unknown = categories[&Category::Unknown];
        AuditReport {
            manifest,
            summary: AuditSummary {
                protected: run.results.len(),
                auditable: run.results.len() - unknown,
                unknown,
                marginal: run.ic.marginal,
                sigma_minus: run.ic.sigma_minus,
                delta: run.peers.delta,
                categories,
                put: compute_put(&run.results).ok(),
            },
            instances: run.results.iter().map(InstanceRecord::from).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Human-readable summary: category counts and PUT.
    pub fn summary_text(&self) -> String {
        let s = &self.summary;
        let mut out = format!(
            "protected instances: {} (auditable {}, unknown {})\n",
            s.protected, s.auditable, s.unknown
        );
        for (c, n) in &s.categories {
            out.push_str(&format!(
                "  {:<3} {:<24} {n}\n",
                c.abbreviation(),
                c.to_string()
            ));
        }
        match s.put {
            Some(p) => out.push_str(&format!("PUT: {:.4}\n", p)),
            None => out.push_str("PUT: undefined (no auditable instances)\n"),
        }
        out
    }
}

/// Own probability against peer mean, one row per auditable instance.
pub fn write_scatter_csv(records: &[InstanceRecord], path: &Path, preamble: &str) -> Result<()> {
    let mut out = String::from(preamble);
    out.push_str("id,p_a,peer_mean,category\n");
    for r in records {
        if let Some(s) = &r.stats {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&r.id),
                r.p_a,
                s.peer_mean,
                r.category
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_rejection_csv(
    rows: &[CategoryRejection],
    notes: &[String],
    path: &Path,
    preamble: &str,
) -> Result<()> {
    let mut out = String::from(preamble);
    for n in notes {
        out.push_str(&format!("# note: {n}\n"));
    }
    out.push_str("category,members,rejection_rate,peer_rejection_mean,peer_rejection_sd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.category, r.members, r.rejection_rate, r.peer_rejection_mean, r.peer_rejection_sd
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the report JSON and every per-run CSV into `dir`.
pub fn write_audit_outputs(
    dir: &Path,
    dataset: &Dataset,
    run: &PipelineRun,
    report: &AuditReport,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pre = report.manifest.preamble();
    report.write(&dir.join("audit_report.json"))?;
    write_scatter_csv(&report.instances, &dir.join("fig2_scatter.csv"), &pre)?;
    let (rows, notes) = category_rejection_stats(&run.results, dataset, &run.peers);
    write_rejection_csv(&rows, &notes, &dir.join("fig4_rejection.csv"), &pre)?;
    run.ic.write_csv(&dir.join("ic_table.csv"), &pre)?;
    run.peers.write_csv(&dir.join("peers.csv"), &pre)?;
    let models = serde_json::json!({
        "outcome": run.outcome_model,
        "propensity": run.propensity_model,
        "selection": run.selection,
    });
    let mut text =
        serde_json::to_string_pretty(&models).map_err(|e| Error::Serialize(e.to_string()))?;
    text.push('\n');
    let path = dir.join("models.json");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
