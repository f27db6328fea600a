//! Tabular decision datasets: schema, ingestion, encoding and stratified splitting.
//!
//! Raw feature values are stored as `f64`: categorical features hold their level
//! index, continuous features hold the measured value. The [`Encoder`] turns a raw
//! row into the design row used for model fitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_for, sha256_hex};

/// Rows with a larger share of missing feature cells are dropped on ingestion.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// s−, the group under audit.
    #[serde(rename = "s_minus")]
    Protected,
    /// s+, the group peers are drawn from.
    #[serde(rename = "s_plus")]
    Unprotected,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Protected => "s_minus",
            Group::Unprotected => "s_plus",
        }
    }

    pub fn is_protected(self) -> bool {
        self == Group::Protected
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Binary,
    Ordinal,
    Nominal,
    Continuous,
}

impl FeatureKind {
    pub fn is_categorical(self) -> bool {
        !matches!(self, FeatureKind::Continuous)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Higher,
    Lower,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Ordered levels for binary, ordinal and nominal features; empty for continuous.
    #[serde(default)]
    pub levels: Vec<String>,
    #[serde(default)]
    pub better_direction: Direction,
    #[serde(default)]
    pub intrinsic: bool,
}

impl FeatureSpec {
    pub fn level_index(&self, value: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == value)
    }
}

/// Column layout of a decision dataset, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub protected_column: String,
    /// Value of the protected column that marks the protected group (s−).
    pub protected_value: String,
    pub outcome_column: String,
    /// Value of the outcome column that marks a favourable decision (y = 1).
    pub favourable_value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_column: Option<String>,
    #[serde(rename = "features")]
    pub entries: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidSchema("no feature columns".into()));
        }
        let mut seen = HashSet::new();
        let reserved = [
            Some(self.protected_column.as_str()),
            Some(self.outcome_column.as_str()),
            self.id_column.as_deref(),
        ];
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) || reserved.contains(&Some(e.name.as_str())) {
                return Err(Error::DuplicateColumn(e.name.clone()));
            }
            match e.kind {
                FeatureKind::Binary if e.levels.len() != 2 => {
                    return Err(Error::InvalidSchema(format!(
                        "binary feature `{}` needs exactly 2 levels",
                        e.name
                    )))
                }
                FeatureKind::Ordinal | FeatureKind::Nominal if e.levels.len() < 2 => {
                    return Err(Error::InvalidSchema(format!(
                        "feature `{}` needs at least 2 levels",
                        e.name
                    )))
                }
                FeatureKind::Continuous if !e.levels.is_empty() => {
                    return Err(Error::InvalidSchema(format!(
                        "continuous feature `{}` cannot have levels",
                        e.name
                    )))
                }
                _ => {}
            }
            if e.kind == FeatureKind::Nominal && e.better_direction != Direction::None {
                return Err(Error::InvalidSchema(format!(
                    "nominal feature `{}` cannot have a better direction",
                    e.name
                )));
            }
            let distinct: HashSet<_> = e.levels.iter().collect();
            if distinct.len() != e.levels.len() {
                return Err(Error::InvalidSchema(format!(
                    "feature `{}` repeats a level",
                    e.name
                )));
            }
        }
        if self.protected_column == self.outcome_column {
            return Err(Error::DuplicateColumn(self.protected_column.clone()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn feature(&self, name: &str) -> Option<(usize, &FeatureSpec)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name)
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema = Self::from_toml_str(&text).map_err(|message| Error::Schema {
            path: path.to_path_buf(),
            message,
        })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub x: Vec<f64>,
    pub s: Group,
    /// Observed decision, 1 = favourable.
    pub y: u8,
}

/// Text labels of the protected and outcome columns, kept for writing data back out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub protected: String,
    pub unprotected: String,
    pub favourable: String,
    pub unfavourable: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub cells_imputed: usize,
    pub imputation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub labels: Labels,
    pub instances: Vec<Instance>,
    pub ingest: IngestSummary,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, labels: Labels, instances: Vec<Instance>) -> Result<Self> {
        schema.validate()?;
        let ds = Dataset {
            schema,
            labels,
            instances,
            ingest: IngestSummary::default(),
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ids = HashSet::with_capacity(self.instances.len());
        for inst in &self.instances {
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
            check_row(&self.schema, inst)?;
        }
        if self.count(Group::Protected) == 0 {
            return Err(Error::MissingGroup("protected"));
        }
        if self.count(Group::Unprotected) == 0 {
            return Err(Error::MissingGroup("unprotected"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn count(&self, group: Group) -> usize {
        self.instances.iter().filter(|i| i.s == group).count()
    }

    /// Protected-class share ω = #s− / (#s− + #s+).
    pub fn omega(&self) -> f64 {
        self.count(Group::Protected) as f64 / self.len() as f64
    }

    pub fn favourable_rate(&self) -> f64 {
        self.instances.iter().filter(|i| i.y == 1).count() as f64 / self.len() as f64
    }

    /// Dataset restricted to the given row indices, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let ds = Dataset {
            schema: self.schema.clone(),
            labels: self.labels.clone(),
            instances: rows.iter().map(|&r| self.instances[r].clone()).collect(),
            ingest: self.ingest.clone(),
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn index_of(&self) -> BTreeMap<&str, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.as_str(), i))
            .collect()
    }

    /// Content hash over schema and instances, independent of file formatting.
    pub fn fingerprint(&self) -> String {
        let body = serde_json::to_string(&(&self.schema, &self.labels, &self.instances))
            .unwrap_or_default();
        sha256_hex(body.as_bytes())
    }

    /// Text form of a raw feature value.
    pub fn format_value(&self, feature: usize, value: f64) -> String {
        let spec = &self.schema.entries[feature];
        if spec.kind.is_categorical() {
            spec.levels[value as usize].clone()
        } else {
            format!("{value}")
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let id_col = self.schema.id_column.clone().unwrap_or_else(|| "id".into());
        let mut header = vec![id_col];
        header.extend(self.schema.entries.iter().map(|e| e.name.clone()));
        header.push(self.schema.protected_column.clone());
        header.push(self.schema.outcome_column.clone());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for inst in &self.instances {
            let mut rec = vec![inst.id.clone()];
            rec.extend(
                inst.x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| self.format_value(j, v)),
            );
            rec.push(match inst.s {
                Group::Protected => self.labels.protected.clone(),
                Group::Unprotected => self.labels.unprotected.clone(),
            });
            rec.push(if inst.y == 1 {
                self.labels.favourable.clone()
            } else {
                self.labels.unfavourable.clone()
            });
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn check_row(schema: &FeatureSchema, inst: &Instance) -> Result<()> {
    if inst.x.len() != schema.len() {
        return Err(Error::Dimension {
            expected: schema.len(),
            actual: inst.x.len(),
        });
    }
    if inst.y > 1 {
        return Err(Error::NonBinary {
            column: schema.outcome_column.clone(),
            values: vec![inst.y.to_string()],
        });
    }
    for (spec, &v) in schema.entries.iter().zip(&inst.x) {
        let ok = if spec.kind.is_categorical() {
            v >= 0.0 && v.fract() == 0.0 && (v as usize) < spec.levels.len()
        } else {
            v.is_finite()
        };
        if !ok {
            return Err(Error::UnknownLevel {
                row: 0,
                feature: spec.name.clone(),
                value: format!("{v} (instance {})", inst.id),
            });
        }
    }
    Ok(())
}

/// Reads a CSV/schema pair, drops rows with more than 20% missing features and
/// imputes the remaining gaps (mode for categorical, median for continuous).
pub fn load_dataset(csv_path: &Path, schema_path: &Path) -> Result<Dataset> {
    let schema = FeatureSchema::read(schema_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(csv_path, io),
                _ => unreachable!(),
            },
            _ => csv_err(csv_path, e),
        })?;
    let header = reader.headers().map_err(|e| csv_err(csv_path, e))?.clone();

    let mut positions: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        if positions.insert(h, i).is_some() {
            return Err(Error::DuplicateColumn(h.to_string()));
        }
    }
    let col = |name: &str| {
        positions
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_cols: Vec<usize> = schema
        .entries
        .iter()
        .map(|e| col(&e.name))
        .collect::<Result<_>>()?;
    let protected_col = col(&schema.protected_column)?;
    let outcome_col = col(&schema.outcome_column)?;
    let id_col = schema.id_column.as_deref().map(col).transpose()?;

    let n_features = schema.len();
    let mut raw_rows: Vec<(String, Vec<Option<f64>>, String, String)> = Vec::new();
    let mut rows_read = 0;
    let mut rows_dropped = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(csv_path, e))?;
        rows_read += 1;
        let line = row + 2;
        let mut x = Vec::with_capacity(n_features);
        for (spec, &c) in schema.entries.iter().zip(&feature_cols) {
            let cell = record.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                x.push(None);
                continue;
            }
            let v = if spec.kind.is_categorical() {
                spec.level_index(cell).ok_or_else(|| Error::UnknownLevel {
                    row: line,
                    feature: spec.name.clone(),
                    value: cell.to_string(),
                })? as f64
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NotNumeric {
                        row: line,
                        feature: spec.name.clone(),
                        value: cell.to_string(),
                    })?
            };
            x.push(Some(v));
        }
        let missing = x.iter().filter(|v| v.is_none()).count();
        if missing as f64 > MAX_MISSING_FRACTION * n_features as f64 {
            rows_dropped += 1;
            continue;
        }
        let label = |c: usize, name: &str| -> Result<String> {
            let v = record.get(c).unwrap_or("").trim();
            if v.is_empty() {
                Err(Error::MissingLabel {
                    row: line,
                    column: name.to_string(),
                })
            } else {
                Ok(v.to_string())
            }
        };
        let s = label(protected_col, &schema.protected_column)?;
        let y = label(outcome_col, &schema.outcome_column)?;
        let id = match id_col {
            Some(c) => label(c, schema.id_column.as_deref().unwrap_or("id"))?,
            None => row.to_string(),
        };
        raw_rows.push((id, x, s, y));
    }
    if raw_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let (has_protected, unprotected) = binary_labels(
        raw_rows.iter().map(|r| r.2.as_str()),
        &schema.protected_column,
        &schema.protected_value,
    )?;
    if !has_protected {
        return Err(Error::MissingGroup("protected"));
    }
    let (_, unfavourable) = binary_labels(
        raw_rows.iter().map(|r| r.3.as_str()),
        &schema.outcome_column,
        &schema.favourable_value,
    )?;
    let labels = Labels {
        protected: schema.protected_value.clone(),
        unprotected: unprotected.ok_or(Error::MissingGroup("unprotected"))?,
        favourable: schema.favourable_value.clone(),
        unfavourable: unfavourable.unwrap_or_else(|| format!("not_{}", schema.favourable_value)),
    };

    let fill: Vec<f64> = (0..n_features)
        .map(|j| {
            let observed: Vec<f64> = raw_rows.iter().filter_map(|r| r.1[j]).collect();
            if observed.is_empty() {
                return Err(Error::Csv {
                    path: csv_path.to_path_buf(),
                    message: format!(
                        "feature `{}` has no observed values",
                        schema.entries[j].name
                    ),
                });
            }
            Ok(if schema.entries[j].kind.is_categorical() {
                mode(&observed, schema.entries[j].levels.len())
            } else {
                median(observed)
            })
        })
        .collect::<Result<_>>()?;

    let mut cells_imputed = 0;
    let instances = raw_rows
        .into_iter()
        .map(|(id, x, s, y)| {
            let x = x
                .into_iter()
                .zip(&fill)
                .map(|(v, &f)| {
                    v.unwrap_or_else(|| {
                        cells_imputed += 1;
                        f
                    })
                })
                .collect();
            Instance {
                id,
                x,
                s: if s == schema.protected_value {
                    Group::Protected
                } else {
                    Group::Unprotected
                },
                y: u8::from(y == schema.favourable_value),
            }
        })
        .collect();

    let mut ds = Dataset::new(schema, labels, instances)?;
    ds.ingest = IngestSummary {
        rows_read,
        rows_dropped,
        cells_imputed,
        imputation: "mode (categorical) / median (continuous)".into(),
    };
    Ok(ds)
}

/// Checks a label column is binary. Returns whether `positive` occurs and the other observed value.
fn binary_labels<'a>(
    values: impl Iterator<Item = &'a str>,
    column: &str,
    positive: &str,
) -> Result<(bool, Option<String>)> {
    let distinct: std::collections::BTreeSet<&str> = values.collect();
    let others: Vec<&str> = distinct
        .iter()
        .copied()
        .filter(|v| *v != positive)
        .collect();
    if others.len() > 1 {
        return Err(Error::NonBinary {
            column: column.to_string(),
            values: distinct.into_iter().map(String::from).collect(),
        });
    }
    Ok((
        distinct.contains(positive),
        others.first().map(|v| v.to_string()),
    ))
}

fn mode(values: &[f64], n_levels: usize) -> f64 {
    let mut counts = vec![0usize; n_levels];
    for &v in values {
        counts[v as usize] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0) as f64
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Stratified split by (s, y). Each stratum contributes `round(fraction * size)`
/// instances to the training part, clamped so both parts get at least one.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut strata: BTreeMap<(Group, u8), Vec<usize>> = BTreeMap::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        strata.entry((inst.s, inst.y)).or_default().push(i);
    }
    let mut rng = rng_for(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((group, outcome), mut rows) in strata {
        let n = rows.len();
        if n < 2 {
            return Err(Error::StratumTooSmall {
                group: group.as_str(),
                outcome,
                size: n,
            });
        }
        rows.shuffle(&mut rng);
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train)?, dataset.subset(&test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum ColumnEncoding {
    Binary,
    Rank,
    /// One indicator per level except the first (reference) level.
    OneHot {
        levels: usize,
    },
    Standardize {
        mean: f64,
        sd: f64,
    },
}

/// Raw row → design row. Continuous statistics come from the dataset the encoder was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<ColumnEncoding>,
    pub names: Vec<String>,
}

impl Encoder {
    pub fn fit(dataset: &Dataset) -> Encoder {
        let mut columns = Vec::with_capacity(dataset.schema.len());
        let mut names = Vec::new();
        for (j, spec) in dataset.schema.entries.iter().enumerate() {
            let enc = match spec.kind {
                FeatureKind::Binary => {
                    names.push(spec.name.clone());
                    ColumnEncoding::Binary
                }
                FeatureKind::Ordinal => {
                    names.push(spec.name.clone());
                    ColumnEncoding::Rank
                }
                FeatureKind::Nominal => {
                    names.extend(
                        spec.levels[1..]
                            .iter()
                            .map(|l| format!("{}={l}", spec.name)),
                    );
                    ColumnEncoding::OneHot {
                        levels: spec.levels.len(),
                    }
                }
                FeatureKind::Continuous => {
                    names.push(spec.name.clone());
                    let vals: Vec<f64> = dataset.instances.iter().map(|i| i.x[j]).collect();
                    let mean = crate::util::mean(&vals);
                    let sd = crate::util::std_dev(&vals, 0);
                    ColumnEncoding::Standardize {
                        mean,
                        sd: if sd > 0.0 { sd } else { 1.0 },
                    }
                }
            };
            columns.push(enc);
        }
        Encoder { columns, names }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn encode_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.columns.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} raw features, got {}",
                self.columns.len(),
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(self.width());
        for (enc, &v) in self.columns.iter().zip(x) {
            match *enc {
                ColumnEncoding::Binary | ColumnEncoding::Rank => out.push(v),
                ColumnEncoding::OneHot { levels } => {
                    let level = v as usize;
                    if level >= levels {
                        return Err(Error::SchemaMismatch(format!(
                            "level index {level} out of range"
                        )));
                    }
                    out.extend((1..levels).map(|l| if l == level { 1.0 } else { 0.0 }))
                }
                ColumnEncoding::Standardize { mean, sd } => out.push((v - mean) / sd),
            }
        }
        Ok(out)
    }

    pub fn decode_row(&self, encoded: &[f64]) -> Result<Vec<f64>> {
        if encoded.len() != self.width() {
            return Err(Error::Dimension {
                expected: self.width(),
                actual: encoded.len(),
            });
        }
        let mut x = Vec::with_capacity(self.columns.len());
        let mut pos = 0;
        for enc in &self.columns {
            match *enc {
                ColumnEncoding::Binary | ColumnEncoding::Rank => {
                    x.push(encoded[pos]);
                    pos += 1;
                }
                ColumnEncoding::OneHot { levels } => {
                    let block = &encoded[pos..pos + levels - 1];
                    x.push(block.iter().position(|&b| b == 1.0).map_or(0, |p| p + 1) as f64);
                    pos += levels - 1;
                }
                ColumnEncoding::Standardize { mean, sd } => {
                    x.push(encoded[pos] * sd + mean);
                    pos += 1;
                }
            }
        }
        Ok(x)
    }

    pub fn design(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        dataset
            .instances
            .iter()
            .map(|i| self.encode_row(&i.x))
            .collect()
    }
}
