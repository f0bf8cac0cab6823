//! Records, file ingestion, feature-matrix assembly and synthetic fixtures.
//!
//! Provinces are read from CSV with a caller-declared column schema;
//! complaints are JSON lines because embeddings are wide. The synthetic
//! generators plant every quantity a downstream stage estimates (DEA frontier
//! and scores, cluster labels, treatment effect) so each stage can be checked
//! against known truth.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dea::EcoGroup;
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from, Rng};

/// Embedding width of a CLS vector, used when nothing else is declared.
pub const DEFAULT_EMBEDDING_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("missing column '{column}'")]
    MissingColumn { column: String },
    #[error("row {row}, column '{column}': '{value}' is not a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column '{column}': {reason}")]
    InvalidValue {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: embedding has {got} entries, expected {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: unknown label {value} (expected 0 or 1)")]
    UnknownLabel { line: usize, value: i64 },
    #[error("complaint {complaint} refers to province {province}, which does not exist")]
    DanglingProvince { complaint: u64, province: u64 },
    #[error("feature '{feature}' unavailable: {reason}")]
    MissingFeature { feature: String, reason: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid province schema: {0}")]
    Schema(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Provinces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvinceRecord {
    pub id: u64,
    pub name: String,
    /// One value per configured input column, in schema order.
    pub env_inputs: Vec<f64>,
    pub gdp_output: f64,
    pub fiscal_features: BTreeMap<String, f64>,
    pub eco_score: Option<f64>,
    pub eco_group: Option<EcoGroup>,
}

impl ProvinceRecord {
    fn validate(&self, row: usize, schema: &ProvinceSchema) -> Result<(), DataError> {
        for (v, col) in self.env_inputs.iter().zip(&schema.input_columns) {
            if !v.is_finite() || *v < 0.0 {
                return Err(DataError::InvalidValue {
                    row,
                    column: col.clone(),
                    reason: format!("environmental input must be finite and >= 0, got {v}"),
                });
            }
        }
        if !self.env_inputs.iter().any(|&v| v > 0.0) {
            return Err(DataError::InvalidValue {
                row,
                column: schema.input_columns.join("|"),
                reason: "at least one environmental input must be positive".into(),
            });
        }
        if !(self.gdp_output.is_finite() && self.gdp_output > 0.0) {
            return Err(DataError::InvalidValue {
                row,
                column: schema.output_column.clone(),
                reason: format!("output must be positive, got {}", self.gdp_output),
            });
        }
        for (k, v) in &self.fiscal_features {
            if !v.is_finite() {
                return Err(DataError::InvalidValue {
                    row,
                    column: k.clone(),
                    reason: "non-finite value".into(),
                });
            }
        }
        if let Some(s) = self.eco_score {
            if !(s > 0.0 && s <= 1.0) {
                return Err(DataError::InvalidValue {
                    row,
                    column: "eco_score".into(),
                    reason: format!("score must lie in (0, 1], got {s}"),
                });
            }
        }
        Ok(())
    }
}

/// Which CSV columns hold the DEA inputs, the output and the fiscal features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvinceSchema {
    pub input_columns: Vec<String>,
    #[serde(default = "default_output_column")]
    pub output_column: String,
    #[serde(default)]
    pub fiscal_columns: Vec<String>,
}

fn default_output_column() -> String {
    "gdp_output".into()
}

const ENV_INPUT_NAMES: [&str; 6] = [
    "energy_consumption",
    "so2_emissions",
    "wastewater_discharge",
    "co2_emissions",
    "solid_waste",
    "water_use",
];

const FISCAL_NAMES: [&str; 12] = [
    "total_budget",
    "general_public_services",
    "public_safety",
    "education",
    "science_technology",
    "culture_media",
    "social_security",
    "health",
    "energy_conservation",
    "urban_rural_community",
    "agriculture_forestry_water",
    "transportation",
];

fn names(fixed: &[&str], prefix: &str, n: usize) -> Vec<String> {
    if n <= fixed.len() {
        fixed[..n].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("{prefix}_{i:02}")).collect()
    }
}

impl ProvinceSchema {
    /// Schema used by the synthetic generator.
    pub fn synthetic(n_inputs: usize, n_fiscal: usize) -> Self {
        Self {
            input_columns: names(&ENV_INPUT_NAMES, "env_input", n_inputs),
            output_column: default_output_column(),
            fiscal_columns: names(&FISCAL_NAMES, "fiscal", n_fiscal),
        }
    }
}

impl ProvinceSchema {
    /// Schema implied by a header in the layout [`write_provinces`] produces:
    /// `id, name, <inputs>, <output>, <fiscal>`, then optional `eco_score`
    /// and `eco_group`.
    pub fn from_header<S: AsRef<str>>(header: &[S], output_column: &str) -> Result<Self, DataError> {
        let cols: Vec<&str> = header.iter().map(|s| s.as_ref().trim()).collect();
        for required in ["id", "name", output_column] {
            if !cols.contains(&required) {
                return Err(DataError::MissingColumn {
                    column: required.to_string(),
                });
            }
        }
        let name_at = cols.iter().position(|&c| c == "name").expect("checked");
        let out_at = cols.iter().position(|&c| c == output_column).expect("checked");
        if out_at <= name_at + 1 {
            return Err(DataError::Schema(format!(
                "no input columns between 'name' and '{output_column}'"
            )));
        }
        let skip = |c: &&&str| !matches!(**c, "id" | "name" | "eco_score" | "eco_group");
        Ok(Self {
            input_columns: cols[name_at + 1..out_at].iter().filter(skip).map(|c| c.to_string()).collect(),
            output_column: output_column.to_string(),
            fiscal_columns: cols[out_at + 1..].iter().filter(skip).map(|c| c.to_string()).collect(),
        })
    }
}

/// Reads only the header of `path` and infers its schema.
pub fn infer_province_schema(path: &Path, output_column: &str) -> Result<ProvinceSchema, DataError> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Csv {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    ProvinceSchema::from_header(&header.iter().collect::<Vec<_>>(), output_column)
}

fn parse_f64(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    raw.trim().parse::<f64>().map_err(|_| DataError::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads `provinces.csv`. Columns `id`, `name`, every schema column are
/// required; `eco_score` and `eco_group` are optional and may be blank.
pub fn load_provinces(path: &Path, schema: &ProvinceSchema) -> Result<Vec<ProvinceRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_provinces(file, schema).map_err(|e| match e {
        DataError::Csv { message, .. } => DataError::Csv {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn read_provinces<R: std::io::Read>(
    reader: R,
    schema: &ProvinceSchema,
) -> Result<Vec<ProvinceRecord>, DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        path: PathBuf::new(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let col = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.to_string(),
            })
    };
    let id_col = col("id")?;
    let name_col = col("name")?;
    let input_cols: Vec<usize> = schema.input_columns.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let output_col = col(&schema.output_column)?;
    let fiscal_cols: Vec<usize> = schema.fiscal_columns.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let score_col = col("eco_score").ok();
    let group_col = col("eco_group").ok();

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(csv_err)?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(id_col).parse::<u64>().map_err(|_| DataError::NonNumeric {
            row,
            column: "id".into(),
            value: field(id_col).to_string(),
        })?;
        let env_inputs = input_cols
            .iter()
            .zip(&schema.input_columns)
            .map(|(&c, name)| parse_f64(field(c), row, name))
            .collect::<Result<Vec<_>, _>>()?;
        let gdp_output = parse_f64(field(output_col), row, &schema.output_column)?;
        let fiscal_features = fiscal_cols
            .iter()
            .zip(&schema.fiscal_columns)
            .map(|(&c, name)| Ok((name.clone(), parse_f64(field(c), row, name)?)))
            .collect::<Result<BTreeMap<_, _>, DataError>>()?;
        let eco_score = match score_col.map(field) {
            Some(s) if !s.is_empty() => Some(parse_f64(s, row, "eco_score")?),
            _ => None,
        };
        let eco_group = match group_col.map(field) {
            Some(s) if !s.is_empty() => Some(s.parse::<EcoGroup>().map_err(|reason| {
                DataError::InvalidValue {
                    row,
                    column: "eco_group".into(),
                    reason,
                }
            })?),
            _ => None,
        };
        let record = ProvinceRecord {
            id,
            name: field(name_col).to_string(),
            env_inputs,
            gdp_output,
            fiscal_features,
            eco_score,
            eco_group,
        };
        record.validate(row, schema)?;
        out.push(record);
    }
    Ok(out)
}

/// Writes provinces in the layout [`load_provinces`] expects. Optional
/// columns are emitted only when some record carries them.
pub fn write_provinces(
    path: &Path,
    records: &[ProvinceRecord],
    schema: &ProvinceSchema,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let with_score = records.iter().any(|r| r.eco_score.is_some());
    let with_group = records.iter().any(|r| r.eco_group.is_some());
    let mut header = vec!["id".to_string(), "name".to_string()];
    header.extend(schema.input_columns.iter().cloned());
    header.push(schema.output_column.clone());
    header.extend(schema.fiscal_columns.iter().cloned());
    if with_score {
        header.push("eco_score".into());
    }
    if with_group {
        header.push("eco_group".into());
    }
    let mut lines = vec![header.join(",")];
    for r in records {
        let mut f = vec![r.id.to_string(), csv_text(&r.name)];
        f.extend(r.env_inputs.iter().map(|v| v.to_string()));
        f.push(r.gdp_output.to_string());
        for c in &schema.fiscal_columns {
            f.push(r.fiscal_features.get(c).map(|v| v.to_string()).unwrap_or_default());
        }
        if with_score {
            f.push(r.eco_score.map(|v| v.to_string()).unwrap_or_default());
        }
        if with_group {
            f.push(r.eco_group.map(|g| g.as_str().to_string()).unwrap_or_default());
        }
        lines.push(f.join(","));
    }
    for l in lines {
        writeln!(w, "{l}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// Complaints

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseLabel {
    CoProduction,
    OneWay,
}

impl ResponseLabel {
    pub fn from_code(v: i64) -> Option<Self> {
        match v {
            1 => Some(Self::CoProduction),
            0 => Some(Self::OneWay),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::CoProduction => 1,
            Self::OneWay => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplaintRecord {
    pub id: u64,
    pub province_id: u64,
    pub embedding: Vec<f64>,
    pub sentiment: f64,
    pub attention: bool,
    pub response_label: ResponseLabel,
    pub cluster_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ComplaintLine {
    id: u64,
    province_id: u64,
    embedding: Vec<f64>,
    sentiment: f64,
    attention: i64,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<usize>,
}

/// Reads `complaints.jsonl`. With `dim = None` the first record declares the
/// embedding width and every later record must match it.
pub fn load_complaints(path: &Path, dim: Option<usize>) -> Result<Vec<ComplaintRecord>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_complaints(BufReader::new(file), dim)
}

pub fn read_complaints<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Vec<ComplaintRecord>, DataError> {
    let mut expected = dim;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ComplaintLine = serde_json::from_str(&line).map_err(|e| DataError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        let d = *expected.get_or_insert(raw.embedding.len());
        if raw.embedding.len() != d {
            return Err(DataError::DimensionMismatch {
                line: line_no,
                expected: d,
                got: raw.embedding.len(),
            });
        }
        if raw.embedding.iter().any(|v| !v.is_finite()) || !raw.sentiment.is_finite() {
            return Err(DataError::Json {
                line: line_no,
                message: "non-finite number".into(),
            });
        }
        let response_label = ResponseLabel::from_code(raw.label).ok_or(DataError::UnknownLabel {
            line: line_no,
            value: raw.label,
        })?;
        let attention = match raw.attention {
            0 => false,
            1 => true,
            v => {
                return Err(DataError::Json {
                    line: line_no,
                    message: format!("attention must be 0 or 1, got {v}"),
                })
            }
        };
        out.push(ComplaintRecord {
            id: raw.id,
            province_id: raw.province_id,
            embedding: raw.embedding,
            sentiment: raw.sentiment,
            attention,
            response_label,
            cluster_id: raw.cluster_id,
        });
    }
    Ok(out)
}

pub fn write_complaints(path: &Path, records: &[ComplaintRecord]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = ComplaintLine {
            id: r.id,
            province_id: r.province_id,
            embedding: r.embedding.clone(),
            sentiment: r.sentiment,
            attention: r.attention as i64,
            label: r.response_label.code() as i64,
            cluster_id: r.cluster_id,
        };
        let s = serde_json::to_string(&line).expect("plain data serialises");
        writeln!(w, "{s}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Stacks complaint embeddings into an `n × D` matrix.
pub fn embedding_matrix(complaints: &[ComplaintRecord]) -> Matrix {
    let rows: Vec<&[f64]> = complaints.iter().map(|c| c.embedding.as_slice()).collect();
    Matrix::from_rows(&rows).expect("load_complaints enforces a common width")
}

// ---------------------------------------------------------------------------
// Feature matrix

/// One entry of a feature plan. Each expands to one column except
/// `ClusterOneHot`, which expands to `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// DEA score of the complaint's province, column `eco_efficiency`.
    EcoEfficiency,
    /// The schema's output column (GDP).
    Output,
    EnvInput { name: String },
    Fiscal { name: String },
    ClusterOneHot { k: usize },
    ClusterId,
    Attention,
    Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePlan {
    pub features: Vec<FeatureSpec>,
}

impl FeaturePlan {
    /// Province-level columns (score, output, inputs, fiscal) followed by
    /// complaint-level columns (cluster one-hot, attention, sentiment). With
    /// the synthetic schema (3 inputs, 12 fiscal) and 8 clusters this is 27.
    pub fn standard(schema: &ProvinceSchema, n_clusters: usize) -> Self {
        let mut features = vec![FeatureSpec::EcoEfficiency, FeatureSpec::Output];
        features.extend(
            schema
                .input_columns
                .iter()
                .map(|n| FeatureSpec::EnvInput { name: n.clone() }),
        );
        features.extend(
            schema
                .fiscal_columns
                .iter()
                .map(|n| FeatureSpec::Fiscal { name: n.clone() }),
        );
        features.push(FeatureSpec::ClusterOneHot { k: n_clusters });
        features.push(FeatureSpec::Attention);
        features.push(FeatureSpec::Sentiment);
        Self { features }
    }

    pub fn column_names(&self, schema: &ProvinceSchema) -> Vec<String> {
        let mut cols = Vec::new();
        for f in &self.features {
            match f {
                FeatureSpec::EcoEfficiency => cols.push("eco_efficiency".into()),
                FeatureSpec::Output => cols.push(schema.output_column.clone()),
                FeatureSpec::EnvInput { name } | FeatureSpec::Fiscal { name } => cols.push(name.clone()),
                FeatureSpec::ClusterOneHot { k } => cols.extend((0..*k).map(|c| format!("cluster_{c}"))),
                FeatureSpec::ClusterId => cols.push("cluster_id".into()),
                FeatureSpec::Attention => cols.push("attention".into()),
                FeatureSpec::Sentiment => cols.push("sentiment".into()),
            }
        }
        cols
    }

    pub fn width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                FeatureSpec::ClusterOneHot { k } => *k,
                _ => 1,
            })
            .sum()
    }
}

/// Model inputs: one row per complaint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub rows: Matrix,
    /// 1 = co-production.
    pub target: Vec<u8>,
    pub complaint_ids: Vec<u64>,
    pub province_ids: Vec<u64>,
    /// 1 = complaint's province is in the high eco-efficiency group, when known.
    pub treatment: Option<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn num_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn num_features(&self) -> usize {
        self.rows.cols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Keeps the listed rows (used for CV folds).
    pub fn subset(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            columns: self.columns.clone(),
            rows: self.rows.select_rows(idx),
            target: idx.iter().map(|&i| self.target[i]).collect(),
            complaint_ids: idx.iter().map(|&i| self.complaint_ids[i]).collect(),
            province_ids: idx.iter().map(|&i| self.province_ids[i]).collect(),
            treatment: self
                .treatment
                .as_ref()
                .map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Plain constructor for in-memory data without province metadata.
    pub fn from_parts(columns: Vec<String>, rows: Matrix, target: Vec<u8>) -> Result<Self, DataError> {
        if columns.len() != rows.cols() || target.len() != rows.rows() {
            return Err(DataError::MissingFeature {
                feature: "<matrix>".into(),
                reason: format!(
                    "{} names / {} targets for a {}x{} matrix",
                    columns.len(),
                    target.len(),
                    rows.rows(),
                    rows.cols()
                ),
            });
        }
        if !rows.is_finite() {
            return Err(DataError::MissingFeature {
                feature: "<matrix>".into(),
                reason: "non-finite entry".into(),
            });
        }
        let n = rows.rows() as u64;
        Ok(Self {
            columns,
            rows,
            target,
            complaint_ids: (0..n).collect(),
            province_ids: vec![0; n as usize],
            treatment: None,
        })
    }
}

/// Joins complaints to their provinces and expands `plan` into columns.
pub fn build_feature_matrix(
    provinces: &[ProvinceRecord],
    complaints: &[ComplaintRecord],
    schema: &ProvinceSchema,
    plan: &FeaturePlan,
) -> Result<FeatureMatrix, DataError> {
    let by_id: HashMap<u64, &ProvinceRecord> = provinces.iter().map(|p| (p.id, p)).collect();
    let columns = plan.column_names(schema);
    let d = plan.width();
    debug_assert_eq!(columns.len(), d);
    let mut data = Vec::with_capacity(complaints.len() * d);
    let mut treatment = Some(Vec::with_capacity(complaints.len()));
    for c in complaints {
        let p = by_id.get(&c.province_id).ok_or(DataError::DanglingProvince {
            complaint: c.id,
            province: c.province_id,
        })?;
        let missing = |feature: &str, reason: String| DataError::MissingFeature {
            feature: feature.to_string(),
            reason,
        };
        for f in &plan.features {
            match f {
                FeatureSpec::EcoEfficiency => data.push(p.eco_score.ok_or_else(|| {
                    missing("eco_efficiency", format!("province {} has no eco_score", p.id))
                })?),
                FeatureSpec::Output => data.push(p.gdp_output),
                FeatureSpec::EnvInput { name } => {
                    let i = schema
                        .input_columns
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| missing(name, "not an input column of the schema".into()))?;
                    data.push(p.env_inputs[i]);
                }
                FeatureSpec::Fiscal { name } => data.push(
                    *p.fiscal_features
                        .get(name)
                        .ok_or_else(|| missing(name, format!("province {} lacks it", p.id)))?,
                ),
                FeatureSpec::ClusterOneHot { k } => {
                    let cl = c
                        .cluster_id
                        .ok_or_else(|| missing("cluster", format!("complaint {} is unclustered", c.id)))?;
                    if cl >= *k {
                        return Err(missing(
                            "cluster",
                            format!("complaint {} has cluster {cl} >= k = {k}", c.id),
                        ));
                    }
                    data.extend((0..*k).map(|j| if j == cl { 1.0 } else { 0.0 }));
                }
                FeatureSpec::ClusterId => data.push(
                    c.cluster_id
                        .ok_or_else(|| missing("cluster_id", format!("complaint {} is unclustered", c.id)))?
                        as f64,
                ),
                FeatureSpec::Attention => data.push(if c.attention { 1.0 } else { 0.0 }),
                FeatureSpec::Sentiment => data.push(c.sentiment),
            }
        }
        match (p.eco_group, treatment.as_mut()) {
            (Some(g), Some(t)) => t.push(g.is_high() as u8),
            _ => treatment = None,
        }
    }
    let rows = Matrix::from_vec(complaints.len(), d, data).expect("row width fixed by plan");
    if !rows.is_finite() {
        return Err(DataError::MissingFeature {
            feature: "<matrix>".into(),
            reason: "non-finite entry".into(),
        });
    }
    Ok(FeatureMatrix {
        columns,
        rows,
        target: complaints.iter().map(|c| c.response_label.code()).collect(),
        complaint_ids: complaints.iter().map(|c| c.id).collect(),
        province_ids: complaints.iter().map(|c| c.province_id).collect(),
        treatment,
    })
}

/// `features.csv`: `complaint_id, province_id, eco_high, <features...>, target`.
/// `eco_high` is blank when the group is unknown.
pub fn write_feature_csv(path: &Path, fm: &FeatureMatrix) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["complaint_id".to_string(), "province_id".into(), "eco_high".into()];
    header.extend(fm.columns.iter().cloned());
    header.push("target".into());
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for i in 0..fm.num_rows() {
        let mut f = vec![
            fm.complaint_ids[i].to_string(),
            fm.province_ids[i].to_string(),
            fm.treatment.as_ref().map(|t| t[i].to_string()).unwrap_or_default(),
        ];
        f.extend(fm.rows.row(i).iter().map(|v| v.to_string()));
        f.push(fm.target[i].to_string());
        writeln!(w, "{}", f.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_feature_csv(path: &Path) -> Result<FeatureMatrix, DataError> {
    let csv_err = |e: csv::Error| DataError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let expect = |i: usize, name: &str| -> Result<(), DataError> {
        if header.get(i).map(String::as_str) != Some(name) {
            return Err(DataError::MissingColumn { column: name.into() });
        }
        Ok(())
    };
    expect(0, "complaint_id")?;
    expect(1, "province_id")?;
    expect(2, "eco_high")?;
    if header.len() < 4 {
        return Err(DataError::MissingColumn { column: "target".into() });
    }
    expect(header.len() - 1, "target")?;
    let columns = header[3..header.len() - 1].to_vec();
    let (mut complaint_ids, mut province_ids, mut treat, mut target) = (vec![], vec![], vec![], vec![]);
    let mut data = Vec::new();
    let mut all_treated = true;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(csv_err)?;
        let int = |c: usize, name: &str| -> Result<u64, DataError> {
            rec[c].parse::<u64>().map_err(|_| DataError::NonNumeric {
                row,
                column: name.into(),
                value: rec[c].to_string(),
            })
        };
        complaint_ids.push(int(0, "complaint_id")?);
        province_ids.push(int(1, "province_id")?);
        if rec[2].is_empty() {
            all_treated = false;
        } else {
            treat.push(int(2, "eco_high")? as u8);
        }
        for (c, name) in columns.iter().enumerate() {
            data.push(parse_f64(&rec[3 + c], row, name)?);
        }
        let t = int(header.len() - 1, "target")?;
        if t > 1 {
            return Err(DataError::InvalidValue {
                row,
                column: "target".into(),
                reason: format!("target must be 0 or 1, got {t}"),
            });
        }
        target.push(t as u8);
    }
    let n = target.len();
    let rows = Matrix::from_vec(n, columns.len(), data).expect("fixed width rows");
    Ok(FeatureMatrix {
        columns,
        rows,
        target,
        complaint_ids,
        province_ids,
        treatment: (all_treated && n > 0).then_some(treat),
    })
}

// ---------------------------------------------------------------------------
// Synthetic data

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Finds the logit shift `γ` such that `mean_i [σ(η_i + γ) − σ(η_i)] = target`.
/// The left side is strictly increasing in `γ`, so bisection is exact up to
/// floating point.
pub fn calibrate_logit_shift(etas: &[f64], target: f64) -> Result<f64, DataError> {
    if etas.is_empty() {
        return Err(DataError::InvalidSpec("no draws to calibrate against".into()));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let effect = |g: f64| etas.iter().map(|&e| sigmoid(e + g) - sigmoid(e)).sum::<f64>() / etas.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    if !(effect(lo) < target && target < effect(hi)) {
        return Err(DataError::InvalidSpec(format!(
            "treatment effect {target} is not attainable under the outcome model"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if effect(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draws `n` points from `k` isotropic unit-variance Gaussians whose centres
/// are pairwise `separation` apart (axis-aligned when `k ≤ dim`). Labels are
/// balanced and shuffled.
pub fn gaussian_blobs(
    n: usize,
    dim: usize,
    k: usize,
    separation: f64,
    rng: &mut Rng,
) -> (Matrix, Vec<usize>, Matrix) {
    let mut centers = Matrix::zeros(k, dim);
    if k <= dim {
        for c in 0..k {
            centers[(c, c)] = separation / std::f64::consts::SQRT_2;
        }
    } else {
        let s = separation / (2.0 * dim as f64).sqrt();
        for v in centers.as_mut_slice() {
            *v = s * normal(rng);
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut points = Matrix::zeros(n, dim);
    for (i, &l) in labels.iter().enumerate() {
        let row = points.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = centers[(l, j)] + normal(rng);
        }
    }
    (points, labels, centers)
}

fn default_env_inputs() -> usize {
    3
}
fn default_fiscal() -> usize {
    12
}
fn default_separation() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_provinces: usize,
    pub n_complaints: usize,
    pub n_clusters: usize,
    pub embedding_dim: usize,
    pub true_ate: f64,
    pub confounding_strength: f64,
    pub seed: u64,
    #[serde(default = "default_env_inputs")]
    pub n_env_inputs: usize,
    #[serde(default = "default_fiscal")]
    pub n_fiscal: usize,
    /// Pairwise distance between cluster centres, in units of the
    /// within-cluster standard deviation.
    #[serde(default = "default_separation")]
    pub cluster_separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_provinces: 27,
            n_complaints: 4221,
            n_clusters: 8,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            true_ate: 0.24,
            confounding_strength: 1.0,
            seed: 1,
            n_env_inputs: default_env_inputs(),
            n_fiscal: default_fiscal(),
            cluster_separation: default_separation(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_provinces < 2 {
            return bad(format!("n_provinces must be >= 2 (got {})", self.n_provinces));
        }
        for (name, v) in [
            ("n_clusters", self.n_clusters),
            ("embedding_dim", self.embedding_dim),
            ("n_env_inputs", self.n_env_inputs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.n_complaints < self.n_clusters {
            return bad(format!(
                "n_complaints ({}) must be at least n_clusters ({})",
                self.n_complaints, self.n_clusters
            ));
        }
        if !(-1.0..=1.0).contains(&self.true_ate) {
            return bad(format!("true_ate must lie in [-1, 1] (got {})", self.true_ate));
        }
        if !(self.confounding_strength >= 0.0 && self.confounding_strength.is_finite()) {
            return bad("confounding_strength must be finite and >= 0".into());
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be positive".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> ProvinceSchema {
        ProvinceSchema::synthetic(self.n_env_inputs, self.n_fiscal)
    }
}

/// Everything the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Province ids placed on the efficient frontier (θ = 1).
    pub frontier: Vec<u64>,
    /// Exact input-oriented θ per province (identical under CRS and VRS).
    pub theta: Vec<f64>,
    pub groups: Vec<EcoGroup>,
    /// Unobserved province-level confounder.
    pub confounder: Vec<f64>,
    /// Planted cluster of each complaint, in file order.
    pub clusters: Vec<usize>,
    pub true_ate: f64,
    /// Logit-scale treatment coefficient that realises `true_ate`.
    pub logit_effect: f64,
    /// Additive logit offset of each cluster.
    pub cluster_effects: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub schema: ProvinceSchema,
    pub provinces: Vec<ProvinceRecord>,
    pub complaints: Vec<ComplaintRecord>,
    pub truth: GroundTruth,
}

const CALIBRATION_DRAWS: usize = 200_000;

/// Generates a province panel and complaint corpus with planted structure.
///
/// * Frontier provinces have inputs `y·u` with `Π u_i = 1` (distinct `u` on a
///   strictly convex surface), so each is extreme. Every other province copies
///   a frontier province's output and scales its inputs by `1/θ`, which makes
///   `θ` its exact score under both CRS and VRS.
/// * A latent province confounder raises both the chance of high efficiency
///   and the co-production logit (scaled by `confounding_strength`); fiscal
///   features are noisy proxies of it.
/// * Labels follow `σ(η + γ·t)`, with `γ` calibrated so the average treatment
///   effect over the generator's covariate distribution equals `true_ate`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let schema = spec.schema();
    let n = spec.n_provinces;
    let m = spec.n_env_inputs;
    let strength = spec.confounding_strength;
    let mut rng = rng_from(derive_seed(spec.seed, 0));

    let confounder: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let propensity_index: Vec<f64> = confounder
        .iter()
        .map(|z| strength * z + normal(&mut rng))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| propensity_index[b].total_cmp(&propensity_index[a]).then(a.cmp(&b)));
    let n_frontier = (n / 4).max(1);
    let mut theta = vec![1.0; n];
    let mut frontier_flags = vec![false; n];
    for &p in &order[..n_frontier] {
        frontier_flags[p] = true;
    }
    for &p in &order[n_frontier..] {
        theta[p] = 0.3 + 0.6 * sigmoid(propensity_index[p]);
    }
    let groups = crate::dea::split_by_median(&theta).map_err(|e| DataError::InvalidSpec(e.to_string()))?;

    let input_scale: Vec<f64> = (0..m).map(|i| 10f64.powi(i as i32 - 1)).collect();
    let frontier_ids: Vec<usize> = (0..n).filter(|&p| frontier_flags[p]).collect();
    let mut shapes = vec![Vec::new(); n];
    let mut outputs = vec![0.0; n];
    for &p in &frontier_ids {
        let raw: Vec<f64> = (0..m).map(|_| 0.5 * normal(&mut rng)).collect();
        let mean = raw.iter().sum::<f64>() / m as f64;
        shapes[p] = raw.iter().map(|r| (r - mean).exp()).collect();
        outputs[p] = (1000f64.ln() + 0.5 * normal(&mut rng)).exp();
    }
    let mut provinces = Vec::with_capacity(n);
    for p in 0..n {
        let src = if frontier_flags[p] {
            p
        } else {
            frontier_ids[rng.random_range(0..frontier_ids.len())]
        };
        let y = outputs[src];
        let env_inputs: Vec<f64> = (0..m)
            .map(|i| y * shapes[src][i] * input_scale[i] / theta[p])
            .collect();
        let fiscal_features = schema
            .fiscal_columns
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let loading = 0.3 + 0.05 * (k % 5) as f64;
                let v = (5.0 + loading * confounder[p] + 0.3 * normal(&mut rng)).exp();
                (name.clone(), v)
            })
            .collect();
        provinces.push(ProvinceRecord {
            id: p as u64 + 1,
            name: format!("Province-{:02}", p + 1),
            env_inputs,
            gdp_output: y,
            fiscal_features,
            eco_score: None,
            eco_group: None,
        });
    }

    let k = spec.n_clusters;
    let cluster_effects: Vec<f64> = (0..k)
        .map(|c| if k == 1 { 0.0 } else { -0.8 + 1.6 * c as f64 / (k - 1) as f64 })
        .collect();
    let base = -0.4;
    let outcome_index = |cluster: usize, attention: bool, sentiment: f64, z: f64| {
        base + cluster_effects[cluster] + 0.6 * attention as u8 as f64 + 0.3 * sentiment + strength * z
    };

    let mut cal_rng = rng_from(derive_seed(spec.seed, 1));
    let cal: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|_| {
            let c = cal_rng.random_range(0..k);
            let a = cal_rng.random_bool(0.3);
            let s = normal(&mut cal_rng);
            let z = normal(&mut cal_rng);
            outcome_index(c, a, s, z)
        })
        .collect();
    let gamma = calibrate_logit_shift(&cal, spec.true_ate)?;

    let mut emb_rng = rng_from(derive_seed(spec.seed, 2));
    let (emb, clusters, _) = gaussian_blobs(
        spec.n_complaints,
        spec.embedding_dim,
        k,
        spec.cluster_separation,
        &mut emb_rng,
    );
    let mut complaints = Vec::with_capacity(spec.n_complaints);
    for (i, &cl) in clusters.iter().enumerate() {
        let p = rng.random_range(0..n);
        let attention = rng.random_bool(0.3);
        let sentiment = normal(&mut rng);
        let t = groups[p].is_high() as u8 as f64;
        let prob = sigmoid(outcome_index(cl, attention, sentiment, confounder[p]) + gamma * t);
        let label = if rng.random_bool(prob) {
            ResponseLabel::CoProduction
        } else {
            ResponseLabel::OneWay
        };
        complaints.push(ComplaintRecord {
            id: i as u64 + 1,
            province_id: p as u64 + 1,
            embedding: emb.row(i).to_vec(),
            sentiment,
            attention,
            response_label: label,
            cluster_id: None,
        });
    }

    Ok(SyntheticData {
        schema,
        provinces,
        complaints,
        truth: GroundTruth {
            frontier: frontier_ids.iter().map(|&p| p as u64 + 1).collect(),
            theta,
            groups,
            confounder,
            clusters,
            true_ate: spec.true_ate,
            logit_effect: gamma,
            cluster_effects,
        },
    })
}

/// Individual-level treatment-effect fixture: `(X, t, y)` with a latent
/// confounder observed only through noisy proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalSpec {
    pub n: usize,
    /// Number of covariates; the first `max(1, p - 2)` are proxies of the
    /// confounder, then one prognostic covariate and one pure-noise covariate.
    pub p: usize,
    pub true_ate: f64,
    pub confounding_strength: f64,
    /// Standard deviation of proxy noise.
    pub proxy_noise: f64,
    pub seed: u64,
}

impl Default for CausalSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            p: 7,
            true_ate: 0.24,
            confounding_strength: 1.0,
            proxy_noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCausal {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<u8>,
    pub confounder: Vec<f64>,
    pub true_ate: f64,
    pub logit_effect: f64,
}

pub fn generate_causal(spec: &CausalSpec) -> Result<SyntheticCausal, DataError> {
    if spec.n < 2 || spec.p == 0 {
        return Err(DataError::InvalidSpec("need n >= 2 and p >= 1".into()));
    }
    if !(-1.0..=1.0).contains(&spec.true_ate) {
        return Err(DataError::InvalidSpec("true_ate must lie in [-1, 1]".into()));
    }
    if !(spec.confounding_strength >= 0.0 && spec.proxy_noise >= 0.0) {
        return Err(DataError::InvalidSpec("strength and noise must be >= 0".into()));
    }
    let c = spec.confounding_strength;
    let n_proxy = spec.p.saturating_sub(2).max(1);
    let has_prognostic = spec.p >= 2;
    let index = |z: f64, prog: f64| -0.3 + c * z + 0.5 * prog;

    let mut cal_rng = rng_from(derive_seed(spec.seed, 1));
    let cal: Vec<f64> = (0..CALIBRATION_DRAWS)
        .map(|_| {
            let z = normal(&mut cal_rng);
            let prog = if has_prognostic { normal(&mut cal_rng) } else { 0.0 };
            index(z, prog)
        })
        .collect();
    let gamma = calibrate_logit_shift(&cal, spec.true_ate)?;

    let mut rng = rng_from(derive_seed(spec.seed, 0));
    let mut x = Matrix::zeros(spec.n, spec.p);
    let mut t = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut confounder = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let z = normal(&mut rng);
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().take(n_proxy).enumerate() {
            let loading = 0.8 + 0.4 * j as f64 / n_proxy.max(2) as f64;
            *v = loading * z + spec.proxy_noise * normal(&mut rng);
        }
        for v in row.iter_mut().skip(n_proxy) {
            *v = normal(&mut rng);
        }
        let prog = if has_prognostic { row[n_proxy] } else { 0.0 };
        let ti = rng.random_bool(sigmoid(c * z)) as u8;
        let yi = rng.random_bool(sigmoid(index(z, prog) + gamma * ti as f64)) as u8;
        t.push(ti);
        y.push(yi);
        confounder.push(z);
    }
    Ok(SyntheticCausal {
        x,
        t,
        y,
        confounder,
        true_ate: spec.true_ate,
        logit_effect: gamma,
    })
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<(), DataError> {
    let s = serde_json::to_string_pretty(truth).expect("plain data serialises");
    std::fs::write(path, s + "\n").map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> ProvinceSchema {
        ProvinceSchema {
            input_columns: vec!["x1".into(), "x2".into()],
            output_column: "gdp_output".into(),
            fiscal_columns: vec![],
        }
    }

    #[test]
    fn schema_inferred_from_written_header() {
        let schema = ProvinceSchema::synthetic(3, 4);
        let mut header = vec!["id".to_string(), "name".into()];
        header.extend(schema.input_columns.iter().cloned());
        header.push("gdp_output".into());
        header.extend(schema.fiscal_columns.iter().cloned());
        header.push("eco_score".into());
        assert_eq!(ProvinceSchema::from_header(&header, "gdp_output").unwrap(), schema);
        assert!(ProvinceSchema::from_header(&["id", "name", "gdp_output"], "gdp_output").is_err());
        assert!(matches!(
            ProvinceSchema::from_header(&["id", "name", "x"], "gdp_output"),
            Err(DataError::MissingColumn { .. })
        ));
    }

    #[test]
    fn province_row_maps_fields() {
        let csv = "id,name,x1,x2,gdp_output\n1,Alpha,2.0,3.0,10.0\n";
        let recs = read_provinces(csv.as_bytes(), &schema2()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].env_inputs, vec![2.0, 3.0]);
        assert_eq!(recs[0].gdp_output, 10.0);
        assert_eq!(recs[0].eco_score, None);
    }

    #[test]
    fn empty_data_section() {
        let csv = "id,name,x1,x2,gdp_output\n";
        assert!(read_provinces(csv.as_bytes(), &schema2()).unwrap().is_empty());
    }

    #[test]
    fn negative_output_names_column_and_row() {
        let csv = "id,name,x1,x2,gdp_output\n1,Alpha,2.0,3.0,-1\n";
        match read_provinces(csv.as_bytes(), &schema2()) {
            Err(DataError::InvalidValue { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "gdp_output");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_bad_number() {
        let csv = "id,name,x1,gdp_output\n1,A,2,3\n";
        assert!(matches!(
            read_provinces(csv.as_bytes(), &schema2()),
            Err(DataError::MissingColumn { column }) if column == "x2"
        ));
        let csv = "id,name,x1,x2,gdp_output\n1,A,two,3,4\n";
        assert!(matches!(
            read_provinces(csv.as_bytes(), &schema2()),
            Err(DataError::NonNumeric { row: 1, .. })
        ));
        let csv = "id,name,x1,x2,gdp_output\n1,A,-2,3,4\n";
        assert!(matches!(
            read_provinces(csv.as_bytes(), &schema2()),
            Err(DataError::InvalidValue { column, .. }) if column == "x1"
        ));
    }

    #[test]
    fn complaint_line_parses() {
        let line = r#"{"id":1,"province_id":1,"embedding":[0.1,0.2],"sentiment":0.3,"attention":0,"label":1}"#;
        let recs = read_complaints(line.as_bytes(), Some(2)).unwrap();
        assert_eq!(recs[0].response_label, ResponseLabel::CoProduction);
        assert!(!recs[0].attention);
        assert_eq!(recs[0].cluster_id, None);
    }

    #[test]
    fn complaint_errors() {
        let wide = r#"{"id":1,"province_id":1,"embedding":[0.1,0.2,0.3],"sentiment":0.3,"attention":0,"label":1}"#;
        assert!(matches!(
            read_complaints(wide.as_bytes(), Some(2)),
            Err(DataError::DimensionMismatch { expected: 2, got: 3, .. })
        ));
        let bad = r#"{"id":1,"province_id":1,"embedding":[0.1,0.2],"sentiment":0.3,"attention":0,"label":2}"#;
        assert!(matches!(
            read_complaints(bad.as_bytes(), Some(2)),
            Err(DataError::UnknownLabel { value: 2, .. })
        ));
    }

    fn province(id: u64, score: f64) -> ProvinceRecord {
        ProvinceRecord {
            id,
            name: format!("P{id}"),
            env_inputs: vec![1.0, 2.0],
            gdp_output: 5.0,
            fiscal_features: BTreeMap::new(),
            eco_score: Some(score),
            eco_group: Some(EcoGroup::High),
        }
    }

    fn complaint(id: u64, province_id: u64) -> ComplaintRecord {
        ComplaintRecord {
            id,
            province_id,
            embedding: vec![0.0, 1.0],
            sentiment: 0.2,
            attention: true,
            response_label: ResponseLabel::OneWay,
            cluster_id: Some(0),
        }
    }

    #[test]
    fn feature_matrix_join() {
        let plan = FeaturePlan {
            features: vec![FeatureSpec::EcoEfficiency, FeatureSpec::Attention],
        };
        let fm = build_feature_matrix(&[province(1, 0.8)], &[complaint(1, 1)], &schema2(), &plan).unwrap();
        let col = fm.column_index("eco_efficiency").unwrap();
        assert_eq!(fm.rows[(0, col)], 0.8);

        let two = build_feature_matrix(
            &[province(1, 0.8)],
            &[complaint(1, 1), complaint(2, 1)],
            &schema2(),
            &plan,
        )
        .unwrap();
        assert_eq!(two.num_rows(), 2);
        assert_eq!(two.rows.row(0)[col], two.rows.row(1)[col]);

        assert!(matches!(
            build_feature_matrix(&[province(1, 0.8)], &[complaint(1, 99)], &schema2(), &plan),
            Err(DataError::DanglingProvince { province: 99, .. })
        ));
        let missing = FeaturePlan {
            features: vec![FeatureSpec::Fiscal { name: "education".into() }],
        };
        assert!(matches!(
            build_feature_matrix(&[province(1, 0.8)], &[complaint(1, 1)], &schema2(), &missing),
            Err(DataError::MissingFeature { .. })
        ));
    }

    #[test]
    fn standard_plan_has_27_columns_for_default_schema() {
        let spec = SyntheticSpec::default();
        let plan = FeaturePlan::standard(&spec.schema(), 8);
        assert_eq!(plan.width(), 27);
        assert_eq!(plan.column_names(&spec.schema()).len(), 27);
    }

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_provinces: 12,
            n_complaints: 300,
            n_clusters: 3,
            embedding_dim: 8,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec(7)).unwrap();
        let b = generate_synthetic(&small_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_spec(8)).unwrap();
        assert_ne!(a.complaints, c.complaints);
    }

    #[test]
    fn generated_frontier_matches_dea() {
        use crate::dea::{dea_scores, DeaOptions, DeaPanel, Rts};
        let data = generate_synthetic(&small_spec(3)).unwrap();
        let ids = data.provinces.iter().map(|p| p.id.to_string()).collect();
        let x: Vec<Vec<f64>> = data.provinces.iter().map(|p| p.env_inputs.clone()).collect();
        let y: Vec<Vec<f64>> = data.provinces.iter().map(|p| vec![p.gdp_output]).collect();
        let panel = DeaPanel::from_units(ids, &x, &y).unwrap();
        for rts in [Rts::Crs, Rts::Vrs] {
            let s = dea_scores(&panel, DeaOptions { rts }).unwrap();
            for (a, b) in s.theta.iter().zip(&data.truth.theta) {
                assert!((a - b).abs() < 1e-7, "{rts:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec(1);
        s.n_clusters = 0;
        assert!(generate_synthetic(&s).is_err());
        let mut s = small_spec(1);
        s.true_ate = 1.5;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        let etas: Vec<f64> = (0..1000).map(|i| (i as f64 / 500.0) - 1.0).collect();
        let g = calibrate_logit_shift(&etas, 0.24).unwrap();
        let ate: f64 = etas.iter().map(|&e| sigmoid(e + g) - sigmoid(e)).sum::<f64>() / 1000.0;
        assert!((ate - 0.24).abs() < 1e-12);
        assert!(calibrate_logit_shift(&etas, 0.999).is_err());
    }
}
