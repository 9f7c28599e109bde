//! Cohort data model: schema, CSV ingestion, inclusion filtering, summaries.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown column `{column}` (not declared in schema)")]
    UnknownColumn { column: String },
    #[error("column `{column}` declared in schema but absent from file header")]
    MissingColumn { column: String },
    #[error("row {row}, column `{column}`: level `{value}` is not a declared level")]
    UndeclaredLevel {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: `{value}` is not numeric")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: `{value}` is not a binary value (0/1)")]
    InvalidBinary {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: negative time {value}")]
    NegativeTime {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("dataset has no rows")]
    Empty,
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical { levels: Vec<String> },
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Covariate,
    Time,
    Event,
    Id,
    Center,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Continuous,
            role: Role::Covariate,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Binary,
            role: Role::Covariate,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        levels: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical {
                levels: levels.into_iter().map(Into::into).collect(),
            },
            role: Role::Covariate,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            ColumnKind::Categorical { levels } => Some(levels),
            _ => None,
        }
    }
}

/// JSON entry for one column: `{"kind": ..., "levels": [...], "role": ...}`.
#[derive(Serialize, Deserialize)]
struct ColumnEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    levels: Vec<String>,
    #[serde(default)]
    role: Role,
}

/// Ordered list of column declarations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, DataError> {
        let schema = Self { columns };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(DataError::Schema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate column `{}`", c.name)));
            }
            if let ColumnKind::Categorical { levels } = &c.kind {
                if levels.is_empty() {
                    return Err(DataError::Schema(format!(
                        "`{}` declares no levels",
                        c.name
                    )));
                }
                let mut ls = HashSet::new();
                for l in levels {
                    if l.is_empty() || !ls.insert(l.as_str()) {
                        return Err(DataError::Schema(format!(
                            "`{}` has an empty or duplicate level `{l}`",
                            c.name
                        )));
                    }
                }
            }
        }
        let count = |r: Role| self.columns.iter().filter(|c| c.role == r).count();
        if count(Role::Time) != 1 || count(Role::Event) != 1 {
            return Err(DataError::Schema(
                "exactly one time and one event column required".into(),
            ));
        }
        if count(Role::Id) > 1 {
            return Err(DataError::Schema("at most one id column allowed".into()));
        }
        let time = self.by_role(Role::Time).unwrap();
        if time.kind != ColumnKind::Continuous {
            return Err(DataError::Schema(format!(
                "time column `{}` must be continuous",
                time.name
            )));
        }
        let event = self.by_role(Role::Event).unwrap();
        if event.kind != ColumnKind::Binary {
            return Err(DataError::Schema(format!(
                "event column `{}` must be binary",
                event.name
            )));
        }
        Ok(())
    }

    pub fn by_role(&self, role: Role) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.role == role)
    }

    pub fn get(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn from_json_str(s: &str) -> Result<Self, DataError> {
        let map: Map<String, Value> = serde_json::from_str(s)?;
        let mut columns = Vec::with_capacity(map.len());
        for (name, v) in map {
            let entry: ColumnEntry = serde_json::from_value(v)?;
            let kind = match entry.kind.as_str() {
                "continuous" => ColumnKind::Continuous,
                "binary" => ColumnKind::Binary,
                "categorical" => ColumnKind::Categorical {
                    levels: entry.levels,
                },
                other => {
                    return Err(DataError::Schema(format!(
                        "`{name}`: unknown kind `{other}`"
                    )))
                }
            };
            columns.push(ColumnSpec {
                name,
                kind,
                role: entry.role,
            });
        }
        Self::new(columns)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let s = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        let mut map = Map::new();
        for c in &self.columns {
            let (kind, levels) = match &c.kind {
                ColumnKind::Continuous => ("continuous", vec![]),
                ColumnKind::Binary => ("binary", vec![]),
                ColumnKind::Categorical { levels } => ("categorical", levels.clone()),
            };
            let entry = ColumnEntry {
                kind: kind.to_string(),
                levels,
                role: c.role,
            };
            map.insert(
                c.name.clone(),
                serde_json::to_value(entry).expect("serializable"),
            );
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("serializable")
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Cell tokens (after trimming) treated as missing. The empty string is always missing.
    pub missing_tokens: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            missing_tokens: vec!["NA".to_string()],
        }
    }
}

/// A cohort: data columns with a missingness mask plus (time, event) outcomes.
///
/// Categorical cells hold the level index as `f64`; binary cells hold 0 or 1.
/// Masked cells are stored as `0.0` and must never be read as data.
/// Outcomes live outside the matrix; rows whose time or event was missing on
/// ingestion are flagged in `outcome_missing` until inclusion filtering drops them.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    columns: Vec<ColumnSpec>,
    values: Array2<f64>,
    missing: Array2<bool>,
    time: Vec<f64>,
    event: Vec<bool>,
    outcome_missing: Vec<bool>,
    ids: Vec<String>,
    time_spec: ColumnSpec,
    event_spec: ColumnSpec,
    id_spec: Option<ColumnSpec>,
}

impl SurvivalDataset {
    /// Builds a dataset with complete outcomes. Columns must have role
    /// covariate or center; ids default to the 0-based row index.
    pub fn new(
        columns: Vec<ColumnSpec>,
        values: Array2<f64>,
        missing: Array2<bool>,
        time: Vec<f64>,
        event: Vec<bool>,
    ) -> Result<Self, DataError> {
        let n = time.len();
        let ids = (0..n).map(|i| i.to_string()).collect();
        Self::from_parts(
            columns,
            values,
            missing,
            time,
            event,
            vec![false; n],
            ids,
            ColumnSpec {
                name: "time".into(),
                kind: ColumnKind::Continuous,
                role: Role::Time,
            },
            ColumnSpec {
                name: "event".into(),
                kind: ColumnKind::Binary,
                role: Role::Event,
            },
            None,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        columns: Vec<ColumnSpec>,
        mut values: Array2<f64>,
        missing: Array2<bool>,
        time: Vec<f64>,
        event: Vec<bool>,
        outcome_missing: Vec<bool>,
        ids: Vec<String>,
        time_spec: ColumnSpec,
        event_spec: ColumnSpec,
        id_spec: Option<ColumnSpec>,
    ) -> Result<Self, DataError> {
        let n = time.len();
        if values.dim() != (n, columns.len()) || missing.dim() != values.dim() {
            return Err(DataError::Shape(format!(
                "values {:?} / mask {:?} do not match {} rows x {} columns",
                values.dim(),
                missing.dim(),
                n,
                columns.len()
            )));
        }
        if event.len() != n || outcome_missing.len() != n || ids.len() != n {
            return Err(DataError::Shape("outcome vectors differ in length".into()));
        }
        for (i, (&t, &om)) in time.iter().zip(&outcome_missing).enumerate() {
            if !om && !(t >= 0.0 && t.is_finite()) {
                return Err(DataError::NegativeTime {
                    row: i + 1,
                    column: time_spec.name.clone(),
                    value: t,
                });
            }
        }
        if let Some(c) = columns
            .iter()
            .find(|c| !matches!(c.role, Role::Covariate | Role::Center))
        {
            return Err(DataError::Shape(format!(
                "data column `{}` must be a covariate or center",
                c.name
            )));
        }
        ndarray::Zip::from(&mut values)
            .and(&missing)
            .for_each(|v, &m| {
                if m {
                    *v = 0.0;
                }
            });
        Ok(Self {
            columns,
            values,
            missing,
            time,
            event,
            outcome_missing,
            ids,
            time_spec,
            event_spec,
            id_spec,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.time.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn missing(&self) -> &Array2<bool> {
        &self.missing
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[bool] {
        &self.event
    }

    pub fn outcome_missing(&self) -> &[bool] {
        &self.outcome_missing
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn time_name(&self) -> &str {
        &self.time_spec.name
    }

    pub fn event_name(&self) -> &str {
        &self.event_spec.name
    }

    pub fn n_events(&self) -> usize {
        self.event
            .iter()
            .zip(&self.outcome_missing)
            .filter(|(&e, &m)| e && !m)
            .count()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Indices of columns with role covariate, in schema order.
    pub fn covariate_indices(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&j| self.columns[j].role == Role::Covariate)
            .collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariate_indices()
            .into_iter()
            .map(|j| self.columns[j].name.clone())
            .collect()
    }

    pub fn has_missing_covariates(&self) -> bool {
        self.covariate_indices()
            .iter()
            .any(|&j| self.missing.column(j).iter().any(|&m| m))
    }

    /// Full schema including outcome and id columns.
    pub fn schema(&self) -> Schema {
        let mut cols = Vec::with_capacity(self.columns.len() + 3);
        if let Some(id) = &self.id_spec {
            cols.push(id.clone());
        }
        cols.extend(self.columns.iter().cloned());
        cols.push(self.time_spec.clone());
        cols.push(self.event_spec.clone());
        Schema { columns: cols }
    }

    /// Dense covariate matrix (rows × covariates). Fails on masked cells or
    /// unencoded categorical columns.
    pub fn covariate_matrix(&self) -> Result<Array2<f64>, DataError> {
        let idx = self.covariate_indices();
        for &j in &idx {
            if matches!(self.columns[j].kind, ColumnKind::Categorical { .. }) {
                return Err(DataError::Shape(format!(
                    "column `{}` is categorical; dummy-encode before modeling",
                    self.columns[j].name
                )));
            }
            if let Some(i) = self.missing.column(j).iter().position(|&m| m) {
                return Err(DataError::Shape(format!(
                    "column `{}` has a missing cell at row {}; impute before modeling",
                    self.columns[j].name,
                    i + 1
                )));
            }
        }
        Ok(self.values.select(Axis(1), &idx))
    }

    /// Fails unless every row has an observed time and event.
    pub fn require_outcomes(&self) -> Result<(), DataError> {
        match self.outcome_missing.iter().position(|&m| m) {
            Some(i) => Err(DataError::Shape(format!(
                "row {} has a missing outcome",
                i + 1
            ))),
            None => Ok(()),
        }
    }

    /// New dataset holding the given rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            columns: self.columns.clone(),
            values: self.values.select(Axis(0), rows),
            missing: self.missing.select(Axis(0), rows),
            time: rows.iter().map(|&i| self.time[i]).collect(),
            event: rows.iter().map(|&i| self.event[i]).collect(),
            outcome_missing: rows.iter().map(|&i| self.outcome_missing[i]).collect(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            time_spec: self.time_spec.clone(),
            event_spec: self.event_spec.clone(),
            id_spec: self.id_spec.clone(),
        }
    }

    /// Same rows and outcomes with a replaced set of data columns.
    pub fn with_columns(
        &self,
        columns: Vec<ColumnSpec>,
        values: Array2<f64>,
        missing: Array2<bool>,
    ) -> Result<SurvivalDataset, DataError> {
        Self::from_parts(
            columns,
            values,
            missing,
            self.time.clone(),
            self.event.clone(),
            self.outcome_missing.clone(),
            self.ids.clone(),
            self.time_spec.clone(),
            self.event_spec.clone(),
            self.id_spec.clone(),
        )
    }

    /// Same rows, columns and outcomes with new cell values and mask.
    pub fn with_cells(
        &self,
        values: Array2<f64>,
        missing: Array2<bool>,
    ) -> Result<SurvivalDataset, DataError> {
        self.with_columns(self.columns.clone(), values, missing)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, DataError> {
        if ids.len() != self.n_rows() {
            return Err(DataError::Shape("id count does not match rows".into()));
        }
        self.ids = ids;
        if self.id_spec.is_none() {
            self.id_spec = Some(ColumnSpec {
                name: "id".into(),
                kind: ColumnKind::Continuous,
                role: Role::Id,
            });
        }
        Ok(self)
    }

    pub fn with_outcome_names(mut self, time: &str, event: &str) -> Self {
        self.time_spec.name = time.to_string();
        self.event_spec.name = event.to_string();
        self
    }

    fn format_cell(&self, i: usize, j: usize) -> String {
        if self.missing[[i, j]] {
            return String::new();
        }
        let v = self.values[[i, j]];
        match &self.columns[j].kind {
            ColumnKind::Categorical { levels } => levels[v as usize].clone(),
            ColumnKind::Binary => format!("{}", v as i64),
            ColumnKind::Continuous => format!("{v}"),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = self.schema().columns.into_iter().map(|c| c.name).collect();
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            if self.id_spec.is_some() {
                record.push(self.ids[i].clone());
            }
            for j in 0..self.n_cols() {
                record.push(self.format_cell(i, j));
            }
            if self.outcome_missing[i] {
                record.push(String::new());
                record.push(String::new());
            } else {
                record.push(format!("{}", self.time[i]));
                record.push(if self.event[i] {
                    "1".into()
                } else {
                    "0".into()
                });
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: PathBuf::from("<writer>"),
            source,
        })?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<(), DataError> {
        let f = File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn parse_binary(s: &str) -> Option<f64> {
    match s {
        "0" | "false" | "FALSE" | "False" => Some(0.0),
        "1" | "true" | "TRUE" | "True" => Some(1.0),
        _ => s.parse::<f64>().ok().filter(|v| *v == 0.0 || *v == 1.0),
    }
}

/// Reads a cohort CSV against `schema`. Header names are matched regardless of order.
pub fn load_csv(
    path: &Path,
    schema: &Schema,
    opts: &LoadOptions,
) -> Result<SurvivalDataset, DataError> {
    let f = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(f, schema, opts)
}

pub fn read_csv<R: Read>(
    reader: R,
    schema: &Schema,
    opts: &LoadOptions,
) -> Result<SurvivalDataset, DataError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    // position of each schema column in the file
    let mut file_pos = Vec::with_capacity(schema.columns.len());
    for h in &header {
        if schema.get(h).is_none() {
            return Err(DataError::UnknownColumn { column: h.clone() });
        }
    }
    for c in &schema.columns {
        match header.iter().position(|h| *h == c.name) {
            Some(p) => file_pos.push(p),
            None => {
                return Err(DataError::MissingColumn {
                    column: c.name.clone(),
                })
            }
        }
    }

    let data_cols: Vec<usize> = (0..schema.columns.len())
        .filter(|&k| matches!(schema.columns[k].role, Role::Covariate | Role::Center))
        .collect();
    let time_k = schema
        .columns
        .iter()
        .position(|c| c.role == Role::Time)
        .unwrap();
    let event_k = schema
        .columns
        .iter()
        .position(|c| c.role == Role::Event)
        .unwrap();
    let id_k = schema.columns.iter().position(|c| c.role == Role::Id);

    let is_missing = |s: &str| s.is_empty() || opts.missing_tokens.iter().any(|t| t == s);

    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut time = Vec::new();
    let mut event = Vec::new();
    let mut outcome_missing = Vec::new();
    let mut ids = Vec::new();

    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != header.len() {
            return Err(DataError::RaggedRow {
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let cell = |k: usize| rec.get(file_pos[k]).unwrap().trim();

        for &k in &data_cols {
            let spec = &schema.columns[k];
            let s = cell(k);
            if is_missing(s) {
                values.push(0.0);
                mask.push(true);
                continue;
            }
            let v = match &spec.kind {
                ColumnKind::Continuous => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::NonNumeric {
                        row,
                        column: spec.name.clone(),
                        value: s.to_string(),
                    })?,
                ColumnKind::Binary => parse_binary(s).ok_or_else(|| DataError::InvalidBinary {
                    row,
                    column: spec.name.clone(),
                    value: s.to_string(),
                })?,
                ColumnKind::Categorical { levels } => levels
                    .iter()
                    .position(|l| l == s)
                    .ok_or_else(|| DataError::UndeclaredLevel {
                        row,
                        column: spec.name.clone(),
                        value: s.to_string(),
                    })? as f64,
            };
            values.push(v);
            mask.push(false);
        }

        let ts = cell(time_k);
        let es = cell(event_k);
        if is_missing(ts) || is_missing(es) {
            time.push(0.0);
            event.push(false);
            outcome_missing.push(true);
        } else {
            let tname = &schema.columns[time_k].name;
            let t = ts
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: tname.clone(),
                    value: ts.to_string(),
                })?;
            if t < 0.0 {
                return Err(DataError::NegativeTime {
                    row,
                    column: tname.clone(),
                    value: t,
                });
            }
            let e = parse_binary(es).ok_or_else(|| DataError::InvalidBinary {
                row,
                column: schema.columns[event_k].name.clone(),
                value: es.to_string(),
            })?;
            time.push(t);
            event.push(e == 1.0);
            outcome_missing.push(false);
        }
        ids.push(match id_k {
            Some(k) => cell(k).to_string(),
            None => r.to_string(),
        });
    }

    let n = time.len();
    let p = data_cols.len();
    let columns: Vec<ColumnSpec> = data_cols
        .iter()
        .map(|&k| schema.columns[k].clone())
        .collect();
    SurvivalDataset::from_parts(
        columns,
        Array2::from_shape_vec((n, p), values).expect("row-major fill"),
        Array2::from_shape_vec((n, p), mask).expect("row-major fill"),
        time,
        event,
        outcome_missing,
        ids,
        schema.columns[time_k].clone(),
        schema.columns[event_k].clone(),
        id_k.map(|k| schema.columns[k].clone()),
    )
}

/// One exclusion rule. A row is dropped when any rule matches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ExclusionRule {
    /// Drop rows whose categorical cell is one of `levels`.
    Levels { column: String, levels: Vec<String> },
    /// Drop rows whose observed numeric cell lies in `[min, max]`.
    Range { column: String, min: f64, max: f64 },
    /// Drop rows with an observed event at or before `within` time units,
    /// e.g. early postoperative deaths. The threshold is a user choice.
    EarlyEvent { within: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionRules {
    #[serde(default = "default_true")]
    pub drop_missing_outcome: bool,
    #[serde(default)]
    pub exclude: Vec<ExclusionRule>,
}

fn default_true() -> bool {
    true
}

impl Default for InclusionRules {
    fn default() -> Self {
        Self {
            drop_missing_outcome: true,
            exclude: Vec::new(),
        }
    }
}

impl InclusionRules {
    /// No filtering at all.
    pub fn none() -> Self {
        Self {
            drop_missing_outcome: false,
            exclude: Vec::new(),
        }
    }
}

/// Returns the rows that pass `rules`, preserving order.
pub fn apply_inclusion(
    ds: &SurvivalDataset,
    rules: &InclusionRules,
) -> Result<SurvivalDataset, DataError> {
    enum Compiled {
        Levels(usize, Vec<f64>),
        Range(usize, f64, f64),
        Early(f64),
    }
    let mut compiled = Vec::new();
    for rule in &rules.exclude {
        match rule {
            ExclusionRule::Levels { column, levels } => {
                let j = ds
                    .column_index(column)
                    .ok_or_else(|| DataError::UnknownColumn {
                        column: column.clone(),
                    })?;
                let declared = ds.columns[j].levels().ok_or_else(|| {
                    DataError::Schema(format!("level rule on non-categorical column `{column}`"))
                })?;
                let mut codes = Vec::new();
                for l in levels {
                    let code = declared.iter().position(|d| d == l).ok_or_else(|| {
                        DataError::UndeclaredLevel {
                            row: 0,
                            column: column.clone(),
                            value: l.clone(),
                        }
                    })?;
                    codes.push(code as f64);
                }
                compiled.push(Compiled::Levels(j, codes));
            }
            ExclusionRule::Range { column, min, max } => {
                let j = ds
                    .column_index(column)
                    .ok_or_else(|| DataError::UnknownColumn {
                        column: column.clone(),
                    })?;
                compiled.push(Compiled::Range(j, *min, *max));
            }
            ExclusionRule::EarlyEvent { within } => compiled.push(Compiled::Early(*within)),
        }
    }

    let keep: Vec<usize> = (0..ds.n_rows())
        .filter(|&i| {
            if rules.drop_missing_outcome && ds.outcome_missing[i] {
                return false;
            }
            !compiled.iter().any(|c| match c {
                Compiled::Levels(j, codes) => {
                    !ds.missing[[i, *j]] && codes.contains(&ds.values[[i, *j]])
                }
                Compiled::Range(j, lo, hi) => {
                    !ds.missing[[i, *j]] && ds.values[[i, *j]] >= *lo && ds.values[[i, *j]] <= *hi
                }
                Compiled::Early(w) => !ds.outcome_missing[i] && ds.event[i] && ds.time[i] <= *w,
            })
        })
        .collect();
    Ok(ds.select_rows(&keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_rows: usize,
    pub n_events: usize,
    /// (column, fraction of masked cells) over data columns in schema order.
    pub missing_rate: Vec<(String, f64)>,
    pub time_min: f64,
    pub time_max: f64,
    pub time_median: f64,
    pub time_mean: f64,
}

/// Row/event counts, per-column missing rates and follow-up statistics.
/// Time statistics cover every row with an observed outcome, censored included.
pub fn summarize(ds: &SurvivalDataset) -> Result<CohortSummary, DataError> {
    let n = ds.n_rows();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let missing_rate = ds
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let k = ds.missing.column(j).iter().filter(|&&m| m).count();
            (c.name.clone(), k as f64 / n as f64)
        })
        .collect();
    let mut times: Vec<f64> = ds
        .time
        .iter()
        .zip(&ds.outcome_missing)
        .filter(|(_, &m)| !m)
        .map(|(&t, _)| t)
        .collect();
    if times.is_empty() {
        return Err(DataError::Empty);
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    let median = if m % 2 == 1 {
        times[m / 2]
    } else {
        0.5 * (times[m / 2 - 1] + times[m / 2])
    };
    Ok(CohortSummary {
        n_rows: n,
        n_events: ds.n_events(),
        missing_rate,
        time_min: times[0],
        time_max: times[m - 1],
        time_median: median,
        time_mean: times.iter().sum::<f64>() / m as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(vec![
            ColumnSpec::continuous("age"),
            ColumnSpec::categorical("stage", ["T0", "T1", "T2", "T3", "T4"]),
            ColumnSpec::binary("smoker"),
            ColumnSpec::continuous("months").with_role(Role::Time),
            ColumnSpec::binary("dead").with_role(Role::Event),
        ])
        .unwrap()
    }

    fn read(s: &str) -> Result<SurvivalDataset, DataError> {
        read_csv(s.as_bytes(), &schema(), &LoadOptions::default())
    }

    #[test]
    fn one_empty_cell_one_masked() {
        let ds = read("age,stage,smoker,months,dead\n61,T1,0,12.5,1\n,T2,1,3,0\n70,T0,NA,0,1\n")
            .unwrap();
        assert_eq!(ds.n_rows(), 3);
        let masked = ds.missing().iter().filter(|&&m| m).count();
        assert_eq!(masked, 2, "empty cell and NA token");
        let ds =
            read("age,stage,smoker,months,dead\n61,T1,0,12.5,1\n,T2,1,3,0\n70,T0,1,0,1\n").unwrap();
        assert_eq!(ds.missing().iter().filter(|&&m| m).count(), 1);
        assert!(ds.missing()[[1, 0]]);
    }

    #[test]
    fn header_order_is_irrelevant() {
        let a = read("age,stage,smoker,months,dead\n61,T1,0,12.5,1\n").unwrap();
        let b = read("dead,months,smoker,stage,age\n1,12.5,0,T1,61\n").unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.time(), b.time());
    }

    #[test]
    fn undeclared_level_names_location() {
        let err = read("age,stage,smoker,months,dead\n61,T1,0,1,1\n62,pT5,0,1,1\n").unwrap_err();
        match err {
            DataError::UndeclaredLevel { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "stage", "pT5"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(
            read("age,stage,smoker,months,dead,bmi\n61,T1,0,1,1,3\n"),
            Err(DataError::UnknownColumn { .. })
        ));
        assert!(matches!(
            read("age,stage,smoker,months,dead\nold,T1,0,1,1\n"),
            Err(DataError::NonNumeric { row: 1, .. })
        ));
        assert!(matches!(
            read("age,stage,smoker,months,dead\n61,T1,0,-1,1\n"),
            Err(DataError::NegativeTime { row: 1, .. })
        ));
        assert!(matches!(
            read("age,stage,smoker,months\n61,T1,0,1\n"),
            Err(DataError::MissingColumn { .. })
        ));
    }

    #[test]
    fn schema_json_round_trip_keeps_order() {
        let s = schema();
        let back = Schema::from_json_str(&s.to_json_string()).unwrap();
        assert_eq!(s, back);
        let bad = r#"{"x": {"kind": "categorical", "levels": ["a", "a"]}}"#;
        assert!(Schema::from_json_str(bad).is_err());
    }

    #[test]
    fn inclusion_filters() {
        let ds = read(
            "age,stage,smoker,months,dead\n61,T1,0,12,1\n62,T4,0,,1\n63,T4,1,5,\n64,T4,1,1,1\n65,T2,0,9,0\n",
        )
        .unwrap();
        let same = apply_inclusion(&ds, &InclusionRules::none()).unwrap();
        assert_eq!(same, ds);
        let out = apply_inclusion(&ds, &InclusionRules::default()).unwrap();
        assert_eq!(out.n_rows(), 3);
        let rules = InclusionRules {
            drop_missing_outcome: true,
            exclude: vec![ExclusionRule::Levels {
                column: "stage".into(),
                levels: vec!["T4".into()],
            }],
        };
        let expected = (0..ds.n_rows())
            .filter(|&i| !ds.outcome_missing()[i] && ds.values()[[i, 1]] != 4.0)
            .count();
        assert_eq!(apply_inclusion(&ds, &rules).unwrap().n_rows(), expected);
        let early = InclusionRules {
            drop_missing_outcome: true,
            exclude: vec![ExclusionRule::EarlyEvent { within: 1.0 }],
        };
        assert_eq!(apply_inclusion(&ds, &early).unwrap().n_rows(), 2);
        let bad = InclusionRules {
            drop_missing_outcome: true,
            exclude: vec![ExclusionRule::Range {
                column: "nope".into(),
                min: 0.0,
                max: 1.0,
            }],
        };
        assert!(matches!(
            apply_inclusion(&ds, &bad),
            Err(DataError::UnknownColumn { .. })
        ));
    }

    #[test]
    fn summary_statistics() {
        let ds = SurvivalDataset::new(
            vec![ColumnSpec::continuous("x")],
            Array2::zeros((3, 1)),
            Array2::from_elem((3, 1), false),
            vec![1.0, 2.0, 3.0],
            vec![true; 3],
        )
        .unwrap();
        let s = summarize(&ds).unwrap();
        assert_eq!((s.time_median, s.time_mean, s.n_events), (2.0, 2.0, 3));
        assert_eq!(s.missing_rate[0].1, 0.0);

        let mut mask = Array2::from_elem((10, 1), false);
        for i in [0, 4, 9] {
            mask[[i, 0]] = true;
        }
        let ds = SurvivalDataset::new(
            vec![ColumnSpec::continuous("x")],
            Array2::zeros((10, 1)),
            mask,
            (0..10).map(f64::from).collect(),
            vec![false; 10],
        )
        .unwrap();
        assert!((summarize(&ds).unwrap().missing_rate[0].1 - 0.3).abs() < 1e-15);
    }

    prop_compose! {
        fn arb_rows()(rows in prop::collection::vec(
            (prop::option::of(-1e6f64..1e6), prop::option::of(0usize..5), prop::option::of(any::<bool>()),
             0f64..500.0, any::<bool>()), 1..40)) -> Vec<(Option<f64>, Option<usize>, Option<bool>, f64, bool)> {
            rows
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_identity(rows in arb_rows()) {
            let mut csv_text = String::from("age,stage,smoker,months,dead\n");
            let levels = ["T0", "T1", "T2", "T3", "T4"];
            for (a, s, b, t, e) in &rows {
                csv_text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    a.map(|v| v.to_string()).unwrap_or_default(),
                    s.map(|k| levels[k].to_string()).unwrap_or_else(|| "NA".into()),
                    b.map(|v| (v as u8).to_string()).unwrap_or_default(),
                    t,
                    *e as u8
                ));
            }
            let ds = read(&csv_text).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = read_csv(buf.as_slice(), &ds.schema(), &LoadOptions::default()).unwrap();
            prop_assert_eq!(&back.values(), &ds.values());
            prop_assert_eq!(&back.missing(), &ds.missing());
            prop_assert_eq!(back.time(), ds.time());
            prop_assert_eq!(back.event(), ds.event());
            prop_assert_eq!(back.schema(), ds.schema());
        }

        #[test]
        fn summary_rates_match_mask_sums(mask in prop::collection::vec(any::<bool>(), 1..60)) {
            let n = mask.len();
            let ds = SurvivalDataset::new(
                vec![ColumnSpec::continuous("x")],
                Array2::zeros((n, 1)),
                Array2::from_shape_vec((n, 1), mask.clone()).unwrap(),
                vec![1.0; n],
                vec![true; n],
            ).unwrap();
            let s = summarize(&ds).unwrap();
            let brute = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
            prop_assert_eq!(s.missing_rate[0].1, brute);
        }
    }
}
