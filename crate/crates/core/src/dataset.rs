//! Delimited-text ingestion and construction of the estimation sample.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::absorb::{densify, encode_factors, AbsorbError, AbsorbSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("empty table")]
    EmptyTable,
    #[error("no data rows")]
    NoDataRows,
    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    Ragged {
        line: u64,
        expected: u64,
        found: u64,
    },
    #[error("malformed input: {0}")]
    Csv(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` must be numeric")]
    NotNumeric(String),
    #[error("column `{0}` is assigned conflicting roles")]
    RoleConflict(String),
    #[error("negative response value {value} at row {row}")]
    NegativeResponse { row: usize, value: f64 },
    #[error("nonpositive exposure value {value} at row {row}")]
    NonPositiveExposure { row: usize, value: f64 },
    #[error("nonpositive weight {value} at row {row}")]
    NonPositiveWeight { row: usize, value: f64 },
    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },
    #[error("exposure and offset are mutually exclusive")]
    ExposureAndOffset,
    #[error("no observations remain")]
    NoObservations,
    #[error(transparent)]
    Absorb(#[from] AbsorbError),
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    /// Dictionary-encoded text; `levels[code]` is the original string.
    Categorical {
        codes: Vec<Option<u32>>,
        levels: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn kind(&self) -> ColumnKind {
        match self.data {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.data {
            ColumnData::Numeric(v) => v[row].is_none(),
            ColumnData::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    pub fn numeric(&self) -> Option<&[Option<f64>]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            ColumnData::Categorical { .. } => None,
        }
    }

    /// Field text as it would be written back out.
    pub fn display(&self, row: usize) -> String {
        match &self.data {
            ColumnData::Numeric(v) => v[row].map(|x| x.to_string()).unwrap_or_default(),
            ColumnData::Categorical { codes, levels } => codes[row]
                .map(|c| levels[c as usize].clone())
                .unwrap_or_default(),
        }
    }
}

/// Column-oriented view of a delimited file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub n_rows: usize,
}

impl RawTable {
    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }
}

fn is_missing_field(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

fn sniff_column(name: String, raw: Vec<String>) -> Column {
    let parsed: Option<Vec<Option<f64>>> = raw
        .iter()
        .map(|s| {
            if is_missing_field(s) {
                Some(None)
            } else {
                s.parse::<f64>()
                    .ok()
                    .map(|x| if x.is_nan() { None } else { Some(x) })
            }
        })
        .collect();
    let data = match parsed {
        Some(values) => ColumnData::Numeric(values),
        None => {
            let mut dict: HashMap<String, u32> = HashMap::new();
            let mut levels = Vec::new();
            let codes = raw
                .into_iter()
                .map(|s| {
                    if is_missing_field(&s) {
                        return None;
                    }
                    Some(*dict.entry(s.clone()).or_insert_with(|| {
                        levels.push(s);
                        (levels.len() - 1) as u32
                    }))
                })
                .collect();
            ColumnData::Categorical { codes, levels }
        }
    };
    Column { name, data }
}

/// Reads delimited text from any reader. Columns whose non-missing fields all
/// parse as numbers are numeric; everything else is dictionary-encoded.
pub fn read_table<R: Read>(reader: R, opts: &LoadOptions) -> Result<RawTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut records = rdr.records();
    let first = match records.next() {
        None => return Err(DataError::EmptyTable),
        Some(r) => r.map_err(csv_error)?,
    };

    let (names, mut fields): (Vec<String>, Vec<Vec<String>>) = if opts.has_header {
        let names = first.iter().map(str::to_string).collect::<Vec<_>>();
        let n = names.len();
        (names, vec![Vec::new(); n])
    } else {
        let n = first.len();
        let names = (1..=n).map(|i| format!("v{i}")).collect();
        let cols = first.iter().map(|s| vec![s.to_string()]).collect();
        (names, cols)
    };
    if names.len() == 1 && names[0].is_empty() {
        return Err(DataError::EmptyTable);
    }

    for record in records {
        let record = record.map_err(csv_error)?;
        for (col, field) in fields.iter_mut().zip(record.iter()) {
            col.push(field.to_string());
        }
    }

    let n_rows = fields.first().map_or(0, Vec::len);
    if n_rows == 0 {
        return Err(DataError::NoDataRows);
    }
    let columns = names
        .into_iter()
        .zip(fields)
        .map(|(name, raw)| sniff_column(name, raw))
        .collect();
    Ok(RawTable { columns, n_rows })
}

fn csv_error(e: csv::Error) -> DataError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => DataError::Ragged {
            line: pos.as_ref().map_or(0, |p| p.line()),
            expected: *expected_len,
            found: *len,
        },
        _ => DataError::Csv(e.to_string()),
    }
}

pub fn load_table(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<RawTable, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_table(std::io::BufReader::new(file), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Response,
    Covariate,
    Factor,
    Weight,
    OffsetVar,
    ExposureVar,
    ClusterVar,
    Unused,
}

impl Role {
    /// Roles that consume a column's values directly; a column may hold at most one.
    fn is_value_role(self) -> bool {
        matches!(
            self,
            Role::Response | Role::Covariate | Role::Weight | Role::OffsetVar | Role::ExposureVar
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
}

/// Which columns play which part in the model.
#[derive(Debug, Clone, Default)]
pub struct SampleSpec {
    pub depvar: String,
    pub indepvars: Vec<String>,
    pub absorb: AbsorbSpec,
    pub weight: Option<String>,
    pub exposure: Option<String>,
    pub offset: Option<String>,
    /// Cluster variables; `a#b` clusters on the observed combinations.
    pub clusters: Vec<String>,
}

impl SampleSpec {
    fn cluster_columns(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().flat_map(|c| c.split('#'))
    }

    /// Assigns one role per table column. Grouping roles (factor, cluster)
    /// may share a column with each other; value roles may not be combined.
    pub fn schema(&self, table: &RawTable) -> Result<Vec<ColumnSchema>, DataError> {
        let mut roles: HashMap<&str, Vec<Role>> = HashMap::new();
        let mut assign = |name: &'_ str, role: Role| -> Result<(), DataError> {
            let col = table
                .column(name)
                .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
            roles.entry(col.name.as_str()).or_default().push(role);
            Ok(())
        };
        assign(&self.depvar, Role::Response)?;
        for v in &self.indepvars {
            assign(v, Role::Covariate)?;
        }
        for term in &self.absorb.terms {
            for c in term.columns() {
                assign(c, Role::Factor)?;
            }
        }
        if let Some(w) = &self.weight {
            assign(w, Role::Weight)?;
        }
        if let Some(e) = &self.exposure {
            assign(e, Role::ExposureVar)?;
        }
        if let Some(o) = &self.offset {
            assign(o, Role::OffsetVar)?;
        }
        for c in self.cluster_columns() {
            assign(c, Role::ClusterVar)?;
        }

        table
            .columns
            .iter()
            .map(|col| {
                let assigned = roles.get(col.name.as_str());
                let role = match assigned {
                    None => Role::Unused,
                    Some(list) => {
                        let values: Vec<Role> =
                            list.iter().copied().filter(|r| r.is_value_role()).collect();
                        match values.as_slice() {
                            [] => list[0],
                            [r] => *r,
                            _ => return Err(DataError::RoleConflict(col.name.clone())),
                        }
                    }
                };
                Ok(ColumnSchema {
                    name: col.name.clone(),
                    kind: col.kind(),
                    role,
                })
            })
            .collect()
    }
}

/// Why an original row is not part of the estimation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReason {
    None,
    Missing,
    Singleton,
    Separated,
}

/// One entry per original file row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropLedger {
    pub reasons: Vec<DropReason>,
}

impl DropLedger {
    pub fn count(&self, reason: DropReason) -> usize {
        self.reasons.iter().filter(|&&r| r == reason).count()
    }

    pub fn rows(&self, reason: DropReason) -> Vec<usize> {
        self.reasons
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == reason)
            .map(|(i, _)| i)
            .collect()
    }
}

/// An absorbed fixed-effect term encoded over the current sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTerm {
    pub label: String,
    pub factors: Vec<String>,
    pub save_as: Option<String>,
    pub slope_var: Option<String>,
    /// Dense group codes `0..n_groups`.
    pub codes: Vec<u32>,
    pub n_groups: usize,
    pub slope: Option<Vec<f64>>,
}

impl FactorTerm {
    pub fn is_slope(&self) -> bool {
        self.slope.is_some()
    }
}

/// Grouping variable (cluster dimension) encoded over the current sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupVar {
    pub name: String,
    pub codes: Vec<u32>,
    pub n_groups: usize,
}

/// The rows and columns a fit runs on. Immutable once built; dropping rows
/// produces a new sample via [`EstimationSample::retain`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationSample {
    pub depvar: String,
    pub y: Vec<f64>,
    /// n × k covariates, column-major.
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub terms: Vec<FactorTerm>,
    pub weights: Vec<f64>,
    pub weight_var: Option<String>,
    pub offset: Vec<f64>,
    /// `ln(v)` for exposure, the column name for an offset.
    pub offset_label: Option<String>,
    pub clusters: Vec<GroupVar>,
    /// Original file row of each sample row, strictly increasing.
    pub row_ids: Vec<usize>,
    pub ledger: DropLedger,
}

pub const CONSTANT_NAME: &str = "_cons";

impl EstimationSample {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_original(&self) -> usize {
        self.ledger.reasons.len()
    }

    pub fn intercept_terms(&self) -> impl Iterator<Item = &FactorTerm> {
        self.terms.iter().filter(|t| !t.is_slope())
    }

    pub fn has_constant(&self) -> bool {
        self.x_names.iter().any(|n| n == CONSTANT_NAME)
    }

    /// Keeps rows where `keep[i]` is true; the others are ledgered with
    /// `reason`. Group codes are re-densified.
    pub fn retain(&self, keep: &[bool], reason: DropReason) -> EstimationSample {
        assert_eq!(keep.len(), self.n_rows());
        let idx: Vec<usize> = (0..self.n_rows()).filter(|&i| keep[i]).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();

        let mut ledger = self.ledger.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                ledger.reasons[self.row_ids[i]] = reason;
            }
        }

        let x = DMatrix::from_fn(idx.len(), self.x.ncols(), |r, c| self.x[(idx[r], c)]);
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let raw: Vec<u32> = idx.iter().map(|&i| t.codes[i]).collect();
                let (codes, n_groups) = densify(&raw);
                FactorTerm {
                    codes,
                    n_groups,
                    slope: t.slope.as_deref().map(pick),
                    ..t.clone()
                }
            })
            .collect();
        let clusters = self
            .clusters
            .iter()
            .map(|g| {
                let raw: Vec<u32> = idx.iter().map(|&i| g.codes[i]).collect();
                let (codes, n_groups) = densify(&raw);
                GroupVar {
                    name: g.name.clone(),
                    codes,
                    n_groups,
                }
            })
            .collect();

        EstimationSample {
            depvar: self.depvar.clone(),
            y: pick(&self.y),
            x,
            x_names: self.x_names.clone(),
            terms,
            weights: pick(&self.weights),
            weight_var: self.weight_var.clone(),
            offset: pick(&self.offset),
            offset_label: self.offset_label.clone(),
            clusters,
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
            ledger,
        }
    }

    /// Same sample with covariate columns restricted to `keep_cols`.
    pub fn with_columns(&self, keep_cols: &[usize]) -> EstimationSample {
        let x = self.x.select_columns(keep_cols);
        EstimationSample {
            x,
            x_names: keep_cols.iter().map(|&j| self.x_names[j].clone()).collect(),
            ..self.clone()
        }
    }
}

fn numeric_column<'a>(table: &'a RawTable, name: &str) -> Result<&'a [Option<f64>], DataError> {
    table
        .column(name)
        .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?
        .numeric()
        .ok_or_else(|| DataError::NotNumeric(name.to_string()))
}

/// Builds the estimation sample: listwise deletion over used columns,
/// response/weight/exposure validation, offset construction and encoding of
/// absorbed terms and cluster variables.
///
/// When `spec.absorb` has no intercept term a `_cons` column is appended.
pub fn build_sample(table: &RawTable, spec: &SampleSpec) -> Result<EstimationSample, DataError> {
    spec.schema(table)?;
    spec.absorb.validate(table)?;
    if spec.exposure.is_some() && spec.offset.is_some() {
        return Err(DataError::ExposureAndOffset);
    }

    let y_col = numeric_column(table, &spec.depvar)?;
    let x_cols = spec
        .indepvars
        .iter()
        .map(|v| numeric_column(table, v))
        .collect::<Result<Vec<_>, _>>()?;
    let w_col = spec
        .weight
        .as_deref()
        .map(|w| numeric_column(table, w))
        .transpose()?;
    let exp_col = spec
        .exposure
        .as_deref()
        .map(|e| numeric_column(table, e))
        .transpose()?;
    let off_col = spec
        .offset
        .as_deref()
        .map(|o| numeric_column(table, o))
        .transpose()?;

    let mut used: Vec<&Column> = Vec::new();
    let mut push = |name: &str| {
        if let Some(c) = table.column(name) {
            if !used.iter().any(|u| u.name == c.name) {
                used.push(c);
            }
        }
    };
    push(&spec.depvar);
    spec.indepvars.iter().for_each(|v| push(v));
    for t in &spec.absorb.terms {
        t.columns().for_each(&mut push);
    }
    for name in [&spec.weight, &spec.exposure, &spec.offset]
        .into_iter()
        .flatten()
    {
        push(name);
    }
    spec.cluster_columns().for_each(&mut push);

    let mut reasons = vec![DropReason::None; table.n_rows];
    for (row, reason) in reasons.iter_mut().enumerate() {
        if used.iter().any(|c| c.is_missing(row)) {
            *reason = DropReason::Missing;
        }
    }
    let rows: Vec<usize> = (0..table.n_rows)
        .filter(|&r| reasons[r] == DropReason::None)
        .collect();
    if rows.is_empty() {
        return Err(DataError::NoObservations);
    }

    let finite = |name: &str, col: &[Option<f64>], row: usize| -> Result<f64, DataError> {
        let v = col[row].expect("missing rows were removed");
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DataError::NonFinite {
                column: name.to_string(),
                row,
            })
        }
    };

    let mut y = Vec::with_capacity(rows.len());
    for &r in &rows {
        let v = finite(&spec.depvar, y_col, r)?;
        if v < 0.0 {
            return Err(DataError::NegativeResponse { row: r, value: v });
        }
        y.push(v);
    }

    let weights = match (w_col, &spec.weight) {
        (Some(col), Some(name)) => rows
            .iter()
            .map(|&r| {
                let v = finite(name, col, r)?;
                if v <= 0.0 {
                    Err(DataError::NonPositiveWeight { row: r, value: v })
                } else {
                    Ok(v)
                }
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => vec![1.0; rows.len()],
    };

    let (offset, offset_label) = match (exp_col, off_col) {
        (Some(col), None) => {
            let name = spec.exposure.as_deref().unwrap();
            let offset = rows
                .iter()
                .map(|&r| {
                    let v = finite(name, col, r)?;
                    if v <= 0.0 {
                        Err(DataError::NonPositiveExposure { row: r, value: v })
                    } else {
                        Ok(v.ln())
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            (offset, Some(format!("ln({name})")))
        }
        (None, Some(col)) => {
            let name = spec.offset.as_deref().unwrap();
            let offset = rows
                .iter()
                .map(|&r| finite(name, col, r))
                .collect::<Result<Vec<_>, _>>()?;
            (offset, Some(name.to_string()))
        }
        _ => (vec![0.0; rows.len()], None),
    };

    let add_constant = !spec.absorb.has_intercept_term();
    let k = x_cols.len() + usize::from(add_constant);
    let mut x = DMatrix::<f64>::zeros(rows.len(), k);
    for (j, (col, name)) in x_cols.iter().zip(&spec.indepvars).enumerate() {
        for (i, &r) in rows.iter().enumerate() {
            x[(i, j)] = finite(name, col, r)?;
        }
    }
    let mut x_names = spec.indepvars.clone();
    if add_constant {
        x.column_mut(k - 1).fill(1.0);
        x_names.push(CONSTANT_NAME.to_string());
    }

    let terms = spec
        .absorb
        .terms
        .iter()
        .map(|t| {
            let (codes, n_groups) = encode_factors(table, &t.factors, &rows)?;
            let slope = match &t.slope_var {
                Some(v) => {
                    let col = numeric_column(table, v)?;
                    Some(
                        rows.iter()
                            .map(|&r| finite(v, col, r))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                None => None,
            };
            Ok(FactorTerm {
                label: t.label.clone(),
                factors: t.factors.clone(),
                save_as: t.save_as.clone(),
                slope_var: t.slope_var.clone(),
                codes,
                n_groups,
                slope,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    let clusters = spec
        .clusters
        .iter()
        .map(|c| {
            let parts: Vec<String> = c.split('#').map(str::to_string).collect();
            let (codes, n_groups) = encode_factors(table, &parts, &rows)?;
            Ok(GroupVar {
                name: c.clone(),
                codes,
                n_groups,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;

    Ok(EstimationSample {
        depvar: spec.depvar.clone(),
        y,
        x,
        x_names,
        terms,
        weights,
        weight_var: spec.weight.clone(),
        offset,
        offset_label,
        clusters,
        row_ids: rows,
        ledger: DropLedger { reasons },
    })
}
