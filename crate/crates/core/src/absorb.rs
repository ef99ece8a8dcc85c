//! Absorb expressions: which fixed effects are partialled out of the model.
//!
//! An expression is a whitespace-separated list of terms. Each term is one of
//!
//! - `A`: one intercept per level of `A`
//! - `A#B`: one intercept per observed `(A, B)` combination
//! - `A#c.v`: one slope on the continuous column `v` per level of `A`
//! - `new=A`: any of the above, with the estimated effect saved as `new`
//!
//! Intercept-plus-slope models are written as two terms: `A A#c.v`.

use std::collections::HashMap;

use thiserror::Error;

use crate::dataset::{ColumnData, RawTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbsorbError {
    #[error("malformed absorb term `{0}`")]
    Malformed(String),
    #[error("absorb term `{0}` has more than one continuous (c.) variable")]
    MultipleContinuous(String),
    #[error("unknown column `{0}` in absorb expression")]
    UnknownColumn(String),
    #[error("slope variable `{0}` must be numeric")]
    SlopeNotNumeric(String),
    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },
}

/// One set of absorbed fixed effects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbsorbTerm {
    pub label: String,
    pub factors: Vec<String>,
    pub slope_var: Option<String>,
    pub save_as: Option<String>,
}

impl AbsorbTerm {
    pub fn is_slope(&self) -> bool {
        self.slope_var.is_some()
    }

    /// All columns the term reads.
    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.factors
            .iter()
            .map(String::as_str)
            .chain(self.slope_var.as_deref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbsorbSpec {
    pub terms: Vec<AbsorbTerm>,
}

impl AbsorbSpec {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn has_intercept_term(&self) -> bool {
        self.terms.iter().any(|t| !t.is_slope())
    }

    /// Space-separated term labels, as they would be typed.
    pub fn labels(&self) -> String {
        self.terms
            .iter()
            .map(|t| t.label.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Like [`labels`](Self::labels) but keeping `new=` prefixes.
    pub fn labels_as_typed(&self) -> String {
        self.terms
            .iter()
            .map(|t| match &t.save_as {
                Some(s) => format!("{s}={}", t.label),
                None => t.label.clone(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that every referenced column exists and slope variables are numeric.
    pub fn validate(&self, table: &RawTable) -> Result<(), AbsorbError> {
        for term in &self.terms {
            for name in term.columns() {
                if table.column(name).is_none() {
                    return Err(AbsorbError::UnknownColumn(name.to_string()));
                }
            }
            if let Some(v) = &term.slope_var {
                if !matches!(table.column(v).map(|c| &c.data), Some(ColumnData::Numeric(_))) {
                    return Err(AbsorbError::SlopeNotNumeric(v.clone()));
                }
            }
        }
        Ok(())
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

fn parse_term(token: &str) -> Result<AbsorbTerm, AbsorbError> {
    let malformed = || AbsorbError::Malformed(token.to_string());
    let (save_as, body) = match token.split_once('=') {
        Some((lhs, rhs)) => {
            if !is_identifier(lhs) {
                return Err(malformed());
            }
            (Some(lhs.to_string()), rhs)
        }
        None => (None, token),
    };

    let mut factors = Vec::new();
    let mut slope_var: Option<String> = None;
    for part in body.split('#') {
        if let Some(v) = part.strip_prefix("c.") {
            if !is_identifier(v) {
                return Err(malformed());
            }
            if slope_var.is_some() {
                return Err(AbsorbError::MultipleContinuous(token.to_string()));
            }
            slope_var = Some(v.to_string());
        } else {
            let name = part.strip_prefix("i.").unwrap_or(part);
            if !is_identifier(name) {
                return Err(malformed());
            }
            factors.push(name.to_string());
        }
    }
    if factors.is_empty() {
        return Err(malformed());
    }

    let label = factors
        .iter()
        .cloned()
        .chain(slope_var.iter().map(|v| format!("c.{v}")))
        .collect::<Vec<_>>()
        .join("#");

    Ok(AbsorbTerm {
        label,
        factors,
        slope_var,
        save_as,
    })
}

/// Parses an absorb expression. Column existence is checked separately by
/// [`AbsorbSpec::validate`].
pub fn parse_absorb(text: &str) -> Result<AbsorbSpec, AbsorbError> {
    let terms = text
        .split_whitespace()
        .map(parse_term)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AbsorbSpec { terms })
}

/// Parses and validates against a loaded table.
pub fn parse_absorb_for(text: &str, table: &RawTable) -> Result<AbsorbSpec, AbsorbError> {
    let spec = parse_absorb(text)?;
    spec.validate(table)?;
    Ok(spec)
}

/// Hashable per-row level key for one column.
fn level_key(data: &ColumnData, row: usize) -> Option<u64> {
    match data {
        ColumnData::Numeric(v) => v[row].map(|x| {
            // -0.0 and 0.0 are the same level
            if x == 0.0 {
                0u64
            } else {
                x.to_bits()
            }
        }),
        ColumnData::Categorical { codes, .. } => codes[row].map(u64::from),
    }
}

/// Dense codes for the observed combinations of `factors` over `rows`, in
/// order of first appearance. Returns the codes and the number of groups.
pub fn encode_factors(
    table: &RawTable,
    factors: &[String],
    rows: &[usize],
) -> Result<(Vec<u32>, usize), AbsorbError> {
    let cols = factors
        .iter()
        .map(|f| {
            table
                .column(f)
                .map(|c| (f, &c.data))
                .ok_or_else(|| AbsorbError::UnknownColumn(f.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
    let mut codes = Vec::with_capacity(rows.len());
    let mut key = Vec::with_capacity(cols.len());
    for &row in rows {
        key.clear();
        for (name, data) in &cols {
            let k = level_key(data, row).ok_or_else(|| AbsorbError::MissingValue {
                column: (*name).clone(),
                row,
            })?;
            key.push(k);
        }
        let next = index.len() as u32;
        let code = *index.entry(key.clone()).or_insert(next);
        codes.push(code);
    }
    Ok((codes, index.len()))
}

/// Encodes one absorb term over `rows`: dense group codes plus G.
pub fn encode_term(
    term: &AbsorbTerm,
    table: &RawTable,
    rows: &[usize],
) -> Result<(Vec<u32>, usize), AbsorbError> {
    encode_factors(table, &term.factors, rows)
}

/// Re-densifies existing codes (first-appearance order). Idempotent.
pub fn densify(codes: &[u32]) -> (Vec<u32>, usize) {
    let mut map: HashMap<u32, u32> = HashMap::new();
    let out = codes
        .iter()
        .map(|&c| {
            let next = map.len() as u32;
            *map.entry(c).or_insert(next)
        })
        .collect();
    (out, map.len())
}
