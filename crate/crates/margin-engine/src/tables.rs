//! Columnar data model, CSV ingestion, summary statistics, and counterfactual
//! scenario overlays.
//!
//! A [`Table`] owns typed columns; a [`ScenarioOverlay`] presents the same rows
//! with selected columns replaced by a single scalar, at O(1) memory cost per
//! override regardless of the number of rows.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The declared kind of a column, used both for storage and for schema hints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Integer,
    Boolean,
    Categorical,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Integer => "integer",
            ColumnKind::Boolean => "boolean",
            ColumnKind::Categorical => "categorical",
        };
        f.write_str(s)
    }
}

/// A typed column of data.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Integer(Vec<i64>),
    Boolean(Vec<bool>),
    /// Level indices per row plus the ordered level-name table.
    Categorical { codes: Vec<u32>, levels: Vec<String> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Integer(v) => v.len(),
            Column::Boolean(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Column::Numeric(_) => ColumnKind::Numeric,
            Column::Integer(_) => ColumnKind::Integer,
            Column::Boolean(_) => ColumnKind::Boolean,
            Column::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    /// Level names for categorical columns; booleans expose `[false, true]`.
    pub fn levels(&self) -> Option<Vec<String>> {
        match self {
            Column::Categorical { levels, .. } => Some(levels.clone()),
            Column::Boolean(_) => Some(vec!["false".to_string(), "true".to_string()]),
            _ => None,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if let Column::Categorical { codes, levels } = self {
            let mut seen = HashMap::new();
            for (i, l) in levels.iter().enumerate() {
                if seen.insert(l.clone(), i).is_some() {
                    return Err(Error::Table(format!(
                        "column '{name}': duplicate level '{l}'"
                    )));
                }
            }
            for (row, &c) in codes.iter().enumerate() {
                if c as usize >= levels.len() {
                    return Err(Error::Table(format!(
                        "column '{name}': level index {c} out of range at row {row}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An immutable columnar dataset with uniform row count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    columns: IndexMap<String, Column>,
    nrows: usize,
}

impl Table {
    pub fn new(columns: Vec<(String, Column)>) -> Result<Self> {
        let mut map = IndexMap::new();
        let mut nrows = None;
        for (name, col) in columns {
            if name.is_empty() {
                return Err(Error::Table("empty column name".into()));
            }
            col.validate(&name)?;
            match nrows {
                None => nrows = Some(col.len()),
                Some(n) if n != col.len() => {
                    return Err(Error::Table(format!(
                        "column '{}' has {} entries, expected {}",
                        name,
                        col.len(),
                        n
                    )))
                }
                _ => {}
            }
            if map.insert(name.clone(), col).is_some() {
                return Err(Error::Table(format!("duplicate column name '{name}'")));
            }
        }
        Ok(Table {
            columns: map,
            nrows: nrows.unwrap_or(0),
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(|s| s.as_str())
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Table(format!("unknown column '{name}'")))
    }

    pub fn column_at(&self, idx: usize) -> (&str, &Column) {
        let (name, col) = self.columns.get_index(idx).expect("column index in range");
        (name.as_str(), col)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .get_index_of(name)
            .ok_or_else(|| Error::Table(format!("unknown column '{name}'")))
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    /// Numeric view of a numeric or integer column value.
    pub fn numeric_at(&self, name: &str, row: usize) -> Result<f64> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v[row]),
            Column::Integer(v) => Ok(v[row] as f64),
            c => Err(Error::Table(format!(
                "column '{}' is {}, expected numeric",
                name,
                c.kind()
            ))),
        }
    }
}

/// A single scalar override value for a scenario overlay.
#[derive(Debug, Clone, PartialEq)]
pub enum OverrideValue {
    Numeric(f64),
    Integer(i64),
    Boolean(bool),
    /// Resolved level index into the base column's level table.
    Level(u32),
}

/// Raw (unresolved) override as supplied by callers.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarValue {
    Number(f64),
    Bool(bool),
    Level(String),
}

/// A counterfactual view over a base table: overridden columns read a fixed
/// scalar at every row, all other reads fall through to the base.
///
/// Memory cost is one scalar per overridden column, independent of row count.
#[derive(Debug, Clone)]
pub struct ScenarioOverlay<'a> {
    base: &'a Table,
    overrides: Vec<(usize, OverrideValue)>,
}

impl<'a> ScenarioOverlay<'a> {
    pub fn base(&self) -> &'a Table {
        self.base
    }

    pub fn override_for(&self, col: usize) -> Option<&OverrideValue> {
        self.overrides
            .iter()
            .find(|(c, _)| *c == col)
            .map(|(_, v)| v)
    }

    pub fn overrides(&self) -> &[(usize, OverrideValue)] {
        &self.overrides
    }

    /// Bytes of bookkeeping held by this overlay beyond the base reference.
    pub fn overhead_bytes(&self) -> usize {
        self.overrides.capacity() * std::mem::size_of::<(usize, OverrideValue)>()
    }
}

/// Build a scenario overlay, validating override names and types against the base.
pub fn create_scenario<'a>(
    table: &'a Table,
    overrides: &[(String, ScalarValue)],
) -> Result<ScenarioOverlay<'a>> {
    let mut resolved = Vec::with_capacity(overrides.len());
    for (name, value) in overrides {
        let idx = table.column_index(name)?;
        let (_, col) = table.column_at(idx);
        let ov = match (col, value) {
            (Column::Numeric(_), ScalarValue::Number(x)) => OverrideValue::Numeric(*x),
            (Column::Integer(_), ScalarValue::Number(x)) => {
                if x.fract() != 0.0 {
                    return Err(Error::Table(format!(
                        "override for integer column '{name}' must be a whole number, got {x}"
                    )));
                }
                OverrideValue::Integer(*x as i64)
            }
            (Column::Boolean(_), ScalarValue::Bool(b)) => OverrideValue::Boolean(*b),
            (Column::Boolean(_), ScalarValue::Level(l)) => match l.as_str() {
                "true" | "1" => OverrideValue::Boolean(true),
                "false" | "0" => OverrideValue::Boolean(false),
                other => {
                    return Err(Error::Table(format!(
                        "boolean override for '{name}' must be true/false, got '{other}'"
                    )))
                }
            },
            (Column::Boolean(_), ScalarValue::Number(x)) if *x == 0.0 || *x == 1.0 => {
                OverrideValue::Boolean(*x == 1.0)
            }
            (Column::Categorical { levels, .. }, ScalarValue::Level(l)) => {
                let code = levels.iter().position(|lv| lv == l).ok_or_else(|| {
                    Error::Table(format!(
                        "level '{}' not found in column '{}' (levels: {})",
                        l,
                        name,
                        levels.join(", ")
                    ))
                })?;
                OverrideValue::Level(code as u32)
            }
            (col, _) => {
                return Err(Error::Table(format!(
                    "override for column '{}' does not match its {} variant",
                    name,
                    col.kind()
                )))
            }
        };
        resolved.push((idx, ov));
    }
    Ok(ScenarioOverlay {
        base: table,
        overrides: resolved,
    })
}

/// Summary statistics for a numeric or integer column.
#[derive(Debug, Clone)]
pub struct ColumnStats {
    sorted: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator).
    pub sd: f64,
}

impl ColumnStats {
    /// Quantile by linear interpolation between order statistics.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Table(format!("quantile {q} outside [0, 1]")));
        }
        let n = self.sorted.len();
        let h = (n as f64 - 1.0) * q;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        let frac = h - lo as f64;
        Ok(self.sorted[lo] + frac * (self.sorted[hi] - self.sorted[lo]))
    }
}

/// Mean, sample SD, and quantile function for a numeric or integer column.
pub fn column_stats(table: &Table, name: &str) -> Result<ColumnStats> {
    let values: Vec<f64> = match table.column(name)? {
        Column::Numeric(v) => v.clone(),
        Column::Integer(v) => v.iter().map(|&x| x as f64).collect(),
        c => {
            return Err(Error::Table(format!(
                "column '{}' is {}, expected numeric or integer",
                name,
                c.kind()
            )))
        }
    };
    if values.is_empty() {
        return Err(Error::Table(format!("column '{name}' is empty")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut sorted = values;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in column"));
    Ok(ColumnStats { sorted, mean, sd })
}

/// Read a CSV file (RFC-4180 style, header required) into a typed table.
///
/// Types come from `schema_hints` when given, otherwise: all values parseable
/// as floats makes the column numeric; anything else is categorical with
/// levels in first-appearance order. Missing values are rejected.
pub fn read_csv(path: &Path, schema_hints: Option<&HashMap<String, ColumnKind>>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Table(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Table(format!("cannot read header: {e}")))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Table("empty file".into()));
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::CsvParse {
            row: i + 2,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::CsvParse {
                row: i + 2,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::CsvParse {
                    row: i + 2,
                    message: format!("missing value in column '{}'", headers[j]),
                });
            }
            cells[j].push(field.to_string());
        }
    }
    let mut columns = Vec::with_capacity(headers.len());
    for (name, raw) in headers.into_iter().zip(cells) {
        let hint = schema_hints.and_then(|h| h.get(&name)).copied();
        let col = build_column(&name, &raw, hint)?;
        columns.push((name, col));
    }
    Table::new(columns)
}

fn build_column(name: &str, raw: &[String], hint: Option<ColumnKind>) -> Result<Column> {
    match hint {
        Some(ColumnKind::Numeric) => {
            let mut out = Vec::with_capacity(raw.len());
            for (i, s) in raw.iter().enumerate() {
                let v: f64 = s.parse().map_err(|_| Error::CsvParse {
                    row: i + 2,
                    message: format!("cannot parse '{s}' as numeric in column '{name}'"),
                })?;
                out.push(v);
            }
            Ok(Column::Numeric(out))
        }
        Some(ColumnKind::Integer) => {
            let mut out = Vec::with_capacity(raw.len());
            for (i, s) in raw.iter().enumerate() {
                let v: i64 = s.parse().map_err(|_| Error::CsvParse {
                    row: i + 2,
                    message: format!("cannot parse '{s}' as integer in column '{name}'"),
                })?;
                out.push(v);
            }
            Ok(Column::Integer(out))
        }
        Some(ColumnKind::Boolean) => {
            let mut out = Vec::with_capacity(raw.len());
            for (i, s) in raw.iter().enumerate() {
                let v = match s.as_str() {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    other => {
                        return Err(Error::CsvParse {
                            row: i + 2,
                            message: format!(
                                "cannot parse '{other}' as boolean in column '{name}'"
                            ),
                        })
                    }
                };
                out.push(v);
            }
            Ok(Column::Boolean(out))
        }
        Some(ColumnKind::Categorical) => Ok(categorical_from(raw)),
        None => {
            let all_float = raw.iter().all(|s| s.parse::<f64>().is_ok());
            if all_float && !raw.is_empty() {
                Ok(Column::Numeric(
                    raw.iter().map(|s| s.parse().unwrap()).collect(),
                ))
            } else {
                Ok(categorical_from(raw))
            }
        }
    }
}

fn categorical_from(raw: &[String]) -> Column {
    let mut levels: Vec<String> = Vec::new();
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut codes = Vec::with_capacity(raw.len());
    for s in raw {
        if let Some(&c) = index.get(s) {
            codes.push(c);
        } else {
            let c = levels.len() as u32;
            levels.push(s.clone());
            index.insert(s.clone(), c);
            codes.push(c);
        }
    }
    Column::Categorical { codes, levels }
}

/// Write a table as CSV. Round-trips through [`read_csv`] (with matching
/// hints for integer/boolean columns) to an identical table.
pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Table(format!("cannot create {}: {e}", path.display())))?;
    let names: Vec<&str> = table.column_names().collect();
    writer
        .write_record(&names)
        .map_err(|e| Error::Table(e.to_string()))?;
    for row in 0..table.nrows() {
        let mut record = Vec::with_capacity(names.len());
        for i in 0..table.ncols() {
            let (_, col) = table.column_at(i);
            let cell = match col {
                Column::Numeric(v) => format_float(v[row]),
                Column::Integer(v) => v[row].to_string(),
                Column::Boolean(v) => v[row].to_string(),
                Column::Categorical { codes, levels } => levels[codes[row] as usize].clone(),
            };
            record.push(cell);
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Table(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

fn format_float(x: f64) -> String {
    // shortest representation that parses back exactly
    let mut s = format!("{x}");
    if s.parse::<f64>() != Ok(x) {
        s = format!("{x:e}");
    }
    s
}

/// Load a schema-hint file: JSON object mapping column name to kind.
pub fn read_schema_hints(path: &Path) -> Result<HashMap<String, ColumnKind>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_table(content: &str, hints: Option<&HashMap<String, ColumnKind>>) -> Result<Table> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        read_csv(f.path(), hints)
    }

    #[test]
    fn read_numeric_column() {
        let t = csv_table("x\n1.5\n2.5\n", None).unwrap();
        assert_eq!(t.nrows(), 2);
        assert_eq!(
            t.column("x").unwrap(),
            &Column::Numeric(vec![1.5, 2.5])
        );
    }

    #[test]
    fn read_categorical_first_appearance() {
        let t = csv_table("g\nA\nB\nA\n", None).unwrap();
        match t.column("g").unwrap() {
            Column::Categorical { codes, levels } => {
                assert_eq!(levels, &["A", "B"]);
                assert_eq!(codes, &[0, 1, 0]);
            }
            other => panic!("expected categorical, got {other:?}"),
        }
    }

    #[test]
    fn numeric_hint_parse_error_carries_row() {
        let mut hints = HashMap::new();
        hints.insert("x".to_string(), ColumnKind::Numeric);
        let err = csv_table("x\n1\noops\n", Some(&hints)).unwrap_err();
        match err {
            Error::CsvParse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = csv_table("x,y\n1,2\n3\n", None).unwrap_err();
        assert!(matches!(err, Error::CsvParse { .. }));
    }

    #[test]
    fn missing_values_rejected() {
        let err = csv_table("x,y\n1,2\n3,\n", None).unwrap_err();
        assert!(matches!(err, Error::CsvParse { row: 3, .. }));
    }

    #[test]
    fn boolean_hint() {
        let mut hints = HashMap::new();
        hints.insert("b".to_string(), ColumnKind::Boolean);
        let t = csv_table("b\ntrue\n0\n1\nfalse\n", Some(&hints)).unwrap();
        assert_eq!(
            t.column("b").unwrap(),
            &Column::Boolean(vec![true, false, true, false])
        );
    }

    #[test]
    fn stats_basics() {
        let t = Table::new(vec![(
            "x".into(),
            Column::Numeric(vec![1.0, 2.0, 3.0]),
        )])
        .unwrap();
        let s = column_stats(&t, "x").unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.sd, 1.0);
    }

    #[test]
    fn stats_constant_column() {
        let t = Table::new(vec![(
            "x".into(),
            Column::Numeric(vec![5.0, 5.0, 5.0, 5.0]),
        )])
        .unwrap();
        assert_eq!(column_stats(&t, "x").unwrap().sd, 0.0);
    }

    #[test]
    fn stats_quantile_interpolates() {
        // frozen from an independent sort-and-interpolate check:
        // h = (4-1)*0.5 = 1.5 between 2 and 3 -> 2.5
        let t = Table::new(vec![(
            "x".into(),
            Column::Numeric(vec![4.0, 1.0, 3.0, 2.0]),
        )])
        .unwrap();
        let s = column_stats(&t, "x").unwrap();
        assert_eq!(s.quantile(0.5).unwrap(), 2.5);
        assert_eq!(s.quantile(0.0).unwrap(), 1.0);
        assert_eq!(s.quantile(1.0).unwrap(), 4.0);
    }

    #[test]
    fn stats_rejects_categorical() {
        let t = csv_table("g\nA\nB\n", None).unwrap();
        assert!(column_stats(&t, "g").is_err());
    }

    #[test]
    fn scenario_numeric_override() {
        let t = csv_table("x1,x2\n0.1,9\n0.2,8\n", None).unwrap();
        let ov = create_scenario(&t, &[("x1".into(), ScalarValue::Number(1.0))]).unwrap();
        let idx = t.column_index("x1").unwrap();
        assert_eq!(ov.override_for(idx), Some(&OverrideValue::Numeric(1.0)));
        assert_eq!(ov.override_for(t.column_index("x2").unwrap()), None);
    }

    #[test]
    fn scenario_categorical_override() {
        let t = csv_table("group\nA\nB\nC\n", None).unwrap();
        let ov = create_scenario(&t, &[("group".into(), ScalarValue::Level("B".into()))]).unwrap();
        assert_eq!(
            ov.override_for(t.column_index("group").unwrap()),
            Some(&OverrideValue::Level(1))
        );
    }

    #[test]
    fn scenario_rejects_unknown_column_and_bad_level() {
        let t = csv_table("group\nA\nB\n", None).unwrap();
        assert!(create_scenario(&t, &[("nope".into(), ScalarValue::Number(1.0))]).is_err());
        assert!(create_scenario(&t, &[("group".into(), ScalarValue::Level("Z".into()))]).is_err());
        assert!(create_scenario(&t, &[("group".into(), ScalarValue::Number(1.0))]).is_err());
    }

    #[test]
    fn overlay_overhead_independent_of_n() {
        let small = Table::new(vec![("x".into(), Column::Numeric(vec![0.0; 8]))]).unwrap();
        let large = Table::new(vec![("x".into(), Column::Numeric(vec![0.0; 80_000]))]).unwrap();
        let ov_small = create_scenario(&small, &[("x".into(), ScalarValue::Number(1.0))]).unwrap();
        let ov_large = create_scenario(&large, &[("x".into(), ScalarValue::Number(1.0))]).unwrap();
        assert_eq!(ov_small.overhead_bytes(), ov_large.overhead_bytes());
    }

    #[test]
    fn csv_round_trip() {
        let content = "x,n,b,g\n1.5,3,true,A\n-2.25,4,false,B\n0.5,5,true,A\n";
        let mut hints = HashMap::new();
        hints.insert("n".to_string(), ColumnKind::Integer);
        hints.insert("b".to_string(), ColumnKind::Boolean);
        let t = csv_table(content, Some(&hints)).unwrap();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        write_csv(&t, tmp.path()).unwrap();
        let t2 = read_csv(tmp.path(), Some(&hints)).unwrap();
        assert_eq!(t, t2);
    }
}
