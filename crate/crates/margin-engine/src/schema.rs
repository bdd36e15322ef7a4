//! Resolution of a normalized formula AST against a table: variables are
//! bound to column variants, categorical terms get contrast matrices, and
//! the total model width `p` is computed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{Expr, FormulaAst, Func, Term};
use crate::tables::{Column, ColumnKind, Table};

/// Contrast coding scheme for categorical columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastScheme {
    /// Treatment/dummy coding (the default): base level row is all zeros.
    #[default]
    Dummy,
    /// Effects coding: base level row is all -1.
    Effects,
    /// Helmert coding.
    Helmert,
}

/// A contrast request for one column.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContrastSpec {
    #[serde(default)]
    pub scheme: ContrastScheme,
    /// Base level name; defaults to the first level.
    #[serde(default)]
    pub base: Option<String>,
}

/// A materialized contrast matrix: `nrows` levels by `ncols` contrast columns,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
    /// Level names, one per row.
    pub levels: Vec<String>,
    /// Index of the base level.
    pub base: usize,
    /// Human-readable label per contrast column (e.g. "B - A").
    pub labels: Vec<String>,
}

impl ContrastMatrix {
    #[inline]
    pub fn row(&self, level: usize) -> &[f64] {
        &self.data[level * self.ncols..(level + 1) * self.ncols]
    }
}

/// Build a contrast matrix for the given scheme and level set.
///
/// Dummy coding yields L x (L-1) with the base row all zeros; effects coding
/// replaces the base row with -1s; Helmert uses the conventional Helmert
/// columns. `full_rank` requests the L x L identity expansion used for the
/// first categorical main effect when the intercept is suppressed.
pub fn contrast_matrix(
    spec: &ContrastSpec,
    levels: &[String],
    full_rank: bool,
) -> Result<ContrastMatrix> {
    let nlv = levels.len();
    if nlv < 2 {
        return Err(Error::Schema(format!(
            "categorical column needs at least 2 levels, found {nlv}"
        )));
    }
    let base = match &spec.base {
        Some(b) => levels
            .iter()
            .position(|l| l == b)
            .ok_or_else(|| Error::Schema(format!("base level '{b}' not in level table")))?,
        None => 0,
    };
    if full_rank {
        let mut data = vec![0.0; nlv * nlv];
        for i in 0..nlv {
            data[i * nlv + i] = 1.0;
        }
        return Ok(ContrastMatrix {
            nrows: nlv,
            ncols: nlv,
            data,
            levels: levels.to_vec(),
            base,
            labels: levels.to_vec(),
        });
    }
    let ncols = nlv - 1;
    let mut data = vec![0.0; nlv * ncols];
    let non_base: Vec<usize> = (0..nlv).filter(|&i| i != base).collect();
    let mut labels = Vec::with_capacity(ncols);
    match spec.scheme {
        ContrastScheme::Dummy => {
            for (j, &lvl) in non_base.iter().enumerate() {
                data[lvl * ncols + j] = 1.0;
                labels.push(format!("{} - {}", levels[lvl], levels[base]));
            }
        }
        ContrastScheme::Effects => {
            for (j, &lvl) in non_base.iter().enumerate() {
                data[lvl * ncols + j] = 1.0;
                data[base * ncols + j] = -1.0;
                labels.push(format!("{} - {}", levels[lvl], levels[base]));
            }
        }
        ContrastScheme::Helmert => {
            // column j contrasts level j+1 against the mean of levels 0..=j
            for j in 0..ncols {
                for i in 0..=j {
                    data[i * ncols + j] = -1.0;
                }
                data[(j + 1) * ncols + j] = (j + 1) as f64;
                labels.push(format!("helmert{}", j + 1));
            }
        }
    }
    Ok(ContrastMatrix {
        nrows: nlv,
        ncols,
        data,
        levels: levels.to_vec(),
        base,
        labels,
    })
}

/// Arithmetic expression with variables bound to column indices.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedExpr {
    Column(usize),
    Const(f64),
    Call(Func, Box<ResolvedExpr>),
    Binary(crate::formula::BinOp, Box<ResolvedExpr>, Box<ResolvedExpr>),
}

/// A formula term bound to table columns, with its output width.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedTerm {
    Intercept,
    Continuous { col: usize },
    Categorical { col: usize, contrast: ContrastMatrix },
    Function { func: Func, arg: ResolvedExpr },
    Interaction { parts: Vec<ResolvedTerm> },
}

impl ResolvedTerm {
    pub fn width(&self) -> usize {
        match self {
            ResolvedTerm::Intercept | ResolvedTerm::Continuous { .. } => 1,
            ResolvedTerm::Function { .. } => 1,
            ResolvedTerm::Categorical { contrast, .. } => contrast.ncols,
            ResolvedTerm::Interaction { parts } => parts.iter().map(|p| p.width()).product(),
        }
    }
}

/// The fully resolved model: ordered terms, total width, and column metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedFormula {
    pub response: Option<String>,
    pub terms: Vec<ResolvedTerm>,
    /// Source term text per resolved term, for diagnostics and labels.
    pub term_labels: Vec<String>,
    pub width: usize,
    /// Column names referenced, indexed by the `col` ids used in terms.
    pub columns: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
}

impl ResolvedFormula {
    pub fn column_id(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Continuous model covariates (numeric/integer variables appearing anywhere).
    pub fn continuous_variables(&self) -> Vec<String> {
        self.columns
            .iter()
            .zip(&self.column_kinds)
            .filter(|(_, k)| matches!(k, ColumnKind::Numeric | ColumnKind::Integer))
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// One label per design-matrix column, e.g. `(Intercept)`, `x`,
    /// `group[B - A]`, `x:group[B - A]`. Interaction labels follow the
    /// column order (first component varying fastest).
    pub fn column_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width);
        for term in &self.terms {
            out.extend(self.term_column_labels(term));
        }
        out
    }

    fn term_column_labels(&self, term: &ResolvedTerm) -> Vec<String> {
        match term {
            ResolvedTerm::Intercept => vec!["(Intercept)".to_string()],
            ResolvedTerm::Continuous { col } => vec![self.columns[*col].clone()],
            ResolvedTerm::Function { func, arg } => {
                vec![format!("{}({})", func.name(), self.expr_label(arg))]
            }
            ResolvedTerm::Categorical { col, contrast } => contrast
                .labels
                .iter()
                .map(|l| format!("{}[{}]", self.columns[*col], l))
                .collect(),
            ResolvedTerm::Interaction { parts } => {
                let mut acc = vec![String::new()];
                for part in parts {
                    let labels = self.term_column_labels(part);
                    let mut next = Vec::with_capacity(acc.len() * labels.len());
                    for l in &labels {
                        for a in &acc {
                            if a.is_empty() {
                                next.push(l.clone());
                            } else {
                                next.push(format!("{a}:{l}"));
                            }
                        }
                    }
                    acc = next;
                }
                acc
            }
        }
    }

    fn expr_label(&self, expr: &ResolvedExpr) -> String {
        match expr {
            ResolvedExpr::Column(id) => self.columns[*id].clone(),
            ResolvedExpr::Const(c) => format!("{c}"),
            ResolvedExpr::Call(f, a) => format!("{}({})", f.name(), self.expr_label(a)),
            ResolvedExpr::Binary(op, a, b) => format!(
                "{} {} {}",
                self.expr_label(a),
                op.symbol(),
                self.expr_label(b)
            ),
        }
    }

    /// Categorical and boolean covariates.
    pub fn categorical_variables(&self) -> Vec<String> {
        self.columns
            .iter()
            .zip(&self.column_kinds)
            .filter(|(_, k)| matches!(k, ColumnKind::Categorical | ColumnKind::Boolean))
            .map(|(c, _)| c.clone())
            .collect()
    }
}

struct Resolver<'a> {
    table: &'a Table,
    contrasts: &'a HashMap<String, ContrastSpec>,
    columns: Vec<String>,
    column_kinds: Vec<ColumnKind>,
}

impl<'a> Resolver<'a> {
    fn column_id(&mut self, name: &str) -> Result<usize> {
        if let Some(i) = self.columns.iter().position(|c| c == name) {
            return Ok(i);
        }
        let col = self
            .table
            .column(name)
            .map_err(|_| Error::Schema(format!("unknown variable '{name}'")))?;
        self.columns.push(name.to_string());
        self.column_kinds.push(col.kind());
        Ok(self.columns.len() - 1)
    }

    fn boolean_levels() -> Vec<String> {
        vec!["false".to_string(), "true".to_string()]
    }

    fn resolve_term(&mut self, term: &Term, full_rank_slot: &mut bool) -> Result<ResolvedTerm> {
        match term {
            Term::Variable(name) => {
                let id = self.column_id(name)?;
                match self.table.column(name)? {
                    Column::Numeric(_) | Column::Integer(_) => {
                        Ok(ResolvedTerm::Continuous { col: id })
                    }
                    Column::Boolean(_) => {
                        let spec = self.contrasts.get(name).cloned().unwrap_or_default();
                        let full = std::mem::take(full_rank_slot);
                        let contrast = contrast_matrix(&spec, &Self::boolean_levels(), full)?;
                        Ok(ResolvedTerm::Categorical { col: id, contrast })
                    }
                    Column::Categorical { levels, .. } => {
                        let spec = self.contrasts.get(name).cloned().unwrap_or_default();
                        let full = std::mem::take(full_rank_slot);
                        let contrast = contrast_matrix(&spec, levels, full)?;
                        Ok(ResolvedTerm::Categorical { col: id, contrast })
                    }
                }
            }
            Term::Call(func, arg) => {
                let resolved = self.resolve_expr(arg)?;
                Ok(ResolvedTerm::Function {
                    func: *func,
                    arg: resolved,
                })
            }
            Term::Interaction(parts) => {
                let mut resolved = Vec::with_capacity(parts.len());
                for p in parts {
                    // full-rank expansion applies only to main effects
                    let mut no_full = false;
                    resolved.push(self.resolve_term(p, &mut no_full)?);
                }
                Ok(ResolvedTerm::Interaction { parts: resolved })
            }
            other => Err(Error::Schema(format!(
                "formula must be normalized before resolution (found {other})"
            ))),
        }
    }

    fn resolve_expr(&mut self, expr: &Expr) -> Result<ResolvedExpr> {
        match expr {
            Expr::Var(name) => {
                let id = self.column_id(name)?;
                match self.column_kinds[id] {
                    ColumnKind::Numeric | ColumnKind::Integer => Ok(ResolvedExpr::Column(id)),
                    kind => Err(Error::Schema(format!(
                        "{kind} variable '{name}' cannot appear inside a function argument"
                    ))),
                }
            }
            Expr::Const(c) => Ok(ResolvedExpr::Const(*c)),
            Expr::Call(f, a) => Ok(ResolvedExpr::Call(*f, Box::new(self.resolve_expr(a)?))),
            Expr::Binary(op, a, b) => Ok(ResolvedExpr::Binary(
                *op,
                Box::new(self.resolve_expr(a)?),
                Box::new(self.resolve_expr(b)?),
            )),
        }
    }
}

/// Resolve a normalized AST against a table.
///
/// Boolean columns resolve as two-level categoricals. When the intercept is
/// suppressed, the first categorical main effect expands to full rank.
pub fn resolve(
    ast: &FormulaAst,
    table: &Table,
    contrasts: &HashMap<String, ContrastSpec>,
) -> Result<ResolvedFormula> {
    let ast = crate::formula::normalize(ast);
    if ast
        .terms
        .iter()
        .any(|t| matches!(t, Term::RandomEffect { .. }))
    {
        return Err(Error::Schema(
            "random-effect terms must be stripped before resolution".into(),
        ));
    }
    let mut resolver = Resolver {
        table,
        contrasts,
        columns: Vec::new(),
        column_kinds: Vec::new(),
    };
    let mut terms = Vec::new();
    let mut labels = Vec::new();
    if ast.intercept {
        terms.push(ResolvedTerm::Intercept);
        labels.push("1".to_string());
    }
    // when the intercept is absent, the first categorical main effect
    // expands to L columns to preserve rank
    let mut full_rank_slot = !ast.intercept;
    for t in &ast.terms {
        let rt = resolver.resolve_term(t, &mut full_rank_slot)?;
        labels.push(t.to_string());
        terms.push(rt);
    }
    let width = terms.iter().map(|t| t.width()).sum();
    Ok(ResolvedFormula {
        response: Some(ast.response.clone()),
        terms,
        term_labels: labels,
        width,
        columns: resolver.columns,
        column_kinds: resolver.column_kinds,
    })
}

/// A weighted combination of categorical levels used as a profile value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMixture {
    pub levels: Vec<String>,
    pub weights: Vec<f64>,
}

impl CategoricalMixture {
    pub fn new(levels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if levels.len() != weights.len() {
            return Err(Error::Schema(
                "mixture levels and weights must have equal length".into(),
            ));
        }
        if levels.is_empty() {
            return Err(Error::Schema("mixture must have at least one level".into()));
        }
        for (i, l) in levels.iter().enumerate() {
            if levels[..i].contains(l) {
                return Err(Error::Schema(format!("duplicate mixture level '{l}'")));
            }
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Schema("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Schema(format!(
                "mixture weights must sum to 1 (got {total})"
            )));
        }
        Ok(CategoricalMixture { levels, weights })
    }

    /// Validate the mixture's levels against a column's level table.
    pub fn validate_against(&self, column: &Column, name: &str) -> Result<()> {
        let levels = column.levels().ok_or_else(|| {
            Error::Schema(format!("mixture target '{name}' is not categorical or boolean"))
        })?;
        for l in &self.levels {
            if !levels.contains(l) {
                return Err(Error::Schema(format!(
                    "mixture level '{l}' not present in column '{name}'"
                )));
            }
        }
        Ok(())
    }
}

/// Frequency-weighted mixture of a categorical or boolean column's observed levels.
pub fn default_mixture(table: &Table, column: &str) -> Result<CategoricalMixture> {
    if table.nrows() == 0 {
        return Err(Error::Schema("empty table has no level frequencies".into()));
    }
    let n = table.nrows() as f64;
    match table.column(column)? {
        Column::Categorical { codes, levels } => {
            let mut counts = vec![0usize; levels.len()];
            for &c in codes {
                counts[c as usize] += 1;
            }
            // only observed levels participate, keeping weights normalized
            let mut lv = Vec::new();
            let mut wt = Vec::new();
            for (i, &c) in counts.iter().enumerate() {
                if c > 0 {
                    lv.push(levels[i].clone());
                    wt.push(c as f64 / n);
                }
            }
            CategoricalMixture::new(lv, wt)
        }
        Column::Boolean(values) => {
            let ones = values.iter().filter(|&&b| b).count() as f64;
            CategoricalMixture::new(
                vec!["false".to_string(), "true".to_string()],
                vec![(n - ones) / n, ones / n],
            )
        }
        c => Err(Error::Schema(format!(
            "column '{}' is {}, expected categorical or boolean",
            column,
            c.kind()
        ))),
    }
}

/// Load a contrast-spec file: JSON `{"group": {"scheme":"dummy","base":"A"}}`.
pub fn read_contrast_specs(path: &std::path::Path) -> Result<HashMap<String, ContrastSpec>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;
    use crate::tables::Column;

    fn table() -> Table {
        Table::new(vec![
            ("y".into(), Column::Numeric(vec![1.0, 2.0, 3.0, 4.0, 5.0])),
            ("x".into(), Column::Numeric(vec![0.1, 0.2, 0.3, 0.4, 0.5])),
            ("z".into(), Column::Numeric(vec![1.0, 1.5, 2.0, 2.5, 3.0])),
            (
                "group".into(),
                Column::Categorical {
                    codes: vec![0, 1, 2, 0, 1],
                    levels: vec!["A".into(), "B".into(), "C".into()],
                },
            ),
            (
                "b".into(),
                Column::Boolean(vec![true, true, false, true, false]),
            ),
        ])
        .unwrap()
    }

    fn resolve_text(text: &str) -> ResolvedFormula {
        let ast = parse_formula(text).unwrap();
        resolve(&ast, &table(), &HashMap::new()).unwrap()
    }

    #[test]
    fn width_counting() {
        assert_eq!(resolve_text("y ~ x + z").width, 3);
        // 1 + x + group(2) + x&group(2)
        assert_eq!(resolve_text("y ~ x * group").width, 6);
    }

    #[test]
    fn boolean_resolves_to_single_dummy() {
        let r = resolve_text("y ~ x + b");
        assert_eq!(r.width, 3);
        match &r.terms[2] {
            ResolvedTerm::Categorical { contrast, .. } => {
                assert_eq!(contrast.ncols, 1);
                assert_eq!(contrast.row(0), &[0.0]);
                assert_eq!(contrast.row(1), &[1.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dummy_contrast_rows() {
        let m = contrast_matrix(
            &ContrastSpec::default(),
            &["A".into(), "B".into(), "C".into()],
            false,
        )
        .unwrap();
        assert_eq!(m.row(0), &[0.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 1.0]);
        assert_eq!(m.labels, vec!["B - A", "C - A"]);
    }

    #[test]
    fn effects_contrast_rows() {
        let m = contrast_matrix(
            &ContrastSpec {
                scheme: ContrastScheme::Effects,
                base: Some("A".into()),
            },
            &["A".into(), "B".into(), "C".into()],
            false,
        )
        .unwrap();
        assert_eq!(m.row(0), &[-1.0, -1.0]);
        assert_eq!(m.row(1), &[1.0, 0.0]);
        assert_eq!(m.row(2), &[0.0, 1.0]);
        // columns sum to zero
        for j in 0..m.ncols {
            let s: f64 = (0..m.nrows).map(|i| m.row(i)[j]).sum();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn helmert_columns_orthogonal() {
        let m = contrast_matrix(
            &ContrastSpec {
                scheme: ContrastScheme::Helmert,
                base: None,
            },
            &["A".into(), "B".into(), "C".into(), "D".into()],
            false,
        )
        .unwrap();
        // frozen from a hand-checked independent construction: columns sum to
        // zero and are mutually orthogonal
        for j in 0..m.ncols {
            let s: f64 = (0..m.nrows).map(|i| m.row(i)[j]).sum();
            assert_eq!(s, 0.0);
        }
        for j1 in 0..m.ncols {
            for j2 in (j1 + 1)..m.ncols {
                let dot: f64 = (0..m.nrows).map(|i| m.row(i)[j1] * m.row(i)[j2]).sum();
                assert_eq!(dot, 0.0);
            }
        }
    }

    #[test]
    fn contrast_needs_two_levels() {
        assert!(contrast_matrix(&ContrastSpec::default(), &["A".into()], false).is_err());
    }

    #[test]
    fn full_rank_when_intercept_suppressed() {
        let r = resolve_text("y ~ 0 + group");
        assert_eq!(r.width, 3);
        let r2 = resolve_text("y ~ 0 + group + b");
        // group expands fully (3), b keeps dummy width 1
        assert_eq!(r2.width, 4);
    }

    #[test]
    fn unknown_variable_and_categorical_in_function() {
        let ast = parse_formula("y ~ nope").unwrap();
        assert!(resolve(&ast, &table(), &HashMap::new()).is_err());
        let ast = parse_formula("y ~ log(group)").unwrap();
        assert!(resolve(&ast, &table(), &HashMap::new()).is_err());
    }

    #[test]
    fn default_mixture_frequencies() {
        let t = table();
        let m = default_mixture(&t, "group").unwrap();
        assert_eq!(m.levels, vec!["A", "B", "C"]);
        assert_eq!(m.weights, vec![0.4, 0.4, 0.2]);
        let mb = default_mixture(&t, "b").unwrap();
        assert_eq!(mb.weights, vec![0.4, 0.6]);
    }

    #[test]
    fn boolean_mixture_three_of_four() {
        let t = Table::new(vec![(
            "b".into(),
            Column::Boolean(vec![true, true, true, false]),
        )])
        .unwrap();
        let m = default_mixture(&t, "b").unwrap();
        // counted by hand: 3 true of 4 rows
        assert_eq!(m.weights, vec![0.25, 0.75]);
    }

    #[test]
    fn single_level_mixture() {
        let t = Table::new(vec![(
            "g".into(),
            Column::Categorical {
                codes: vec![0, 0],
                levels: vec!["only".into()],
            },
        )])
        .unwrap();
        let m = default_mixture(&t, "g").unwrap();
        assert_eq!(m.weights, vec![1.0]);
    }

    #[test]
    fn mixture_validation() {
        assert!(CategoricalMixture::new(vec!["A".into()], vec![0.9]).is_err());
        assert!(CategoricalMixture::new(vec!["A".into(), "A".into()], vec![0.5, 0.5]).is_err());
        assert!(CategoricalMixture::new(vec!["A".into(), "B".into()], vec![-0.1, 1.1]).is_err());
        let ok = CategoricalMixture::new(vec!["A".into(), "B".into()], vec![0.6, 0.4]).unwrap();
        assert_eq!(ok.weights.iter().sum::<f64>(), 1.0);
    }
}
