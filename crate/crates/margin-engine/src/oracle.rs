//! Naive reference implementation of design-matrix construction.
//!
//! This module deliberately shares no evaluation machinery with the compiled
//! path: it walks the resolved term tree recursively per row, allocating
//! freely. It exists so tests can check the compiled evaluator against an
//! independently written oracle.

use crate::error::{Error, Result};
use crate::formula::{BinOp, Func};
use crate::schema::{ResolvedExpr, ResolvedFormula, ResolvedTerm};
use crate::tables::{Column, OverrideValue, Table};

fn numeric_value(table: &Table, col: usize, row: usize) -> Result<f64> {
    let (name, column) = table.column_at(col);
    match column {
        Column::Numeric(v) => Ok(v[row]),
        Column::Integer(v) => Ok(v[row] as f64),
        c => Err(Error::Schema(format!(
            "column '{}' is {}, expected numeric",
            name,
            c.kind()
        ))),
    }
}

fn level_code(table: &Table, col: usize, row: usize) -> Result<usize> {
    let (name, column) = table.column_at(col);
    match column {
        Column::Categorical { codes, .. } => Ok(codes[row] as usize),
        Column::Boolean(v) => Ok(v[row] as usize),
        c => Err(Error::Schema(format!(
            "column '{}' is {}, expected categorical",
            name,
            c.kind()
        ))),
    }
}

fn eval_expr(
    expr: &ResolvedExpr,
    resolved: &ResolvedFormula,
    table: &Table,
    row: usize,
    overrides: &[(usize, OverrideValue)],
) -> Result<f64> {
    match expr {
        ResolvedExpr::Column(id) => {
            let col = table.column_index(&resolved.columns[*id])?;
            for (c, v) in overrides {
                if *c == col {
                    return match v {
                        OverrideValue::Numeric(x) => Ok(*x),
                        OverrideValue::Integer(x) => Ok(*x as f64),
                        other => Err(Error::Schema(format!(
                            "override {other:?} is not numeric"
                        ))),
                    };
                }
            }
            numeric_value(table, col, row)
        }
        ResolvedExpr::Const(c) => Ok(*c),
        ResolvedExpr::Call(func, arg) => {
            let x = eval_expr(arg, resolved, table, row, overrides)?;
            Ok(match func {
                Func::Log => x.ln(),
                Func::Log1p => x.ln_1p(),
                Func::Exp => x.exp(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
                Func::Identity => x,
            })
        }
        ResolvedExpr::Binary(op, a, b) => {
            let a = eval_expr(a, resolved, table, row, overrides)?;
            let b = eval_expr(b, resolved, table, row, overrides)?;
            Ok(match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
            })
        }
    }
}

fn eval_term(
    term: &ResolvedTerm,
    resolved: &ResolvedFormula,
    table: &Table,
    row: usize,
    overrides: &[(usize, OverrideValue)],
) -> Result<Vec<f64>> {
    match term {
        ResolvedTerm::Intercept => Ok(vec![1.0]),
        ResolvedTerm::Continuous { col } => Ok(vec![eval_expr(
            &ResolvedExpr::Column(*col),
            resolved,
            table,
            row,
            overrides,
        )?]),
        ResolvedTerm::Function { func, arg } => {
            let inner = ResolvedExpr::Call(*func, Box::new(arg.clone()));
            Ok(vec![eval_expr(&inner, resolved, table, row, overrides)?])
        }
        ResolvedTerm::Categorical { col, contrast } => {
            let table_col = table.column_index(&resolved.columns[*col])?;
            let mut code = None;
            for (c, v) in overrides {
                if *c == table_col {
                    code = Some(match v {
                        OverrideValue::Level(l) => *l as usize,
                        OverrideValue::Boolean(b) => *b as usize,
                        other => {
                            return Err(Error::Schema(format!(
                                "override {other:?} is not a level"
                            )))
                        }
                    });
                }
            }
            let code = match code {
                Some(c) => c,
                None => level_code(table, table_col, row)?,
            };
            Ok(contrast.row(code).to_vec())
        }
        ResolvedTerm::Interaction { parts } => {
            // first part varies fastest: index = i1 + w1*i2 + w1*w2*i3 + ...
            let mut acc = vec![1.0];
            for part in parts {
                let vals = eval_term(part, resolved, table, row, overrides)?;
                let mut next = Vec::with_capacity(acc.len() * vals.len());
                for v in &vals {
                    for a in &acc {
                        next.push(a * v);
                    }
                }
                acc = next;
            }
            Ok(acc)
        }
    }
}

/// Build one design-matrix row by direct recursive interpretation.
pub fn design_row(
    resolved: &ResolvedFormula,
    table: &Table,
    row: usize,
    overrides: &[(usize, OverrideValue)],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(resolved.width);
    for term in &resolved.terms {
        out.extend(eval_term(term, resolved, table, row, overrides)?);
    }
    if out.len() != resolved.width {
        return Err(Error::Schema(format!(
            "oracle produced {} values, expected {}",
            out.len(),
            resolved.width
        )));
    }
    Ok(out)
}

/// Build the full n x p design matrix row by row.
pub fn design_matrix(resolved: &ResolvedFormula, table: &Table) -> Result<Vec<Vec<f64>>> {
    (0..table.nrows())
        .map(|row| design_row(resolved, table, row, &[]))
        .collect()
}
