//! A marginal-effects engine: Wilkinson-notation formulas compiled into
//! allocation-free per-row evaluators, with delta-method inference for
//! average marginal effects, adjusted predictions, elasticities, categorical
//! contrasts, and second differences.
//!
//! The typical pipeline:
//!
//! ```
//! use margin_engine::prelude::*;
//! use std::collections::HashMap;
//!
//! let table = Table::new(vec![
//!     ("y".into(), Column::Numeric(vec![1.0, 2.0, 3.0, 5.0])),
//!     ("x".into(), Column::Numeric(vec![0.0, 1.0, 2.0, 3.0])),
//! ]).unwrap();
//! let ast = parse_formula("y ~ x").unwrap();
//! let resolved = resolve(&ast, &table, &HashMap::new()).unwrap();
//! let compiled = compile(&resolved).unwrap();
//! assert_eq!(compiled.width, 2);
//! ```
//!
//! Fitting a model and computing average marginal effects:
//!
//! ```
//! use margin_engine::margins::{population_margins, MarginsOptions};
//! use margin_engine::model::fit_ols;
//! use margin_engine::tables::{Column, Table};
//! use std::collections::HashMap;
//!
//! let table = Table::new(vec![
//!     ("y".into(), Column::Numeric(vec![1.0, 2.2, 2.9, 4.1, 5.2, 5.8])),
//!     ("x".into(), Column::Numeric(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])),
//! ]).unwrap();
//! let model = fit_ols("y ~ x", &table, &HashMap::new()).unwrap();
//! let result = population_margins(
//!     &model, &table, &model.covariance, "model", &MarginsOptions::default(),
//! ).unwrap();
//! // for a linear model the AME of x is exactly the slope coefficient
//! assert!((result.estimates()[0] - model.beta[1]).abs() < 1e-12);
//! ```

pub mod alloc;
pub mod bench;
pub mod compiler;
pub mod diff;
pub mod error;
pub mod formula;
pub mod inference;
pub mod margins;
pub mod model;
pub mod oracle;
pub mod render;
pub mod schema;
pub mod tables;

pub use error::{Error, Result};

/// Convenience re-exports of the most commonly used items.
pub mod prelude {
    pub use crate::compiler::{compile, model_matrix, CompiledFormula, Evaluator};
    pub use crate::error::{Error, Result};
    pub use crate::formula::{normalize, parse_formula, strip_random_effects, FormulaAst};
    pub use crate::schema::{resolve, ContrastScheme, ContrastSpec, ResolvedFormula};
    pub use crate::tables::{
        column_stats, create_scenario, read_csv, write_csv, Column, ColumnKind, ScalarValue,
        ScenarioOverlay, Table,
    };
}
