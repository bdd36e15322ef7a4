//! Benchmark suites over seeded synthetic data: per-row evaluation timing
//! and allocation, formula-complexity comparison, and end-to-end population
//! margins.
//!
//! Synthetic data is generated in-process from a fixed seed (continuous,
//! positive-continuous, 3-level categorical, and boolean variables) so
//! benchmark runs are reproducible without shipping data.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alloc;
use crate::compiler::{compile, Evaluator};
use crate::error::Result;
use crate::formula::parse_formula;
use crate::margins::{population_margins, MarginsOptions};
use crate::model::fit_ols;
use crate::schema::resolve;
use crate::tables::{Column, Table};

/// The simple benchmark formula.
pub const SIMPLE_FORMULA: &str = "y ~ x * group + log1p(z)";
/// The complex benchmark formula.
pub const COMPLEX_FORMULA: &str = "y ~ x * group + log1p(z) + x & z + x & log1p(z)";

/// Seeded synthetic benchmark table: y and x continuous, z positive
/// continuous, group categorical (A/B/C), b boolean.
pub fn synthetic_table(n: usize, seed: u64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..4.0)).collect();
    let group: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
    let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            1.0 + 0.8 * x[i]
                + 0.5 * z[i].ln_1p()
                + [0.0, 0.4, -0.3][group[i] as usize]
                + 0.2 * (b[i] as u8 as f64)
                + rng.gen_range(-0.5..0.5)
        })
        .collect();
    Table::new(vec![
        ("y".into(), Column::Numeric(y)),
        ("x".into(), Column::Numeric(x)),
        ("z".into(), Column::Numeric(z)),
        (
            "group".into(),
            Column::Categorical {
                codes: group,
                levels: vec!["A".into(), "B".into(), "C".into()],
            },
        ),
        ("b".into(), Column::Boolean(b)),
    ])
    .expect("synthetic columns are consistent")
}

#[derive(Debug, Clone, Serialize)]
pub struct PerRowReport {
    pub formula: String,
    pub n: usize,
    pub reps: usize,
    pub median_ns_per_row: f64,
    pub min_ns_per_row: f64,
    /// Bytes allocated per row in the timed region; must be 0.
    pub bytes_per_row: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Time full passes of `evaluate_row` over the table, reporting per-row
/// nanoseconds and bytes allocated (after one warmup pass).
pub fn perrow_once(formula: &str, n: usize, seed: u64, reps: usize) -> Result<PerRowReport> {
    let table = synthetic_table(n, seed);
    let ast = parse_formula(formula)?;
    let resolved = resolve(&ast, &table, &std::collections::HashMap::new())?;
    let compiled = compile(&resolved)?;
    let mut evaluator = Evaluator::new(&compiled, &table)?;
    let mut out = vec![0.0; compiled.width];
    // warmup: one full pass before counting
    for row in 0..n {
        evaluator.evaluate_row(row, &mut out)?;
    }
    let mut per_rep = Vec::with_capacity(reps);
    let bytes_before = alloc::bytes_allocated();
    for _ in 0..reps {
        let start = Instant::now();
        for row in 0..n {
            evaluator.evaluate_row(row, &mut out)?;
        }
        per_rep.push(start.elapsed().as_nanos() as f64 / n as f64);
    }
    let bytes = alloc::bytes_allocated() - bytes_before;
    std::hint::black_box(&out);
    Ok(PerRowReport {
        formula: formula.to_string(),
        n,
        reps,
        median_ns_per_row: median(per_rep.clone()),
        min_ns_per_row: per_rep.iter().cloned().fold(f64::INFINITY, f64::min),
        bytes_per_row: bytes / (n as u64 * reps as u64).max(1),
    })
}

/// The perrow suite: the complex formula at n = 10^4, 10^5, 10^6.
pub fn perrow_suite(reps: usize) -> Result<Vec<PerRowReport>> {
    let mut out = Vec::new();
    for n in [10_000, 100_000, 1_000_000] {
        out.push(perrow_once(COMPLEX_FORMULA, n, 2024, reps)?);
    }
    Ok(out)
}

/// The complexity suite: simple vs complex formula at the same n.
pub fn complexity_suite(n: usize, reps: usize) -> Result<Vec<PerRowReport>> {
    Ok(vec![
        perrow_once(SIMPLE_FORMULA, n, 2024, reps)?,
        perrow_once(COMPLEX_FORMULA, n, 2024, reps)?,
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct AmeReport {
    pub formula: String,
    pub n: usize,
    pub wall_ms: f64,
    /// Bytes allocated during the margins call (allocation footprint).
    pub bytes_allocated: u64,
    pub estimates: Vec<f64>,
}

/// End-to-end population margins on a fitted OLS model over synthetic data.
pub fn ame_suite(n: usize, threads: Option<usize>) -> Result<AmeReport> {
    let table = synthetic_table(n, 2024);
    let model = fit_ols(SIMPLE_FORMULA, &table, &std::collections::HashMap::new())?;
    let options = MarginsOptions {
        vars: Some(vec!["x".into(), "z".into(), "group".into()]),
        threads,
        ..Default::default()
    };
    let bytes_before = alloc::bytes_allocated();
    let start = Instant::now();
    let result = population_margins(&model, &table, &model.covariance, "model", &options)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let bytes = alloc::bytes_allocated() - bytes_before;
    Ok(AmeReport {
        formula: SIMPLE_FORMULA.to_string(),
        n,
        wall_ms,
        bytes_allocated: bytes,
        estimates: result.estimates().to_vec(),
    })
}

pub fn render_perrow_text(reports: &[PerRowReport]) -> String {
    let mut out = String::new();
    out.push_str("Formula                                              n     Median (ns)  Min (ns)  Memory (bytes)\n");
    for r in reports {
        out.push_str(&format!(
            "{:<50} {:>8}  {:>10.1}  {:>8.1}  {:>14}\n",
            r.formula, r.n, r.median_ns_per_row, r.min_ns_per_row, r.bytes_per_row
        ));
    }
    out
}

pub fn render_ame_text(r: &AmeReport) -> String {
    format!(
        "AME benchmark: {} (n={})\nwall time: {:.2} ms\nallocated: {} bytes\n",
        r.formula, r.n, r.wall_ms, r.bytes_allocated
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_table_is_deterministic() {
        let a = synthetic_table(100, 7);
        let b = synthetic_table(100, 7);
        for i in 0..100 {
            assert_eq!(
                a.numeric_at("x", i).unwrap().to_bits(),
                b.numeric_at("x", i).unwrap().to_bits()
            );
        }
        let c = synthetic_table(100, 8);
        assert_ne!(
            a.numeric_at("x", 0).unwrap().to_bits(),
            c.numeric_at("x", 0).unwrap().to_bits()
        );
    }

    #[test]
    fn synthetic_table_shape() {
        let t = synthetic_table(50, 1);
        assert_eq!(t.nrows(), 50);
        assert_eq!(t.ncols(), 5);
        assert!(t.column("group").unwrap().levels().unwrap().len() == 3);
        // z is positive
        for i in 0..50 {
            assert!(t.numeric_at("z", i).unwrap() > 0.0);
        }
    }

    #[test]
    fn perrow_runs_on_small_n() {
        let r = perrow_once(COMPLEX_FORMULA, 500, 1, 3).unwrap();
        assert_eq!(r.n, 500);
        assert!(r.median_ns_per_row > 0.0);
        assert!(r.min_ns_per_row <= r.median_ns_per_row);
    }

    #[test]
    fn ame_suite_runs() {
        let r = ame_suite(400, Some(1)).unwrap();
        // x, z, and two group contrasts
        assert_eq!(r.estimates.len(), 4);
        assert!(r.wall_ms > 0.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
