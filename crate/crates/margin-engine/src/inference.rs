//! Contrasts between estimates and the second-differences family for
//! interaction analysis.
//!
//! A contrast is the delta-method difference of two estimates from one
//! margins run; second differences compare a focal variable's average
//! marginal effect across levels (or points) of a moderator.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::margins::{
    delta_method_se, population_margins, z_p_ci, MarginsOptions, MarginsOutput,
};
use crate::model::FittedModel;
use crate::tables::{column_stats, ScalarValue, Table};

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Picks one estimate out of a margins result, either by row index or by
/// attribute match (every given attribute must match exactly).
#[derive(Debug, Clone, Default)]
pub struct Selector {
    pub index: Option<usize>,
    pub variable: Option<String>,
    pub term: Option<String>,
    /// Required (column, value) pairs among the row's at_values.
    pub at: Vec<(String, String)>,
    pub group: Option<String>,
}

impl Selector {
    pub fn index(i: usize) -> Self {
        Selector {
            index: Some(i),
            ..Default::default()
        }
    }

    pub fn variable(name: &str) -> Self {
        Selector {
            variable: Some(name.to_string()),
            ..Default::default()
        }
    }

    pub fn with_at(mut self, column: &str, value: &str) -> Self {
        self.at.push((column.to_string(), value.to_string()));
        self
    }

    pub fn with_group(mut self, group: &str) -> Self {
        self.group = Some(group.to_string());
        self
    }
}

/// Difference between two estimates with delta-method inference.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastResult {
    /// estimate2 - estimate1
    pub contrast: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub estimate1: f64,
    pub estimate2: f64,
    /// Gradient of the difference (g2 - g1).
    pub gradient: Vec<f64>,
    /// Row indices of the two estimates in the source result.
    pub rows: Option<(usize, usize)>,
    /// Human-readable labels of the two rows.
    pub labels: Option<(String, String)>,
}

/// One row of a second-differences table.
#[derive(Debug, Clone, Serialize)]
pub struct SecondDifferenceRow {
    pub focal: String,
    pub moderator: String,
    /// "B vs A" for level pairs, or the evaluation point for continuous
    /// moderators.
    pub levels: String,
    /// Difference in dy/dx (or its derivative in the moderator, for
    /// continuous moderators).
    pub delta: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

// ---------------------------------------------------------------------------
// Row access shared by contrast and second differences
// ---------------------------------------------------------------------------

struct RowView<'a> {
    estimates: &'a [f64],
    gradients: &'a [Vec<f64>],
    variables: Option<&'a [String]>,
    terms: Option<&'a [String]>,
    at_values: &'a [Vec<(String, String)>],
    group_values: Option<&'a [String]>,
}

impl<'a> RowView<'a> {
    fn of(result: &'a MarginsOutput) -> Self {
        match result {
            MarginsOutput::Effects(e) => RowView {
                estimates: &e.estimates,
                gradients: &e.gradients,
                variables: Some(&e.variables),
                terms: Some(&e.terms),
                at_values: &e.at_values,
                group_values: e.group_values.as_deref(),
            },
            MarginsOutput::Predictions(p) => RowView {
                estimates: &p.estimates,
                gradients: &p.gradients,
                variables: None,
                terms: None,
                at_values: &p.at_values,
                group_values: p.group_values.as_deref(),
            },
        }
    }

    fn len(&self) -> usize {
        self.estimates.len()
    }

    fn label(&self, i: usize) -> String {
        let mut parts = Vec::new();
        if let Some(vars) = self.variables {
            parts.push(vars[i].clone());
        }
        if let Some(terms) = self.terms {
            parts.push(terms[i].clone());
        }
        for (c, v) in &self.at_values[i] {
            parts.push(format!("{c}={v}"));
        }
        if let Some(groups) = self.group_values {
            parts.push(format!("group={}", groups[i]));
        }
        if parts.is_empty() {
            format!("row {i}")
        } else {
            parts.join(", ")
        }
    }

    fn matches(&self, i: usize, sel: &Selector) -> bool {
        if let Some(idx) = sel.index {
            return idx == i;
        }
        if let Some(v) = &sel.variable {
            if self.variables.map(|vs| &vs[i] != v).unwrap_or(true) {
                return false;
            }
        }
        if let Some(t) = &sel.term {
            if self.terms.map(|ts| &ts[i] != t).unwrap_or(true) {
                return false;
            }
        }
        for (c, want) in &sel.at {
            if !self.at_values[i].iter().any(|(ac, av)| ac == c && av == want) {
                return false;
            }
        }
        if let Some(g) = &sel.group {
            if self.group_values.map(|gs| &gs[i] != g).unwrap_or(true) {
                return false;
            }
        }
        true
    }

    fn select(&self, sel: &Selector) -> Result<usize> {
        if let Some(idx) = sel.index {
            if idx >= self.len() {
                return Err(Error::Inference(format!(
                    "selector index {idx} out of range (result has {} estimates)",
                    self.len()
                )));
            }
            return Ok(idx);
        }
        let matches: Vec<usize> = (0..self.len()).filter(|&i| self.matches(i, sel)).collect();
        match matches.len() {
            1 => Ok(matches[0]),
            0 => Err(Error::Inference(format!(
                "selector {sel:?} matches no estimate"
            ))),
            _ => {
                let labels: Vec<String> = matches.iter().map(|&i| self.label(i)).collect();
                Err(Error::Inference(format!(
                    "selector {sel:?} is ambiguous; matches: {}",
                    labels.join("; ")
                )))
            }
        }
    }
}

fn contrast_rows(
    view: &RowView<'_>,
    i1: usize,
    i2: usize,
    sigma: &DMatrix<f64>,
) -> Result<ContrastResult> {
    let g1 = &view.gradients[i1];
    let g2 = &view.gradients[i2];
    let diff_grad: Vec<f64> = g2.iter().zip(g1).map(|(b, a)| b - a).collect();
    let delta = view.estimates[i2] - view.estimates[i1];
    let se = delta_method_se(&diff_grad, sigma)?;
    let (z, p, lo, hi) = z_p_ci(delta, se);
    Ok(ContrastResult {
        contrast: delta,
        se,
        t_stat: z,
        p_value: p,
        ci_lower: lo,
        ci_upper: hi,
        estimate1: view.estimates[i1],
        estimate2: view.estimates[i2],
        gradient: diff_grad,
        rows: Some((i1, i2)),
        labels: Some((view.label(i1), view.label(i2))),
    })
}

/// Contrast two estimates of a margins result: estimate2 - estimate1 with
/// delta-method SE accounting for their covariance.
pub fn contrast(
    result: &MarginsOutput,
    selector1: &Selector,
    selector2: &Selector,
    sigma: &DMatrix<f64>,
) -> Result<ContrastResult> {
    let view = RowView::of(result);
    let i1 = view.select(selector1)?;
    let i2 = view.select(selector2)?;
    contrast_rows(&view, i1, i2, sigma)
}

// ---------------------------------------------------------------------------
// Second differences over a categorical moderator
// ---------------------------------------------------------------------------

/// Compare the focal variable's effect across moderator levels: one row per
/// unordered level pair, in level order. The effects result must come from
/// scenarios setting the moderator to each level (so every row carries an
/// `at` value for the moderator).
pub fn second_differences(
    effects: &MarginsOutput,
    focal: &str,
    moderator: &str,
    sigma: &DMatrix<f64>,
) -> Result<Vec<SecondDifferenceRow>> {
    let view = RowView::of(effects);
    // collect (level, row) pairs for the focal variable, in result order
    let mut level_rows: Vec<(String, usize)> = Vec::new();
    for i in 0..view.len() {
        let is_focal = view
            .variables
            .map(|vs| vs[i] == focal)
            .unwrap_or(false);
        if !is_focal {
            continue;
        }
        if let Some((_, level)) = view.at_values[i]
            .iter()
            .find(|(c, _)| c == moderator)
        {
            level_rows.push((level.clone(), i));
        }
    }
    if level_rows.len() < 2 {
        return Err(Error::Inference(format!(
            "focal variable '{focal}' must appear at two or more levels of '{moderator}' \
             (found {})",
            level_rows.len()
        )));
    }
    let mut out = Vec::new();
    for a in 0..level_rows.len() {
        for b in (a + 1)..level_rows.len() {
            let (la, ia) = &level_rows[a];
            let (lb, ib) = &level_rows[b];
            let c = contrast_rows(&view, *ia, *ib, sigma)?;
            out.push(SecondDifferenceRow {
                focal: focal.to_string(),
                moderator: moderator.to_string(),
                levels: format!("{la} vs {lb}"),
                delta: c.contrast,
                se: c.se,
                z: c.t_stat,
                p_value: c.p_value,
            });
        }
    }
    Ok(out)
}

/// Alias for [`second_differences`]: all pairwise level pairs in level order.
pub fn second_differences_all_contrasts(
    effects: &MarginsOutput,
    focal: &str,
    moderator: &str,
    sigma: &DMatrix<f64>,
) -> Result<Vec<SecondDifferenceRow>> {
    second_differences(effects, focal, moderator, sigma)
}

// ---------------------------------------------------------------------------
// Second differences at points of a continuous moderator
// ---------------------------------------------------------------------------

/// Step size for the symmetric finite difference in the moderator:
/// 0.01 * SD by default, raised to |z| * 1e-8 when |z| > 1, floored at 1e-9.
pub fn moderator_step(sd: f64, point: f64) -> f64 {
    let mut delta = 0.01 * sd;
    if point.abs() > 1.0 {
        delta = delta.max(point.abs() * 1e-8);
    }
    delta.max(1e-9)
}

/// d(AME_focal)/d(moderator) at each point, by symmetric finite differences
/// of scenario-fixed AMEs, with parameter uncertainty propagated through the
/// difference.
///
/// `at` defaults to the moderator's sample mean; `step` overrides the
/// automatic step size (useful for step-invariance checks).
pub fn second_differences_at(
    model: &FittedModel,
    table: &Table,
    focal: &str,
    moderator: &str,
    sigma: &DMatrix<f64>,
    at: Option<&[f64]>,
    step: Option<f64>,
    options: &MarginsOptions,
) -> Result<Vec<SecondDifferenceRow>> {
    let stats = column_stats(table, moderator)?;
    let default_at = [stats.mean];
    let points: &[f64] = at.unwrap_or(&default_at);
    if let Some(bad) = points.iter().find(|z| !z.is_finite()) {
        return Err(Error::Inference(format!(
            "evaluation point {bad} is not finite"
        )));
    }
    let mut out = Vec::new();
    for &z in points {
        let delta = match step {
            Some(d) => d,
            None => moderator_step(stats.sd, z),
        };
        if delta <= 0.0 {
            return Err(Error::Inference(format!(
                "step size resolved to {delta} at point {z}; must be positive"
            )));
        }
        let ame_at = |zv: f64| -> Result<(f64, Vec<f64>)> {
            let opts = MarginsOptions {
                vars: Some(vec![focal.to_string()]),
                scenarios: vec![(moderator.to_string(), vec![ScalarValue::Number(zv)])],
                scale: options.scale,
                threads: options.threads,
                weights: options.weights.clone(),
                ..Default::default()
            };
            let res = population_margins(model, table, sigma, "model", &opts)?;
            let e = res.as_effects().ok_or_else(|| {
                Error::Inference("expected an effects result".into())
            })?;
            if e.estimates.len() != 1 {
                return Err(Error::Inference(format!(
                    "expected one AME for '{focal}', got {}",
                    e.estimates.len()
                )));
            }
            Ok((e.estimates[0], e.gradients[0].clone()))
        };
        let (ame_plus, g_plus) = ame_at(z + delta)?;
        let (ame_minus, g_minus) = ame_at(z - delta)?;
        let estimate = (ame_plus - ame_minus) / (2.0 * delta);
        let diff_grad: Vec<f64> = g_plus.iter().zip(&g_minus).map(|(a, b)| a - b).collect();
        let se = delta_method_se(&diff_grad, sigma)? / (2.0 * delta);
        let (zstat, p, _, _) = z_p_ci(estimate, se);
        out.push(SecondDifferenceRow {
            focal: focal.to_string(),
            moderator: moderator.to_string(),
            levels: format!("{z}"),
            delta: estimate,
            se,
            z: zstat,
            p_value: p,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::Target;
    use crate::model::{fit_glm, fit_ols, Family};
    use crate::diff::LinkFunction;
    use crate::margins::{means_grid, profile_margins, GridValue};
    use crate::tables::Column;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn interaction_table(n: usize, seed: u64) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
        let g: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                1.0 + 0.8 * x[i] - 0.5 * z[i] + 0.6 * x[i] * z[i]
                    + [0.0, 0.7, -0.4][g[i] as usize]
                    + [0.0, 0.5, -0.3][g[i] as usize] * x[i]
                    + rng.gen_range(-0.2..0.2)
            })
            .collect();
        Table::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
            ("z".into(), Column::Numeric(z)),
            (
                "g".into(),
                Column::Categorical {
                    codes: g,
                    levels: vec!["A".into(), "B".into(), "C".into()],
                },
            ),
        ])
        .unwrap()
    }

    #[test]
    fn self_contrast_is_degenerate() {
        let t = interaction_table(100, 1);
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let c = contrast(
            &out,
            &Selector::index(0),
            &Selector::index(0),
            &m.covariance,
        )
        .unwrap();
        assert_eq!(c.contrast, 0.0);
        assert_eq!(c.se, 0.0);
        assert_eq!(c.t_stat, 0.0);
        assert_eq!(c.p_value, 1.0);
    }

    #[test]
    fn antisymmetry() {
        let t = interaction_table(100, 2);
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let ab = contrast(
            &out,
            &Selector::variable("x"),
            &Selector::variable("z"),
            &m.covariance,
        )
        .unwrap();
        let ba = contrast(
            &out,
            &Selector::variable("z"),
            &Selector::variable("x"),
            &m.covariance,
        )
        .unwrap();
        assert_eq!(ab.contrast, -ba.contrast);
        assert_eq!(ab.se.to_bits(), ba.se.to_bits());
    }

    #[test]
    fn ambiguous_and_empty_selectors_error() {
        let t = interaction_table(80, 3);
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let all = Selector::default(); // matches everything
        let err = contrast(&out, &all, &Selector::index(0), &m.covariance).unwrap_err();
        assert!(err.to_string().contains("ambiguous"));
        let none = Selector::variable("nope");
        let err = contrast(&out, &none, &Selector::index(0), &m.covariance).unwrap_err();
        assert!(err.to_string().contains("no estimate"));
    }

    #[test]
    fn profile_prediction_contrast_matches_triple_loop() {
        let t = interaction_table(150, 4);
        let m = fit_ols("y ~ x * z", &t, &HashMap::new()).unwrap();
        let grid = crate::margins::cartesian_grid(&[(
            "x".into(),
            vec![GridValue::Number(-1.0), GridValue::Number(1.0)],
        )])
        .unwrap();
        let out = profile_margins(
            &m,
            &t,
            &grid,
            &m.covariance,
            "model",
            &MarginsOptions {
                target: Target::Predictions,
                ..Default::default()
            },
        )
        .unwrap();
        let c = contrast(
            &out,
            &Selector::index(0),
            &Selector::index(1),
            &m.covariance,
        )
        .unwrap();
        let g1 = &out.gradients()[0];
        let g2 = &out.gradients()[1];
        let mut quad = 0.0;
        for i in 0..m.p() {
            for j in 0..m.p() {
                quad += (g2[i] - g1[i]) * m.covariance[(i, j)] * (g2[j] - g1[j]);
            }
        }
        assert_relative_eq!(c.se, quad.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(
            c.contrast,
            out.estimates()[1] - out.estimates()[0],
            epsilon = 1e-14
        );
    }

    #[test]
    fn second_differences_identity_link_equals_interaction_coefficient() {
        let t = interaction_table(200, 5);
        let m = fit_ols("y ~ x * g", &t, &HashMap::new()).unwrap();
        let labels = m.coefficient_labels();
        let effects = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                scenarios: vec![(
                    "g".into(),
                    vec![
                        ScalarValue::Level("A".into()),
                        ScalarValue::Level("B".into()),
                        ScalarValue::Level("C".into()),
                    ],
                )],
                ..Default::default()
            },
        )
        .unwrap();
        let rows = second_differences(&effects, "x", "g", &m.covariance).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].levels, "A vs B");
        assert_eq!(rows[1].levels, "A vs C");
        assert_eq!(rows[2].levels, "B vs C");
        // A vs B delta equals the x:g[B - A] coefficient, SE equals its SE
        let idx = labels
            .iter()
            .position(|l| l == "x:g[B - A]")
            .expect("interaction coefficient present");
        assert_relative_eq!(rows[0].delta, m.beta[idx], epsilon = 1e-10);
        assert_relative_eq!(
            rows[0].se,
            m.covariance[(idx, idx)].sqrt(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn second_differences_no_interaction_is_zero() {
        let t = interaction_table(150, 6);
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let effects = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                scenarios: vec![(
                    "g".into(),
                    vec![
                        ScalarValue::Level("A".into()),
                        ScalarValue::Level("B".into()),
                        ScalarValue::Level("C".into()),
                    ],
                )],
                ..Default::default()
            },
        )
        .unwrap();
        for row in second_differences(&effects, "x", "g", &m.covariance).unwrap() {
            assert!(row.delta.abs() < 1e-12, "delta = {}", row.delta);
        }
    }

    #[test]
    fn second_differences_matches_contrast_bitwise() {
        let t = interaction_table(150, 7);
        let m = fit_ols("y ~ x * g", &t, &HashMap::new()).unwrap();
        let effects = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                scenarios: vec![(
                    "g".into(),
                    vec![
                        ScalarValue::Level("A".into()),
                        ScalarValue::Level("B".into()),
                        ScalarValue::Level("C".into()),
                    ],
                )],
                ..Default::default()
            },
        )
        .unwrap();
        let rows = second_differences(&effects, "x", "g", &m.covariance).unwrap();
        let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
        for (row, (i, j)) in rows.iter().zip(pairs) {
            let c = contrast(
                &effects,
                &Selector::index(i),
                &Selector::index(j),
                &m.covariance,
            )
            .unwrap();
            assert_eq!(row.delta.to_bits(), c.contrast.to_bits());
            assert_eq!(row.se.to_bits(), c.se.to_bits());
        }
        let alias =
            second_differences_all_contrasts(&effects, "x", "g", &m.covariance).unwrap();
        assert_eq!(alias.len(), rows.len());
        assert_eq!(alias[0].delta.to_bits(), rows[0].delta.to_bits());
    }

    #[test]
    fn second_differences_at_linear_recovers_interaction() {
        let t = interaction_table(200, 8);
        let m = fit_ols("y ~ x * z", &t, &HashMap::new()).unwrap();
        let labels = m.coefficient_labels();
        let idx = labels.iter().position(|l| l == "x:z").unwrap();
        let rows = second_differences_at(
            &m,
            &t,
            "x",
            "z",
            &m.covariance,
            Some(&[-0.5, 0.0, 1.2]),
            None,
            &MarginsOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_relative_eq!(row.delta, m.beta[idx], epsilon = 1e-9);
            assert_relative_eq!(
                row.se,
                m.covariance[(idx, idx)].sqrt(),
                epsilon = 1e-9
            );
        }
        // default at = sample mean
        let def = second_differences_at(
            &m,
            &t,
            "x",
            "z",
            &m.covariance,
            None,
            None,
            &MarginsOptions::default(),
        )
        .unwrap();
        assert_eq!(def.len(), 1);
        let mean = column_stats(&t, "z").unwrap().mean;
        assert_eq!(def[0].levels, format!("{mean}"));
    }

    #[test]
    fn second_differences_at_step_invariance_identity_link() {
        let t = interaction_table(120, 9);
        let m = fit_ols("y ~ x * z", &t, &HashMap::new()).unwrap();
        let run = |step: f64| {
            second_differences_at(
                &m,
                &t,
                "x",
                "z",
                &m.covariance,
                Some(&[0.5]),
                Some(step),
                &MarginsOptions::default(),
            )
            .unwrap()[0]
                .delta
        };
        let base = run(1e-3);
        for step in [1e-6, 1e-4, 1e-2, 1e-1] {
            let d = run(step);
            assert_relative_eq!(d, base, max_relative = 1e-9);
        }
    }

    #[test]
    fn second_differences_at_rejects_zero_step() {
        let t = interaction_table(60, 10);
        let m = fit_ols("y ~ x * z", &t, &HashMap::new()).unwrap();
        let err = second_differences_at(
            &m,
            &t,
            "x",
            "z",
            &m.covariance,
            Some(&[0.0]),
            Some(0.0),
            &MarginsOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("step size"));
    }

    #[test]
    fn moderator_step_rules() {
        assert_relative_eq!(moderator_step(1.0, 0.5), 0.01, epsilon = 1e-15);
        // large point raises the floor
        assert!(moderator_step(0.0, 1e8) >= 1e8 * 1e-8);
        // zero SD, small point: absolute floor
        assert_eq!(moderator_step(0.0, 0.5), 1e-9);
    }

    #[test]
    fn second_differences_at_logit_matches_brute_force() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let eta = 0.3 + 0.8 * x[i] - 0.5 * z[i] + 0.6 * x[i] * z[i];
                let p = 1.0 / (1.0 + (-eta as f64).exp());
                (rng.gen_range(0.0..1.0) < p) as u8 as f64
            })
            .collect();
        let t = Table::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x.clone())),
            ("z".into(), Column::Numeric(z.clone())),
        ])
        .unwrap();
        let m = fit_glm(
            "y ~ x * z",
            &t,
            Family::Binomial,
            LinkFunction::Logit,
            &HashMap::new(),
            100,
            1e-10,
        )
        .unwrap();
        let z0 = 0.25;
        let delta = moderator_step(column_stats(&t, "z").unwrap().sd, z0);
        let rows = second_differences_at(
            &m,
            &t,
            "x",
            "z",
            &m.covariance,
            Some(&[z0]),
            None,
            &MarginsOptions::default(),
        )
        .unwrap();
        // brute force: AME_x with z fixed at z0 +/- delta, row loop
        let ame = |zfix: f64| {
            let mut acc = 0.0;
            for i in 0..n {
                let eta = m.beta[0]
                    + m.beta[1] * x[i]
                    + m.beta[2] * zfix
                    + m.beta[3] * x[i] * zfix;
                let mu = 1.0 / (1.0 + (-eta as f64).exp());
                acc += mu * (1.0 - mu) * (m.beta[1] + m.beta[3] * zfix);
            }
            acc / n as f64
        };
        let expect = (ame(z0 + delta) - ame(z0 - delta)) / (2.0 * delta);
        assert_relative_eq!(rows[0].delta, expect, max_relative = 1e-8);
    }

    #[test]
    fn independent_estimates_se_adds_in_quadrature() {
        // block-diagonal sigma with orthogonal gradients
        let t = interaction_table(100, 12);
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let grid = means_grid(&t, &[]).unwrap();
        let _ = grid; // grid unused; construct views directly
        let p = m.p();
        let mut sigma = DMatrix::zeros(p, p);
        sigma[(1, 1)] = 4.0;
        sigma[(2, 2)] = 9.0;
        let out = population_margins(
            &m,
            &t,
            &sigma,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into(), "z".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        // gradient for x is e_1, for z is e_2 (linear model)
        let c = contrast(
            &out,
            &Selector::variable("x"),
            &Selector::variable("z"),
            &sigma,
        )
        .unwrap();
        assert_relative_eq!(c.se, (4.0f64 + 9.0).sqrt(), epsilon = 1e-12);
    }
}
