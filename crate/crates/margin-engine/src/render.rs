//! Text, CSV, and JSON rendering of margins and inference results.
//!
//! Text tables print 5 significant digits (matching the library's printed
//! precision elsewhere); CSV and JSON carry full precision.

use serde_json::json;

use crate::error::{Error, Result};
use crate::inference::{ContrastResult, SecondDifferenceRow};
use crate::margins::{z_p_ci, EffectsResult, MarginsOutput, PredictionsResult};

/// Render a value with 5 significant digits, trimming trailing zeros.
pub fn sig5(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{x:.4e}");
    // parse back through the exponent form to round at 5 significant digits
    let rounded: f64 = s.parse().unwrap_or(x);
    let mut out = format!("{rounded}");
    // avoid exponent notation for moderate magnitudes
    if out.contains('e') && rounded.abs() >= 1e-4 && rounded.abs() < 1e15 {
        out = format!("{rounded:.10}");
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

impl OutputFormat {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "table" => Ok(OutputFormat::Table),
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Cli(format!(
                "unknown output format '{other}' (expected table, csv, or json)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Generic column table
// ---------------------------------------------------------------------------

fn layout(headers: &[String], rows: &[Vec<String>]) -> String {
    let ncol = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let total: usize = widths.iter().sum::<usize>() + 2 * (ncol.saturating_sub(1));
    let rule = "-".repeat(total);
    let fmt_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i < 2 && headers[i].chars().next().map(char::is_alphabetic).unwrap_or(false) {
                // left-align label-ish leading columns
                line.push_str(&format!("{cell:<width$}", width = widths[i]));
            } else {
                line.push_str(&format!("{cell:>width$}", width = widths[i]));
            }
        }
        line.trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&fmt_row(headers));
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

/// The distinct at-value column names, in first-appearance order.
fn at_columns(at_values: &[Vec<(String, String)>]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for row in at_values {
        for (c, _) in row {
            if !cols.iter().any(|x| x == c) {
                cols.push(c.clone());
            }
        }
    }
    cols
}

fn at_cell(at_values: &[(String, String)], col: &str) -> String {
    at_values
        .iter()
        .find(|(c, _)| c == col)
        .map(|(_, v)| v.clone())
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Effects
// ---------------------------------------------------------------------------

fn effects_header(e: &EffectsResult) -> String {
    let kind = &e.metadata.kind;
    let mut out = format!(
        "EffectsResult: {} {} effects (N={})\n",
        e.estimates.len(),
        kind,
        e.metadata.n
    );
    let scen_cols = at_columns(&e.at_values);
    if !scen_cols.is_empty() && kind == "population" {
        out.push_str(&format!("Scenarios: {}\n", scen_cols.join(", ")));
    }
    out
}

pub fn render_effects_text(e: &EffectsResult) -> String {
    let at_cols = at_columns(&e.at_values);
    let grouped = e.group_values.is_some();
    let mut headers = vec!["Variable".to_string(), "Contrast".to_string()];
    for c in &at_cols {
        headers.push(format!("at_{c}"));
    }
    if grouped {
        headers.push("Group".to_string());
    }
    headers.extend(
        ["dy/dx", "Std. Err.", "[95% Conf.", "Interval]"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut rows = Vec::new();
    for i in 0..e.estimates.len() {
        let (_, _, lo, hi) = z_p_ci(e.estimates[i], e.standard_errors[i]);
        let mut row = vec![e.variables[i].clone(), e.terms[i].clone()];
        for c in &at_cols {
            row.push(at_cell(&e.at_values[i], c));
        }
        if let Some(groups) = &e.group_values {
            row.push(groups[i].clone());
        }
        row.push(sig5(e.estimates[i]));
        row.push(sig5(e.standard_errors[i]));
        row.push(sig5(lo));
        row.push(sig5(hi));
        rows.push(row);
    }
    let mut out = effects_header(e);
    out.push_str(&layout(&headers, &rows));
    for w in &e.metadata.warnings {
        out.push_str(&format!("note: {w}\n"));
    }
    out
}

pub fn render_effects_csv(e: &EffectsResult, include_gradients: bool) -> String {
    let at_cols = at_columns(&e.at_values);
    let grouped = e.group_values.is_some();
    let p = e.gradients.first().map(Vec::len).unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut headers = vec!["variable".to_string(), "contrast".to_string()];
    for c in &at_cols {
        headers.push(format!("at_{c}"));
    }
    if grouped {
        headers.push("group".to_string());
    }
    for h in ["estimate", "std_error", "z", "p_value", "ci_lower", "ci_upper"] {
        headers.push(h.to_string());
    }
    if include_gradients {
        for j in 0..p {
            headers.push(format!("gradient_{j}"));
        }
    }
    wtr.write_record(&headers).expect("in-memory write");
    for i in 0..e.estimates.len() {
        let (z, pv, lo, hi) = z_p_ci(e.estimates[i], e.standard_errors[i]);
        let mut row = vec![e.variables[i].clone(), e.terms[i].clone()];
        for c in &at_cols {
            row.push(at_cell(&e.at_values[i], c));
        }
        if let Some(groups) = &e.group_values {
            row.push(groups[i].clone());
        }
        for v in [e.estimates[i], e.standard_errors[i], z, pv, lo, hi] {
            row.push(format!("{v}"));
        }
        if include_gradients {
            for g in &e.gradients[i] {
                row.push(format!("{g}"));
            }
        }
        wtr.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn render_effects_json(e: &EffectsResult, include_gradients: bool) -> String {
    let mut rows = Vec::new();
    for i in 0..e.estimates.len() {
        let (z, pv, lo, hi) = z_p_ci(e.estimates[i], e.standard_errors[i]);
        let mut obj = json!({
            "variable": e.variables[i],
            "contrast": e.terms[i],
            "estimate": e.estimates[i],
            "std_error": e.standard_errors[i],
            "z": z,
            "p_value": pv,
            "ci_lower": lo,
            "ci_upper": hi,
        });
        let map = obj.as_object_mut().unwrap();
        if !e.at_values[i].is_empty() {
            map.insert(
                "at".to_string(),
                json!(e.at_values[i]
                    .iter()
                    .cloned()
                    .collect::<std::collections::BTreeMap<String, String>>()),
            );
        }
        if let Some(groups) = &e.group_values {
            map.insert("group".to_string(), json!(groups[i]));
        }
        if include_gradients {
            map.insert("gradient".to_string(), json!(e.gradients[i]));
        }
        rows.push(obj);
    }
    serde_json::to_string_pretty(&json!({
        "metadata": e.metadata,
        "effects": rows,
    }))
    .expect("serializable")
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

pub fn render_predictions_text(r: &PredictionsResult) -> String {
    let at_cols = at_columns(&r.at_values);
    let grouped = r.group_values.is_some();
    let mut out = format!(
        "PredictionsResult: {} {} predictions (N={})\n",
        r.estimates.len(),
        r.metadata.kind,
        r.metadata.n
    );
    if !at_cols.is_empty() && r.metadata.kind == "population" {
        out.push_str(&format!("Scenarios: {}\n", at_cols.join(", ")));
    }
    let mut headers: Vec<String> = Vec::new();
    for c in &at_cols {
        headers.push(format!("at_{c}"));
    }
    if grouped {
        headers.push("Group".to_string());
    }
    headers.extend(
        ["Prediction", "Std. Err.", "[95% Conf.", "Interval]"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut rows = Vec::new();
    for i in 0..r.estimates.len() {
        let (_, _, lo, hi) = z_p_ci(r.estimates[i], r.standard_errors[i]);
        let mut row = Vec::new();
        for c in &at_cols {
            row.push(at_cell(&r.at_values[i], c));
        }
        if let Some(groups) = &r.group_values {
            row.push(groups[i].clone());
        }
        row.push(sig5(r.estimates[i]));
        row.push(sig5(r.standard_errors[i]));
        row.push(sig5(lo));
        row.push(sig5(hi));
        rows.push(row);
    }
    out.push_str(&layout(&headers, &rows));
    for w in &r.metadata.warnings {
        out.push_str(&format!("note: {w}\n"));
    }
    out
}

pub fn render_predictions_csv(r: &PredictionsResult, include_gradients: bool) -> String {
    let at_cols = at_columns(&r.at_values);
    let grouped = r.group_values.is_some();
    let p = r.gradients.first().map(Vec::len).unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut headers: Vec<String> = Vec::new();
    for c in &at_cols {
        headers.push(format!("at_{c}"));
    }
    if grouped {
        headers.push("group".to_string());
    }
    for h in ["estimate", "std_error", "ci_lower", "ci_upper"] {
        headers.push(h.to_string());
    }
    if include_gradients {
        for j in 0..p {
            headers.push(format!("gradient_{j}"));
        }
    }
    wtr.write_record(&headers).expect("in-memory write");
    for i in 0..r.estimates.len() {
        let (_, _, lo, hi) = z_p_ci(r.estimates[i], r.standard_errors[i]);
        let mut row: Vec<String> = Vec::new();
        for c in &at_cols {
            row.push(at_cell(&r.at_values[i], c));
        }
        if let Some(groups) = &r.group_values {
            row.push(groups[i].clone());
        }
        for v in [r.estimates[i], r.standard_errors[i], lo, hi] {
            row.push(format!("{v}"));
        }
        if include_gradients {
            for g in &r.gradients[i] {
                row.push(format!("{g}"));
            }
        }
        wtr.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn render_predictions_json(r: &PredictionsResult, include_gradients: bool) -> String {
    let mut rows = Vec::new();
    for i in 0..r.estimates.len() {
        let (_, _, lo, hi) = z_p_ci(r.estimates[i], r.standard_errors[i]);
        let mut obj = json!({
            "estimate": r.estimates[i],
            "std_error": r.standard_errors[i],
            "ci_lower": lo,
            "ci_upper": hi,
        });
        let map = obj.as_object_mut().unwrap();
        if !r.at_values[i].is_empty() {
            map.insert(
                "at".to_string(),
                json!(r.at_values[i]
                    .iter()
                    .cloned()
                    .collect::<std::collections::BTreeMap<String, String>>()),
            );
        }
        if let Some(groups) = &r.group_values {
            map.insert("group".to_string(), json!(groups[i]));
        }
        if include_gradients {
            map.insert("gradient".to_string(), json!(r.gradients[i]));
        }
        rows.push(obj);
    }
    serde_json::to_string_pretty(&json!({
        "metadata": r.metadata,
        "predictions": rows,
    }))
    .expect("serializable")
}

/// Render any margins output in the given format.
pub fn render_margins(
    result: &MarginsOutput,
    format: OutputFormat,
    include_gradients: bool,
) -> String {
    match (result, format) {
        (MarginsOutput::Effects(e), OutputFormat::Table) => render_effects_text(e),
        (MarginsOutput::Effects(e), OutputFormat::Csv) => {
            render_effects_csv(e, include_gradients)
        }
        (MarginsOutput::Effects(e), OutputFormat::Json) => {
            render_effects_json(e, include_gradients)
        }
        (MarginsOutput::Predictions(p), OutputFormat::Table) => render_predictions_text(p),
        (MarginsOutput::Predictions(p), OutputFormat::Csv) => {
            render_predictions_csv(p, include_gradients)
        }
        (MarginsOutput::Predictions(p), OutputFormat::Json) => {
            render_predictions_json(p, include_gradients)
        }
    }
}

// ---------------------------------------------------------------------------
// Second differences & contrasts
// ---------------------------------------------------------------------------

pub fn render_seconddiff_text(rows: &[SecondDifferenceRow]) -> String {
    let headers: Vec<String> = ["Levels", "Delta(dy/dx)", "SE", "z", "p-value"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.levels.clone(),
                sig5(r.delta),
                sig5(r.se),
                sig5(r.z),
                sig5(r.p_value),
            ]
        })
        .collect();
    layout(&headers, &body)
}

pub fn render_seconddiff_csv(rows: &[SecondDifferenceRow]) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["focal", "moderator", "levels", "delta", "se", "z", "p_value"])
        .expect("in-memory write");
    for r in rows {
        wtr.write_record([
            r.focal.as_str(),
            r.moderator.as_str(),
            r.levels.as_str(),
            &format!("{}", r.delta),
            &format!("{}", r.se),
            &format!("{}", r.z),
            &format!("{}", r.p_value),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8")
}

pub fn render_seconddiff_json(rows: &[SecondDifferenceRow]) -> String {
    serde_json::to_string_pretty(rows).expect("serializable")
}

pub fn render_seconddiff(rows: &[SecondDifferenceRow], format: OutputFormat) -> String {
    match format {
        OutputFormat::Table => render_seconddiff_text(rows),
        OutputFormat::Csv => render_seconddiff_csv(rows),
        OutputFormat::Json => render_seconddiff_json(rows),
    }
}

pub fn render_contrast_text(c: &ContrastResult) -> String {
    let mut out = String::new();
    if let Some((a, b)) = &c.labels {
        out.push_str(&format!("Contrast: ({b}) - ({a})\n"));
    }
    let headers: Vec<String> = [
        "Contrast", "Std. Err.", "z", "p-value", "[95% Conf.", "Interval]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body = vec![vec![
        sig5(c.contrast),
        sig5(c.se),
        sig5(c.t_stat),
        sig5(c.p_value),
        sig5(c.ci_lower),
        sig5(c.ci_upper),
    ]];
    out.push_str(&layout(&headers, &body));
    out
}

pub fn render_contrast(c: &ContrastResult, format: OutputFormat) -> Result<String> {
    Ok(match format {
        OutputFormat::Table => render_contrast_text(c),
        OutputFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record([
                "contrast", "se", "z", "p_value", "ci_lower", "ci_upper", "estimate1",
                "estimate2",
            ])
            .map_err(|e| Error::Cli(e.to_string()))?;
            wtr.write_record([
                format!("{}", c.contrast),
                format!("{}", c.se),
                format!("{}", c.t_stat),
                format!("{}", c.p_value),
                format!("{}", c.ci_lower),
                format!("{}", c.ci_upper),
                format!("{}", c.estimate1),
                format!("{}", c.estimate2),
            ])
            .map_err(|e| Error::Cli(e.to_string()))?;
            String::from_utf8(wtr.into_inner().map_err(|e| Error::Cli(e.to_string()))?)
                .expect("utf8")
        }
        OutputFormat::Json => serde_json::to_string_pretty(c).expect("serializable"),
    })
}

// ---------------------------------------------------------------------------
// Model summary
// ---------------------------------------------------------------------------

pub fn render_model_text(model: &crate::model::FittedModel) -> String {
    let labels = model.coefficient_labels();
    let mut out = format!(
        "Model: {} ({:?}, link={}) N={} dof={}\n",
        model.formula_text,
        model.family,
        model.link.name(),
        model.n,
        model.dof_residual
    );
    let headers: Vec<String> = ["Term", "Estimate", "Std. Err.", "z", "p-value"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut body = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let se = model.covariance[(i, i)].max(0.0).sqrt();
        let (z, p, _, _) = z_p_ci(model.beta[i], se);
        body.push(vec![
            label.clone(),
            sig5(model.beta[i]),
            sig5(se),
            sig5(z),
            sig5(p),
        ]);
    }
    out.push_str(&layout(&headers, &body));
    for w in &model.warnings {
        out.push_str(&format!("note: {w}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::{population_margins, MarginsOptions};
    use crate::model::fit_ols;
    use crate::tables::{Column, Table};
    use std::collections::HashMap;

    fn table() -> Table {
        Table::new(vec![
            (
                "y".into(),
                Column::Numeric(vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0]),
            ),
            (
                "x".into(),
                Column::Numeric(vec![0.0, 1.0, 2.0, 3.0, 1.5, 2.5]),
            ),
            (
                "g".into(),
                Column::Categorical {
                    codes: vec![0, 1, 0, 1, 0, 1],
                    levels: vec!["A".into(), "B".into()],
                },
            ),
        ])
        .unwrap()
    }

    #[test]
    fn sig5_rounds_and_trims() {
        assert_eq!(sig5(0.397294), "0.39729");
        assert_eq!(sig5(-0.0243649), "-0.024365");
        assert_eq!(sig5(0.0), "0");
        assert_eq!(sig5(1.0), "1");
        assert_eq!(sig5(12345.678), "12346");
        assert_eq!(sig5(0.007), "0.007");
    }

    #[test]
    fn effects_text_layout() {
        let t = table();
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let text = render_effects_text(out.as_effects().unwrap());
        assert!(text.starts_with("EffectsResult: 2 population effects (N=6)\n"));
        assert!(text.contains("Variable"));
        assert!(text.contains("dy/dx"));
        assert!(text.contains("B - A"));
        assert!(text.contains("[95% Conf."));
        assert!(!text.contains("Scenarios:"));
        // three dashed rules
        assert_eq!(text.matches("----").count() >= 3, true);
    }

    #[test]
    fn scenarios_line_and_at_column() {
        let t = table();
        let m = fit_ols("y ~ x * g", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                scenarios: vec![(
                    "g".into(),
                    vec![
                        crate::tables::ScalarValue::Level("A".into()),
                        crate::tables::ScalarValue::Level("B".into()),
                    ],
                )],
                ..Default::default()
            },
        )
        .unwrap();
        let text = render_effects_text(out.as_effects().unwrap());
        assert!(text.contains("Scenarios: g\n"));
        assert!(text.contains("at_g"));
        assert!(text.contains("derivative"));
    }

    #[test]
    fn csv_has_full_precision() {
        let t = table();
        let m = fit_ols("y ~ x", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let e = out.as_effects().unwrap();
        let csv_text = render_effects_csv(e, true);
        // the exact shortest round-trip representation appears in the CSV
        assert!(csv_text.contains(&format!("{}", e.estimates[0])));
        assert!(csv_text.contains("gradient_0"));
        let without = render_effects_csv(e, false);
        assert!(!without.contains("gradient_0"));
    }

    #[test]
    fn json_round_trips() {
        let t = table();
        let m = fit_ols("y ~ x", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        let e = out.as_effects().unwrap();
        let text = render_effects_json(e, true);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(
            v["effects"][0]["estimate"].as_f64().unwrap(),
            e.estimates[0]
        );
        assert_eq!(v["metadata"]["n"].as_u64().unwrap(), 6);
    }

    #[test]
    fn seconddiff_table_layout() {
        let rows = vec![SecondDifferenceRow {
            focal: "x".into(),
            moderator: "g".into(),
            levels: "A vs B".into(),
            delta: 0.011,
            se: 0.0172,
            z: 0.64,
            p_value: 0.522,
        }];
        let text = render_seconddiff_text(&rows);
        assert!(text.contains("Levels"));
        assert!(text.contains("Delta(dy/dx)"));
        assert!(text.contains("A vs B"));
        assert!(text.contains("p-value"));
    }
}
