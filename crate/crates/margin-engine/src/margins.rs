//! Population and profile margins: average marginal effects, adjusted
//! predictions, elasticities, categorical contrasts, scenarios, groups, and
//! weights, with delta-method standard errors.
//!
//! Population accumulation is strictly O(p): per-row effect and gradient
//! contributions stream into fixed-size buffers (never an n x p
//! intermediate). Rows are split into a fixed number of chunks whose partial
//! sums are combined in chunk order, so results are bit-identical for any
//! worker count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::compiler::{Data, Evaluator};
use crate::diff::{
    build_derivative_evaluator, dot, link_eval, std_normal, DerivativeEvaluator, DiffBackend,
    LinkFunction, LinkPart, NormalPart,
};
use crate::error::{Error, Result};
use crate::model::FittedModel;
use crate::schema::CategoricalMixture;
use crate::tables::{
    column_stats, create_scenario, Column, ColumnKind, ScalarValue, Table,
};

// ---------------------------------------------------------------------------
// Options
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Effects,
    Predictions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Response scale mu = g^-1(eta) (the default).
    #[default]
    Mu,
    /// Linear-predictor scale.
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    #[default]
    Effect,
    /// (dy/dx) * x / y
    Elasticity,
    /// (dy/dx) * x
    Dyex,
    /// (dy/dx) / y
    Eydx,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Effect => "effect",
            Measure::Elasticity => "elasticity",
            Measure::Dyex => "dyex",
            Measure::Eydx => "eydx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    /// Each non-base level against the base level (the default).
    #[default]
    Baseline,
    /// All unordered level pairs.
    Pairwise,
}

/// Options shared by population and profile margins.
#[derive(Debug, Clone, Default)]
pub struct MarginsOptions {
    pub target: Target,
    /// Variables to analyze; defaults to every model covariate.
    pub vars: Option<Vec<String>>,
    pub scale: Scale,
    pub measure: Measure,
    pub contrast: ContrastKind,
    /// Counterfactual overrides: each name gets a list of values; results
    /// cover the cartesian product (first-named varying fastest).
    pub scenarios: Vec<(String, Vec<ScalarValue>)>,
    /// Categorical column partitioning rows into subgroups.
    pub groups: Option<String>,
    /// Numeric column of nonnegative observation weights.
    pub weights: Option<String>,
    /// Worker threads; falls back to MARGIN_ENGINE_THREADS, then 1.
    pub threads: Option<usize>,
}

/// Resolve the worker count from an explicit option or the environment.
pub fn resolve_threads(opt: Option<usize>) -> usize {
    opt.or_else(|| {
        std::env::var("MARGIN_ENGINE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MarginsMetadata {
    pub n: usize,
    pub target: Target,
    pub scale: Scale,
    pub measure: Measure,
    pub vcov: String,
    /// "population" or "profile".
    pub kind: String,
    pub warnings: Vec<String>,
}

/// Marginal effects with delta-method inference. Parallel vectors, one entry
/// per estimate.
#[derive(Debug, Clone, Serialize)]
pub struct EffectsResult {
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub variables: Vec<String>,
    /// Contrast labels: "dy/dx" for derivatives, "B - A" for level contrasts.
    pub terms: Vec<String>,
    /// Per-estimate (column, value) pairs from scenarios or profile grids.
    pub at_values: Vec<Vec<(String, String)>>,
    pub group_values: Option<Vec<String>>,
    /// One p-vector per estimate.
    pub gradients: Vec<Vec<f64>>,
    pub metadata: MarginsMetadata,
}

/// Adjusted predictions with delta-method inference.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionsResult {
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub at_values: Vec<Vec<(String, String)>>,
    pub group_values: Option<Vec<String>>,
    pub gradients: Vec<Vec<f64>>,
    pub metadata: MarginsMetadata,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum MarginsOutput {
    Effects(EffectsResult),
    Predictions(PredictionsResult),
}

impl MarginsOutput {
    pub fn as_effects(&self) -> Option<&EffectsResult> {
        match self {
            MarginsOutput::Effects(e) => Some(e),
            _ => None,
        }
    }

    pub fn as_predictions(&self) -> Option<&PredictionsResult> {
        match self {
            MarginsOutput::Predictions(p) => Some(p),
            _ => None,
        }
    }

    pub fn estimates(&self) -> &[f64] {
        match self {
            MarginsOutput::Effects(e) => &e.estimates,
            MarginsOutput::Predictions(p) => &p.estimates,
        }
    }

    pub fn gradients(&self) -> &[Vec<f64>] {
        match self {
            MarginsOutput::Effects(e) => &e.gradients,
            MarginsOutput::Predictions(p) => &p.gradients,
        }
    }

    pub fn standard_errors(&self) -> &[f64] {
        match self {
            MarginsOutput::Effects(e) => &e.standard_errors,
            MarginsOutput::Predictions(p) => &p.standard_errors,
        }
    }
}

// ---------------------------------------------------------------------------
// Delta method & measures
// ---------------------------------------------------------------------------

/// Delta-method standard error sqrt(g' Sigma g). Quadratic forms below
/// -1e-10 raise an error; tiny negatives clamp to zero.
pub fn delta_method_se(gradient: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
    let p = gradient.len();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::Margins(format!(
            "gradient length {p} does not match covariance {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let mut quad = 0.0;
    for i in 0..p {
        let mut row = 0.0;
        for j in 0..p {
            row += sigma[(i, j)] * gradient[j];
        }
        quad += gradient[i] * row;
    }
    if quad < -1e-10 {
        return Err(Error::Margins(format!(
            "delta-method quadratic form is negative ({quad}); covariance is not PSD"
        )));
    }
    Ok(quad.max(0.0).sqrt())
}

/// z statistic, two-sided p-value, and 95% CI from an estimate and SE.
/// SE = 0 reports z = 0, p = 1 (degenerate convention).
pub fn z_p_ci(estimate: f64, se: f64) -> (f64, f64, f64, f64) {
    let z975 = std_normal(NormalPart::Quantile, 0.975).expect("0.975 in range");
    if se > 0.0 {
        let z = estimate / se;
        let p = 2.0 * std_normal(NormalPart::Cdf, -z.abs()).expect("finite z");
        (z, p, estimate - z975 * se, estimate + z975 * se)
    } else {
        (0.0, 1.0, estimate, estimate)
    }
}

/// Transform a raw effect `m` into the requested measure, writing the
/// beta-gradient of the transformed quantity into `out`.
///
/// `x` is the covariate value, `mu` the prediction on the active scale,
/// `grad_m` the gradient of m, `grad_mu` the gradient of mu.
pub fn apply_measure(
    measure: Measure,
    m: f64,
    x: f64,
    mu: f64,
    grad_m: &[f64],
    grad_mu: &[f64],
    out: &mut [f64],
) -> Result<f64> {
    match measure {
        Measure::Effect => {
            out.copy_from_slice(grad_m);
            Ok(m)
        }
        Measure::Dyex => {
            for (o, g) in out.iter_mut().zip(grad_m) {
                *o = x * g;
            }
            Ok(m * x)
        }
        Measure::Elasticity => {
            if mu.abs() < 1e-12 {
                return Err(Error::Margins(
                    "elasticity undefined: prediction is zero".into(),
                ));
            }
            for ((o, gm), gmu) in out.iter_mut().zip(grad_m).zip(grad_mu) {
                *o = (x / mu) * gm - (m * x / (mu * mu)) * gmu;
            }
            Ok(m * x / mu)
        }
        Measure::Eydx => {
            if mu.abs() < 1e-12 {
                return Err(Error::Margins(
                    "eydx undefined: prediction is zero".into(),
                ));
            }
            for ((o, gm), gmu) in out.iter_mut().zip(grad_m).zip(grad_mu) {
                *o = gm / mu - (m / (mu * mu)) * gmu;
            }
            Ok(m / mu)
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic chunked accumulation
// ---------------------------------------------------------------------------

/// Number of row chunks, fixed so partial-sum structure (and therefore the
/// floating-point result) is independent of both n and worker count.
const N_CHUNKS: usize = 64;

/// Process `rows` in N_CHUNKS fixed chunks. Each worker builds its own state
/// via `init` and adds per-row contributions into a chunk accumulator of
/// length `acc_len`; chunk partials are folded in chunk order.
fn chunked_pass<S, I, F>(
    rows: &[usize],
    threads: usize,
    acc_len: usize,
    init: I,
    row_fn: F,
) -> Result<Vec<f64>>
where
    I: Fn() -> Result<S> + Sync,
    F: Fn(&mut S, usize, &mut [f64]) -> Result<()> + Sync,
{
    let n = rows.len();
    let bounds: Vec<(usize, usize)> = (0..N_CHUNKS)
        .map(|c| (c * n / N_CHUNKS, (c + 1) * n / N_CHUNKS))
        .collect();
    let mut partials: Vec<Vec<f64>> = Vec::with_capacity(N_CHUNKS);
    if threads <= 1 {
        let mut state = init()?;
        for &(lo, hi) in &bounds {
            let mut acc = vec![0.0; acc_len];
            for &row in &rows[lo..hi] {
                row_fn(&mut state, row, &mut acc)?;
            }
            partials.push(acc);
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<Vec<f64>>>>> =
            (0..N_CHUNKS).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| {
                    let mut state = match init() {
                        Ok(s) => s,
                        Err(e) => {
                            let c = next.fetch_add(1, Ordering::SeqCst);
                            if c < N_CHUNKS {
                                *slots[c].lock().unwrap() = Some(Err(e));
                            }
                            return;
                        }
                    };
                    loop {
                        let c = next.fetch_add(1, Ordering::SeqCst);
                        if c >= N_CHUNKS {
                            break;
                        }
                        let (lo, hi) = bounds[c];
                        let mut acc = vec![0.0; acc_len];
                        let mut res = Ok(());
                        for &row in &rows[lo..hi] {
                            if let Err(e) = row_fn(&mut state, row, &mut acc) {
                                res = Err(e);
                                break;
                            }
                        }
                        *slots[c].lock().unwrap() = Some(res.map(|()| acc));
                    }
                });
            }
        });
        for slot in slots {
            let value = slot
                .into_inner()
                .unwrap()
                .unwrap_or_else(|| Err(Error::Margins("worker chunk was not processed".into())));
            partials.push(value?);
        }
    }
    let mut total = vec![0.0; acc_len];
    for acc in &partials {
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Population margins
// ---------------------------------------------------------------------------

/// Per-scale link quantities for one row.
struct ScaleQuantities {
    pred: f64,
    d1: f64,
    d2: f64,
}

fn scale_quantities(scale: Scale, link: LinkFunction, eta: f64) -> Result<ScaleQuantities> {
    Ok(match scale {
        Scale::Eta => ScaleQuantities {
            pred: eta,
            d1: 1.0,
            d2: 0.0,
        },
        Scale::Mu => ScaleQuantities {
            pred: link_eval(link, LinkPart::Inv, eta)?,
            d1: link_eval(link, LinkPart::D1, eta)?,
            d2: link_eval(link, LinkPart::D2, eta)?,
        },
    })
}

#[derive(Debug, Clone)]
struct ScenarioCombo {
    overrides: Vec<(String, ScalarValue)>,
    display: Vec<(String, String)>,
}

fn scalar_display(v: &ScalarValue) -> String {
    match v {
        ScalarValue::Number(x) => format!("{x}"),
        ScalarValue::Bool(b) => format!("{b}"),
        ScalarValue::Level(l) => l.clone(),
    }
}

fn scenario_combos(scenarios: &[(String, Vec<ScalarValue>)]) -> Result<Vec<ScenarioCombo>> {
    for (name, values) in scenarios {
        if values.is_empty() {
            return Err(Error::Margins(format!(
                "scenario for '{name}' has no values"
            )));
        }
    }
    let mut combos = vec![ScenarioCombo {
        overrides: Vec::new(),
        display: Vec::new(),
    }];
    // first-named variable varies fastest
    for (name, values) in scenarios {
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for v in values {
            for c in &combos {
                let mut combo = c.clone();
                combo.overrides.push((name.clone(), v.clone()));
                combo.display.push((name.clone(), scalar_display(v)));
                next.push(combo);
            }
        }
        // keep first-named fastest: values of later names vary slower
        combos = next;
    }
    // reorder: the loop above makes later names vary fastest; flip per name
    // by construction we appended per value outer, per combo inner, which
    // makes the *new* name vary slowest among existing combos -- that is the
    // desired "first-named fastest" ordering already.
    Ok(combos)
}

struct GroupSlice {
    label: Option<String>,
    rows: Vec<usize>,
}

fn group_slices(table: &Table, groups: &Option<String>) -> Result<Vec<GroupSlice>> {
    let n = table.nrows();
    match groups {
        None => Ok(vec![GroupSlice {
            label: None,
            rows: (0..n).collect(),
        }]),
        Some(name) => {
            let col = table.column(name)?;
            let levels = col.levels().ok_or_else(|| {
                Error::Margins(format!(
                    "groups column '{}' is {}, expected categorical or boolean",
                    name,
                    col.kind()
                ))
            })?;
            let codes: Vec<usize> = match col {
                Column::Categorical { codes, .. } => {
                    codes.iter().map(|&c| c as usize).collect()
                }
                Column::Boolean(v) => v.iter().map(|&b| b as usize).collect(),
                _ => unreachable!(),
            };
            let mut out = Vec::new();
            for (li, level) in levels.iter().enumerate() {
                let rows: Vec<usize> =
                    (0..n).filter(|&i| codes[i] == li).collect();
                if !rows.is_empty() {
                    out.push(GroupSlice {
                        label: Some(level.clone()),
                        rows,
                    });
                }
            }
            if out.is_empty() {
                return Err(Error::Margins(format!(
                    "groups column '{name}' produced no nonempty groups"
                )));
            }
            Ok(out)
        }
    }
}

fn weight_vector(table: &Table, weights: &Option<String>) -> Result<Vec<f64>> {
    let n = table.nrows();
    match weights {
        None => Ok(vec![1.0; n]),
        Some(name) => {
            let w: Vec<f64> = match table.column(name)? {
                Column::Numeric(v) => v.clone(),
                Column::Integer(v) => v.iter().map(|&x| x as f64).collect(),
                c => {
                    return Err(Error::Margins(format!(
                        "weights column '{}' is {}, expected numeric",
                        name,
                        c.kind()
                    )))
                }
            };
            if let Some(bad) = w.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Margins(format!(
                    "weights must be nonnegative and finite, found {bad}"
                )));
            }
            Ok(w)
        }
    }
}

/// The default analysis variables: every model covariate, in formula order.
fn default_vars(model: &FittedModel) -> Vec<String> {
    model.resolved.columns.clone()
}

/// Variable classification against the model.
enum VarKind {
    Continuous,
    Categorical { levels: Vec<String>, base: usize },
}

fn classify_var(model: &FittedModel, table: &Table, var: &str) -> Result<VarKind> {
    let id = model.resolved.column_id(var).ok_or_else(|| {
        Error::Margins(format!("variable '{var}' does not appear in the model"))
    })?;
    match model.resolved.column_kinds[id] {
        ColumnKind::Numeric | ColumnKind::Integer => Ok(VarKind::Continuous),
        ColumnKind::Boolean | ColumnKind::Categorical => {
            let levels = table.column(var)?.levels().ok_or_else(|| {
                Error::Margins(format!(
                    "model treats '{var}' as categorical but the data column is not"
                ))
            })?;
            // base level from the model's contrast for this column, if any
            let base = model
                .resolved
                .terms
                .iter()
                .find_map(|t| match t {
                    crate::schema::ResolvedTerm::Categorical { col, contrast }
                        if *col == id =>
                    {
                        Some(contrast.base)
                    }
                    _ => None,
                })
                .unwrap_or(0);
            Ok(VarKind::Categorical { levels, base })
        }
    }
}

fn level_pairs(
    levels: &[String],
    base: usize,
    kind: ContrastKind,
) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    match kind {
        ContrastKind::Baseline => {
            for (i, l) in levels.iter().enumerate() {
                if i != base {
                    out.push((base, i, format!("{} - {}", l, levels[base])));
                }
            }
        }
        ContrastKind::Pairwise => {
            for a in 0..levels.len() {
                for b in (a + 1)..levels.len() {
                    out.push((a, b, format!("{} - {}", levels[b], levels[a])));
                }
            }
        }
    }
    out
}

/// Weighted-average effect or prediction over a row subset: the generic
/// accumulator result.
struct Averaged {
    estimate: f64,
    gradient: Vec<f64>,
}

/// Continuous effects for all `vars` at once over `rows` of `data`.
fn continuous_effects_pass<D: Data + Sync>(
    model: &FittedModel,
    data: &D,
    vars: &[String],
    rows: &[usize],
    weights: &[f64],
    scale: Scale,
    measure: Measure,
    threads: usize,
) -> Result<Vec<Averaged>> {
    let p = model.p();
    let k = vars.len();
    let beta = &model.beta;
    let link = model.link;
    let acc_len = k * (p + 1) + 1;
    struct State<'d> {
        de: DerivativeEvaluator<'d>,
        x: Vec<f64>,
        j: Vec<f64>,
        gm: Vec<f64>,
        gmu: Vec<f64>,
        out: Vec<f64>,
    }
    let total = chunked_pass(
        rows,
        threads,
        acc_len,
        || {
            Ok(State {
                de: build_derivative_evaluator(&model.compiled, data, vars, DiffBackend::Ad)?,
                x: vec![0.0; p],
                j: vec![0.0; p * k],
                gm: vec![0.0; p],
                gmu: vec![0.0; p],
                out: vec![0.0; p],
            })
        },
        |s, row, acc| {
            s.de.row_and_jacobian(row, &mut s.x, &mut s.j)?;
            let eta = dot(&s.x, beta);
            let q = scale_quantities(scale, link, eta)?;
            let w = weights[row];
            if measure != Measure::Effect {
                for (g, &x) in s.gmu.iter_mut().zip(&s.x) {
                    *g = q.d1 * x;
                }
            }
            for l in 0..k {
                let mut jtb = 0.0;
                for jj in 0..p {
                    jtb += s.j[jj * k + l] * beta[jj];
                }
                let m = q.d1 * jtb;
                for jj in 0..p {
                    s.gm[jj] = q.d2 * jtb * s.x[jj] + q.d1 * s.j[jj * k + l];
                }
                let (est, grad): (f64, &[f64]) = if measure == Measure::Effect {
                    (m, &s.gm)
                } else {
                    let xv = s.de.var_value(l, row)?;
                    let est =
                        apply_measure(measure, m, xv, q.pred, &s.gm, &s.gmu, &mut s.out)
                            .map_err(|e| {
                                Error::Margins(format!("row {row}: {e}"))
                            })?;
                    (est, &s.out)
                };
                let off = l * (p + 1);
                acc[off] += w * est;
                for jj in 0..p {
                    acc[off + 1 + jj] += w * grad[jj];
                }
            }
            acc[k * (p + 1)] += w;
            Ok(())
        },
    )?;
    let wsum = total[k * (p + 1)];
    if wsum <= 0.0 {
        return Err(Error::Margins(
            "weights sum to zero over the selected rows".into(),
        ));
    }
    Ok((0..k)
        .map(|l| {
            let off = l * (p + 1);
            Averaged {
                estimate: total[off] / wsum,
                gradient: total[off + 1..off + 1 + p].iter().map(|g| g / wsum).collect(),
            }
        })
        .collect())
}

/// Categorical contrast (level b minus level a) averaged over `rows`, using
/// two scenario overlays that fix the variable at each level.
fn categorical_contrast_pass(
    model: &FittedModel,
    table: &Table,
    base_overrides: &[(String, ScalarValue)],
    var: &str,
    level_a: &str,
    level_b: &str,
    rows: &[usize],
    weights: &[f64],
    scale: Scale,
    threads: usize,
) -> Result<Averaged> {
    let p = model.p();
    let beta = &model.beta;
    let link = model.link;
    // the contrast override comes first so it wins over any scenario
    // override of the same column
    let mut ov_a = vec![(var.to_string(), ScalarValue::Level(level_a.to_string()))];
    ov_a.extend_from_slice(base_overrides);
    let mut ov_b = vec![(var.to_string(), ScalarValue::Level(level_b.to_string()))];
    ov_b.extend_from_slice(base_overrides);
    let overlay_a = create_scenario(table, &ov_a)?;
    let overlay_b = create_scenario(table, &ov_b)?;
    struct State<'d> {
        ea: Evaluator<'d>,
        eb: Evaluator<'d>,
        xa: Vec<f64>,
        xb: Vec<f64>,
    }
    let acc_len = p + 2;
    let total = chunked_pass(
        rows,
        threads,
        acc_len,
        || {
            Ok(State {
                ea: Evaluator::new(&model.compiled, &overlay_a)?,
                eb: Evaluator::new(&model.compiled, &overlay_b)?,
                xa: vec![0.0; p],
                xb: vec![0.0; p],
            })
        },
        |s, row, acc| {
            s.ea.evaluate_row(row, &mut s.xa)?;
            s.eb.evaluate_row(row, &mut s.xb)?;
            let eta_a = dot(&s.xa, beta);
            let eta_b = dot(&s.xb, beta);
            let qa = scale_quantities(scale, link, eta_a)?;
            let qb = scale_quantities(scale, link, eta_b)?;
            let w = weights[row];
            acc[0] += w * (qb.pred - qa.pred);
            for jj in 0..p {
                acc[1 + jj] += w * (qb.d1 * s.xb[jj] - qa.d1 * s.xa[jj]);
            }
            acc[p + 1] += w;
            Ok(())
        },
    )?;
    let wsum = total[p + 1];
    if wsum <= 0.0 {
        return Err(Error::Margins(
            "weights sum to zero over the selected rows".into(),
        ));
    }
    Ok(Averaged {
        estimate: total[0] / wsum,
        gradient: total[1..1 + p].iter().map(|g| g / wsum).collect(),
    })
}

/// Average adjusted prediction over `rows` of `data`.
fn predictions_pass<D: Data + Sync>(
    model: &FittedModel,
    data: &D,
    rows: &[usize],
    weights: &[f64],
    scale: Scale,
    threads: usize,
) -> Result<Averaged> {
    let p = model.p();
    let beta = &model.beta;
    let link = model.link;
    struct State<'d> {
        e: Evaluator<'d>,
        x: Vec<f64>,
    }
    let total = chunked_pass(
        rows,
        threads,
        p + 2,
        || {
            Ok(State {
                e: Evaluator::new(&model.compiled, data)?,
                x: vec![0.0; p],
            })
        },
        |s, row, acc| {
            s.e.evaluate_row(row, &mut s.x)?;
            let eta = dot(&s.x, beta);
            let q = scale_quantities(scale, link, eta)?;
            let w = weights[row];
            acc[0] += w * q.pred;
            for jj in 0..p {
                acc[1 + jj] += w * q.d1 * s.x[jj];
            }
            acc[p + 1] += w;
            Ok(())
        },
    )?;
    let wsum = total[p + 1];
    if wsum <= 0.0 {
        return Err(Error::Margins(
            "weights sum to zero over the selected rows".into(),
        ));
    }
    Ok(Averaged {
        estimate: total[0] / wsum,
        gradient: total[1..1 + p].iter().map(|g| g / wsum).collect(),
    })
}

/// Compute population margins: effects or predictions averaged over the
/// observed rows (optionally weighted, per scenario combination, per group).
pub fn population_margins(
    model: &FittedModel,
    table: &Table,
    sigma: &DMatrix<f64>,
    vcov_label: &str,
    options: &MarginsOptions,
) -> Result<MarginsOutput> {
    let threads = resolve_threads(options.threads);
    let weights = weight_vector(table, &options.weights)?;
    let groups = group_slices(table, &options.groups)?;
    let combos = scenario_combos(&options.scenarios)?;
    let mut warnings = Vec::new();
    let grouped = options.groups.is_some();
    let metadata = |warnings: Vec<String>| MarginsMetadata {
        n: table.nrows(),
        target: options.target,
        scale: options.scale,
        measure: options.measure,
        vcov: vcov_label.to_string(),
        kind: "population".to_string(),
        warnings,
    };
    match options.target {
        Target::Predictions => {
            if options.vars.is_some() {
                warnings
                    .push("vars is ignored for predictions (only meaningful for effects)".into());
            }
            if options.measure != Measure::Effect {
                return Err(Error::Margins(
                    "measures other than 'effect' require target=effects".into(),
                ));
            }
            let mut estimates = Vec::new();
            let mut ses = Vec::new();
            let mut ats = Vec::new();
            let mut group_vals = Vec::new();
            let mut gradients = Vec::new();
            for combo in &combos {
                let overlay = create_scenario(table, &combo.overrides)?;
                for g in &groups {
                    let avg = predictions_pass(
                        model,
                        &overlay,
                        &g.rows,
                        &weights,
                        options.scale,
                        threads,
                    )?;
                    ses.push(delta_method_se(&avg.gradient, sigma)?);
                    estimates.push(avg.estimate);
                    ats.push(combo.display.clone());
                    group_vals.push(g.label.clone().unwrap_or_default());
                    gradients.push(avg.gradient);
                }
            }
            Ok(MarginsOutput::Predictions(PredictionsResult {
                estimates,
                standard_errors: ses,
                at_values: ats,
                group_values: grouped.then_some(group_vals),
                gradients,
                metadata: metadata(warnings),
            }))
        }
        Target::Effects => {
            let vars = options.vars.clone().unwrap_or_else(|| default_vars(model));
            if vars.is_empty() {
                return Err(Error::Margins("no variables to analyze".into()));
            }
            let kinds: Vec<VarKind> = vars
                .iter()
                .map(|v| classify_var(model, table, v))
                .collect::<Result<_>>()?;
            if options.measure != Measure::Effect {
                if let Some((v, _)) = vars
                    .iter()
                    .zip(&kinds)
                    .find(|(_, k)| matches!(k, VarKind::Categorical { .. }))
                {
                    return Err(Error::Margins(format!(
                        "measure '{}' requires continuous variables; '{}' is categorical",
                        options.measure.name(),
                        v
                    )));
                }
            }
            let continuous: Vec<String> = vars
                .iter()
                .zip(&kinds)
                .filter(|(_, k)| matches!(k, VarKind::Continuous))
                .map(|(v, _)| v.clone())
                .collect();
            // one pass per (combo, group) covers every continuous variable
            let mut cont_results: Vec<Vec<Vec<Averaged>>> = Vec::new();
            for combo in &combos {
                let overlay = create_scenario(table, &combo.overrides)?;
                let mut per_group = Vec::new();
                for g in &groups {
                    let avgs = if continuous.is_empty() {
                        Vec::new()
                    } else {
                        continuous_effects_pass(
                            model,
                            &overlay,
                            &continuous,
                            &g.rows,
                            &weights,
                            options.scale,
                            options.measure,
                            threads,
                        )?
                    };
                    per_group.push(avgs);
                }
                cont_results.push(per_group);
            }
            let mut estimates = Vec::new();
            let mut ses = Vec::new();
            let mut variables = Vec::new();
            let mut terms = Vec::new();
            let mut ats = Vec::new();
            let mut group_vals = Vec::new();
            let mut gradients = Vec::new();
            let has_scenarios = !options.scenarios.is_empty();
            for (var, kind) in vars.iter().zip(&kinds) {
                match kind {
                    VarKind::Continuous => {
                        let l = continuous.iter().position(|v| v == var).unwrap();
                        let term = if options.measure == Measure::Effect {
                            if has_scenarios { "derivative" } else { "dy/dx" }.to_string()
                        } else {
                            options.measure.name().to_string()
                        };
                        for (ci, combo) in combos.iter().enumerate() {
                            for (gi, g) in groups.iter().enumerate() {
                                let avg = &cont_results[ci][gi][l];
                                ses.push(delta_method_se(&avg.gradient, sigma)?);
                                estimates.push(avg.estimate);
                                variables.push(var.clone());
                                terms.push(term.clone());
                                ats.push(combo.display.clone());
                                group_vals.push(g.label.clone().unwrap_or_default());
                                gradients.push(avg.gradient.clone());
                            }
                        }
                    }
                    VarKind::Categorical { levels, base } => {
                        for (a, b, label) in level_pairs(levels, *base, options.contrast) {
                            for combo in &combos {
                                for g in &groups {
                                    let avg = categorical_contrast_pass(
                                        model,
                                        table,
                                        &combo.overrides,
                                        var,
                                        &levels[a],
                                        &levels[b],
                                        &g.rows,
                                        &weights,
                                        options.scale,
                                        threads,
                                    )?;
                                    ses.push(delta_method_se(&avg.gradient, sigma)?);
                                    estimates.push(avg.estimate);
                                    variables.push(var.clone());
                                    terms.push(label.clone());
                                    ats.push(combo.display.clone());
                                    group_vals.push(g.label.clone().unwrap_or_default());
                                    gradients.push(avg.gradient);
                                }
                            }
                        }
                    }
                }
            }
            Ok(MarginsOutput::Effects(EffectsResult {
                estimates,
                standard_errors: ses,
                variables,
                terms,
                at_values: ats,
                group_values: grouped.then_some(group_vals),
                gradients,
                metadata: metadata(warnings),
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Reference grids
// ---------------------------------------------------------------------------

/// One grid cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Number(f64),
    Bool(bool),
    Level(String),
    Mixture(CategoricalMixture),
}

impl GridValue {
    fn display(&self) -> String {
        match self {
            GridValue::Number(x) => format!("{x}"),
            GridValue::Bool(b) => format!("{b}"),
            GridValue::Level(l) => l.clone(),
            GridValue::Mixture(m) => {
                let parts: Vec<String> = m
                    .levels
                    .iter()
                    .zip(&m.weights)
                    .map(|(l, w)| format!("{l}:{w}"))
                    .collect();
                format!("mix({})", parts.join(","))
            }
        }
    }
}

/// A profile reference grid: each row maps columns to values; unspecified
/// model columns are filled with typical values at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    pub rows: Vec<Vec<(String, GridValue)>>,
}

/// Typical value of a column: the mean for numerics, the frequency-weighted
/// level mixture for categoricals and booleans.
fn typical_value(table: &Table, name: &str) -> Result<GridValue> {
    match table.column(name)? {
        Column::Numeric(_) | Column::Integer(_) => {
            Ok(GridValue::Number(column_stats(table, name)?.mean))
        }
        Column::Boolean(_) | Column::Categorical { .. } => Ok(GridValue::Mixture(
            crate::schema::default_mixture(table, name)?,
        )),
    }
}

/// One-row grid at sample means (numerics) and default mixtures
/// (categoricals), with optional explicit overrides.
pub fn means_grid(table: &Table, overrides: &[(String, GridValue)]) -> Result<ReferenceGrid> {
    if table.nrows() == 0 {
        return Err(Error::Margins("cannot build a means grid from an empty table".into()));
    }
    let mut row = Vec::new();
    for name in table.column_names().map(String::from).collect::<Vec<_>>() {
        if let Some((_, v)) = overrides.iter().find(|(n, _)| *n == name) {
            row.push((name, v.clone()));
        } else {
            row.push((name.clone(), typical_value(table, &name)?));
        }
    }
    for (name, _) in overrides {
        if table.column(name).is_err() {
            return Err(Error::Margins(format!("unknown grid column '{name}'")));
        }
    }
    Ok(ReferenceGrid { rows: vec![row] })
}

/// Cartesian product of explicit value lists; the first-named variable
/// varies fastest.
pub fn cartesian_grid(specs: &[(String, Vec<GridValue>)]) -> Result<ReferenceGrid> {
    if specs.is_empty() || specs.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Margins(
            "cartesian grid needs at least one variable with at least one value".into(),
        ));
    }
    let mut rows: Vec<Vec<(String, GridValue)>> = vec![Vec::new()];
    for (name, values) in specs {
        let mut next = Vec::with_capacity(rows.len() * values.len());
        for v in values {
            for r in &rows {
                let mut row = r.clone();
                row.push((name.clone(), v.clone()));
                next.push(row);
            }
        }
        rows = next;
    }
    Ok(ReferenceGrid { rows })
}

/// Cartesian product of the full level sets of the named categorical (or
/// boolean) columns.
pub fn balanced_grid(table: &Table, vars: &[String]) -> Result<ReferenceGrid> {
    if vars.is_empty() {
        return Err(Error::Margins("balanced grid needs at least one variable".into()));
    }
    let mut specs = Vec::new();
    for v in vars {
        let levels = table.column(v)?.levels().ok_or_else(|| {
            Error::Margins(format!(
                "balanced grid variable '{v}' must be categorical or boolean"
            ))
        })?;
        let values: Vec<GridValue> = levels.into_iter().map(GridValue::Level).collect();
        specs.push((v.clone(), values));
    }
    cartesian_grid(&specs)
}

/// One grid row per probability, at that variable's sample quantiles.
pub fn quantile_grid(table: &Table, var: &str, probs: &[f64]) -> Result<ReferenceGrid> {
    if probs.is_empty() {
        return Err(Error::Margins("quantile grid needs at least one probability".into()));
    }
    let stats = column_stats(table, var)?;
    let mut rows = Vec::new();
    for &q in probs {
        rows.push(vec![(var.to_string(), GridValue::Number(stats.quantile(q)?))]);
    }
    Ok(ReferenceGrid { rows })
}

// ---------------------------------------------------------------------------
// Profile margins
// ---------------------------------------------------------------------------

/// A fully resolved evaluation point: every model covariate fixed or mixed.
struct ProfilePoint {
    fixed: Vec<(String, ScalarValue)>,
    mixtures: Vec<(String, CategoricalMixture)>,
    display: Vec<(String, String)>,
}

fn resolve_point(
    model: &FittedModel,
    table: &Table,
    grid_row: &[(String, GridValue)],
) -> Result<ProfilePoint> {
    for (name, _) in grid_row {
        if table.column(name).is_err() {
            return Err(Error::Margins(format!("unknown grid column '{name}'")));
        }
    }
    let mut fixed = Vec::new();
    let mut mixtures = Vec::new();
    let mut display = Vec::new();
    for binding in &model.compiled.bindings {
        let name = &binding.name;
        let value = grid_row
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .map(Ok)
            .unwrap_or_else(|| typical_value(table, name))?;
        match &value {
            GridValue::Number(x) => {
                let kind = table.column(name)?.kind();
                if !matches!(kind, ColumnKind::Numeric | ColumnKind::Integer) {
                    return Err(Error::Margins(format!(
                        "numeric grid value for non-numeric column '{name}'"
                    )));
                }
                fixed.push((name.clone(), ScalarValue::Number(*x)));
            }
            GridValue::Bool(b) => fixed.push((name.clone(), ScalarValue::Bool(*b))),
            GridValue::Level(l) => fixed.push((name.clone(), ScalarValue::Level(l.clone()))),
            GridValue::Mixture(m) => {
                let col = table.column(name)?;
                m.validate_against(col, name)?;
                mixtures.push((name.clone(), m.clone()));
            }
        }
    }
    // display only what the grid row states explicitly
    for (name, v) in grid_row {
        if model.resolved.column_id(name).is_some() {
            display.push((name.clone(), v.display()));
        }
    }
    Ok(ProfilePoint {
        fixed,
        mixtures,
        display,
    })
}

/// Build the one-row table for a point with each mixture column pinned to the
/// chosen level index.
fn point_table(
    model: &FittedModel,
    table: &Table,
    point: &ProfilePoint,
    mixture_levels: &[usize],
    extra: &[(String, ScalarValue)],
) -> Result<Table> {
    let mut columns: Vec<(String, Column)> = Vec::new();
    let lookup = |name: &str| -> Option<&ScalarValue> {
        extra
            .iter()
            .find(|(n, _)| n == name)
            .or_else(|| point.fixed.iter().find(|(n, _)| n == name))
            .map(|(_, v)| v)
    };
    for binding in &model.compiled.bindings {
        let name = &binding.name;
        let base_col = table.column(name)?;
        let value: ScalarValue = if let Some(v) = lookup(name) {
            v.clone()
        } else if let Some(mi) = point.mixtures.iter().position(|(n, _)| n == name) {
            ScalarValue::Level(point.mixtures[mi].1.levels[mixture_levels[mi]].clone())
        } else {
            return Err(Error::Margins(format!(
                "column '{name}' is unresolved at this profile point"
            )));
        };
        let col = match (base_col, &value) {
            (Column::Numeric(_) | Column::Integer(_), ScalarValue::Number(x)) => {
                Column::Numeric(vec![*x])
            }
            (Column::Boolean(_), ScalarValue::Bool(b)) => Column::Boolean(vec![*b]),
            (Column::Boolean(_), ScalarValue::Level(l)) => match l.as_str() {
                "true" => Column::Boolean(vec![true]),
                "false" => Column::Boolean(vec![false]),
                other => {
                    return Err(Error::Margins(format!(
                        "level '{other}' is not a boolean value for column '{name}'"
                    )))
                }
            },
            (Column::Categorical { levels, .. }, ScalarValue::Level(l)) => {
                let code = levels.iter().position(|lv| lv == l).ok_or_else(|| {
                    Error::Margins(format!("level '{l}' not found in column '{name}'"))
                })? as u32;
                Column::Categorical {
                    codes: vec![code],
                    levels: levels.clone(),
                }
            }
            (c, v) => {
                return Err(Error::Margins(format!(
                    "grid value {v:?} does not match {} column '{name}'",
                    c.kind()
                )))
            }
        };
        columns.push((name.clone(), col));
    }
    Table::new(columns)
}

/// Enumerate mixture level combinations with their product weights, skipping
/// any mixture named in `skip`.
fn mixture_combos(
    point: &ProfilePoint,
    skip: Option<&str>,
) -> Vec<(Vec<usize>, f64)> {
    let mut combos: Vec<(Vec<usize>, f64)> = vec![(vec![0; point.mixtures.len()], 1.0)];
    let mut out = vec![(vec![0; point.mixtures.len()], 1.0)];
    out.clear();
    combos.clear();
    combos.push((vec![0; point.mixtures.len()], 1.0));
    for (mi, (name, mixture)) in point.mixtures.iter().enumerate() {
        if skip == Some(name.as_str()) {
            continue;
        }
        let mut next = Vec::with_capacity(combos.len() * mixture.levels.len());
        for (idx, w) in &combos {
            for (li, &lw) in mixture.weights.iter().enumerate() {
                let mut v = idx.clone();
                v[mi] = li;
                next.push((v, w * lw));
            }
        }
        combos = next;
    }
    out.extend(combos);
    out
}

/// Evaluate a quantity at a point, combining mixture levels by weight.
fn at_point<Q>(
    model: &FittedModel,
    table: &Table,
    point: &ProfilePoint,
    skip_mixture: Option<&str>,
    extra_builder: impl Fn(&Table) -> Result<Q>,
) -> Result<Q>
where
    Q: WeightedCombine,
{
    let combos = mixture_combos(point, skip_mixture);
    let mut acc: Option<Q> = None;
    for (levels, w) in &combos {
        let t = point_table(model, table, point, levels, &[])?;
        let q = extra_builder(&t)?;
        acc = Some(match acc {
            None => q.scaled(*w),
            Some(a) => a.add_scaled(&q, *w),
        });
    }
    acc.ok_or_else(|| Error::Margins("profile point produced no evaluations".into()))
}

trait WeightedCombine: Sized {
    fn scaled(&self, w: f64) -> Self;
    fn add_scaled(self, other: &Self, w: f64) -> Self;
}

impl WeightedCombine for Averaged {
    fn scaled(&self, w: f64) -> Self {
        Averaged {
            estimate: self.estimate * w,
            gradient: self.gradient.iter().map(|g| g * w).collect(),
        }
    }
    fn add_scaled(mut self, other: &Self, w: f64) -> Self {
        self.estimate += other.estimate * w;
        for (a, b) in self.gradient.iter_mut().zip(&other.gradient) {
            *a += b * w;
        }
        self
    }
}

/// Compute margins at the points of a reference grid.
pub fn profile_margins(
    model: &FittedModel,
    table: &Table,
    grid: &ReferenceGrid,
    sigma: &DMatrix<f64>,
    vcov_label: &str,
    options: &MarginsOptions,
) -> Result<MarginsOutput> {
    if grid.rows.is_empty() {
        return Err(Error::Margins("reference grid has no rows".into()));
    }
    let points: Vec<ProfilePoint> = grid
        .rows
        .iter()
        .map(|r| resolve_point(model, table, r))
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let metadata = |warnings: Vec<String>| MarginsMetadata {
        n: table.nrows(),
        target: options.target,
        scale: options.scale,
        measure: options.measure,
        vcov: vcov_label.to_string(),
        kind: "profile".to_string(),
        warnings,
    };
    let single_weights = [1.0f64];
    match options.target {
        Target::Predictions => {
            if options.vars.is_some() {
                warnings
                    .push("vars is ignored for predictions (only meaningful for effects)".into());
            }
            let mut estimates = Vec::new();
            let mut ses = Vec::new();
            let mut ats = Vec::new();
            let mut gradients = Vec::new();
            for point in &points {
                let avg = at_point(model, table, point, None, |t| {
                    predictions_pass(model, t, &[0], &single_weights, options.scale, 1)
                })?;
                ses.push(delta_method_se(&avg.gradient, sigma)?);
                estimates.push(avg.estimate);
                ats.push(point.display.clone());
                gradients.push(avg.gradient);
            }
            Ok(MarginsOutput::Predictions(PredictionsResult {
                estimates,
                standard_errors: ses,
                at_values: ats,
                group_values: None,
                gradients,
                metadata: metadata(warnings),
            }))
        }
        Target::Effects => {
            let vars = options.vars.clone().unwrap_or_else(|| default_vars(model));
            let kinds: Vec<VarKind> = vars
                .iter()
                .map(|v| classify_var(model, table, v))
                .collect::<Result<_>>()?;
            let mut estimates = Vec::new();
            let mut ses = Vec::new();
            let mut variables = Vec::new();
            let mut terms = Vec::new();
            let mut ats = Vec::new();
            let mut gradients = Vec::new();
            for (var, kind) in vars.iter().zip(&kinds) {
                match kind {
                    VarKind::Continuous => {
                        if options.measure != Measure::Effect {
                            // measure needs the point's own x value; handled
                            // inside the pass exactly as in population mode
                        }
                        let term = if options.measure == Measure::Effect {
                            "dy/dx".to_string()
                        } else {
                            options.measure.name().to_string()
                        };
                        for point in &points {
                            let vars_one = [var.clone()];
                            let avg = at_point(model, table, point, None, |t| {
                                Ok(continuous_effects_pass(
                                    model,
                                    t,
                                    &vars_one,
                                    &[0],
                                    &single_weights,
                                    options.scale,
                                    options.measure,
                                    1,
                                )?
                                .remove(0))
                            })?;
                            ses.push(delta_method_se(&avg.gradient, sigma)?);
                            estimates.push(avg.estimate);
                            variables.push(var.clone());
                            terms.push(term.clone());
                            ats.push(point.display.clone());
                            gradients.push(avg.gradient);
                        }
                    }
                    VarKind::Categorical { levels, base } => {
                        if options.measure != Measure::Effect {
                            return Err(Error::Margins(format!(
                                "measure '{}' requires continuous variables; '{}' is categorical",
                                options.measure.name(),
                                var
                            )));
                        }
                        for (a, b, label) in level_pairs(levels, *base, options.contrast) {
                            for point in &points {
                                let avg = at_point(model, table, point, Some(var), |t| {
                                    categorical_contrast_pass(
                                        model,
                                        t,
                                        &[],
                                        var,
                                        &levels[a],
                                        &levels[b],
                                        &[0],
                                        &single_weights,
                                        options.scale,
                                        1,
                                    )
                                })?;
                                ses.push(delta_method_se(&avg.gradient, sigma)?);
                                estimates.push(avg.estimate);
                                variables.push(var.clone());
                                terms.push(label.clone());
                                ats.push(point.display.clone());
                                gradients.push(avg.gradient);
                            }
                        }
                    }
                }
            }
            Ok(MarginsOutput::Effects(EffectsResult {
                estimates,
                standard_errors: ses,
                variables,
                terms,
                at_values: ats,
                group_values: None,
                gradients,
                metadata: metadata(warnings),
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_glm, fit_ols, Family};
    use crate::tables::Column;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn linear_table(n: usize, seed: u64) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(&z)
            .map(|(&x, &z)| 2.0 + 1.5 * x - 0.8 * z + rng.gen_range(-0.3..0.3))
            .collect();
        let g: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3u32)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
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
            ("w".into(), Column::Numeric(w)),
        ])
        .unwrap()
    }

    #[test]
    fn linear_ame_equals_coefficients() {
        let t = linear_table(300, 1);
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let opts = MarginsOptions {
            vars: Some(vec!["x".into(), "z".into()]),
            ..Default::default()
        };
        let out = population_margins(&m, &t, &m.covariance, "model", &opts).unwrap();
        let e = out.as_effects().unwrap();
        assert_relative_eq!(e.estimates[0], m.beta[1], epsilon = 1e-10);
        assert_relative_eq!(e.estimates[1], m.beta[2], epsilon = 1e-10);
        assert_relative_eq!(
            e.standard_errors[0],
            m.covariance[(1, 1)].sqrt(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let t = linear_table(120, 2);
        let m = fit_ols("y ~ x * g", &t, &HashMap::new()).unwrap();
        let base = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions::default(),
        )
        .unwrap();
        // constant weights column
        let mut cols: Vec<(String, Column)> = Vec::new();
        for i in 0..t.ncols() {
            let (n, c) = t.column_at(i);
            cols.push((n.to_string(), c.clone()));
        }
        cols.push(("cw".into(), Column::Numeric(vec![2.5; 120])));
        let t2 = Table::new(cols).unwrap();
        let weighted = population_margins(
            &m,
            &t2,
            &m.covariance,
            "model",
            &MarginsOptions {
                weights: Some("cw".into()),
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in base.estimates().iter().zip(weighted.estimates()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn logit_ame_matches_brute_force() {
        let t = linear_table(80, 3);
        // binary response
        let yb: Vec<f64> = (0..80).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mut cols: Vec<(String, Column)> = Vec::new();
        for i in 0..t.ncols() {
            let (n, c) = t.column_at(i);
            if n == "y" {
                cols.push(("y".into(), Column::Numeric(yb.clone())));
            } else {
                cols.push((n.to_string(), c.clone()));
            }
        }
        let t = Table::new(cols).unwrap();
        let m = fit_glm(
            "y ~ x + z",
            &t,
            Family::Binomial,
            LinkFunction::Logit,
            &HashMap::new(),
            50,
            1e-10,
        )
        .unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        // brute force: mean over rows of mu(1-mu) * beta_x
        let mut acc = 0.0;
        for i in 0..80 {
            let x = t.numeric_at("x", i).unwrap();
            let z = t.numeric_at("z", i).unwrap();
            let eta = m.beta[0] + m.beta[1] * x + m.beta[2] * z;
            let mu = 1.0 / (1.0 + (-eta as f64).exp());
            acc += mu * (1.0 - mu) * m.beta[1];
        }
        assert_relative_eq!(out.estimates()[0], acc / 80.0, max_relative = 1e-12);
    }

    #[test]
    fn scenario_matches_manual_column_replacement() {
        let n = 100;
        let t = linear_table(n, 4);
        let m = fit_ols("y ~ x * z", &t, &HashMap::new()).unwrap();
        // scenario: fix z = 1.5 everywhere
        let scen = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                scenarios: vec![("z".into(), vec![ScalarValue::Number(1.5)])],
                ..Default::default()
            },
        )
        .unwrap();
        // manual: replace the z column by the constant and run plain margins
        let mut cols: Vec<(String, Column)> = Vec::new();
        for i in 0..t.ncols() {
            let (name, c) = t.column_at(i);
            if name == "z" {
                cols.push(("z".into(), Column::Numeric(vec![1.5; n])));
            } else {
                cols.push((name.to_string(), c.clone()));
            }
        }
        let t2 = Table::new(cols).unwrap();
        let manual = population_margins(
            &m,
            &t2,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(scen.estimates()[0], manual.estimates()[0]);
        assert_eq!(scen.standard_errors()[0], manual.standard_errors()[0]);
        let e = scen.as_effects().unwrap();
        assert_eq!(e.at_values[0], vec![("z".to_string(), "1.5".to_string())]);
        assert_eq!(e.terms[0], "derivative");
    }

    #[test]
    fn single_group_equals_ungrouped() {
        let n = 90;
        let t0 = linear_table(n, 5);
        let mut cols: Vec<(String, Column)> = Vec::new();
        for i in 0..t0.ncols() {
            let (name, c) = t0.column_at(i);
            cols.push((name.to_string(), c.clone()));
        }
        cols.push((
            "one".into(),
            Column::Categorical {
                codes: vec![0; n],
                levels: vec!["all".into()],
            },
        ));
        let t = Table::new(cols).unwrap();
        let m = fit_ols("y ~ x + z", &t, &HashMap::new()).unwrap();
        let a = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        let b = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                groups: Some("one".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.estimates()[0], b.estimates()[0]);
    }

    #[test]
    fn determinism_across_worker_counts() {
        let t = linear_table(500, 6);
        let m = fit_ols("y ~ x * g + z", &t, &HashMap::new()).unwrap();
        let run = |threads: usize| {
            population_margins(
                &m,
                &t,
                &m.covariance,
                "model",
                &MarginsOptions {
                    threads: Some(threads),
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let r1 = run(1);
        let r2 = run(2);
        let r8 = run(8);
        for ((a, b), c) in r1
            .estimates()
            .iter()
            .zip(r2.estimates())
            .zip(r8.estimates())
        {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
        for ((a, b), c) in r1
            .standard_errors()
            .iter()
            .zip(r2.standard_errors())
            .zip(r8.standard_errors())
        {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn categorical_contrast_linear_equals_dummy_coefficient() {
        let t = linear_table(200, 7);
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["g".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        let e = out.as_effects().unwrap();
        // dummy coding: contrast B - A equals the B dummy coefficient
        assert_eq!(e.terms[0], "B - A");
        assert_relative_eq!(e.estimates[0], m.beta[2], epsilon = 1e-10);
        assert_relative_eq!(
            e.standard_errors[0],
            m.covariance[(2, 2)].sqrt(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn pairwise_contrast_count() {
        let t = linear_table(100, 8);
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["g".into()]),
                contrast: ContrastKind::Pairwise,
                ..Default::default()
            },
        )
        .unwrap();
        let e = out.as_effects().unwrap();
        assert_eq!(e.terms, vec!["B - A", "C - A", "C - B"]);
    }

    #[test]
    fn mem_equals_ame_for_linear_model() {
        let t = linear_table(150, 9);
        let m = fit_ols("y ~ x + z + g", &t, &HashMap::new()).unwrap();
        let opts = MarginsOptions {
            vars: Some(vec!["x".into()]),
            ..Default::default()
        };
        let ame = population_margins(&m, &t, &m.covariance, "model", &opts).unwrap();
        let grid = means_grid(&t, &[]).unwrap();
        let mem = profile_margins(&m, &t, &grid, &m.covariance, "model", &opts).unwrap();
        assert_relative_eq!(
            ame.estimates()[0],
            mem.estimates()[0],
            epsilon = 1e-10
        );
        assert_relative_eq!(
            ame.standard_errors()[0],
            mem.standard_errors()[0],
            epsilon = 1e-10
        );
    }

    #[test]
    fn identity_link_mixture_is_linear() {
        let t = linear_table(150, 10);
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let opts = MarginsOptions {
            vars: Some(vec!["x".into()]),
            ..Default::default()
        };
        let mix = CategoricalMixture::new(
            vec!["A".into(), "B".into()],
            vec![0.6, 0.4],
        )
        .unwrap();
        let grid_mix =
            means_grid(&t, &[("g".into(), GridValue::Mixture(mix))]).unwrap();
        let grid_a = means_grid(&t, &[("g".into(), GridValue::Level("A".into()))]).unwrap();
        let grid_b = means_grid(&t, &[("g".into(), GridValue::Level("B".into()))]).unwrap();
        let em = profile_margins(&m, &t, &grid_mix, &m.covariance, "model", &opts).unwrap();
        let ea = profile_margins(&m, &t, &grid_a, &m.covariance, "model", &opts).unwrap();
        let eb = profile_margins(&m, &t, &grid_b, &m.covariance, "model", &opts).unwrap();
        assert_relative_eq!(
            em.estimates()[0],
            0.6 * ea.estimates()[0] + 0.4 * eb.estimates()[0],
            epsilon = 1e-14
        );
    }

    #[test]
    fn logit_prediction_at_origin_is_half() {
        let t = Table::new(vec![
            (
                "y".into(),
                Column::Numeric(vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]),
            ),
            (
                "x".into(),
                Column::Numeric(vec![-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0]),
            ),
        ])
        .unwrap();
        let m = fit_glm(
            "y ~ x",
            &t,
            Family::Binomial,
            LinkFunction::Logit,
            &HashMap::new(),
            50,
            1e-10,
        )
        .unwrap();
        // prediction at the point where eta = 0: x = -b0/b1
        let x0 = -m.beta[0] / m.beta[1];
        let grid = means_grid(&t, &[("x".into(), GridValue::Number(x0))]).unwrap();
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
        assert_relative_eq!(out.estimates()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn elasticity_identity_link_hand_value() {
        // exact line y = 2x, elasticity at x: (dy/dx) * x / y = 2x/(2x) = 1
        let x: Vec<f64> = (1..=20).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v).collect();
        let t = Table::new(vec![
            ("y".into(), Column::Numeric(y)),
            ("x".into(), Column::Numeric(x)),
        ])
        .unwrap();
        let m = fit_ols("y ~ 0 + x", &t, &HashMap::new()).unwrap();
        let out = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                measure: Measure::Elasticity,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(out.estimates()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn dyex_at_zero_x() {
        let t = Table::new(vec![
            ("y".into(), Column::Numeric(vec![1.0, 2.0, 3.0])),
            ("x".into(), Column::Numeric(vec![0.0, 0.0, 0.0])),
            ("z".into(), Column::Numeric(vec![1.0, 2.0, 3.5])),
        ])
        .unwrap();
        let m = fit_ols("y ~ z", &t, &HashMap::new()).unwrap();
        // dyex for x: model does not contain x -> error expected
        assert!(population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["x".into()]),
                measure: Measure::Dyex,
                ..Default::default()
            },
        )
        .is_err());
    }

    #[test]
    fn measure_rejected_for_categorical() {
        let t = linear_table(60, 11);
        let m = fit_ols("y ~ x + g", &t, &HashMap::new()).unwrap();
        let err = population_margins(
            &m,
            &t,
            &m.covariance,
            "model",
            &MarginsOptions {
                vars: Some(vec!["g".into()]),
                measure: Measure::Elasticity,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("categorical"));
    }

    #[test]
    fn gradient_first_order_in_beta() {
        let t = linear_table(60, 12);
        let yb: Vec<f64> = (0..60).map(|i| (i % 2) as f64).collect();
        let mut cols: Vec<(String, Column)> = Vec::new();
        for i in 0..t.ncols() {
            let (n, c) = t.column_at(i);
            if n == "y" {
                cols.push(("y".into(), Column::Numeric(yb.clone())));
            } else {
                cols.push((n.to_string(), c.clone()));
            }
        }
        let t = Table::new(cols).unwrap();
        let m = fit_glm(
            "y ~ x * g + z",
            &t,
            Family::Binomial,
            LinkFunction::Logit,
            &HashMap::new(),
            100,
            1e-10,
        )
        .unwrap();
        let opts = MarginsOptions::default();
        let out = population_margins(&m, &t, &m.covariance, "model", &opts).unwrap();
        let e = out.as_effects().unwrap();
        // perturb beta and confirm the gradient predicts the change
        let p = m.p();
        for (idx, grad) in e.gradients.iter().enumerate() {
            for j in 0..p {
                let h = 1e-6;
                let mut mp = m.clone();
                mp.beta[j] += h;
                let op = population_margins(&mp, &t, &m.covariance, "model", &opts).unwrap();
                let fd = (op.estimates()[idx] - e.estimates[idx]) / h;
                assert_relative_eq!(grad[j], fd, max_relative = 1e-4, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn delta_method_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = 5;
        let g: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        let sigma = &a * a.transpose();
        let se = delta_method_se(&g, &sigma).unwrap();
        let mut quad = 0.0;
        for i in 0..p {
            for j in 0..p {
                quad += g[i] * sigma[(i, j)] * g[j];
            }
        }
        assert_relative_eq!(se, quad.sqrt(), epsilon = 1e-12);
        // unit vector picks out a diagonal element
        let mut e1 = vec![0.0; p];
        e1[2] = 1.0;
        assert_relative_eq!(
            delta_method_se(&e1, &sigma).unwrap(),
            sigma[(2, 2)].sqrt(),
            epsilon = 1e-14
        );
        assert_eq!(delta_method_se(&vec![0.0; p], &sigma).unwrap(), 0.0);
    }

    #[test]
    fn grids() {
        let t = linear_table(50, 13);
        let g = means_grid(&t, &[]).unwrap();
        assert_eq!(g.rows.len(), 1);
        let cg = cartesian_grid(&[
            (
                "x".into(),
                vec![
                    GridValue::Number(1.0),
                    GridValue::Number(2.0),
                    GridValue::Number(3.0),
                    GridValue::Number(4.0),
                ],
            ),
            (
                "g".into(),
                vec![
                    GridValue::Level("A".into()),
                    GridValue::Level("B".into()),
                    GridValue::Level("C".into()),
                ],
            ),
        ])
        .unwrap();
        assert_eq!(cg.rows.len(), 12);
        // first-named variable varies fastest
        assert_eq!(cg.rows[0][0].1, GridValue::Number(1.0));
        assert_eq!(cg.rows[1][0].1, GridValue::Number(2.0));
        assert!(cartesian_grid(&[]).is_err());
        let bg = balanced_grid(&t, &["g".to_string()]).unwrap();
        assert_eq!(bg.rows.len(), 3);
        assert!(balanced_grid(&t, &["x".to_string()]).is_err());
        let qg = quantile_grid(&t, "x", &[0.25, 0.5, 0.75]).unwrap();
        assert_eq!(qg.rows.len(), 3);
        assert!(quantile_grid(&t, "x", &[1.5]).is_err());
    }

    #[test]
    fn z_p_ci_degenerate() {
        let (z, p, lo, hi) = z_p_ci(0.5, 0.0);
        assert_eq!((z, p), (0.0, 1.0));
        assert_eq!((lo, hi), (0.5, 0.5));
        let (z, p, lo, hi) = z_p_ci(1.959963984540054, 1.0);
        assert_relative_eq!(z, 1.959963984540054, epsilon = 1e-12);
        assert_relative_eq!(p, 0.05, epsilon = 1e-9);
        assert!(lo < 0.0 + 1e-9 && hi > 3.9);
    }
}
