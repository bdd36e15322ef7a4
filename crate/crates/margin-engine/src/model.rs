//! Model fitting (OLS, GLM via IRLS), ingestion of externally fitted
//! coefficients, and robust covariance estimators (HC0-HC3, CR0/CR1).

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::compiler::{compile, model_matrix, CompiledFormula};
use crate::diff::{link_eval, LinkFunction, LinkPart};
use crate::error::{Error, Result};
use crate::formula::{parse_formula, strip_random_effects, FormulaAst};
use crate::schema::{resolve, ContrastSpec, ResolvedFormula};
use crate::tables::{Column, Table};

/// Distribution family of a GLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "gaussian" => Family::Gaussian,
            "binomial" => Family::Binomial,
            "poisson" => Family::Poisson,
            other => return Err(Error::Model(format!("unknown family '{other}'"))),
        })
    }

    /// Canonical link.
    pub fn canonical_link(self) -> LinkFunction {
        match self {
            Family::Gaussian => LinkFunction::Identity,
            Family::Binomial => LinkFunction::Logit,
            Family::Poisson => LinkFunction::Log,
        }
    }

    /// Variance function V(mu).
    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => mu * (1.0 - mu),
            Family::Poisson => mu,
        }
    }

    fn deviance(self, y: &[f64], mu: &[f64]) -> f64 {
        let xlogxy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
        match self {
            Family::Gaussian => y.iter().zip(mu).map(|(y, m)| (y - m).powi(2)).sum(),
            Family::Binomial => {
                2.0 * y
                    .iter()
                    .zip(mu)
                    .map(|(&y, &m)| xlogxy(y, m) + xlogxy(1.0 - y, 1.0 - m))
                    .sum::<f64>()
            }
            Family::Poisson => {
                2.0 * y
                    .iter()
                    .zip(mu)
                    .map(|(&y, &m)| xlogxy(y, m) - (y - m))
                    .sum::<f64>()
            }
        }
    }
}

/// Design matrix, response residuals, and IRLS weights retained from an
/// in-process fit, needed by the robust covariance estimators.
#[derive(Debug, Clone)]
pub struct FitData {
    pub x: DMatrix<f64>,
    /// Response-scale residuals y - mu-hat (= score residual numerator).
    pub residuals: Vec<f64>,
    /// Final IRLS working weights (all 1 for OLS).
    pub weights: Vec<f64>,
}

/// A fitted (or ingested) model ready for margins computation.
#[derive(Debug, Clone)]
pub struct FittedModel {
    /// The fixed-effects formula as text (random effects already stripped).
    pub formula_text: String,
    pub ast: FormulaAst,
    pub resolved: ResolvedFormula,
    pub compiled: CompiledFormula,
    pub beta: Vec<f64>,
    /// Model-based parameter covariance (p x p).
    pub covariance: DMatrix<f64>,
    pub link: LinkFunction,
    pub family: Family,
    pub n: usize,
    pub dof_residual: usize,
    pub dispersion: f64,
    pub warnings: Vec<String>,
    /// Present only for models fitted in-process.
    pub fit: Option<FitData>,
}

impl FittedModel {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// One label per coefficient.
    pub fn coefficient_labels(&self) -> Vec<String> {
        self.resolved.column_labels()
    }

    fn fit_data(&self) -> Result<&FitData> {
        self.fit.as_ref().ok_or_else(|| {
            Error::Model(
                "robust covariances need the training design; \
                 this model was loaded from a spec, not fitted in-process"
                    .into(),
            )
        })
    }
}

fn response_values(resolved: &ResolvedFormula, table: &Table) -> Result<Vec<f64>> {
    let name = resolved
        .response
        .as_deref()
        .ok_or_else(|| Error::Model("formula has no response variable".into()))?;
    match table.column(name)? {
        Column::Numeric(v) => Ok(v.clone()),
        Column::Integer(v) => Ok(v.iter().map(|&x| x as f64).collect()),
        Column::Boolean(v) => Ok(v.iter().map(|&b| b as u8 as f64).collect()),
        c => Err(Error::Model(format!(
            "response '{}' is {}, expected numeric",
            name,
            c.kind()
        ))),
    }
}

fn prepare(
    formula: &str,
    table: &Table,
    contrasts: &HashMap<String, ContrastSpec>,
) -> Result<(FormulaAst, ResolvedFormula, CompiledFormula, DMatrix<f64>, Vec<f64>)> {
    let ast = strip_random_effects(&parse_formula(formula)?);
    let resolved = resolve(&ast, table, contrasts)?;
    let compiled = compile(&resolved)?;
    let x = model_matrix(&compiled, table)?;
    let y = response_values(&resolved, table)?;
    Ok((ast, resolved, compiled, x, y))
}

/// Solve a weighted least-squares system, reporting the collinear columns on
/// rank deficiency.
fn weighted_ls(
    x: &DMatrix<f64>,
    w: &[f64],
    z: &[f64],
    labels: &[String],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let p = x.ncols();
    // form sqrt(W) X and sqrt(W) z, solve by column-pivoted QR
    let mut xw = x.clone();
    let mut zw = DVector::from_column_slice(z);
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..p {
            xw[(i, j)] *= s;
        }
        zw[i] *= s;
    }
    let qr = xw.clone().col_piv_qr();
    let r = qr.r();
    let perm = qr.p();
    let rank = {
        let tol = 1e-10 * r[(0, 0)].abs().max(1.0);
        (0..p).take_while(|&j| r[(j, j)].abs() > tol).count()
    };
    if rank < p {
        let mut indices = DVector::from_iterator(p, (0..p).map(|j| j as f64));
        perm.permute_rows(&mut indices);
        let collinear: Vec<&str> = (rank..p)
            .map(|j| labels[indices[j] as usize].as_str())
            .collect();
        return Err(Error::Model(format!(
            "design matrix is rank deficient (rank {rank} < {p}); collinear span includes: {}",
            collinear.join(", ")
        )));
    }
    // thin QR least squares: R beta = Q' z
    let thin = xw.clone().qr();
    let qtz = thin.q().transpose() * &zw;
    let beta = thin
        .r()
        .solve_upper_triangular(&qtz)
        .ok_or_else(|| Error::Model("least-squares solve failed".into()))?;
    let xtx = xw.transpose() * &xw;
    let xtx_inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::Model("X'WX is singular".into()))?;
    Ok((beta, xtx_inv))
}

/// Fit ordinary least squares. The covariance is s^2 (X'X)^-1 with
/// s^2 = RSS / (n - p).
pub fn fit_ols(
    formula: &str,
    table: &Table,
    contrasts: &HashMap<String, ContrastSpec>,
) -> Result<FittedModel> {
    let (ast, resolved, compiled, x, y) = prepare(formula, table, contrasts)?;
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return Err(Error::Model(format!(
            "need n > p to fit; got n={n}, p={p}"
        )));
    }
    let labels = resolved.column_labels();
    let w = vec![1.0; n];
    let (beta, xtx_inv) = weighted_ls(&x, &w, &y, &labels)?;
    let fitted = &x * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let dof = n - p;
    let s2 = rss / dof as f64;
    let covariance = &xtx_inv * s2;
    Ok(FittedModel {
        formula_text: ast.to_string(),
        ast,
        resolved,
        compiled,
        beta: beta.as_slice().to_vec(),
        covariance,
        link: LinkFunction::Identity,
        family: Family::Gaussian,
        n,
        dof_residual: dof,
        dispersion: s2,
        warnings: Vec::new(),
        fit: Some(FitData {
            x,
            residuals,
            weights: w,
        }),
    })
}

/// Fit a GLM by iteratively reweighted least squares.
///
/// Convergence: |delta deviance| <= tol * (|deviance| + 0.1). A separation
/// warning is recorded when any fitted |eta| exceeds 30.
pub fn fit_glm(
    formula: &str,
    table: &Table,
    family: Family,
    link: LinkFunction,
    contrasts: &HashMap<String, ContrastSpec>,
    max_iter: usize,
    tol: f64,
) -> Result<FittedModel> {
    let (ast, resolved, compiled, x, y) = prepare(formula, table, contrasts)?;
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return Err(Error::Model(format!(
            "need n > p to fit; got n={n}, p={p}"
        )));
    }
    if family == Family::Binomial {
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Model(format!(
                "binomial response must be 0/1, found {bad}"
            )));
        }
    }
    if family == Family::Poisson {
        if let Some(bad) = y.iter().find(|&&v| v < 0.0) {
            return Err(Error::Model(format!(
                "poisson response must be nonnegative, found {bad}"
            )));
        }
    }
    let labels = resolved.column_labels();
    let ybar = y.iter().sum::<f64>() / n as f64;
    // start away from the boundary
    let mut mu: Vec<f64> = match family {
        Family::Gaussian => y.iter().map(|&v| v).collect(),
        Family::Binomial | Family::Poisson => y.iter().map(|&v| (v + ybar) / 2.0).collect(),
    };
    let mut eta: Vec<f64> = mu.iter().map(|&m| link.forward(m)).collect();
    let mut deviance = family.deviance(&y, &mu);
    let mut beta = DVector::zeros(p);
    let mut xtwx_inv = DMatrix::zeros(p, p);
    let mut w = vec![1.0; n];
    let mut z = vec![0.0; n];
    let mut trace: Vec<f64> = vec![deviance];
    let mut converged = false;
    for _ in 0..max_iter {
        for i in 0..n {
            let d1 = link_eval(link, LinkPart::D1, eta[i])?;
            if d1 == 0.0 {
                return Err(Error::Model(format!(
                    "IRLS stalled: dmu/deta = 0 at row {i} (eta = {})",
                    eta[i]
                )));
            }
            let v = family.variance(mu[i]);
            if v <= 0.0 {
                return Err(Error::Model(format!(
                    "IRLS stalled: variance function nonpositive at row {i} (mu = {})",
                    mu[i]
                )));
            }
            z[i] = eta[i] + (y[i] - mu[i]) / d1;
            w[i] = d1 * d1 / v;
        }
        let (b, inv) = weighted_ls(&x, &w, &z, &labels)?;
        beta = b;
        xtwx_inv = inv;
        let eta_new = &x * &beta;
        for i in 0..n {
            eta[i] = eta_new[i];
            mu[i] = link_eval(link, LinkPart::Inv, eta[i])?;
        }
        let dev_new = family.deviance(&y, &mu);
        let delta = (dev_new - deviance).abs();
        deviance = dev_new;
        trace.push(deviance);
        if delta <= tol * (deviance.abs() + 0.1) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Model(format!(
            "IRLS did not converge in {max_iter} iterations; deviance trace: {}",
            trace
                .iter()
                .map(|d| format!("{d:.6}"))
                .collect::<Vec<_>>()
                .join(" -> ")
        )));
    }
    let mut warnings = Vec::new();
    if eta.iter().any(|e| e.abs() > 30.0) {
        warnings.push(
            "possible separation: fitted |eta| exceeds 30 for at least one observation"
                .to_string(),
        );
    }
    let dof = n - p;
    let dispersion = match family {
        Family::Gaussian => {
            // weighted residual sum of squares over residual dof
            let mut rss = 0.0;
            for i in 0..n {
                rss += w[i] * (z[i] - eta[i]).powi(2);
            }
            rss / dof as f64
        }
        Family::Binomial | Family::Poisson => 1.0,
    };
    let covariance = &xtwx_inv * dispersion;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - mu[i]).collect();
    Ok(FittedModel {
        formula_text: ast.to_string(),
        ast,
        resolved,
        compiled,
        beta: beta.as_slice().to_vec(),
        covariance,
        link,
        family,
        n,
        dof_residual: dof,
        dispersion,
        warnings,
        fit: Some(FitData {
            x,
            residuals,
            weights: w,
        }),
    })
}

// ---------------------------------------------------------------------------
// Model-spec serialization
// ---------------------------------------------------------------------------

/// On-disk model document: formula text plus coefficients and covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub formula: String,
    pub family: Family,
    pub link: LinkFunction,
    pub beta: Vec<f64>,
    /// Row-major p x p covariance.
    pub vcov: Vec<f64>,
    pub n: usize,
    pub dof: usize,
}

/// Serialize a fitted model to a spec document.
pub fn model_to_spec(model: &FittedModel) -> ModelSpec {
    ModelSpec {
        formula: model.formula_text.clone(),
        family: model.family,
        link: model.link,
        beta: model.beta.clone(),
        vcov: model.covariance.transpose().as_slice().to_vec(),
        n: model.n,
        dof: model.dof_residual,
    }
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let spec = model_to_spec(model);
    let text = serde_json::to_string_pretty(&spec)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reconstruct a model from a spec document against a table. Random-effect
/// terms in the formula are stripped before resolution, so mixed-model fixed
/// effects load as plain fixed-effects formulas.
pub fn load_model(
    spec: &ModelSpec,
    table: &Table,
    contrasts: &HashMap<String, ContrastSpec>,
) -> Result<FittedModel> {
    let ast = strip_random_effects(&parse_formula(&spec.formula)?);
    let resolved = resolve(&ast, table, contrasts)?;
    let compiled = compile(&resolved)?;
    let p = resolved.width;
    if spec.beta.len() != p {
        return Err(Error::Model(format!(
            "coefficient vector has length {}, but the formula resolves to {p} columns",
            spec.beta.len()
        )));
    }
    if spec.vcov.len() != p * p {
        return Err(Error::Model(format!(
            "covariance has {} entries, expected {}",
            spec.vcov.len(),
            p * p
        )));
    }
    let covariance = DMatrix::from_row_slice(p, p, &spec.vcov);
    for i in 0..p {
        for j in (i + 1)..p {
            let a = covariance[(i, j)];
            let b = covariance[(j, i)];
            if (a - b).abs() > 1e-8 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::Model(format!(
                    "covariance is asymmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(FittedModel {
        formula_text: ast.to_string(),
        ast,
        resolved,
        compiled,
        beta: spec.beta.clone(),
        covariance,
        link: spec.link,
        family: spec.family,
        n: spec.n,
        dof_residual: spec.dof,
        dispersion: 1.0,
        warnings: Vec::new(),
        fit: None,
    })
}

pub fn read_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Robust covariances
// ---------------------------------------------------------------------------

/// Heteroskedasticity-consistent covariance variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HcVariant {
    Hc0,
    Hc1,
    Hc2,
    Hc3,
}

impl HcVariant {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_uppercase().as_str() {
            "HC0" => HcVariant::Hc0,
            "HC1" => HcVariant::Hc1,
            "HC2" => HcVariant::Hc2,
            "HC3" => HcVariant::Hc3,
            other => return Err(Error::Model(format!("unknown HC variant '{other}'"))),
        })
    }
}

/// Cluster-robust covariance variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CrVariant {
    Cr0,
    Cr1,
}

impl CrVariant {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_uppercase().as_str() {
            "CR0" => CrVariant::Cr0,
            "CR1" => CrVariant::Cr1,
            other => return Err(Error::Model(format!("unknown CR variant '{other}'"))),
        })
    }
}

/// Bread of the sandwich: (X'WX)^-1, W = 1 for OLS.
fn bread(model: &FittedModel) -> Result<DMatrix<f64>> {
    let fd = model.fit_data()?;
    let n = fd.x.nrows();
    let p = fd.x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = fd.x.row(i);
        for a in 0..p {
            for b in 0..p {
                xtwx[(a, b)] += fd.weights[i] * xi[a] * xi[b];
            }
        }
    }
    xtwx.try_inverse()
        .ok_or_else(|| Error::Model("X'WX is singular".into()))
}

/// Sandwich estimator B M B with M = X' diag(omega_i e_i^2) X.
///
/// GLM residuals are score residuals (y - mu-hat); leverage for HC2/HC3 is
/// h_i = w_i x_i' B x_i.
pub fn hc_covariance(model: &FittedModel, variant: HcVariant) -> Result<DMatrix<f64>> {
    let fd = model.fit_data()?;
    let b = bread(model)?;
    let n = fd.x.nrows();
    let p = fd.x.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = fd.x.row(i);
        let e2 = fd.residuals[i] * fd.residuals[i];
        let omega = match variant {
            HcVariant::Hc0 => 1.0,
            HcVariant::Hc1 => n as f64 / (n - p) as f64,
            HcVariant::Hc2 | HcVariant::Hc3 => {
                let mut h = 0.0;
                for a in 0..p {
                    for c in 0..p {
                        h += xi[a] * b[(a, c)] * xi[c];
                    }
                }
                h *= fd.weights[i];
                if h >= 1.0 - 1e-12 {
                    return Err(Error::Model(format!(
                        "leverage is 1 at row {i}; HC2/HC3 undefined"
                    )));
                }
                if variant == HcVariant::Hc2 {
                    1.0 / (1.0 - h)
                } else {
                    1.0 / ((1.0 - h) * (1.0 - h))
                }
            }
        };
        for a in 0..p {
            for c in 0..p {
                meat[(a, c)] += omega * e2 * xi[a] * xi[c];
            }
        }
    }
    Ok(&b * meat * &b)
}

/// Cluster codes from a column usable as a clustering variable.
pub fn cluster_codes(column: &Column) -> Result<Vec<usize>> {
    match column {
        Column::Categorical { codes, .. } => Ok(codes.iter().map(|&c| c as usize).collect()),
        Column::Integer(v) => {
            let mut seen: Vec<i64> = Vec::new();
            Ok(v.iter()
                .map(|x| match seen.iter().position(|s| s == x) {
                    Some(i) => i,
                    None => {
                        seen.push(*x);
                        seen.len() - 1
                    }
                })
                .collect())
        }
        Column::Boolean(v) => Ok(v.iter().map(|&b| b as usize).collect()),
        c => Err(Error::Model(format!(
            "cluster variable is {}, expected categorical, integer, or boolean",
            c.kind()
        ))),
    }
}

/// Cluster-robust sandwich: M = sum_g (X_g' e_g)(X_g' e_g)'.
/// CR1 scales by G/(G-1) * (n-1)/(n-p).
pub fn cr_covariance(
    model: &FittedModel,
    clusters: &[usize],
    variant: CrVariant,
) -> Result<DMatrix<f64>> {
    let fd = model.fit_data()?;
    let n = fd.x.nrows();
    let p = fd.x.ncols();
    if clusters.len() != n {
        return Err(Error::Model(format!(
            "cluster vector has length {}, expected {n}",
            clusters.len()
        )));
    }
    let g = clusters.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if g < 2 {
        return Err(Error::Model(format!(
            "cluster-robust covariance needs at least 2 clusters, found {g}"
        )));
    }
    let b = bread(model)?;
    // per-cluster score sums X_g' e_g, accumulated row by row
    let mut sums = vec![vec![0.0; p]; g];
    for i in 0..n {
        let xi = fd.x.row(i);
        let s = &mut sums[clusters[i]];
        for a in 0..p {
            s[a] += xi[a] * fd.residuals[i];
        }
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in &sums {
        for a in 0..p {
            for c in 0..p {
                meat[(a, c)] += s[a] * s[c];
            }
        }
    }
    if variant == CrVariant::Cr1 {
        let scale =
            (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - p) as f64);
        meat *= scale;
    }
    Ok(&b * meat * &b)
}

/// Check symmetry and positive semidefiniteness within tolerance.
pub fn check_psd(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * m[(i, i)].abs().max(1.0) {
                return Err(Error::Model(format!(
                    "matrix asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let trace: f64 = (0..p).map(|i| m[(i, i)]).sum();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol * trace.abs().max(1.0) {
        return Err(Error::Model(format!(
            "matrix is not positive semidefinite (min eigenvalue {min})"
        )));
    }
    Ok(())
}
