//! Derivatives of compiled formulas and link functions.
//!
//! The forward-mode backend propagates value/partial pairs through the
//! operation program (variables seeded with identity partials), yielding the
//! p x k Jacobian of the model row with respect to the differentiation
//! variables. A central-finite-difference backend with the same interface
//! serves as a cross-check. Link functions carry closed-form inverse, first,
//! and second derivatives for mean-scale effects and delta-method gradients.

use serde::{Deserialize, Serialize};

use crate::compiler::{bind_columns, ColRef, CompiledFormula, Data, Evaluator, Op};
use crate::error::{Error, Result};
use crate::formula::{BinOp, Func};

// ---------------------------------------------------------------------------
// Link functions
// ---------------------------------------------------------------------------

/// GLM link function `g` with closed-form inverse-link derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFunction {
    Identity,
    Log,
    Logit,
    Probit,
    Cloglog,
    Cauchit,
    Inverse,
    Sqrt,
    InverseSquare,
}

/// Which piece of the inverse link to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkPart {
    /// mu = g^-1(eta)
    Inv,
    /// d mu / d eta
    D1,
    /// d^2 mu / d eta^2
    D2,
}

impl LinkFunction {
    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Log => "log",
            LinkFunction::Logit => "logit",
            LinkFunction::Probit => "probit",
            LinkFunction::Cloglog => "cloglog",
            LinkFunction::Cauchit => "cauchit",
            LinkFunction::Inverse => "inverse",
            LinkFunction::Sqrt => "sqrt",
            LinkFunction::InverseSquare => "inverse-square",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "identity" => LinkFunction::Identity,
            "log" => LinkFunction::Log,
            "logit" => LinkFunction::Logit,
            "probit" => LinkFunction::Probit,
            "cloglog" => LinkFunction::Cloglog,
            "cauchit" => LinkFunction::Cauchit,
            "inverse" => LinkFunction::Inverse,
            "sqrt" => LinkFunction::Sqrt,
            "inverse-square" => LinkFunction::InverseSquare,
            other => return Err(Error::Diff(format!("unknown link function '{other}'"))),
        })
    }

    /// The forward link `g(mu)`, used when fitting.
    pub fn forward(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Log => mu.ln(),
            LinkFunction::Logit => (mu / (1.0 - mu)).ln(),
            LinkFunction::Probit => std_normal_quantile_unchecked(mu),
            LinkFunction::Cloglog => (-(1.0 - mu).ln()).ln(),
            LinkFunction::Cauchit => (std::f64::consts::PI * (mu - 0.5)).tan(),
            LinkFunction::Inverse => 1.0 / mu,
            LinkFunction::Sqrt => mu.sqrt(),
            LinkFunction::InverseSquare => 1.0 / (mu * mu),
        }
    }
}

/// Evaluate the inverse link or one of its first two derivatives at `eta`.
///
/// Domain violations (e.g. the inverse link of `inverse` at eta = 0) raise a
/// numeric-domain error rather than returning NaN.
pub fn link_eval(link: LinkFunction, which: LinkPart, eta: f64) -> Result<f64> {
    use LinkPart::*;
    if !eta.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite linear predictor {eta} for link {}",
            link.name()
        )));
    }
    let v = match link {
        LinkFunction::Identity => match which {
            Inv => eta,
            D1 => 1.0,
            D2 => 0.0,
        },
        LinkFunction::Log => eta.exp(),
        LinkFunction::Logit => {
            // numerically stable logistic
            let mu = if eta >= 0.0 {
                1.0 / (1.0 + (-eta).exp())
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            };
            let d1 = mu * (1.0 - mu);
            match which {
                Inv => mu,
                D1 => d1,
                D2 => d1 * (1.0 - 2.0 * mu),
            }
        }
        LinkFunction::Probit => match which {
            Inv => std_normal(NormalPart::Cdf, eta)?,
            D1 => std_normal(NormalPart::Pdf, eta)?,
            D2 => -eta * std_normal(NormalPart::Pdf, eta)?,
        },
        LinkFunction::Cloglog => {
            let ee = eta.exp();
            match which {
                Inv => -(-ee).exp_m1(),
                D1 => (eta - ee).exp(),
                D2 => (eta - ee).exp() * (1.0 - ee),
            }
        }
        LinkFunction::Cauchit => {
            let pi = std::f64::consts::PI;
            let q = 1.0 + eta * eta;
            match which {
                Inv => 0.5 + eta.atan() / pi,
                D1 => 1.0 / (pi * q),
                D2 => -2.0 * eta / (pi * q * q),
            }
        }
        LinkFunction::Inverse => {
            if eta == 0.0 {
                return Err(Error::Domain(
                    "inverse link undefined at eta = 0".into(),
                ));
            }
            match which {
                Inv => 1.0 / eta,
                D1 => -1.0 / (eta * eta),
                D2 => 2.0 / (eta * eta * eta),
            }
        }
        // g(mu) = sqrt(mu), so mu = eta^2 for all eta (the algebraic inverse)
        LinkFunction::Sqrt => match which {
            Inv => eta * eta,
            D1 => 2.0 * eta,
            D2 => 2.0,
        },
        LinkFunction::InverseSquare => {
            if eta <= 0.0 {
                return Err(Error::Domain(format!(
                    "inverse-square link requires eta > 0, got {eta}"
                )));
            }
            match which {
                Inv => eta.powf(-0.5),
                D1 => -0.5 * eta.powf(-1.5),
                D2 => 0.75 * eta.powf(-2.5),
            }
        }
    };
    Ok(v)
}

// ---------------------------------------------------------------------------
// Standard normal
// ---------------------------------------------------------------------------

/// Which function of the standard normal distribution to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalPart {
    Pdf,
    Cdf,
    Quantile,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal pdf, cdf, or quantile.
///
/// The cdf goes through the complementary error function (absolute accuracy
/// well under 1e-12); the quantile uses a rational approximation polished by
/// one Newton step against the implemented cdf/pdf pair.
pub fn std_normal(which: NormalPart, v: f64) -> Result<f64> {
    match which {
        NormalPart::Pdf => Ok(INV_SQRT_2PI * (-0.5 * v * v).exp()),
        NormalPart::Cdf => Ok(0.5 * statrs::function::erf::erfc(-v / std::f64::consts::SQRT_2)),
        NormalPart::Quantile => {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!(
                    "normal quantile requires p in (0, 1), got {v}"
                )));
            }
            Ok(std_normal_quantile_unchecked(v))
        }
    }
}

fn std_normal_quantile_unchecked(p: f64) -> f64 {
    let x = quantile_rational(p);
    // one Newton step against our own cdf/pdf
    let cdf = 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    if pdf > 0.0 {
        x - (cdf - p) / pdf
    } else {
        x
    }
}

/// Initial quantile guess (Acklam-style rational approximation, |err| < 1.2e-9).
fn quantile_rational(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

// ---------------------------------------------------------------------------
// Derivative evaluator
// ---------------------------------------------------------------------------

/// Differentiation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffBackend {
    /// Forward-mode dual numbers (the default).
    #[default]
    Ad,
    /// Central finite differences with relative step 1e-6 * max(1, |x|).
    Fd,
}

enum BackendState<'d> {
    Ad {
        /// Scratch values, one per scratch position.
        val: Vec<f64>,
        /// Scratch partials, k per scratch position (structure of arrays).
        der: Vec<f64>,
    },
    Fd {
        evaluator: Evaluator<'d>,
        plus: Vec<f64>,
        minus: Vec<f64>,
    },
}

/// Computes per-row model rows and their Jacobian with respect to a fixed set
/// of continuous variables. All buffers are allocated at construction; the
/// per-row calls are allocation-free.
pub struct DerivativeEvaluator<'d> {
    compiled: &'d CompiledFormula,
    cols: Vec<ColRef<'d>>,
    /// Binding slot per differentiation variable.
    var_slots: Vec<usize>,
    var_names: Vec<String>,
    nrows: usize,
    /// Model row buffer (p).
    xrow: Vec<f64>,
    /// Jacobian buffer, row-major p x k: jac[j*k + l] = d x_j / d var_l.
    jac: Vec<f64>,
    state: BackendState<'d>,
}

/// Build a derivative evaluator over `vars` (continuous columns only).
pub fn build_derivative_evaluator<'d, D: Data>(
    compiled: &'d CompiledFormula,
    data: &'d D,
    vars: &[String],
    backend: DiffBackend,
) -> Result<DerivativeEvaluator<'d>> {
    if vars.is_empty() {
        return Err(Error::Diff("need at least one differentiation variable".into()));
    }
    let cols = bind_columns(compiled, data)?;
    let mut var_slots = Vec::with_capacity(vars.len());
    for v in vars {
        let slot = compiled
            .bindings
            .iter()
            .position(|b| &b.name == v)
            .ok_or_else(|| {
                Error::Diff(format!("variable '{v}' does not appear in the formula"))
            })?;
        match compiled.bindings[slot].access {
            crate::compiler::Access::Numeric => var_slots.push(slot),
            crate::compiler::Access::Code { .. } => {
                return Err(Error::Diff(format!(
                    "variable '{v}' is categorical; use level contrasts instead of derivatives"
                )))
            }
        }
    }
    let k = vars.len();
    let p = compiled.width;
    let state = match backend {
        DiffBackend::Ad => BackendState::Ad {
            val: vec![0.0; compiled.scratch_size],
            der: vec![0.0; compiled.scratch_size * k],
        },
        DiffBackend::Fd => BackendState::Fd {
            evaluator: Evaluator::new(compiled, data)?,
            plus: vec![0.0; p],
            minus: vec![0.0; p],
        },
    };
    Ok(DerivativeEvaluator {
        compiled,
        cols,
        var_slots,
        var_names: vars.to_vec(),
        nrows: data.nrows(),
        xrow: vec![0.0; p],
        jac: vec![0.0; p * k],
        state,
    })
}

/// Derivative of a whitelisted unary function.
#[inline(always)]
fn func_derivative(func: Func, x: f64) -> f64 {
    match func {
        Func::Log => 1.0 / x,
        Func::Log1p => 1.0 / (1.0 + x),
        Func::Exp => x.exp(),
        Func::Sqrt => 0.5 / x.sqrt(),
        // subgradient 0 at the kink for determinism
        Func::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Func::Identity => 1.0,
    }
}

impl<'d> DerivativeEvaluator<'d> {
    pub fn k(&self) -> usize {
        self.var_slots.len()
    }

    pub fn p(&self) -> usize {
        self.compiled.width
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row >= self.nrows {
            return Err(Error::Diff(format!(
                "row {row} out of range (n={})",
                self.nrows
            )));
        }
        Ok(())
    }

    /// Fill internal `xrow` and `jac` buffers for one row.
    fn run(&mut self, row: usize) -> Result<()> {
        self.check_row(row)?;
        match &mut self.state {
            BackendState::Ad { val, der } => {
                let k = self.var_slots.len();
                let cols = &self.cols[..];
                let matrices = &self.compiled.matrices[..];
                let var_slots = &self.var_slots[..];
                let jac = &mut self.jac[..];
                let xrow = &mut self.xrow[..];
                for op in &self.compiled.ops {
                    match op {
                        Op::Const { value, out } => {
                            val[*out] = *value;
                            der[out * k..(out + 1) * k].fill(0.0);
                        }
                        Op::Load { slot, out } => {
                            val[*out] = cols[*slot].numeric(row);
                            let d = &mut der[out * k..(out + 1) * k];
                            for (l, vs) in var_slots.iter().enumerate() {
                                d[l] = if vs == slot { 1.0 } else { 0.0 };
                            }
                        }
                        Op::Unary { func, input, out } => {
                            let x = val[*input];
                            val[*out] = crate::compiler::eval_func(*func, x);
                            let dfdx = func_derivative(*func, x);
                            for l in 0..k {
                                der[out * k + l] = dfdx * der[input * k + l];
                            }
                        }
                        Op::Binary { op, in1, in2, out } => {
                            let a = val[*in1];
                            let b = val[*in2];
                            val[*out] = crate::compiler::eval_binop(*op, a, b);
                            let (da, db) = match op {
                                BinOp::Add => (1.0, 1.0),
                                BinOp::Sub => (1.0, -1.0),
                                BinOp::Mul => (b, a),
                                BinOp::Div => (1.0 / b, -a / (b * b)),
                                BinOp::Pow => {
                                    let da = b * a.powf(b - 1.0);
                                    // only pay for ln(a) when the exponent varies
                                    let b_varies = der[in2 * k..(in2 + 1) * k]
                                        .iter()
                                        .any(|&d| d != 0.0);
                                    let db = if b_varies { val[*out] * a.ln() } else { 0.0 };
                                    (da, db)
                                }
                            };
                            for l in 0..k {
                                der[out * k + l] =
                                    da * der[in1 * k + l] + db * der[in2 * k + l];
                            }
                        }
                        Op::Contrast {
                            slot,
                            matrix,
                            out,
                            width,
                        } => {
                            let code = cols[*slot].code(row) as usize;
                            let m = &matrices[*matrix];
                            let mrow = m.row(code);
                            for c in 0..*width {
                                val[out + c] = mrow[c];
                            }
                            der[out * k..(out + width) * k].fill(0.0);
                        }
                        Op::MulSpan { a, wa, b, wb, out } => {
                            for j in 0..*wb {
                                let bv = val[b + j];
                                for i in 0..*wa {
                                    let av = val[a + i];
                                    let o = out + i + wa * j;
                                    val[o] = av * bv;
                                    for l in 0..k {
                                        der[o * k + l] =
                                            der[(a + i) * k + l] * bv + av * der[(b + j) * k + l];
                                    }
                                }
                            }
                        }
                        Op::CopyOut { src, dst } => {
                            xrow[*dst] = val[*src];
                            jac[dst * k..(dst + 1) * k]
                                .copy_from_slice(&der[src * k..(src + 1) * k]);
                        }
                    }
                }
                Ok(())
            }
            BackendState::Fd {
                evaluator,
                plus,
                minus,
            } => {
                let k = self.var_slots.len();
                let p = self.compiled.width;
                evaluator.evaluate_row(row, &mut self.xrow)?;
                for (l, &slot) in self.var_slots.iter().enumerate() {
                    let x = self.cols[slot].numeric(row);
                    let h = 1e-6 * x.abs().max(1.0);
                    evaluator.evaluate_row_with(row, &[(slot, x + h)], plus)?;
                    evaluator.evaluate_row_with(row, &[(slot, x - h)], minus)?;
                    for j in 0..p {
                        self.jac[j * k + l] = (plus[j] - minus[j]) / (2.0 * h);
                    }
                }
                Ok(())
            }
        }
    }

    /// Fill `x` (p) and `j` (p x k, row-major) in a single pass.
    pub fn row_and_jacobian(&mut self, row: usize, x: &mut [f64], j: &mut [f64]) -> Result<()> {
        if x.len() != self.xrow.len() || j.len() != self.jac.len() {
            return Err(Error::Diff(format!(
                "buffers must have lengths {} and {}",
                self.xrow.len(),
                self.jac.len()
            )));
        }
        self.run(row)?;
        x.copy_from_slice(&self.xrow);
        j.copy_from_slice(&self.jac);
        Ok(())
    }

    /// Current value of differentiation variable `l` at `row` (honoring any
    /// scenario override the evaluator was bound against).
    pub fn var_value(&self, l: usize, row: usize) -> Result<f64> {
        if l >= self.var_slots.len() {
            return Err(Error::Diff(format!(
                "variable index {l} out of range (k={})",
                self.var_slots.len()
            )));
        }
        self.check_row(row)?;
        Ok(self.cols[self.var_slots[l]].numeric(row))
    }

    /// Write the p x k Jacobian for one row into `j` (row-major).
    pub fn jacobian_row(&mut self, row: usize, j: &mut [f64]) -> Result<()> {
        if j.len() != self.jac.len() {
            return Err(Error::Diff(format!(
                "Jacobian buffer has length {}, expected {}",
                j.len(),
                self.jac.len()
            )));
        }
        self.run(row)?;
        j.copy_from_slice(&self.jac);
        Ok(())
    }

    /// Write the model row into `x`.
    pub fn model_row(&mut self, row: usize, x: &mut [f64]) -> Result<()> {
        if x.len() != self.xrow.len() {
            return Err(Error::Diff(format!(
                "row buffer has length {}, expected {}",
                x.len(),
                self.xrow.len()
            )));
        }
        self.run(row)?;
        x.copy_from_slice(&self.xrow);
        Ok(())
    }

    /// Linear-predictor-scale effects: out[l] = (J col_l)' beta.
    pub fn marginal_effects_eta(
        &mut self,
        beta: &[f64],
        row: usize,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_shapes(beta, out)?;
        self.run(row)?;
        self.effects_from_buffers(beta, out);
        Ok(())
    }

    /// Mean-scale effects: out[l] = g^-1'(eta) * (J col_l)' beta, eta = x' beta.
    pub fn marginal_effects_mu(
        &mut self,
        beta: &[f64],
        row: usize,
        link: LinkFunction,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_shapes(beta, out)?;
        self.run(row)?;
        self.effects_from_buffers(beta, out);
        if link == LinkFunction::Identity {
            // identical to the eta-scale path, bit for bit
            return Ok(());
        }
        let eta = dot(&self.xrow, beta);
        let d1 = link_eval(link, LinkPart::D1, eta)?;
        for v in out.iter_mut() {
            *v *= d1;
        }
        Ok(())
    }

    /// Gradient of the mean-scale effect for variable `var_l` with respect to
    /// beta: out = g^-1''(eta) * ((J col_l)' beta) * x + g^-1'(eta) * J col_l.
    pub fn mu_effect_gradient_wrt_beta(
        &mut self,
        beta: &[f64],
        row: usize,
        link: LinkFunction,
        var_l: usize,
        out: &mut [f64],
    ) -> Result<()> {
        let p = self.p();
        let k = self.k();
        if beta.len() != p || out.len() != p {
            return Err(Error::Diff(format!(
                "beta/gradient buffers must have length {p}"
            )));
        }
        if var_l >= k {
            return Err(Error::Diff(format!(
                "variable index {var_l} out of range (k={k})"
            )));
        }
        self.run(row)?;
        let eta = dot(&self.xrow, beta);
        let d1 = link_eval(link, LinkPart::D1, eta)?;
        let d2 = link_eval(link, LinkPart::D2, eta)?;
        let mut jtb = 0.0;
        for j in 0..p {
            jtb += self.jac[j * k + var_l] * beta[j];
        }
        for j in 0..p {
            out[j] = d2 * jtb * self.xrow[j] + d1 * self.jac[j * k + var_l];
        }
        Ok(())
    }

    /// Gradient of the mean-scale prediction with respect to beta:
    /// out = g^-1'(eta) * x.
    pub fn prediction_gradient_wrt_beta(
        &mut self,
        beta: &[f64],
        row: usize,
        link: LinkFunction,
        out: &mut [f64],
    ) -> Result<()> {
        let p = self.p();
        if beta.len() != p || out.len() != p {
            return Err(Error::Diff(format!(
                "beta/gradient buffers must have length {p}"
            )));
        }
        self.run(row)?;
        let eta = dot(&self.xrow, beta);
        let d1 = link_eval(link, LinkPart::D1, eta)?;
        for j in 0..p {
            out[j] = d1 * self.xrow[j];
        }
        Ok(())
    }

    fn check_shapes(&self, beta: &[f64], out: &[f64]) -> Result<()> {
        if beta.len() != self.p() {
            return Err(Error::Diff(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.p()
            )));
        }
        if out.len() != self.k() {
            return Err(Error::Diff(format!(
                "effects buffer has length {}, expected {}",
                out.len(),
                self.k()
            )));
        }
        Ok(())
    }

    fn effects_from_buffers(&self, beta: &[f64], out: &mut [f64]) {
        let k = self.k();
        out.fill(0.0);
        for (j, &b) in beta.iter().enumerate() {
            for (l, o) in out.iter_mut().enumerate() {
                *o += self.jac[j * k + l] * b;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
