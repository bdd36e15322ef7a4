//! Position-mapped compilation of resolved formulas.
//!
//! A [`CompiledFormula`] is a flat operation program over a scratch buffer:
//! every operation's input and output positions are fixed at compile time,
//! so per-row evaluation is a branch-free pass that writes the model row
//! into a caller-supplied buffer with no heap allocation.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::formula::{BinOp, Func};
use crate::schema::{ContrastMatrix, ResolvedExpr, ResolvedFormula, ResolvedTerm};
use crate::tables::{Column, ColumnKind, OverrideValue, ScenarioOverlay, Table};

/// One operation of the compiled program. Positions index the scratch buffer
/// except for `CopyOut`, whose destination indexes the output row.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Const { value: f64, out: usize },
    Load { slot: usize, out: usize },
    Unary { func: Func, input: usize, out: usize },
    Binary { op: BinOp, in1: usize, in2: usize, out: usize },
    /// Gather the contrast-matrix row selected by the column's level code
    /// into `width` consecutive scratch positions starting at `out`.
    Contrast { slot: usize, matrix: usize, out: usize, width: usize },
    /// Interaction column products: `out[i + wa*j] = a[i] * b[j]`,
    /// with the first span's columns varying fastest.
    MulSpan { a: usize, wa: usize, b: usize, wb: usize, out: usize },
    CopyOut { src: usize, dst: usize },
}

/// Column binding required by the program: a name plus how it is read.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub name: String,
    pub access: Access,
}

/// How a bound column is accessed during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Access {
    /// Read as a 64-bit float (numeric or integer columns).
    Numeric,
    /// Read as a level code; the level table must match exactly.
    Code { levels: Vec<String> },
}

/// Output span of one model term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSpan {
    pub label: String,
    pub start: usize,
    pub width: usize,
}

/// A compiled, immutable formula program.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledFormula {
    pub ops: Vec<Op>,
    pub scratch_size: usize,
    pub width: usize,
    pub bindings: Vec<Binding>,
    pub matrices: Vec<ContrastMatrix>,
    pub term_spans: Vec<TermSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CseKey {
    Const(u64),
    Load(usize),
    Unary(Func, usize),
    Binary(BinOp, usize, usize),
}

struct Compiler {
    ops: Vec<Op>,
    scratch: usize,
    cse: HashMap<CseKey, usize>,
    contrast_spans: Vec<(usize, usize, usize, usize)>, // slot, matrix idx, start, width
    matrices: Vec<ContrastMatrix>,
    bindings: Vec<Binding>,
}

impl Compiler {
    fn alloc(&mut self, n: usize) -> usize {
        let start = self.scratch;
        self.scratch += n;
        start
    }

    fn emit_cse(&mut self, key: CseKey, make: impl FnOnce(usize) -> Op) -> usize {
        if let Some(&pos) = self.cse.get(&key) {
            return pos;
        }
        let out = self.alloc(1);
        self.ops.push(make(out));
        self.cse.insert(key, out);
        out
    }

    fn compile_expr(&mut self, expr: &ResolvedExpr) -> usize {
        match expr {
            ResolvedExpr::Column(slot) => {
                self.emit_cse(CseKey::Load(*slot), |out| Op::Load { slot: *slot, out })
            }
            ResolvedExpr::Const(v) => {
                let value = *v;
                self.emit_cse(CseKey::Const(value.to_bits()), |out| Op::Const { value, out })
            }
            ResolvedExpr::Call(func, arg) => {
                let input = self.compile_expr(arg);
                let f = *func;
                self.emit_cse(CseKey::Unary(f, input), |out| Op::Unary {
                    func: f,
                    input,
                    out,
                })
            }
            ResolvedExpr::Binary(op, a, b) => {
                let in1 = self.compile_expr(a);
                let in2 = self.compile_expr(b);
                let o = *op;
                self.emit_cse(CseKey::Binary(o, in1, in2), |out| Op::Binary {
                    op: o,
                    in1,
                    in2,
                    out,
                })
            }
        }
    }

    fn compile_term(&mut self, term: &ResolvedTerm) -> (usize, usize) {
        match term {
            ResolvedTerm::Intercept => {
                let pos = self.emit_cse(CseKey::Const(1.0f64.to_bits()), |out| Op::Const {
                    value: 1.0,
                    out,
                });
                (pos, 1)
            }
            ResolvedTerm::Continuous { col } => {
                let pos = self.emit_cse(CseKey::Load(*col), |out| Op::Load { slot: *col, out });
                (pos, 1)
            }
            ResolvedTerm::Function { func, arg } => {
                let input = self.compile_expr(arg);
                let f = *func;
                let pos = self.emit_cse(CseKey::Unary(f, input), |out| Op::Unary {
                    func: f,
                    input,
                    out,
                });
                (pos, 1)
            }
            ResolvedTerm::Categorical { col, contrast } => {
                if let Some(&(_, _, start, width)) = self
                    .contrast_spans
                    .iter()
                    .find(|(slot, m, _, _)| slot == col && &self.matrices[*m] == contrast)
                {
                    return (start, width);
                }
                let width = contrast.ncols;
                let start = self.alloc(width);
                let matrix = self.matrices.len();
                self.matrices.push(contrast.clone());
                self.ops.push(Op::Contrast {
                    slot: *col,
                    matrix,
                    out: start,
                    width,
                });
                self.contrast_spans.push((*col, matrix, start, width));
                (start, width)
            }
            ResolvedTerm::Interaction { parts } => {
                let spans: Vec<(usize, usize)> =
                    parts.iter().map(|p| self.compile_term(p)).collect();
                let mut acc = spans[0];
                for &(b, wb) in &spans[1..] {
                    let (a, wa) = acc;
                    let out = self.alloc(wa * wb);
                    self.ops.push(Op::MulSpan { a, wa, b, wb, out });
                    acc = (out, wa * wb);
                }
                acc
            }
        }
    }
}

/// Compile a resolved formula into a flat operation program.
///
/// Repeated column loads and identical subexpressions share a scratch slot;
/// each new intermediate gets a fresh slot, so `scratch_size` stays
/// proportional to program length.
pub fn compile(resolved: &ResolvedFormula) -> Result<CompiledFormula> {
    let bindings = resolved
        .columns
        .iter()
        .zip(&resolved.column_kinds)
        .map(|(name, kind)| Binding {
            name: name.clone(),
            access: match kind {
                ColumnKind::Numeric | ColumnKind::Integer => Access::Numeric,
                ColumnKind::Boolean => Access::Code {
                    levels: vec!["false".into(), "true".into()],
                },
                ColumnKind::Categorical => Access::Code { levels: Vec::new() },
            },
        })
        .collect();
    let mut c = Compiler {
        ops: Vec::new(),
        scratch: 0,
        cse: HashMap::new(),
        contrast_spans: Vec::new(),
        matrices: Vec::new(),
        bindings,
    };
    let mut term_spans = Vec::new();
    let mut scratch_spans = Vec::new();
    for (term, label) in resolved.terms.iter().zip(&resolved.term_labels) {
        let (start, width) = c.compile_term(term);
        scratch_spans.push((start, width));
        term_spans.push(TermSpan {
            label: label.clone(),
            start: 0,
            width,
        });
    }
    // categorical bindings learn their level tables from the contrast matrices
    for &(slot, m, _, _) in &c.contrast_spans {
        if let Access::Code { levels } = &mut c.bindings[slot].access {
            if levels.is_empty() {
                *levels = c.matrices[m].levels.clone();
            } else if *levels != c.matrices[m].levels {
                return Err(Error::Compile(format!(
                    "conflicting level tables for column '{}'",
                    c.bindings[slot].name
                )));
            }
        }
    }
    let mut dst = 0;
    for (span, (start, width)) in term_spans.iter_mut().zip(&scratch_spans) {
        span.start = dst;
        for k in 0..*width {
            c.ops.push(Op::CopyOut {
                src: start + k,
                dst,
            });
            dst += 1;
        }
    }
    if dst != resolved.width {
        return Err(Error::Compile(format!(
            "output width mismatch: program writes {dst}, schema says {}",
            resolved.width
        )));
    }
    let compiled = CompiledFormula {
        ops: c.ops,
        scratch_size: c.scratch,
        width: resolved.width,
        bindings: c.bindings,
        matrices: c.matrices,
        term_spans,
    };
    compiled.validate()?;
    Ok(compiled)
}

impl CompiledFormula {
    /// One-time validation that every position is in range and every output
    /// index is written exactly once. Lets the evaluation loop skip bounds
    /// checks afterwards.
    pub fn validate(&self) -> Result<()> {
        let s = self.scratch_size;
        let mut written = vec![false; s];
        let mut out_written = vec![false; self.width];
        let check_read = |pos: usize, written: &[bool]| -> Result<()> {
            if pos >= s || !written[pos] {
                return Err(Error::Compile(format!(
                    "operation reads scratch position {pos} before it is written"
                )));
            }
            Ok(())
        };
        for op in &self.ops {
            match op {
                Op::Const { out, .. } => written[*out] = true,
                Op::Load { slot, out } => {
                    if *slot >= self.bindings.len() {
                        return Err(Error::Compile(format!("load slot {slot} out of range")));
                    }
                    written[*out] = true;
                }
                Op::Unary { input, out, .. } => {
                    check_read(*input, &written)?;
                    written[*out] = true;
                }
                Op::Binary { in1, in2, out, .. } => {
                    check_read(*in1, &written)?;
                    check_read(*in2, &written)?;
                    written[*out] = true;
                }
                Op::Contrast {
                    slot,
                    matrix,
                    out,
                    width,
                } => {
                    if *slot >= self.bindings.len() || *matrix >= self.matrices.len() {
                        return Err(Error::Compile("contrast references out of range".into()));
                    }
                    if self.matrices[*matrix].ncols != *width || out + width > s {
                        return Err(Error::Compile("contrast span out of range".into()));
                    }
                    for k in 0..*width {
                        written[out + k] = true;
                    }
                }
                Op::MulSpan { a, wa, b, wb, out } => {
                    for i in 0..*wa {
                        check_read(a + i, &written)?;
                    }
                    for j in 0..*wb {
                        check_read(b + j, &written)?;
                    }
                    if out + wa * wb > s {
                        return Err(Error::Compile("product span out of range".into()));
                    }
                    for k in 0..wa * wb {
                        written[out + k] = true;
                    }
                }
                Op::CopyOut { src, dst } => {
                    check_read(*src, &written)?;
                    if *dst >= self.width || out_written[*dst] {
                        return Err(Error::Compile(format!(
                            "output index {dst} out of range or written twice"
                        )));
                    }
                    out_written[*dst] = true;
                }
            }
        }
        if !out_written.iter().all(|&w| w) {
            return Err(Error::Compile("program does not fill the output row".into()));
        }
        Ok(())
    }

    /// Text dump of the operation program, one op per line.
    pub fn dump_program(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# width={} scratch={}", self.width, self.scratch_size);
        for op in &self.ops {
            let line = match op {
                Op::Const { value, out } => format!("const {value} -> s{out}"),
                Op::Load { slot, out } => {
                    format!("load {} -> s{out}", self.bindings[*slot].name)
                }
                Op::Unary { func, input, out } => {
                    format!("unary {} s{input} -> s{out}", func.name())
                }
                Op::Binary { op, in1, in2, out } => {
                    format!("binary {} s{in1} s{in2} -> s{out}", op.symbol())
                }
                Op::Contrast {
                    slot,
                    matrix,
                    out,
                    width,
                } => format!(
                    "contrast {} m{matrix} -> s{out}..s{}",
                    self.bindings[*slot].name,
                    out + width - 1
                ),
                Op::MulSpan { a, wa, b, wb, out } => {
                    format!("mulspan s{a}*{wa} s{b}*{wb} -> s{out}")
                }
                Op::CopyOut { src, dst } => format!("copyout s{src} -> o{dst}"),
            };
            let _ = writeln!(s, "{line}");
        }
        s
    }
}

/// Structural sketch of a dumped program, for round-trip checks of the dump
/// format. Matrix contents are referenced by index only.
pub fn parse_program(dump: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in dump.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let kind = line.split_whitespace().next().unwrap_or("");
        match kind {
            "const" | "load" | "unary" | "binary" | "contrast" | "mulspan" | "copyout" => {
                if !line.contains("->") {
                    return Err(Error::Compile(format!("line {}: missing '->'", i + 1)));
                }
                out.push(line.to_string());
            }
            other => {
                return Err(Error::Compile(format!(
                    "line {}: unknown operation '{other}'",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Data access
// ---------------------------------------------------------------------------

/// Anything a compiled formula can be evaluated against: a base table or a
/// scenario overlay on one.
pub trait Data {
    fn table(&self) -> &Table;
    fn override_for(&self, col: usize) -> Option<&OverrideValue>;
    fn nrows(&self) -> usize {
        self.table().nrows()
    }
}

impl Data for Table {
    fn table(&self) -> &Table {
        self
    }
    fn override_for(&self, _col: usize) -> Option<&OverrideValue> {
        None
    }
}

impl Data for ScenarioOverlay<'_> {
    fn table(&self) -> &Table {
        self.base()
    }
    fn override_for(&self, col: usize) -> Option<&OverrideValue> {
        ScenarioOverlay::override_for(self, col)
    }
}

/// Resolved view of one bound column.
#[derive(Debug, Clone, Copy)]
pub enum ColRef<'d> {
    F64(&'d [f64]),
    I64(&'d [i64]),
    CodesU32(&'d [u32]),
    CodesBool(&'d [bool]),
    ConstF(f64),
    ConstCode(u32),
}

impl ColRef<'_> {
    #[inline(always)]
    pub(crate) fn numeric(&self, row: usize) -> f64 {
        // positions are pre-validated; rows are checked once per call
        unsafe {
            match self {
                ColRef::F64(v) => *v.get_unchecked(row),
                ColRef::I64(v) => *v.get_unchecked(row) as f64,
                ColRef::ConstF(x) => *x,
                _ => unreachable!("numeric read of code column"),
            }
        }
    }

    #[inline(always)]
    pub(crate) fn code(&self, row: usize) -> u32 {
        unsafe {
            match self {
                ColRef::CodesU32(v) => *v.get_unchecked(row),
                ColRef::CodesBool(v) => *v.get_unchecked(row) as u32,
                ColRef::ConstCode(c) => *c,
                _ => unreachable!("code read of numeric column"),
            }
        }
    }
}

/// Per-worker evaluation handle: owns the scratch buffer and the resolved
/// column references for one data source.
pub struct Evaluator<'d> {
    compiled: &'d CompiledFormula,
    cols: Vec<ColRef<'d>>,
    scratch: Vec<f64>,
    nrows: usize,
}

/// Resolve bindings against a data source, checking variants and level tables.
pub fn bind_columns<'d, D: Data>(
    compiled: &CompiledFormula,
    data: &'d D,
) -> Result<Vec<ColRef<'d>>> {
    let table = data.table();
    let mut cols = Vec::with_capacity(compiled.bindings.len());
    for (slot, binding) in compiled.bindings.iter().enumerate() {
        let idx = table.column_index(&binding.name)?;
        let (_, column) = table.column_at(idx);
        let ov = data.override_for(idx);
        let colref = match (&binding.access, column) {
            (Access::Numeric, Column::Numeric(v)) => match ov {
                Some(OverrideValue::Numeric(x)) => ColRef::ConstF(*x),
                Some(other) => {
                    return Err(Error::Compile(format!(
                        "override {other:?} does not match numeric column '{}'",
                        binding.name
                    )))
                }
                None => ColRef::F64(v),
            },
            (Access::Numeric, Column::Integer(v)) => match ov {
                Some(OverrideValue::Integer(x)) => ColRef::ConstF(*x as f64),
                Some(OverrideValue::Numeric(x)) => ColRef::ConstF(*x),
                Some(other) => {
                    return Err(Error::Compile(format!(
                        "override {other:?} does not match integer column '{}'",
                        binding.name
                    )))
                }
                None => ColRef::I64(v),
            },
            (Access::Code { levels }, Column::Categorical { codes, levels: have }) => {
                if have != levels {
                    return Err(Error::Compile(format!(
                        "level table of column '{}' does not match the compiled formula \
                         (expected [{}], found [{}])",
                        binding.name,
                        levels.join(", "),
                        have.join(", ")
                    )));
                }
                match ov {
                    Some(OverrideValue::Level(c)) => ColRef::ConstCode(*c),
                    Some(other) => {
                        return Err(Error::Compile(format!(
                            "override {other:?} does not match categorical column '{}'",
                            binding.name
                        )))
                    }
                    None => ColRef::CodesU32(codes),
                }
            }
            (Access::Code { .. }, Column::Boolean(v)) => match ov {
                Some(OverrideValue::Boolean(b)) => ColRef::ConstCode(*b as u32),
                Some(other) => {
                    return Err(Error::Compile(format!(
                        "override {other:?} does not match boolean column '{}'",
                        binding.name
                    )))
                }
                None => ColRef::CodesBool(v),
            },
            (access, column) => {
                return Err(Error::Compile(format!(
                    "column '{}' is {}, incompatible with {:?} access",
                    binding.name,
                    column.kind(),
                    access
                )))
            }
        };
        let _ = slot;
        cols.push(colref);
    }
    Ok(cols)
}

impl<'d> Evaluator<'d> {
    pub fn new<D: Data>(compiled: &'d CompiledFormula, data: &'d D) -> Result<Self> {
        let cols = bind_columns(compiled, data)?;
        Ok(Evaluator {
            compiled,
            cols,
            scratch: vec![0.0; compiled.scratch_size],
            nrows: data.nrows(),
        })
    }

    pub fn width(&self) -> usize {
        self.compiled.width
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Evaluate one model row into `out`. Allocation-free after construction.
    #[inline]
    pub fn evaluate_row(&mut self, row: usize, out: &mut [f64]) -> Result<()> {
        self.evaluate_row_with(row, &[], out)
    }

    /// Evaluate with per-call numeric overrides `(binding slot, value)`,
    /// used by the finite-difference backend to nudge one variable.
    pub fn evaluate_row_with(
        &mut self,
        row: usize,
        var_overrides: &[(usize, f64)],
        out: &mut [f64],
    ) -> Result<()> {
        if row >= self.nrows {
            return Err(Error::Compile(format!(
                "row {row} out of range (n={})",
                self.nrows
            )));
        }
        if out.len() != self.compiled.width {
            return Err(Error::Compile(format!(
                "output buffer has length {}, expected {}",
                out.len(),
                self.compiled.width
            )));
        }
        let scratch = &mut self.scratch[..];
        let cols = &self.cols[..];
        let matrices = &self.compiled.matrices[..];
        for op in &self.compiled.ops {
            // positions were validated when the program was built
            unsafe {
                match op {
                    Op::Const { value, out: o } => *scratch.get_unchecked_mut(*o) = *value,
                    Op::Load { slot, out: o } => {
                        let mut v = cols.get_unchecked(*slot).numeric(row);
                        for &(s, x) in var_overrides {
                            if s == *slot {
                                v = x;
                            }
                        }
                        *scratch.get_unchecked_mut(*o) = v;
                    }
                    Op::Unary {
                        func,
                        input,
                        out: o,
                    } => {
                        let x = *scratch.get_unchecked(*input);
                        *scratch.get_unchecked_mut(*o) = eval_func(*func, x);
                    }
                    Op::Binary {
                        op,
                        in1,
                        in2,
                        out: o,
                    } => {
                        let a = *scratch.get_unchecked(*in1);
                        let b = *scratch.get_unchecked(*in2);
                        *scratch.get_unchecked_mut(*o) = eval_binop(*op, a, b);
                    }
                    Op::Contrast {
                        slot,
                        matrix,
                        out: o,
                        width,
                    } => {
                        let code = cols.get_unchecked(*slot).code(row) as usize;
                        let m = matrices.get_unchecked(*matrix);
                        let mrow = m.data.get_unchecked(code * m.ncols..(code + 1) * m.ncols);
                        for k in 0..*width {
                            *scratch.get_unchecked_mut(o + k) = *mrow.get_unchecked(k);
                        }
                    }
                    Op::MulSpan { a, wa, b, wb, out: o } => {
                        for j in 0..*wb {
                            let bv = *scratch.get_unchecked(b + j);
                            for i in 0..*wa {
                                let av = *scratch.get_unchecked(a + i);
                                *scratch.get_unchecked_mut(o + i + wa * j) = av * bv;
                            }
                        }
                    }
                    Op::CopyOut { src, dst } => {
                        *out.get_unchecked_mut(*dst) = *scratch.get_unchecked(*src);
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline(always)]
pub(crate) fn eval_func(func: Func, x: f64) -> f64 {
    match func {
        Func::Log => x.ln(),
        Func::Log1p => x.ln_1p(),
        Func::Exp => x.exp(),
        Func::Sqrt => x.sqrt(),
        Func::Abs => x.abs(),
        Func::Identity => x,
    }
}

#[inline(always)]
pub(crate) fn eval_binop(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
        BinOp::Pow => a.powf(b),
    }
}

/// Materialize the full n x p design matrix. This is the allocating path for
/// fitting and tests, not the per-row hot path.
pub fn model_matrix<D: Data>(compiled: &CompiledFormula, data: &D) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    let p = compiled.width;
    let mut evaluator = Evaluator::new(compiled, data)?;
    let mut m = DMatrix::zeros(n, p);
    let mut row_buf = vec![0.0; p];
    for i in 0..n {
        evaluator.evaluate_row(i, &mut row_buf)?;
        for j in 0..p {
            m[(i, j)] = row_buf[j];
        }
    }
    Ok(m)
}
