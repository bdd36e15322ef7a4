//! Wilkinson-notation formula parsing and normalization.
//!
//! `parse_formula` turns text like `y ~ x * group + log1p(z)` into an AST;
//! `normalize` expands crossings (`a*b` into `a + b + a&b`), deduplicates
//! terms, and fixes the canonical term order; `strip_random_effects` drops
//! `(expr | g)` terms so externally fitted mixed models can be ingested as
//! fixed-effects formulas.

use std::fmt;

use crate::error::{Error, Result};

/// Whitelisted functions usable inside formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Log,
    Log1p,
    Exp,
    Sqrt,
    Abs,
    Identity,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Log => "log",
            Func::Log1p => "log1p",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Identity => "identity",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "log" => Func::Log,
            "log1p" => Func::Log1p,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "identity" => Func::Identity,
            _ => return None,
        })
    }
}

/// Binary arithmetic operators allowed inside function arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 3,
        }
    }
}

/// Arithmetic expression inside a function-argument context.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var(String),
    Const(f64),
    Call(Func, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn variables(&self, out: &mut Vec<String>) {
        match self {
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Const(_) => {}
            Expr::Call(_, a) => a.variables(out),
            Expr::Binary(_, a, b) => {
                a.variables(out);
                b.variables(out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
        match self {
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Call(func, a) => {
                write!(f, "{}(", func.name())?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")
            }
            Expr::Binary(op, a, b) => {
                let prec = op.precedence();
                let needs = prec < parent;
                if needs {
                    write!(f, "(")?;
                }
                a.fmt_prec(f, prec)?;
                write!(f, " {} ", op.symbol())?;
                // left-associative: right child needs parens at equal precedence
                b.fmt_prec(f, prec + 1)?;
                if needs {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// One node of the right-hand-side term tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Variable(String),
    Call(Func, Expr),
    /// `&`-interaction of subterms.
    Interaction(Vec<Term>),
    /// `*`-crossing; removed by [`normalize`].
    Crossing(Vec<Term>),
    /// Parenthesized sum, e.g. the `(a + b)` in `(a + b) & c`.
    Sum(Vec<Term>),
    /// `(inner | group)`.
    RandomEffect { inner: Vec<Term>, group: String },
}

impl Term {
    fn is_unit(&self) -> bool {
        matches!(self, Term::Variable(_) | Term::Call(..))
    }

    /// Number of unit components (1 for main effects, k for k-way interactions).
    pub fn arity(&self) -> usize {
        match self {
            Term::Interaction(parts) => parts.len(),
            _ => 1,
        }
    }

    pub fn variables(&self, out: &mut Vec<String>) {
        match self {
            Term::Variable(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Term::Call(_, e) => e.variables(out),
            Term::Interaction(ts) | Term::Crossing(ts) | Term::Sum(ts) => {
                for t in ts {
                    t.variables(out);
                }
            }
            Term::RandomEffect { inner, .. } => {
                for t in inner {
                    t.variables(out);
                }
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Variable(v) => write!(f, "{v}"),
            Term::Call(func, e) => write!(f, "{}({e})", func.name()),
            Term::Interaction(ts) => write_joined(f, ts, " & "),
            Term::Crossing(ts) => write_joined(f, ts, " * "),
            Term::Sum(ts) => {
                write!(f, "(")?;
                write_joined(f, ts, " + ")?;
                write!(f, ")")
            }
            Term::RandomEffect { inner, group } => {
                write!(f, "(")?;
                if inner.is_empty() {
                    write!(f, "1")?;
                } else {
                    write_joined(f, inner, " + ")?;
                }
                write!(f, " | {group})")
            }
        }
    }
}

fn write_joined(f: &mut fmt::Formatter<'_>, ts: &[Term], sep: &str) -> fmt::Result {
    for (i, t) in ts.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        // parenthesize nested sums/crossings inside products for re-parse fidelity
        match t {
            Term::Crossing(_) if sep == " & " => write!(f, "({t})")?,
            _ => write!(f, "{t}")?,
        }
    }
    Ok(())
}

/// A parsed formula: response, intercept flag, and top-level term list.
#[derive(Debug, Clone, PartialEq)]
pub struct FormulaAst {
    pub response: String,
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl FormulaAst {
    /// All variable names referenced on the right-hand side, in appearance order.
    pub fn rhs_variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.terms {
            t.variables(&mut out);
        }
        out
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.response)?;
        if !self.intercept {
            write!(f, "0")?;
            if !self.terms.is_empty() {
                write!(f, " + ")?;
            }
        } else if self.terms.is_empty() {
            write!(f, "1")?;
        }
        write_joined(f, &self.terms, " + ")
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Tilde,
    Plus,
    Minus,
    Star,
    Amp,
    Slash,
    Caret,
    Pipe,
    LParen,
    RParen,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>> {
    let mut toks = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '~' => {
                toks.push((Tok::Tilde, i));
                i += 1;
            }
            '+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            '&' | ':' => {
                toks.push((Tok::Amp, i));
                i += 1;
            }
            '/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            '^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            '|' => {
                toks.push((Tok::Pipe, i));
                i += 1;
            }
            '(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| Error::FormulaParse {
                    position: start,
                    message: format!("invalid number '{s}'"),
                })?;
                toks.push((Tok::Number(v), start));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric()
                        || bytes[i] == b'_'
                        || bytes[i] == b'.')
                {
                    i += 1;
                }
                toks.push((Tok::Ident(text[start..i].to_string()), start));
            }
            other => {
                return Err(Error::FormulaParse {
                    position: i,
                    message: format!("unexpected character '{other}'"),
                })
            }
        }
    }
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

impl Lexer {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn position(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|(_, p)| *p)
            .unwrap_or(0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        let pos = self.position();
        match self.next() {
            Some(t) if t == tok => Ok(()),
            _ => Err(Error::FormulaParse {
                position: pos,
                message: format!("expected {what}"),
            }),
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::FormulaParse {
            position: self.position(),
            message: message.into(),
        })
    }
}

/// Parse formula text into an AST. The intercept is implicit unless
/// suppressed with `0 +` or `- 1`.
pub fn parse_formula(text: &str) -> Result<FormulaAst> {
    if text.matches('~').count() != 1 {
        return Err(Error::FormulaParse {
            position: 0,
            message: "formula must contain exactly one '~'".into(),
        });
    }
    let mut lx = Lexer {
        toks: lex(text)?,
        pos: 0,
    };
    let response = match lx.next() {
        Some(Tok::Ident(name)) => name,
        _ => {
            return Err(Error::FormulaParse {
                position: 0,
                message: "expected response variable before '~'".into(),
            })
        }
    };
    lx.expect(Tok::Tilde, "'~'")?;
    if lx.peek().is_none() {
        return lx.err("empty right-hand side");
    }
    let (terms, intercept) = parse_rhs(&mut lx)?;
    if lx.peek().is_some() {
        return lx.err("trailing input after formula");
    }
    if terms.is_empty() && !intercept {
        return lx.err("empty right-hand side");
    }
    Ok(FormulaAst {
        response,
        intercept,
        terms,
    })
}

/// Parse a `+`/`-`-separated term list. Returns (terms, intercept flag).
fn parse_rhs(lx: &mut Lexer) -> Result<(Vec<Term>, bool)> {
    let mut terms = Vec::new();
    let mut intercept = true;
    loop {
        match lx.peek() {
            Some(Tok::Number(v)) => {
                let v = *v;
                lx.next();
                if v == 0.0 {
                    intercept = false;
                } else if v == 1.0 {
                    intercept = true;
                } else {
                    return lx.err(format!("unexpected constant {v} in term position"));
                }
            }
            Some(Tok::Minus) => {
                lx.next();
                match lx.next() {
                    Some(Tok::Number(v)) if v == 1.0 => intercept = false,
                    _ => return lx.err("'-' in a formula may only precede 1"),
                }
            }
            _ => {
                let t = parse_product(lx)?;
                terms.push(t);
            }
        }
        match lx.peek() {
            Some(Tok::Plus) => {
                lx.next();
            }
            Some(Tok::Minus) => {
                lx.next();
                match lx.next() {
                    Some(Tok::Number(v)) if v == 1.0 => intercept = false,
                    _ => return lx.err("'-' in a formula may only precede 1"),
                }
                if let Some(Tok::Plus) = lx.peek() {
                    lx.next();
                } else {
                    break;
                }
            }
            _ => break,
        }
    }
    Ok((terms, intercept))
}

/// Parse a `*`/`&` product of factors, flattening runs of the same operator.
fn parse_product(lx: &mut Lexer) -> Result<Term> {
    let mut cur = parse_factor(lx)?;
    loop {
        match lx.peek() {
            Some(Tok::Star) => {
                lx.next();
                let rhs = parse_factor(lx)?;
                cur = match cur {
                    Term::Crossing(mut parts) => {
                        parts.push(rhs);
                        Term::Crossing(parts)
                    }
                    other => Term::Crossing(vec![other, rhs]),
                };
            }
            Some(Tok::Amp) => {
                lx.next();
                let rhs = parse_factor(lx)?;
                cur = match cur {
                    Term::Interaction(mut parts) => {
                        parts.push(rhs);
                        Term::Interaction(parts)
                    }
                    other => Term::Interaction(vec![other, rhs]),
                };
            }
            _ => break,
        }
    }
    Ok(cur)
}

fn parse_factor(lx: &mut Lexer) -> Result<Term> {
    let pos = lx.position();
    match lx.next() {
        Some(Tok::Ident(name)) => {
            if let Some(Tok::LParen) = lx.peek() {
                let func = Func::from_name(&name).ok_or_else(|| Error::FormulaParse {
                    position: pos,
                    message: format!("unknown function '{name}'"),
                })?;
                lx.next();
                let arg = parse_arith(lx)?;
                lx.expect(Tok::RParen, "')'")?;
                Ok(Term::Call(func, arg))
            } else {
                Ok(Term::Variable(name))
            }
        }
        Some(Tok::LParen) => {
            // either a parenthesized sum or a random-effect term (sum | group)
            let (inner, inner_intercept) = parse_rhs(lx)?;
            match lx.next() {
                Some(Tok::RParen) => {
                    if inner.len() == 1 {
                        Ok(inner.into_iter().next().unwrap())
                    } else if inner.is_empty() {
                        lx.err("empty parenthesized term")
                    } else {
                        Ok(Term::Sum(inner))
                    }
                }
                Some(Tok::Pipe) => {
                    let group = match lx.next() {
                        Some(Tok::Ident(g)) => g,
                        _ => return lx.err("expected grouping variable after '|'"),
                    };
                    lx.expect(Tok::RParen, "')'")?;
                    // an explicit `1` inside is the random intercept; drop it,
                    // keeping only structural terms
                    let _ = inner_intercept;
                    Ok(Term::RandomEffect { inner, group })
                }
                _ => Err(Error::FormulaParse {
                    position: pos,
                    message: "unbalanced parentheses".into(),
                }),
            }
        }
        Some(tok) => Err(Error::FormulaParse {
            position: pos,
            message: format!("unexpected token {tok:?} in term position"),
        }),
        None => Err(Error::FormulaParse {
            position: pos,
            message: "unexpected end of formula".into(),
        }),
    }
}

fn parse_arith(lx: &mut Lexer) -> Result<Expr> {
    parse_additive(lx)
}

fn parse_additive(lx: &mut Lexer) -> Result<Expr> {
    let mut lhs = parse_multiplicative(lx)?;
    loop {
        let op = match lx.peek() {
            Some(Tok::Plus) => BinOp::Add,
            Some(Tok::Minus) => BinOp::Sub,
            _ => break,
        };
        lx.next();
        let rhs = parse_multiplicative(lx)?;
        lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_multiplicative(lx: &mut Lexer) -> Result<Expr> {
    let mut lhs = parse_power(lx)?;
    loop {
        let op = match lx.peek() {
            Some(Tok::Star) => BinOp::Mul,
            Some(Tok::Slash) => BinOp::Div,
            _ => break,
        };
        lx.next();
        let rhs = parse_power(lx)?;
        lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_power(lx: &mut Lexer) -> Result<Expr> {
    let base = parse_atom(lx)?;
    if let Some(Tok::Caret) = lx.peek() {
        lx.next();
        // right-associative
        let exp = parse_power(lx)?;
        Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exp)))
    } else {
        Ok(base)
    }
}

fn parse_atom(lx: &mut Lexer) -> Result<Expr> {
    let pos = lx.position();
    match lx.next() {
        Some(Tok::Number(v)) => Ok(Expr::Const(v)),
        Some(Tok::Minus) => {
            let inner = parse_atom(lx)?;
            Ok(Expr::Binary(
                BinOp::Sub,
                Box::new(Expr::Const(0.0)),
                Box::new(inner),
            ))
        }
        Some(Tok::Ident(name)) => {
            if let Some(Tok::LParen) = lx.peek() {
                let func = Func::from_name(&name).ok_or_else(|| Error::FormulaParse {
                    position: pos,
                    message: format!("unknown function '{name}'"),
                })?;
                lx.next();
                let arg = parse_arith(lx)?;
                lx.expect(Tok::RParen, "')'")?;
                Ok(Expr::Call(func, Box::new(arg)))
            } else {
                Ok(Expr::Var(name))
            }
        }
        Some(Tok::LParen) => {
            let e = parse_arith(lx)?;
            lx.expect(Tok::RParen, "')'")?;
            Ok(e)
        }
        _ => Err(Error::FormulaParse {
            position: pos,
            message: "expected expression".into(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Remove every random-effect term, preserving all other terms in order.
pub fn strip_random_effects(ast: &FormulaAst) -> FormulaAst {
    FormulaAst {
        response: ast.response.clone(),
        intercept: ast.intercept,
        terms: ast
            .terms
            .iter()
            .filter(|t| !matches!(t, Term::RandomEffect { .. }))
            .cloned()
            .collect(),
    }
}

/// Expand crossings, deduplicate, and order terms canonically: main effects
/// in appearance order, then interactions by ascending arity (appearance
/// order within a tier), then random-effect terms.
pub fn normalize(ast: &FormulaAst) -> FormulaAst {
    let mut expanded: Vec<Term> = Vec::new();
    let mut random: Vec<Term> = Vec::new();
    for t in &ast.terms {
        match t {
            Term::RandomEffect { .. } => random.push(t.clone()),
            other => expanded.extend(expand_term(other)),
        }
    }
    // dedup: interactions compare as unordered component sets
    let mut seen: Vec<String> = Vec::new();
    let mut unique: Vec<Term> = Vec::new();
    for t in expanded {
        let key = term_key(&t);
        if !seen.contains(&key) {
            seen.push(key);
            unique.push(t);
        }
    }
    // stable sort by arity keeps appearance order within each tier
    unique.sort_by_key(|t| t.arity());
    unique.extend(random);
    FormulaAst {
        response: ast.response.clone(),
        intercept: ast.intercept,
        terms: unique,
    }
}

fn term_key(t: &Term) -> String {
    match t {
        Term::Interaction(parts) => {
            let mut keys: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
            keys.sort();
            format!("&[{}]", keys.join(","))
        }
        other => other.to_string(),
    }
}

/// Expand one term into a list of unit or interaction terms (no crossings/sums).
fn expand_term(t: &Term) -> Vec<Term> {
    match t {
        Term::Variable(_) | Term::Call(..) => vec![t.clone()],
        Term::Sum(parts) => parts.iter().flat_map(expand_term).collect(),
        Term::Crossing(parts) => {
            // a*b*c = all non-empty subsets, each subset as an interaction
            let expansions: Vec<Vec<Term>> = parts.iter().map(expand_term).collect();
            let k = expansions.len();
            let mut out = Vec::new();
            for mask in 1u32..(1 << k) {
                let chosen: Vec<&Vec<Term>> = (0..k)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| &expansions[i])
                    .collect();
                for combo in cartesian(&chosen) {
                    out.push(make_interaction(combo));
                }
            }
            out
        }
        Term::Interaction(parts) => {
            let expansions: Vec<Vec<Term>> = parts.iter().map(expand_term).collect();
            let refs: Vec<&Vec<Term>> = expansions.iter().collect();
            cartesian(&refs).into_iter().map(make_interaction).collect()
        }
        Term::RandomEffect { .. } => vec![t.clone()],
    }
}

fn cartesian(lists: &[&Vec<Term>]) -> Vec<Vec<Term>> {
    let mut out: Vec<Vec<Term>> = vec![Vec::new()];
    for list in lists {
        let mut next = Vec::with_capacity(out.len() * list.len());
        for prefix in &out {
            for item in *list {
                let mut row = prefix.clone();
                row.push(item.clone());
                next.push(row);
            }
        }
        out = next;
    }
    out
}

fn make_interaction(components: Vec<Term>) -> Term {
    // flatten nested interactions; drop duplicate components (x & x == x)
    let mut flat: Vec<Term> = Vec::new();
    let mut stack: Vec<Term> = components.into_iter().rev().collect();
    while let Some(c) = stack.pop() {
        match c {
            Term::Interaction(parts) => stack.extend(parts.into_iter().rev()),
            unit => {
                debug_assert!(unit.is_unit());
                if !flat.contains(&unit) {
                    flat.push(unit);
                }
            }
        }
    }
    if flat.len() == 1 {
        flat.into_iter().next().unwrap()
    } else {
        Term::Interaction(flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> FormulaAst {
        parse_formula(s).unwrap()
    }

    #[test]
    fn minimal_formula() {
        let f = parse("y ~ x + z");
        assert_eq!(f.response, "y");
        assert!(f.intercept);
        assert_eq!(
            f.terms,
            vec![Term::Variable("x".into()), Term::Variable("z".into())]
        );
    }

    #[test]
    fn crossing_expands_to_wilkinson_form() {
        let f = normalize(&parse("y ~ x * group"));
        assert!(f.intercept);
        assert_eq!(
            f.terms,
            vec![
                Term::Variable("x".into()),
                Term::Variable("group".into()),
                Term::Interaction(vec![
                    Term::Variable("x".into()),
                    Term::Variable("group".into())
                ]),
            ]
        );
    }

    #[test]
    fn random_effect_recognized() {
        let f = parse("y ~ x + (1|group)");
        assert!(f.intercept);
        assert_eq!(f.terms.len(), 2);
        assert_eq!(
            f.terms[1],
            Term::RandomEffect {
                inner: vec![],
                group: "group".into()
            }
        );
    }

    #[test]
    fn strip_removes_random_effects() {
        let f = parse("y ~ x + treatment + (1|group)");
        let s = strip_random_effects(&f);
        assert_eq!(s.to_string(), "y ~ x + treatment");
        let id = parse("y ~ x");
        assert_eq!(strip_random_effects(&id), id);
        let deg = strip_random_effects(&parse("y ~ (1|g)"));
        assert!(deg.terms.is_empty());
        assert!(deg.intercept);
    }

    #[test]
    fn intercept_suppression_both_spellings() {
        assert!(!parse("y ~ 0 + x").intercept);
        assert!(!parse("y ~ x - 1").intercept);
        assert!(parse("y ~ x").intercept);
    }

    #[test]
    fn dedup_keeps_first() {
        let f = normalize(&parse("y ~ x + x"));
        assert_eq!(f.terms, vec![Term::Variable("x".into())]);
        // x&z duplicates z&x as a set
        let g = normalize(&parse("y ~ x & z + z & x"));
        assert_eq!(g.terms.len(), 1);
    }

    #[test]
    fn sum_distributes_over_interaction() {
        // verified against a brute-force term-set expander: {a&c, b&c}
        let f = normalize(&parse("y ~ (a + b) & c"));
        assert_eq!(
            f.terms,
            vec![
                Term::Interaction(vec![Term::Variable("a".into()), Term::Variable("c".into())]),
                Term::Interaction(vec![Term::Variable("b".into()), Term::Variable("c".into())]),
            ]
        );
    }

    #[test]
    fn crossing_term_count() {
        for k in 1..=4usize {
            let vars: Vec<String> = (0..k).map(|i| format!("v{i}")).collect();
            let text = format!("y ~ {}", vars.join(" * "));
            let f = normalize(&parse(&text));
            assert_eq!(f.terms.len(), (1 << k) - 1);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(parse_formula("y ~ (x + z").is_err());
        assert!(parse_formula("y ~").is_err());
        assert!(parse_formula("y x").is_err());
        assert!(parse_formula("y ~ x % z").is_err());
        assert!(parse_formula("y ~ foo(x)").is_err());
        assert!(parse_formula("y ~ x ~ z").is_err());
    }

    #[test]
    fn function_argument_arithmetic() {
        let f = parse("y ~ log(x / 100) + identity(x^2)");
        assert_eq!(f.terms.len(), 2);
        match &f.terms[1] {
            Term::Call(Func::Identity, Expr::Binary(BinOp::Pow, _, _)) => {}
            other => panic!("unexpected term {other:?}"),
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        for text in [
            "y ~ x * group + log1p(z) + x & z + x & log1p(z)",
            "y ~ a * b * c",
            "y ~ (a + b) & c + a",
            "y ~ 0 + x * g",
        ] {
            let once = normalize(&parse(text));
            assert_eq!(normalize(&once), once, "{text}");
        }
    }

    #[test]
    fn display_round_trip_samples() {
        for text in [
            "y ~ x + z",
            "y ~ 0 + x",
            "y ~ x & z + log1p(z)",
            "y ~ x + (x | g)",
            "y ~ 1",
        ] {
            let ast = normalize(&parse(text));
            let reparsed = normalize(&parse(&ast.to_string()));
            assert_eq!(ast, reparsed, "{text}");
        }
    }
}
