//! Integer index expressions for loop-IR regions, peers and bounds.
//!
//! Grammar: `+ - * / % mod`, parentheses, integer literals and identifiers.
//! `/` and `%`/`mod` are floor division and Euclidean remainder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Const(i64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Mod(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("cannot parse `{text}`: {msg}")]
    Parse { text: String, msg: String },
    #[error("`{0}` is not affine in the loop indices")]
    NonAffine(String),
    #[error("unknown identifier `{0}`")]
    Unbound(String),
    #[error("division by zero in `{0}`")]
    DivZero(String),
    #[error("integer overflow in `{0}`")]
    Overflow(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    Ident(String),
    Op(char),
}

fn tokenize(text: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let cs: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < cs.len() && cs[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = cs[start..i].iter().collect();
            out.push(Tok::Int(
                s.parse().map_err(|_| format!("literal {s} too large"))?,
            ));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '_') {
                i += 1;
            }
            let s: String = cs[start..i].iter().collect();
            out.push(if s == "mod" {
                Tok::Op('%')
            } else {
                Tok::Ident(s)
            });
        } else if "+-*/%()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("unexpected character `{c}`"));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek_op(&self) -> Option<char> {
        match self.toks.get(self.pos) {
            Some(Tok::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut lhs = self.factor()?;
        while let Some(c @ ('*' | '/' | '%')) = self.peek_op() {
            self.pos += 1;
            let rhs = Box::new(self.factor()?);
            let l = Box::new(lhs);
            lhs = match c {
                '*' => Expr::Mul(l, rhs),
                '/' => Expr::Div(l, rhs),
                _ => Expr::Mod(l, rhs),
            };
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr, String> {
        let tok = self
            .toks
            .get(self.pos)
            .cloned()
            .ok_or("unexpected end of expression")?;
        self.pos += 1;
        match tok {
            Tok::Int(v) => Ok(Expr::Const(v)),
            Tok::Ident(s) => Ok(Expr::Var(s)),
            Tok::Op('-') => Ok(Expr::Neg(Box::new(self.factor()?))),
            Tok::Op('(') => {
                let e = self.expr()?;
                if self.peek_op() != Some(')') {
                    return Err("missing `)`".into());
                }
                self.pos += 1;
                Ok(e)
            }
            Tok::Op(c) => Err(format!("unexpected `{c}`")),
        }
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ExprError> {
        let err = |msg: String| ExprError::Parse {
            text: text.to_string(),
            msg,
        };
        let toks = tokenize(text).map_err(err)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.expr().map_err(err)?;
        if p.pos != p.toks.len() {
            return Err(err(format!("trailing input after token {}", p.pos)));
        }
        Ok(e)
    }

    /// Parse and require affinity in `indices` (other identifiers are
    /// symbolic constants). Floor division and remainder by a constant are
    /// accepted.
    pub fn parse_affine(text: &str, indices: &BTreeSet<String>) -> Result<Expr, ExprError> {
        let e = Expr::parse(text)?;
        if !e.is_affine(indices) {
            return Err(ExprError::NonAffine(text.to_string()));
        }
        Ok(e)
    }

    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Mod(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    fn mentions(&self, indices: &BTreeSet<String>) -> bool {
        self.vars().iter().any(|v| indices.contains(v))
    }

    pub fn is_affine(&self, indices: &BTreeSet<String>) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => true,
            Expr::Neg(a) => a.is_affine(indices),
            Expr::Add(a, b) | Expr::Sub(a, b) => a.is_affine(indices) && b.is_affine(indices),
            Expr::Mul(a, b) => {
                a.is_affine(indices)
                    && b.is_affine(indices)
                    && !(a.mentions(indices) && b.mentions(indices))
            }
            Expr::Div(a, b) | Expr::Mod(a, b) => a.is_affine(indices) && !b.mentions(indices),
        }
    }

    pub fn eval(&self, env: &BTreeMap<String, i64>) -> Result<i64, ExprError> {
        let over = || ExprError::Overflow(self.to_string());
        Ok(match self {
            Expr::Const(v) => *v,
            Expr::Var(v) => *env.get(v).ok_or_else(|| ExprError::Unbound(v.clone()))?,
            Expr::Neg(a) => a.eval(env)?.checked_neg().ok_or_else(over)?,
            Expr::Add(a, b) => a.eval(env)?.checked_add(b.eval(env)?).ok_or_else(over)?,
            Expr::Sub(a, b) => a.eval(env)?.checked_sub(b.eval(env)?).ok_or_else(over)?,
            Expr::Mul(a, b) => a.eval(env)?.checked_mul(b.eval(env)?).ok_or_else(over)?,
            Expr::Div(a, b) | Expr::Mod(a, b) => {
                let (x, y) = (a.eval(env)?, b.eval(env)?);
                if y == 0 {
                    return Err(ExprError::DivZero(self.to_string()));
                }
                if matches!(self, Expr::Div(..)) {
                    x.checked_div_euclid(y).ok_or_else(over)?
                } else {
                    x.checked_rem_euclid(y).ok_or_else(over)?
                }
            }
        })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Mod(a, b) => write!(f, "({a} mod {b})"),
        }
    }
}
