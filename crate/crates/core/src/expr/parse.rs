//! Pratt parser for expression strings.
//!
//! Grammar: numbers (with exponents), declared symbols, `pi`, `+ - * / ^`,
//! parentheses and the functions `cos`/`sin`. Division is allowed only by
//! constants and `^` takes a non-negative integer exponent.

use super::{trig_of_linear, ExprError, MtpExpression, SymbolId, SymbolTable};

const MAX_POWER: u32 = 64;

/// Parsed but not yet normalized expression.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprTree {
    Num(f64),
    Sym(SymbolId),
    Neg(Box<ExprTree>),
    Add(Box<ExprTree>, Box<ExprTree>),
    Sub(Box<ExprTree>, Box<ExprTree>),
    Mul(Box<ExprTree>, Box<ExprTree>),
    Div(Box<ExprTree>, Box<ExprTree>),
    Pow(Box<ExprTree>, u32),
    Cos(Box<ExprTree>),
    Sin(Box<ExprTree>),
}

impl ExprTree {
    /// Direct numeric evaluation; `values` is indexed by symbol id.
    pub fn evaluate(&self, values: &[f64]) -> f64 {
        match self {
            ExprTree::Num(x) => *x,
            ExprTree::Sym(s) => values[*s as usize],
            ExprTree::Neg(a) => -a.evaluate(values),
            ExprTree::Add(a, b) => a.evaluate(values) + b.evaluate(values),
            ExprTree::Sub(a, b) => a.evaluate(values) - b.evaluate(values),
            ExprTree::Mul(a, b) => a.evaluate(values) * b.evaluate(values),
            ExprTree::Div(a, b) => a.evaluate(values) / b.evaluate(values),
            ExprTree::Pow(a, n) => a.evaluate(values).powi(*n as i32),
            ExprTree::Cos(a) => a.evaluate(values).cos(),
            ExprTree::Sin(a) => a.evaluate(values).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Lexer<'_> {
    fn err(col: usize, msg: impl Into<String>) -> ExprError {
        ExprError::Parse {
            col: col + 1,
            msg: msg.into(),
        }
    }

    /// Next token and its 0-based start column.
    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = self.src.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut end = self.pos;
            while end < self.src.len() && (self.src[end].is_ascii_digit() || self.src[end] == b'.') {
                end += 1;
            }
            if end < self.src.len() && matches!(self.src[end], b'e' | b'E') {
                let mut k = end + 1;
                if k < self.src.len() && matches!(self.src[k], b'+' | b'-') {
                    k += 1;
                }
                if k < self.src.len() && self.src[k].is_ascii_digit() {
                    while k < self.src.len() && self.src[k].is_ascii_digit() {
                        k += 1;
                    }
                    end = k;
                }
            }
            let text = std::str::from_utf8(&self.src[start..end]).unwrap();
            let x: f64 = text
                .parse()
                .map_err(|_| Self::err(start, format!("malformed number `{text}`")))?;
            self.pos = end;
            return Ok((Tok::Num(x), start));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = self.pos;
            while end < self.src.len() && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            let text = std::str::from_utf8(&self.src[start..end]).unwrap();
            return Ok((Tok::Ident(text.to_string()), start));
        }
        if b"+-*/^()".contains(&c) {
            self.pos += 1;
            return Ok((Tok::Op(c as char), start));
        }
        Err(Self::err(start, format!("unexpected character `{}`", c as char)))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    col: usize,
    table: &'a SymbolTable,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, table: &'a SymbolTable) -> Result<Self, ExprError> {
        let mut lexer = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let (tok, col) = lexer.next()?;
        Ok(Self {
            lexer,
            tok,
            col,
            table,
        })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        let (tok, col) = self.lexer.next()?;
        self.tok = tok;
        self.col = col;
        Ok(())
    }

    fn err(&self, msg: impl Into<String>) -> ExprError {
        Lexer::err(self.col, msg)
    }

    fn expect(&mut self, op: char) -> Result<(), ExprError> {
        if self.tok == Tok::Op(op) {
            self.bump()
        } else {
            Err(self.err(format!("expected `{op}`")))
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<ExprTree, ExprError> {
        let mut lhs = self.prefix()?;
        loop {
            let op = match self.tok {
                Tok::Op(c @ ('+' | '-' | '*' | '/' | '^')) => c,
                Tok::Op(')') | Tok::End => break,
                _ => return Err(self.err("expected an operator")),
            };
            let (lbp, rbp) = match op {
                '+' | '-' => (1, 2),
                '*' | '/' => (3, 4),
                _ => (7, 6),
            };
            if lbp < min_bp {
                break;
            }
            let op_col = self.col;
            self.bump()?;
            if op == '^' {
                let exp_col = self.col;
                let e = self.expr(rbp)?;
                let n = exponent(&e).ok_or_else(|| {
                    Lexer::err(exp_col, "exponent must be a non-negative integer constant")
                })?;
                lhs = ExprTree::Pow(Box::new(lhs), n);
                continue;
            }
            let rhs = self.expr(rbp)?;
            lhs = match op {
                '+' => ExprTree::Add(Box::new(lhs), Box::new(rhs)),
                '-' => ExprTree::Sub(Box::new(lhs), Box::new(rhs)),
                '*' => ExprTree::Mul(Box::new(lhs), Box::new(rhs)),
                _ => {
                    if to_constant(&rhs).is_none() {
                        return Err(Lexer::err(op_col, "division is only allowed by constants"));
                    }
                    ExprTree::Div(Box::new(lhs), Box::new(rhs))
                }
            };
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<ExprTree, ExprError> {
        match self.tok.clone() {
            Tok::Num(x) => {
                self.bump()?;
                Ok(ExprTree::Num(x))
            }
            Tok::Op('-') => {
                self.bump()?;
                // binds tighter than + and *, looser than ^
                Ok(ExprTree::Neg(Box::new(self.expr(5)?)))
            }
            Tok::Op('+') => {
                self.bump()?;
                self.expr(5)
            }
            Tok::Op('(') => {
                self.bump()?;
                let e = self.expr(0)?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let col = self.col;
                self.bump()?;
                if self.tok == Tok::Op('(') {
                    let f = match name.as_str() {
                        "cos" => ExprTree::Cos,
                        "sin" => ExprTree::Sin,
                        _ => return Err(Lexer::err(col, format!("unknown function `{name}`"))),
                    };
                    self.bump()?;
                    let arg = self.expr(0)?;
                    self.expect(')')?;
                    return Ok(f(Box::new(arg)));
                }
                match self.table.id(&name) {
                    Some(id) => Ok(ExprTree::Sym(id)),
                    None if name == "pi" => Ok(ExprTree::Num(std::f64::consts::PI)),
                    None => Err(ExprError::UnknownSymbol { name, col: col + 1 }),
                }
            }
            Tok::End => Err(self.err("unexpected end of expression")),
            Tok::Op(c) => Err(self.err(format!("unexpected `{c}`"))),
        }
    }
}

fn to_constant(t: &ExprTree) -> Option<f64> {
    angle_sum_expand(t).ok()?.as_constant()
}

fn exponent(t: &ExprTree) -> Option<u32> {
    let x = to_constant(t)?;
    (x >= 0.0 && x.fract() == 0.0 && x <= f64::from(MAX_POWER)).then_some(x as u32)
}

/// Parses into a tree without normalizing.
pub fn parse_tree(src: &str, table: &SymbolTable) -> Result<ExprTree, ExprError> {
    let mut p = Parser::new(src, table)?;
    let e = p.expr(0)?;
    if p.tok != Tok::End {
        return Err(p.err("unbalanced `)`"));
    }
    Ok(e)
}

/// Normalizes a tree into canonical MTP form, expanding trigonometric
/// functions of sums into products of single-symbol factors.
pub fn angle_sum_expand(tree: &ExprTree) -> Result<MtpExpression, ExprError> {
    Ok(match tree {
        ExprTree::Num(x) => MtpExpression::constant(*x),
        ExprTree::Sym(s) => MtpExpression::symbol(*s),
        ExprTree::Neg(a) => angle_sum_expand(a)?.neg(),
        ExprTree::Add(a, b) => angle_sum_expand(a)?.add(&angle_sum_expand(b)?),
        ExprTree::Sub(a, b) => angle_sum_expand(a)?.sub(&angle_sum_expand(b)?),
        ExprTree::Mul(a, b) => angle_sum_expand(a)?.mul(&angle_sum_expand(b)?),
        ExprTree::Div(a, b) => {
            let d = angle_sum_expand(b)?
                .as_constant()
                .ok_or_else(|| ExprError::NonMtp("division by a non-constant".into()))?;
            if d == 0.0 {
                return Err(ExprError::NonMtp("division by zero".into()));
            }
            angle_sum_expand(a)?.scale(1.0 / d)
        }
        ExprTree::Pow(a, n) => angle_sum_expand(a)?.pow(*n),
        ExprTree::Cos(a) => trig_of_linear(&angle_sum_expand(a)?)?.0,
        ExprTree::Sin(a) => trig_of_linear(&angle_sum_expand(a)?)?.1,
    })
}

/// Parses and normalizes an expression string.
pub fn parse(src: &str, table: &SymbolTable) -> Result<MtpExpression, ExprError> {
    angle_sum_expand(&parse_tree(src, table)?)
}
