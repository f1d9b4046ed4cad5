//! A small arithmetic language for coefficient functions of the state `x`.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?          (right associative)
//! atom   := number | 'x' | param | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `exp`, `log`, `sqrt`, `abs` (one argument) and `min`, `max`,
//! `pow` (two arguments). Parameters are bound to numbers at parse time but
//! keep their names, so printing an [`Expr`] and parsing it again with the
//! same parameter map gives back the same tree.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier `{name}` at byte {pos}")]
    UnknownIdentifier { name: String, pos: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{func} is undefined at argument {arg}")]
    Domain { func: &'static str, arg: f64 },
    #[error("expression evaluated to a non-finite value ({value}) at x = {x}")]
    NonFinite { x: f64, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Exp | Func::Log | Func::Sqrt | Func::Abs => 1,
            Func::Min | Func::Max | Func::Pow => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var,
    Param { name: String, value: f64 },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Parses `source`, resolving identifiers other than `x` against `params`.
pub fn parse_expr(source: &str, params: &BTreeMap<String, f64>) -> Result<Expr, ParseError> {
    let tokens = tokenize(source)?;
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut parser = Parser {
        tokens,
        pos: 0,
        params,
        end: source.len(),
    };
    let expr = parser.expr()?;
    if let Some(tok) = parser.peek() {
        return Err(ParseError::Syntax {
            pos: tok.pos,
            message: format!("unexpected {}", tok.kind),
        });
    }
    Ok(expr)
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Num(v) => write!(f, "number {v}"),
            TokenKind::Ident(s) => write!(f, "identifier `{s}`"),
            TokenKind::Op(c) => write!(f, "`{c}`"),
            TokenKind::LParen => write!(f, "`(`"),
            TokenKind::RParen => write!(f, "`)`"),
            TokenKind::Comma => write!(f, "`,`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                message: format!("malformed number `{text}`"),
            })?;
            out.push(Token {
                kind: TokenKind::Num(value),
                pos: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: TokenKind::Ident(src[start..i].to_string()),
                pos: start,
            });
            continue;
        }
        let kind = match c {
            '+' | '-' | '*' | '/' | '^' => TokenKind::Op(c),
            '(' => TokenKind::LParen,
            ')' => TokenKind::RParen,
            ',' => TokenKind::Comma,
            _ => {
                return Err(ParseError::Syntax {
                    pos: start,
                    message: format!("unexpected character `{c}`"),
                })
            }
        };
        out.push(Token { kind, pos: start });
        i += c.len_utf8();
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    params: &'a BTreeMap<String, f64>,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        tok
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Op(c),
                ..
            }) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expect(&mut self, kind: TokenKind) -> Result<(), ParseError> {
        match self.next() {
            Some(tok) if tok.kind == kind => Ok(()),
            Some(tok) => Err(ParseError::Syntax {
                pos: tok.pos,
                message: format!("expected {kind}, found {}", tok.kind),
            }),
            None => Err(ParseError::Syntax {
                pos: self.end,
                message: format!("expected {kind}, found end of input"),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let tok = self.next().ok_or(ParseError::Syntax {
            pos: self.end,
            message: "unexpected end of input".into(),
        })?;
        match tok.kind {
            TokenKind::Num(v) => Ok(Expr::Num(v)),
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                if let Some(Token {
                    kind: TokenKind::LParen,
                    ..
                }) = self.peek()
                {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownIdentifier {
                        name: name.clone(),
                        pos: tok.pos,
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while let Some(Token {
                        kind: TokenKind::Comma,
                        ..
                    }) = self.peek()
                    {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(TokenKind::RParen)?;
                    if args.len() != func.arity() {
                        return Err(ParseError::Syntax {
                            pos: tok.pos,
                            message: format!(
                                "{} takes {} argument(s), got {}",
                                func.name(),
                                func.arity(),
                                args.len()
                            ),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "x" {
                    return Ok(Expr::Var);
                }
                match self.params.get(&name) {
                    Some(&value) => Ok(Expr::Param { name, value }),
                    None => Err(ParseError::UnknownIdentifier { name, pos: tok.pos }),
                }
            }
            other => Err(ParseError::Syntax {
                pos: tok.pos,
                message: format!("unexpected {other}"),
            }),
        }
    }
}

fn apply_func(func: Func, a: f64, b: f64) -> Result<f64, EvalError> {
    Ok(match func {
        Func::Exp => a.exp(),
        Func::Log => {
            if a <= 0.0 {
                return Err(EvalError::Domain { func: "log", arg: a });
            }
            a.ln()
        }
        Func::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::Domain { func: "sqrt", arg: a });
            }
            a.sqrt()
        }
        Func::Abs => a.abs(),
        Func::Min => a.min(b),
        Func::Max => a.max(b),
        Func::Pow => return apply_bin(BinOp::Pow, a, b),
    })
}

fn apply_bin(op: BinOp, a: f64, b: f64) -> Result<f64, EvalError> {
    Ok(match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err(EvalError::Domain { func: "division", arg: b });
            }
            a / b
        }
        BinOp::Pow => {
            let v = a.powf(b);
            if v.is_nan() {
                return Err(EvalError::Domain { func: "pow", arg: a });
            }
            v
        }
    })
}

impl Expr {
    /// Tree-walking evaluation at state `x`.
    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        let v = self.eval_raw(x)?;
        if !v.is_finite() {
            return Err(EvalError::NonFinite { x, value: v });
        }
        Ok(v)
    }

    fn eval_raw(&self, x: f64) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var => Ok(x),
            Expr::Param { value, .. } => Ok(*value),
            Expr::Neg(e) => Ok(-e.eval_raw(x)?),
            Expr::Bin(op, l, r) => apply_bin(*op, l.eval_raw(x)?, r.eval_raw(x)?),
            Expr::Call(func, args) => {
                let a = args[0].eval_raw(x)?;
                let b = match args.get(1) {
                    Some(e) => e.eval_raw(x)?,
                    None => 0.0,
                };
                apply_func(*func, a, b)
            }
        }
    }

    pub fn depends_on_x(&self) -> bool {
        match self {
            Expr::Var => true,
            Expr::Num(_) | Expr::Param { .. } => false,
            Expr::Neg(e) => e.depends_on_x(),
            Expr::Bin(_, l, r) => l.depends_on_x() || r.depends_on_x(),
            Expr::Call(_, args) => args.iter().any(Expr::depends_on_x),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(op, _, _) => op.precedence(),
            Expr::Neg(_) => 3,
            _ => 5,
        }
    }

    /// Lowers the tree to a postfix program, folding subtrees that do not
    /// depend on `x`.
    pub fn compile(&self) -> Program {
        let mut ops = Vec::new();
        self.emit(&mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::X => depth += 1,
                Op::Neg | Op::Unary(_) => {}
                Op::Bin(_) | Op::Binary(_) => depth -= 1,
            }
            max_depth = max_depth.max(depth);
        }
        Program { ops, max_depth }
    }

    fn emit(&self, ops: &mut Vec<Op>) {
        if !self.depends_on_x() {
            if let Ok(v) = self.eval_raw(0.0) {
                if v.is_finite() {
                    ops.push(Op::Const(v));
                    return;
                }
            }
        }
        match self {
            Expr::Num(v) => ops.push(Op::Const(*v)),
            Expr::Var => ops.push(Op::X),
            Expr::Param { value, .. } => ops.push(Op::Const(*value)),
            Expr::Neg(e) => {
                e.emit(ops);
                ops.push(Op::Neg);
            }
            Expr::Bin(op, l, r) => {
                l.emit(ops);
                r.emit(ops);
                ops.push(Op::Bin(*op));
            }
            Expr::Call(func, args) => {
                for a in args {
                    a.emit(ops);
                }
                if func.arity() == 1 {
                    ops.push(Op::Unary(*func));
                } else {
                    ops.push(Op::Binary(*func));
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var => write!(f, "x"),
            Expr::Param { name, .. } => write!(f, "{name}"),
            Expr::Neg(e) => {
                if e.precedence() < 4 {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            Expr::Bin(op, l, r) => {
                let p = op.precedence();
                let left_paren = if *op == BinOp::Pow {
                    l.precedence() <= p
                } else {
                    l.precedence() < p
                };
                let right_paren = if *op == BinOp::Pow {
                    r.precedence() < 3
                } else {
                    r.precedence() <= p
                };
                if left_paren {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if right_paren {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    X,
    Neg,
    Bin(BinOp),
    Unary(Func),
    Binary(Func),
}

/// Postfix form of an [`Expr`] for hot evaluation loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    max_depth: usize,
}

const STACK: usize = 32;

impl Program {
    /// The folded value when the program does not depend on `x`.
    pub fn constant(&self) -> Option<f64> {
        match self.ops.as_slice() {
            [Op::Const(v)] => Some(*v),
            _ => None,
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64, EvalError> {
        if let [Op::Const(v)] = self.ops.as_slice() {
            return Ok(*v);
        }
        if self.max_depth > STACK {
            let mut stack = Vec::with_capacity(self.max_depth);
            return self.run(x, &mut stack);
        }
        let mut buf = [0.0f64; STACK];
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(v) => {
                    buf[top] = v;
                    top += 1;
                }
                Op::X => {
                    buf[top] = x;
                    top += 1;
                }
                Op::Neg => buf[top - 1] = -buf[top - 1],
                Op::Unary(func) => buf[top - 1] = apply_func(func, buf[top - 1], 0.0)?,
                Op::Bin(bin) => {
                    top -= 1;
                    buf[top - 1] = apply_bin(bin, buf[top - 1], buf[top])?;
                }
                Op::Binary(func) => {
                    top -= 1;
                    buf[top - 1] = apply_func(func, buf[top - 1], buf[top])?;
                }
            }
        }
        let v = buf[0];
        if !v.is_finite() {
            return Err(EvalError::NonFinite { x, value: v });
        }
        Ok(v)
    }

    fn run(&self, x: f64, stack: &mut Vec<f64>) -> Result<f64, EvalError> {
        for op in &self.ops {
            match *op {
                Op::Const(v) => stack.push(v),
                Op::X => stack.push(x),
                Op::Neg => {
                    let a = stack.pop().unwrap_or(f64::NAN);
                    stack.push(-a);
                }
                Op::Unary(func) => {
                    let a = stack.pop().unwrap_or(f64::NAN);
                    stack.push(apply_func(func, a, 0.0)?);
                }
                Op::Bin(bin) => {
                    let b = stack.pop().unwrap_or(f64::NAN);
                    let a = stack.pop().unwrap_or(f64::NAN);
                    stack.push(apply_bin(bin, a, b)?);
                }
                Op::Binary(func) => {
                    let b = stack.pop().unwrap_or(f64::NAN);
                    let a = stack.pop().unwrap_or(f64::NAN);
                    stack.push(apply_func(func, a, b)?);
                }
            }
        }
        let v = stack.pop().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(EvalError::NonFinite { x, value: v });
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn polynomial() {
        let e = parse_expr("x^2 + 1", &BTreeMap::new()).unwrap();
        assert_eq!(e.eval(2.0).unwrap(), 5.0);
        assert_eq!(e.compile().eval(2.0).unwrap(), 5.0);
    }

    #[test]
    fn parameter_substitution() {
        let p = params(&[("a", 2.0), ("theta", 1.0)]);
        let e = parse_expr("a*(theta - x)", &p).unwrap();
        assert_eq!(e.eval(0.5).unwrap(), 1.0);
    }

    #[test]
    fn sqrt_of_negative_is_a_domain_error() {
        let e = parse_expr("sqrt(x)", &BTreeMap::new()).unwrap();
        assert!(matches!(e.eval(-1.0), Err(EvalError::Domain { func: "sqrt", .. })));
        assert!(matches!(
            e.compile().eval(-1.0),
            Err(EvalError::Domain { func: "sqrt", .. })
        ));
        let l = parse_expr("log(x)", &BTreeMap::new()).unwrap();
        assert!(l.eval(0.0).is_err());
    }

    #[test]
    fn unknown_identifier_is_rejected() {
        let err = parse_expr("a*x + y", &params(&[("a", 1.0)])).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                name: "y".into(),
                pos: 6
            }
        );
        assert!(matches!(
            parse_expr("foo(x)", &BTreeMap::new()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_expr("1 + * 2", &BTreeMap::new()) {
            Err(ParseError::Syntax { pos, .. }) => assert_eq!(pos, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_expr("(x", &BTreeMap::new()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_expr("min(x)", &BTreeMap::new()), Err(ParseError::Syntax { .. })));
        assert_eq!(parse_expr("   ", &BTreeMap::new()), Err(ParseError::Empty));
    }

    #[test]
    fn precedence_and_associativity() {
        let p = BTreeMap::new();
        let cases = [
            ("-x^2", -9.0),
            ("2^3^2", 512.0),
            ("2^-1", 0.5),
            ("10 - 4 - 3", 3.0),
            ("12 / 3 / 2", 2.0),
            ("-x*2", -6.0),
            ("min(x, 1) + max(x, 1) + pow(x, 2) + abs(-x)", 1.0 + 3.0 + 9.0 + 3.0),
            ("1e-1 * 10", 1.0),
        ];
        for (src, expected) in cases {
            let e = parse_expr(src, &p).unwrap();
            assert!((e.eval(3.0).unwrap() - expected).abs() < 1e-12, "{src}");
            assert!((e.compile().eval(3.0).unwrap() - expected).abs() < 1e-12, "{src}");
        }
    }

    #[test]
    fn folding_of_constant_subtrees() {
        let p = params(&[("sigma", 0.2)]);
        let e = parse_expr("sigma^2 / 2", &p).unwrap();
        let folded = e.compile().constant().unwrap();
        assert!((folded - 0.02).abs() < 1e-15);
        let e = parse_expr("sigma^2 * x", &p).unwrap();
        assert_eq!(e.compile().constant(), None);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.1f64..10.0).prop_map(Expr::Num),
            Just(Expr::Var),
            Just(Expr::Param {
                name: "a".into(),
                value: 1.5
            }),
        ];
        leaf.prop_recursive(5, 40, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Bin(op, Box::new(l), Box::new(r))),
                (inner.clone(), 0.5f64..2.0).prop_map(|(l, k)| Expr::Bin(
                    BinOp::Pow,
                    Box::new(Expr::Call(Func::Abs, vec![l])),
                    Box::new(Expr::Num(k))
                )),
                inner.clone().prop_map(|e| Expr::Call(Func::Exp, vec![Expr::Call(
                    Func::Min,
                    vec![e, Expr::Num(3.0)]
                )])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Max, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr(), xs in proptest::collection::vec(-5.0f64..5.0, 100)) {
            let p = params(&[("a", 1.5)]);
            let printed = e.to_string();
            let reparsed = parse_expr(&printed, &p).unwrap();
            prop_assert_eq!(&reparsed, &e, "printed as {}", printed);
            let prog = reparsed.compile();
            for x in xs {
                match (e.eval(x), prog.eval(x)) {
                    (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs())),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "mismatch {:?} vs {:?}", a, b),
                }
            }
        }
    }
}
