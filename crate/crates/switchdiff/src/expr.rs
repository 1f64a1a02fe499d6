//! Scalar field expressions over the state variables `z1..zd` and time `t`.
//!
//! Drift components, diffusion entries, switching rates, level sets and
//! boundary data are all supplied as strings in a small arithmetic language:
//! `+ - * / ^`, parentheses, and the functions `exp log sin cos tanh sqrt
//! abs min max`. Parsing produces an [`ExprField`] which can be evaluated
//! at a point, printed back to an equivalent string, and inspected for time
//! dependence.
//!
//! Evaluation never produces NaN silently: division by zero, `log` or
//! `sqrt` outside their domains, and non-finite intermediate results are
//! reported as [`ExprError`] values carrying the offending operation.

use crate::error::ExprError;
use std::fmt;

/// Operator precedence levels used by the parser and the printer.
const LVL_ADD: u8 = 1;
const LVL_MUL: u8 = 2;
const LVL_NEG: u8 = 3;
const LVL_POW: u8 = 4;
const LVL_ATOM: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Num(f64),
    /// Zero-based index into the state vector; `z1` is `Var(0)`.
    Var(usize),
    Time,
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Call(Func, Vec<Ast>),
}

/// Flat postfix instruction stream; evaluation runs a small stack machine
/// so repeated calls in simulation loops avoid tree walking.
#[derive(Debug, Clone)]
enum Instr {
    Push(f64),
    LoadVar(usize),
    LoadTime,
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Call(Func),
}

/// A parsed scalar field over `z in R^dim` and time.
#[derive(Debug, Clone)]
pub struct ExprField {
    ast: Ast,
    program: Vec<Instr>,
    depth: usize,
    dim: usize,
    uses_time: bool,
}

impl ExprField {
    /// Parse `source` as a field over `dim` state variables (`z1..z<dim>`).
    pub fn parse(source: &str, dim: usize) -> Result<ExprField, ExprError> {
        let tokens = lex(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            dim,
        };
        let ast = parser.expr()?;
        match parser.peek() {
            Token::End => {}
            tok => {
                return Err(ExprError::Syntax {
                    offset: parser.offset(),
                    message: format!("unexpected `{}`", tok.describe()),
                })
            }
        }
        Ok(ExprField::from_ast(ast, dim))
    }

    /// Build a field directly from an AST (used by generators and tests).
    pub fn from_ast(ast: Ast, dim: usize) -> ExprField {
        let mut program = Vec::new();
        let mut uses_time = false;
        compile(&ast, &mut program, &mut uses_time);
        let depth = stack_depth(&program);
        ExprField {
            ast,
            program,
            depth,
            dim,
            uses_time,
        }
    }

    /// Convenience constructor for a constant field.
    pub fn constant(value: f64, dim: usize) -> ExprField {
        ExprField::from_ast(Ast::Num(value), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether the expression references `t`.
    pub fn uses_time(&self) -> bool {
        self.uses_time
    }

    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    /// Evaluate at state `z` (length `dim`) and time `t`.
    pub fn eval(&self, z: &[f64], t: f64) -> Result<f64, ExprError> {
        debug_assert_eq!(z.len(), self.dim, "state dimension mismatch");
        if self.depth <= STACK_INLINE {
            let mut buf = [0.0_f64; STACK_INLINE];
            self.run(z, t, &mut buf)
        } else {
            let mut buf = vec![0.0_f64; self.depth];
            self.run(z, t, &mut buf)
        }
    }

    fn run(&self, z: &[f64], t: f64, stack: &mut [f64]) -> Result<f64, ExprError> {
        let mut top = 0_usize;
        macro_rules! pop {
            () => {{
                top -= 1;
                stack[top]
            }};
        }
        macro_rules! push {
            ($v:expr) => {{
                stack[top] = $v;
                top += 1;
            }};
        }
        for instr in &self.program {
            match instr {
                Instr::Push(c) => push!(*c),
                Instr::LoadVar(i) => push!(z[*i]),
                Instr::LoadTime => push!(t),
                Instr::Neg => {
                    let a = pop!();
                    push!(-a);
                }
                Instr::Add => {
                    let b = pop!();
                    let a = pop!();
                    push!(checked("+", a + b)?);
                }
                Instr::Sub => {
                    let b = pop!();
                    let a = pop!();
                    push!(checked("-", a - b)?);
                }
                Instr::Mul => {
                    let b = pop!();
                    let a = pop!();
                    push!(checked("*", a * b)?);
                }
                Instr::Div => {
                    let b = pop!();
                    let a = pop!();
                    if b == 0.0 {
                        return Err(ExprError::EvalDomain {
                            op: "/",
                            message: "division by zero".into(),
                        });
                    }
                    push!(checked("/", a / b)?);
                }
                Instr::Pow => {
                    let b = pop!();
                    let a = pop!();
                    push!(eval_pow(a, b)?);
                }
                Instr::Call(f) => match f {
                    Func::Exp => {
                        let a = pop!();
                        push!(checked("exp", a.exp())?);
                    }
                    Func::Log => {
                        let a = pop!();
                        if a <= 0.0 {
                            return Err(ExprError::EvalDomain {
                                op: "log",
                                message: format!("argument {a} is not positive"),
                            });
                        }
                        push!(a.ln());
                    }
                    Func::Sin => {
                        let a = pop!();
                        push!(a.sin());
                    }
                    Func::Cos => {
                        let a = pop!();
                        push!(a.cos());
                    }
                    Func::Tanh => {
                        let a = pop!();
                        push!(a.tanh());
                    }
                    Func::Sqrt => {
                        let a = pop!();
                        if a < 0.0 {
                            return Err(ExprError::EvalDomain {
                                op: "sqrt",
                                message: format!("argument {a} is negative"),
                            });
                        }
                        push!(a.sqrt());
                    }
                    Func::Abs => {
                        let a = pop!();
                        push!(a.abs());
                    }
                    Func::Min => {
                        let b = pop!();
                        let a = pop!();
                        push!(a.min(b));
                    }
                    Func::Max => {
                        let b = pop!();
                        let a = pop!();
                        push!(a.max(b));
                    }
                },
            }
        }
        debug_assert_eq!(top, 1);
        Ok(stack[0])
    }
}

const STACK_INLINE: usize = 32;

fn checked(op: &'static str, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ExprError::NonFinite { op })
    }
}

fn eval_pow(base: f64, exponent: f64) -> Result<f64, ExprError> {
    if base < 0.0 && exponent.fract() != 0.0 {
        return Err(ExprError::EvalDomain {
            op: "^",
            message: format!("negative base {base} with non-integer exponent {exponent}"),
        });
    }
    if base == 0.0 && exponent < 0.0 {
        return Err(ExprError::EvalDomain {
            op: "^",
            message: "zero base with negative exponent".into(),
        });
    }
    checked("^", base.powf(exponent))
}

fn compile(ast: &Ast, out: &mut Vec<Instr>, uses_time: &mut bool) {
    match ast {
        Ast::Num(c) => out.push(Instr::Push(*c)),
        Ast::Var(i) => out.push(Instr::LoadVar(*i)),
        Ast::Time => {
            *uses_time = true;
            out.push(Instr::LoadTime);
        }
        Ast::Neg(a) => {
            compile(a, out, uses_time);
            out.push(Instr::Neg);
        }
        Ast::Bin(op, a, b) => {
            compile(a, out, uses_time);
            compile(b, out, uses_time);
            out.push(match op {
                BinOp::Add => Instr::Add,
                BinOp::Sub => Instr::Sub,
                BinOp::Mul => Instr::Mul,
                BinOp::Div => Instr::Div,
                BinOp::Pow => Instr::Pow,
            });
        }
        Ast::Call(f, args) => {
            for a in args {
                compile(a, out, uses_time);
            }
            out.push(Instr::Call(*f));
        }
    }
}

fn stack_depth(program: &[Instr]) -> usize {
    let mut cur = 0_usize;
    let mut max = 0_usize;
    for instr in program {
        match instr {
            Instr::Push(_) | Instr::LoadVar(_) | Instr::LoadTime => cur += 1,
            Instr::Neg => {}
            Instr::Add | Instr::Sub | Instr::Mul | Instr::Div | Instr::Pow => cur -= 1,
            Instr::Call(f) => cur -= f.arity() - 1,
        }
        max = max.max(cur);
    }
    max
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(v) => format!("{v:?}"),
            Token::Ident(s) => s.clone(),
            Token::Plus => "+".into(),
            Token::Minus => "-".into(),
            Token::Star => "*".into(),
            Token::Slash => "/".into(),
            Token::Caret => "^".into(),
            Token::LParen => "(".into(),
            Token::RParen => ")".into(),
            Token::Comma => ",".into(),
            Token::End => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Token, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0_usize;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' => {
                out.push((Token::Plus, i));
                i += 1;
            }
            b'-' => {
                out.push((Token::Minus, i));
                i += 1;
            }
            b'*' => {
                out.push((Token::Star, i));
                i += 1;
            }
            b'/' => {
                out.push((Token::Slash, i));
                i += 1;
            }
            b'^' => {
                out.push((Token::Caret, i));
                i += 1;
            }
            b'(' => {
                out.push((Token::LParen, i));
                i += 1;
            }
            b')' => {
                out.push((Token::RParen, i));
                i += 1;
            }
            b',' => {
                out.push((Token::Comma, i));
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                        return Err(ExprError::Syntax {
                            offset: i.min(bytes.len()),
                            message: "expected digits after decimal point".into(),
                        });
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("invalid number `{text}`"),
                })?;
                out.push((Token::Num(value), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Token::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(ExprError::Syntax {
                    offset: i,
                    message: format!("unexpected character `{}`", &src[i..i + 1]),
                })
            }
        }
    }
    out.push((Token::End, src.len()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser (recursive descent, standard precedence, `^` right-associative)
// ---------------------------------------------------------------------------

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].0.clone();
        self.pos += 1;
        tok
    }

    fn expr(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Token::Plus => BinOp::Add,
                Token::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Ast::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Token::Star => BinOp::Mul,
                Token::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Ast::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Ast, ExprError> {
        if matches!(self.peek(), Token::Minus) {
            self.bump();
            let inner = self.unary()?;
            return Ok(Ast::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast, ExprError> {
        let base = self.atom()?;
        if matches!(self.peek(), Token::Caret) {
            self.bump();
            // Right-associative; the exponent may carry a unary minus.
            let exponent = self.unary()?;
            return Ok(Ast::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Ast, ExprError> {
        let offset = self.offset();
        match self.bump() {
            Token::Num(v) => Ok(Ast::Num(v)),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Token::Ident(name) => self.ident(name, offset),
            tok => Err(ExprError::Syntax {
                offset,
                message: format!("expected a value, found `{}`", tok.describe()),
            }),
        }
    }

    fn ident(&mut self, name: String, offset: usize) -> Result<Ast, ExprError> {
        if let Some(func) = Func::from_name(&name) {
            if !matches!(self.peek(), Token::LParen) {
                return Err(ExprError::Syntax {
                    offset: self.offset(),
                    message: format!("expected `(` after function `{name}`"),
                });
            }
            self.bump();
            let mut args = vec![self.expr()?];
            while matches!(self.peek(), Token::Comma) {
                self.bump();
                args.push(self.expr()?);
            }
            self.expect_rparen()?;
            if args.len() != func.arity() {
                return Err(ExprError::Arity {
                    name,
                    expected: func.arity(),
                    got: args.len(),
                    offset,
                });
            }
            return Ok(Ast::Call(func, args));
        }
        if name == "t" {
            return Ok(Ast::Time);
        }
        if let Some(rest) = name.strip_prefix('z') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let idx: usize = rest.parse().map_err(|_| ExprError::UnknownIdentifier {
                    name: name.clone(),
                    offset,
                })?;
                if idx >= 1 && idx <= self.dim {
                    return Ok(Ast::Var(idx - 1));
                }
            }
        }
        Err(ExprError::UnknownIdentifier { name, offset })
    }

    fn expect_rparen(&mut self) -> Result<(), ExprError> {
        if matches!(self.peek(), Token::RParen) {
            self.bump();
            Ok(())
        } else {
            Err(ExprError::Syntax {
                offset: self.offset(),
                message: format!("expected `)`, found `{}`", self.peek().describe()),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Printing; the output reparses to an expression with identical evaluation.
// ---------------------------------------------------------------------------

impl fmt::Display for ExprField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_ast(&self.ast, LVL_ADD, f)
    }
}

fn write_ast(ast: &Ast, required: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let level = ast_level(ast);
    let parens = level < required;
    if parens {
        write!(f, "(")?;
    }
    match ast {
        // `{:?}` is the shortest representation that parses back to the
        // same f64; negative literals reparse as negation of a positive
        // literal with identical value.
        Ast::Num(v) => write!(f, "{v:?}")?,
        Ast::Var(i) => write!(f, "z{}", i + 1)?,
        Ast::Time => write!(f, "t")?,
        Ast::Neg(inner) => {
            write!(f, "-")?;
            write_ast(inner, LVL_POW, f)?;
        }
        Ast::Bin(op, a, b) => match op {
            BinOp::Add => {
                write_ast(a, LVL_ADD, f)?;
                write!(f, " + ")?;
                write_ast(b, LVL_MUL, f)?;
            }
            BinOp::Sub => {
                write_ast(a, LVL_ADD, f)?;
                write!(f, " - ")?;
                write_ast(b, LVL_MUL, f)?;
            }
            BinOp::Mul => {
                write_ast(a, LVL_MUL, f)?;
                write!(f, " * ")?;
                write_ast(b, LVL_NEG, f)?;
            }
            BinOp::Div => {
                write_ast(a, LVL_MUL, f)?;
                write!(f, " / ")?;
                write_ast(b, LVL_NEG, f)?;
            }
            BinOp::Pow => {
                write_ast(a, LVL_ATOM, f)?;
                write!(f, "^")?;
                write_ast(b, LVL_ATOM, f)?;
            }
        },
        Ast::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    write!(f, ", ")?;
                }
                write_ast(a, LVL_ADD, f)?;
            }
            write!(f, ")")?;
        }
    }
    if parens {
        write!(f, ")")?;
    }
    Ok(())
}

fn ast_level(ast: &Ast) -> u8 {
    match ast {
        Ast::Num(v) if *v < 0.0 => LVL_NEG,
        Ast::Num(_) | Ast::Var(_) | Ast::Time | Ast::Call(..) => LVL_ATOM,
        Ast::Neg(_) => LVL_NEG,
        Ast::Bin(BinOp::Add | BinOp::Sub, ..) => LVL_ADD,
        Ast::Bin(BinOp::Mul | BinOp::Div, ..) => LVL_MUL,
        Ast::Bin(BinOp::Pow, ..) => LVL_POW,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn eval_str(src: &str, z: &[f64], t: f64) -> f64 {
        ExprField::parse(src, z.len()).unwrap().eval(z, t).unwrap()
    }

    #[test]
    fn arithmetic_matches_hand_values() {
        assert_eq!(eval_str("2*z1 + z2^2 - 1/2", &[1.5, 2.0], 0.0), 6.5);
        assert_eq!(eval_str("-z1^2", &[3.0], 0.0), -9.0);
        assert_eq!(eval_str("2^-2", &[], 0.0), 0.25);
        assert_eq!(eval_str("2/4/2", &[], 0.0), 0.25);
        assert_eq!(eval_str("2^3^2", &[], 0.0), 512.0);
        assert_eq!(eval_str("2*3 + 4*5", &[], 0.0), 26.0);
        assert_eq!(eval_str("(1 + 2) * (3 - 5)", &[], 0.0), -6.0);
        assert_eq!(eval_str("abs(-3.5)", &[], 0.0), 3.5);
        assert_eq!(eval_str("min(2, 1 + 0.5)", &[], 0.0), 1.5);
        assert_eq!(eval_str("max(-2, -3)", &[], 0.0), -2.0);
        assert_eq!(eval_str("t*z1 + 1", &[2.0], 3.0), 7.0);
    }

    #[test]
    fn functions_match_std() {
        let x = 0.7316_f64;
        assert_eq!(eval_str("exp(z1)", &[x], 0.0), x.exp());
        assert_eq!(eval_str("log(z1)", &[x], 0.0), x.ln());
        assert_eq!(eval_str("sin(z1)", &[x], 0.0), x.sin());
        assert_eq!(eval_str("cos(z1)", &[x], 0.0), x.cos());
        assert_eq!(eval_str("tanh(z1)", &[x], 0.0), x.tanh());
        assert_eq!(eval_str("sqrt(z1)", &[x], 0.0), x.sqrt());
    }

    #[test]
    fn syntax_error_carries_byte_offset() {
        let err = ExprField::parse("2*+", 0).unwrap_err();
        match err {
            ExprError::Syntax { offset, .. } => assert_eq!(offset, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
        let err = ExprField::parse("(1 + 2", 0).unwrap_err();
        assert!(matches!(err, ExprError::Syntax { offset: 6, .. }));
        let err = ExprField::parse("1 @ 2", 0).unwrap_err();
        assert!(matches!(err, ExprError::Syntax { offset: 2, .. }));
    }

    #[test]
    fn unknown_identifiers_and_arity() {
        let err = ExprField::parse("z3 + 1", 2).unwrap_err();
        match err {
            ExprError::UnknownIdentifier { name, offset } => {
                assert_eq!(name, "z3");
                assert_eq!(offset, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            ExprField::parse("foo(1)", 1).unwrap_err(),
            ExprError::UnknownIdentifier { .. }
        ));
        match ExprField::parse("min(1)", 0).unwrap_err() {
            ExprError::Arity {
                name,
                expected,
                got,
                ..
            } => {
                assert_eq!(name, "min");
                assert_eq!(expected, 2);
                assert_eq!(got, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            ExprField::parse("exp(1, 2)", 0).unwrap_err(),
            ExprError::Arity { .. }
        ));
    }

    #[test]
    fn domain_errors_are_reported_not_nan() {
        let cases = [
            ("1/0", "/"),
            ("log(0)", "log"),
            ("log(-1)", "log"),
            ("sqrt(-1)", "sqrt"),
            ("(-1)^0.5", "^"),
            ("0^-1", "^"),
        ];
        for (src, op) in cases {
            let field = ExprField::parse(src, 0).unwrap();
            match field.eval(&[], 0.0) {
                Err(ExprError::EvalDomain { op: got, .. }) => assert_eq!(got, op),
                other => panic!("{src}: expected domain error, got {other:?}"),
            }
        }
        let field = ExprField::parse("exp(1000)", 0).unwrap();
        assert!(matches!(
            field.eval(&[], 0.0),
            Err(ExprError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn time_dependence_is_tracked() {
        assert!(ExprField::parse("t + z1", 1).unwrap().uses_time());
        assert!(!ExprField::parse("z1 + 1", 1).unwrap().uses_time());
    }

    fn random_ast(rng: &mut StdRng, dim: usize, depth: usize) -> Ast {
        if depth == 0 || rng.gen_bool(0.3) {
            return match rng.gen_range(0..3) {
                0 => Ast::Num((rng.gen_range(-40..=40) as f64) / 8.0),
                1 if dim > 0 => Ast::Var(rng.gen_range(0..dim)),
                _ => Ast::Time,
            };
        }
        match rng.gen_range(0..6) {
            0 => Ast::Neg(Box::new(random_ast(rng, dim, depth - 1))),
            1 => Ast::Bin(
                BinOp::Add,
                Box::new(random_ast(rng, dim, depth - 1)),
                Box::new(random_ast(rng, dim, depth - 1)),
            ),
            2 => Ast::Bin(
                BinOp::Sub,
                Box::new(random_ast(rng, dim, depth - 1)),
                Box::new(random_ast(rng, dim, depth - 1)),
            ),
            3 => Ast::Bin(
                BinOp::Mul,
                Box::new(random_ast(rng, dim, depth - 1)),
                Box::new(random_ast(rng, dim, depth - 1)),
            ),
            4 => Ast::Call(Func::Sin, vec![random_ast(rng, dim, depth - 1)]),
            _ => Ast::Call(
                Func::Max,
                vec![
                    random_ast(rng, dim, depth - 1),
                    random_ast(rng, dim, depth - 1),
                ],
            ),
        }
    }

    #[test]
    fn print_parse_round_trip_evaluates_identically() {
        let mut rng = StdRng::seed_from_u64(0x5eed_0001);
        for _ in 0..400 {
            let dim = rng.gen_range(0..4);
            let ast = random_ast(&mut rng, dim, 4);
            let field = ExprField::from_ast(ast, dim);
            let printed = field.to_string();
            let reparsed = ExprField::parse(&printed, dim)
                .unwrap_or_else(|e| panic!("failed to reparse `{printed}`: {e}"));
            for _ in 0..8 {
                let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let t: f64 = rng.gen_range(0.0..2.0);
                match (field.eval(&z, t), reparsed.eval(&z, t)) {
                    (Ok(a), Ok(b)) => assert!(
                        a == b || (a.is_nan() && b.is_nan()),
                        "`{printed}` evaluated to {a} vs {b}"
                    ),
                    (Err(_), Err(_)) => {}
                    (a, b) => panic!("`{printed}`: mismatched results {a:?} vs {b:?}"),
                }
            }
        }
    }

    #[test]
    fn division_and_power_round_trip() {
        for src in [
            "z1 / (z2 + 3) - 2^z1",
            "-(z1 + z2) * 3 - -z1",
            "(z1 - z2)^2 + exp(-z1^2 / 2)",
            "min(z1, max(z2, 0.5)) / 7.0",
        ] {
            let field = ExprField::parse(src, 2).unwrap();
            let printed = field.to_string();
            let reparsed = ExprField::parse(&printed, 2).unwrap();
            let z = [0.37, -1.21];
            let a = field.eval(&z, 0.0).unwrap();
            let b = reparsed.eval(&z, 0.0).unwrap();
            assert_eq!(a, b, "{src} -> {printed}");
        }
    }
}
