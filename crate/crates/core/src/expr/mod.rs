//! A small arithmetic language for coefficient functions of `(t, x, y)`.
//!
//! `x` is the driver coordinate (the value of `B_t`) and `y` the state. Trees
//! are immutable after parsing and can be shared freely across threads.

mod diff;
mod parse;

use std::fmt;

use thiserror::Error;

pub use diff::DiffError;
pub use parse::{parse, ParseError};

/// Free variables of a coefficient expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X,
    Y,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Exp => "exp",
            UnaryOp::Abs => "abs",
        }
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            UnaryOp::Neg => -a,
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Tanh => a.tanh(),
            UnaryOp::Exp => a.exp(),
            UnaryOp::Abs => a.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }
}

/// Expression tree. Arity is carried by the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero at (t={t}, x={x}, y={y})")]
    DivisionByZero { t: f64, x: f64, y: f64 },
    #[error("non-finite value at (t={t}, x={x}, y={y})")]
    NonFinite { t: f64, x: f64, y: f64 },
    #[error("coefficient has no symbolic derivative (contains abs)")]
    NotDifferentiable,
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn var(v: Var) -> Self {
        Expr::Var(v)
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    /// True for a literal zero, which the derivative builder produces for
    /// variables that do not occur.
    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn contains_var(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Unary(_, a) => a.contains_var(v),
            Expr::Binary(_, a, b) => a.contains_var(v) || b.contains_var(v),
        }
    }

    pub fn contains_abs(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Unary(op, a) => *op == UnaryOp::Abs || a.contains_abs(),
            Expr::Binary(_, a, b) => a.contains_abs() || b.contains_abs(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Evaluates the tree. Every intermediate value must stay finite.
    pub fn eval(&self, t: f64, x: f64, y: f64) -> Result<f64, EvalError> {
        let mut ok = true;
        let v = self.eval_fast(t, x, y, &mut ok);
        if ok {
            return Ok(v);
        }
        // rerun with checks to find out what went wrong
        self.eval_raw(t, x, y)
    }

    // Unchecked walk; `ok` is cleared on a zero divisor or a non-finite node.
    fn eval_fast(&self, t: f64, x: f64, y: f64, ok: &mut bool) -> f64 {
        let v = match self {
            Expr::Const(c) => return *c,
            Expr::Var(Var::T) => return t,
            Expr::Var(Var::X) => return x,
            Expr::Var(Var::Y) => return y,
            Expr::Unary(op, a) => op.apply(a.eval_fast(t, x, y, ok)),
            Expr::Binary(op, a, b) => {
                let a = a.eval_fast(t, x, y, ok);
                let b = b.eval_fast(t, x, y, ok);
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        *ok &= b != 0.0;
                        a / b
                    }
                }
            }
        };
        *ok &= v.is_finite();
        v
    }

    fn eval_raw(&self, t: f64, x: f64, y: f64) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Const(c) => *c,
            Expr::Var(Var::T) => t,
            Expr::Var(Var::X) => x,
            Expr::Var(Var::Y) => y,
            Expr::Unary(op, a) => op.apply(a.eval_raw(t, x, y)?),
            Expr::Binary(op, a, b) => {
                let a = a.eval_raw(t, x, y)?;
                let b = b.eval_raw(t, x, y)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(EvalError::DivisionByZero { t, x, y });
                        }
                        a / b
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite { t, x, y })
        }
    }
}

/// Fully parenthesized, so the output always reparses to the same tree shape.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if *c < 0.0 => write!(f, "(-{:?})", -c),
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluates_basic_arithmetic() {
        assert_eq!(parse("2+3*y").unwrap().eval(0.0, 0.0, 4.0), Ok(14.0));
        assert_eq!(parse("exp(x)").unwrap().eval(0.0, 0.0, 0.0), Ok(1.0));
    }

    #[test]
    fn division_by_zero_is_reported() {
        let e = parse("y/(t-t)").unwrap();
        for (t, x, y) in [(0.0, 0.0, 0.0), (1.5, -2.0, 3.0)] {
            assert!(matches!(
                e.eval(t, x, y),
                Err(EvalError::DivisionByZero { .. })
            ));
        }
    }

    #[test]
    fn overflow_is_non_finite() {
        let e = parse("exp(exp(y))").unwrap();
        assert_eq!(
            e.eval(0.0, 1.0, 10.0),
            Err(EvalError::NonFinite {
                t: 0.0,
                x: 1.0,
                y: 10.0
            })
        );
        // tanh would map inf back to 1; the intermediate check catches it
        assert!(parse("tanh(exp(y))")
            .unwrap()
            .eval(0.0, 0.0, 800.0)
            .is_err());
    }

    #[test]
    fn display_reparses() {
        let e = parse("1 + -2*x/(y - 3) - tanh(-t)").unwrap();
        let again = parse(&e.to_string()).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn negative_constants_print_parseably() {
        let e = Expr::binary(BinaryOp::Mul, Expr::Const(-1.5), Expr::var(Var::Y));
        let back = parse(&e.to_string()).unwrap();
        assert_eq!(back.eval(0.0, 0.0, 2.0), Ok(-3.0));
    }
}
