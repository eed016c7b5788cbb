use thiserror::Error;

use super::{BinaryOp, Expr, UnaryOp, Var};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("cannot differentiate `{0}` with respect to {1}: abs has no derivative at its kink")]
    ThroughAbs(String, &'static str),
}

// Constructors that drop literal zeros and ones. Enough to keep derivatives
// of variables that do not occur reduced to `Const(0)`.
fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p + q),
        _ if a.is_zero() => b,
        _ if b.is_zero() => a,
        _ => Expr::binary(BinaryOp::Add, a, b),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p - q),
        _ if b.is_zero() => a,
        _ if a.is_zero() => neg(b),
        _ => Expr::binary(BinaryOp::Sub, a, b),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(p), Expr::Const(q)) => Expr::Const(p * q),
        _ if a.is_zero() || b.is_zero() => Expr::Const(0.0),
        (Expr::Const(p), _) if *p == 1.0 => b,
        (_, Expr::Const(q)) if *q == 1.0 => a,
        _ => Expr::binary(BinaryOp::Mul, a, b),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        // keeps the zero; the denominator is still checked where the
        // original expression is evaluated
        return Expr::Const(0.0);
    }
    Expr::binary(BinaryOp::Div, a, b)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        other => Expr::unary(UnaryOp::Neg, other),
    }
}

impl Expr {
    /// Exact symbolic partial derivative.
    ///
    /// `abs` is accepted only when its argument does not depend on `var`.
    pub fn differentiate(&self, var: Var) -> Result<Expr, DiffError> {
        Ok(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let da = a.differentiate(var)?;
                if da.is_zero() {
                    return Ok(Expr::Const(0.0));
                }
                let a = (**a).clone();
                match op {
                    UnaryOp::Neg => neg(da),
                    UnaryOp::Sin => mul(Expr::unary(UnaryOp::Cos, a), da),
                    UnaryOp::Cos => neg(mul(Expr::unary(UnaryOp::Sin, a), da)),
                    UnaryOp::Tanh => {
                        let th = Expr::unary(UnaryOp::Tanh, a);
                        mul(sub(Expr::Const(1.0), mul(th.clone(), th)), da)
                    }
                    UnaryOp::Exp => mul(Expr::unary(UnaryOp::Exp, a), da),
                    UnaryOp::Abs => {
                        return Err(DiffError::ThroughAbs(self.to_string(), var.name()))
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.differentiate(var)?;
                let db = b.differentiate(var)?;
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinaryOp::Add => add(da, db),
                    BinaryOp::Sub => sub(da, db),
                    BinaryOp::Mul => add(mul(da, b), mul(a, db)),
                    BinaryOp::Div => {
                        if db.is_zero() {
                            div(da, b)
                        } else {
                            div(sub(mul(da, b.clone()), mul(a, db)), mul(b.clone(), b))
                        }
                    }
                }
            }
        })
    }
}
