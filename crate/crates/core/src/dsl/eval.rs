use super::ast::{BinaryOp, Expr, ExprKind, Function, UnaryOp};
use super::{DslError, DslErrorKind, EnvSnapshot};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Value {
    Scalar(f64),
    Bool(bool),
}

fn domain(expr: &Expr, message: impl Into<String>) -> DslError {
    DslError::new(DslErrorKind::EvalDomain, expr.span, message)
}

fn finite(expr: &Expr, value: f64) -> Result<Value, DslError> {
    if value.is_finite() {
        Ok(Value::Scalar(value))
    } else {
        Err(domain(expr, format!("'{}' is not finite", expr.pretty())))
    }
}

struct Evaluator<'a> {
    snapshot: &'a EnvSnapshot,
    scope: Vec<(&'a str, Value)>,
}

impl<'a> Evaluator<'a> {
    fn scalar(&mut self, expr: &'a Expr) -> Result<f64, DslError> {
        match self.eval(expr)? {
            Value::Scalar(v) => Ok(v),
            Value::Bool(_) => Err(DslError::new(
                DslErrorKind::Type,
                expr.span,
                "expected a scalar, found a boolean",
            )),
        }
    }

    fn boolean(&mut self, expr: &'a Expr) -> Result<bool, DslError> {
        match self.eval(expr)? {
            Value::Bool(b) => Ok(b),
            Value::Scalar(_) => Err(DslError::new(
                DslErrorKind::Type,
                expr.span,
                "expected a boolean, found a scalar",
            )),
        }
    }

    fn eval(&mut self, expr: &'a Expr) -> Result<Value, DslError> {
        match &expr.kind {
            ExprKind::Number(n) => Ok(Value::Scalar(*n)),
            ExprKind::Var(name) => {
                if let Some((_, value)) = self.scope.iter().rev().find(|(n, _)| n == name) {
                    return Ok(*value);
                }
                self.snapshot
                    .get(name)
                    .map(Value::Scalar)
                    .ok_or_else(|| DslError::new(DslErrorKind::Type, expr.span, format!("unknown variable '{name}'")))
            }
            ExprKind::Unary(UnaryOp::Neg, operand) => Ok(Value::Scalar(-self.scalar(operand)?)),
            ExprKind::Unary(UnaryOp::Not, operand) => Ok(Value::Bool(!self.boolean(operand)?)),
            ExprKind::Binary(BinaryOp::And, lhs, rhs) => Ok(Value::Bool(self.boolean(lhs)? && self.boolean(rhs)?)),
            ExprKind::Binary(BinaryOp::Or, lhs, rhs) => Ok(Value::Bool(self.boolean(lhs)? || self.boolean(rhs)?)),
            ExprKind::Binary(op, lhs, rhs) => {
                let a = self.scalar(lhs)?;
                let b = self.scalar(rhs)?;
                match op {
                    BinaryOp::Add => finite(expr, a + b),
                    BinaryOp::Sub => finite(expr, a - b),
                    BinaryOp::Mul => finite(expr, a * b),
                    BinaryOp::Div if b == 0.0 => Err(domain(expr, format!("division by zero in '{}'", expr.pretty()))),
                    BinaryOp::Div => finite(expr, a / b),
                    BinaryOp::Lt => Ok(Value::Bool(a < b)),
                    BinaryOp::Le => Ok(Value::Bool(a <= b)),
                    BinaryOp::Gt => Ok(Value::Bool(a > b)),
                    BinaryOp::Ge => Ok(Value::Bool(a >= b)),
                    BinaryOp::Eq => Ok(Value::Bool(a == b)),
                    BinaryOp::Ne => Ok(Value::Bool(a != b)),
                    BinaryOp::And | BinaryOp::Or => unreachable!("handled above"),
                }
            }
            ExprKind::Call(function, args) => {
                let mut values = [0.0; 3];
                for (slot, arg) in values.iter_mut().zip(args) {
                    *slot = self.scalar(arg)?;
                }
                let [a, b, c] = values;
                match function {
                    Function::Min => finite(expr, a.min(b)),
                    Function::Max => finite(expr, a.max(b)),
                    Function::Abs => finite(expr, a.abs()),
                    Function::Clamp if b > c => {
                        Err(domain(expr, format!("clamp lower bound {b} exceeds upper bound {c}")))
                    }
                    Function::Clamp => finite(expr, a.clamp(b, c)),
                    Function::Exp => finite(expr, a.exp()),
                    Function::Sqrt if a < 0.0 => Err(domain(expr, format!("sqrt of negative value {a}"))),
                    Function::Sqrt => finite(expr, a.sqrt()),
                    Function::Tanh => finite(expr, a.tanh()),
                }
            }
            ExprKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                if self.boolean(cond)? {
                    self.eval(then_branch)
                } else {
                    self.eval(else_branch)
                }
            }
            ExprKind::Let { name, value, body } => {
                let value = self.eval(value)?;
                self.scope.push((name, value));
                let result = self.eval(body);
                self.scope.pop();
                result
            }
        }
    }
}

pub fn eval_scalar(expr: &Expr, snapshot: &EnvSnapshot) -> Result<f64, DslError> {
    let mut evaluator = Evaluator {
        snapshot,
        scope: Vec::new(),
    };
    evaluator.scalar(expr)
}
