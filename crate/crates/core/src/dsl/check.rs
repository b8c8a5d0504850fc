use super::ast::{BinaryOp, Expr, ExprKind, UnaryOp};
use super::{DslError, DslErrorKind, EnvSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Type {
    Scalar,
    Bool,
}

impl Type {
    fn name(self) -> &'static str {
        match self {
            Type::Scalar => "scalar",
            Type::Bool => "boolean",
        }
    }
}

fn type_error(expr: &Expr, message: String) -> DslError {
    DslError::new(DslErrorKind::Type, expr.span, message)
}

fn expect(expr: &Expr, scope: &mut Vec<(String, Type)>, wanted: Type, role: &str) -> Result<(), DslError> {
    let found = infer(expr, scope)?;
    if found != wanted {
        return Err(type_error(
            expr,
            format!(
                "{role} must be {}, found {} expression '{}'",
                wanted.name(),
                found.name(),
                expr.pretty()
            ),
        ));
    }
    Ok(())
}

/// Infers the type of `expr`; let-bound names shadow snapshot variables.
pub fn infer(expr: &Expr, scope: &mut Vec<(String, Type)>) -> Result<Type, DslError> {
    match &expr.kind {
        ExprKind::Number(_) => Ok(Type::Scalar),
        ExprKind::Var(name) => {
            if let Some((_, ty)) = scope.iter().rev().find(|(n, _)| n == name) {
                Ok(*ty)
            } else if EnvSnapshot::has_variable(name) {
                Ok(Type::Scalar)
            } else {
                Err(type_error(expr, format!("unknown variable '{name}'")))
            }
        }
        ExprKind::Unary(UnaryOp::Neg, operand) => {
            expect(operand, scope, Type::Scalar, "operand of '-'")?;
            Ok(Type::Scalar)
        }
        ExprKind::Unary(UnaryOp::Not, operand) => {
            expect(operand, scope, Type::Bool, "operand of 'not'")?;
            Ok(Type::Bool)
        }
        ExprKind::Binary(op, lhs, rhs) => {
            let operand = if op.is_logical() { Type::Bool } else { Type::Scalar };
            let role = format!("operand of '{}'", op.symbol());
            expect(lhs, scope, operand, &role)?;
            expect(rhs, scope, operand, &role)?;
            Ok(if op.is_comparison() || op.is_logical() {
                Type::Bool
            } else {
                debug_assert!(matches!(
                    op,
                    BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div
                ));
                Type::Scalar
            })
        }
        ExprKind::Call(function, args) => {
            let role = format!("argument of {}()", function.name());
            for arg in args {
                expect(arg, scope, Type::Scalar, &role)?;
            }
            Ok(Type::Scalar)
        }
        ExprKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            expect(cond, scope, Type::Bool, "if condition")?;
            let then_type = infer(then_branch, scope)?;
            let else_type = infer(else_branch, scope)?;
            if then_type != else_type {
                return Err(type_error(
                    expr,
                    format!(
                        "if branches disagree: then is {}, else is {}",
                        then_type.name(),
                        else_type.name()
                    ),
                ));
            }
            Ok(then_type)
        }
        ExprKind::Let { name, value, body } => {
            let value_type = infer(value, scope)?;
            scope.push((name.clone(), value_type));
            let body_type = infer(body, scope);
            scope.pop();
            body_type
        }
    }
}

/// Accepts iff every name resolves and the program yields a scalar.
pub fn check_program(expr: &Expr) -> Result<(), DslError> {
    let mut scope = Vec::new();
    match infer(expr, &mut scope)? {
        Type::Scalar => Ok(()),
        Type::Bool => Err(type_error(
            expr,
            "a reward program must produce a scalar, not a boolean".to_string(),
        )),
    }
}
