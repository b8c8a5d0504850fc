use std::fmt;

use serde::{Deserialize, Serialize};

/// Byte range into the program source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn to(self, other: Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq | BinaryOp::Ne
        )
    }

    pub fn is_logical(self) -> bool {
        matches!(self, BinaryOp::And | BinaryOp::Or)
    }

    pub(crate) fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq | BinaryOp::Ne => 4,
            BinaryOp::Add | BinaryOp::Sub => 5,
            BinaryOp::Mul | BinaryOp::Div => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Min,
    Max,
    Abs,
    Clamp,
    Exp,
    Sqrt,
    Tanh,
}

impl Function {
    pub const ALL: [Function; 7] = [
        Function::Min,
        Function::Max,
        Function::Abs,
        Function::Clamp,
        Function::Exp,
        Function::Sqrt,
        Function::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Function::Min => "min",
            Function::Max => "max",
            Function::Abs => "abs",
            Function::Clamp => "clamp",
            Function::Exp => "exp",
            Function::Sqrt => "sqrt",
            Function::Tanh => "tanh",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Function::Min | Function::Max => 2,
            Function::Clamp => 3,
            Function::Abs | Function::Exp | Function::Sqrt | Function::Tanh => 1,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Expression node. Equality ignores spans.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Number(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Function, Vec<Expr>),
    If {
        cond: Box<Expr>,
        then_branch: Box<Expr>,
        else_branch: Box<Expr>,
    },
    Let {
        name: String,
        value: Box<Expr>,
        body: Box<Expr>,
    },
}

impl Expr {
    pub fn new(kind: ExprKind, span: Span) -> Self {
        Self { kind, span }
    }

    fn precedence(&self) -> u8 {
        match &self.kind {
            ExprKind::If { .. } | ExprKind::Let { .. } => 0,
            ExprKind::Binary(op, ..) => op.precedence(),
            ExprKind::Unary(UnaryOp::Not, _) => 3,
            ExprKind::Unary(UnaryOp::Neg, _) => 7,
            ExprKind::Number(_) | ExprKind::Var(_) | ExprKind::Call(..) => 8,
        }
    }

    fn write(&self, out: &mut String, min_precedence: u8) {
        let wrap = self.precedence() < min_precedence;
        if wrap {
            out.push('(');
        }
        match &self.kind {
            // Debug formatting is the shortest text that parses back exactly.
            ExprKind::Number(n) => out.push_str(&format!("{n:?}")),
            ExprKind::Var(name) => out.push_str(name),
            ExprKind::Unary(UnaryOp::Neg, operand) => {
                out.push('-');
                operand.write(out, 7);
            }
            ExprKind::Unary(UnaryOp::Not, operand) => {
                out.push_str("not ");
                operand.write(out, 3);
            }
            ExprKind::Binary(op, lhs, rhs) => {
                let p = op.precedence();
                let (left_min, right_min) = if op.is_comparison() { (p + 1, p + 1) } else { (p, p + 1) };
                lhs.write(out, left_min);
                out.push(' ');
                out.push_str(op.symbol());
                out.push(' ');
                rhs.write(out, right_min);
            }
            ExprKind::Call(function, args) => {
                out.push_str(function.name());
                out.push('(');
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    arg.write(out, 0);
                }
                out.push(')');
            }
            ExprKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                out.push_str("if ");
                cond.write(out, 0);
                out.push_str(" then ");
                then_branch.write(out, 0);
                out.push_str(" else ");
                else_branch.write(out, 0);
            }
            ExprKind::Let { name, value, body } => {
                out.push_str("let ");
                out.push_str(name);
                out.push_str(" = ");
                value.write(out, 0);
                out.push_str(" in ");
                body.write(out, 0);
            }
        }
        if wrap {
            out.push(')');
        }
    }

    /// Canonical single-line rendering with minimal parentheses.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}
