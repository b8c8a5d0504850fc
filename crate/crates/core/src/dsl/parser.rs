use super::ast::{BinaryOp, Expr, ExprKind, Function, Span, UnaryOp};
use super::lexer::{tokenize, Spanned, Token};
use super::{DslError, DslErrorKind};

/// Bound on both parser recursion and tree height, so every later tree walk
/// stays far from the stack limit.
pub const MAX_NESTING: usize = 128;

/// Parses a complete expression; trailing tokens are an error.
pub fn parse_expr(source: &str) -> Result<Expr, DslError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        depth: 0,
    };
    let (expr, _) = parser.expr()?;
    let next = parser.peek();
    if next.token != Token::Eof {
        return Err(parser.error_at(
            next.span,
            format!("unexpected {} after expression", next.token.describe()),
        ));
    }
    Ok(expr)
}

/// A parsed node with its tree height.
type Parsed = (Expr, usize);

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.tokens[self.pos]
    }

    fn advance(&mut self) -> Spanned {
        let token = self.tokens[self.pos].clone();
        if token.token != Token::Eof {
            self.pos += 1;
        }
        token
    }

    fn eat(&mut self, token: &Token) -> bool {
        if &self.peek().token == token {
            self.advance();
            true
        } else {
            false
        }
    }

    fn error_at(&self, span: Span, message: String) -> DslError {
        DslError::new(DslErrorKind::Parse, span, message)
    }

    fn expect(&mut self, token: Token, context: &str) -> Result<Span, DslError> {
        let next = self.peek().clone();
        if next.token == token {
            self.advance();
            Ok(next.span)
        } else {
            Err(self.error_at(
                next.span,
                format!(
                    "expected {} {context}, found {}",
                    token.describe(),
                    next.token.describe()
                ),
            ))
        }
    }

    fn node(&self, kind: ExprKind, span: Span, height: usize) -> Result<Parsed, DslError> {
        if height > MAX_NESTING {
            return Err(self.error_at(span, format!("expression nested deeper than {MAX_NESTING} levels")));
        }
        Ok((Expr::new(kind, span), height))
    }

    fn enter(&mut self) -> Result<(), DslError> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            let span = self.peek().span;
            return Err(self.error_at(span, format!("expression nested deeper than {MAX_NESTING} levels")));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Parsed, DslError> {
        self.enter()?;
        let result = match self.peek().token {
            Token::If => self.if_expr(),
            Token::Let => self.let_expr(),
            _ => self.or_expr(),
        };
        self.depth -= 1;
        result
    }

    fn if_expr(&mut self) -> Result<Parsed, DslError> {
        let start = self.advance().span;
        let (cond, h1) = self.expr()?;
        self.expect(Token::Then, "after if condition")?;
        let (then_branch, h2) = self.expr()?;
        self.expect(Token::Else, "in if expression")?;
        let (else_branch, h3) = self.expr()?;
        let span = start.to(else_branch.span);
        self.node(
            ExprKind::If {
                cond: Box::new(cond),
                then_branch: Box::new(then_branch),
                else_branch: Box::new(else_branch),
            },
            span,
            1 + h1.max(h2).max(h3),
        )
    }

    fn let_expr(&mut self) -> Result<Parsed, DslError> {
        let start = self.advance().span;
        let next = self.advance();
        let name = match next.token {
            Token::Ident(name) => name,
            other => {
                return Err(self.error_at(
                    next.span,
                    format!("expected a name after 'let', found {}", other.describe()),
                ))
            }
        };
        if Function::from_name(&name).is_some() {
            return Err(self.error_at(next.span, format!("'{name}' is a built-in function name")));
        }
        self.expect(Token::Assign, "after let name")?;
        let (value, h1) = self.expr()?;
        self.expect(Token::In, "after let value")?;
        let (body, h2) = self.expr()?;
        let span = start.to(body.span);
        self.node(
            ExprKind::Let {
                name,
                value: Box::new(value),
                body: Box::new(body),
            },
            span,
            1 + h1.max(h2),
        )
    }

    fn binary_chain(
        &mut self,
        operand: fn(&mut Self) -> Result<Parsed, DslError>,
        op_of: fn(&Token) -> Option<BinaryOp>,
    ) -> Result<Parsed, DslError> {
        let (mut lhs, mut height) = operand(self)?;
        while let Some(op) = op_of(&self.peek().token) {
            self.advance();
            let (rhs, rh) = operand(self)?;
            let span = lhs.span.to(rhs.span);
            (lhs, height) = self.node(
                ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                span,
                1 + height.max(rh),
            )?;
        }
        Ok((lhs, height))
    }

    fn or_expr(&mut self) -> Result<Parsed, DslError> {
        self.binary_chain(Self::and_expr, |t| (t == &Token::Or).then_some(BinaryOp::Or))
    }

    fn and_expr(&mut self) -> Result<Parsed, DslError> {
        self.binary_chain(Self::not_expr, |t| (t == &Token::And).then_some(BinaryOp::And))
    }

    fn not_expr(&mut self) -> Result<Parsed, DslError> {
        if self.peek().token == Token::Not {
            let start = self.advance().span;
            self.enter()?;
            let operand = self.not_expr();
            self.depth -= 1;
            let (operand, h) = operand?;
            let span = start.to(operand.span);
            return self.node(ExprKind::Unary(UnaryOp::Not, Box::new(operand)), span, h + 1);
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Parsed, DslError> {
        let (lhs, lh) = self.additive()?;
        let op = match self.peek().token {
            Token::Lt => BinaryOp::Lt,
            Token::Le => BinaryOp::Le,
            Token::Gt => BinaryOp::Gt,
            Token::Ge => BinaryOp::Ge,
            Token::EqEq => BinaryOp::Eq,
            Token::Ne => BinaryOp::Ne,
            _ => return Ok((lhs, lh)),
        };
        self.advance();
        let (rhs, rh) = self.additive()?;
        if matches!(
            self.peek().token,
            Token::Lt | Token::Le | Token::Gt | Token::Ge | Token::EqEq | Token::Ne
        ) {
            let span = self.peek().span;
            return Err(self.error_at(span, "comparisons cannot be chained; add parentheses".into()));
        }
        let span = lhs.span.to(rhs.span);
        self.node(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), span, 1 + lh.max(rh))
    }

    fn additive(&mut self) -> Result<Parsed, DslError> {
        self.binary_chain(Self::multiplicative, |t| match t {
            Token::Plus => Some(BinaryOp::Add),
            Token::Minus => Some(BinaryOp::Sub),
            _ => None,
        })
    }

    fn multiplicative(&mut self) -> Result<Parsed, DslError> {
        self.binary_chain(Self::unary, |t| match t {
            Token::Star => Some(BinaryOp::Mul),
            Token::Slash => Some(BinaryOp::Div),
            _ => None,
        })
    }

    fn unary(&mut self) -> Result<Parsed, DslError> {
        if self.peek().token == Token::Minus {
            let start = self.advance().span;
            self.enter()?;
            let operand = self.unary();
            self.depth -= 1;
            let (operand, h) = operand?;
            let span = start.to(operand.span);
            return self.node(ExprKind::Unary(UnaryOp::Neg, Box::new(operand)), span, h + 1);
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Parsed, DslError> {
        let next = self.peek().clone();
        match next.token {
            Token::Number(value) => {
                self.advance();
                self.node(ExprKind::Number(value), next.span, 1)
            }
            Token::Ident(name) => {
                self.advance();
                if self.peek().token == Token::LParen {
                    return self.call(name, next.span);
                }
                self.node(ExprKind::Var(name), next.span, 1)
            }
            Token::LParen => {
                self.advance();
                let (mut inner, h) = self.expr()?;
                let close = self.expect(Token::RParen, "to close '('")?;
                inner.span = next.span.to(close);
                Ok((inner, h))
            }
            Token::If | Token::Let => self.expr(),
            other => Err(self.error_at(next.span, format!("expected an expression, found {}", other.describe()))),
        }
    }

    fn call(&mut self, name: String, name_span: Span) -> Result<Parsed, DslError> {
        let function =
            Function::from_name(&name).ok_or_else(|| self.error_at(name_span, format!("unknown function '{name}'")))?;
        self.advance();
        let mut args = Vec::new();
        let mut height = 0;
        if self.peek().token != Token::RParen {
            loop {
                let (arg, h) = self.expr()?;
                height = height.max(h);
                args.push(arg);
                if !self.eat(&Token::Comma) {
                    break;
                }
            }
        }
        let close = self.expect(Token::RParen, "to close the argument list")?;
        let span = name_span.to(close);
        if args.len() != function.arity() {
            return Err(self.error_at(
                span,
                format!(
                    "{}() takes {} argument(s), got {}",
                    function.name(),
                    function.arity(),
                    args.len()
                ),
            ));
        }
        self.node(ExprKind::Call(function, args), span, height + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(n: f64) -> Expr {
        Expr::new(ExprKind::Number(n), Span::default())
    }

    fn var(name: &str) -> Expr {
        Expr::new(ExprKind::Var(name.into()), Span::default())
    }

    fn bin(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), Span::default())
    }

    #[test]
    fn literal() {
        assert_eq!(parse_expr("1.0").unwrap(), num(1.0));
    }

    #[test]
    fn conditional_matches_hand_built_tree() {
        let parsed = parse_expr("if collided > 0.5 then -1.0 else ego_speed / speed_max").unwrap();
        let expected = Expr::new(
            ExprKind::If {
                cond: Box::new(bin(BinaryOp::Gt, var("collided"), num(0.5))),
                then_branch: Box::new(Expr::new(
                    ExprKind::Unary(UnaryOp::Neg, Box::new(num(1.0))),
                    Span::default(),
                )),
                else_branch: Box::new(bin(BinaryOp::Div, var("ego_speed"), var("speed_max"))),
            },
            Span::default(),
        );
        assert_eq!(parsed, expected);
    }

    #[test]
    fn truncated_input_reports_end_offset() {
        let err = parse_expr("1 +").unwrap_err();
        assert_eq!(err.kind, DslErrorKind::Parse);
        assert_eq!(err.span.start, 3);
    }

    #[test]
    fn precedence_and_associativity() {
        let parsed = parse_expr("1 - 2 - 3 * 4").unwrap();
        let expected = bin(
            BinaryOp::Sub,
            bin(BinaryOp::Sub, num(1.0), num(2.0)),
            bin(BinaryOp::Mul, num(3.0), num(4.0)),
        );
        assert_eq!(parsed, expected);
        let parsed = parse_expr("not a < 1 and b > 2 or c == 3").unwrap();
        assert_eq!(parsed.pretty(), "not a < 1.0 and b > 2.0 or c == 3.0");
    }

    #[test]
    fn error_cases() {
        for (source, at) in [
            ("(1 + 2", 6),
            ("foo(1)", 0),
            ("min(1)", 0),
            ("1 < 2 < 3", 6),
            ("let = 3 in 1", 4),
            ("let x = 1 x", 10),
            ("1 2", 2),
            ("if a then b", 11),
        ] {
            let err = parse_expr(source).unwrap_err();
            assert_eq!(err.kind, DslErrorKind::Parse, "{source}");
            assert_eq!(err.span.start, at, "{source}: {err}");
        }
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let deep = format!("{}1{}", "(".repeat(10_000), ")".repeat(10_000));
        assert_eq!(parse_expr(&deep).unwrap_err().kind, DslErrorKind::Parse);
        let long = vec!["1"; 10_000].join(" + ");
        assert_eq!(parse_expr(&long).unwrap_err().kind, DslErrorKind::Parse);
        let negs = format!("{}1", "-".repeat(10_000));
        assert_eq!(parse_expr(&negs).unwrap_err().kind, DslErrorKind::Parse);
        let ok = vec!["1"; 100].join(" + ");
        assert!(parse_expr(&ok).is_ok());
    }
}
