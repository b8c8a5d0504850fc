use super::{DslError, DslErrorKind, Span};

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Number(f64),
    Ident(String),
    If,
    Then,
    Else,
    Let,
    In,
    And,
    Or,
    Not,
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
    Assign,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    Eof,
}

impl Token {
    pub fn describe(&self) -> String {
        match self {
            Token::Number(n) => format!("number {n}"),
            Token::Ident(name) => format!("identifier '{name}'"),
            Token::Eof => "end of input".to_string(),
            other => format!("'{}'", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Token::If => "if",
            Token::Then => "then",
            Token::Else => "else",
            Token::Let => "let",
            Token::In => "in",
            Token::And => "and",
            Token::Or => "or",
            Token::Not => "not",
            Token::Plus => "+",
            Token::Minus => "-",
            Token::Star => "*",
            Token::Slash => "/",
            Token::LParen => "(",
            Token::RParen => ")",
            Token::Comma => ",",
            Token::Assign => "=",
            Token::Lt => "<",
            Token::Le => "<=",
            Token::Gt => ">",
            Token::Ge => ">=",
            Token::EqEq => "==",
            Token::Ne => "!=",
            Token::Number(_) | Token::Ident(_) | Token::Eof => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spanned {
    pub token: Token,
    pub span: Span,
}

fn lex_error(start: usize, end: usize, message: impl Into<String>) -> DslError {
    DslError::new(DslErrorKind::Lex, Span::new(start, end), message)
}

/// Splits `source` into tokens, ending with [`Token::Eof`]. `#` starts a
/// comment that runs to the end of the line.
pub fn tokenize(source: &str) -> Result<Vec<Spanned>, DslError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos];
        let start = pos;
        if c.is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        if c == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let token = if c.is_ascii_digit() || (c == b'.' && bytes.get(pos + 1).is_some_and(u8::is_ascii_digit)) {
            pos = scan_number(bytes, pos);
            let text = &source[start..pos];
            let value: f64 = text
                .parse()
                .map_err(|_| lex_error(start, pos, format!("malformed number '{text}'")))?;
            if !value.is_finite() {
                return Err(lex_error(start, pos, format!("number '{text}' is out of range")));
            }
            Token::Number(value)
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            match &source[start..pos] {
                "if" => Token::If,
                "then" => Token::Then,
                "else" => Token::Else,
                "let" => Token::Let,
                "in" => Token::In,
                "and" => Token::And,
                "or" => Token::Or,
                "not" => Token::Not,
                name => Token::Ident(name.to_string()),
            }
        } else {
            let next = bytes.get(pos + 1).copied();
            let (token, width) = match (c, next) {
                (b'<', Some(b'=')) => (Token::Le, 2),
                (b'>', Some(b'=')) => (Token::Ge, 2),
                (b'=', Some(b'=')) => (Token::EqEq, 2),
                (b'!', Some(b'=')) => (Token::Ne, 2),
                (b'<', _) => (Token::Lt, 1),
                (b'>', _) => (Token::Gt, 1),
                (b'=', _) => (Token::Assign, 1),
                (b'+', _) => (Token::Plus, 1),
                (b'-', _) => (Token::Minus, 1),
                (b'*', _) => (Token::Star, 1),
                (b'/', _) => (Token::Slash, 1),
                (b'(', _) => (Token::LParen, 1),
                (b')', _) => (Token::RParen, 1),
                (b',', _) => (Token::Comma, 1),
                _ => {
                    // Math-notation aliases: − × ÷
                    let ch = source[pos..].chars().next().unwrap_or('\u{FFFD}');
                    let width = ch.len_utf8();
                    match ch {
                        '−' => (Token::Minus, width),
                        '×' => (Token::Star, width),
                        '÷' => (Token::Slash, width),
                        _ => return Err(lex_error(start, start + width, format!("unexpected character {ch:?}"))),
                    }
                }
            };
            pos += width;
            token
        };
        tokens.push(Spanned {
            token,
            span: Span::new(start, pos),
        });
    }
    tokens.push(Spanned {
        token: Token::Eof,
        span: Span::new(bytes.len(), bytes.len()),
    });
    Ok(tokens)
}

fn scan_number(bytes: &[u8], mut pos: usize) -> usize {
    let digits = |mut p: usize| {
        while p < bytes.len() && bytes[p].is_ascii_digit() {
            p += 1;
        }
        p
    };
    pos = digits(pos);
    if bytes.get(pos) == Some(&b'.') {
        pos = digits(pos + 1);
    }
    if matches!(bytes.get(pos), Some(b'e' | b'E')) {
        let mut p = pos + 1;
        if matches!(bytes.get(p), Some(b'+' | b'-')) {
            p += 1;
        }
        if bytes.get(p).is_some_and(u8::is_ascii_digit) {
            pos = digits(p);
        }
    }
    pos
}
