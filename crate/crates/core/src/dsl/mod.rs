//! Sandboxed reward-expression language.
//!
//! Reward programs are single expressions over a per-step [`EnvSnapshot`]:
//!
//! ```text
//! expr   := if expr then expr else expr | let name = expr in expr | or
//! or     := and ("or" and)*
//! and    := not ("and" not)*
//! not    := "not" not | cmp
//! cmp    := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum    := prod (("+" | "-") prod)*
//! prod   := unary (("*" | "/") unary)*
//! unary  := "-" unary | number | name | func "(" args ")" | "(" expr ")"
//! func   := min | max | abs | clamp | exp | sqrt | tanh
//! ```
//!
//! There are no loops, recursion, or user functions, so evaluation always
//! terminates in time linear in the program size. `#` starts a line comment.

mod ast;
mod check;
mod eval;
mod lexer;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{EnvConfig, StepInfo};

pub use ast::{BinaryOp, Expr, ExprKind, Function, Span, UnaryOp};
pub use check::Type;
pub use parser::MAX_NESTING;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DslErrorKind {
    Lex,
    Parse,
    Type,
    EvalDomain,
}

impl fmt::Display for DslErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DslErrorKind::Lex => "lex",
            DslErrorKind::Parse => "parse",
            DslErrorKind::Type => "type",
            DslErrorKind::EvalDomain => "eval-domain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{kind} error at {}..{}: {message}", span.start, span.end)]
pub struct DslError {
    pub kind: DslErrorKind,
    pub span: Span,
    pub message: String,
}

impl DslError {
    pub fn new(kind: DslErrorKind, span: Span, message: impl Into<String>) -> Self {
        Self {
            kind,
            span,
            message: message.into(),
        }
    }

    /// 1-based line and column of the error start within `source`.
    pub fn line_col(&self, source: &str) -> (usize, usize) {
        let upto = &source.as_bytes()[..self.span.start.min(source.len())];
        let line = upto.iter().filter(|&&b| b == b'\n').count() + 1;
        let line_start = upto.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let column = String::from_utf8_lossy(&upto[line_start..]).chars().count() + 1;
        (line, column)
    }

    /// Multi-line report with the offending source line and a caret.
    pub fn render(&self, source: &str) -> String {
        let (line, column) = self.line_col(source);
        let text = source.lines().nth(line - 1).unwrap_or("");
        format!(
            "{} error at line {line}, column {column}: {}\n  {text}\n  {}^",
            self.kind,
            self.message,
            " ".repeat(column - 1)
        )
    }
}

/// The variables a reward program can read, one value per decision step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub ego_speed: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub lane_index: f64,
    pub lanes_count: f64,
    pub on_rightmost_lane: f64,
    pub collided: f64,
    pub gap_front: f64,
    pub front_speed_delta: f64,
    pub action_code: f64,
    pub lateral_offset_abs: f64,
}

/// Snapshot variable names with their meaning, in declaration order.
pub const SNAPSHOT_VARIABLES: [(&str, &str); 11] = [
    ("ego_speed", "ego longitudinal speed, m/s"),
    ("speed_min", "lower end of the ego target-speed range, m/s"),
    ("speed_max", "upper end of the ego target-speed range, m/s"),
    ("lane_index", "ego lane, 0 = leftmost"),
    ("lanes_count", "number of lanes on the road"),
    ("on_rightmost_lane", "1 if the ego is in the rightmost lane, else 0"),
    ("collided", "1 if the ego has crashed, else 0"),
    (
        "gap_front",
        "bumper-to-bumper distance to the vehicle ahead in the ego lane, m (1000 if none)",
    ),
    (
        "front_speed_delta",
        "speed of the vehicle ahead minus ego speed, m/s (0 if none)",
    ),
    (
        "action_code",
        "requested action: 0 LANE_LEFT, 1 IDLE, 2 LANE_RIGHT, 3 FASTER, 4 SLOWER",
    ),
    ("lateral_offset_abs", "absolute lateral offset from the lane center, m"),
];

impl EnvSnapshot {
    pub fn has_variable(name: &str) -> bool {
        SNAPSHOT_VARIABLES.iter().any(|(n, _)| *n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "ego_speed" => self.ego_speed,
            "speed_min" => self.speed_min,
            "speed_max" => self.speed_max,
            "lane_index" => self.lane_index,
            "lanes_count" => self.lanes_count,
            "on_rightmost_lane" => self.on_rightmost_lane,
            "collided" => self.collided,
            "gap_front" => self.gap_front,
            "front_speed_delta" => self.front_speed_delta,
            "action_code" => self.action_code,
            "lateral_offset_abs" => self.lateral_offset_abs,
            _ => return None,
        })
    }

    pub fn from_step(info: &StepInfo, config: &EnvConfig) -> Self {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Self {
            ego_speed: info.ego_speed,
            speed_min: config.speed_limits[0],
            speed_max: config.speed_limits[1],
            lane_index: info.ego_lane as f64,
            lanes_count: config.lanes_count as f64,
            on_rightmost_lane: flag(info.on_rightmost_lane),
            collided: flag(info.crashed),
            gap_front: info.gap_front,
            front_speed_delta: info.front_speed_delta,
            action_code: f64::from(info.action_code),
            lateral_offset_abs: info.lateral_offset_abs,
        }
    }
}

impl Default for EnvSnapshot {
    fn default() -> Self {
        Self {
            ego_speed: 25.0,
            speed_min: 20.0,
            speed_max: 30.0,
            lane_index: 0.0,
            lanes_count: 3.0,
            on_rightmost_lane: 0.0,
            collided: 0.0,
            gap_front: crate::sim::NO_LEADER_GAP,
            front_speed_delta: 0.0,
            action_code: 1.0,
            lateral_offset_abs: 0.0,
        }
    }
}

/// A parsed reward function: original text, syntax tree, and content hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RewardProgram {
    source: String,
    ast: Expr,
    fingerprint: String,
}

impl PartialEq for RewardProgram {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source && self.ast == other.ast
    }
}

impl RewardProgram {
    /// Parses and typechecks.
    pub fn compile(source: &str) -> Result<Self, DslError> {
        let program = parse(source)?;
        typecheck(&program)?;
        Ok(program)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// Lowercase hex SHA-256 of [`Self::canonical`].
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Pretty-printed form: comments and formatting stripped.
    pub fn canonical(&self) -> String {
        self.ast.pretty()
    }
}

impl TryFrom<String> for RewardProgram {
    type Error = DslError;

    fn try_from(source: String) -> Result<Self, Self::Error> {
        Self::compile(&source)
    }
}

impl From<RewardProgram> for String {
    fn from(program: RewardProgram) -> Self {
        program.source
    }
}

/// Lexes and parses; does not typecheck.
pub fn parse(source: &str) -> Result<RewardProgram, DslError> {
    let ast = parser::parse_expr(source)?;
    let fingerprint = hex::encode(Sha256::digest(ast.pretty().as_bytes()));
    Ok(RewardProgram {
        source: source.to_string(),
        ast,
        fingerprint,
    })
}

/// [`parse`] over raw bytes; invalid UTF-8 is a lex error.
pub fn parse_bytes(bytes: &[u8]) -> Result<RewardProgram, DslError> {
    match std::str::from_utf8(bytes) {
        Ok(source) => parse(source),
        Err(e) => {
            let at = e.valid_up_to();
            Err(DslError::new(
                DslErrorKind::Lex,
                Span::new(at, at + e.error_len().unwrap_or(1)),
                "invalid UTF-8",
            ))
        }
    }
}

pub fn typecheck(program: &RewardProgram) -> Result<(), DslError> {
    check::check_program(&program.ast)
}

/// Evaluates a typechecked program. Division by zero, square roots of
/// negatives, inverted clamp bounds and non-finite intermediates are
/// `eval-domain` errors.
pub fn evaluate(program: &RewardProgram, snapshot: &EnvSnapshot) -> Result<f64, DslError> {
    eval::eval_scalar(&program.ast, snapshot)
}

pub const HUMAN_REWARD_SOURCE: &str = "\
# Hand-designed baseline: reach a high speed, keep right, avoid collisions.
# -1 on collision; otherwise 0.4 * normalized speed + 0.1 * right lane,
# rescaled from [0, 0.5] to [0, 1].
let speed_term = clamp((ego_speed - speed_min) / (speed_max - speed_min), 0, 1) in
if collided > 0.5 then -1
else (0.4 * speed_term + 0.1 * on_rightmost_lane) / 0.5
";

pub fn builtin_human_reward() -> RewardProgram {
    RewardProgram::compile(HUMAN_REWARD_SOURCE).expect("built-in reward compiles")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_source(source: &str, snapshot: &EnvSnapshot) -> Result<f64, DslError> {
        evaluate(&RewardProgram::compile(source)?, snapshot)
    }

    #[test]
    fn typecheck_cases() {
        assert!(RewardProgram::compile("ego_speed").is_ok());
        let err = RewardProgram::compile("unknown_var + 1").unwrap_err();
        assert_eq!(err.kind, DslErrorKind::Type);
        assert!(err.message.contains("unknown_var"));
        let err = RewardProgram::compile("(ego_speed > 1) + 2").unwrap_err();
        assert_eq!(err.kind, DslErrorKind::Type);
        assert_eq!(
            RewardProgram::compile("ego_speed > 1").unwrap_err().kind,
            DslErrorKind::Type
        );
        assert_eq!(
            RewardProgram::compile("if 1 then 2 else 3").unwrap_err().kind,
            DslErrorKind::Type
        );
        assert_eq!(
            RewardProgram::compile("if collided > 0 then 1 else collided > 0")
                .unwrap_err()
                .kind,
            DslErrorKind::Type
        );
        assert!(RewardProgram::compile("let fast = ego_speed > 25 in if fast then 1 else 0").is_ok());
        assert!(RewardProgram::compile("let x = 1 in x + y").is_err());
    }

    #[test]
    fn evaluation_examples() {
        let snap = EnvSnapshot::default();
        assert_eq!(eval_source("1.0", &snap).unwrap(), 1.0);
        let snap = EnvSnapshot {
            ego_speed: 25.0,
            speed_max: 30.0,
            ..EnvSnapshot::default()
        };
        let value = eval_source("clamp(ego_speed/speed_max, 0, 1)", &snap).unwrap();
        assert!((value - 25.0 / 30.0).abs() < 1e-15);
        assert_eq!(eval_source("let a = 2 in let a = a * 3 in a + 1", &snap).unwrap(), 7.0);
        assert_eq!(eval_source("max(min(3, 4), abs(-5))", &snap).unwrap(), 5.0);
        assert_eq!(
            eval_source("if not (1 < 2) or 2 != 2 then 1 else 0", &snap).unwrap(),
            0.0
        );
    }

    #[test]
    fn domain_errors_are_reported() {
        let snap = EnvSnapshot {
            lane_index: 0.0,
            ..EnvSnapshot::default()
        };
        for source in [
            "1 / lane_index",
            "sqrt(-1)",
            "exp(1000)",
            "clamp(1, 2, 0)",
            "1e308 * 10",
        ] {
            let err = eval_source(source, &snap).unwrap_err();
            assert_eq!(err.kind, DslErrorKind::EvalDomain, "{source}");
        }
        // The untaken branch is never evaluated.
        assert_eq!(
            eval_source("if lane_index > 0 then 1 / lane_index else 0", &snap).unwrap(),
            0.0
        );
    }

    #[test]
    fn human_reward_values() {
        let human = builtin_human_reward();
        let base = EnvSnapshot {
            speed_min: 20.0,
            speed_max: 30.0,
            ..EnvSnapshot::default()
        };
        let crashed = EnvSnapshot {
            collided: 1.0,
            ego_speed: 30.0,
            on_rightmost_lane: 1.0,
            ..base
        };
        assert_eq!(evaluate(&human, &crashed).unwrap(), -1.0);
        let best = EnvSnapshot {
            ego_speed: 30.0,
            on_rightmost_lane: 1.0,
            ..base
        };
        assert_eq!(evaluate(&human, &best).unwrap(), 1.0);
        let slow_left = EnvSnapshot {
            ego_speed: 20.0,
            on_rightmost_lane: 0.0,
            ..base
        };
        assert_eq!(evaluate(&human, &slow_left).unwrap(), 0.0);
        // (0.4·0.5 + 0.1·1) / 0.5 = 0.6
        let mid = EnvSnapshot {
            ego_speed: 25.0,
            on_rightmost_lane: 1.0,
            ..base
        };
        assert!((evaluate(&human, &mid).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn error_rendering_points_at_source() {
        let source = "let x = 1 in\nx + $";
        let err = parse(source).unwrap_err();
        assert_eq!(err.line_col(source), (2, 5));
        assert!(err.render(source).contains("line 2, column 5"));
    }

    #[test]
    fn fingerprint_ignores_formatting() {
        let a = parse("1+2 # note").unwrap();
        let b = parse("(1) + 2").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        assert!(a
            .fingerprint()
            .chars()
            .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_ne!(a.fingerprint(), parse("2 + 1").unwrap().fingerprint());
    }

    #[test]
    fn serde_uses_source_text() {
        let human = builtin_human_reward();
        let json = serde_json::to_string(&human).unwrap();
        let back: RewardProgram = serde_json::from_str(&json).unwrap();
        assert_eq!(back, human);
        assert!(serde_json::from_str::<RewardProgram>("\"1 +\"").is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(ExprKind::Number),
            proptest::sample::select(vec!["ego_speed", "gap_front", "collided", "x"])
                .prop_map(|n| ExprKind::Var(n.to_string())),
        ]
        .prop_map(|kind| Expr::new(kind, Span::default()));
        leaf.prop_recursive(6, 48, 3, |inner| {
            let boxed = |e: Expr| Box::new(e);
            prop_oneof![
                (
                    proptest::sample::select(vec![UnaryOp::Neg, UnaryOp::Not]),
                    inner.clone()
                )
                    .prop_map(move |(op, e)| ExprKind::Unary(op, boxed(e))),
                (
                    proptest::sample::select(vec![
                        BinaryOp::Add,
                        BinaryOp::Sub,
                        BinaryOp::Mul,
                        BinaryOp::Div,
                        BinaryOp::Lt,
                        BinaryOp::Le,
                        BinaryOp::Gt,
                        BinaryOp::Ge,
                        BinaryOp::Eq,
                        BinaryOp::Ne,
                        BinaryOp::And,
                        BinaryOp::Or,
                    ]),
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(move |(op, a, b)| ExprKind::Binary(op, boxed(a), boxed(b))),
                (
                    proptest::sample::select(Function::ALL.to_vec()),
                    proptest::collection::vec(inner.clone(), 3)
                )
                    .prop_map(|(f, mut args)| {
                        args.truncate(f.arity());
                        ExprKind::Call(f, args)
                    }),
                (inner.clone(), inner.clone(), inner.clone()).prop_map(move |(c, t, e)| ExprKind::If {
                    cond: boxed(c),
                    then_branch: boxed(t),
                    else_branch: boxed(e),
                }),
                (inner.clone(), inner).prop_map(move |(v, b)| ExprKind::Let {
                    name: "x".into(),
                    value: boxed(v),
                    body: boxed(b),
                }),
            ]
            .prop_map(|kind| Expr::new(kind, Span::default()))
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trips(expr in arb_expr()) {
            let text = expr.pretty();
            let reparsed = parser::parse_expr(&text).unwrap();
            prop_assert_eq!(&reparsed, &expr, "{}", text);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok(program) = parse_bytes(&bytes) {
                if typecheck(&program).is_ok() {
                    let _ = evaluate(&program, &EnvSnapshot::default());
                }
            }
        }

        #[test]
        fn evaluation_is_pure(speed in 0.0f64..40.0, gap in 0.1f64..1000.0) {
            let human = builtin_human_reward();
            let snap = EnvSnapshot { ego_speed: speed, gap_front: gap, ..EnvSnapshot::default() };
            let a = evaluate(&human, &snap).unwrap();
            let b = evaluate(&human, &snap).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
