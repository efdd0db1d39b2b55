//! Subgroup filter expressions such as `ER=positive AND HER2=negative`.
//!
//! Grammar (keywords and field names are case-insensitive):
//!
//! ```text
//! expr   := term ("OR" term)*
//! term   := factor ("AND" factor)*
//! factor := "NOT" factor | "(" expr ")" | field op value
//! op     := "=" | "!=" | "<" | "<=" | ">" | ">="
//! ```
//!
//! Categorical fields compare case-insensitively and only support `=` and
//! `!=`. Numeric fields (`age`, `grade`, `oncotype`) support every operator;
//! a subject missing the value never matches a comparison on it.

use std::fmt;

use prognos_core::domain::SubjectRecord;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Er,
    Pr,
    Her2,
    TStage,
    NStage,
    Idc,
    Ilc,
    Race,
    Dataset,
    Age,
    Grade,
    Oncotype,
}

impl Field {
    fn parse(s: &str) -> Option<Field> {
        Some(match s.to_ascii_lowercase().as_str() {
            "er" => Field::Er,
            "pr" => Field::Pr,
            "her2" => Field::Her2,
            "t_stage" | "t" => Field::TStage,
            "n_stage" | "n" => Field::NStage,
            "idc" => Field::Idc,
            "ilc" => Field::Ilc,
            "race" => Field::Race,
            "dataset" | "dataset_id" => Field::Dataset,
            "age" => Field::Age,
            "grade" => Field::Grade,
            "oncotype" | "oncotype_score" => Field::Oncotype,
            _ => return None,
        })
    }

    fn is_numeric(self) -> bool {
        matches!(self, Field::Age | Field::Grade | Field::Oncotype)
    }

    fn text(self, s: &SubjectRecord) -> Option<String> {
        let c = &s.clinical;
        Some(match self {
            Field::Er => c.er.to_string(),
            Field::Pr => c.pr.to_string(),
            Field::Her2 => c.her2.to_string(),
            Field::TStage => c.t_stage.to_string(),
            Field::NStage => c.n_stage.to_string(),
            Field::Idc => c.idc.to_string(),
            Field::Ilc => c.ilc.to_string(),
            Field::Race => c.race?.to_string(),
            Field::Dataset => s.dataset_id.clone(),
            _ => return None,
        })
    }

    fn number(self, s: &SubjectRecord) -> Option<f64> {
        let c = &s.clinical;
        match self {
            Field::Age => Some(c.age),
            Field::Grade => c.grade.map(f64::from),
            Field::Oncotype => c.oncotype_score,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Compare { field: Field, op: Op, value: Value },
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
}

impl Expr {
    pub fn matches(&self, s: &SubjectRecord) -> bool {
        match self {
            Expr::And(a, b) => a.matches(s) && b.matches(s),
            Expr::Or(a, b) => a.matches(s) || b.matches(s),
            Expr::Not(a) => !a.matches(s),
            Expr::Compare { field, op, value } => match value {
                Value::Number(v) => field.number(s).is_some_and(|x| match op {
                    Op::Eq => x == *v,
                    Op::Ne => x != *v,
                    Op::Lt => x < *v,
                    Op::Le => x <= *v,
                    Op::Gt => x > *v,
                    Op::Ge => x >= *v,
                }),
                Value::Text(v) => field.text(s).is_some_and(|x| match op {
                    Op::Eq => x.eq_ignore_ascii_case(v),
                    _ => !x.eq_ignore_ascii_case(v),
                }),
            },
        }
    }

    /// Indices of matching subjects, in input order.
    pub fn select(&self, subjects: &[SubjectRecord]) -> Vec<usize> {
        subjects.iter().enumerate().filter(|(_, s)| self.matches(s)).map(|(i, _)| i).collect()
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Op(Op),
    Open,
    Close,
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = input.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match c {
            _ if c.is_whitespace() => i += 1,
            '(' => {
                out.push(Token::Open);
                i += 1;
            }
            ')' => {
                out.push(Token::Close);
                i += 1;
            }
            '=' => {
                out.push(Token::Op(Op::Eq));
                i += if next == Some('=') { 2 } else { 1 };
            }
            '!' if next == Some('=') => {
                out.push(Token::Op(Op::Ne));
                i += 2;
            }
            '<' | '>' => {
                let op = match (c, next == Some('=')) {
                    ('<', true) => Op::Le,
                    ('<', false) => Op::Lt,
                    ('>', true) => Op::Ge,
                    _ => Op::Gt,
                };
                out.push(Token::Op(op));
                i += if next == Some('=') { 2 } else { 1 };
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !"()=!<>".contains(chars[i]) {
                    i += 1;
                }
                if start == i {
                    return Err(CliError::Validation(format!("subgroup: unexpected `{c}` at {start}")));
                }
                out.push(Token::Word(chars[start..i].iter().collect()));
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

fn err(msg: impl Into<String>) -> CliError {
    CliError::Validation(format!("subgroup: {}", msg.into()))
}

impl Parser {
    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.tokens.get(self.pos), Some(Token::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut left = self.term()?;
        while self.peek_keyword("or") {
            self.pos += 1;
            left = Expr::Or(Box::new(left), Box::new(self.term()?));
        }
        Ok(left)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut left = self.factor()?;
        while self.peek_keyword("and") {
            self.pos += 1;
            left = Expr::And(Box::new(left), Box::new(self.factor()?));
        }
        Ok(left)
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.peek_keyword("not") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.factor()?)));
        }
        match self.tokens.get(self.pos).cloned() {
            Some(Token::Open) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.tokens.get(self.pos) != Some(&Token::Close) {
                    return Err(err("missing `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Token::Word(name)) => {
                let field = Field::parse(&name).ok_or_else(|| err(format!("unknown field `{name}`")))?;
                let op = match self.tokens.get(self.pos + 1) {
                    Some(Token::Op(op)) => *op,
                    _ => return Err(err(format!("expected operator after `{name}`"))),
                };
                let raw = match self.tokens.get(self.pos + 2) {
                    Some(Token::Word(v)) => v.clone(),
                    _ => return Err(err(format!("expected value after `{name} {op}`"))),
                };
                self.pos += 3;
                let value = if field.is_numeric() {
                    Value::Number(raw.parse().map_err(|_| err(format!("`{raw}` is not a number")))?)
                } else {
                    if !matches!(op, Op::Eq | Op::Ne) {
                        return Err(err(format!("`{op}` needs a numeric field")));
                    }
                    Value::Text(raw)
                };
                Ok(Expr::Compare { field, op, value })
            }
            Some(t) => Err(err(format!("unexpected token {t:?}"))),
            None => Err(err("unexpected end of expression")),
        }
    }
}

pub fn parse(input: &str) -> Result<Expr> {
    let mut p = Parser { tokens: tokenize(input)?, pos: 0 };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(err(format!("trailing input at token {}", p.pos + 1)));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use prognos_core::synth::{synthesize, SynthSpec};

    fn subjects() -> Vec<SubjectRecord> {
        synthesize(&SynthSpec { seed: 2, ..Default::default() }).unwrap().subjects
    }

    #[test]
    fn hr_positive_her2_negative() {
        let s = subjects();
        let e = parse("ER=positive AND HER2=negative").unwrap();
        for i in e.select(&s) {
            assert_eq!(s[i].clinical.er.to_string(), "positive");
            assert_eq!(s[i].clinical.her2.to_string(), "negative");
        }
        assert!(!e.select(&s).is_empty());
    }

    #[test]
    fn complement_partitions() {
        let s = subjects();
        let a = parse("er = negative and (pr = negative or grade >= 3)").unwrap();
        let b = parse("NOT (er = negative and (pr = negative or grade >= 3))").unwrap();
        let (na, nb) = (a.select(&s).len(), b.select(&s).len());
        assert_eq!(na + nb, s.len());
        assert!(na > 0 && nb > 0);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["er", "er =", "foo = 1", "age = old", "er < positive", "(er = positive", "er = positive x"] {
            assert!(parse(bad).is_err(), "{bad}");
        }
    }
}
