use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A propositional formula over single-letter atoms.
///
/// Equality is structural on the authored form. Use [`Expr::norm_key`] when
/// two statements should match up to associativity and commutativity of
/// `&` and `|`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expr {
    Var(char),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Implies(Box<Expr>, Box<Expr>),
    Iff(Box<Expr>, Box<Expr>),
}

/// Canonical matching key of an expression: and/or operands flattened and
/// sorted, everything else kept as authored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NormKey(pub String);

impl fmt::Display for NormKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn var(c: char) -> Expr {
        Expr::Var(c)
    }

    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Expr, b: Expr) -> Expr {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Expr, b: Expr) -> Expr {
        Expr::Implies(Box::new(a), Box::new(b))
    }

    pub fn iff(a: Expr, b: Expr) -> Expr {
        Expr::Iff(Box::new(a), Box::new(b))
    }

    /// Number of nodes in the formula tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Var(_) => 1,
            Expr::Not(a) => 1 + a.size(),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) | Expr::Iff(a, b) => {
                1 + a.size() + b.size()
            }
        }
    }

    pub fn vars(&self) -> BTreeSet<char> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<char>) {
        match self {
            Expr::Var(c) => {
                out.insert(*c);
            }
            Expr::Not(a) => a.collect_vars(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) | Expr::Iff(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// All subformulas, including the formula itself, in pre-order.
    pub fn subformulas(&self) -> Vec<&Expr> {
        let mut out = Vec::new();
        self.collect_subformulas(&mut out);
        out
    }

    fn collect_subformulas<'a>(&'a self, out: &mut Vec<&'a Expr>) {
        out.push(self);
        match self {
            Expr::Var(_) => {}
            Expr::Not(a) => a.collect_subformulas(out),
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) | Expr::Iff(a, b) => {
                a.collect_subformulas(out);
                b.collect_subformulas(out);
            }
        }
    }

    /// Evaluates under an assignment given as a bit per letter (`a` = bit 0).
    pub fn eval(&self, assignment: u32) -> bool {
        match self {
            Expr::Var(c) => assignment & (1 << (*c as u32 - 'a' as u32)) != 0,
            Expr::Not(a) => !a.eval(assignment),
            Expr::And(a, b) => a.eval(assignment) && b.eval(assignment),
            Expr::Or(a, b) => a.eval(assignment) || b.eval(assignment),
            Expr::Implies(a, b) => !a.eval(assignment) || b.eval(assignment),
            Expr::Iff(a, b) => a.eval(assignment) == b.eval(assignment),
        }
    }

    pub fn norm_key(&self) -> NormKey {
        let mut s = String::new();
        self.write_norm(&mut s);
        NormKey(s)
    }

    /// True when both expressions are equal up to and/or flattening and
    /// operand order.
    pub fn matches(&self, other: &Expr) -> bool {
        self == other || self.norm_key() == other.norm_key()
    }

    fn write_norm(&self, out: &mut String) {
        match self {
            Expr::Var(c) => out.push(*c),
            Expr::Not(a) => {
                out.push('!');
                a.write_norm(out);
            }
            Expr::And(..) | Expr::Or(..) => {
                let (tag, is_and) = match self {
                    Expr::And(..) => ('&', true),
                    _ => ('|', false),
                };
                let mut operands = Vec::new();
                self.flatten(is_and, &mut operands);
                let mut keys: Vec<String> = operands
                    .into_iter()
                    .map(|e| {
                        let mut k = String::new();
                        e.write_norm(&mut k);
                        k
                    })
                    .collect();
                keys.sort();
                out.push(tag);
                out.push('(');
                out.push_str(&keys.join(","));
                out.push(')');
            }
            Expr::Implies(a, b) => {
                out.push_str(">(");
                a.write_norm(out);
                out.push(',');
                b.write_norm(out);
                out.push(')');
            }
            Expr::Iff(a, b) => {
                out.push_str("=(");
                a.write_norm(out);
                out.push(',');
                b.write_norm(out);
                out.push(')');
            }
        }
    }

    fn flatten<'a>(&'a self, is_and: bool, out: &mut Vec<&'a Expr>) {
        match self {
            Expr::And(a, b) if is_and => {
                a.flatten(is_and, out);
                b.flatten(is_and, out);
            }
            Expr::Or(a, b) if !is_and => {
                a.flatten(is_and, out);
                b.flatten(is_and, out);
            }
            other => out.push(other),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Iff(..) => 1,
            Expr::Implies(..) => 2,
            Expr::Or(..) => 3,
            Expr::And(..) => 4,
            Expr::Not(_) => 5,
            Expr::Var(_) => 6,
        }
    }
}

/// Truth-table entailment over the atoms that occur in the inputs.
pub fn entails(premises: &[&Expr], conclusion: &Expr) -> bool {
    let mut atoms = BTreeSet::new();
    for p in premises {
        p.collect_vars(&mut atoms);
    }
    conclusion.collect_vars(&mut atoms);
    let atoms: Vec<char> = atoms.into_iter().collect();
    for row in 0u32..(1 << atoms.len()) {
        let mut assignment = 0u32;
        for (i, c) in atoms.iter().enumerate() {
            if row & (1 << i) != 0 {
                assignment |= 1 << (*c as u32 - 'a' as u32);
            }
        }
        if premises.iter().all(|p| p.eval(assignment)) && !conclusion.eval(assignment) {
            return false;
        }
    }
    true
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(c) => write!(f, "{c}"),
            Expr::Not(a) => {
                if a.precedence() < 5 {
                    write!(f, "!({a})")
                } else {
                    write!(f, "!{a}")
                }
            }
            Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) | Expr::Iff(a, b) => {
                let prec = self.precedence();
                let (op, right_assoc) = match self {
                    Expr::And(..) => ("&", false),
                    Expr::Or(..) => ("|", false),
                    Expr::Implies(..) => ("->", true),
                    _ => ("<->", false),
                };
                let left_parens =
                    a.precedence() < prec || (a.precedence() == prec && right_assoc);
                let right_parens =
                    b.precedence() < prec || (b.precedence() == prec && !right_assoc);
                if left_parens {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {op} ")?;
                if right_parens {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{self}`")
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_expression(&text).map_err(serde::de::Error::custom)
    }
}

impl FromStr for Expr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expression(s)
    }
}

/// Syntax error; `position` is the 1-based character column of the
/// offending token (one past the end for truncated input).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at position {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Atom(char),
    Not,
    And,
    Or,
    Implies,
    Iff,
    LParen,
    RParen,
}

impl Token {
    fn describe(self) -> String {
        match self {
            Token::Atom(c) => format!("atom `{c}`"),
            Token::Not => "`!`".into(),
            Token::And => "`&`".into(),
            Token::Or => "`|`".into(),
            Token::Implies => "`->`".into(),
            Token::Iff => "`<->`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
        }
    }
}

fn tokenize(text: &str) -> Result<(Vec<(Token, usize)>, usize), ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let pos = i + 1;
        let c = chars[i];
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            'a'..='z' => Token::Atom(c),
            '!' => Token::Not,
            '&' => Token::And,
            '|' => Token::Or,
            '(' => Token::LParen,
            ')' => Token::RParen,
            '-' if chars.get(i + 1) == Some(&'>') => {
                i += 1;
                Token::Implies
            }
            '<' if chars.get(i + 1) == Some(&'-') && chars.get(i + 2) == Some(&'>') => {
                i += 2;
                Token::Iff
            }
            other => {
                return Err(ParseError {
                    position: pos,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        tokens.push((tok, pos));
        i += 1;
    }
    Ok((tokens, chars.len() + 1))
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    cursor: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.cursor).map(|t| t.0)
    }

    fn position(&self) -> usize {
        self.tokens.get(self.cursor).map_or(self.end, |t| t.1)
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            position: self.position(),
            message: message.into(),
        }
    }

    fn eat(&mut self, tok: Token) -> bool {
        if self.peek() == Some(tok) {
            self.cursor += 1;
            true
        } else {
            false
        }
    }

    fn iff(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.implication()?;
        while self.eat(Token::Iff) {
            let rhs = self.implication()?;
            lhs = Expr::iff(lhs, rhs);
        }
        Ok(lhs)
    }

    fn implication(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.disjunction()?;
        if self.eat(Token::Implies) {
            let rhs = self.implication()?;
            return Ok(Expr::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.conjunction()?;
        while self.eat(Token::Or) {
            let rhs = self.conjunction()?;
            lhs = Expr::or(lhs, rhs);
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while self.eat(Token::And) {
            let rhs = self.unary()?;
            lhs = Expr::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Token::Not) => {
                self.cursor += 1;
                Ok(Expr::not(self.unary()?))
            }
            Some(Token::Atom(c)) => {
                self.cursor += 1;
                Ok(Expr::Var(c))
            }
            Some(Token::LParen) => {
                self.cursor += 1;
                let inner = self.iff()?;
                if !self.eat(Token::RParen) {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Some(tok) => Err(self.error(format!("expected operand, found {}", tok.describe()))),
            None => Err(self.error("expected operand, found end of input")),
        }
    }
}

/// Parses the textual grammar: atoms `a`..`z`, `!`, `&`, `|`, `->`, `<->`
/// and parentheses. Precedence from tightest: `!`, `&`, `|`, `->`, `<->`;
/// `->` associates to the right.
pub fn parse_expression(text: &str) -> Result<Expr, ParseError> {
    let (tokens, end) = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        cursor: 0,
        end,
    };
    let expr = parser.iff()?;
    if let Some(tok) = parser.peek() {
        return Err(parser.error(format!("unexpected {}", tok.describe())));
    }
    Ok(expr)
}
