use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::expr::Expr;
use super::LogicError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Inference,
    Replacement,
}

/// The rule palette offered by the tutor.
///
/// Inference rules act on whole statements. Replacement rules rewrite any
/// subformula of their single premise, in either direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    ModusPonens,
    ModusTollens,
    DisjunctiveSyllogism,
    HypotheticalSyllogism,
    Simplification,
    Conjunction,
    Addition,
    ConstructiveDilemma,
    DoubleNegation,
    DeMorgan,
    Commutativity,
    Associativity,
    Distribution,
    Transposition,
    MaterialImplication,
    MaterialEquivalence,
    Exportation,
    Tautology,
}

impl Rule {
    pub const ALL: [Rule; 18] = [
        Rule::ModusPonens,
        Rule::ModusTollens,
        Rule::DisjunctiveSyllogism,
        Rule::HypotheticalSyllogism,
        Rule::Simplification,
        Rule::Conjunction,
        Rule::Addition,
        Rule::ConstructiveDilemma,
        Rule::DoubleNegation,
        Rule::DeMorgan,
        Rule::Commutativity,
        Rule::Associativity,
        Rule::Distribution,
        Rule::Transposition,
        Rule::MaterialImplication,
        Rule::MaterialEquivalence,
        Rule::Exportation,
        Rule::Tautology,
    ];

    /// Short code used in files and on the wire.
    pub fn code(self) -> &'static str {
        match self {
            Rule::ModusPonens => "MP",
            Rule::ModusTollens => "MT",
            Rule::DisjunctiveSyllogism => "DS",
            Rule::HypotheticalSyllogism => "HS",
            Rule::Simplification => "Simp",
            Rule::Conjunction => "Conj",
            Rule::Addition => "Add",
            Rule::ConstructiveDilemma => "CD",
            Rule::DoubleNegation => "DN",
            Rule::DeMorgan => "DeM",
            Rule::Commutativity => "Comm",
            Rule::Associativity => "Assoc",
            Rule::Distribution => "Dist",
            Rule::Transposition => "Trans",
            Rule::MaterialImplication => "Impl",
            Rule::MaterialEquivalence => "Equiv",
            Rule::Exportation => "Exp",
            Rule::Tautology => "Taut",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::ModusPonens => "Modus Ponens",
            Rule::ModusTollens => "Modus Tollens",
            Rule::DisjunctiveSyllogism => "Disjunctive Syllogism",
            Rule::HypotheticalSyllogism => "Hypothetical Syllogism",
            Rule::Simplification => "Simplification",
            Rule::Conjunction => "Conjunction",
            Rule::Addition => "Addition",
            Rule::ConstructiveDilemma => "Constructive Dilemma",
            Rule::DoubleNegation => "Double Negation",
            Rule::DeMorgan => "De Morgan",
            Rule::Commutativity => "Commutativity",
            Rule::Associativity => "Associativity",
            Rule::Distribution => "Distribution",
            Rule::Transposition => "Transposition",
            Rule::MaterialImplication => "Material Implication",
            Rule::MaterialEquivalence => "Material Equivalence",
            Rule::Exportation => "Exportation",
            Rule::Tautology => "Tautology",
        }
    }

    pub fn kind(self) -> RuleKind {
        match self {
            Rule::ModusPonens
            | Rule::ModusTollens
            | Rule::DisjunctiveSyllogism
            | Rule::HypotheticalSyllogism
            | Rule::Simplification
            | Rule::Conjunction
            | Rule::Addition
            | Rule::ConstructiveDilemma => RuleKind::Inference,
            _ => RuleKind::Replacement,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Rule::ModusPonens
            | Rule::ModusTollens
            | Rule::DisjunctiveSyllogism
            | Rule::HypotheticalSyllogism
            | Rule::Conjunction
            | Rule::ConstructiveDilemma => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Rule {
    type Err = LogicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted: String = s.chars().filter(|c| c.is_alphanumeric()).collect();
        Rule::ALL
            .into_iter()
            .find(|r| {
                r.code().eq_ignore_ascii_case(&wanted)
                    || r.name().replace(' ', "").eq_ignore_ascii_case(&wanted)
            })
            .ok_or_else(|| LogicError::UnknownRule(s.to_string()))
    }
}

impl Serialize for Rule {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Every conclusion `rule` licenses from `premises`.
///
/// Two-premise rules accept their premises in either order. Addition draws
/// its new disjunct from `addends`; other rules ignore it. Replacement
/// rules rewrite at every position of the premise, so one premise can give
/// several conclusions. A non-matching pattern yields an empty list.
pub fn apply_rule(rule: Rule, premises: &[&Expr], addends: &[Expr]) -> Result<Vec<Expr>, LogicError> {
    if premises.len() != rule.arity() {
        return Err(LogicError::Arity {
            rule,
            expected: rule.arity(),
            got: premises.len(),
        });
    }
    let mut out = Vec::new();
    match rule.kind() {
        RuleKind::Inference => {
            if premises.len() == 2 {
                infer(rule, premises[0], premises[1], addends, &mut out);
                infer(rule, premises[1], premises[0], addends, &mut out);
            } else {
                infer_unary(rule, premises[0], addends, &mut out);
            }
        }
        RuleKind::Replacement => {
            rewrite_everywhere(premises[0], &|e, acc| rewrite_root(rule, e, acc), &mut out);
        }
    }
    let mut unique: Vec<Expr> = Vec::with_capacity(out.len());
    for e in out {
        if !unique.contains(&e) {
            unique.push(e);
        }
    }
    Ok(unique)
}

/// Whether `derived` is a correct application of `rule` to `premises`,
/// matching conclusions up to and/or reordering.
pub fn derives(rule: Rule, premises: &[&Expr], derived: &Expr) -> Result<bool, LogicError> {
    let addends: Vec<Expr> = match (rule, derived) {
        (Rule::Addition, Expr::Or(a, b)) => vec![(**a).clone(), (**b).clone()],
        _ => Vec::new(),
    };
    let target = derived.norm_key();
    Ok(apply_rule(rule, premises, &addends)?
        .iter()
        .any(|c| c.norm_key() == target))
}

fn infer(rule: Rule, x: &Expr, y: &Expr, _addends: &[Expr], out: &mut Vec<Expr>) {
    match rule {
        Rule::ModusPonens => {
            if let Expr::Implies(a, b) = x {
                if a.matches(y) {
                    out.push((**b).clone());
                }
            }
        }
        Rule::ModusTollens => {
            if let (Expr::Implies(a, b), Expr::Not(nb)) = (x, y) {
                if b.matches(nb) {
                    out.push(Expr::not((**a).clone()));
                }
            }
        }
        Rule::DisjunctiveSyllogism => {
            if let (Expr::Or(a, b), Expr::Not(n)) = (x, y) {
                if a.matches(n) {
                    out.push((**b).clone());
                }
                if b.matches(n) {
                    out.push((**a).clone());
                }
            }
        }
        Rule::HypotheticalSyllogism => {
            if let (Expr::Implies(a, b), Expr::Implies(b2, c)) = (x, y) {
                if b.matches(b2) {
                    out.push(Expr::implies((**a).clone(), (**c).clone()));
                }
            }
        }
        Rule::Conjunction => out.push(Expr::and(x.clone(), y.clone())),
        Rule::ConstructiveDilemma => {
            if let (Expr::And(l, r), Expr::Or(a2, c2)) = (x, y) {
                if let (Expr::Implies(a, b), Expr::Implies(c, d)) = (&**l, &**r) {
                    if a.matches(a2) && c.matches(c2) {
                        out.push(Expr::or((**b).clone(), (**d).clone()));
                    }
                    if a.matches(c2) && c.matches(a2) {
                        out.push(Expr::or((**b).clone(), (**d).clone()));
                    }
                }
            }
        }
        _ => {}
    }
}

fn infer_unary(rule: Rule, x: &Expr, addends: &[Expr], out: &mut Vec<Expr>) {
    match rule {
        Rule::Simplification => {
            if let Expr::And(a, b) = x {
                out.push((**a).clone());
                out.push((**b).clone());
            }
        }
        Rule::Addition => {
            for q in addends {
                out.push(Expr::or(x.clone(), q.clone()));
            }
        }
        _ => {}
    }
}

/// Applies `root` at the top of `e` and at every subformula, rebuilding
/// the surrounding context for each rewrite.
fn rewrite_everywhere(e: &Expr, root: &dyn Fn(&Expr, &mut Vec<Expr>), out: &mut Vec<Expr>) {
    root(e, out);
    match e {
        Expr::Var(_) => {}
        Expr::Not(a) => {
            let mut inner = Vec::new();
            rewrite_everywhere(a, root, &mut inner);
            out.extend(inner.into_iter().map(Expr::not));
        }
        Expr::And(a, b) | Expr::Or(a, b) | Expr::Implies(a, b) | Expr::Iff(a, b) => {
            let rebuild = |l: Expr, r: Expr| match e {
                Expr::And(..) => Expr::and(l, r),
                Expr::Or(..) => Expr::or(l, r),
                Expr::Implies(..) => Expr::implies(l, r),
                _ => Expr::iff(l, r),
            };
            let mut left = Vec::new();
            rewrite_everywhere(a, root, &mut left);
            out.extend(left.into_iter().map(|l| rebuild(l, (**b).clone())));
            let mut right = Vec::new();
            rewrite_everywhere(b, root, &mut right);
            out.extend(right.into_iter().map(|r| rebuild((**a).clone(), r)));
        }
    }
}

fn rewrite_root(rule: Rule, e: &Expr, out: &mut Vec<Expr>) {
    use Expr::*;
    match rule {
        Rule::DoubleNegation => {
            out.push(Expr::not(Expr::not(e.clone())));
            if let Not(inner) = e {
                if let Not(a) = &**inner {
                    out.push((**a).clone());
                }
            }
        }
        Rule::DeMorgan => match e {
            Not(inner) => match &**inner {
                And(a, b) => out.push(Expr::or(Expr::not((**a).clone()), Expr::not((**b).clone()))),
                Or(a, b) => out.push(Expr::and(Expr::not((**a).clone()), Expr::not((**b).clone()))),
                _ => {}
            },
            Or(a, b) => {
                if let (Not(x), Not(y)) = (&**a, &**b) {
                    out.push(Expr::not(Expr::and((**x).clone(), (**y).clone())));
                }
            }
            And(a, b) => {
                if let (Not(x), Not(y)) = (&**a, &**b) {
                    out.push(Expr::not(Expr::or((**x).clone(), (**y).clone())));
                }
            }
            _ => {}
        },
        Rule::Commutativity => match e {
            And(a, b) => out.push(Expr::and((**b).clone(), (**a).clone())),
            Or(a, b) => out.push(Expr::or((**b).clone(), (**a).clone())),
            _ => {}
        },
        Rule::Associativity => match e {
            And(ab, c) => {
                if let And(a, b) = &**ab {
                    out.push(Expr::and((**a).clone(), Expr::and((**b).clone(), (**c).clone())));
                }
                if let And(b2, c2) = &**c {
                    out.push(Expr::and(Expr::and((**ab).clone(), (**b2).clone()), (**c2).clone()));
                }
            }
            Or(ab, c) => {
                if let Or(a, b) = &**ab {
                    out.push(Expr::or((**a).clone(), Expr::or((**b).clone(), (**c).clone())));
                }
                if let Or(b2, c2) = &**c {
                    out.push(Expr::or(Expr::or((**ab).clone(), (**b2).clone()), (**c2).clone()));
                }
            }
            _ => {}
        },
        Rule::Distribution => match e {
            And(a, bc) => {
                if let Or(b, c) = &**bc {
                    out.push(Expr::or(
                        Expr::and((**a).clone(), (**b).clone()),
                        Expr::and((**a).clone(), (**c).clone()),
                    ));
                }
                if let Or(x, y) = &**a {
                    out.push(Expr::or(
                        Expr::and((**x).clone(), (**bc).clone()),
                        Expr::and((**y).clone(), (**bc).clone()),
                    ));
                }
                // (a | b) & (a | c)  =>  a | (b & c)
                if let (Or(a1, b), Or(a2, c)) = (&**a, &**bc) {
                    if a1.matches(a2) {
                        out.push(Expr::or((**a1).clone(), Expr::and((**b).clone(), (**c).clone())));
                    }
                }
            }
            Or(a, bc) => {
                if let And(b, c) = &**bc {
                    out.push(Expr::and(
                        Expr::or((**a).clone(), (**b).clone()),
                        Expr::or((**a).clone(), (**c).clone()),
                    ));
                }
                if let And(x, y) = &**a {
                    out.push(Expr::and(
                        Expr::or((**x).clone(), (**bc).clone()),
                        Expr::or((**y).clone(), (**bc).clone()),
                    ));
                }
                // (a & b) | (a & c)  =>  a & (b | c)
                if let (And(a1, b), And(a2, c)) = (&**a, &**bc) {
                    if a1.matches(a2) {
                        out.push(Expr::and((**a1).clone(), Expr::or((**b).clone(), (**c).clone())));
                    }
                }
            }
            _ => {}
        },
        Rule::Transposition => {
            if let Implies(a, b) = e {
                out.push(Expr::implies(Expr::not((**b).clone()), Expr::not((**a).clone())));
                if let (Not(nb), Not(na)) = (&**a, &**b) {
                    out.push(Expr::implies((**na).clone(), (**nb).clone()));
                }
            }
        }
        Rule::MaterialImplication => match e {
            Implies(a, b) => out.push(Expr::or(Expr::not((**a).clone()), (**b).clone())),
            Or(na, b) => {
                if let Not(a) = &**na {
                    out.push(Expr::implies((**a).clone(), (**b).clone()));
                }
            }
            _ => {}
        },
        Rule::MaterialEquivalence => match e {
            Iff(a, b) => {
                out.push(Expr::and(
                    Expr::implies((**a).clone(), (**b).clone()),
                    Expr::implies((**b).clone(), (**a).clone()),
                ));
                out.push(Expr::or(
                    Expr::and((**a).clone(), (**b).clone()),
                    Expr::and(Expr::not((**a).clone()), Expr::not((**b).clone())),
                ));
            }
            And(l, r) => {
                if let (Implies(a, b), Implies(b2, a2)) = (&**l, &**r) {
                    if a.matches(a2) && b.matches(b2) {
                        out.push(Expr::iff((**a).clone(), (**b).clone()));
                    }
                }
            }
            Or(l, r) => {
                if let (And(a, b), And(na, nb)) = (&**l, &**r) {
                    if let (Not(a2), Not(b2)) = (&**na, &**nb) {
                        if a.matches(a2) && b.matches(b2) {
                            out.push(Expr::iff((**a).clone(), (**b).clone()));
                        }
                    }
                }
            }
            _ => {}
        },
        Rule::Exportation => {
            if let Implies(ab, c) = e {
                if let And(a, b) = &**ab {
                    out.push(Expr::implies((**a).clone(), Expr::implies((**b).clone(), (**c).clone())));
                }
                if let Implies(b, c2) = &**c {
                    out.push(Expr::implies(Expr::and((**ab).clone(), (**b).clone()), (**c2).clone()));
                }
            }
        }
        Rule::Tautology => {
            out.push(Expr::and(e.clone(), e.clone()));
            out.push(Expr::or(e.clone(), e.clone()));
            match e {
                And(a, b) | Or(a, b) if a.matches(b) => out.push((**a).clone()),
                _ => {}
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::parse_expression;

    fn p(s: &str) -> Expr {
        parse_expression(s).unwrap()
    }

    fn apply(rule: Rule, premises: &[&str]) -> Vec<String> {
        let exprs: Vec<Expr> = premises.iter().map(|s| p(s)).collect();
        let refs: Vec<&Expr> = exprs.iter().collect();
        apply_rule(rule, &refs, &[])
            .unwrap()
            .iter()
            .map(|e| e.to_string())
            .collect()
    }

    #[test]
    fn modus_ponens() {
        assert_eq!(apply(Rule::ModusPonens, &["p -> q", "p"]), vec!["q"]);
        assert_eq!(apply(Rule::ModusPonens, &["p", "p -> q"]), vec!["q"]);
        assert!(apply(Rule::ModusPonens, &["p -> q", "r"]).is_empty());
    }

    #[test]
    fn simplification_yields_both_conjuncts() {
        assert_eq!(apply(Rule::Simplification, &["p & q"]), vec!["p", "q"]);
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let e = p("p");
        let err = apply_rule(Rule::ModusPonens, &[&e], &[]).unwrap_err();
        assert!(matches!(err, LogicError::Arity { expected: 2, got: 1, .. }));
    }

    #[test]
    fn inference_rules() {
        assert_eq!(apply(Rule::ModusTollens, &["p -> q", "!q"]), vec!["!p"]);
        assert_eq!(apply(Rule::DisjunctiveSyllogism, &["p | q", "!p"]), vec!["q"]);
        assert_eq!(apply(Rule::HypotheticalSyllogism, &["p -> q", "q -> r"]), vec!["p -> r"]);
        assert_eq!(
            apply(Rule::ConstructiveDilemma, &["(p -> q) & (r -> s)", "p | r"]),
            vec!["q | s"]
        );
        assert_eq!(apply(Rule::Conjunction, &["p", "q"]), vec!["p & q", "q & p"]);
    }

    #[test]
    fn replacement_rewrites_inner_positions() {
        let out = apply(Rule::MaterialImplication, &["r & (p -> q)"]);
        assert_eq!(out, vec!["r & (!p | q)"]);
        let out = apply(Rule::DeMorgan, &["!(p | q)"]);
        assert_eq!(out, vec!["!p & !q"]);
        let out = apply(Rule::Exportation, &["p & q -> r"]);
        assert_eq!(out, vec!["p -> q -> r"]);
    }

    #[test]
    fn addition_uses_supplied_disjunct() {
        let prem = p("p");
        let out = apply_rule(Rule::Addition, &[&prem], &[p("q")]).unwrap();
        assert_eq!(out, vec![p("p | q")]);
        assert!(derives(Rule::Addition, &[&prem], &p("q | p")).unwrap());
        assert!(!derives(Rule::Addition, &[&prem], &p("q | r")).unwrap());
    }

    #[test]
    fn derives_matches_modulo_commutativity() {
        let a = p("p");
        let b = p("q");
        assert!(derives(Rule::Conjunction, &[&a, &b], &p("q & p")).unwrap());
        assert!(!derives(Rule::Conjunction, &[&a, &b], &p("p | q")).unwrap());
    }

    #[test]
    fn rule_codes_round_trip() {
        for r in Rule::ALL {
            assert_eq!(r.code().parse::<Rule>().unwrap(), r);
            assert_eq!(r.name().parse::<Rule>().unwrap(), r);
        }
        assert!("Bogus".parse::<Rule>().is_err());
    }
}
