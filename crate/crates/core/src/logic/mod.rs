//! FO+M² syntax and a brute-force evaluator.

mod parse;

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

pub use parse::{parse_formula, parse_spanned, Parsed, Span};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Index {
    One,
    N,
    Var(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    Q(String, Index),
    Eq(Index, Index),
    Leq(Index, Index),
    Geq(Index, Index),
    Bit(Index, Index),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Not(Box<Formula>),
    Exists(String, Box<Formula>),
    Forall(String, Box<Formula>),
    Maj2(String, String, Box<Formula>),
}

impl Formula {
    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }
    pub fn or(a: Formula, b: Formula) -> Formula {
        Formula::Or(Box::new(a), Box::new(b))
    }
    pub fn not(a: Formula) -> Formula {
        Formula::Not(Box::new(a))
    }
    pub fn exists(v: &str, a: Formula) -> Formula {
        Formula::Exists(v.into(), Box::new(a))
    }
    pub fn forall(v: &str, a: Formula) -> Formula {
        Formula::Forall(v.into(), Box::new(a))
    }
    pub fn maj2(i: &str, j: &str, a: Formula) -> Formula {
        Formula::Maj2(i.into(), j.into(), Box::new(a))
    }

    pub fn children(&self) -> Vec<&Formula> {
        use Formula::*;
        match self {
            Q(..) | Eq(..) | Leq(..) | Geq(..) | Bit(..) => vec![],
            And(a, b) | Or(a, b) => vec![a, b],
            Not(a) | Exists(_, a) | Forall(_, a) | Maj2(_, _, a) => vec![a],
        }
    }

    /// Nodes in pre-order (the order `Parsed::spans` uses).
    pub fn preorder(&self) -> Vec<&Formula> {
        let mut out = vec![self];
        for c in self.children() {
            out.extend(c.preorder());
        }
        out
    }

    pub fn is_atom(&self) -> bool {
        self.children().is_empty()
    }

    /// Nesting depth: atoms have depth 1.
    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    /// Every variable name mentioned (bound or free).
    pub fn variables(&self) -> BTreeSet<String> {
        let mut s = BTreeSet::new();
        for node in self.preorder() {
            match node {
                Formula::Exists(v, _) | Formula::Forall(v, _) => {
                    s.insert(v.clone());
                }
                Formula::Maj2(i, j, _) => {
                    s.insert(i.clone());
                    s.insert(j.clone());
                }
                _ => {}
            }
            for ix in node.indices() {
                if let Index::Var(v) = ix {
                    s.insert(v.clone());
                }
            }
        }
        s
    }

    pub fn indices(&self) -> Vec<&Index> {
        use Formula::*;
        match self {
            Q(_, i) => vec![i],
            Eq(a, b) | Leq(a, b) | Geq(a, b) | Bit(a, b) => vec![a, b],
            _ => vec![],
        }
    }

    pub fn free_variables(&self) -> BTreeSet<String> {
        use Formula::*;
        let mut s: BTreeSet<String> = self
            .indices()
            .into_iter()
            .filter_map(|i| match i {
                Index::Var(v) => Some(v.clone()),
                _ => None,
            })
            .collect();
        match self {
            And(a, b) | Or(a, b) => {
                s.extend(a.free_variables());
                s.extend(b.free_variables());
            }
            Not(a) => s.extend(a.free_variables()),
            Exists(v, a) | Forall(v, a) => {
                let mut f = a.free_variables();
                f.remove(v);
                s.extend(f);
            }
            Maj2(i, j, a) => {
                let mut f = a.free_variables();
                f.remove(i);
                f.remove(j);
                s.extend(f);
            }
            _ => {}
        }
        s
    }

    pub fn is_sentence(&self) -> bool {
        self.free_variables().is_empty()
    }

    pub fn has_bit(&self) -> bool {
        self.preorder().iter().any(|n| matches!(n, Formula::Bit(..)))
    }

    /// Token symbols tested by Q predicates.
    pub fn symbols(&self) -> BTreeSet<String> {
        self.preorder()
            .iter()
            .filter_map(|n| match n {
                Formula::Q(s, _) => Some(s.clone()),
                _ => None,
            })
            .collect()
    }
}

/// (distinct variable names, nesting depth).
pub fn formula_metrics(f: &Formula) -> (usize, usize) {
    (f.variables().len(), f.depth())
}

/// Variable environment; later bindings shadow earlier ones.
#[derive(Clone, Debug, Default)]
pub struct Assignment(Vec<(String, usize)>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn with(mut self, v: &str, m: usize) -> Self {
        self.0.push((v.to_string(), m));
        self
    }
    pub fn get(&self, v: &str) -> Option<usize> {
        self.0.iter().rev().find(|(n, _)| n == v).map(|e| e.1)
    }
}

fn index_value(ix: &Index, n: usize, env: &[(String, usize)]) -> Result<usize> {
    match ix {
        Index::One | Index::N if n == 0 => {
            Err(Error::Domain("index constant evaluated on the empty word".into()))
        }
        Index::One => Ok(1),
        Index::N => Ok(n),
        Index::Var(v) => env
            .iter()
            .rev()
            .find(|(name, _)| name == v)
            .map(|e| e.1)
            .ok_or_else(|| Error::Domain(format!("unbound variable {v}"))),
    }
}

fn eval_in(f: &Formula, w: &[String], env: &mut Vec<(String, usize)>) -> Result<bool> {
    use Formula::*;
    let n = w.len();
    let ix = |i: &Index, env: &Vec<(String, usize)>| index_value(i, n, env);
    Ok(match f {
        Q(s, i) => w[ix(i, env)? - 1] == *s,
        Eq(a, b) => ix(a, env)? == ix(b, env)?,
        Leq(a, b) => ix(a, env)? <= ix(b, env)?,
        Geq(a, b) => ix(a, env)? >= ix(b, env)?,
        Bit(a, b) => {
            let (x, j) = (ix(a, env)?, ix(b, env)?);
            j >= 1 && j <= 64 && (x >> (j - 1)) & 1 == 1
        }
        And(a, b) => eval_in(a, w, env)? && eval_in(b, w, env)?,
        Or(a, b) => eval_in(a, w, env)? || eval_in(b, w, env)?,
        Not(a) => !eval_in(a, w, env)?,
        Exists(v, a) | Forall(v, a) => {
            let want = matches!(f, Exists(..));
            for m in 1..=n {
                env.push((v.clone(), m));
                let r = eval_in(a, w, env);
                env.pop();
                if r? == want {
                    return Ok(want);
                }
            }
            !want
        }
        Maj2(i, j, a) => {
            let mut count = 0;
            for x in 1..=n {
                for y in 1..=n {
                    env.push((i.clone(), x));
                    env.push((j.clone(), y));
                    let r = eval_in(a, w, env);
                    env.truncate(env.len() - 2);
                    count += r? as usize;
                }
            }
            2 * count > n * n
        }
    })
}

pub fn eval_formula(f: &Formula, w: &[String], v: &Assignment) -> Result<bool> {
    let mut env = v.0.clone();
    for (_, m) in &env {
        if *m < 1 || *m > w.len() {
            return Err(Error::Domain(format!("assigned position {m} outside [1, {}]", w.len())));
        }
    }
    eval_in(f, w, &mut env)
}

pub fn eval_sentence(f: &Formula, w: &[String]) -> Result<bool> {
    eval_formula(f, w, &Assignment::new())
}

/// All words over `alphabet` of length 1..=max_n, in length-lexicographic order.
pub fn words(alphabet: &[String], max_n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<String>> = vec![vec![]];
    for _ in 0..max_n {
        layer = layer
            .iter()
            .flat_map(|w| {
                alphabet.iter().map(move |a| {
                    let mut x = w.clone();
                    x.push(a.clone());
                    x
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

pub fn enumerate_language(f: &Formula, alphabet: &[String], max_n: usize) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for w in words(alphabet, max_n) {
        if eval_sentence(f, &w)? {
            out.push(w);
        }
    }
    Ok(out)
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Index::One => write!(f, "1"),
            Index::N => write!(f, "n"),
            Index::Var(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Formula::*;
        // Operands of & and | are parenthesized unless atomic, so the output reparses identically.
        let operand = |x: &Formula, f: &mut fmt::Formatter<'_>| {
            if x.is_atom() || matches!(x, Not(_)) {
                write!(f, "{x}")
            } else {
                write!(f, "({x})")
            }
        };
        match self {
            Q(s, i) => write!(f, "Q{s}({i})"),
            Eq(a, b) => write!(f, "{a} = {b}"),
            Leq(a, b) => write!(f, "{a} <= {b}"),
            Geq(a, b) => write!(f, "{a} >= {b}"),
            Bit(a, b) => write!(f, "bit({a},{b})"),
            And(a, b) | Or(a, b) => {
                operand(a, f)?;
                write!(f, " {} ", if matches!(self, And(..)) { "&" } else { "|" })?;
                operand(b, f)
            }
            Not(a) => {
                write!(f, "!")?;
                if matches!(**a, Q(..) | Bit(..) | Not(_)) {
                    write!(f, "{a}")
                } else {
                    write!(f, "({a})")
                }
            }
            Exists(v, a) => write!(f, "E {v}. {a}"),
            Forall(v, a) => write!(f, "A {v}. {a}"),
            Maj2(i, j, a) => write!(f, "M2({i},{j}). {a}"),
        }
    }
}

#[cfg(test)]
mod tests;
