//! Concrete syntax:
//!
//! ```text
//! formula := conj ('|' conj)*
//! conj    := unary ('&' unary)*
//! unary   := '!' unary | quant | '(' formula ')' | atom
//! quant   := 'E' var '.' formula | 'A' var '.' formula | 'M2' '(' var ',' var ')' '.' formula
//! atom    := 'Q'sym '(' index ')' | 'bit' '(' index ',' index ')' | index ('=' | '<=' | '>=') index
//! index   := '1' | 'n' | var
//! ```
//!
//! Quantifier bodies extend as far right as possible. `∃ ∀ ¬ ∧ ∨ ≤ ≥` are
//! accepted as synonyms.

use super::{Formula, Index};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// A parsed formula with the source span of every node, in pre-order.
#[derive(Clone, Debug)]
pub struct Parsed {
    pub formula: Formula,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    LParen,
    RParen,
    Comma,
    Dot,
    And,
    Or,
    Not,
    Eq,
    Leq,
    Geq,
    Exists,
    Forall,
    End,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) | Tok::Num(s) => format!("{s:?}"),
        Tok::End => "end of input".into(),
        other => format!("{other:?}").to_lowercase(),
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Span)>> {
    let mut out = Vec::new();
    let mut it = src.char_indices().peekable();
    while let Some(&(i, c)) = it.peek() {
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            '.' => Some(Tok::Dot),
            '&' | '∧' => Some(Tok::And),
            '|' | '∨' => Some(Tok::Or),
            '!' | '¬' => Some(Tok::Not),
            '=' => Some(Tok::Eq),
            '≤' => Some(Tok::Leq),
            '≥' => Some(Tok::Geq),
            '∃' => Some(Tok::Exists),
            '∀' => Some(Tok::Forall),
            _ => None,
        };
        if c.is_whitespace() {
            it.next();
        } else if let Some(t) = single {
            it.next();
            out.push((t, Span { start: i, end: i + c.len_utf8() }));
        } else if c == '<' || c == '>' {
            it.next();
            match it.next() {
                Some((_, '=')) => {
                    let t = if c == '<' { Tok::Leq } else { Tok::Geq };
                    out.push((t, Span { start: i, end: i + 2 }));
                }
                _ => return Err(err(src, i, &format!("expected '=' after '{c}'"))),
            }
        } else if c.is_alphanumeric() || c == '_' {
            let mut end = i;
            let mut s = String::new();
            while let Some(&(j, d)) = it.peek() {
                if d.is_alphanumeric() || d == '_' || d == '\'' {
                    s.push(d);
                    end = j + d.len_utf8();
                    it.next();
                } else {
                    break;
                }
            }
            let t = if s.chars().all(|d| d.is_ascii_digit()) { Tok::Num(s) } else { Tok::Ident(s) };
            out.push((t, Span { start: i, end }));
        } else {
            return Err(err(src, i, &format!("unexpected character {c:?}")));
        }
    }
    out.push((Tok::End, Span { start: src.len(), end: src.len() }));
    Ok(out)
}

fn err(src: &str, at: usize, msg: &str) -> Error {
    let before = &src[..at.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    Error::Parse(format!("{line}:{col}: {msg}"))
}

/// Spans of a subtree, mirroring the formula's shape.
struct Tree {
    span: Span,
    kids: Vec<Tree>,
}

impl Tree {
    fn flatten(self, out: &mut Vec<Span>) {
        out.push(self.span);
        for k in self.kids {
            k.flatten(out);
        }
    }
}

const RESERVED: &[&str] = &["E", "A", "M2", "bit", "n"];

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, Span)>,
    pos: usize,
}

type Node = (Formula, Tree);

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }
    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].0
    }
    fn span(&self) -> Span {
        self.toks[self.pos].1
    }
    fn prev_end(&self) -> usize {
        self.toks[self.pos.saturating_sub(1)].1.end
    }
    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }
    fn fail<T>(&self, msg: &str) -> Result<T> {
        Err(err(self.src, self.span().start, &format!("{msg}, found {}", describe(self.peek()))))
    }
    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            self.fail(&format!("expected {what}"))
        }
    }

    fn formula(&mut self) -> Result<Node> {
        self.binary(true)
    }

    fn binary(&mut self, or: bool) -> Result<Node> {
        let start = self.span().start;
        let mut lhs = if or { self.binary(false)? } else { self.unary()? };
        let op = if or { Tok::Or } else { Tok::And };
        while *self.peek() == op {
            self.bump();
            let rhs = if or { self.binary(false)? } else { self.unary()? };
            let span = Span { start, end: self.prev_end() };
            let f = if or { Formula::or(lhs.0, rhs.0) } else { Formula::and(lhs.0, rhs.0) };
            lhs = (f, Tree { span, kids: vec![lhs.1, rhs.1] });
        }
        Ok(lhs)
    }

    fn var(&mut self) -> Result<String> {
        match self.peek().clone() {
            Tok::Ident(v) if !RESERVED.contains(&v.as_str()) => {
                self.bump();
                Ok(v)
            }
            _ => self.fail("expected a variable name"),
        }
    }

    fn unary(&mut self) -> Result<Node> {
        let start = self.span().start;
        let done = |p: &Self, f: Formula, kids: Vec<Tree>| {
            Ok((f, Tree { span: Span { start, end: p.prev_end() }, kids }))
        };
        match self.peek().clone() {
            Tok::Not => {
                self.bump();
                let (a, t) = self.unary()?;
                done(self, Formula::not(a), vec![t])
            }
            Tok::LParen => {
                self.bump();
                let inner = self.formula()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Tok::Exists | Tok::Forall => self.quant(start),
            Tok::Ident(s) if (s == "E" || s == "A") && matches!(self.peek2(), Tok::Ident(_)) => {
                self.quant(start)
            }
            Tok::Ident(s) if s == "M2" && *self.peek2() == Tok::LParen => {
                self.bump();
                self.bump();
                let i = self.var()?;
                self.expect(Tok::Comma, "','")?;
                let j = self.var()?;
                self.expect(Tok::RParen, "')'")?;
                if i == j {
                    return Err(err(self.src, start, "M2 must bind two distinct variables"));
                }
                self.expect(Tok::Dot, "'.'")?;
                let (a, t) = self.formula()?;
                done(self, Formula::maj2(&i, &j, a), vec![t])
            }
            Tok::Ident(s) if s == "bit" && *self.peek2() == Tok::LParen => {
                self.bump();
                self.bump();
                let a = self.index()?;
                self.expect(Tok::Comma, "','")?;
                let b = self.index()?;
                self.expect(Tok::RParen, "')'")?;
                done(self, Formula::Bit(a, b), vec![])
            }
            Tok::Ident(s) if s.len() > 1 && s.starts_with('Q') && *self.peek2() == Tok::LParen => {
                self.bump();
                self.bump();
                let i = self.index()?;
                self.expect(Tok::RParen, "')'")?;
                done(self, Formula::Q(s[1..].to_string(), i), vec![])
            }
            Tok::Ident(_) | Tok::Num(_) => {
                let a = self.index()?;
                let op = self.bump();
                let b = self.index()?;
                let f = match op {
                    Tok::Eq => Formula::Eq(a, b),
                    Tok::Leq => Formula::Leq(a, b),
                    Tok::Geq => Formula::Geq(a, b),
                    _ => {
                        self.pos -= 2;
                        return self.fail("expected '=', '<=' or '>='");
                    }
                };
                done(self, f, vec![])
            }
            _ => self.fail("expected a formula"),
        }
    }

    fn quant(&mut self, start: usize) -> Result<Node> {
        let exists = matches!(self.bump(), Tok::Exists) || matches!(&self.toks[self.pos - 1].0, Tok::Ident(s) if s == "E");
        let v = self.var()?;
        self.expect(Tok::Dot, "'.'")?;
        let (a, t) = self.formula()?;
        let f = if exists { Formula::exists(&v, a) } else { Formula::forall(&v, a) };
        Ok((f, Tree { span: Span { start, end: self.prev_end() }, kids: vec![t] }))
    }

    fn index(&mut self) -> Result<Index> {
        match self.peek().clone() {
            Tok::Num(s) if s == "1" => {
                self.bump();
                Ok(Index::One)
            }
            Tok::Ident(s) if s == "n" => {
                self.bump();
                Ok(Index::N)
            }
            Tok::Ident(_) => Ok(Index::Var(self.var()?)),
            _ => self.fail("expected an index (1, n or a variable)"),
        }
    }
}

pub fn parse_spanned(src: &str) -> Result<Parsed> {
    let mut p = Parser { src, toks: lex(src)?, pos: 0 };
    let (formula, tree) = p.formula()?;
    if *p.peek() != Tok::End {
        return p.fail("expected end of input");
    }
    let mut spans = Vec::new();
    tree.flatten(&mut spans);
    Ok(Parsed { formula, spans })
}

pub fn parse_formula(src: &str) -> Result<Formula> {
    parse_spanned(src).map(|p| p.formula)
}
