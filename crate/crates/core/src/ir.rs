//! Serializable description of a padded, looped AHAT.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rational::Rational;

pub const SCHEMA_VERSION: u32 = 1;
pub const BOS: &str = "$";
pub const BLANK: &str = "□";

/// Sparse rational matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, Rational)>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, entries: Vec::new() }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<(usize, Rational)>]) -> Self {
        let mut m = Matrix::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row {
                m.push(r, *c, v.clone());
            }
        }
        m
    }

    pub fn push(&mut self, r: usize, c: usize, v: Rational) {
        if !v.is_zero() {
            self.entries.push((r, c, v));
        }
    }

    /// Rows as sparse lists, merging duplicate entries.
    pub fn sparse_rows(&self) -> Vec<Vec<(usize, Rational)>> {
        let mut rows: Vec<BTreeMap<usize, Rational>> = vec![BTreeMap::new(); self.rows];
        for (r, c, v) in &self.entries {
            let e = rows[*r].entry(*c).or_insert(Rational::ZERO);
            *e = &*e + v;
        }
        rows.into_iter()
            .map(|m| m.into_iter().filter(|(_, v)| !v.is_zero()).collect())
            .collect()
    }

    /// Σ over rows of the row's absolute entry sum.
    pub fn abs_row_sums(&self) -> Vec<Rational> {
        self.sparse_rows()
            .iter()
            .map(|r| r.iter().fold(Rational::ZERO, |a, (_, v)| &a + &v.abs()))
            .collect()
    }

    pub fn scaled(&self, k: &Rational) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|(r, c, v)| (*r, *c, v * k)).collect(),
        }
    }

    /// Same entries, embedded in a matrix with more columns / rows.
    pub fn widened(&self, rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, entries: self.entries.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    Causal,
    Unmasked,
}

/// Extra raw bilinear score `weight · (Q h_i)·(K h_j)` on the residual stream.
///
/// Unlike the main query/key path these read the residual without a
/// layer-norm; constructions only point them at hash blocks and 0/1 or ±1
/// indicator channels, so they amount to a second, already-normalized read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTerm {
    pub weight: Rational,
    pub query: Matrix,
    pub key: Matrix,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub mask: Mask,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<ScoreTerm>,
}

/// Operand of a gadget: a 4-channel hash block decoded to an integer, or a
/// single scalar channel that must hold a rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Hash(usize),
    Scalar(usize),
}

impl Operand {
    pub fn channels(&self) -> std::ops::Range<usize> {
        match *self {
            Operand::Hash(c) => c..c + 4,
            Operand::Scalar(c) => c..c + 1,
        }
    }
}

pub type Target = Operand;

/// Idealized position-local arithmetic. Hash blocks are decoded leniently:
/// a block (h0, h1, ..) stands for ⌊max(0, h0/h1)⌋, and for 0 when h1 ≤ 0.
/// Every op adds its result into its output channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GadgetOp {
    /// Scalar z (floored at 0) ↦ φ(z).
    LnHash { input: usize, output: usize },
    /// (φa, φb) ↦ φ(⌊a/b⌋); b = 0 is a domain error.
    Quotient { a: usize, b: usize, output: usize },
    /// (φa, φb) ↦ φ(a mod b); b = 0 is a domain error.
    Remainder { a: usize, b: usize, output: usize },
    /// (φa, φb) ↦ +1 if a = b else −1.
    HashEqual { a: usize, b: usize, output: usize },
    /// (φa, φb) ↦ +1 if a ≤ b else −1.
    HashLessEq { a: usize, b: usize, output: usize },
    /// max(floor, Σ cₜ·xₜ + constant), written as a hash or a scalar.
    AffineInt {
        terms: Vec<(Rational, Operand)>,
        constant: Rational,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        floor: Option<Rational>,
        output: Target,
    },
    /// x ↦ Σ c·x^d.
    Polynomial { input: Operand, terms: Vec<(Rational, u32)>, output: Target },
    /// (φa, φj) ↦ +1 if the j-th least significant bit of a is set, else −1.
    Bit { value: usize, index: usize, output: usize },
}

impl GadgetOp {
    pub fn inputs(&self) -> Vec<std::ops::Range<usize>> {
        use GadgetOp::*;
        let h = |c: usize| c..c + 4;
        match self {
            LnHash { input, .. } => vec![*input..*input + 1],
            Quotient { a, b, .. } | Remainder { a, b, .. } => vec![h(*a), h(*b)],
            HashEqual { a, b, .. } | HashLessEq { a, b, .. } => vec![h(*a), h(*b)],
            AffineInt { terms, .. } => terms.iter().map(|(_, o)| o.channels()).collect(),
            Polynomial { input, .. } => vec![input.channels()],
            Bit { value, index, .. } => vec![h(*value), h(*index)],
        }
    }

    pub fn outputs(&self) -> std::ops::Range<usize> {
        use GadgetOp::*;
        match self {
            LnHash { output, .. } | Quotient { output, .. } | Remainder { output, .. } => {
                *output..*output + 4
            }
            HashEqual { output, .. } | HashLessEq { output, .. } | Bit { output, .. } => {
                *output..*output + 1
            }
            AffineInt { output, .. } | Polynomial { output, .. } => output.channels(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        use GadgetOp::*;
        match self {
            LnHash { .. } => "ln_hash",
            Quotient { .. } => "quotient",
            Remainder { .. } => "remainder",
            HashEqual { .. } => "hash_equal",
            HashLessEq { .. } => "hash_less_eq",
            AffineInt { .. } => "affine_int",
            Polynomial { .. } => "polynomial",
            Bit { .. } => "bit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Sublayer {
    Attention { prenorm: Matrix, heads: Vec<Head>, output: Matrix },
    /// δ = down · ReLU(up · layer_norm(prenorm · h)).
    FeedForward { prenorm: Matrix, up: Matrix, down: Matrix },
    /// Ops all read the sublayer's input state.
    Gadget { ops: Vec<GadgetOp>, idealized: bool },
}

impl Sublayer {
    pub fn is_attention(&self) -> bool {
        matches!(self, Sublayer::Attention { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    None,
    InverseIndex,
    IndexOverLength,
}

/// Where (if anywhere) the embedding writes the position scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionEncoding {
    pub kind: PositionKind,
    #[serde(default)]
    pub channel: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocks {
    pub a: Vec<Sublayer>,
    pub b: Vec<Sublayer>,
    pub c: Vec<Sublayer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Looping {
    pub exponent: u32,
    pub coefficient: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadTerm {
    pub coefficient: u64,
    pub degree: u32,
}

/// p(n) = Σ coefficient · n^degree, with 0⁰ = 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub terms: Vec<PadTerm>,
}

impl Padding {
    pub fn none() -> Self {
        Padding::default()
    }

    pub fn monomial(coefficient: u64, degree: u32) -> Self {
        Padding { terms: vec![PadTerm { coefficient, degree }] }
    }

    pub fn count(&self, n: usize) -> usize {
        self.terms
            .iter()
            .map(|t| t.coefficient as usize * n.pow(t.degree))
            .sum()
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().filter(|t| t.coefficient > 0).map(|t| t.degree).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Decision {
    /// Accept iff the read scalar is strictly positive.
    Sign,
    /// Emit the token whose logit row is largest (first on ties).
    Argmax { logits: Vec<(String, Vec<(usize, Rational)>)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readout {
    pub read: Vec<(usize, Rational)>,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerIR {
    pub schema_version: u32,
    pub alphabet: Vec<String>,
    pub width: usize,
    pub embedding: BTreeMap<String, Vec<Rational>>,
    pub position_encoding: PositionEncoding,
    pub blocks: Blocks,
    pub looping: Looping,
    pub padding: Padding,
    pub readout: Readout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
    pub fatal: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub issues: Vec<Issue>,
}

impl Report {
    pub fn is_ok(&self) -> bool {
        self.issues.iter().all(|i| !i.fatal)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.fatal)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| !i.fatal)
    }

    fn err(&mut self, path: String, message: impl Into<String>) {
        self.issues.push(Issue { path, message: message.into(), fatal: true });
    }

    fn warn(&mut self, path: String, message: impl Into<String>) {
        self.issues.push(Issue { path, message: message.into(), fatal: false });
    }
}

fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

impl TransformerIR {
    pub fn all_sublayers(&self) -> impl Iterator<Item = (&'static str, usize, &Sublayer)> {
        let a = self.blocks.a.iter().enumerate().map(|(i, s)| ("a", i, s));
        let b = self.blocks.b.iter().enumerate().map(|(i, s)| ("b", i, s));
        let c = self.blocks.c.iter().enumerate().map(|(i, s)| ("c", i, s));
        a.chain(b).chain(c)
    }

    /// Loop count for total sequence length `n`: c·⌈log₂ n⌉^d.
    pub fn unroll_depth(&self, n: usize) -> usize {
        let l = ceil_log2(n.max(1) as u64) as u64;
        (self.looping.coefficient * l.pow(self.looping.exponent)) as usize
    }

    /// Depth of the fully unrolled stack for total length `n`.
    pub fn depth(&self, n: usize) -> usize {
        self.blocks.a.len() + self.blocks.b.len() * self.unroll_depth(n) + self.blocks.c.len()
    }

    pub fn total_length(&self, n: usize) -> usize {
        1 + n + self.padding.count(n)
    }

    pub fn is_fully_causal(&self) -> bool {
        self.all_sublayers().all(|(_, _, s)| match s {
            Sublayer::Attention { heads, .. } => heads.iter().all(|h| h.mask == Mask::Causal),
            _ => true,
        })
    }

    pub fn has_gadgets(&self) -> bool {
        self.all_sublayers().any(|(_, _, s)| matches!(s, Sublayer::Gadget { .. }))
    }

    pub fn validate(&self) -> Report {
        let mut rep = Report::default();
        let m = self.width;
        if m == 0 {
            rep.err("width".into(), "width must be positive");
        }
        if self.schema_version != SCHEMA_VERSION {
            rep.err("schema_version".into(), format!("unsupported schema version {}", self.schema_version));
        }
        for t in [BOS, BLANK] {
            if !self.alphabet.iter().any(|a| a == t) {
                rep.err("alphabet".into(), format!("alphabet must contain {t:?}"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.alphabet {
            if !seen.insert(a) {
                rep.err("alphabet".into(), format!("duplicate token {a:?}"));
            }
        }
        for t in &self.alphabet {
            match self.embedding.get(t) {
                None => rep.err(format!("embedding.{t}"), "missing embedding"),
                Some(v) if v.len() != m => {
                    rep.err(format!("embedding.{t}"), format!("length {} != width {m}", v.len()))
                }
                _ => {}
            }
        }
        for t in self.embedding.keys() {
            if !self.alphabet.contains(t) {
                rep.err(format!("embedding.{t}"), "token not in alphabet");
            }
        }
        let pe = &self.position_encoding;
        if pe.kind != PositionKind::None && pe.channel >= m {
            rep.err("position_encoding.channel".into(), "channel out of range");
        }
        if self.looping.coefficient == 0 {
            rep.err("looping.coefficient".into(), "must be positive");
        }
        let check_shape = |rep: &mut Report, path: String, mat: &Matrix, rows: usize, cols: usize| {
            if mat.rows != rows || mat.cols != cols {
                rep.err(path.clone(), format!("shape {}x{} != {rows}x{cols}", mat.rows, mat.cols));
            }
            if mat.entries.iter().any(|(r, c, _)| *r >= mat.rows || *c >= mat.cols) {
                rep.err(path, "entry out of range");
            }
        };
        for (blk, i, s) in self.all_sublayers() {
            let p = format!("blocks.{blk}[{i}]");
            match s {
                Sublayer::Attention { prenorm, heads, output } => {
                    check_shape(&mut rep, format!("{p}.prenorm"), prenorm, prenorm.rows, m);
                    let r = prenorm.rows;
                    if heads.is_empty() {
                        rep.err(p.clone(), "attention sublayer without heads");
                    } else if m % heads.len() != 0 {
                        rep.err(p.clone(), "heads must divide width");
                    }
                    let mut dv = 0;
                    for (h, head) in heads.iter().enumerate() {
                        let hp = format!("{p}.heads[{h}]");
                        check_shape(&mut rep, format!("{hp}.query"), &head.query, head.query.rows, r);
                        check_shape(&mut rep, format!("{hp}.key"), &head.key, head.query.rows, r);
                        check_shape(&mut rep, format!("{hp}.value"), &head.value, head.value.rows, r);
                        for (t, term) in head.aux.iter().enumerate() {
                            let tp = format!("{hp}.aux[{t}]");
                            check_shape(&mut rep, format!("{tp}.query"), &term.query, term.query.rows, m);
                            check_shape(&mut rep, format!("{tp}.key"), &term.key, term.query.rows, m);
                        }
                        dv += head.value.rows;
                    }
                    check_shape(&mut rep, format!("{p}.output"), output, m, dv);
                }
                Sublayer::FeedForward { prenorm, up, down } => {
                    check_shape(&mut rep, format!("{p}.prenorm"), prenorm, prenorm.rows, m);
                    check_shape(&mut rep, format!("{p}.up"), up, up.rows, prenorm.rows);
                    check_shape(&mut rep, format!("{p}.down"), down, m, up.rows);
                }
                Sublayer::Gadget { ops, .. } => {
                    for (k, op) in ops.iter().enumerate() {
                        let bad = op.inputs().into_iter().chain([op.outputs()]).any(|r| r.end > m);
                        if bad {
                            rep.err(format!("{p}.ops[{k}]"), format!("{} channel out of range", op.kind_name()));
                        }
                    }
                }
            }
        }
        if self.readout.read.iter().any(|(c, _)| *c >= m) {
            rep.err("readout.read".into(), "channel out of range");
        }
        if let Decision::Argmax { logits } = &self.readout.decision {
            for (t, row) in logits {
                if row.iter().any(|(c, _)| *c >= m) {
                    rep.err(format!("readout.logits.{t}"), "channel out of range");
                }
            }
        }
        if self.is_fully_causal() && pe.kind != PositionKind::None {
            rep.warn(
                "position_encoding".into(),
                "position encoding redundant: every head is causally masked",
            );
        }
        rep
    }

    pub fn check(&self) -> Result<()> {
        let rep = self.validate();
        let first = rep.errors().next().map(|e| format!("{}: {}", e.path, e.message));
        match first {
            None => Ok(()),
            Some(e) => Err(Error::Invalid(e)),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("IR serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("IR document: {e}")))
    }

    pub fn token_index(&self, t: &str) -> Option<usize> {
        self.alphabet.iter().position(|a| a == t)
    }

    /// Input alphabet: everything except BoS and blank.
    pub fn input_alphabet(&self) -> Vec<String> {
        self.alphabet.iter().filter(|a| *a != BOS && *a != BLANK).cloned().collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny(heads: usize, width: usize) -> TransformerIR {
        let alphabet: Vec<String> = [BOS, BLANK, "a"].iter().map(|s| s.to_string()).collect();
        let embedding = alphabet.iter().map(|t| (t.clone(), vec![Rational::ZERO; width])).collect();
        let head = Head {
            query: Matrix::zeros(1, 1),
            key: Matrix::zeros(1, 1),
            value: Matrix::zeros(1, 1),
            mask: Mask::Unmasked,
            aux: vec![],
        };
        TransformerIR {
            schema_version: SCHEMA_VERSION,
            alphabet,
            width,
            embedding,
            position_encoding: PositionEncoding { kind: PositionKind::None, channel: 0 },
            blocks: Blocks {
                a: vec![Sublayer::Attention {
                    prenorm: Matrix::zeros(1, width),
                    heads: vec![head; heads],
                    output: Matrix::zeros(width, heads),
                }],
                ..Blocks::default()
            },
            looping: Looping { exponent: 0, coefficient: 1 },
            padding: Padding::none(),
            readout: Readout { read: vec![], decision: Decision::Sign },
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let rep = tiny(3, 8).validate();
        assert!(rep.errors().any(|e| e.message == "heads must divide width"));
        assert!(tiny(2, 8).validate().is_ok());
    }

    #[test]
    fn causal_with_position_encoding_warns() {
        let mut t = tiny(1, 4);
        if let Sublayer::Attention { heads, .. } = &mut t.blocks.a[0] {
            heads[0].mask = Mask::Causal;
        }
        t.position_encoding.kind = PositionKind::InverseIndex;
        let rep = t.validate();
        assert!(rep.is_ok());
        assert!(rep.warnings().any(|w| w.message.contains("redundant")));
    }

    #[test]
    fn unroll_depth_examples() {
        let mut t = tiny(1, 4);
        t.looping = Looping { exponent: 0, coefficient: 5 };
        assert_eq!(t.unroll_depth(1000), 5);
        t.looping = Looping { exponent: 1, coefficient: 1 };
        assert_eq!(t.unroll_depth(8), 3);
        t.looping = Looping { exponent: 2, coefficient: 2 };
        assert_eq!(t.unroll_depth(9), 32);
        let mut prev = 0;
        for n in 1..300 {
            let d = t.unroll_depth(n);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn json_round_trip() {
        let t = tiny(2, 4);
        let back = TransformerIR::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert!(TransformerIR::from_json("{").is_err());
    }

    #[test]
    fn padding_uses_zero_to_the_zero() {
        let p = Padding { terms: vec![PadTerm { coefficient: 2, degree: 0 }, PadTerm { coefficient: 1, degree: 2 }] };
        assert_eq!(p.count(0), 2);
        assert_eq!(p.count(3), 11);
        assert_eq!(p.degree(), 2);
    }
}
