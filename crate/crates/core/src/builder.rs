//! Shared machinery for emitting transformers by hand.
//!
//! Every layer-normed read is assembled from blocks that have unit Euclidean
//! norm at *every* position (hash blocks, one-hot groups, ±1 channels), then
//! padded with copies of the constant channel up to a perfect square s². The
//! normalized read is then exactly x/s, so downstream values stay rational
//! multiples of the residual entries.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::ir::{
    Blocks, Decision, GadgetOp, Head, Looping, Mask, Matrix, Operand, Padding, PositionEncoding,
    PositionKind, Readout, ScoreTerm, Sublayer, TransformerIR, BLANK, BOS, SCHEMA_VERSION,
};
use crate::rational::Rational;

/// Linear form over residual channels (or over read rows, depending on use).
pub type Row = Vec<(usize, Rational)>;

pub fn r(v: i128) -> Rational {
    Rational::from_int(v)
}

pub fn ch(c: usize) -> Row {
    vec![(c, Rational::ONE)]
}

pub fn lin(terms: &[(usize, i128)]) -> Row {
    terms.iter().map(|&(c, k)| (c, r(k))).collect()
}

pub fn scaled(row: &Row, k: &Rational) -> Row {
    row.iter().map(|(c, v)| (*c, v * k)).collect()
}

pub fn plus(a: &Row, b: &Row) -> Row {
    a.iter().chain(b.iter()).cloned().collect()
}

/// A layer-normed read built from structurally unit blocks.
#[derive(Clone, Debug, Default)]
pub struct Read {
    rows: Vec<Row>,
    blocks: usize,
    one: Option<usize>,
}

impl Read {
    pub fn new() -> Self {
        Read::default()
    }

    /// Add rows that jointly have unit norm at every position.
    pub fn block(&mut self, rows: Vec<Row>) -> Vec<usize> {
        let start = self.rows.len();
        self.rows.extend(rows);
        self.blocks += 1;
        (start..self.rows.len()).collect()
    }

    pub fn channels(&mut self, start: usize, len: usize) -> Vec<usize> {
        self.block((start..start + len).map(ch).collect())
    }

    pub fn scalar(&mut self, c: usize) -> usize {
        self.block(vec![ch(c)])[0]
    }

    /// Index of a read row equal to the constant 1.
    pub fn one(&mut self, one_channel: usize) -> usize {
        if let Some(i) = self.one {
            return i;
        }
        let i = self.block(vec![ch(one_channel)])[0];
        self.one = Some(i);
        i
    }

    /// Pad to a perfect square; returns rows and the scale s with z = x/s.
    fn finish(mut self, one_channel: usize) -> (Vec<Row>, Rational) {
        let mut s = 1usize;
        while s * s < self.blocks {
            s += 1;
        }
        while self.blocks < s * s {
            self.rows.push(ch(one_channel));
            self.blocks += 1;
        }
        (self.rows, r(s as i128))
    }
}

/// A ReLU unit: pre-activation over read rows (x-space), and its output.
#[derive(Clone, Debug)]
pub struct Unit {
    pub pre: Row,
    pub out: Row,
}

#[derive(Clone, Debug, Default)]
pub struct HeadSpec {
    pub mask: Option<Mask>,
    /// Raw score terms: weight · Σ_pairs (q·h_i)(k·h_j).
    pub aux: Vec<(Rational, Vec<(Row, Row)>)>,
    /// Output channel ← linear form over read rows (x-space).
    pub value: Vec<(usize, Row)>,
}

impl HeadSpec {
    pub fn new(mask: Mask) -> Self {
        HeadSpec { mask: Some(mask), ..Default::default() }
    }

    pub fn term(mut self, weight: Rational, pairs: Vec<(Row, Row)>) -> Self {
        self.aux.push((weight, pairs));
        self
    }

    /// Score weight·φ(a_i)·φ(b_j) for hash blocks at `qa`, `kb`.
    pub fn hash_match(self, weight: Rational, qa: usize, kb: usize) -> Self {
        self.term(weight, (0..4).map(|t| (ch(qa + t), ch(kb + t))).collect())
    }

    pub fn value(mut self, out: usize, expr: Row) -> Self {
        self.value.push((out, expr));
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Channel {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
    C,
}

#[derive(Clone, Debug)]
pub struct Builder {
    pub alphabet: Vec<String>,
    next: usize,
    extra: usize,
    plan: Vec<Channel>,
    embedding: BTreeMap<String, BTreeMap<usize, Rational>>,
    pub one: usize,
    tok: BTreeMap<String, usize>,
    position: PositionEncoding,
    blocks: [Vec<Sublayer>; 3],
    phase: Phase,
}

impl Builder {
    /// `inputs` excludes BoS and blank, which are always added.
    pub fn new(inputs: &[String]) -> Self {
        Self::with_layout(inputs, 0, 0)
    }

    /// Start allocating at `offset` and leave `extra` unused channels at the end.
    pub fn with_layout(inputs: &[String], offset: usize, extra: usize) -> Self {
        let mut alphabet = vec![BOS.to_string()];
        alphabet.extend(inputs.iter().filter(|t| *t != BOS && *t != BLANK).cloned());
        alphabet.push(BLANK.to_string());
        let embedding = alphabet.iter().map(|t| (t.clone(), BTreeMap::new())).collect();
        let mut b = Builder {
            alphabet,
            next: offset,
            extra,
            plan: Vec::new(),
            embedding,
            one: 0,
            tok: BTreeMap::new(),
            position: PositionEncoding { kind: PositionKind::None, channel: 0 },
            blocks: [Vec::new(), Vec::new(), Vec::new()],
            phase: Phase::A,
        };
        b.one = b.alloc("one", 1);
        b.embed_all(b.one, r(1));
        let toks = b.alphabet.clone();
        let base = b.alloc("tok", toks.len());
        for (i, t) in toks.iter().enumerate() {
            b.tok.insert(t.clone(), base + i);
            b.embed(t, base + i, r(1));
        }
        b
    }

    pub fn alloc(&mut self, name: &str, len: usize) -> usize {
        let start = self.next;
        self.next += len;
        self.plan.push(Channel { name: name.to_string(), start, len });
        start
    }

    pub fn plan(&self) -> &[Channel] {
        &self.plan
    }

    pub fn width_so_far(&self) -> usize {
        self.next
    }

    pub fn tok(&self, t: &str) -> usize {
        self.tok[t]
    }

    /// One-hot token channels, in alphabet order.
    pub fn tok_rows(&self) -> Vec<Row> {
        self.alphabet.iter().map(|t| ch(self.tok[t])).collect()
    }

    pub fn embed(&mut self, tok: &str, c: usize, v: Rational) {
        let e = self.embedding.get_mut(tok).expect("token in alphabet");
        let slot = e.entry(c).or_insert(Rational::ZERO);
        *slot = &*slot + &v;
    }

    pub fn embed_all(&mut self, c: usize, v: Rational) {
        for t in self.alphabet.clone() {
            self.embed(&t, c, v.clone());
        }
    }

    pub fn set_position(&mut self, kind: PositionKind, channel: usize) {
        self.position = PositionEncoding { kind, channel };
    }

    pub fn phase(&mut self, p: Phase) {
        self.phase = p;
    }

    pub fn push(&mut self, s: Sublayer) {
        let i = match self.phase {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        };
        self.blocks[i].push(s);
    }

    pub fn depth(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// out[0..4] += φ(num/den), via a 4-row read ⟨num, den, −num, −den⟩.
    pub fn hash_ffn(&mut self, num: Row, den: Row, out: usize) {
        let neg = |row: &Row| scaled(row, &r(-1));
        let rows = vec![num.clone(), den.clone(), neg(&num), neg(&den)];
        let mut up = Matrix::zeros(8, 4);
        let mut down = Matrix::zeros(0, 8);
        for t in 0..4 {
            up.push(t, t, r(1));
            up.push(4 + t, t, r(-1));
            down.push(out + t, t, r(1));
            down.push(out + t, 4 + t, r(-1));
        }
        self.push(Sublayer::FeedForward { prenorm: Matrix::from_rows(0, &rows), up, down });
    }

    /// One-dimensional read x ↦ s = sign(x) ∈ {−1, 0, 1}; adds
    /// pos·ReLU(s) + neg·ReLU(−s) to the residual.
    pub fn sign_ffn(&mut self, x: Row, pos: Row, neg: Row) {
        let up = Matrix::from_rows(1, &[ch(0), vec![(0, r(-1))]]);
        let mut down = Matrix::zeros(0, 2);
        for (c, k) in pos {
            down.push(c, 0, k);
        }
        for (c, k) in neg {
            down.push(c, 1, k);
        }
        self.push(Sublayer::FeedForward { prenorm: Matrix::from_rows(0, &[x]), up, down });
    }

    pub fn ffn(&mut self, read: Read, units: Vec<Unit>) {
        let (rows, s) = read.finish(self.one);
        let mut up = Matrix::zeros(units.len(), rows.len());
        let mut down = Matrix::zeros(0, units.len());
        for (u, unit) in units.iter().enumerate() {
            for (i, k) in &unit.pre {
                up.push(u, *i, k * &s);
            }
            for (c, k) in &unit.out {
                down.push(*c, u, k.clone());
            }
        }
        self.push(Sublayer::FeedForward { prenorm: Matrix::from_rows(0, &rows), up, down });
    }

    /// Units that copy read rows (x-space) to channels: out += Σ k·x_i.
    /// Each row must be ≥ 0 or ≤ 0 pointwise-unknown, so both halves are used.
    pub fn linear_units(pre: Row, out: Row) -> Vec<Unit> {
        vec![
            Unit { pre: pre.clone(), out: out.clone() },
            Unit { pre: scaled(&pre, &r(-1)), out: scaled(&out, &r(-1)) },
        ]
    }

    pub fn attention(&mut self, read: Read, heads: Vec<HeadSpec>) {
        let (rows, s) = read.finish(self.one);
        let nr = rows.len();
        let mut out_heads = Vec::new();
        let mut output = Matrix::zeros(0, 0);
        let mut dv = 0;
        for h in heads {
            let mut value = Matrix::zeros(h.value.len(), nr);
            for (v, (target, expr)) in h.value.iter().enumerate() {
                for (i, k) in expr {
                    value.push(v, *i, k * &s);
                }
                output.push(*target, dv + v, r(1));
            }
            dv += h.value.len();
            let aux = h
                .aux
                .into_iter()
                .map(|(weight, pairs)| {
                    let q: Vec<Row> = pairs.iter().map(|p| p.0.clone()).collect();
                    let k: Vec<Row> = pairs.iter().map(|p| p.1.clone()).collect();
                    ScoreTerm { weight, query: Matrix::from_rows(0, &q), key: Matrix::from_rows(0, &k) }
                })
                .collect();
            out_heads.push(Head {
                query: Matrix::zeros(0, nr),
                key: Matrix::zeros(0, nr),
                value,
                mask: h.mask.unwrap_or(Mask::Unmasked),
                aux,
            });
        }
        output.cols = dv;
        self.push(Sublayer::Attention { prenorm: Matrix::from_rows(0, &rows), heads: out_heads, output });
    }

    /// Emit gadget ops, split into sublayers by data dependence.
    pub fn gadgets(&mut self, ops: Vec<GadgetOp>) {
        let mut levels: Vec<Vec<GadgetOp>> = Vec::new();
        let mut written: Vec<(std::ops::Range<usize>, usize)> = Vec::new();
        for op in ops {
            let lvl = op
                .inputs()
                .iter()
                .flat_map(|inp| {
                    written
                        .iter()
                        .filter(|(w, _)| w.start < inp.end && inp.start < w.end)
                        .map(|(_, l)| l + 1)
                        .collect::<Vec<_>>()
                })
                .max()
                .unwrap_or(0);
            if levels.len() <= lvl {
                levels.resize(lvl + 1, Vec::new());
            }
            written.push((op.outputs(), lvl));
            levels[lvl].push(op);
        }
        for ops in levels {
            self.push(Sublayer::Gadget { ops, idealized: true });
        }
    }

    /// Allocate a hash block and fill it with an affine combination of hashed integers.
    pub fn affine_hash(&mut self, name: &str, terms: &[(i128, usize)], constant: i128, floor: Option<i128>) -> (usize, GadgetOp) {
        let out = self.alloc(name, 4);
        (out, affine_op(terms, constant, floor, Operand::Hash(out)))
    }

    pub fn finish(self, looping: Looping, padding: Padding, readout: Readout) -> TransformerIR {
        let mut lcm = 1usize;
        for b in &self.blocks {
            for s in b {
                if let Sublayer::Attention { heads, .. } = s {
                    lcm = num_integer::lcm(lcm, heads.len());
                }
            }
        }
        let mut width = (self.next + self.extra).max(1);
        width = width.div_ceil(lcm) * lcm;
        let embedding = self
            .embedding
            .iter()
            .map(|(t, e)| {
                let mut v = vec![Rational::ZERO; width];
                for (c, k) in e {
                    v[*c] = k.clone();
                }
                (t.clone(), v)
            })
            .collect();
        let [a, b, c] = self.blocks;
        let mut t = TransformerIR {
            schema_version: SCHEMA_VERSION,
            alphabet: self.alphabet,
            width,
            embedding,
            position_encoding: self.position,
            blocks: Blocks { a, b, c },
            looping,
            padding,
            readout,
        };
        fix_widths(&mut t);
        t
    }
}

pub fn affine_op(terms: &[(i128, usize)], constant: i128, floor: Option<i128>, output: Operand) -> GadgetOp {
    GadgetOp::AffineInt {
        terms: terms.iter().map(|&(k, c)| (r(k), Operand::Hash(c))).collect(),
        constant: r(constant),
        floor: floor.map(r),
        output,
    }
}

/// Set every residual-facing matrix dimension to the IR's width.
pub fn fix_widths(t: &mut TransformerIR) {
    let m = t.width;
    let fix = |s: &mut Sublayer| match s {
        Sublayer::Attention { prenorm, heads, output } => {
            prenorm.cols = m;
            output.rows = m;
            for h in heads {
                for a in &mut h.aux {
                    a.query.cols = m;
                    a.key.cols = m;
                }
            }
        }
        Sublayer::FeedForward { prenorm, down, .. } => {
            prenorm.cols = m;
            down.rows = m;
        }
        Sublayer::Gadget { .. } => {}
    };
    t.blocks.a.iter_mut().for_each(fix);
    t.blocks.b.iter_mut().for_each(fix);
    t.blocks.c.iter_mut().for_each(fix);
}

/// Shift every channel reference of a sublayer by `offset`.
pub fn shift_sublayer(s: &Sublayer, offset: usize) -> Sublayer {
    let sh = |m: &Matrix, rows: bool, cols: bool| Matrix {
        rows: m.rows + if rows { offset } else { 0 },
        cols: m.cols + if cols { offset } else { 0 },
        entries: m
            .entries
            .iter()
            .map(|(r, c, v)| (r + if rows { offset } else { 0 }, c + if cols { offset } else { 0 }, v.clone()))
            .collect(),
    };
    let op_shift = |o: &Operand| match *o {
        Operand::Hash(c) => Operand::Hash(c + offset),
        Operand::Scalar(c) => Operand::Scalar(c + offset),
    };
    match s {
        Sublayer::Attention { prenorm, heads, output } => Sublayer::Attention {
            prenorm: sh(prenorm, false, true),
            heads: heads
                .iter()
                .map(|h| Head {
                    aux: h
                        .aux
                        .iter()
                        .map(|a| ScoreTerm {
                            weight: a.weight.clone(),
                            query: sh(&a.query, false, true),
                            key: sh(&a.key, false, true),
                        })
                        .collect(),
                    ..h.clone()
                })
                .collect(),
            output: sh(output, true, false),
        },
        Sublayer::FeedForward { prenorm, up, down } => Sublayer::FeedForward {
            prenorm: sh(prenorm, false, true),
            up: up.clone(),
            down: sh(down, true, false),
        },
        Sublayer::Gadget { ops, idealized } => Sublayer::Gadget {
            idealized: *idealized,
            ops: ops
                .iter()
                .map(|op| {
                    use GadgetOp::*;
                    match op.clone() {
                        LnHash { input, output } => LnHash { input: input + offset, output: output + offset },
                        Quotient { a, b, output } => Quotient { a: a + offset, b: b + offset, output: output + offset },
                        Remainder { a, b, output } => Remainder { a: a + offset, b: b + offset, output: output + offset },
                        HashEqual { a, b, output } => HashEqual { a: a + offset, b: b + offset, output: output + offset },
                        HashLessEq { a, b, output } => HashLessEq { a: a + offset, b: b + offset, output: output + offset },
                        AffineInt { terms, constant, floor, output } => AffineInt {
                            terms: terms.iter().map(|(k, o)| (k.clone(), op_shift(o))).collect(),
                            constant,
                            floor,
                            output: op_shift(&output),
                        },
                        Polynomial { input, terms, output } => {
                            Polynomial { input: op_shift(&input), terms, output: op_shift(&output) }
                        }
                        Bit { value, index, output } => Bit { value: value + offset, index: index + offset, output: output + offset },
                    }
                })
                .collect(),
        },
    }
}

pub fn shift_row(row: &[(usize, Rational)], offset: usize) -> Row {
    row.iter().map(|(c, k)| (c + offset, k.clone())).collect()
}

pub fn sign_readout(c: usize) -> Readout {
    Readout { read: ch(c), decision: Decision::Sign }
}
