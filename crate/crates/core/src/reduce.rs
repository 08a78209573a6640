//! Tokenwise reductions r_f(w, i) = f(w)_i and stacking a recognizer on top
//! of a transformer that computes them.
//!
//! Stacked layout for input length n, with β index bits:
//!
//! ```text
//! block 0 : $ w □ …            (B positions)
//! block t : T_f's view of (w, b(t)), padded to B;  t = 1..K
//! ```
//!
//! B = 1 + n + β + p_f(n+β) and K = M + p_L(M) where M bounds |f(w)|.
//! Every position recovers (t, o) from its index, fetches the token at offset
//! o (or the o-th bit of t), and runs T_f confined to its own block. The final
//! token of block t then carries f(w)_t, and T_L runs over block-final tokens
//! 0..N_L−1 (block 0 standing in for T_L's BoS).

use std::fmt;

use crate::builder::{ch, lin, r, scaled, shift_row, shift_sublayer, Builder, HeadSpec, Read, Row, Unit};
use crate::error::{Error, Result};
use crate::ir::{
    Decision, GadgetOp, Head, Looping, Mask, Matrix, Operand, Padding, PositionKind, Readout, ScoreTerm, Sublayer,
    TransformerIR, BLANK, BOS,
};
use crate::mask::{choose_dominance_constant, hash_gap};
use crate::poly::Poly;
use crate::rational::Rational;

pub const BIT0: &str = "0";
pub const BIT1: &str = "1";

/// Built-in word functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Identity,
    Reverse,
    /// w ↦ ww
    Duplicate,
}

impl Reduction {
    pub const ALL: [Reduction; 3] = [Reduction::Identity, Reduction::Reverse, Reduction::Duplicate];

    pub fn name(self) -> &'static str {
        match self {
            Reduction::Identity => "identity",
            Reduction::Reverse => "reverse",
            Reduction::Duplicate => "duplicate",
        }
    }

    pub fn by_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown reduction {s:?} (identity, reverse, duplicate)")))
    }

    /// (coefficient, degree) with |f(w)| ≤ coefficient·|w|^degree.
    pub fn length_bound(self) -> (u64, u32) {
        match self {
            Reduction::Duplicate => (2, 1),
            _ => (1, 1),
        }
    }

    pub fn apply(self, w: &[String]) -> Vec<String> {
        match self {
            Reduction::Identity => w.to_vec(),
            Reduction::Reverse => w.iter().rev().cloned().collect(),
            Reduction::Duplicate => w.iter().chain(w).cloned().collect(),
        }
    }

    /// f(w)_i (1-based), or □ out of range.
    pub fn token(self, w: &[String], i: usize) -> String {
        let fw = self.apply(w);
        match i.checked_sub(1).and_then(|k| fw.get(k)) {
            Some(t) => t.clone(),
            None => BLANK.to_string(),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed-width binary encoding, most significant bit first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryIndex {
    pub bits: Vec<bool>,
}

impl BinaryIndex {
    pub fn encode(i: usize, width: usize) -> Result<Self> {
        if i == 0 || (width < usize::BITS as usize && i >> width != 0) {
            return Err(Error::Domain(format!("index {i} does not fit {width} bits (or is 0)")));
        }
        Ok(BinaryIndex { bits: (0..width).rev().map(|k| (i >> k) & 1 == 1).collect() })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Parse(format!("binary index: unexpected {c:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return Err(Error::Parse("binary index: empty".into()));
        }
        Ok(BinaryIndex { bits })
    }

    pub fn decode(&self) -> usize {
        self.bits.iter().fold(0, |a, &b| 2 * a + b as usize)
    }

    pub fn tokens(&self) -> Vec<String> {
        self.bits.iter().map(|&b| if b { BIT1 } else { BIT0 }.to_string()).collect()
    }
}

impl fmt::Display for BinaryIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// (w, b(i), σ) ∈ R_f.
pub fn membership_r(f: Reduction, w: &[String], b: &BinaryIndex, sigma: &str) -> bool {
    f.token(w, b.decode()) == sigma
}

/// Input of a tokenwise transformer: w followed by the bits of i.
pub fn tf_input(w: &[String], b: &BinaryIndex) -> Vec<String> {
    w.iter().cloned().chain(b.tokens()).collect()
}

/// Causal transformer over Σ ∪ {0,1} reading (w, b(i)) with exactly `bits`
/// index bits and emitting f(w)_i at its last position.
pub fn reduction_transformer(f: Reduction, alphabet: &[String], bits: usize) -> Result<TransformerIR> {
    if bits == 0 || bits > 60 {
        return Err(Error::Invalid("index width must be in 1..=60".into()));
    }
    for a in alphabet {
        if a == BIT0 || a == BIT1 || a == BOS || a == BLANK {
            return Err(Error::Invalid(format!("alphabet symbol {a:?} is reserved")));
        }
    }
    let mut inputs = alphabet.to_vec();
    inputs.extend([BIT0.to_string(), BIT1.to_string()]);
    let mut b = Builder::new(&inputs);
    let one = b.one;

    let (invi, cntf) = (b.alloc("1/i", 1), b.alloc("count/i", 1));
    let mut read = Read::new();
    let all = b.alphabet.clone();
    let tr = read.block(b.tok_rows());
    let at = |t: &str| tr[all.iter().position(|x| x == t).unwrap()];
    let count: Row = alphabet.iter().map(|a| (at(a), r(1))).collect();
    b.attention(read, vec![HeadSpec::new(Mask::Causal).value(invi, vec![(at(BOS), r(1))]).value(cntf, count)]);
    let (phi_i, phi_n) = (b.alloc("phi(i)", 4), b.alloc("phi(n)", 4));
    b.hash_ffn(ch(one), ch(invi), phi_i);
    b.hash_ffn(ch(cntf), ch(invi), phi_n);

    // Bit k of the index sits at position n+1+k.
    let mut ops = Vec::new();
    let mut bitpos = Vec::new();
    for k in 1..=bits {
        let (c, op) = b.affine_hash(&format!("pos(bit{k})"), &[(1, phi_n)], 1 + k as i128, None);
        ops.push(op);
        bitpos.push(c);
    }
    b.gadgets(ops);
    let bit: Vec<usize> = (1..=bits).map(|k| b.alloc(&format!("bit{k}"), 1)).collect();
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let one_tok = tr[all.iter().position(|x| x == BIT1).unwrap()];
    let heads = (0..bits).map(|k| HeadSpec::new(Mask::Causal).hash_match(r(1), bitpos[k], phi_i).value(bit[k], vec![(one_tok, r(1))])).collect();
    b.attention(read, heads);

    let mut ops = Vec::new();
    let phi_idx = b.alloc("phi(index)", 4);
    ops.push(GadgetOp::AffineInt {
        terms: (0..bits).map(|k| (r(1i128 << (bits - 1 - k)), Operand::Scalar(bit[k]))).collect(),
        constant: r(0),
        floor: None,
        output: Operand::Hash(phi_idx),
    });
    let (phi_one, op) = b.affine_hash("phi(1)", &[], 1, None);
    ops.push(op);
    let (ge1, in_range) = (b.alloc("index>=1", 1), b.alloc("index<=len", 1));
    ops.push(GadgetOp::HashLessEq { a: phi_one, b: phi_idx, output: ge1 });
    let phi_len = match f {
        Reduction::Duplicate => {
            let (c, op) = b.affine_hash("phi(2n)", &[(2, phi_n)], 0, None);
            ops.push(op);
            c
        }
        _ => phi_n,
    };
    ops.push(GadgetOp::HashLessEq { a: phi_idx, b: phi_len, output: in_range });
    // Physical position of the source symbol.
    let target = match f {
        Reduction::Identity => {
            let (c, op) = b.affine_hash("target", &[(1, phi_idx)], 1, None);
            ops.push(op);
            c
        }
        Reduction::Reverse => {
            let (c, op) = b.affine_hash("target", &[(1, phi_n), (-1, phi_idx)], 2, Some(1));
            ops.push(op);
            c
        }
        Reduction::Duplicate => {
            let (nsafe, op) = b.affine_hash("max(n,1)", &[(1, phi_n)], 0, Some(1));
            ops.push(op);
            let (im1, op) = b.affine_hash("index-1", &[(1, phi_idx)], -1, Some(0));
            ops.push(op);
            let rem = b.alloc("(index-1) mod n", 4);
            ops.push(GadgetOp::Remainder { a: im1, b: nsafe, output: rem });
            let (c, op) = b.affine_hash("target", &[(1, rem)], 2, None);
            ops.push(op);
            c
        }
    };
    b.gadgets(ops);

    // Fetch: one channel per symbol plus "other", so the block is one-hot.
    let fetched = b.alloc("fetched", alphabet.len() + 1);
    let other = fetched + alphabet.len();
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let mut head = HeadSpec::new(Mask::Causal).hash_match(r(1), target, phi_i);
    let mut rest = Row::new();
    for (k, t) in all.iter().enumerate() {
        match alphabet.iter().position(|a| a == t) {
            Some(s) => head = head.value(fetched + s, vec![(tr[k], r(1))]),
            None => rest.push((tr[k], r(1))),
        }
    }
    b.attention(read, vec![head.value(other, rest)]);

    // s = (ge1 + in_range)/2 is 1 iff the index is valid.
    let out = b.alloc("out", alphabet.len() + 1);
    let blank = out + alphabet.len();
    let mut read = Read::new();
    let fr = read.channels(fetched, alphabet.len() + 1);
    let (g, v) = (read.scalar(ge1), read.scalar(in_range));
    let u = read.one(one);
    let half = Rational::new(1, 2);
    let s: Row = vec![(g, half.clone()), (v, half)];
    let mut units = Vec::new();
    for k in 0..alphabet.len() {
        units.push(Unit { pre: crate::builder::plus(&s, &vec![(fr[k], r(1)), (u, r(-1))]), out: ch(out + k) });
    }
    units.push(Unit { pre: crate::builder::plus(&scaled(&s, &r(-1)), &vec![(u, r(1))]), out: ch(blank) });
    units.push(Unit { pre: scaled(&s, &r(-1)), out: vec![(blank, r(-1))] });
    units.push(Unit { pre: crate::builder::plus(&s, &vec![(fr[alphabet.len()], r(1)), (u, r(-1))]), out: ch(blank) });
    b.ffn(read, units);

    let mut logits: Vec<(String, Row)> = alphabet.iter().enumerate().map(|(k, a)| (a.clone(), ch(out + k))).collect();
    logits.push((BLANK.to_string(), ch(blank)));
    Ok(b.finish(Looping { exponent: 0, coefficient: 1 }, Padding::none(), Readout { read: vec![], decision: Decision::Argmax { logits } }))
}

/// Bounds for stacking: |f(w)| ≤ coefficient·n^degree, β index bits, n ≤ max_n.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackBounds {
    pub coefficient: u64,
    pub degree: u32,
    pub bits: usize,
    pub max_n: usize,
}

#[derive(Clone, Debug)]
pub struct Stacked {
    pub transformer: TransformerIR,
    pub bounds: StackBounds,
    /// Number of non-input blocks K(n).
    pub blocks: Poly,
    /// Block size B(n).
    pub block_size: Poly,
    /// Unrolled sublayer ranges of the embedded T_f and T_L.
    pub tf_steps: std::ops::Range<usize>,
    pub tl_steps: std::ops::Range<usize>,
}

impl Stacked {
    pub fn check(&self, n: usize) -> Result<()> {
        let k = self.blocks.eval(n as u64)?;
        if n > self.bounds.max_n || (self.bounds.bits < 64 && k >> self.bounds.bits != 0) {
            return Err(Error::Domain(format!(
                "input length {n} exceeds the stacking bounds (max_n = {}, {} index bits)",
                self.bounds.max_n, self.bounds.bits
            )));
        }
        Ok(())
    }

    pub fn run(&self, w: &[String]) -> Result<crate::sim::Outcome> {
        self.check(w.len())?;
        crate::sim::run(&self.transformer, w)
    }
}

fn flatten(t: &TransformerIR) -> Result<Vec<Sublayer>> {
    if t.looping.exponent != 0 && !t.blocks.b.is_empty() {
        return Err(Error::Unsupported("loop count grows with the input; only constant unrolling stacks".into()));
    }
    let mut out = t.blocks.a.clone();
    for _ in 0..t.looping.coefficient {
        out.extend(t.blocks.b.iter().cloned());
    }
    out.extend(t.blocks.c.iter().cloned());
    Ok(out)
}

fn embed_row(t: &TransformerIR, tok: &str, offset: usize) -> Row {
    t.embedding[tok].iter().enumerate().filter(|(_, v)| !v.is_zero()).map(|(c, v)| (c + offset, v.clone())).collect()
}

/// Blocks needed for length bound M(n) and recognizer padding p_L: M + p_L(M).
fn block_count(b: &StackBounds, tl: &TransformerIR) -> Result<Poly> {
    let m = Poly::monomial(b.coefficient, b.degree);
    m.add(&Poly::from_padding(&tl.padding)?.compose(&m)?)
}

/// Smallest index width covering every block for n ≤ max_n.
pub fn bits_for(coefficient: u64, degree: u32, tl: &TransformerIR, max_n: usize) -> Result<usize> {
    let probe = StackBounds { coefficient, degree, bits: 0, max_n };
    let k = block_count(&probe, tl)?.eval(max_n as u64)?;
    Ok((64 - k.leading_zeros() as usize).max(1))
}

/// Stack T_L on top of the tokenwise T_f. T_f reads (w, b(i)) over Σ ∪ {0,1}
/// and must expose its output as a one-hot block through Argmax logits that
/// are single channels; T_L reads T_f's output symbols.
pub fn stack(tf: &TransformerIR, tl: &TransformerIR, bounds: &StackBounds) -> Result<Stacked> {
    tf.check()?;
    tl.check()?;
    let beta = bounds.bits;
    if beta == 0 {
        return Err(Error::Invalid("index width must be positive".into()));
    }
    for t in [BIT0, BIT1] {
        if tf.token_index(t).is_none() {
            return Err(Error::Invalid(format!("T_f must read index bits; {t:?} is missing from its alphabet")));
        }
    }
    let Decision::Argmax { logits } = &tf.readout.decision else {
        return Err(Error::Unsupported("T_f must emit a token (argmax readout)".into()));
    };
    let mut out_chan = Vec::new();
    for (tok, row) in logits {
        match row.as_slice() {
            [(c, k)] if *k == Rational::ONE => out_chan.push((tok.clone(), *c)),
            _ => return Err(Error::Unsupported("T_f logits must be single one-hot channels".into())),
        }
        if tl.token_index(tok).is_none() {
            return Err(Error::Invalid(format!("T_f emits {tok:?}, which T_L does not read")));
        }
    }
    let Some(blank_out) = out_chan.iter().find(|(t, _)| t == BLANK).map(|x| x.1) else {
        return Err(Error::Invalid("T_f must be able to emit □".into()));
    };
    if tl.position_encoding.kind == PositionKind::IndexOverLength || tf.position_encoding.kind == PositionKind::IndexOverLength {
        return Err(Error::Unsupported("index_over_length position encoding".into()));
    }
    let inputs: Vec<String> = tf.input_alphabet().into_iter().filter(|t| t != BIT0 && t != BIT1).collect();
    let (tf_subs, tl_subs) = (flatten(tf)?, flatten(tl)?);

    let beta_p = beta as u64;
    let blocks = block_count(bounds, tl)?;
    let pf = Poly::from_padding(&tf.padding)?;
    let block_size = Poly(vec![1 + beta_p, 1]).add(&pf.compose(&Poly(vec![beta_p, 1]))?)?;
    let total = blocks.add(&Poly::constant(1))?.mul(&block_size)?;
    let padding = total.sub(&Poly(vec![1, 1]))?.to_padding();
    let n_l = Poly(vec![1, 1]).add(&Poly::from_padding(&tl.padding)?)?;
    let top = blocks.eval(bounds.max_n as u64)?;

    let (mf, ml) = (tf.width, tl.width);
    let mut b = Builder::with_layout(&inputs, mf + ml, 0);
    let one = b.one;
    let dollar = b.tok(BOS);

    // Position arithmetic: i − 1 = t·B + (o − 1).
    let (invi, cntf) = (b.alloc("1/i", 1), b.alloc("count/i", 1));
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let count: Row = b.alphabet.iter().enumerate().filter(|(_, a)| inputs.contains(a)).map(|(k, _)| (tr[k], r(1))).collect();
    b.attention(read, vec![HeadSpec::new(Mask::Causal).value(invi, vec![(tr[0], r(1))]).value(cntf, count)]);
    let (phi_i, phi_n) = (b.alloc("phi(i)", 4), b.alloc("phi(n)", 4));
    b.hash_ffn(ch(one), ch(invi), phi_i);
    b.hash_ffn(ch(cntf), ch(invi), phi_n);

    let mut ops = Vec::new();
    let (phi_im1, op) = b.affine_hash("phi(i-1)", &[(1, phi_i)], -1, Some(0));
    ops.push(op);
    let phi_b = b.alloc("phi(B)", 4);
    ops.push(GadgetOp::Polynomial { input: Operand::Hash(phi_n), terms: block_size.gadget_terms(), output: Operand::Hash(phi_b) });
    let (phi_t, phi_om1) = (b.alloc("phi(t)", 4), b.alloc("phi(o-1)", 4));
    ops.push(GadgetOp::Quotient { a: phi_im1, b: phi_b, output: phi_t });
    ops.push(GadgetOp::Remainder { a: phi_im1, b: phi_b, output: phi_om1 });
    let (phi_o, op) = b.affine_hash("phi(o)", &[(1, phi_om1)], 1, None);
    ops.push(op);
    let (phi_one, op) = b.affine_hash("phi(1)", &[], 1, None);
    ops.push(op);
    let (bit_lo, op) = b.affine_hash("phi(n+2)", &[(1, phi_n)], 2, None);
    ops.push(op);
    let (bit_hi, op) = b.affine_hash("phi(n+1+beta)", &[(1, phi_n)], 1 + beta as i128, None);
    ops.push(op);
    let (bit_ix, op) = b.affine_hash("bit index", &[(1, phi_n), (-1, phi_o)], 2 + beta as i128, Some(1));
    ops.push(op);
    let flags: Vec<usize> = ["after-input", "before-end-of-bits", "bit", "first", "final", "t>=1"].iter().map(|s| b.alloc(s, 1)).collect();
    let [lo, hi, bitv, first, fin, nz] = flags[..] else { unreachable!() };
    ops.push(GadgetOp::HashLessEq { a: bit_lo, b: phi_o, output: lo });
    ops.push(GadgetOp::HashLessEq { a: phi_o, b: bit_hi, output: hi });
    ops.push(GadgetOp::Bit { value: phi_t, index: bit_ix, output: bitv });
    ops.push(GadgetOp::HashEqual { a: phi_o, b: phi_one, output: first });
    ops.push(GadgetOp::HashEqual { a: phi_o, b: phi_b, output: fin });
    ops.push(GadgetOp::HashLessEq { a: phi_one, b: phi_t, output: nz });
    b.gadgets(ops);

    // Token at offset o of the real input; 1/o for T_f's position channel.
    let nt = b.alphabet.len();
    let fetched = b.alloc("fetched", nt);
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let fr = read.scalar(first);
    let u = read.one(one);
    let mut copy = HeadSpec::new(Mask::Causal).hash_match(r(1), phi_o, phi_i);
    for (k, &x) in tr.iter().enumerate() {
        copy = copy.value(fetched + k, vec![(x, r(1))]);
    }
    let mut heads = vec![copy];
    let half = Rational::new(1, 2);
    if tf.position_encoding.kind == PositionKind::InverseIndex {
        heads.push(
            HeadSpec::new(Mask::Causal)
                .hash_match(r(1), phi_t, phi_t)
                .value(tf.position_encoding.channel, vec![(fr, half.clone()), (u, half.clone())]),
        );
    }
    b.attention(read, heads);

    // T_f's token: the fetched one, or a bit of t inside the index segment.
    let mut read = Read::new();
    let fr = read.channels(fetched, nt);
    let (l, h, bv) = (read.scalar(lo), read.scalar(hi), read.scalar(bitv));
    let u = read.one(one);
    let isbit: Row = vec![(l, half.clone()), (h, half.clone())];
    let mut units = Vec::new();
    for (k, tok) in b.alphabet.iter().enumerate() {
        if tf.token_index(tok).is_none() {
            return Err(Error::Invalid(format!("T_f does not read {tok:?}")));
        }
        units.push(Unit { pre: crate::builder::plus(&vec![(fr[k], r(1))], &scaled(&isbit, &r(-1))), out: embed_row(tf, tok, 0) });
    }
    let bit_half: Row = vec![(bv, half.clone()), (u, half.clone())];
    units.push(Unit { pre: crate::builder::plus(&isbit, &crate::builder::plus(&bit_half, &vec![(u, r(-1))])), out: embed_row(tf, BIT1, 0) });
    units.push(Unit { pre: crate::builder::plus(&isbit, &scaled(&bit_half, &r(-1))), out: embed_row(tf, BIT0, 0) });
    b.ffn(read, units);
    let tf_start = b.depth();

    // T_f, confined to its own block.
    let wf = &choose_dominance_constant(tf) / &hash_gap(top as usize);
    let own: Vec<Row> = (0..4).map(|k| ch(phi_t + k)).collect();
    for s in tf_subs {
        b.push(match s {
            Sublayer::Attention { prenorm, heads, output } => {
                let heads = heads
                    .into_iter()
                    .map(|hd| {
                        let mut aux = hd.aux.clone();
                        aux.push(ScoreTerm { weight: wf.clone(), query: Matrix::from_rows(0, &own), key: Matrix::from_rows(0, &own) });
                        Head { aux, ..hd }
                    })
                    .collect();
                Sublayer::Attention { prenorm, heads, output }
            }
            other => other,
        });
    }
    let tf_end = b.depth();

    // Non-blank outputs so far give m = |f(w)| once t ≥ m.
    let nb = b.alloc("nonblank-final", 1);
    let mut read = Read::new();
    let or: Vec<usize> = read.block(out_chan.iter().map(|(_, c)| ch(*c)).collect());
    let (fi, z) = (read.scalar(fin), read.scalar(nz));
    let ob = or[out_chan.iter().position(|(_, c)| *c == blank_out).unwrap()];
    b.ffn(read, vec![Unit { pre: vec![(fi, half.clone()), (z, half.clone()), (ob, r(-1))], out: ch(nb) }]);
    let mcnt = b.alloc("m/i", 1);
    let mut read = Read::new();
    let x = read.scalar(nb);
    b.attention(read, vec![HeadSpec::new(Mask::Causal).value(mcnt, vec![(x, r(1))])]);
    let phi_m = b.alloc("phi(m)", 4);
    b.hash_ffn(ch(mcnt), ch(invi), phi_m);
    let mut ops = Vec::new();
    let phi_nl = b.alloc("phi(N_L)", 4);
    ops.push(GadgetOp::Polynomial { input: Operand::Hash(phi_m), terms: n_l.gadget_terms(), output: Operand::Hash(phi_nl) });
    let (phi_t1, op) = b.affine_hash("phi(t+1)", &[(1, phi_t)], 1, None);
    ops.push(op);
    let (act, last) = (b.alloc("active", 1), b.alloc("last", 1));
    ops.push(GadgetOp::HashLessEq { a: phi_t1, b: phi_nl, output: act });
    ops.push(GadgetOp::HashEqual { a: phi_t1, b: phi_nl, output: last });
    b.gadgets(ops);

    // Allowed T_L positions, the last one, and T_L's embedding.
    let (af, lf) = (b.alloc("tl-position", 1), b.alloc("tl-last", 1));
    let mut read = Read::new();
    let or: Vec<usize> = read.block(out_chan.iter().map(|(_, c)| ch(*c)).collect());
    let (fi, z, a, la) = (read.scalar(fin), read.scalar(nz), read.scalar(act), read.scalar(last));
    let u = read.one(one);
    let mut units = vec![
        Unit { pre: vec![(fi, half.clone()), (a, half.clone())], out: ch(af) },
        Unit { pre: vec![(fi, half.clone()), (la, half.clone())], out: ch(lf) },
        Unit { pre: vec![(u, half.clone()), (z, Rational::new(-1, 2))], out: embed_row(tl, BOS, mf) },
    ];
    for ((tok, _), &o) in out_chan.iter().zip(&or) {
        units.push(Unit { pre: vec![(o, r(1)), (z, half.clone()), (u, Rational::new(-1, 2))], out: embed_row(tl, tok, mf) });
    }
    b.ffn(read, units);
    if tl.position_encoding.kind == PositionKind::InverseIndex {
        let mut read = Read::new();
        let z = read.scalar(nz);
        let u = read.one(one);
        b.attention(
            read,
            vec![HeadSpec::new(Mask::Causal)
                .term(r(1), vec![(ch(one), ch(af))])
                .value(tl.position_encoding.channel + mf, vec![(u, half.clone()), (z, Rational::new(-1, 2))])],
        );
    }
    let tl_start = b.depth();

    // T_L over block-final tokens; everything else looks at position 1.
    let cl = choose_dominance_constant(tl);
    let wl = &cl + &Rational::ONE;
    let w2 = &(&wl + &cl) + &Rational::ONE;
    for s in tl_subs {
        b.push(match shift_sublayer(&s, mf) {
            Sublayer::Attention { prenorm, heads, output } => {
                let heads = heads
                    .into_iter()
                    .map(|hd| {
                        let mut aux = hd.aux.clone();
                        aux.push(ScoreTerm { weight: wl.clone(), query: Matrix::from_rows(0, &[ch(one)]), key: Matrix::from_rows(0, &[ch(af)]) });
                        aux.push(ScoreTerm {
                            weight: w2.clone(),
                            query: Matrix::from_rows(0, &[lin(&[(one, 1), (af, -1)])]),
                            key: Matrix::from_rows(0, &[ch(dollar)]),
                        });
                        Head { aux, ..hd }
                    })
                    .collect();
                Sublayer::Attention { prenorm, heads, output }
            }
            other => other,
        });
    }
    let tl_end = b.depth();

    // Bring T_L's readout to the physical last position.
    let rows: Vec<Row> = match &tl.readout.decision {
        Decision::Sign => vec![shift_row(&tl.readout.read, mf)],
        Decision::Argmax { logits } => logits.iter().map(|(_, row)| shift_row(row, mf)).collect(),
    };
    let res = b.alloc("readout", rows.len());
    let mut read = Read::new();
    let mut used: Vec<usize> = rows.iter().flatten().map(|(c, _)| *c).collect();
    used.sort_unstable();
    used.dedup();
    let idx: Vec<usize> = used.iter().map(|&c| read.scalar(c)).collect();
    let mut head = HeadSpec::new(Mask::Causal).term(r(1), vec![(ch(one), ch(lf))]);
    for (k, row) in rows.iter().enumerate() {
        let expr: Row = row.iter().map(|(c, v)| (idx[used.iter().position(|x| x == c).unwrap()], v.clone())).collect();
        head = head.value(res + k, expr);
    }
    b.attention(read, vec![head]);
    let readout = match &tl.readout.decision {
        Decision::Sign => Readout { read: ch(res), decision: Decision::Sign },
        Decision::Argmax { logits } => Readout {
            read: vec![],
            decision: Decision::Argmax { logits: logits.iter().enumerate().map(|(k, (t, _))| (t.clone(), ch(res + k))).collect() },
        },
    };
    let transformer = b.finish(Looping { exponent: 0, coefficient: 1 }, padding, readout);
    Ok(Stacked {
        transformer,
        bounds: bounds.clone(),
        blocks,
        block_size,
        tf_steps: tf_start..tf_end,
        tl_steps: tl_start..tl_end,
    })
}

/// Stack a built-in reduction under T_L, sized for inputs up to `max_n`.
pub fn stack_builtin(f: Reduction, tl: &TransformerIR, max_n: usize) -> Result<Stacked> {
    let (coefficient, degree) = f.length_bound();
    let bits = bits_for(coefficient, degree, tl, max_n)?;
    let alphabet: Vec<String> = tl.input_alphabet();
    let tf = reduction_transformer(f, &alphabet, bits)?;
    stack(&tf, tl, &StackBounds { coefficient, degree, bits, max_n })
}
