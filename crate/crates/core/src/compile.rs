//! FO+M² sentences → unmasked, padded AHATs.
//!
//! Padding position v ∈ [1, nᵏ] (physical position n+1+v) stands for the
//! assignment whose slot t holds v[t] = ⌊(v−1)/n^{t−1}⌋ mod n + 1. Every
//! subformula gets a ±1 sign channel that is correct at every padding
//! position; the sentence is read at the last one.
//!
//! Depth: a setup prefix of at most k + 5 sublayers (uniform attention, hash
//! FFNs, the leveled slot-decoding gadgets), then per AST level at most one
//! gadget sublayer, one attention sublayer for token predicates, one FFN for
//! connectives, one attention sublayer for quantifiers and one threshold FFN
//! per quantifier node on that level. So depth ≤ k + 5 + 4ℓ + q for nesting
//! depth ℓ and q quantifier nodes.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::builder::{ch, lin, r, sign_readout, Builder, Channel, HeadSpec, Read, Row, Unit};
use crate::error::{Error, Result};
use crate::ir::{GadgetOp, Looping, Mask, Padding, PositionKind, TransformerIR, BLANK, BOS};
use crate::logic::{formula_metrics, Formula, Index};
use crate::rational::Rational;

#[derive(Clone, Debug, Default)]
pub struct CompileOptions {
    /// Refuse to emit idealized gadget sublayers (always fails: decoding needs them).
    pub strict_sublayers: bool,
    /// Reject constant sentences instead of wrapping them in a dummy ∃.
    pub no_promotion: bool,
    /// Leave this many unused channels before the first allocated one.
    pub channel_offset: usize,
    /// Extra unused channels at the end.
    pub extra_width: usize,
    /// Deliberate defect, for mutation-testing the differential harness.
    pub mutation: Option<Mutation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// ∀ accepts with one falsifying assignment to spare.
    ForallOffByOne,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompiledArtifact {
    #[serde(skip)]
    pub transformer: TransformerIR,
    pub plan: Vec<Channel>,
    /// Distinct variables (after dummy promotion).
    pub k: usize,
    /// Nesting depth.
    pub depth: usize,
}

/// v = Σ (v[t]−1)·n^{t−1} + 1.
pub fn assignment_index(tuple: &[usize], n: usize) -> Result<usize> {
    let mut v = 0usize;
    for &x in tuple.iter().rev() {
        if x < 1 || x > n {
            return Err(Error::Domain(format!("component {x} outside [1, {n}]")));
        }
        v = v * n + (x - 1);
    }
    Ok(v + 1)
}

pub fn assignment_tuple(v: usize, k: usize, n: usize) -> Result<Vec<usize>> {
    if v < 1 || n == 0 || v > n.pow(k as u32) {
        return Err(Error::Domain(format!("assignment {v} outside [1, {n}^{k}]")));
    }
    let mut rest = v - 1;
    Ok((0..k)
        .map(|_| {
            let d = rest % n;
            rest /= n;
            d + 1
        })
        .collect())
}

struct Ctx {
    b: Builder,
    slot_of: BTreeMap<String, usize>,
    slots: Vec<usize>,
    phi_one: usize,
    phi_n: usize,
    phi_log: usize,
    mutation: Option<Mutation>,
}

impl Ctx {
    fn index_hash(&self, ix: &Index) -> usize {
        match ix {
            Index::One => self.phi_one,
            Index::N => self.phi_n,
            Index::Var(v) => self.slots[self.slot_of[v]],
        }
    }

    /// Score terms matching every slot outside `free`, restricted to padding keys.
    fn agree_except(&self, free: &[usize]) -> Vec<(Row, Row)> {
        let mut pairs = Vec::new();
        for (t, &h) in self.slots.iter().enumerate() {
            if !free.contains(&t) {
                pairs.extend((0..4).map(|c| (ch(h + c), ch(h + c))));
            }
        }
        pairs.push((ch(self.b.one), ch(self.b.tok(BLANK))));
        pairs
    }
}

pub fn compile(f: &Formula, alphabet: &[String], opts: &CompileOptions) -> Result<CompiledArtifact> {
    if opts.strict_sublayers {
        return Err(Error::Unsupported(
            "strict sublayers: assignment decoding needs idealized quotient/remainder gadgets".into(),
        ));
    }
    if f.has_bit() {
        return Err(Error::Unsupported("bit predicates are not compiled; express them with M2".into()));
    }
    if let Some(v) = f.free_variables().into_iter().next() {
        return Err(Error::Invalid(format!("free variable {v}: only sentences compile")));
    }
    for a in alphabet {
        if a == BOS || a == BLANK {
            return Err(Error::Invalid(format!("{a:?} is reserved")));
        }
    }
    let mut f = f.clone();
    if f.variables().is_empty() {
        if opts.no_promotion {
            return Err(Error::Invalid("constant sentence (k = 0)".into()));
        }
        f = Formula::exists("_", f);
    }
    let (k, depth) = formula_metrics(&f);

    let mut b = Builder::with_layout(alphabet, opts.channel_offset, opts.extra_width);
    let one = b.one;
    let pos = b.alloc("pos", 1);
    b.set_position(PositionKind::InverseIndex, pos);
    let nfrac = b.alloc("n/N", 1);
    let invn = b.alloc("1/N", 1);
    let phi_n = b.alloc("phi(n)", 4);
    let phi_i = b.alloc("phi(i)", 4);
    let phi_one = b.alloc("phi(1)", 4);
    for (c, v) in crate::radical::ln_hash(&Rational::ONE).iter().enumerate() {
        b.embed_all(phi_one + c, v.as_rational().expect("phi(1) is rational"));
    }

    // n/N and 1/N by uniform attention over the whole sequence.
    let mut read = Read::new();
    let t = read.block(b.tok_rows());
    let inputs: Row = b
        .alphabet
        .iter()
        .enumerate()
        .filter(|(_, a)| *a != BOS && *a != BLANK)
        .map(|(i, _)| (t[i], r(1)))
        .collect();
    b.attention(
        read,
        vec![HeadSpec::new(Mask::Unmasked).value(nfrac, inputs).value(invn, vec![(t[0], r(1))])],
    );
    b.hash_ffn(ch(nfrac), ch(invn), phi_n);
    b.hash_ffn(ch(one), ch(pos), phi_i);

    // Assignment decoding.
    let mut ops = Vec::new();
    let (phi_log, op) = b.affine_hash("phi(i-1)", &[(1, phi_i)], -1, Some(0));
    ops.push(op);
    let (vm1, op) = b.affine_hash("phi(v-1)", &[(1, phi_i), (-1, phi_n)], -2, Some(0));
    ops.push(op);
    let (nsafe, op) = b.affine_hash("phi(max(n,1))", &[(1, phi_n)], 0, Some(1));
    ops.push(op);
    let mut rest = vm1;
    let mut slots = Vec::new();
    for t in 0..k {
        let digit = b.alloc(&format!("digit[{t}]"), 4);
        ops.push(GadgetOp::Remainder { a: rest, b: nsafe, output: digit });
        let (slot, op) = b.affine_hash(&format!("phi(v[{}])", t + 1), &[(1, digit)], 1, None);
        ops.push(op);
        slots.push(slot);
        if t + 1 < k {
            let q = b.alloc(&format!("rest[{t}]"), 4);
            ops.push(GadgetOp::Quotient { a: rest, b: nsafe, output: q });
            rest = q;
        }
    }
    b.gadgets(ops);

    let names: Vec<String> = f.variables().into_iter().collect();
    let slot_of = names.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
    let mut cx = Ctx { b, slot_of, slots, phi_one, phi_n, phi_log, mutation: opts.mutation };

    // Bottom-up, one group per AST level.
    let mut chan: BTreeMap<*const Formula, usize> = BTreeMap::new();
    let nodes = f.preorder();
    for level in 1..=depth {
        let here: Vec<&Formula> = nodes.iter().copied().filter(|n| n.depth() == level).collect();
        for n in &here {
            let c = cx.b.alloc(&format!("[{}]", n), 1);
            chan.insert(*n as *const _, c);
        }
        let out = |n: &Formula| chan[&(n as *const _)];
        emit_atoms(&mut cx, &here, &out);
        emit_connectives(&mut cx, &here, &out);
        emit_quantifiers(&mut cx, &here, &out);
    }
    let root = chan[&(&f as *const _)];
    let plan = cx.b.plan().to_vec();
    let ir = cx.b.finish(Looping { exponent: 0, coefficient: 1 }, Padding::monomial(1, k as u32), sign_readout(root));
    Ok(CompiledArtifact { transformer: ir, plan, k, depth })
}

fn emit_atoms(cx: &mut Ctx, here: &[&Formula], out: &dyn Fn(&Formula) -> usize) {
    let mut ops = Vec::new();
    let mut heads = Vec::new();
    let mut read = Read::new();
    let t = read.block(cx.b.tok_rows());
    for n in here {
        let o = out(n);
        match n {
            Formula::Eq(a, c) => ops.push(GadgetOp::HashEqual { a: cx.index_hash(a), b: cx.index_hash(c), output: o }),
            Formula::Leq(a, c) => ops.push(GadgetOp::HashLessEq { a: cx.index_hash(a), b: cx.index_hash(c), output: o }),
            Formula::Geq(a, c) => ops.push(GadgetOp::HashLessEq { a: cx.index_hash(c), b: cx.index_hash(a), output: o }),
            Formula::Q(s, ix) => match cx.b.alphabet.iter().position(|a| a == s) {
                // Symbol outside the alphabet: constantly false.
                None => cx.b.embed_all(o, r(-1)),
                Some(si) => {
                    // ±1 by the token at logical position ⟦ix⟧.
                    let value = t.iter().enumerate().map(|(j, &x)| (x, r(if j == si { 1 } else { -1 }))).collect();
                    heads.push(
                        HeadSpec::new(Mask::Unmasked)
                            .hash_match(r(1), cx.index_hash(ix), cx.phi_log)
                            .value(o, value),
                    );
                }
            },
            _ => {}
        }
    }
    if !ops.is_empty() {
        cx.b.gadgets(ops);
    }
    if !heads.is_empty() {
        cx.b.attention(read, heads);
    }
}

fn emit_connectives(cx: &mut Ctx, here: &[&Formula], out: &dyn Fn(&Formula) -> usize) {
    let mut read = Read::new();
    let mut units = Vec::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let one = cx.b.one;
    let mut x = |read: &mut Read, c: usize| *rows.entry(c).or_insert_with(|| read.scalar(c));
    for n in here {
        let o = out(n);
        match n {
            Formula::And(a, c) => {
                let (p, q, u) = (x(&mut read, out(a)), x(&mut read, out(c)), read.one(one));
                cx.b.embed_all(o, r(-1));
                units.push(Unit { pre: lin(&[(p, 1), (q, 1), (u, -1)]), out: lin(&[(o, 2)]) });
            }
            Formula::Or(a, c) => {
                let (p, q, u) = (x(&mut read, out(a)), x(&mut read, out(c)), read.one(one));
                cx.b.embed_all(o, r(1));
                units.push(Unit { pre: lin(&[(p, -1), (q, -1), (u, -1)]), out: lin(&[(o, -2)]) });
            }
            Formula::Not(a) => {
                let p = x(&mut read, out(a));
                units.extend(Builder::linear_units(lin(&[(p, 1)]), lin(&[(o, -1)])));
            }
            _ => {}
        }
    }
    if !units.is_empty() {
        cx.b.ffn(read, units);
    }
}

fn emit_quantifiers(cx: &mut Ctx, here: &[&Formula], out: &dyn Fn(&Formula) -> usize) {
    // Mutant only: [v[t] = 1] per ∀ node, whose mean over the matching
    // assignments is 1/m.
    let mut first_slot: BTreeMap<*const Formula, usize> = BTreeMap::new();
    if cx.mutation == Some(Mutation::ForallOffByOne) {
        let mut ops = Vec::new();
        for n in here {
            if let Formula::Forall(v, _) = n {
                let flag = cx.b.alloc(&format!("first[{}]", n), 1);
                ops.push(GadgetOp::HashEqual { a: cx.slots[cx.slot_of[v]], b: cx.phi_one, output: flag });
                first_slot.insert(*n as *const _, flag);
            }
        }
        if !ops.is_empty() {
            cx.b.gadgets(ops);
        }
    }
    let mut read = Read::new();
    let mut heads = Vec::new();
    let mut thresholds = Vec::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for n in here {
        let (free, body) = match n {
            Formula::Exists(v, a) | Formula::Forall(v, a) => (vec![cx.slot_of[v]], a),
            Formula::Maj2(i, j, a) => (vec![cx.slot_of[i], cx.slot_of[j]], a),
            _ => continue,
        };
        let o = out(n);
        let p = *rows.entry(out(body)).or_insert_with(|| read.scalar(out(body)));
        // Mean of the body over the matching assignments: (2c − m)/m for c of m true.
        let mean = cx.b.alloc(&format!("mean[{}]", n), 1);
        heads.push(HeadSpec::new(Mask::Unmasked).term(r(1), cx.agree_except(&free)).value(mean, lin(&[(p, 1)])));
        let inv_m = first_slot.get(&(*n as *const _)).map(|&flag| {
            let c = cx.b.alloc(&format!("1/m[{}]", n), 1);
            let (x, u) = (read.scalar(flag), read.one(cx.b.one));
            let half = Rational::new(1, 2);
            heads.push(HeadSpec::new(Mask::Unmasked).term(r(1), cx.agree_except(&free)).value(c, vec![(x, half.clone()), (u, half)]));
            c
        });
        thresholds.push((*n, o, mean, inv_m));
    }
    if heads.is_empty() {
        return;
    }
    cx.b.attention(read, heads);
    let one = cx.b.one;
    for (n, o, mean, inv_m) in thresholds {
        match n {
            // Mutant: c ≥ m − 1 ⇔ mean − 1 + 2/m ≥ 0.
            Formula::Forall(..) if inv_m.is_some() => {
                cx.b.embed_all(o, r(1));
                cx.b.sign_ffn(lin(&[(mean, 1), (one, -1), (inv_m.unwrap(), 2)]), vec![], lin(&[(o, -2)]));
            }
            // c ≥ 1 ⇔ mean + 1 > 0.
            Formula::Exists(..) => {
                cx.b.embed_all(o, r(-1));
                cx.b.sign_ffn(lin(&[(mean, 1), (one, 1)]), lin(&[(o, 2)]), vec![]);
            }
            // c = m ⇔ 1 − mean = 0.
            Formula::Forall(..) => {
                cx.b.embed_all(o, r(1));
                cx.b.sign_ffn(lin(&[(one, 1), (mean, -1)]), lin(&[(o, -2)]), vec![]);
            }
            // Strict majority ⇔ mean > 0.
            _ => {
                cx.b.embed_all(o, r(-1));
                cx.b.sign_ffn(ch(mean), lin(&[(o, 2)]), vec![]);
            }
        }
    }
}
