//! Unmasked / mixed-masked → causally masked conversion.
//!
//! With N′ the original sequence length and ℓ its number of attention
//! sublayers, the converted input is laid out as ℓ+1 blocks of N′ positions:
//! block 0 is the real sequence and blocks 1..ℓ are padding that re-simulate
//! it (each position fetches the token at its offset). In attention layer a a
//! query in block b looks at block b−1 (unmasked heads) or at its own block
//! prefix (causal heads), so block b is exact through layer b and the last
//! block reproduces the original outputs. Queries with b < a are stale; from
//! layer 2 on they are sent to BoS so their scores stay well-separated.

use crate::builder::{affine_op, ch, lin, r, Builder, HeadSpec, Read, Row};
use crate::error::{Error, Result};
use crate::ir::{
    GadgetOp, Head, Looping, Mask, Matrix, Operand, PadTerm, Padding, PositionKind, ScoreTerm, Sublayer,
    TransformerIR, BOS,
};
use crate::rational::Rational;

fn l1(row: &[(usize, Rational)]) -> Rational {
    row.iter().fold(Rational::ZERO, |a, (_, v)| &a + &v.abs())
}

fn bilinear_bound(q: &Matrix, k: &Matrix) -> Rational {
    let (qs, ks) = (q.sparse_rows(), k.sparse_rows());
    qs.iter().zip(&ks).fold(Rational::ZERO, |a, (x, y)| &a + &(&l1(x) * &l1(y)))
}

/// Upper bound on |score| of one head, assuming unit-norm reads and aux
/// channels bounded by 1 in absolute value.
pub fn score_bound(h: &Head) -> Rational {
    let mut b = bilinear_bound(&h.query, &h.key);
    for t in &h.aux {
        b = &b + &(&t.weight.abs() * &bilinear_bound(&t.query, &t.key));
    }
    b
}

/// Twice the largest score bound over all heads, and at least 2.
pub fn choose_dominance_constant(t: &TransformerIR) -> Rational {
    let mut m = Rational::ONE;
    for (_, _, s) in t.all_sublayers() {
        if let Sublayer::Attention { heads, .. } = s {
            for h in heads {
                let b = score_bound(h);
                if b > m {
                    m = b;
                }
            }
        }
    }
    &m * &r(2)
}

/// Lower bound on 1 − φ(x)·φ(y) over distinct x, y ∈ [0, top].
pub fn hash_gap(top: usize) -> Rational {
    let l = top.max(1) as i128;
    let a = l * (l - 1) + 1;
    let b = ((l - 1) * (l - 1) + 1) * (l * l + 1);
    Rational::new(b - a * a, 2 * b)
}

#[derive(Clone, Debug)]
pub struct Converted {
    pub transformer: TransformerIR,
    pub warnings: Vec<String>,
    /// Attention sublayers ℓ in the (flattened) original.
    pub layers: usize,
    /// Sublayers added before the original ones.
    pub setup_depth: usize,
}

impl Converted {
    /// Padding tokens added on top of the original for input length n.
    pub fn added_padding(&self, original: &TransformerIR, n: usize) -> usize {
        self.transformer.padding.count(n) - original.padding.count(n)
    }
}

fn flatten(t: &TransformerIR) -> Vec<Sublayer> {
    let mut out = t.blocks.a.clone();
    for _ in 0..t.looping.coefficient {
        out.extend(t.blocks.b.iter().cloned());
    }
    out.extend(t.blocks.c.iter().cloned());
    out
}

pub fn to_causal(t: &TransformerIR) -> Result<Converted> {
    t.check()?;
    if t.is_fully_causal() {
        return Ok(Converted {
            transformer: t.clone(),
            warnings: vec!["already fully causal; returned unchanged".into()],
            layers: 0,
            setup_depth: 0,
        });
    }
    if t.looping.exponent != 0 && !t.blocks.b.is_empty() {
        return Err(Error::Unsupported("loop count grows with the input; only constant unrolling converts".into()));
    }
    if t.position_encoding.kind == PositionKind::IndexOverLength {
        return Err(Error::Unsupported("index_over_length position encoding".into()));
    }
    let subs = flatten(t);
    let layers = subs.iter().filter(|s| s.is_attention()).count();
    let m = t.width;
    let c = choose_dominance_constant(t);
    let w = &c / &hash_gap(layers);
    let w2 = &(&(&w * &r(2)) + &c) + &Rational::ONE;

    let mut b = Builder::with_layout(&t.input_alphabet(), m, 0);
    let one = b.one;
    let dollar = b.tok(BOS);

    // 1/i and (input tokens so far)/i.
    let (invi, cntf) = (b.alloc("1/i", 1), b.alloc("count/i", 1));
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let inputs: Row = b
        .alphabet
        .iter()
        .enumerate()
        .filter(|(_, a)| t.input_alphabet().contains(a))
        .map(|(i, _)| (tr[i], r(1)))
        .collect();
    b.attention(read, vec![HeadSpec::new(Mask::Causal).value(invi, vec![(tr[0], r(1))]).value(cntf, inputs)]);
    let (phi_i, phi_cnt) = (b.alloc("phi(i)", 4), b.alloc("phi(count)", 4));
    b.hash_ffn(ch(one), ch(invi), phi_i);
    b.hash_ffn(ch(cntf), ch(invi), phi_cnt);

    // Block index and offset: i − 1 = b·N′ + (o − 1) with N′ = 1 + n + p(n).
    let mut ops = Vec::new();
    let alloc4 = |b: &mut Builder, name: &str| b.alloc(name, 4);
    let phi_im1 = alloc4(&mut b, "phi(i-1)");
    ops.push(affine_op(&[(1, phi_i)], -1, Some(0), Operand::Hash(phi_im1)));
    let phi_len = alloc4(&mut b, "phi(N')");
    let mut poly: Vec<(Rational, u32)> = vec![(r(1), 0), (r(1), 1)];
    poly.extend(t.padding.terms.iter().map(|PadTerm { coefficient, degree }| (r(*coefficient as i128), *degree)));
    ops.push(GadgetOp::Polynomial { input: Operand::Hash(phi_cnt), terms: poly, output: Operand::Hash(phi_len) });
    let phi_b = alloc4(&mut b, "phi(b)");
    ops.push(GadgetOp::Quotient { a: phi_im1, b: phi_len, output: phi_b });
    let phi_om1 = alloc4(&mut b, "phi(o-1)");
    ops.push(GadgetOp::Remainder { a: phi_im1, b: phi_len, output: phi_om1 });
    let phi_o = alloc4(&mut b, "phi(o)");
    ops.push(affine_op(&[(1, phi_om1)], 1, None, Operand::Hash(phi_o)));
    let phi_bm1 = alloc4(&mut b, "phi(b-1)");
    ops.push(affine_op(&[(1, phi_b)], -1, Some(0), Operand::Hash(phi_bm1)));
    let phi_one = alloc4(&mut b, "phi(1)");
    ops.push(affine_op(&[], 1, None, Operand::Hash(phi_one)));
    let first = b.alloc("first-in-block", 1);
    ops.push(GadgetOp::HashEqual { a: phi_o, b: phi_one, output: first });
    // active[a] = +1 iff a ≤ b (layer a is live in this block).
    let mut active = vec![usize::MAX; layers + 1];
    for (a, slot) in active.iter_mut().enumerate().skip(2) {
        let phi_a = alloc4(&mut b, &format!("phi({a})"));
        ops.push(affine_op(&[], a as i128, None, Operand::Hash(phi_a)));
        *slot = b.alloc(&format!("active[{a}]"), 1);
        ops.push(GadgetOp::HashLessEq { a: phi_a, b: phi_b, output: *slot });
    }
    b.gadgets(ops);

    // Fetch the token at this offset; 1/o for the original position channel.
    let fetched = b.alloc("fetched-token", b.alphabet.len());
    let mut read = Read::new();
    let tr = read.block(b.tok_rows());
    let fr = read.scalar(first);
    let u = read.one(one);
    let mut copy = HeadSpec::new(Mask::Causal).hash_match(r(1), phi_o, phi_i);
    for (k, &x) in tr.iter().enumerate() {
        copy = copy.value(fetched + k, vec![(x, r(1))]);
    }
    let mut heads = vec![copy];
    if t.position_encoding.kind == PositionKind::InverseIndex {
        let half = Rational::new(1, 2);
        heads.push(
            HeadSpec::new(Mask::Causal)
                .hash_match(r(1), phi_b, phi_b)
                .value(t.position_encoding.channel, vec![(fr, half.clone()), (u, half)]),
        );
    }
    b.attention(read, heads);

    // Original embedding of the fetched token.
    let mut read = Read::new();
    let fr = read.channels(fetched, b.alphabet.len());
    let mut units = Vec::new();
    for c in 0..m {
        let pre: Row = b
            .alphabet
            .iter()
            .enumerate()
            .filter_map(|(k, tok)| {
                let v = &t.embedding[tok][c];
                (!v.is_zero()).then(|| (fr[k], v.clone()))
            })
            .collect();
        if !pre.is_empty() {
            units.extend(Builder::linear_units(pre, ch(c)));
        }
    }
    if !units.is_empty() {
        b.ffn(read, units);
    }
    let setup_depth = b.depth();

    let mut a = 0;
    for s in subs {
        match s {
            Sublayer::Attention { prenorm, heads, output } => {
                a += 1;
                let heads = heads
                    .into_iter()
                    .map(|h| {
                        let target = if h.mask == Mask::Causal { phi_b } else { phi_bm1 };
                        let pairs: Vec<Row> = (0..4).map(|k| ch(target + k)).collect();
                        let keys: Vec<Row> = (0..4).map(|k| ch(phi_b + k)).collect();
                        let mut aux = h.aux.clone();
                        aux.push(ScoreTerm {
                            weight: w.clone(),
                            query: Matrix::from_rows(0, &pairs),
                            key: Matrix::from_rows(0, &keys),
                        });
                        if a >= 2 {
                            // stale queries: (1 − active)/2 = 1 → BoS
                            let stale = lin(&[(one, 1), (active[a], -1)]);
                            aux.push(ScoreTerm {
                                weight: &w2 * &Rational::new(1, 2),
                                query: Matrix::from_rows(0, &[stale]),
                                key: Matrix::from_rows(0, &[ch(dollar)]),
                            });
                        }
                        Head { aux, mask: Mask::Causal, ..h }
                    })
                    .collect();
                b.push(Sublayer::Attention { prenorm, heads, output });
            }
            other => b.push(other),
        }
    }

    // p′(n) = p(n) + ℓ·(1 + n + p(n))
    let l = layers as u64;
    let mut terms: Vec<PadTerm> = vec![PadTerm { coefficient: l, degree: 0 }, PadTerm { coefficient: l, degree: 1 }];
    for pt in &t.padding.terms {
        terms.push(PadTerm { coefficient: pt.coefficient * (l + 1), degree: pt.degree });
    }
    let mut merged: Vec<PadTerm> = Vec::new();
    for pt in terms {
        match merged.iter_mut().find(|x| x.degree == pt.degree) {
            Some(x) => x.coefficient += pt.coefficient,
            None => merged.push(pt),
        }
    }
    merged.retain(|x| x.coefficient > 0);
    merged.sort_by_key(|x| x.degree);

    let out = b.finish(Looping { exponent: 0, coefficient: 1 }, Padding { terms: merged }, t.readout.clone());
    Ok(Converted { transformer: out, warnings: vec![], layers, setup_depth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::chain_ir;
    use crate::compile::{compile, CompileOptions};
    use crate::logic::parse_formula;
    use crate::logic::words;
    use crate::sim::{chars, run, run_with, RunOptions, TraceOptions};

    fn qk(rows: &[(usize, i128)], width: usize) -> Matrix {
        let rs: Vec<Row> = rows.iter().map(|&(c, v)| vec![(c, r(v))]).collect();
        Matrix::from_rows(width, &rs)
    }

    fn attention_ir(q: Matrix, k: Matrix) -> TransformerIR {
        let mut t = crate::ir::tests::tiny(1, 4);
        if let Sublayer::Attention { heads, .. } = &mut t.blocks.a[0] {
            heads[0].query = q;
            heads[0].key = k;
        }
        t
    }

    #[test]
    fn dominance_constant_examples() {
        let z = attention_ir(Matrix::zeros(4, 4), Matrix::zeros(4, 4));
        assert_eq!(choose_dominance_constant(&z), r(2));
        let rows = [(0, 1), (1, 1), (2, 1), (3, 1)];
        let t = attention_ir(qk(&rows, 4), qk(&rows, 4));
        if let Sublayer::Attention { heads, .. } = &t.blocks.a[0] {
            assert_eq!(score_bound(&heads[0]), r(4));
        }
        assert_eq!(choose_dominance_constant(&t), r(8));
        let t10 = attention_ir(qk(&rows, 4).scaled(&r(10)), qk(&rows, 4));
        assert_eq!(choose_dominance_constant(&t10), r(80));
    }

    #[test]
    fn hash_gap_is_a_lower_bound() {
        for top in 1..8usize {
            let g = hash_gap(top).to_f64();
            for x in 0..=top {
                for y in 0..=top {
                    if x != y {
                        let (x, y) = (x as f64, y as f64);
                        let dot = (x * y + 1.0) / ((x * x + 1.0) * (y * y + 1.0)).sqrt();
                        assert!(1.0 - dot > g, "{top} {x} {y}");
                    }
                }
            }
        }
    }

    fn check_equivalent(t: &TransformerIR, max_n: usize) {
        let conv = to_causal(t).unwrap();
        let ct = &conv.transformer;
        assert!(ct.is_fully_causal());
        for w in words(&t.input_alphabet(), max_n) {
            let o = run(t, &w).unwrap();
            let opts = RunOptions { trace: TraceOptions { attention: true, ..Default::default() }, ..Default::default() };
            let c = run_with(ct, &w, &opts).unwrap();
            assert_eq!(c.stats.uncertified_ties, 0, "{w:?}");
            assert_eq!(o.verdict, c.verdict);
            let np = t.total_length(w.len());
            assert_eq!(c.state.len(), (conv.layers + 1) * np);
            assert_eq!(conv.added_padding(t, w.len()), conv.layers * np);
            let last = &c.state[c.state.len() - np..];
            for (a, b) in o.state.iter().zip(last) {
                assert_eq!(&a[..], &b[..t.width], "{w:?}");
            }
            for h in c.trace.heads.iter().filter(|h| h.at.index >= conv.setup_depth) {
                for i in 0..c.state.len() {
                    let ps = h.positions(i);
                    assert!(ps.iter().all(|p| p / np == ps[0] / np), "tie-set spans blocks: {w:?} {i}");
                }
            }
        }
    }

    #[test]
    fn padding_law_and_uniform_head() {
        let t = chain_ir(1, &[]);
        let conv = to_causal(&t).unwrap();
        assert_eq!(conv.layers, 1);
        for n in 0..6 {
            assert_eq!(conv.added_padding(&t, n), t.total_length(n));
        }
        check_equivalent(&t, 3);
        let c = run(&conv.transformer, &chars("ab")).unwrap();
        assert_eq!(c.state.len(), 2 * t.total_length(2));
    }

    #[test]
    fn deeper_and_mixed_chains() {
        check_equivalent(&chain_ir(2, &[]), 3);
        check_equivalent(&chain_ir(3, &[2]), 3);
    }

    #[test]
    fn fully_causal_is_identity() {
        let t = chain_ir(2, &[1, 2]);
        let conv = to_causal(&t).unwrap();
        assert_eq!(conv.transformer, t);
        assert!(!conv.warnings.is_empty());
    }

    #[test]
    fn compiled_existential_converts() {
        let f = parse_formula("E i. Qa(i)").unwrap();
        let t = compile(&f, &["a".into(), "b".into()], &CompileOptions::default()).unwrap().transformer;
        check_equivalent(&t, 4);
    }
}
