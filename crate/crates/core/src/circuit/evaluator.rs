//! Looped transformer evaluating any serialized circuit on its input bits.
//!
//! Input word: the bits x, then the circuit's tokens (`&11` as `&`, `1`, `1`).
//! Every gate token carries a one-hot state (true, false, ⊥). Each loop
//! iteration lets pointer tokens fetch the state of the gate they name, lets
//! each gate pool its arguments, and resolves every gate whose arguments are
//! all resolved. A gate at depth t is therefore resolved in iteration t + 1.
//!
//! Fetches match integer counters with scores −2(a−b)² + bonus, so every
//! argmax set consists of tokens with identical keys.

use crate::builder::{ch, lin, r, Builder, HeadSpec, Phase, Read, Row, Unit};
use crate::circuit::Circuit;
use crate::error::Result;
use crate::ir::{Decision, GadgetOp, Looping, Mask, Operand, Padding, Readout, TransformerIR, BOS};
use crate::rational::Rational;

pub const GATE_TOKENS: [&str; 5] = ["X", "AND", "OR", "NOT", "MAJ"];

/// Input alphabet of the evaluator.
pub fn evaluator_alphabet() -> Vec<String> {
    ["0", "1", "X", "AND", "OR", "NOT", "MAJ", "&"].iter().map(|s| s.to_string()).collect()
}

/// The evaluator's input word for (x, ⟨C⟩).
pub fn evaluator_input(c: &Circuit, x: &[bool]) -> Vec<String> {
    let mut w: Vec<String> = x.iter().map(|&b| if b { "1" } else { "0" }.to_string()).collect();
    for g in &c.gates {
        w.push(g.kind.name().to_string());
        for &a in &g.args {
            w.push("&".into());
            w.extend(std::iter::repeat("1".to_string()).take(a));
        }
    }
    w
}

/// Channel layout, exposed for trace inspection.
#[derive(Clone, Debug)]
pub struct EvaluatorLayout {
    /// (true, false, ⊥) state of each token; meaningful on gate tokens.
    pub state: usize,
    pub out: usize,
    /// Sublayers per loop iteration.
    pub loop_len: usize,
}

/// Score −w(q − k)² from scalar channels q, q², k, k².
fn neg_square(w: i128, q: usize, q2: usize, k: usize, k2: usize, one: usize) -> Vec<(Rational, Vec<(Row, Row)>)> {
    vec![
        (r(-w), vec![(ch(q2), ch(one))]),
        (r(2 * w), vec![(ch(q), ch(k))]),
        (r(-w), vec![(ch(one), ch(k2))]),
    ]
}

fn head(mask: Mask, terms: Vec<(Rational, Vec<(Row, Row)>)>) -> HeadSpec {
    let mut h = HeadSpec::new(mask);
    h.aux = terms;
    h
}

fn scalar(b: &mut Builder, name: &str, hash: usize, ops: &mut Vec<GadgetOp>) -> (usize, usize) {
    let x = b.alloc(name, 1);
    let x2 = b.alloc(&format!("{name}^2"), 1);
    ops.push(GadgetOp::AffineInt {
        terms: vec![(r(1), Operand::Hash(hash))],
        constant: r(0),
        floor: None,
        output: Operand::Scalar(x),
    });
    ops.push(GadgetOp::Polynomial { input: Operand::Scalar(x), terms: vec![(r(1), 2)], output: Operand::Scalar(x2) });
    (x, x2)
}

/// Loop count c·⌈log₂ N⌉^d; it must exceed the circuit depth for the output to resolve.
pub fn build_circuit_evaluator(d: u32, c: u64) -> (TransformerIR, EvaluatorLayout) {
    let mut b = Builder::new(&evaluator_alphabet());
    let one = b.one;
    let tk = |b: &Builder, t: &str| b.tok(t);
    let gate_row: Row = GATE_TOKENS.iter().map(|t| (tk(&b, t), r(1))).collect();
    let tok_index = |b: &Builder, t: &str| b.alphabet.iter().position(|a| a == t).unwrap();

    // Setup: prefix counts as fractions of i.
    let (gf, af, rf, invi) = (b.alloc("g/i", 1), b.alloc("a/i", 1), b.alloc("r/i", 1), b.alloc("1/i", 1));
    let mut read = Read::new();
    let t = read.block(b.tok_rows());
    let gate_x: Row = GATE_TOKENS.iter().map(|g| (t[tok_index(&b, g)], r(1))).collect();
    b.attention(
        read,
        vec![HeadSpec::new(Mask::Causal)
            .value(gf, gate_x)
            .value(af, vec![(t[tok_index(&b, "&")], r(1))])
            .value(rf, vec![(t[tok_index(&b, "X")], r(1))])
            .value(invi, vec![(t[tok_index(&b, BOS)], r(1))])],
    );
    let (phi_g, phi_a, phi_r, phi_log) = (b.alloc("phi(g)", 4), b.alloc("phi(a)", 4), b.alloc("phi(r)", 4), b.alloc("phi(i-1)", 4));
    b.hash_ffn(ch(gf), ch(invi), phi_g);
    b.hash_ffn(ch(af), ch(invi), phi_a);
    b.hash_ffn(ch(rf), ch(invi), phi_r);
    b.hash_ffn(lin(&[(one, 1), (invi, -1)]), ch(invi), phi_log);
    let mut ops = Vec::new();
    let (g, g2) = scalar(&mut b, "g", phi_g, &mut ops);
    let (a, a2) = scalar(&mut b, "a", phi_a, &mut ops);
    b.gadgets(ops);

    // Pointer length z: a `&` followed by z ones shares its & count with exactly z+1 tokens.
    let y = b.alloc("1/(1+z)", 1);
    let amp_or_one: Row = vec![(tk(&b, "&"), r(1)), (tk(&b, "1"), r(1))];
    let mut read = Read::new();
    let t = read.block(b.tok_rows());
    let mut terms = neg_square(2, a, a2, a, a2, one);
    terms.push((r(1), vec![(ch(one), amp_or_one)]));
    b.attention(read, vec![head(Mask::Unmasked, terms).value(y, vec![(t[tok_index(&b, "&")], r(1))])]);
    let phi_z = b.alloc("phi(z)", 4);
    b.hash_ffn(lin(&[(one, 1), (y, -1)]), ch(y), phi_z);
    let mut ops = Vec::new();
    let (z, z2) = scalar(&mut b, "z", phi_z, &mut ops);
    b.gadgets(ops);

    // X gates read input bit r; gates learn whether any pointer names them.
    let xb = b.alloc("x-bit", 3);
    let referenced = b.alloc("referenced", 1);
    let mut read = Read::new();
    let t = read.block(b.tok_rows());
    let (t0, t1) = (t[tok_index(&b, "0")], t[tok_index(&b, "1")]);
    let other: Row = t.iter().filter(|&&x| x != t0 && x != t1).map(|&x| (x, r(1))).collect();
    let fetch_bit = HeadSpec::new(Mask::Unmasked)
        .hash_match(r(1), phi_r, phi_log)
        .value(xb, vec![(t1, r(1))])
        .value(xb + 1, vec![(t0, r(1))])
        .value(xb + 2, other);
    let mut terms = neg_square(2, g, g2, z, z2, one);
    terms.push((r(1), vec![(ch(one), ch(tk(&b, "&")))]));
    // BoS scores exactly 1/2 for every query: the fallback when nothing points here.
    terms.push((r(2), vec![(ch(g2), ch(tk(&b, BOS)))]));
    terms.push((Rational::new(1, 2), vec![(ch(one), ch(tk(&b, BOS)))]));
    let refs = head(Mask::Unmasked, terms).value(referenced, vec![(t[tok_index(&b, "&")], r(1))]);
    b.attention(read, vec![fetch_bit, refs]);

    // Loop state.
    let state = b.alloc("state", 3);
    b.embed_all(state + 2, r(1));
    let argv = b.alloc("arg-state", 3);
    let avg = b.alloc("mean(T-F)", 1);
    let any = b.alloc("any(T,F,U)", 6);
    let smaj = b.alloc("sign-maj", 3);
    b.embed_all(smaj + 1, r(1));
    let out = b.alloc("out", 1);

    b.phase(Phase::B);
    // 1. Pointers fetch the state of gate z.
    let mut read = Read::new();
    let sv = read.channels(state, 3);
    let mut terms = neg_square(2, z, z2, g, g2, one);
    terms.push((r(1), vec![(ch(one), gate_row.clone())]));
    let mut fetch = head(Mask::Unmasked, terms);
    for k in 0..3 {
        fetch = fetch.value(argv + k, vec![(sv[k], r(1))]);
    }
    b.attention(read, vec![fetch]);

    // 2. Gates pool their arguments: mean of T−F, and whether any argument is T / F / ⊥.
    let amp = tk(&b, "&");
    let pool_read = |b: &Builder| {
        let mut read = Read::new();
        let av = read.channels(argv, 3);
        let u = read.one(b.one);
        (read, av, u)
    };
    let (read, av, u) = pool_read(&b);
    let mut terms = neg_square(2, g, g2, g, g2, one);
    terms.push((r(1), vec![(ch(one), ch(amp))]));
    let mut heads = vec![head(Mask::Unmasked, terms).value(avg, lin(&[(av[0], 1), (av[1], -1)]))];
    for k in 0..3 {
        let mut terms = neg_square(4, g, g2, g, g2, one);
        terms.push((r(2), vec![(ch(one), ch(amp))]));
        terms.push((r(1), vec![(ch(one), ch(argv + k))]));
        heads.push(
            head(Mask::Unmasked, terms)
                .value(any + 2 * k, lin(&[(av[k], 1)]))
                .value(any + 2 * k + 1, lin(&[(u, 1), (av[k], -1)])),
        );
    }
    b.attention(read, heads.clone());

    // 3. Sign of the MAJ mean.
    b.sign_ffn(ch(avg), lin(&[(smaj, 1), (smaj + 1, -1)]), lin(&[(smaj + 2, 1), (smaj + 1, -1)]));

    // 4. Undo the mean so the next iteration starts clean.
    let (read, av, _) = pool_read(&b);
    let mut terms = neg_square(2, g, g2, g, g2, one);
    terms.push((r(1), vec![(ch(one), ch(amp))]));
    b.attention(read, vec![head(Mask::Unmasked, terms).value(avg, lin(&[(av[0], -1), (av[1], 1)]))]);

    // 5. Resolve gates, then clear the scratch channels.
    let mut read = Read::new();
    let t = read.block(b.tok_rows());
    let anyr: Vec<Vec<usize>> = (0..3).map(|k| read.channels(any + 2 * k, 2)).collect();
    let sm = read.channels(smaj, 3);
    let sv = read.channels(state, 3);
    let av = read.channels(argv, 3);
    let xr = read.channels(xb, 3);
    let u = read.one(one);
    let (yes, no) = (0, 1);
    let (any_t, any_f, any_u) = (&anyr[0], &anyr[1], &anyr[2]);
    let mut units = Vec::new();
    // Conjunction of 0/1 indicators (each a sum of read rows).
    let mut rule = |conds: Vec<Row>, to_true: bool| {
        let k = conds.len() as i128;
        let mut pre: Row = conds.into_iter().flatten().collect();
        pre.push((u, r(1 - k)));
        let target = if to_true { state } else { state + 1 };
        units.push(Unit { pre, out: lin(&[(target, 1), (state + 2, -1)]) });
    };
    let ind = |i: usize| vec![(i, r(1))];
    let kind = |name: &str| ind(t[tok_index(&b, name)]);
    let pending = ind(sv[2]);
    let settled = ind(any_u[no]);
    rule(vec![kind("X"), pending.clone(), ind(xr[0])], true);
    rule(vec![kind("X"), pending.clone(), ind(xr[1])], false);
    rule(vec![kind("AND"), pending.clone(), settled.clone(), ind(any_f[no])], true);
    rule(vec![kind("AND"), pending.clone(), settled.clone(), ind(any_f[yes])], false);
    rule(vec![kind("OR"), pending.clone(), settled.clone(), ind(any_t[yes])], true);
    rule(vec![kind("OR"), pending.clone(), settled.clone(), ind(any_t[no])], false);
    rule(vec![kind("NOT"), pending.clone(), settled.clone(), ind(any_t[no])], true);
    rule(vec![kind("NOT"), pending.clone(), settled.clone(), ind(any_t[yes])], false);
    rule(vec![kind("MAJ"), pending.clone(), settled.clone(), vec![(sm[0], r(1)), (sm[1], r(1))]], true);
    rule(vec![kind("MAJ"), pending, settled, ind(sm[2])], false);
    for k in 0..3 {
        units.push(Unit { pre: ind(av[k]), out: lin(&[(argv + k, -1)]) });
    }
    for k in 0..3 {
        for j in 0..2 {
            units.push(Unit { pre: ind(anyr[k][j]), out: lin(&[(any + 2 * k + j, -1)]) });
        }
    }
    units.push(Unit { pre: ind(sm[0]), out: lin(&[(smaj, -1), (smaj + 1, 1)]) });
    units.push(Unit { pre: ind(sm[2]), out: lin(&[(smaj + 2, -1), (smaj + 1, 1)]) });
    b.ffn(read, units);
    let loop_len = 5;

    // Readout: the last gate nothing points at.
    b.phase(Phase::C);
    let mut read = Read::new();
    let sv = read.channels(state, 3);
    let mut key: Row = gate_row;
    key.push((referenced, r(-1)));
    let select = head(
        Mask::Unmasked,
        vec![(r(2), vec![(ch(one), key)]), (r(-1), vec![(ch(one), ch(invi))])],
    )
    .value(out, lin(&[(sv[0], 1), (sv[1], -1)]));
    b.attention(read, vec![select]);

    let readout = Readout { read: ch(out), decision: Decision::Sign };
    let ir = b.finish(Looping { exponent: d, coefficient: c }, Padding::none(), readout);
    (ir, EvaluatorLayout { state, out, loop_len })
}

/// Runs the evaluator with exactly `loops` iterations.
/// Gates without arguments have no pointer to pool from, so they are refused.
pub fn run_evaluator(ir: &TransformerIR, c: &Circuit, x: &[bool], loops: Option<usize>) -> Result<crate::sim::Outcome> {
    if let Some(g) = c.gates.iter().position(|g| g.kind != crate::circuit::GateKind::X && g.args.is_empty()) {
        return Err(crate::error::Error::Domain(format!("gate {}: the evaluator needs fan-in ≥ 1", g + 1)));
    }
    let opts = crate::sim::RunOptions { loops, ..Default::default() };
    crate::sim::run_with(ir, &evaluator_input(c, x), &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{all_inputs, bits, parse_circuit};

    #[test]
    fn evaluates_majority_examples() {
        let (ir, _) = build_circuit_evaluator(1, 2);
        for s in ["X X X MAJ &1 &11111 &111111 OR &11 &111 NOT &111", "X X X OR &11 &111 NOT &111 MAJ &1 &1111 &11111"] {
            let c = parse_circuit(s).unwrap();
            for x in all_inputs(3) {
                let o = run_evaluator(&ir, &c, &x, None).unwrap();
                assert_eq!(o.accepted(), c.eval(&x).unwrap(), "{s} on {x:?}");
                assert_eq!(o.stats.uncertified_ties, 0);
            }
        }
        let c = parse_circuit("X X X MAJ &1 &11111 &111111 OR &11 &111 NOT &111").unwrap();
        assert!(run_evaluator(&ir, &c, &bits("110").unwrap(), Some(3)).unwrap().accepted());
        assert!(!run_evaluator(&ir, &c, &bits("001").unwrap(), Some(3)).unwrap().accepted());
        // one iteration short: the output is still unresolved, so the sign read is 0
        let o = run_evaluator(&ir, &c, &bits("110").unwrap(), Some(2)).unwrap();
        assert!(o.value.is_zero());
        // an empty AND is true, but nothing points at its pool
        assert!(run_evaluator(&ir, &parse_circuit("X AND").unwrap(), &[true], None).is_err());
    }
}
