use proptest::prelude::*;

use ahat::circuit::{all_inputs, parse_circuit, Circuit, Gate, GateKind};
use ahat::compile::{compile, CompileOptions, Mutation};
use ahat::corpus::{chain_ir, formulas};
use ahat::fuzz::{differential_run, gen_circuit, gen_formula, CaseKind, FuzzCase, FuzzParams, Instance, Verdict};
use ahat::ir::{Looping, TransformerIR};
use ahat::logic::{eval_sentence, formula_metrics, parse_formula, Formula, Index};
use ahat::radical::{RadicalSum, Sign};
use ahat::rational::Rational;
use ahat::reduce::{membership_r, BinaryIndex, Reduction};
use ahat::sim::{run, run_with, RunOptions, TraceOptions};

fn ab() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn word(bits: &[bool]) -> Vec<String> {
    bits.iter().map(|&b| if b { "a" } else { "b" }.to_string()).collect()
}

fn formula() -> impl Strategy<Value = Formula> {
    (any::<u64>(), 1usize..=2, 2usize..=4).prop_map(|(s, k, d)| gen_formula(s, k, d, &ab()))
}

fn words_upto(n: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(any::<bool>(), 0..=n).prop_map(|b| word(&b))
}

fn radical() -> impl Strategy<Value = Vec<(i128, Rational)>> {
    prop::collection::vec(
        (1i128..=30, -12i128..=12, 1i128..=7).prop_map(|(r, a, b)| (r, Rational::new(a, b))),
        0..5,
    )
}

fn rs(raw: &[(i128, Rational)]) -> RadicalSum {
    RadicalSum::canonicalize(raw.iter().cloned()).unwrap()
}

/// Swap two variable names everywhere.
fn swap(f: &Formula, a: &str, b: &str) -> Formula {
    let v = |x: &String| if x == a { b.to_string() } else if x == b { a.to_string() } else { x.clone() };
    let ix = |i: &Index| match i {
        Index::Var(x) => Index::Var(v(x)),
        other => other.clone(),
    };
    let bx = |g: &Formula| Box::new(swap(g, a, b));
    match f {
        Formula::Q(s, i) => Formula::Q(s.clone(), ix(i)),
        Formula::Eq(x, y) => Formula::Eq(ix(x), ix(y)),
        Formula::Leq(x, y) => Formula::Leq(ix(x), ix(y)),
        Formula::Geq(x, y) => Formula::Geq(ix(x), ix(y)),
        Formula::Bit(x, y) => Formula::Bit(ix(x), ix(y)),
        Formula::And(x, y) => Formula::And(bx(x), bx(y)),
        Formula::Or(x, y) => Formula::Or(bx(x), bx(y)),
        Formula::Not(x) => Formula::Not(bx(x)),
        Formula::Exists(x, g) => Formula::Exists(v(x), bx(g)),
        Formula::Forall(x, g) => Formula::Forall(v(x), bx(g)),
        Formula::Maj2(x, y, g) => Formula::Maj2(v(x), v(y), bx(g)),
    }
}

/// Quantifier-free bodies over i, j using only ∧, ∨ and positive atoms.
fn positive_body() -> impl Strategy<Value = Formula> {
    let atom = prop_oneof![
        Just(parse_formula("Qa(i)").unwrap()),
        Just(parse_formula("Qa(j)").unwrap()),
        Just(parse_formula("i <= j").unwrap()),
        Just(parse_formula("i = n").unwrap()),
    ];
    atom.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::and(a, b)),
            (inner.clone(), inner).prop_map(|(a, b)| Formula::or(a, b)),
        ]
    })
}

/// Reorder the non-input gates by `perm`, renumbering pointers.
fn permute(c: &Circuit, keys: &[u32]) -> (Circuit, Vec<usize>) {
    let inputs: Vec<usize> = (0..c.gates.len()).filter(|&g| c.gates[g].kind == GateKind::X).collect();
    let mut rest: Vec<usize> = (0..c.gates.len()).filter(|&g| c.gates[g].kind != GateKind::X).collect();
    rest.sort_by_key(|&g| (keys[g % keys.len()], g));
    let order: Vec<usize> = inputs.into_iter().chain(rest).collect();
    let mut new_of = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    let gates = order
        .iter()
        .map(|&old| Gate { kind: c.gates[old].kind, args: c.gates[old].args.iter().map(|&a| new_of[a - 1] + 1).collect() })
        .collect();
    (Circuit::new(gates, 1).unwrap(), new_of)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn canonical_form_ignores_order(raw in radical(), seed in any::<u64>()) {
        let mut shuffled = raw.clone();
        let k = shuffled.len().max(1);
        shuffled.rotate_left((seed as usize) % k);
        shuffled.reverse();
        prop_assert_eq!(rs(&raw), rs(&shuffled));
    }

    #[test]
    fn field_laws(a in radical(), b in radical(), c in radical()) {
        let (a, b, c) = (rs(&a), rs(&b), rs(&c));
        prop_assert_eq!(a.add_ref(&b), b.add_ref(&a));
        prop_assert_eq!(a.mul_ref(&b), b.mul_ref(&a));
        prop_assert_eq!(a.add_ref(&b).add_ref(&c), a.add_ref(&b.add_ref(&c)));
        prop_assert_eq!(a.mul_ref(&b).mul_ref(&c), a.mul_ref(&b.mul_ref(&c)));
        prop_assert_eq!(a.mul_ref(&b.add_ref(&c)), a.mul_ref(&b).add_ref(&a.mul_ref(&c)));
    }

    #[test]
    fn sign_is_zero_only_for_the_empty_form(a in radical()) {
        let x = rs(&a);
        prop_assert_eq!(x.sign() == Sign::Zero, x.terms().is_empty());
        prop_assert_eq!(x.neg_ref().sign(), match x.sign() {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
            Sign::Zero => Sign::Zero,
        });
    }

    #[test]
    fn unroll_depth_is_monotone(c in 1u64..5, d in 0u32..4, n in 1usize..5000) {
        let mut t = chain_ir(1, &[]);
        t.looping = Looping { exponent: d, coefficient: c };
        prop_assert!(t.unroll_depth(n) <= t.unroll_depth(n + 1));
    }

    #[test]
    fn de_morgan_and_duality(p in formula(), q in formula(), w in words_upto(5)) {
        let lhs = Formula::not(Formula::and(p.clone(), q.clone()));
        let rhs = Formula::or(Formula::not(p.clone()), Formula::not(q));
        prop_assert_eq!(eval_sentence(&lhs, &w).unwrap(), eval_sentence(&rhs, &w).unwrap());
        if let Formula::Exists(v, body) | Formula::Forall(v, body) = &p {
            let e = Formula::not(Formula::exists(v, (**body).clone()));
            let a = Formula::forall(v, Formula::not((**body).clone()));
            prop_assert_eq!(eval_sentence(&e, &w).unwrap(), eval_sentence(&a, &w).unwrap());
        }
    }

    #[test]
    fn maj2_is_symmetric(body in positive_body(), w in words_upto(5)) {
        let f = Formula::maj2("i", "j", body.clone());
        let g = Formula::maj2("j", "i", swap(&body, "i", "j"));
        prop_assert_eq!(eval_sentence(&f, &w).unwrap(), eval_sentence(&g, &w).unwrap());
    }

    #[test]
    fn maj2_is_monotone(body in positive_body(), bits in prop::collection::vec(any::<bool>(), 1..=5), at in any::<usize>()) {
        let f = Formula::maj2("i", "j", body);
        let w = word(&bits);
        let mut more = bits.clone();
        more[at % bits.len()] = true;
        if eval_sentence(&f, &w).unwrap() {
            prop_assert!(eval_sentence(&f, &word(&more)).unwrap());
        }
    }

    #[test]
    fn formula_display_reparses(f in formula()) {
        prop_assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn circuit_display_reparses(seed in any::<u64>(), arity in 1usize..=6) {
        let c = gen_circuit(seed, 5, 40, arity);
        prop_assert_eq!(parse_circuit(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn gate_order_does_not_matter(seed in any::<u64>(), arity in 1usize..=4, keys in prop::collection::vec(any::<u32>(), 12)) {
        let c = gen_circuit(seed, 4, 12, arity);
        let (p, new_of) = permute(&c, &keys);
        for x in all_inputs(arity) {
            let (a, b) = (c.gate_values(&x).unwrap(), p.gate_values(&x).unwrap());
            for g in 0..a.len() {
                prop_assert_eq!(a[g], b[new_of[g]]);
            }
        }
    }

    #[test]
    fn reductions_are_functional(bits in prop::collection::vec(any::<bool>(), 0..=4), i in 1usize..12) {
        let w = word(&bits);
        for f in Reduction::ALL {
            let b = BinaryIndex::encode(i, 4).unwrap();
            let tok = f.token(&w, i);
            prop_assert!(membership_r(f, &w, &b, &tok));
            for other in ["a", "b", "0"] {
                if other != tok {
                    prop_assert!(!membership_r(f, &w, &b, other));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn ir_json_round_trips(f in formula()) {
        let t = compile(&f, &ab(), &CompileOptions::default()).unwrap().transformer;
        prop_assert_eq!(TransformerIR::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn channel_layout_does_not_change_decisions(f in formula(), w in words_upto(4), off in 0usize..5, extra in 0usize..5) {
        let plain = compile(&f, &ab(), &CompileOptions::default()).unwrap().transformer;
        let opts = CompileOptions { channel_offset: off, extra_width: extra, ..Default::default() };
        let moved = compile(&f, &ab(), &opts).unwrap().transformer;
        prop_assert!(moved.width >= plain.width);
        let (a, b) = (run(&plain, &w).unwrap(), run(&moved, &w).unwrap());
        prop_assert_eq!(a.verdict, b.verdict);
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn compiled_depth_is_linear(seed in any::<u64>(), k in 1usize..=3) {
        let f = gen_formula(seed, k, 6, &ab());
        let a = compile(&f, &ab(), &CompileOptions::default()).unwrap();
        let q = f.preorder().iter().filter(|g| matches!(g, Formula::Exists(..) | Formula::Forall(..) | Formula::Maj2(..))).count();
        let l = formula_metrics(&f).1;
        prop_assert!(a.transformer.depth(1) <= a.k + 5 + 4 * l + q, "{} has depth {}", f, a.transformer.depth(1));
    }

    #[test]
    fn snapshots_keep_the_width(f in formula(), w in words_upto(3)) {
        let t = compile(&f, &ab(), &CompileOptions::default()).unwrap().transformer;
        let opts = RunOptions { trace: TraceOptions { snapshots: true, ..Default::default() }, ..Default::default() };
        let o = run_with(&t, &w, &opts).unwrap();
        prop_assert!(o.trace.snapshots.iter().all(|s| s.residual.iter().all(|h| h.len() == t.width)));
    }

    #[test]
    fn causal_prefixes_ignore_suffixes(bits in prop::collection::vec(any::<bool>(), 2..=4), cut in any::<usize>(), flip in any::<Vec<bool>>()) {
        let t = chain_ir(3, &[1, 2, 3]);
        let i = 1 + cut % (bits.len() - 1);
        let mut other = bits.clone();
        for (k, b) in other.iter_mut().enumerate().skip(i) {
            *b ^= flip.get(k).copied().unwrap_or(true);
        }
        let (a, b) = (run(&t, &word(&bits)).unwrap(), run(&t, &word(&other)).unwrap());
        // $ plus the first i tokens
        prop_assert_eq!(&a.state[..=i], &b.state[..=i]);
    }

    #[test]
    fn fuzz_cases_are_deterministic(seed in any::<u64>()) {
        let p = FuzzParams { max_len: 3, ..Default::default() };
        let a = FuzzCase::generate(CaseKind::Formula, seed, &p);
        prop_assert_eq!(&a, &FuzzCase::generate(CaseKind::Formula, seed, &p));
        prop_assert_eq!(differential_run(&a, &p).verdict, differential_run(&a, &p).verdict);
    }
}

#[test]
fn shrunk_cases_still_mismatch() {
    let p = FuzzParams { max_len: 4, mutation: Some(Mutation::ForallOffByOne), ..Default::default() };
    let mut found = 0;
    for f in formulas().unwrap().into_iter().filter(|f| formula_metrics(f).0 == 1) {
        let case = FuzzCase { seed: 0, kind: CaseKind::Formula, instance: Instance::Formula(f) };
        let rep = differential_run(&case, &p);
        if let Verdict::Mismatch { .. } = rep.verdict {
            found += 1;
            let shrunk = parse_formula(rep.shrunk.as_deref().unwrap()).unwrap();
            let again = FuzzCase { seed: 0, kind: CaseKind::Formula, instance: Instance::Formula(shrunk) };
            let r = differential_run(&again, &p);
            assert!(matches!(r.verdict, Verdict::Mismatch { .. }), "{r:?}");
            assert_eq!(r.shrunk.as_deref(), rep.shrunk.as_deref(), "shrinking is idempotent");
        }
    }
    assert!(found > 0, "the planted defect went unnoticed");
}

proptest! {
    #[test]
    fn tokenize_inverts_concatenation(picks in prop::collection::vec(0usize..3, 0..8)) {
        let alphabet = ahat::sim::parse_alphabet("a ab b").unwrap();
        // greedy matching may merge "a","b" into "ab"
        let toks: Vec<String> = picks.iter().map(|&k| alphabet[k].clone()).collect();
        let text = toks.concat();
        let back = ahat::sim::tokenize(&text, &alphabet).unwrap();
        prop_assert_eq!(back.concat(), text);
        prop_assert!(back.len() <= toks.len());
    }
}

#[test]
fn alphabet_manifest_errors() {
    use ahat::sim::{parse_alphabet, tokenize};
    assert!(parse_alphabet("").is_err());
    assert!(parse_alphabet("a a").is_err());
    assert!(parse_alphabet("a $").is_err());
    assert_eq!(tokenize("x y", &parse_alphabet("x y").unwrap()).unwrap(), vec!["x", "y"]);
    assert!(tokenize("xz", &parse_alphabet("x y").unwrap()).is_err());
}
