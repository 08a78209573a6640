//! The ten acceptance criteria, one PASS/FAIL line each.
//! `ACCEPTANCE_ONLY=1,4` restricts the run to the listed criteria.

use std::time::Instant;

use ahat::circuit::evaluator::{build_circuit_evaluator, evaluator_input, EvaluatorLayout};
use ahat::circuit::{
    all_inputs, compose_parallel, compose_recurrent, compose_serial, eval_circuit, parse_circuit, Circuit,
};
use ahat::compile::{compile, CompileOptions};
use ahat::corpus::{chain_ir, formulas, CHAIN_SHAPES};
use ahat::error::Error;
use ahat::fuzz::gen_circuit;
use ahat::ir::TransformerIR;
use ahat::logic::{eval_sentence, formula_metrics, parse_formula, words, Formula};
use ahat::mask::to_causal;
use ahat::radical::{dot, ln_hash, RadicalSum, Sign};
use ahat::rational::Rational;
use ahat::reduce::{stack_builtin, Reduction};
use ahat::sim::{chars, run, run_with, Outcome, RunOptions, TraceOptions};
use num_bigint::{BigInt, Sign as BigSign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact-domain bookkeeping shared by criteria 1–8 (checked by 10).
#[derive(Default)]
struct Domain {
    runs: usize,
    uncertified: usize,
    nested: usize,
}

impl Domain {
    fn record(&mut self, r: ahat::error::Result<Outcome>) -> Result<Outcome, String> {
        self.runs += 1;
        match r {
            Ok(o) => {
                self.uncertified += o.stats.uncertified_ties;
                Ok(o)
            }
            Err(Error::NestedRadical) => {
                self.nested += 1;
                Err("nested radical".into())
            }
            Err(e) => Err(e.to_string()),
        }
    }
}

type Verdict = Result<String, String>;

fn ab() -> Vec<String> {
    chars("ab")
}

fn compiled(f: &Formula, alphabet: &[String]) -> Result<TransformerIR, String> {
    compile(f, alphabet, &CompileOptions::default()).map(|a| a.transformer).map_err(|e| format!("{f}: {e}"))
}

fn c1_corpus(d: &mut Domain) -> Verdict {
    let fs = formulas().map_err(|e| e.to_string())?;
    if fs.len() < 30 || fs.iter().filter(|f| formula_metrics(f).0 == 3).count() < 2 {
        return Err("corpus too small".into());
    }
    let mut checked = 0;
    for f in &fs {
        let t = compiled(f, &ab())?;
        let max = if formula_metrics(f).0 >= 3 { 4 } else { 6 };
        for w in words(&ab(), max).into_iter().filter(|w| !w.is_empty()) {
            let got = d.record(run(&t, &w))?.accepted();
            let want = eval_sentence(f, &w).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("{f} on {:?}: transformer {got}, oracle {want}", w.concat()));
            }
            checked += 1;
        }
    }
    Ok(format!("{} sentences, {checked} runs", fs.len()))
}

fn c2_thresholds(d: &mut Domain) -> Verdict {
    let mut checked = 0;
    for (src, sym, universal) in
        [("E i. Qa(i)", "a", false), ("E i. Qb(i)", "b", false), ("A i. Qa(i)", "a", true), ("A i. Qb(i)", "b", true)]
    {
        let f = parse_formula(src).unwrap();
        let t = compiled(&f, &ab())?;
        let other = if sym == "a" { "b" } else { "a" };
        for n in 1..=6usize {
            // (witness set, expected decision)
            let mut cases: Vec<(Vec<usize>, bool)> = vec![(vec![], false), ((0..n).collect(), true)];
            for p in 0..n {
                cases.push((vec![p], !universal || n == 1));
                cases.push(((0..n).filter(|&q| q != p).collect(), !universal && n > 1));
            }
            for (wit, expect) in cases {
                let w: Vec<String> = (0..n).map(|q| if wit.contains(&q) { sym } else { other }.to_string()).collect();
                let oracle = eval_sentence(&f, &w).map_err(|e| e.to_string())?;
                let got = d.record(run(&t, &w))?.accepted();
                if oracle != expect || got != oracle {
                    return Err(format!("{src} on {}: transformer {got}, oracle {oracle}", w.concat()));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} boundary words"))
}

fn c3_majority(d: &mut Domain) -> Verdict {
    let bits = chars("01");
    let f = parse_formula("M2(i,j). Q1(i)").unwrap();
    let t = compiled(&f, &bits)?;
    let mut checked = 0;
    for w in words(&bits, 6) {
        let n = w.len();
        let pairs = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, _)| w[i] == "1").count();
        let want = 2 * pairs > n * n;
        let got = d.record(run(&t, &w))?.accepted();
        if got != want || eval_sentence(&f, &w).map_err(|e| e.to_string())? != want {
            return Err(format!("{:?}: transformer {got}, pair count {pairs}/{}", w.concat(), n * n));
        }
        checked += 1;
    }
    Ok(format!("{checked} words"))
}

fn conversion_check(t: &TransformerIR, max_n: usize, d: &mut Domain) -> Result<usize, String> {
    let conv = to_causal(t).map_err(|e| e.to_string())?;
    let ct = &conv.transformer;
    if !ct.is_fully_causal() {
        return Err("converted IR still has unmasked heads".into());
    }
    let opts = RunOptions { trace: TraceOptions { attention: true, ..Default::default() }, ..Default::default() };
    let mut checked = 0;
    for w in words(&t.input_alphabet(), max_n) {
        let o = d.record(run(t, &w))?;
        let c = d.record(run_with(ct, &w, &opts))?;
        let np = t.total_length(w.len());
        if o.verdict != c.verdict || c.state.len() != (conv.layers + 1) * np {
            return Err(format!("{:?}: decision or layout differs", w.concat()));
        }
        let last = &c.state[c.state.len() - np..];
        if o.state.iter().zip(last).any(|(a, b)| a[..] != b[..t.width]) {
            return Err(format!("{:?}: final block differs from the original residual", w.concat()));
        }
        for h in c.trace.heads.iter().filter(|h| h.at.index >= conv.setup_depth) {
            for i in 0..c.state.len() {
                let ps = h.positions(i);
                if ps.iter().any(|p| p / np != ps[0] / np) {
                    return Err(format!("{:?}: tie-set of query {i} spans blocks", w.concat()));
                }
            }
        }
        checked += 1;
    }
    Ok(checked)
}

fn c4_masks(d: &mut Domain) -> Verdict {
    let mut irs: Vec<(String, TransformerIR)> = CHAIN_SHAPES
        .iter()
        .map(|(l, causal)| (format!("chain({l}, causal {causal:?})"), chain_ir(*l, causal)))
        .collect();
    for src in ["E i. Qa(i)", "A i. (i = n | Qa(i))"] {
        irs.push((src.to_string(), compiled(&parse_formula(src).unwrap(), &ab())?));
    }
    let mixed = irs.iter().filter(|(_, t)| {
        let mut masks: Vec<_> = t
            .all_sublayers()
            .filter_map(|(_, _, s)| match s {
                ahat::ir::Sublayer::Attention { heads, .. } => Some(heads.iter().map(|h| h.mask).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect();
        masks.dedup();
        masks.iter().any(|m| *m != masks[0])
    });
    if mixed.count() == 0 {
        return Err("no mixed-masked IR".into());
    }
    let mut runs = 0;
    for (name, t) in &irs {
        runs += conversion_check(t, 3, d).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} IRs, {runs} words", irs.len()))
}

fn c5_goldens() -> Verdict {
    // MAJ(x1, x2 ∨ x3, ¬x3) by hand, inputs 000..111
    let table = [false, false, true, false, true, true, true, true];
    for s in ["X X X MAJ &1 &11111 &111111 OR &11 &111 NOT &111", "X X X OR &11 &111 NOT &111 MAJ &1 &1111 &11111"] {
        let c = parse_circuit(s).map_err(|e| e.to_string())?;
        if c.depth() != 2 || c.size() != 6 {
            return Err(format!("{s}: depth {} size {}", c.depth(), c.size()));
        }
        for (x, want) in all_inputs(3).zip(table) {
            if eval_circuit(&c, &x).map_err(|e| e.to_string())? != want {
                return Err(format!("{s} on {x:?}"));
            }
        }
    }
    Ok("2 serializations × 8 inputs".into())
}

/// Physical positions of the gate tokens in the evaluator input.
fn gate_positions(c: &Circuit) -> Vec<usize> {
    let mut pos = c.arity() + 1;
    c.gates
        .iter()
        .map(|g| {
            let p = pos;
            pos += 1 + g.args.iter().map(|a| a + 1).sum::<usize>();
            p
        })
        .collect()
}

/// Iteration at the end of which each gate's ⊥ flag is cleared.
fn resolve_iterations(o: &Outcome, c: &Circuit) -> Vec<Option<usize>> {
    let mut last: std::collections::BTreeMap<usize, &ahat::sim::Snapshot> = Default::default();
    for s in o.trace.snapshots.iter().filter(|s| s.at.block == 'b') {
        last.insert(s.at.iteration, s);
    }
    gate_positions(c)
        .iter()
        .map(|&p| last.iter().find(|(_, s)| s.residual[p][0].is_zero()).map(|(t, _)| *t))
        .collect()
}

fn c6_circuits(d: &mut Domain) -> Verdict {
    let (ir, EvaluatorLayout { state, .. }) = build_circuit_evaluator(0, 6);
    let opts = RunOptions {
        trace: TraceOptions { snapshots: true, channels: Some(vec![state + 2]), attention: false },
        ..Default::default()
    };
    let mut runs = 0;
    for seed in 0..200u64 {
        let c = gen_circuit(seed, 5, 40, 1 + (seed % 6) as usize);
        let depths = c.gate_depths();
        for x in all_inputs(c.arity()) {
            let o = d.record(run_with(&ir, &evaluator_input(&c, &x), &opts))?;
            if o.accepted() != eval_circuit(&c, &x).map_err(|e| e.to_string())? {
                return Err(format!("seed {seed} ({c}) on {x:?}"));
            }
            for (g, got) in resolve_iterations(&o, &c).into_iter().enumerate() {
                if got != Some(depths[g] + 1) {
                    return Err(format!("seed {seed}: gate {} at depth {} resolved at {got:?}", g + 1, depths[g]));
                }
            }
            runs += 1;
        }
    }
    Ok(format!("200 circuits, {runs} runs"))
}

fn c7_composition() -> Verdict {
    let err = |e: Error| e.to_string();
    let mut checks = 0;
    for a in 1..=4usize {
        for seed in 0..4u64 {
            let s = 1000 * a as u64 + 10 * seed;
            let f = gen_circuit(s, 3, 10, a);
            let g = gen_circuit(s + 1, 3, 10, a);
            let h = gen_circuit(s + 2, 3, 10, 1);
            // a single-output circuits side by side: a → a, iterable
            let mut sq = gen_circuit(s + 3, 3, 10, a);
            for k in 1..a {
                sq = compose_parallel(&sq, &gen_circuit(s + 3 + k as u64, 3, 10, a)).map_err(err)?;
            }
            let fg = compose_parallel(&f, &g).map_err(err)?;
            let fh = compose_serial(&f, &h).map_err(err)?;
            let sq_f = compose_serial(&sq, &f).map_err(err)?;
            for x in all_inputs(a) {
                let fx = f.eval_outputs(&x).map_err(err)?;
                let mut want = fx.clone();
                want.extend(g.eval_outputs(&x).map_err(err)?);
                if fg.eval_outputs(&x).map_err(err)? != want {
                    return Err(format!("parallel, arity {a}, seed {seed}"));
                }
                if fh.eval_outputs(&x).map_err(err)? != h.eval_outputs(&fx).map_err(err)? {
                    return Err(format!("serial, arity {a}, seed {seed}"));
                }
                let sx = sq.eval_outputs(&x).map_err(err)?;
                if sq_f.eval_outputs(&x).map_err(err)? != f.eval_outputs(&sx).map_err(err)? {
                    return Err(format!("serial multi-output, arity {a}, seed {seed}"));
                }
                let mut it = x.clone();
                for r in 1..=4 {
                    it = sq.eval_outputs(&it).map_err(err)?;
                    if compose_recurrent(&sq, r).map_err(err)?.eval_outputs(&x).map_err(err)? != it {
                        return Err(format!("recurrent r = {r}, arity {a}, seed {seed}"));
                    }
                }
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} input vectors × 4 laws"))
}

fn c8_stacking(d: &mut Domain) -> Verdict {
    let mut runs = 0;
    for src in ["E i. Qa(i)", "E i. (Qa(i) & i = 1)", "A i. (i = n | Qa(i))"] {
        let f = parse_formula(src).unwrap();
        let tl = compiled(&f, &ab())?;
        for r in Reduction::ALL {
            let st = stack_builtin(r, &tl, 3).map_err(|e| format!("{r} | {src}: {e}"))?;
            for w in words(&ab(), 3).into_iter().filter(|w| !w.is_empty()) {
                let got = d.record(st.run(&w))?.accepted();
                let want = eval_sentence(&f, &r.apply(&w)).map_err(|e| e.to_string())?;
                if got != want {
                    return Err(format!("{r} | {src} on {:?}", w.concat()));
                }
                runs += 1;
            }
        }
    }
    Ok(format!("9 pairs, {runs} words"))
}

// --- criterion 9: exact arithmetic ---

const RADICANDS: [i128; 8] = [1, 2, 3, 5, 6, 7, 8, 12];

fn random_sum(g: &mut ChaCha8Rng) -> RadicalSum {
    let k = g.gen_range(0..4);
    let raw: Vec<(i128, Rational)> = (0..k)
        .map(|_| (RADICANDS[g.gen_range(0..RADICANDS.len())], Rational::new(g.gen_range(-9..=9), g.gen_range(1..=6))))
        .collect();
    RadicalSum::canonicalize(raw).unwrap()
}

/// Floor and ceiling of value·2^bits, from integer square roots.
fn interval(x: &RadicalSum, bits: u32) -> (BigInt, BigInt) {
    let (mut lo, mut hi) = (BigInt::from(0), BigInt::from(0));
    for (r, c) in x.terms() {
        let (num, den) = (c.numer(), c.denom());
        let root = (BigInt::from(*r) << (2 * bits)).sqrt();
        let exact = &root * &root == (BigInt::from(*r) << (2 * bits));
        let (a, b) = (&num * &root, &num * (&root + if exact { 0 } else { 1 }));
        let (a, b) = if num.sign() == BigSign::Minus { (b, a) } else { (a, b) };
        lo += a.div_floor_big(&den);
        hi += b.div_ceil_big(&den) ;
    }
    (lo, hi)
}

trait DivBig {
    fn div_floor_big(&self, d: &BigInt) -> BigInt;
    fn div_ceil_big(&self, d: &BigInt) -> BigInt;
}

impl DivBig for BigInt {
    fn div_floor_big(&self, d: &BigInt) -> BigInt {
        num_integer::Integer::div_floor(self, d)
    }
    fn div_ceil_big(&self, d: &BigInt) -> BigInt {
        -num_integer::Integer::div_floor(&-self, d)
    }
}

fn c9_arithmetic() -> Verdict {
    let mut g = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10_000 {
        let (a, b, c) = (random_sum(&mut g), random_sum(&mut g), random_sum(&mut g));
        // canonical form: sorted squarefree radicands, nonzero coefficients
        let t = a.terms();
        if t.windows(2).any(|w| w[0].0 >= w[1].0) || t.iter().any(|(r, c)| c.is_zero() || ahat::radical::squarefree_split(*r).0 != 1) {
            return Err(format!("non-canonical {a:?}"));
        }
        // the same value written differently
        let mut raw: Vec<(i128, Rational)> = Vec::new();
        for (r, c) in t.iter().rev() {
            let half = c * &Rational::new(1, 2);
            raw.push((*r as i128 * 4, &half * &Rational::new(1, 2)));
            raw.push((*r as i128, &half * &Rational::new(1, 2)));
            raw.push((*r as i128 * 9, &half * &Rational::new(1, 6)));
        }
        if RadicalSum::canonicalize(raw).unwrap() != a {
            return Err(format!("representation of {a} is not unique"));
        }
        let laws = [
            (a.add_ref(&b), b.add_ref(&a)),
            (a.add_ref(&b).add_ref(&c), a.add_ref(&b.add_ref(&c))),
            (a.mul_ref(&b), b.mul_ref(&a)),
            (a.mul_ref(&b).mul_ref(&c), a.mul_ref(&b.mul_ref(&c))),
            (a.mul_ref(&b.add_ref(&c)), a.mul_ref(&b).add_ref(&a.mul_ref(&c))),
            (a.add_ref(&RadicalSum::zero()), a.clone()),
            (a.mul_ref(&RadicalSum::one()), a.clone()),
            (a.add_ref(&a.neg_ref()), RadicalSum::zero()),
        ];
        if let Some(k) = laws.iter().position(|(x, y)| x != y) {
            return Err(format!("field law {k} fails for {a}, {b}, {c}"));
        }
        let x = a.mul_ref(&b).sub_ref(&c);
        let (lo, hi) = interval(&x, 256);
        let zero = BigInt::from(0);
        let want = if x.is_zero() {
            Sign::Zero
        } else if lo > zero {
            Sign::Positive
        } else if hi < zero {
            Sign::Negative
        } else {
            return Err(format!("interval oracle undecided for {x}"));
        };
        if x.sign() != want {
            return Err(format!("sign of {x}: {:?}, oracle {want:?}", x.sign()));
        }
    }
    for i in 0..=100i128 {
        for j in 0..=100i128 {
            let d = dot(&ln_hash(&Rational::from_int(i)), &ln_hash(&Rational::from_int(j)));
            let closed = RadicalSum::sqrt_rational(&Rational::new(1, (i * i + 1) * (j * j + 1)))
                .unwrap()
                .scale(&Rational::from_int(i * j + 1));
            if d != closed || (d == RadicalSum::one()) != (i == j) {
                return Err(format!("hash law at ({i}, {j}): {d}"));
            }
        }
    }
    Ok("10^4 random triples; 101² hash pairs".into())
}

fn c10_domain(d: &Domain) -> Verdict {
    if d.nested > 0 || d.uncertified > 0 {
        return Err(format!("{} nested-radical reads, {} uncertified ties in {} runs", d.nested, d.uncertified, d.runs));
    }
    Ok(format!("{} runs, no nested radicals, all ties certified", d.runs))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let mut d = Domain::default();
    let mut failed = 0;
    let mut report = |k: usize, name: &str, f: &mut dyn FnMut(&mut Domain) -> Verdict, d: &mut Domain| {
        if !want(k) {
            return;
        }
        let t = Instant::now();
        let v = f(d);
        let secs = t.elapsed().as_secs_f64();
        match v {
            Ok(m) => println!("criterion {k:>2} PASS  {name}: {m} ({secs:.1}s)"),
            Err(m) => {
                failed += 1;
                println!("criterion {k:>2} FAIL  {name}: {m} ({secs:.1}s)");
            }
        }
    };
    report(1, "formula-compiler equivalence", &mut c1_corpus, &mut d);
    report(2, "threshold sharpness", &mut c2_thresholds, &mut d);
    report(3, "M2 majority language", &mut c3_majority, &mut d);
    report(4, "mask conversion", &mut c4_masks, &mut d);
    report(5, "circuit goldens", &mut |_| c5_goldens(), &mut d);
    report(6, "looped circuit evaluation", &mut c6_circuits, &mut d);
    report(7, "composition laws", &mut |_| c7_composition(), &mut d);
    report(8, "reduction stacking", &mut c8_stacking, &mut d);
    report(9, "exact arithmetic", &mut |_| c9_arithmetic(), &mut d);
    let snapshot = Domain { ..d };
    report(10, "exact-domain preservation", &mut |_| c10_domain(&snapshot), &mut Domain::default());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
