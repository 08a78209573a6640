//! Seeded differential testing: compiled formulas, looped circuit evaluators,
//! mask conversion and reduction stacking, each against its direct oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circuit::evaluator::{build_circuit_evaluator, run_evaluator};
use crate::circuit::{all_inputs, Circuit, Gate, GateKind};
use crate::compile::{compile, CompileOptions, Mutation};
use crate::error::{Error, Result};
use crate::logic::{eval_sentence, formula_metrics, words, Formula, Index};
use crate::mask::to_causal;
use crate::reduce::{stack_builtin, Reduction};
use crate::sim::{run, Stats};

/// Bumped whenever a generator changes what a seed produces.
pub const GENERATOR_VERSION: u32 = 1;

const VARS: [&str; 3] = ["i", "j", "l"];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sentence over `alphabet` with at most `max_k` distinct variables and
/// nesting depth at most `max_depth` (≥ 2). Variables may be re-bound.
pub fn gen_formula(seed: u64, max_k: usize, max_depth: usize, alphabet: &[String]) -> Formula {
    assert!((1..=3).contains(&max_k) && max_depth >= 2 && !alphabet.is_empty());
    let mut g = rng(seed);
    // The root is always a quantifier so small draws still exercise one.
    let target_k = g.gen_range(1..=max_k);
    let pool = &VARS[..target_k];
    let v = pool[g.gen_range(0..pool.len())];
    let body = gen_body(&mut g, pool, &[v], max_depth - 1, alphabet);
    quantify(&mut g, v, pool, body)
}

fn quantify(g: &mut ChaCha8Rng, v: &str, pool: &[&str], body: Formula) -> Formula {
    let others: Vec<&&str> = pool.iter().filter(|x| **x != v).collect();
    match g.gen_range(0..5) {
        0 | 1 => Formula::exists(v, body),
        2 | 3 => Formula::forall(v, body),
        _ if !others.is_empty() => {
            let w = others[g.gen_range(0..others.len())];
            Formula::maj2(v, w, body)
        }
        _ => Formula::exists(v, body),
    }
}

fn gen_index(g: &mut ChaCha8Rng, bound: &[&str]) -> Index {
    match g.gen_range(0..6) {
        0 => Index::One,
        1 => Index::N,
        _ => Index::Var(bound[g.gen_range(0..bound.len())].to_string()),
    }
}

fn gen_atom(g: &mut ChaCha8Rng, bound: &[&str], alphabet: &[String]) -> Formula {
    match g.gen_range(0..5) {
        0 | 1 => Formula::Q(alphabet[g.gen_range(0..alphabet.len())].clone(), gen_index(g, bound)),
        2 => Formula::Eq(gen_index(g, bound), gen_index(g, bound)),
        3 => Formula::Leq(gen_index(g, bound), gen_index(g, bound)),
        _ => Formula::Geq(gen_index(g, bound), gen_index(g, bound)),
    }
}

fn gen_body(g: &mut ChaCha8Rng, pool: &[&str], bound: &[&str], depth: usize, alphabet: &[String]) -> Formula {
    if depth <= 1 || g.gen_range(0..4) == 0 {
        return gen_atom(g, bound, alphabet);
    }
    match g.gen_range(0..6) {
        0 => Formula::and(gen_body(g, pool, bound, depth - 1, alphabet), gen_body(g, pool, bound, depth - 1, alphabet)),
        1 => Formula::or(gen_body(g, pool, bound, depth - 1, alphabet), gen_body(g, pool, bound, depth - 1, alphabet)),
        2 => Formula::not(gen_body(g, pool, bound, depth - 1, alphabet)),
        _ => {
            let v = pool[g.gen_range(0..pool.len())];
            let mut inner: Vec<&str> = bound.iter().copied().filter(|x| *x != v).collect();
            inner.push(v);
            let body = gen_body(g, pool, &inner, depth - 1, alphabet);
            match quantify(g, v, pool, body) {
                // M² binds a second variable too.
                Formula::Maj2(a, b, body) => {
                    let mut both = inner.clone();
                    both.retain(|x| *x != b);
                    both.push(pool.iter().copied().find(|x| *x == b).unwrap());
                    let body = if g.gen_bool(0.5) { *body } else { gen_body(g, pool, &both, depth - 1, alphabet) };
                    Formula::Maj2(a, b, Box::new(body))
                }
                q => q,
            }
        }
    }
}

/// Random circuit with `arity` inputs, depth ≤ max_depth and size ≤ max_size.
/// Every non-input gate has fan-in ≥ 1; NOT has fan-in exactly 1.
pub fn gen_circuit(seed: u64, max_depth: usize, max_size: usize, arity: usize) -> Circuit {
    assert!(arity >= 1 && max_depth >= 1 && max_size > arity);
    let mut g = rng(seed);
    let mut gates: Vec<Gate> = (0..arity).map(|_| Gate { kind: GateKind::X, args: vec![] }).collect();
    let mut depth = vec![0usize; arity];
    let extra = g.gen_range(1..=max_size - arity);
    for _ in 0..extra {
        let kind = [GateKind::And, GateKind::Or, GateKind::Not, GateKind::Maj][g.gen_range(0..4)];
        let eligible: Vec<usize> = (0..gates.len()).filter(|&i| depth[i] < max_depth).collect();
        let fan = if kind == GateKind::Not { 1 } else { g.gen_range(1..=4.min(eligible.len()).max(1)) };
        let args: Vec<usize> = (0..fan).map(|_| eligible[g.gen_range(0..eligible.len())] + 1).collect();
        depth.push(args.iter().map(|a| depth[a - 1] + 1).max().unwrap());
        gates.push(Gate { kind, args });
    }
    Circuit::new(gates, 1).expect("generated circuits are well formed")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Formula,
    Circuit,
    Mask,
    Stack,
}

impl CaseKind {
    pub fn by_name(s: &str) -> Result<Self> {
        match s {
            "formula" | "formulas" => Ok(CaseKind::Formula),
            "circuit" | "circuits" => Ok(CaseKind::Circuit),
            "mask" => Ok(CaseKind::Mask),
            "stack" => Ok(CaseKind::Stack),
            _ => Err(Error::Invalid(format!("unknown fuzz kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuzzParams {
    pub alphabet: Vec<String>,
    pub max_k: usize,
    pub max_depth: usize,
    /// Longest word for k ≤ 2 (k = 3 uses min(4, this)).
    pub max_len: usize,
    pub circuit_depth: usize,
    pub circuit_size: usize,
    pub circuit_arity: usize,
    pub mutation: Option<Mutation>,
}

impl Default for FuzzParams {
    fn default() -> Self {
        FuzzParams {
            alphabet: vec!["a".into(), "b".into()],
            max_k: 2,
            max_depth: 4,
            max_len: 4,
            circuit_depth: 5,
            circuit_size: 40,
            circuit_arity: 6,
            mutation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Instance {
    Formula(Formula),
    Circuit(Circuit),
    Mask(Formula),
    Stack(Reduction, Formula),
}

impl std::fmt::Display for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Instance::Formula(x) | Instance::Mask(x) => write!(f, "{x}"),
            Instance::Circuit(c) => write!(f, "{c}"),
            Instance::Stack(r, x) => write!(f, "{r} | {x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzCase {
    pub seed: u64,
    pub kind: CaseKind,
    pub instance: Instance,
}

impl FuzzCase {
    pub fn generate(kind: CaseKind, seed: u64, p: &FuzzParams) -> FuzzCase {
        let instance = match kind {
            CaseKind::Formula => Instance::Formula(gen_formula(seed, p.max_k, p.max_depth, &p.alphabet)),
            CaseKind::Circuit => Instance::Circuit(gen_circuit(seed, p.circuit_depth, p.circuit_size, p.circuit_arity)),
            // Conversion multiplies the sequence length; keep these small.
            CaseKind::Mask => Instance::Mask(gen_formula(seed, 1, p.max_depth.min(3), &p.alphabet)),
            CaseKind::Stack => {
                let f = Reduction::ALL[(seed % 3) as usize];
                Instance::Stack(f, gen_formula(seed, 1, p.max_depth.min(3), &p.alphabet))
            }
        };
        FuzzCase { seed, kind, instance }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Mismatch { input: String, oracle: bool, subject: bool },
    Error { message: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub seed: u64,
    pub kind: CaseKind,
    pub generator: u32,
    pub instance: String,
    pub inputs_checked: usize,
    pub uncertified_ties: usize,
    #[serde(flatten)]
    pub verdict: Verdict,
    /// Smallest instance found that still mismatches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrunk: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrunk_input: Option<String>,
}

struct Check {
    inputs: usize,
    stats: Stats,
    mismatch: Option<(String, bool, bool)>,
}

fn word_len(p: &FuzzParams, f: &Formula) -> usize {
    if formula_metrics(f).0 >= 3 {
        p.max_len.min(4)
    } else {
        p.max_len
    }
}

fn check_formula(f: &Formula, p: &FuzzParams, max_len: usize) -> Result<Check> {
    let opts = CompileOptions { mutation: p.mutation, ..Default::default() };
    let t = compile(f, &p.alphabet, &opts)?.transformer;
    let mut c = Check { inputs: 0, stats: Stats::default(), mismatch: None };
    for w in words(&p.alphabet, max_len) {
        let o = run(&t, &w)?;
        c.inputs += 1;
        c.stats.merge(&o.stats);
        let want = eval_sentence(f, &w)?;
        if o.accepted() != want {
            c.mismatch = Some((w.concat(), want, o.accepted()));
            break;
        }
    }
    Ok(c)
}

fn check_circuit(circ: &Circuit) -> Result<Check> {
    let depth = circ.depth().max(1) as u64;
    let (ir, _) = build_circuit_evaluator(0, depth + 1);
    let mut c = Check { inputs: 0, stats: Stats::default(), mismatch: None };
    for x in all_inputs(circ.arity()) {
        let o = run_evaluator(&ir, circ, &x, None)?;
        c.inputs += 1;
        c.stats.merge(&o.stats);
        let want = circ.eval(&x)?;
        if o.accepted() != want {
            let s: String = x.iter().map(|&b| if b { '1' } else { '0' }).collect();
            c.mismatch = Some((s, want, o.accepted()));
            break;
        }
    }
    Ok(c)
}

fn check_mask(f: &Formula, p: &FuzzParams, max_len: usize) -> Result<Check> {
    let t = compile(f, &p.alphabet, &CompileOptions { mutation: p.mutation, ..Default::default() })?.transformer;
    let conv = to_causal(&t)?.transformer;
    let mut c = Check { inputs: 0, stats: Stats::default(), mismatch: None };
    for w in words(&p.alphabet, max_len) {
        let o = run(&conv, &w)?;
        c.inputs += 1;
        c.stats.merge(&o.stats);
        let want = eval_sentence(f, &w)?;
        if o.accepted() != want {
            c.mismatch = Some((w.concat(), want, o.accepted()));
            break;
        }
    }
    Ok(c)
}

fn check_stack(r: Reduction, f: &Formula, p: &FuzzParams, max_len: usize) -> Result<Check> {
    let tl = compile(f, &p.alphabet, &CompileOptions { mutation: p.mutation, ..Default::default() })?.transformer;
    let st = stack_builtin(r, &tl, max_len)?;
    let mut c = Check { inputs: 0, stats: Stats::default(), mismatch: None };
    for w in words(&p.alphabet, max_len) {
        let o = st.run(&w)?;
        c.inputs += 1;
        c.stats.merge(&o.stats);
        let want = eval_sentence(f, &r.apply(&w))?;
        if o.accepted() != want {
            c.mismatch = Some((w.concat(), want, o.accepted()));
            break;
        }
    }
    Ok(c)
}

fn check(inst: &Instance, p: &FuzzParams) -> Result<Check> {
    match inst {
        Instance::Formula(f) => check_formula(f, p, word_len(p, f)),
        Instance::Circuit(c) => check_circuit(c),
        Instance::Mask(f) => check_mask(f, p, p.max_len.min(3)),
        Instance::Stack(r, f) => check_stack(*r, f, p, p.max_len.min(2)),
    }
}

/// Sentences obtained by replacing one node with one of its children, or
/// an atom with a constant one.
fn formula_shrinks(f: &Formula) -> Vec<Formula> {
    fn go(f: &Formula, out: &mut Vec<Formula>, wrap: &dyn Fn(Formula) -> Formula) {
        for c in f.children() {
            out.push(wrap(c.clone()));
        }
        if f.is_atom() && *f != Formula::Eq(Index::One, Index::One) {
            out.push(wrap(Formula::Eq(Index::One, Index::One)));
        }
        match f {
            Formula::And(a, b) => {
                go(a, out, &|x| wrap(Formula::and(x, (**b).clone())));
                go(b, out, &|x| wrap(Formula::and((**a).clone(), x)));
            }
            Formula::Or(a, b) => {
                go(a, out, &|x| wrap(Formula::or(x, (**b).clone())));
                go(b, out, &|x| wrap(Formula::or((**a).clone(), x)));
            }
            Formula::Not(a) => go(a, out, &|x| wrap(Formula::not(x))),
            Formula::Exists(v, a) => go(a, out, &|x| wrap(Formula::exists(v, x))),
            Formula::Forall(v, a) => go(a, out, &|x| wrap(Formula::forall(v, x))),
            Formula::Maj2(i, j, a) => go(a, out, &|x| wrap(Formula::maj2(i, j, x))),
            _ => {}
        }
    }
    let mut out = Vec::new();
    go(f, &mut out, &|x| x);
    out.retain(|g| g.is_sentence() && !g.variables().is_empty());
    out
}

/// Circuits with one non-input gate removed (references go to its first
/// argument instead).
fn circuit_shrinks(c: &Circuit) -> Vec<Circuit> {
    let mut out = Vec::new();
    for g in 0..c.gates.len() {
        let Some(&to) = c.gates[g].args.first() else { continue };
        let remap = |a: usize| {
            let a = if a == g + 1 { to } else { a };
            if a > g + 1 {
                a - 1
            } else {
                a
            }
        };
        let gates: Vec<Gate> = c
            .gates
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != g)
            .map(|(_, x)| Gate { kind: x.kind, args: x.args.iter().map(|&a| remap(a)).collect() })
            .collect();
        if let Ok(s) = Circuit::new(gates, 1) {
            out.push(s);
        }
    }
    out
}

fn shrink_candidates(inst: &Instance) -> Vec<Instance> {
    match inst {
        Instance::Formula(f) => formula_shrinks(f).into_iter().map(Instance::Formula).collect(),
        Instance::Mask(f) => formula_shrinks(f).into_iter().map(Instance::Mask).collect(),
        Instance::Stack(r, f) => formula_shrinks(f).into_iter().map(|g| Instance::Stack(*r, g)).collect(),
        Instance::Circuit(c) => circuit_shrinks(c).into_iter().map(Instance::Circuit).collect(),
    }
}

/// Greedy shrinking: keep taking the first smaller instance that still
/// mismatches. Words are enumerated shortest first, so the reported input is
/// already the shortest for the final instance.
fn shrink(inst: &Instance, p: &FuzzParams, input: String) -> (Instance, String) {
    let mut cur = inst.clone();
    let mut cur_input = input;
    'outer: loop {
        for cand in shrink_candidates(&cur) {
            if let Ok(Check { mismatch: Some((w, _, _)), .. }) = check(&cand, p) {
                cur = cand;
                cur_input = w;
                continue 'outer;
            }
        }
        return (cur, cur_input);
    }
}

pub fn differential_run(case: &FuzzCase, p: &FuzzParams) -> CaseReport {
    let mut rep = CaseReport {
        seed: case.seed,
        kind: case.kind,
        generator: GENERATOR_VERSION,
        instance: case.instance.to_string(),
        inputs_checked: 0,
        uncertified_ties: 0,
        verdict: Verdict::Pass,
        shrunk: None,
        shrunk_input: None,
    };
    match check(&case.instance, p) {
        Err(e) => rep.verdict = Verdict::Error { message: e.to_string() },
        Ok(c) => {
            rep.inputs_checked = c.inputs;
            rep.uncertified_ties = c.stats.uncertified_ties;
            if let Some((input, oracle, subject)) = c.mismatch {
                let (s, si) = shrink(&case.instance, p, input.clone());
                rep.shrunk = Some(s.to_string());
                rep.shrunk_input = Some(si);
                rep.verdict = Verdict::Mismatch { input, oracle, subject };
            }
        }
    }
    rep
}

/// Runs `cases` consecutive seeds starting at `seed` on `threads` workers;
/// reports come back in seed order.
pub fn run_suite(kind: CaseKind, seed: u64, cases: usize, p: &FuzzParams, threads: usize) -> Vec<CaseReport> {
    let seeds: Vec<u64> = (0..cases as u64).map(|k| seed.wrapping_add(k)).collect();
    let threads = threads.clamp(1, cases.max(1));
    let chunk = seeds.len().div_ceil(threads).max(1);
    let mut out: Vec<CaseReport> = Vec::with_capacity(cases);
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&sd| differential_run(&FuzzCase::generate(kind, sd, p), p)).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            out.extend(h.join().expect("fuzz worker panicked"));
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::parse_formula;

    fn ab() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_formula(1, 2, 4, &ab()), gen_formula(1, 2, 4, &ab()));
        assert_eq!(gen_circuit(1, 5, 40, 6), gen_circuit(1, 5, 40, 6));
        assert_ne!(gen_formula(1, 2, 4, &ab()), gen_formula(2, 2, 4, &ab()));
    }

    #[test]
    fn generated_formulas_respect_bounds() {
        let mut seen = [0usize; 4];
        for seed in 0..1000 {
            let f = gen_formula(seed, 3, 4, &ab());
            assert!(f.is_sentence(), "{f}");
            let (k, d) = formula_metrics(&f);
            assert!(k <= 3 && d <= 4, "{f}");
            assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
            seen[k] += 1;
            assert!(formula_metrics(&gen_formula(seed, 1, 4, &ab())).0 <= 1);
        }
        assert!(seen[1] > 0 && seen[2] > 0 && seen[3] > 0, "{seen:?}");
    }

    #[test]
    fn generated_circuits_respect_bounds() {
        let mut kinds = std::collections::BTreeSet::new();
        for seed in 0..300 {
            let c = gen_circuit(seed, 5, 40, 6);
            assert!(c.depth() <= 5 && c.size() <= 40 && c.arity() == 6);
            for g in &c.gates {
                assert!(g.kind == GateKind::X || !g.args.is_empty());
                kinds.insert(g.kind.name());
            }
        }
        assert_eq!(kinds.len(), 5);
    }

    #[test]
    fn healthy_build_has_no_mismatches() {
        let p = FuzzParams { max_len: 3, ..Default::default() };
        for kind in [CaseKind::Formula, CaseKind::Circuit] {
            for r in run_suite(kind, 7, 6, &p, 2) {
                assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
                assert_eq!(r.uncertified_ties, 0);
            }
        }
    }

    #[test]
    fn planted_forall_bug_shrinks_to_one_missing_witness() {
        let p = FuzzParams { max_len: 4, mutation: Some(Mutation::ForallOffByOne), ..Default::default() };
        let f = parse_formula("A i. (Qa(i) | (i = n & Qb(1)))").unwrap();
        let case = FuzzCase { seed: 0, kind: CaseKind::Formula, instance: Instance::Formula(f) };
        let rep = differential_run(&case, &p);
        assert!(matches!(rep.verdict, Verdict::Mismatch { oracle: false, subject: true, .. }), "{rep:?}");
        let shrunk = parse_formula(rep.shrunk.as_deref().unwrap()).unwrap();
        let w = crate::sim::chars(rep.shrunk_input.as_deref().unwrap());
        // The mutant accepts exactly when one position fails.
        let body = match &shrunk {
            Formula::Forall(_, b) => b.clone(),
            other => panic!("shrunk to {other}"),
        };
        let n = w.len();
        let witnesses = (1..=n)
            .filter(|&i| {
                let v = crate::logic::Assignment::new().with("i", i);
                crate::logic::eval_formula(&body, &w, &v).unwrap()
            })
            .count();
        assert_eq!(witnesses, n - 1, "{shrunk} on {w:?}");
        // Replay gives the same report.
        let again = differential_run(&case, &p);
        assert_eq!(again.verdict, rep.verdict);
        assert_eq!(again.shrunk, rep.shrunk);
    }
}
