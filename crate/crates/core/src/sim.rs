//! Exact execution of a `TransformerIR`.

use std::collections::HashMap;

use num_traits::ToPrimitive;

use crate::error::{Error, Result};
use crate::ir::{
    Decision, GadgetOp, Head, Mask, Matrix, Operand, PositionKind, Sublayer, TransformerIR, BLANK,
    BOS,
};
use crate::radical::{ln_hash, RadicalSum, Sign};
use crate::rational::Rational;

pub type Vector = Vec<RadicalSum>;

/// Split a word over single-character tokens.
pub fn chars(w: &str) -> Vec<String> {
    w.chars().map(|c| c.to_string()).collect()
}

/// Alphabet manifest: whitespace-separated, distinct tokens, none reserved.
pub fn parse_alphabet(text: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for t in text.split_whitespace() {
        if t == BOS || t == BLANK {
            return Err(Error::Parse(format!("alphabet token {t:?} is reserved")));
        }
        if out.iter().any(|a| a == t) {
            return Err(Error::Parse(format!("alphabet token {t:?} repeated")));
        }
        out.push(t.to_string());
    }
    if out.is_empty() {
        return Err(Error::Parse("empty alphabet".into()));
    }
    Ok(out)
}

/// Split a word into alphabet tokens by greedy longest match; whitespace
/// between tokens is ignored.
pub fn tokenize(word: &str, alphabet: &[String]) -> Result<Vec<String>> {
    let mut sorted: Vec<&String> = alphabet.iter().filter(|a| !a.is_empty()).collect();
    sorted.sort_by_key(|a| std::cmp::Reverse(a.len()));
    let mut rest = word.trim_start();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let Some(a) = sorted.iter().find(|a| rest.starts_with(a.as_str())) else {
            let at = word.len() - rest.len();
            return Err(Error::Parse(format!("offset {at}: no alphabet token matches")));
        };
        out.push(a.to_string());
        rest = rest[a.len()..].trim_start();
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TraceOptions {
    /// Record residual snapshots after every sublayer.
    pub snapshots: bool,
    /// Restrict snapshots to these channels (all when `None`).
    pub channels: Option<Vec<usize>>,
    /// Keep per-head argmax records.
    pub attention: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Replace the IR's loop count.
    pub loops: Option<usize>,
    pub trace: TraceOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SublayerId {
    pub block: char,
    /// Loop iteration (1-based) for block B, 0 elsewhere.
    pub iteration: usize,
    pub index: usize,
    /// Position in the unrolled stack.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub at: SublayerId,
    pub channels: Vec<usize>,
    pub residual: Vec<Vector>,
}

/// Argmax set of one head at one query position, as key groups.
#[derive(Clone, Debug)]
pub struct TieSet {
    pub groups: Vec<u32>,
    /// Keys beyond this position were masked out.
    pub bound: usize,
}

#[derive(Clone, Debug)]
pub struct HeadRecord {
    pub at: SublayerId,
    pub head: usize,
    pub mask: Mask,
    /// Key group of each position; positions share a group iff their keys are equal.
    pub key_group: Vec<u32>,
    pub ties: Vec<TieSet>,
}

impl HeadRecord {
    /// Positions (0-based) in the argmax set of query `i`.
    pub fn positions(&self, i: usize) -> Vec<usize> {
        let t = &self.ties[i];
        (0..t.bound).filter(|&j| t.groups.contains(&self.key_group[j])).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub normalizations: usize,
    pub attention_queries: usize,
    /// Argmax sets spanning more than one distinct key vector.
    pub uncertified_ties: usize,
}

impl Stats {
    pub fn merge(&mut self, o: &Stats) {
        self.normalizations += o.normalizations;
        self.attention_queries += o.attention_queries;
        self.uncertified_ties += o.uncertified_ties;
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub snapshots: Vec<Snapshot>,
    pub heads: Vec<HeadRecord>,
}

impl Trace {
    /// One JSON record per (sublayer, position).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.snapshots {
            for (pos, row) in s.residual.iter().enumerate() {
                let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let rec = serde_json::json!({
                    "block": s.at.block.to_string(),
                    "iteration": s.at.iteration,
                    "index": s.at.index,
                    "step": s.at.step,
                    "position": pos + 1,
                    "channels": s.channels,
                    "values": values,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Bool(bool),
    Token(String),
}

impl Verdict {
    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Verdict::Bool(b) => Some(*b),
            Verdict::Token(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub verdict: Verdict,
    pub value: RadicalSum,
    pub tokens: Vec<String>,
    pub loops: usize,
    pub state: Vec<Vector>,
    pub stats: Stats,
    pub trace: Trace,
}

impl Outcome {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Bool(true)
    }
}

/// Physical sequence "$ w □^p(n)".
pub fn pad_input(t: &TransformerIR, w: &[String]) -> Result<Vec<String>> {
    for tok in w {
        if tok == BOS || tok == BLANK || t.token_index(tok).is_none() {
            return Err(Error::Domain(format!("token {tok:?} is not an input symbol")));
        }
    }
    let p = t.padding.count(w.len());
    let mut seq = Vec::with_capacity(1 + w.len() + p);
    seq.push(BOS.to_string());
    seq.extend(w.iter().cloned());
    seq.extend(std::iter::repeat(BLANK.to_string()).take(p));
    Ok(seq)
}

pub fn run(t: &TransformerIR, w: &[String]) -> Result<Outcome> {
    run_with(t, w, &RunOptions::default())
}

pub fn run_str(t: &TransformerIR, w: &str) -> Result<Outcome> {
    run(t, &chars(w))
}

pub fn run_with(t: &TransformerIR, w: &[String], opts: &RunOptions) -> Result<Outcome> {
    t.check()?;
    let tokens = pad_input(t, w)?;
    let n_total = tokens.len();
    let mut state = embed(t, &tokens);
    let loops = opts.loops.unwrap_or_else(|| t.unroll_depth(n_total));
    let mut ex = Executor { t, opts, stats: Stats::default(), trace: Trace::default(), step: 0 };
    for (i, s) in t.blocks.a.iter().enumerate() {
        ex.apply(s, &mut state, SublayerId { block: 'a', iteration: 0, index: i, step: 0 })?;
    }
    for it in 1..=loops {
        for (i, s) in t.blocks.b.iter().enumerate() {
            ex.apply(s, &mut state, SublayerId { block: 'b', iteration: it, index: i, step: 0 })?;
        }
    }
    for (i, s) in t.blocks.c.iter().enumerate() {
        ex.apply(s, &mut state, SublayerId { block: 'c', iteration: 0, index: i, step: 0 })?;
    }
    let last = state.last().expect("BoS always present");
    let value = linear(&t.readout.read, last);
    let verdict = match &t.readout.decision {
        Decision::Sign => Verdict::Bool(value.sign() == Sign::Positive),
        Decision::Argmax { logits } => {
            let mut best: Option<(RadicalSum, &String)> = None;
            for (tok, row) in logits {
                let v = linear(row, last);
                if best.as_ref().map_or(true, |(b, _)| v.compare(b).is_gt()) {
                    best = Some((v, tok));
                }
            }
            Verdict::Token(best.map(|(_, t)| t.clone()).unwrap_or_default())
        }
    };
    Ok(Outcome { verdict, value, tokens, loops, state, stats: ex.stats, trace: ex.trace })
}

fn embed(t: &TransformerIR, tokens: &[String]) -> Vec<Vector> {
    let n_total = tokens.len();
    let cache: HashMap<&String, Vector> = t
        .embedding
        .iter()
        .map(|(k, v)| (k, v.iter().cloned().map(RadicalSum::from).collect()))
        .collect();
    tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let mut h = cache[tok].clone();
            let pos = match t.position_encoding.kind {
                PositionKind::None => None,
                PositionKind::InverseIndex => Some(Rational::new(1, i as i128 + 1)),
                PositionKind::IndexOverLength => {
                    Some(Rational::new(i as i128 + 1, n_total as i128))
                }
            };
            if let Some(p) = pos {
                let c = t.position_encoding.channel;
                h[c] = h[c].add_ref(&RadicalSum::from(p));
            }
            h
        })
        .collect()
}

pub fn linear(row: &[(usize, Rational)], h: &[RadicalSum]) -> RadicalSum {
    let mut acc = RadicalSum::zero();
    for (c, k) in row {
        if !h[*c].is_zero() {
            acc.add_assign_ref(&h[*c].scale(k));
        }
    }
    acc
}

fn apply_rows(rows: &[Vec<(usize, Rational)>], h: &[RadicalSum]) -> Vector {
    rows.iter().map(|r| linear(r, h)).collect()
}

/// L2 layer norm; the zero vector maps to itself.
pub fn layer_norm(x: &[RadicalSum]) -> Result<Vector> {
    let mut s = RadicalSum::zero();
    for v in x {
        if !v.is_zero() {
            s.add_assign_ref(&v.mul_ref(v));
        }
    }
    if s.is_zero() {
        return Ok(x.to_vec());
    }
    let q = s.as_rational().ok_or(Error::NestedRadical)?;
    let inv = RadicalSum::sqrt_rational(&q.recip())?;
    Ok(match inv.as_rational() {
        Some(k) => x.iter().map(|v| v.scale(&k)).collect(),
        None => x.iter().map(|v| v.mul_ref(&inv)).collect(),
    })
}

pub fn relu(v: &RadicalSum) -> RadicalSum {
    if v.sign() == Sign::Positive {
        v.clone()
    } else {
        RadicalSum::zero()
    }
}

/// Integer carried by a hash block, decoded leniently.
pub fn decode_hash(h: &[RadicalSum]) -> Result<i128> {
    if h[1].sign() != Sign::Positive {
        return Ok(0);
    }
    let z = RadicalSum::floor_div(&h[0], &h[1])
        .ok_or_else(|| Error::Domain("hash block out of range".into()))?;
    Ok(z.max(0))
}

fn f64_vec(v: &[RadicalSum]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

struct Executor<'a> {
    t: &'a TransformerIR,
    opts: &'a RunOptions,
    stats: Stats,
    trace: Trace,
    step: usize,
}

/// Interns vectors, returning dense ids.
struct Interner {
    ids: HashMap<Vector, u32>,
    items: Vec<Vector>,
}

impl Interner {
    fn new() -> Self {
        Interner { ids: HashMap::new(), items: Vec::new() }
    }
    fn id(&mut self, v: Vector) -> u32 {
        if let Some(&i) = self.ids.get(&v) {
            return i;
        }
        let i = self.items.len() as u32;
        self.items.push(v.clone());
        self.ids.insert(v, i);
        i
    }
}

struct Best {
    groups: Vec<u32>,
    score: Option<RadicalSum>,
    approx: f64,
    err: f64,
    seen: usize,
}

impl<'a> Executor<'a> {
    fn apply(&mut self, s: &Sublayer, state: &mut [Vector], mut at: SublayerId) -> Result<()> {
        self.step += 1;
        at.step = self.step;
        match s {
            Sublayer::Attention { prenorm, heads, output } => {
                self.attention(prenorm, heads, output, state, at)?
            }
            Sublayer::FeedForward { prenorm, up, down } => self.ffn(prenorm, up, down, state)?,
            Sublayer::Gadget { ops, .. } => gadgets(ops, state)?,
        }
        if self.opts.trace.snapshots {
            let channels: Vec<usize> = match &self.opts.trace.channels {
                Some(c) => c.clone(),
                None => (0..self.t.width).collect(),
            };
            let residual =
                state.iter().map(|h| channels.iter().map(|&c| h[c].clone()).collect()).collect();
            self.trace.snapshots.push(Snapshot { at, channels, residual });
        }
        Ok(())
    }

    /// Distinct prenorm reads and their normalizations.
    fn reads(&mut self, prenorm: &Matrix, state: &[Vector]) -> Result<(Vec<u32>, Vec<Vector>)> {
        let rows = prenorm.sparse_rows();
        let mut interner = Interner::new();
        let ids: Vec<u32> = state.iter().map(|h| interner.id(apply_rows(&rows, h))).collect();
        let mut zs = Vec::with_capacity(interner.items.len());
        for x in &interner.items {
            self.stats.normalizations += 1;
            zs.push(layer_norm(x)?);
        }
        Ok((ids, zs))
    }

    fn ffn(&mut self, prenorm: &Matrix, up: &Matrix, down: &Matrix, state: &mut [Vector]) -> Result<()> {
        let (ids, zs) = self.reads(prenorm, state)?;
        let up_rows = up.sparse_rows();
        // Column-major view of `down`: hidden unit -> [(channel, coef)].
        let mut down_cols: Vec<Vec<(usize, Rational)>> = vec![Vec::new(); down.cols];
        for (r, row) in down.sparse_rows().into_iter().enumerate() {
            for (c, v) in row {
                down_cols[c].push((r, v));
            }
        }
        let deltas: Vec<Vec<(usize, RadicalSum)>> = zs
            .iter()
            .map(|z| {
                let mut acc: HashMap<usize, RadicalSum> = HashMap::new();
                for (u, row) in up_rows.iter().enumerate() {
                    if down_cols[u].is_empty() {
                        continue;
                    }
                    let a = relu(&linear(row, z));
                    if a.is_zero() {
                        continue;
                    }
                    for (ch, k) in &down_cols[u] {
                        acc.entry(*ch).or_default().add_assign_ref(&a.scale(k));
                    }
                }
                let mut d: Vec<_> = acc.into_iter().filter(|(_, v)| !v.is_zero()).collect();
                d.sort_by_key(|e| e.0);
                d
            })
            .collect();
        for (h, id) in state.iter_mut().zip(&ids) {
            for (c, v) in &deltas[*id as usize] {
                h[*c].add_assign_ref(v);
            }
        }
        Ok(())
    }

    fn attention(
        &mut self,
        prenorm: &Matrix,
        heads: &[Head],
        output: &Matrix,
        state: &mut [Vector],
        at: SublayerId,
    ) -> Result<()> {
        let n = state.len();
        let (read_ids, zs) = self.reads(prenorm, state)?;
        let mut head_out: Vec<Vec<Vector>> = Vec::with_capacity(heads.len());
        for (hidx, head) in heads.iter().enumerate() {
            let out = self.head(head, hidx, &read_ids, &zs, state, at)?;
            head_out.push(out);
        }
        let out_rows = output.sparse_rows();
        for i in 0..n {
            let concat: Vector = head_out.iter().flat_map(|o| o[i].iter().cloned()).collect();
            for (c, row) in out_rows.iter().enumerate() {
                if row.is_empty() {
                    continue;
                }
                let d = linear(row, &concat);
                state[i][c].add_assign_ref(&d);
            }
        }
        Ok(())
    }

    fn head(
        &mut self,
        head: &Head,
        hidx: usize,
        read_ids: &[u32],
        zs: &[Vector],
        state: &[Vector],
        at: SublayerId,
    ) -> Result<Vec<Vector>> {
        let n = state.len();
        let q_rows = head.query.sparse_rows();
        let k_rows = head.key.sparse_rows();
        let v_rows = head.value.sparse_rows();
        let dv = head.value.rows;
        let qz: Vec<Vector> = zs.iter().map(|z| apply_rows(&q_rows, z)).collect();
        let kz: Vec<Vector> = zs.iter().map(|z| apply_rows(&k_rows, z)).collect();
        let vz: Vec<Vector> = zs.iter().map(|z| apply_rows(&v_rows, z)).collect();
        let aux: Vec<(Vec<Vec<(usize, Rational)>>, Vec<Vec<(usize, Rational)>>)> = head
            .aux
            .iter()
            .map(|t| (t.query.scaled(&t.weight).sparse_rows(), t.key.sparse_rows()))
            .collect();

        let mut qi = Interner::new();
        let mut ki = Interner::new();
        let mut qid = Vec::with_capacity(n);
        let mut kid = Vec::with_capacity(n);
        for j in 0..n {
            let r = read_ids[j] as usize;
            let mut q = qz[r].clone();
            let mut k = kz[r].clone();
            for (aq, ak) in &aux {
                q.extend(apply_rows(aq, &state[j]));
                k.extend(apply_rows(ak, &state[j]));
            }
            qid.push(qi.id(q));
            kid.push(ki.id(k));
        }
        let qf: Vec<Vec<f64>> = qi.items.iter().map(|v| f64_vec(v)).collect();
        let kf: Vec<Vec<f64>> = ki.items.iter().map(|v| f64_vec(v)).collect();
        let score = |q: u32, k: u32| crate::radical::dot(&qi.items[q as usize], &ki.items[k as usize]);
        let approx = |q: u32, k: u32| {
            let (a, b) = (&qf[q as usize], &kf[k as usize]);
            let mut s = 0.0;
            let mut m = 0.0;
            for (x, y) in a.iter().zip(b) {
                s += x * y;
                m += (x * y).abs();
            }
            (s, m * 1e-9 + 1e-200)
        };
        // Offer key group `k` to the running argmax of query `q`.
        let offer = |best: &mut Best, q: u32, k: u32| {
            let (s, e) = approx(q, k);
            if best.groups.is_empty() {
                *best = Best { groups: vec![k], score: None, approx: s, err: e, seen: best.seen };
                return;
            }
            let (ord, exact) = if s > best.approx + best.err + e {
                (std::cmp::Ordering::Greater, None)
            } else if s < best.approx - best.err - e {
                (std::cmp::Ordering::Less, None)
            } else {
                let b = best.score.get_or_insert_with(|| score(q, best.groups[0])).clone();
                let sk = score(q, k);
                (sk.compare(&b), Some(sk))
            };
            match ord {
                std::cmp::Ordering::Greater => {
                    *best = Best { groups: vec![k], score: exact, approx: s, err: e, seen: best.seen };
                }
                std::cmp::Ordering::Equal => best.groups.push(k),
                std::cmp::Ordering::Less => {}
            }
        };

        let n_groups = ki.items.len();
        let mut members_cnt: Vec<usize> = vec![0; n_groups];
        let mut sumv: Vec<Vector> = vec![vec![RadicalSum::zero(); dv]; n_groups];
        let record = self.opts.trace.attention;
        let mut ties = Vec::new();
        let mut out = Vec::with_capacity(n);
        let mut bests: HashMap<u32, Best> = HashMap::new();
        let new_best = || Best { groups: vec![], score: None, approx: 0.0, err: 0.0, seen: 0 };

        match head.mask {
            Mask::Unmasked => {
                let mut order: Vec<u32> = Vec::new();
                for j in 0..n {
                    let k = kid[j] as usize;
                    if members_cnt[k] == 0 {
                        order.push(k as u32);
                    }
                    members_cnt[k] += 1;
                    add_into(&mut sumv[k], &vz[read_ids[j] as usize]);
                }
                let mut cache: HashMap<u32, Vector> = HashMap::new();
                for i in 0..n {
                    let q = qid[i];
                    let b = bests.entry(q).or_insert_with(|| {
                        let mut b = new_best();
                        for &k in &order {
                            offer(&mut b, q, k);
                        }
                        b
                    });
                    self.stats.attention_queries += 1;
                    if b.groups.len() > 1 {
                        self.stats.uncertified_ties += 1;
                    }
                    if record {
                        ties.push(TieSet { groups: b.groups.clone(), bound: n });
                    }
                    let groups = b.groups.clone();
                    let o = cache
                        .entry(q)
                        .or_insert_with(|| average(&groups, &members_cnt, &sumv, dv))
                        .clone();
                    out.push(o);
                }
            }
            Mask::Causal => {
                let mut order: Vec<u32> = Vec::new();
                for i in 0..n {
                    let k = kid[i] as usize;
                    if members_cnt[k] == 0 {
                        order.push(k as u32);
                    }
                    members_cnt[k] += 1;
                    add_into(&mut sumv[k], &vz[read_ids[i] as usize]);
                    let q = qid[i];
                    let b = bests.entry(q).or_insert_with(new_best);
                    while b.seen < order.len() {
                        let k = order[b.seen];
                        b.seen += 1;
                        offer(b, q, k);
                    }
                    self.stats.attention_queries += 1;
                    if b.groups.len() > 1 {
                        self.stats.uncertified_ties += 1;
                    }
                    if record {
                        ties.push(TieSet { groups: b.groups.clone(), bound: i + 1 });
                    }
                    out.push(average(&b.groups, &members_cnt, &sumv, dv));
                }
            }
        }
        if record {
            self.trace.heads.push(HeadRecord { at, head: hidx, mask: head.mask, key_group: kid, ties });
        }
        Ok(out)
    }
}

fn add_into(acc: &mut Vector, v: &[RadicalSum]) {
    for (a, x) in acc.iter_mut().zip(v) {
        a.add_assign_ref(x);
    }
}

fn average(groups: &[u32], cnt: &[usize], sumv: &[Vector], dv: usize) -> Vector {
    let mut acc = vec![RadicalSum::zero(); dv];
    let mut total = 0usize;
    for &g in groups {
        total += cnt[g as usize];
        add_into(&mut acc, &sumv[g as usize]);
    }
    let k = Rational::new(1, total as i128);
    acc.iter().map(|v| v.scale(&k)).collect()
}

fn operand(o: &Operand, h: &[RadicalSum]) -> Result<Rational> {
    match *o {
        Operand::Hash(c) => Ok(Rational::from_int(decode_hash(&h[c..c + 4])?)),
        Operand::Scalar(c) => h[c]
            .as_rational()
            .ok_or_else(|| Error::Domain(format!("scalar channel {c} is not rational"))),
    }
}

fn write_target(t: &Operand, v: &Rational, d: &mut Vec<(usize, RadicalSum)>) {
    match *t {
        Operand::Hash(c) => {
            for (k, x) in ln_hash(v).into_iter().enumerate() {
                d.push((c + k, x));
            }
        }
        Operand::Scalar(c) => d.push((c, RadicalSum::from(v.clone()))),
    }
}

fn pm1(b: bool) -> RadicalSum {
    RadicalSum::from_int(if b { 1 } else { -1 })
}

pub fn gadget_delta(op: &GadgetOp, h: &[RadicalSum]) -> Result<Vec<(usize, RadicalSum)>> {
    let dec = |c: usize| decode_hash(&h[c..c + 4]);
    let mut d = Vec::new();
    let hash_out = |c: usize, z: i128, d: &mut Vec<(usize, RadicalSum)>| {
        write_target(&Operand::Hash(c), &Rational::from_int(z), d)
    };
    match op {
        GadgetOp::LnHash { input, output } => {
            let z = RadicalSum::floor_div(&h[*input], &RadicalSum::one()).unwrap_or(0).max(0);
            hash_out(*output, z, &mut d);
        }
        GadgetOp::Quotient { a, b, output } | GadgetOp::Remainder { a, b, output } => {
            let (x, y) = (dec(*a)?, dec(*b)?);
            if y == 0 {
                return Err(Error::Domain(format!("{} by zero", op.kind_name())));
            }
            let z = if matches!(op, GadgetOp::Quotient { .. }) { x / y } else { x % y };
            hash_out(*output, z, &mut d);
        }
        GadgetOp::HashEqual { a, b, output } => d.push((*output, pm1(dec(*a)? == dec(*b)?))),
        GadgetOp::HashLessEq { a, b, output } => d.push((*output, pm1(dec(*a)? <= dec(*b)?))),
        GadgetOp::AffineInt { terms, constant, floor, output } => {
            let mut v = constant.clone();
            for (c, o) in terms {
                v = &v + &(c * &operand(o, h)?);
            }
            if let Some(f) = floor {
                if v < *f {
                    v = f.clone();
                }
            }
            write_target(output, &v, &mut d);
        }
        GadgetOp::Polynomial { input, terms, output } => {
            let x = operand(input, h)?;
            let mut v = Rational::ZERO;
            for (c, e) in terms {
                v = &v + &(c * &x.pow(*e));
            }
            write_target(output, &v, &mut d);
        }
        GadgetOp::Bit { value, index, output } => {
            let (a, j) = (dec(*value)?, dec(*index)?);
            let set = j >= 1 && j <= 127 && (a >> (j - 1)) & 1 == 1;
            d.push((*output, pm1(set)));
        }
    }
    Ok(d)
}

fn gadgets(ops: &[GadgetOp], state: &mut [Vector]) -> Result<()> {
    let mut cache: HashMap<Vector, Vec<(usize, RadicalSum)>> = HashMap::new();
    for h in state.iter_mut() {
        // Gadgets are position-local; identical inputs give identical deltas.
        let key: Vector = ops
            .iter()
            .flat_map(|op| op.inputs())
            .flat_map(|r| r.map(|c| h[c].clone()))
            .collect();
        let delta = match cache.get(&key) {
            Some(d) => d.clone(),
            None => {
                let mut all = Vec::new();
                for op in ops {
                    all.extend(gadget_delta(op, h)?);
                }
                cache.insert(key, all.clone());
                all
            }
        };
        for (c, v) in delta {
            h[c].add_assign_ref(&v);
        }
    }
    Ok(())
}

/// Rational value of a channel that must be an integer.
pub fn as_int(v: &RadicalSum) -> Option<i128> {
    v.as_rational().filter(|q| q.is_integer()).and_then(|q| q.numer().to_i128())
}
