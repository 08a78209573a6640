//! Boolean threshold circuits in the serialized gate-list format.
//!
//! ```text
//! circuit := gate+ ('OUT' '1'+)?
//! gate    := 'X' | op arg*          op := AND | OR | NOT | MAJ
//! arg     := '&' '1'+               (&1ʲ points at gate j, 1-based)
//! ```
//!
//! The k-th `X` gate reads input bit k. Without an `OUT` marker the output
//! is the last gate that no other gate points at (normally the final gate;
//! this also covers serializations that list the output before its
//! arguments). `OUT 1ᵐ` makes the final m gates the outputs.

pub mod evaluator;

use std::fmt;

use num_bigint::BigInt;
use num_traits::Pow;

use crate::error::{Error, Result};
use crate::rational::Rational;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    X,
    And,
    Or,
    Not,
    Maj,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::X => "X",
            GateKind::And => "AND",
            GateKind::Or => "OR",
            GateKind::Not => "NOT",
            GateKind::Maj => "MAJ",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Gate {
    pub kind: GateKind,
    /// 1-based gate indices.
    pub args: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Circuit {
    pub gates: Vec<Gate>,
    /// Number of trailing gates that are outputs.
    pub outputs: usize,
}

fn gate(kind: GateKind, args: Vec<usize>) -> Gate {
    Gate { kind, args }
}

impl Circuit {
    /// Validates pointers, arities and acyclicity.
    pub fn new(gates: Vec<Gate>, outputs: usize) -> Result<Circuit> {
        let c = Circuit { gates, outputs };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let m = self.gates.len();
        if m == 0 {
            return Err(Error::Parse("empty circuit".into()));
        }
        if self.outputs == 0 || self.outputs > m {
            return Err(Error::Invalid(format!("{} outputs for {m} gates", self.outputs)));
        }
        for (i, g) in self.gates.iter().enumerate() {
            match g.kind {
                GateKind::X if !g.args.is_empty() => {
                    return Err(Error::Invalid(format!("gate {}: X takes no arguments", i + 1)))
                }
                GateKind::Maj if g.args.is_empty() => {
                    return Err(Error::Invalid(format!("gate {}: MAJ needs at least one argument", i + 1)))
                }
                GateKind::Not if g.args.len() != 1 => {
                    return Err(Error::Invalid(format!("gate {}: NOT takes exactly one argument", i + 1)))
                }
                _ => {}
            }
            if let Some(a) = g.args.iter().find(|&&a| a == 0 || a > m) {
                return Err(Error::Invalid(format!("gate {}: dangling pointer to gate {a}", i + 1)));
            }
        }
        self.order().map(|_| ())
    }

    /// Topological order (0-based), or a cycle error.
    fn order(&self) -> Result<Vec<usize>> {
        let m = self.gates.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; m];
        let mut out = Vec::with_capacity(m);
        for root in 0..m {
            if state[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some((g, k)) = stack.pop() {
                if let Some(&a) = self.gates[g].args.get(k) {
                    stack.push((g, k + 1));
                    match state[a - 1] {
                        0 => {
                            state[a - 1] = 1;
                            stack.push((a - 1, 0));
                        }
                        1 => return Err(Error::Invalid(format!("cycle through gate {a}"))),
                        _ => {}
                    }
                } else {
                    state[g] = 2;
                    out.push(g);
                }
            }
        }
        Ok(out)
    }

    pub fn size(&self) -> usize {
        self.gates.len()
    }

    pub fn arity(&self) -> usize {
        self.gates.iter().filter(|g| g.kind == GateKind::X).count()
    }

    /// 1-based indices of the output gates.
    pub fn output_gates(&self) -> Vec<usize> {
        if self.outputs == 1 {
            return vec![self.output_gate()];
        }
        (self.gates.len() - self.outputs + 1..=self.gates.len()).collect()
    }

    /// Last gate not referenced by any other gate (1-based).
    pub fn output_gate(&self) -> usize {
        let mut referenced = vec![false; self.gates.len()];
        for g in &self.gates {
            for &a in &g.args {
                referenced[a - 1] = true;
            }
        }
        // An acyclic circuit always has an unreferenced gate.
        referenced.iter().rposition(|r| !r).expect("acyclic") + 1
    }

    /// Per-gate depth: X (and argument-free gates) at 0.
    pub fn gate_depths(&self) -> Vec<usize> {
        let mut d = vec![0; self.gates.len()];
        for g in self.order().expect("validated") {
            d[g] = self.gates[g].args.iter().map(|&a| d[a - 1] + 1).max().unwrap_or(0);
        }
        d
    }

    pub fn depth(&self) -> usize {
        self.gate_depths().into_iter().max().unwrap_or(0)
    }

    pub fn gate_values(&self, x: &[bool]) -> Result<Vec<bool>> {
        if x.len() != self.arity() {
            return Err(Error::Domain(format!("circuit takes {} inputs, got {}", self.arity(), x.len())));
        }
        let mut rank = vec![0; self.gates.len()];
        let mut r = 0;
        for (i, g) in self.gates.iter().enumerate() {
            if g.kind == GateKind::X {
                rank[i] = r;
                r += 1;
            }
        }
        let mut v = vec![false; self.gates.len()];
        for g in self.order().expect("validated") {
            let args: Vec<bool> = self.gates[g].args.iter().map(|&a| v[a - 1]).collect();
            let ones = args.iter().filter(|&&b| b).count();
            v[g] = match self.gates[g].kind {
                GateKind::X => x[rank[g]],
                GateKind::And => ones == args.len(),
                GateKind::Or => ones > 0,
                GateKind::Not => !args[0],
                // A tie at exactly half counts as 1.
                GateKind::Maj => 2 * ones >= args.len(),
            };
        }
        Ok(v)
    }

    pub fn eval_outputs(&self, x: &[bool]) -> Result<Vec<bool>> {
        let v = self.gate_values(x)?;
        Ok(self.output_gates().iter().map(|&g| v[g - 1]).collect())
    }

    /// Value of the (first) output gate.
    pub fn eval(&self, x: &[bool]) -> Result<bool> {
        Ok(self.gate_values(x)?[self.output_gates()[0] - 1])
    }

    /// Serialized token stream (the same text `Display` prints, split on spaces).
    pub fn tokens(&self) -> Vec<String> {
        self.to_string().split(' ').map(str::to_string).collect()
    }
}

pub fn eval_circuit(c: &Circuit, x: &[bool]) -> Result<bool> {
    c.eval(x)
}

pub fn bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Parse(format!("not a bit: {c:?}"))),
        })
        .collect()
}

/// All bit vectors of length n, in counting order.
pub fn all_inputs(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u64..1 << n).map(move |m| (0..n).map(|i| (m >> (n - 1 - i)) & 1 == 1).collect())
}

impl fmt::Display for Circuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for g in &self.gates {
            parts.push(g.kind.name().to_string());
            for a in &g.args {
                parts.push(format!("&{}", "1".repeat(*a)));
            }
        }
        if self.outputs != 1 {
            parts.push(format!("OUT {}", "1".repeat(self.outputs)));
        }
        write!(f, "{}", parts.join(" "))
    }
}

pub fn parse_circuit(text: &str) -> Result<Circuit> {
    #[derive(PartialEq)]
    enum T {
        Op(GateKind),
        Amp,
        One,
        Out,
    }
    let mut toks = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let at = text.len() - rest.len();
        let kw = [("AND", T::Op(GateKind::And)), ("OR", T::Op(GateKind::Or)), ("NOT", T::Op(GateKind::Not)),
            ("MAJ", T::Op(GateKind::Maj)), ("OUT", T::Out), ("X", T::Op(GateKind::X)), ("&", T::Amp), ("1", T::One)];
        match kw.into_iter().find(|(k, _)| rest.starts_with(k)) {
            Some((k, t)) => {
                toks.push((t, at));
                rest = &rest[k.len()..];
            }
            None => return Err(Error::Parse(format!("offset {at}: unexpected {c:?}"))),
        }
    }
    let mut gates: Vec<Gate> = Vec::new();
    let mut outputs = 1;
    let mut i = 0;
    let ones = |i: &mut usize| {
        let s = *i;
        while *i < toks.len() && toks[*i].0 == T::One {
            *i += 1;
        }
        *i - s
    };
    while i < toks.len() {
        let at = toks[i].1;
        match toks[i].0 {
            T::Op(k) => {
                gates.push(gate(k, vec![]));
                i += 1;
            }
            T::Amp => {
                i += 1;
                let j = ones(&mut i);
                match gates.last_mut() {
                    _ if j == 0 => return Err(Error::Parse(format!("offset {at}: '&' without 1s"))),
                    None => return Err(Error::Parse(format!("offset {at}: argument before any gate"))),
                    Some(g) => g.args.push(j),
                }
            }
            T::One => return Err(Error::Parse(format!("offset {at}: stray '1'"))),
            T::Out => {
                i += 1;
                outputs = ones(&mut i);
                if outputs == 0 || i != toks.len() {
                    return Err(Error::Parse(format!("offset {at}: OUT must end the circuit with 1+")));
                }
            }
        }
    }
    Circuit::new(gates, outputs)
}

/// depth ≤ c·(log₂ n)^d and size ≥ n^c.
pub fn is_wide_witness(circuit: &Circuit, n: usize, c: &Rational, d: u32) -> bool {
    if n < 2 || c.signum() <= 0 {
        return false;
    }
    let depth = Rational::from_int(circuit.depth() as i128);
    let depth_ok = if n.is_power_of_two() {
        let l = Rational::from_int(n.trailing_zeros() as i128);
        depth <= c * &l.pow(d)
    } else {
        // log₂ n is transcendental here, so the comparison is never an exact tie.
        depth.to_f64() <= c.to_f64() * (n as f64).log2().powi(d as i32)
    };
    // size ≥ n^(p/q) ⇔ size^q ≥ n^p
    let (p, q) = (c.numer(), c.denom());
    let (Ok(p), Ok(q)) = (u32::try_from(p), u32::try_from(q)) else { return false };
    let size_ok = Pow::pow(BigInt::from(circuit.size()), q) >= Pow::pow(BigInt::from(n), p);
    depth_ok && size_ok
}

/// Gates of `c` appended after `base` gates, with its X gates rewired to `inputs`.
fn splice(out: &mut Vec<Gate>, c: &Circuit, inputs: &[usize]) {
    let base = out.len();
    let mut k = 0;
    for g in &c.gates {
        if g.kind == GateKind::X {
            out.push(gate(GateKind::And, vec![inputs[k]]));
            k += 1;
        } else {
            out.push(gate(g.kind, g.args.iter().map(|a| a + base).collect()));
        }
    }
}

fn output_positions(c: &Circuit, base: usize) -> Vec<usize> {
    c.output_gates().into_iter().map(|g| g + base).collect()
}

/// x ↦ g(f(x)).
pub fn compose_serial(f: &Circuit, g: &Circuit) -> Result<Circuit> {
    if g.arity() != f.outputs {
        return Err(Error::Invalid(format!("serial: {} outputs feed {} inputs", f.outputs, g.arity())));
    }
    let mut gates = f.gates.clone();
    let outs = output_positions(f, 0);
    splice(&mut gates, g, &outs);
    Circuit::new(gates, g.outputs)
}

/// x ↦ (f(x), g(x)); outputs are identity copies at the end.
pub fn compose_parallel(f: &Circuit, g: &Circuit) -> Result<Circuit> {
    if f.arity() != g.arity() {
        return Err(Error::Invalid(format!("parallel: input arities {} and {} differ", f.arity(), g.arity())));
    }
    let mut gates = f.gates.clone();
    let xs: Vec<usize> =
        f.gates.iter().enumerate().filter(|(_, g)| g.kind == GateKind::X).map(|(i, _)| i + 1).collect();
    let base = gates.len();
    splice(&mut gates, g, &xs);
    let mut outs = output_positions(f, 0);
    outs.extend(output_positions(g, base));
    for o in &outs {
        gates.push(gate(GateKind::And, vec![*o]));
    }
    Circuit::new(gates, outs.len())
}

/// f applied r times.
pub fn compose_recurrent(f: &Circuit, r: usize) -> Result<Circuit> {
    if r == 0 {
        return Err(Error::Invalid("recurrent: r must be positive".into()));
    }
    if f.arity() != f.outputs {
        return Err(Error::Invalid(format!("recurrent: {} inputs but {} outputs", f.arity(), f.outputs)));
    }
    let mut c = f.clone();
    for _ in 1..r {
        c = compose_serial(&c, f)?;
    }
    Ok(c)
}
