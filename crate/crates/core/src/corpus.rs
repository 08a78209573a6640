//! Committed sample inputs: the formula corpus and small hand-built IRs.

use crate::builder::{ch, r, sign_readout, Builder, HeadSpec, Read};
use crate::error::Result;
use crate::ir::{Looping, Mask, Padding, PositionKind, TransformerIR};
use crate::logic::{parse_formula, Formula};
use crate::rational::Rational;

const FORMULAS: &str = include_str!("../corpus/formulas.txt");

/// The formula corpus, in file order.
pub fn formulas() -> Result<Vec<Formula>> {
    FORMULAS
        .lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(parse_formula)
        .collect()
}

/// `layers` attention sublayers; layer k attends to the positions maximizing
/// channel k−1 (raw) plus the position channel, and averages token values.
/// Layers listed in `causal` (1-based) use the causal mask.
pub fn chain_ir(layers: usize, causal: &[usize]) -> TransformerIR {
    let inputs = vec!["a".to_string(), "b".to_string()];
    let mut b = Builder::new(&inputs);
    let pos = b.alloc("pos", 1);
    b.set_position(PositionKind::InverseIndex, pos);
    let mut prev = b.tok("a");
    for l in 1..=layers {
        let c = b.alloc(&format!("avg{l}"), 1);
        let mask = if causal.contains(&l) { Mask::Causal } else { Mask::Unmasked };
        let mut read = Read::new();
        let t = read.block(b.tok_rows());
        let (ia, ib) = (b.alphabet.iter().position(|x| x == "a").unwrap(), b.alphabet.len() - 2);
        let key = if l % 2 == 0 { vec![(prev, r(1)), (pos, r(1))] } else { vec![(prev, r(1))] };
        b.attention(
            read,
            vec![HeadSpec::new(mask)
                .term(r(1), vec![(ch(b.one), key)])
                .value(c, vec![(t[ia], r(1)), (t[ib], r(-1)), (t[0], Rational::new(1, 2))])],
        );
        prev = c;
    }
    b.finish(Looping { exponent: 0, coefficient: 1 }, Padding::monomial(1, 1), sign_readout(prev))
}

/// Mask patterns for `chain_ir`, depths 1–4, several mixed.
pub const CHAIN_SHAPES: [(usize, &[usize]); 10] = [
    (1, &[]),
    (2, &[]),
    (2, &[1]),
    (2, &[2]),
    (3, &[]),
    (3, &[2]),
    (3, &[1, 3]),
    (4, &[]),
    (4, &[1, 3]),
    (4, &[2, 4]),
];
