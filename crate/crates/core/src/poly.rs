//! Univariate polynomials with natural coefficients, used for padding laws.

use crate::error::{Error, Result};
use crate::ir::{PadTerm, Padding};
use crate::rational::Rational;

/// Coefficient of nᵈ at index d.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Poly(pub Vec<u64>);

fn overflow() -> Error {
    Error::Invalid("padding polynomial overflows u64".into())
}

impl Poly {
    pub fn constant(c: u64) -> Self {
        Poly(vec![c]).trim()
    }

    pub fn monomial(c: u64, d: u32) -> Self {
        let mut v = vec![0; d as usize + 1];
        v[d as usize] = c;
        Poly(v).trim()
    }

    pub fn from_padding(p: &Padding) -> Result<Self> {
        let mut out = Poly::default();
        for t in &p.terms {
            out = out.add(&Poly::monomial(t.coefficient, t.degree))?;
        }
        Ok(out)
    }

    pub fn to_padding(&self) -> Padding {
        Padding {
            terms: self
                .0
                .iter()
                .enumerate()
                .filter(|(_, c)| **c > 0)
                .map(|(d, c)| PadTerm { coefficient: *c, degree: d as u32 })
                .collect(),
        }
    }

    /// (coefficient, degree) pairs for a polynomial gadget.
    pub fn gadget_terms(&self) -> Vec<(Rational, u32)> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(d, c)| (Rational::from_int(*c as i128), d as u32))
            .collect()
    }

    fn trim(mut self) -> Self {
        while self.0.last() == Some(&0) {
            self.0.pop();
        }
        self
    }

    pub fn eval(&self, n: u64) -> Result<u64> {
        self.0.iter().rev().try_fold(0u64, |acc, c| acc.checked_mul(n).and_then(|v| v.checked_add(*c)).ok_or_else(overflow))
    }

    pub fn add(&self, o: &Poly) -> Result<Poly> {
        let mut v = vec![0u64; self.0.len().max(o.0.len())];
        for (i, c) in self.0.iter().enumerate() {
            v[i] = *c;
        }
        for (i, c) in o.0.iter().enumerate() {
            v[i] = v[i].checked_add(*c).ok_or_else(overflow)?;
        }
        Ok(Poly(v).trim())
    }

    /// Coefficientwise difference; fails if any coefficient would go negative.
    pub fn sub(&self, o: &Poly) -> Result<Poly> {
        let mut v = self.0.clone();
        v.resize(v.len().max(o.0.len()), 0);
        for (i, c) in o.0.iter().enumerate() {
            v[i] = v[i].checked_sub(*c).ok_or_else(|| Error::Invalid("negative padding coefficient".into()))?;
        }
        Ok(Poly(v).trim())
    }

    pub fn mul(&self, o: &Poly) -> Result<Poly> {
        if self.0.is_empty() || o.0.is_empty() {
            return Ok(Poly::default());
        }
        let mut v = vec![0u64; self.0.len() + o.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in o.0.iter().enumerate() {
                let t = a.checked_mul(*b).ok_or_else(overflow)?;
                v[i + j] = v[i + j].checked_add(t).ok_or_else(overflow)?;
            }
        }
        Ok(Poly(v).trim())
    }

    /// p(q(n)).
    pub fn compose(&self, q: &Poly) -> Result<Poly> {
        let mut out = Poly::default();
        for c in self.0.iter().rev() {
            out = out.mul(q)?.add(&Poly::constant(*c))?;
        }
        Ok(out)
    }
}

impl std::fmt::Display for Poly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let terms: Vec<String> = self
            .0
            .iter()
            .enumerate()
            .rev()
            .filter(|(_, c)| **c > 0)
            .map(|(d, c)| match d {
                0 => c.to_string(),
                1 => format!("{c}n"),
                _ => format!("{c}n^{d}"),
            })
            .collect();
        if terms.is_empty() {
            write!(f, "0")
        } else {
            write!(f, "{}", terms.join(" + "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_matches_evaluation() {
        let p = Poly(vec![1, 0, 3]);
        let q = Poly(vec![2, 1]);
        for n in 0..6 {
            let (pn, qn) = (p.eval(n).unwrap(), q.eval(n).unwrap());
            assert_eq!(p.add(&q).unwrap().eval(n).unwrap(), pn + qn);
            assert_eq!(p.mul(&q).unwrap().eval(n).unwrap(), pn * qn);
            assert_eq!(p.compose(&q).unwrap().eval(n).unwrap(), p.eval(qn).unwrap());
        }
        assert!(q.sub(&p).is_err());
        assert_eq!(Poly::from_padding(&p.to_padding()).unwrap(), p);
        assert_eq!(p.to_string(), "3n^2 + 1");
        assert_eq!(Poly::default().to_string(), "0");
    }
}
