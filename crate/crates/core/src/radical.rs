//! Sums of rational multiples of square roots of squarefree integers.
//!
//! A `RadicalSum` is kept canonical: radicands are squarefree, strictly
//! increasing, and every coefficient is nonzero. Because square roots of
//! distinct squarefree integers are linearly independent over Q, two values
//! are equal iff their term lists are identical.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::{BigInt, Sign as BigSign};
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::rational::Rational;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn to_ordering(self) -> Ordering {
        match self {
            Sign::Negative => Ordering::Less,
            Sign::Zero => Ordering::Equal,
            Sign::Positive => Ordering::Greater,
        }
    }
}

type Terms = SmallVec<[(u128, Rational); 1]>;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct RadicalSum {
    terms: Terms,
}

thread_local! {
    static SQUAREFREE: RefCell<HashMap<u128, (u128, u128)>> = RefCell::new(HashMap::new());
}

/// Split `v = s² · r` with `r` squarefree. Trial division, memoized.
pub fn squarefree_split(v: u128) -> (u128, u128) {
    assert!(v > 0);
    if v < 4 {
        return (1, v);
    }
    if let Some(hit) = SQUAREFREE.with(|m| m.borrow().get(&v).copied()) {
        return hit;
    }
    let (mut s, mut r, mut rest) = (1u128, 1u128, v);
    let mut p = 2u128;
    while p * p <= rest {
        let mut e = 0;
        while rest % p == 0 {
            rest /= p;
            e += 1;
        }
        for _ in 0..e / 2 {
            s *= p;
        }
        if e % 2 == 1 {
            r *= p;
        }
        p += if p == 2 { 1 } else { 2 };
    }
    r *= rest;
    SQUAREFREE.with(|m| {
        let mut m = m.borrow_mut();
        if m.len() > 1 << 16 {
            m.clear();
        }
        m.insert(v, (s, r));
    });
    (s, r)
}

fn gcd_u128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn to_u128(v: &BigInt) -> Result<u128> {
    v.to_u128()
        .ok_or_else(|| Error::Domain(format!("radicand {v} exceeds the supported range")))
}

impl RadicalSum {
    pub fn zero() -> Self {
        RadicalSum::default()
    }

    pub fn one() -> Self {
        RadicalSum::from(Rational::ONE)
    }

    pub fn from_int(v: i128) -> Self {
        RadicalSum::from(Rational::from_int(v))
    }

    /// Build from arbitrary `(radicand, coefficient)` pairs.
    pub fn canonicalize<I>(raw: I) -> Result<Self>
    where
        I: IntoIterator<Item = (i128, Rational)>,
    {
        let mut terms: Terms = SmallVec::new();
        for (r, c) in raw {
            if r <= 0 {
                return Err(Error::Domain(format!("radicand {r} is not positive")));
            }
            let (s, rr) = squarefree_split(r as u128);
            terms.push((rr, &c * &Rational::from_int(s as i128)));
        }
        Ok(Self::from_unsorted(terms))
    }

    fn from_unsorted(mut terms: Terms) -> Self {
        terms.sort_by_key(|t| t.0);
        let mut out: Terms = SmallVec::with_capacity(terms.len());
        for (r, c) in terms {
            match out.last_mut() {
                Some(last) if last.0 == r => last.1 = &last.1 + &c,
                _ => out.push((r, c)),
            }
        }
        out.retain(|t| !t.1.is_zero());
        RadicalSum { terms: out }
    }

    pub fn terms(&self) -> &[(u128, Rational)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_rational(&self) -> Option<Rational> {
        match self.terms.as_slice() {
            [] => Some(Rational::ZERO),
            [(1, c)] => Some(c.clone()),
            _ => None,
        }
    }

    pub fn is_rational(&self) -> bool {
        self.as_rational().is_some()
    }

    /// Exact square root of a nonnegative rational.
    pub fn sqrt_rational(q: &Rational) -> Result<Self> {
        match q.signum() {
            -1 => return Err(Error::Domain(format!("square root of negative value {q}"))),
            0 => return Ok(RadicalSum::zero()),
            _ => {}
        }
        let (s1, r1) = squarefree_split(to_u128(&q.numer())?);
        let (s2, r2) = squarefree_split(to_u128(&q.denom())?);
        // √(s1²r1 / s2²r2) = s1·√(r1 r2) / (s2 r2), and r1 r2 = g²·(r1/g)(r2/g).
        let g = gcd_u128(r1, r2);
        let rad = (r1 / g)
            .checked_mul(r2 / g)
            .ok_or_else(|| Error::Domain("radicand overflow".into()))?;
        let num = BigInt::from(s1) * BigInt::from(g);
        let den = BigInt::from(s2) * BigInt::from(r2);
        let coef = Rational::from_big(BigRational::new(num, den));
        Ok(RadicalSum { terms: SmallVec::from_elem((rad, coef), 1) })
    }

    /// Square root of a value that must itself be rational.
    pub fn sqrt(&self) -> Result<Self> {
        match self.as_rational() {
            Some(q) => Self::sqrt_rational(&q),
            None => Err(Error::NestedRadical),
        }
    }

    pub fn scale(&self, k: &Rational) -> Self {
        if k.is_zero() {
            return RadicalSum::zero();
        }
        if k.is_one() {
            return self.clone();
        }
        RadicalSum { terms: self.terms.iter().map(|(r, c)| (*r, c * k)).collect() }
    }

    pub fn add_ref(&self, rhs: &Self) -> Self {
        if rhs.terms.is_empty() {
            return self.clone();
        }
        if self.terms.is_empty() {
            return rhs.clone();
        }
        let (a, b) = (&self.terms, &rhs.terms);
        let mut out: Terms = SmallVec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                Ordering::Less => {
                    out.push(a[i].clone());
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b[j].clone());
                    j += 1;
                }
                Ordering::Equal => {
                    let c = &a[i].1 + &b[j].1;
                    if !c.is_zero() {
                        out.push((a[i].0, c));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend(a[i..].iter().cloned());
        out.extend(b[j..].iter().cloned());
        RadicalSum { terms: out }
    }

    pub fn add_assign_ref(&mut self, rhs: &Self) {
        if rhs.terms.is_empty() {
            return;
        }
        *self = self.add_ref(rhs);
    }

    pub fn mul_ref(&self, rhs: &Self) -> Self {
        if self.terms.is_empty() || rhs.terms.is_empty() {
            return RadicalSum::zero();
        }
        if let [(1, c)] = self.terms.as_slice() {
            return rhs.scale(c);
        }
        if let [(1, c)] = rhs.terms.as_slice() {
            return self.scale(c);
        }
        let mut out: Terms = SmallVec::new();
        for (r1, c1) in &self.terms {
            for (r2, c2) in &rhs.terms {
                // r1, r2 squarefree: √r1·√r2 = g·√((r1/g)(r2/g)), which is squarefree.
                let g = gcd_u128(*r1, *r2);
                let rad = (r1 / g) * (r2 / g);
                out.push((rad, &(c1 * c2) * &Rational::from_int(g as i128)));
            }
        }
        Self::from_unsorted(out)
    }

    /// Fast floating estimate together with a bound on its absolute error.
    fn estimate(&self) -> (f64, f64) {
        let mut v = 0.0;
        let mut mag = 0.0;
        for (r, c) in &self.terms {
            let t = c.to_f64() * (*r as f64).sqrt();
            v += t;
            mag += t.abs();
        }
        (v, mag * 1e-12 + f64::MIN_POSITIVE)
    }

    pub fn to_f64(&self) -> f64 {
        self.estimate().0
    }

    pub fn sign(&self) -> Sign {
        match self.terms.as_slice() {
            [] => return Sign::Zero,
            [(_, c)] => return if c.signum() > 0 { Sign::Positive } else { Sign::Negative },
            _ => {}
        }
        let (v, err) = self.estimate();
        if v.is_finite() && v.abs() > err {
            return if v > 0.0 { Sign::Positive } else { Sign::Negative };
        }
        self.sign_by_refinement()
    }

    /// Dyadic interval refinement, starting at 64 fractional bits and doubling.
    fn sign_by_refinement(&self) -> Sign {
        let mut bits = 64u32;
        loop {
            let (lo, hi) = self.enclose(bits);
            if lo.is_positive() {
                return Sign::Positive;
            }
            if hi.is_negative() {
                return Sign::Negative;
            }
            // A nonzero canonical value is bounded away from zero, so this ends.
            assert!(bits < (1 << 14), "sign refinement exceeded 2^14 bits");
            bits *= 2;
        }
    }

    /// Interval `[lo, hi]` (scaled by 2^bits) enclosing the value.
    fn enclose(&self, bits: u32) -> (BigRational, BigRational) {
        let one = BigInt::from(1);
        let scale = BigInt::from(1) << bits;
        let mut lo = BigRational::zero();
        let mut hi = BigRational::zero();
        for (r, c) in &self.terms {
            let c = c.to_big();
            let (l, h) = if *r == 1 {
                let v = &c * BigRational::from_integer(scale.clone());
                (v.clone(), v)
            } else {
                let s = (BigInt::from(*r) << (2 * bits)).sqrt();
                let a = &c * BigRational::from_integer(s.clone());
                let b = &c * BigRational::from_integer(&s + &one);
                if c.numer().sign() == BigSign::Minus { (b, a) } else { (a, b) }
            };
            lo += l;
            hi += h;
        }
        (lo, hi)
    }

    pub fn compare(&self, other: &Self) -> Ordering {
        if self == other {
            return Ordering::Equal;
        }
        self.sub_ref(other).sign().to_ordering()
    }

    pub fn sub_ref(&self, rhs: &Self) -> Self {
        self.add_ref(&rhs.neg_ref())
    }

    pub fn neg_ref(&self) -> Self {
        RadicalSum { terms: self.terms.iter().map(|(r, c)| (*r, -c)).collect() }
    }

    /// Largest integer `z` with `z·den ≤ num`, for `den > 0`.
    pub fn floor_div(num: &Self, den: &Self) -> Option<i128> {
        if den.sign() != Sign::Positive {
            return None;
        }
        if let (Some(a), Some(b)) = (num.as_rational(), den.as_rational()) {
            return (&a / &b).floor().to_i128();
        }
        if let ([(r1, a)], [(r2, b)]) = (num.terms(), den.terms()) {
            if r1 == r2 {
                return (a / b).floor().to_i128();
            }
        }
        let est = (num.to_f64() / den.to_f64()).floor();
        if !est.is_finite() || est.abs() > 1e30 {
            return None;
        }
        let mut z = est as i128;
        let at = |z: i128| num.sub_ref(&den.scale(&Rational::from_int(z))).sign();
        while at(z) == Sign::Negative {
            z -= 1;
        }
        while at(z + 1) != Sign::Negative {
            z += 1;
        }
        Some(z)
    }
}

impl From<Rational> for RadicalSum {
    fn from(q: Rational) -> Self {
        if q.is_zero() {
            RadicalSum::zero()
        } else {
            RadicalSum { terms: SmallVec::from_elem((1, q), 1) }
        }
    }
}

impl PartialOrd for RadicalSum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.compare(other))
    }
}

impl Ord for RadicalSum {
    fn cmp(&self, other: &Self) -> Ordering {
        self.compare(other)
    }
}

impl Add for RadicalSum {
    type Output = RadicalSum;
    fn add(self, rhs: RadicalSum) -> RadicalSum {
        self.add_ref(&rhs)
    }
}

impl Sub for RadicalSum {
    type Output = RadicalSum;
    fn sub(self, rhs: RadicalSum) -> RadicalSum {
        self.sub_ref(&rhs)
    }
}

impl Mul for RadicalSum {
    type Output = RadicalSum;
    fn mul(self, rhs: RadicalSum) -> RadicalSum {
        self.mul_ref(&rhs)
    }
}

impl Neg for RadicalSum {
    type Output = RadicalSum;
    fn neg(self) -> RadicalSum {
        self.neg_ref()
    }
}

impl fmt::Display for RadicalSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (r, c)) in self.terms.iter().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if c.signum() < 0 {
                    write!(f, "-")?;
                }
            } else {
                write!(f, "{}", if c.signum() < 0 { " - " } else { " + " })?;
            }
            if *r == 1 {
                write!(f, "{mag}")?;
            } else if mag.is_one() {
                write!(f, "sqrt({r})")?;
            } else {
                write!(f, "{mag}*sqrt({r})")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for RadicalSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Parse the textual rendering produced by `Display`.
impl std::str::FromStr for RadicalSum {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("invalid radical sum {s:?}"));
        let s = s.trim();
        if s == "0" {
            return Ok(RadicalSum::zero());
        }
        let mut raw = Vec::new();
        let mut rest = s;
        let mut negative = false;
        if let Some(r) = rest.strip_prefix('-') {
            negative = true;
            rest = r;
        }
        loop {
            let cut = [" + ", " - "].iter().filter_map(|p| rest.find(p)).min();
            let (term, next) = match cut {
                Some(i) => (&rest[..i], Some((&rest[i + 3..], &rest[i + 1..i + 2] == "-"))),
                None => (rest, None),
            };
            let (coef, rad) = match term.find("sqrt(") {
                Some(i) => {
                    let inner = term[i + 5..].strip_suffix(')').ok_or_else(bad)?;
                    let rad: i128 = inner.parse().map_err(|_| bad())?;
                    let coef = match term[..i].strip_suffix('*') {
                        Some(c) => c.parse::<Rational>().map_err(|_| bad())?,
                        None if i == 0 => Rational::ONE,
                        None => return Err(bad()),
                    };
                    (coef, rad)
                }
                None => (term.parse::<Rational>().map_err(|_| bad())?, 1),
            };
            raw.push((rad, if negative { -coef } else { coef }));
            match next {
                Some((r, neg)) => {
                    rest = r;
                    negative = neg;
                }
                None => break,
            }
        }
        RadicalSum::canonicalize(raw)
    }
}

impl serde::Serialize for RadicalSum {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for RadicalSum {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The layer-norm hash φ(z) = ⟨z, 1, −z, −1⟩ / √(2z² + 2).
pub fn ln_hash(z: &Rational) -> [RadicalSum; 4] {
    let norm2 = &(&(z * z) * &Rational::from_int(2)) + &Rational::from_int(2);
    let inv = RadicalSum::sqrt_rational(&norm2.recip()).expect("positive");
    let a = inv.scale(z);
    let b = inv;
    [a.clone(), b.clone(), a.neg_ref(), b.neg_ref()]
}

pub fn dot(a: &[RadicalSum], b: &[RadicalSum]) -> RadicalSum {
    let mut acc = RadicalSum::zero();
    for (x, y) in a.iter().zip(b) {
        if !x.is_zero() && !y.is_zero() {
            acc.add_assign_ref(&x.mul_ref(y));
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::q;

    fn rs(raw: &[(i128, Rational)]) -> RadicalSum {
        RadicalSum::canonicalize(raw.iter().cloned()).unwrap()
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(rs(&[(8, q(1, 1))]).terms(), &[(2, q(2, 1))]);
        assert_eq!(rs(&[(1, q(3, 2))]).as_rational(), Some(q(3, 2)));
        assert!(rs(&[(18, q(1, 1)), (2, q(-3, 1))]).is_zero());
        assert!(RadicalSum::canonicalize([(0, q(1, 1))]).is_err());
        assert!(RadicalSum::canonicalize([(-2, q(1, 1))]).is_err());
    }

    #[test]
    fn add_and_mul_examples() {
        let s2 = rs(&[(2, q(1, 1))]);
        let s3 = rs(&[(3, q(1, 1))]);
        assert!(s2.add_ref(&s2.neg_ref()).is_zero());
        assert_eq!(s2.mul_ref(&s2).as_rational(), Some(q(2, 1)));
        assert_eq!(s2.mul_ref(&s3), rs(&[(6, q(1, 1))]));
        let a = rs(&[(1, q(1, 1)), (2, q(1, 1))]);
        let b = rs(&[(1, q(1, 1)), (2, q(-1, 1))]);
        assert_eq!(a.mul_ref(&b).as_rational(), Some(q(-1, 1)));
        // 7/√50 = 7√50/50 = 7√2/10; doubling gives 7√2/5.
        let inv = RadicalSum::sqrt_rational(&q(1, 50)).unwrap().scale(&q(7, 1));
        assert_eq!(inv.terms(), &[(2, q(7, 10))]);
        assert_eq!(inv.add_ref(&inv).terms(), &[(2, q(7, 5))]);
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(RadicalSum::sqrt_rational(&q(4, 1)).unwrap().as_rational(), Some(q(2, 1)));
        assert_eq!(RadicalSum::sqrt_rational(&q(1, 2)).unwrap().terms(), &[(2, q(1, 2))]);
        assert_eq!(RadicalSum::sqrt_rational(&q(50, 1)).unwrap().terms(), &[(2, q(5, 1))]);
        assert!(RadicalSum::sqrt_rational(&q(-1, 1)).is_err());
        let s2 = rs(&[(2, q(1, 1))]);
        assert!(matches!(s2.sqrt(), Err(Error::NestedRadical)));
    }

    #[test]
    fn sign_examples() {
        let v = rs(&[(2, q(1, 1)), (3, q(1, 1)), (10, q(-1, 1))]);
        assert_eq!(v.sign(), Sign::Negative);
        assert_eq!(v.sign_by_refinement(), Sign::Negative);
        assert_eq!(RadicalSum::zero().sign(), Sign::Zero);
        let phi = |z: i128| ln_hash(&Rational::from_int(z));
        let d = dot(&phi(2), &phi(3)).sub_ref(&RadicalSum::one());
        assert_eq!(d.sign(), Sign::Negative);
    }

    #[test]
    fn display_round_trips() {
        let v = rs(&[(1, q(-3, 2)), (2, q(7, 5)), (3, q(-1, 1))]);
        let s = v.to_string();
        assert_eq!(s, "-3/2 + 7/5*sqrt(2) - sqrt(3)");
        assert_eq!(s.parse::<RadicalSum>().unwrap(), v);
    }

    #[test]
    fn floor_div_handles_radicals() {
        let h = ln_hash(&Rational::from_int(7));
        assert_eq!(RadicalSum::floor_div(&h[0], &h[1]), Some(7));
        let mixed = h[0].add_ref(&ln_hash(&Rational::from_int(2))[0]);
        let den = h[1].add_ref(&ln_hash(&Rational::from_int(2))[1]);
        let est = (mixed.to_f64() / den.to_f64()).floor() as i128;
        assert_eq!(RadicalSum::floor_div(&mixed, &den), Some(est));
    }
}
