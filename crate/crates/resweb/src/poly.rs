//! Sparse multivariate polynomials in the three momentum variables `p1, p2, p3`.
//!
//! These are the coefficients of Fourier modes, so the whole calculus stays
//! closed under differentiation and linear substitutions: no finite
//! differencing is needed anywhere in the perturbation algebra.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolyError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("coefficient degree {found} exceeds the declared cap {cap}")]
    DegreeOverflow { found: u32, cap: u32 },
}

/// Polynomial in `(p1, p2, p3)` stored as exponent triple -> coefficient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Poly {
    terms: BTreeMap<[u8; 3], f64>,
}

// Serialized as an entry list: JSON map keys must be strings.
impl Serialize for Poly {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<([u8; 3], f64)> = self.terms.iter().map(|(e, c)| (*e, *c)).collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Poly {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries: Vec<([u8; 3], f64)> = Vec::deserialize(d)?;
        Ok(Poly { terms: entries.into_iter().collect() })
    }
}

const COEFF_EPS: f64 = 0.0;

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        p.add_term([0, 0, 0], c);
        p
    }

    pub fn var(i: usize) -> Self {
        let mut e = [0u8; 3];
        e[i] = 1;
        let mut p = Poly::zero();
        p.add_term(e, 1.0);
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, exps: [u8; 3], c: f64) {
        if c == COEFF_EPS {
            return;
        }
        let entry = self.terms.entry(exps).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.remove(&exps);
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8; 3], &f64)> {
        self.terms.iter()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&x| x as u32).sum())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * powi(p.x, e[0]) * powi(p.y, e[1]) * powi(p.z, e[2]))
            .sum()
    }

    pub fn partial(&self, i: usize) -> Poly {
        let mut out = Poly::zero();
        for (e, c) in &self.terms {
            if e[i] == 0 {
                continue;
            }
            let mut ne = *e;
            ne[i] -= 1;
            out.add_term(ne, c * e[i] as f64);
        }
        out
    }

    pub fn gradient(&self) -> [Poly; 3] {
        [self.partial(0), self.partial(1), self.partial(2)]
    }

    pub fn scale(&self, s: f64) -> Poly {
        let mut out = Poly::zero();
        for (e, c) in &self.terms {
            out.add_term(*e, c * s);
        }
        out
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(*e, *c);
        }
        out
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e = [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]];
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    /// Substitute `p_i = sum_j m[i][j] * q_j`, returning the polynomial in `q`.
    /// Exact when the matrix entries are exactly representable (integers,
    /// small rationals), which is the only way it is used.
    pub fn compose_linear(&self, m: &Matrix3<f64>) -> Poly {
        let rows: Vec<Poly> = (0..3)
            .map(|i| {
                let mut row = Poly::zero();
                for j in 0..3 {
                    let c = m[(i, j)];
                    if c != 0.0 {
                        let mut e = [0u8; 3];
                        e[j] = 1;
                        row.add_term(e, c);
                    }
                }
                row
            })
            .collect();
        let mut out = Poly::zero();
        for (e, c) in &self.terms {
            let mut term = Poly::constant(*c);
            for (i, row) in rows.iter().enumerate() {
                for _ in 0..e[i] {
                    term = term.mul(row);
                }
            }
            out = out.add(&term);
        }
        out
    }

    pub fn check_degree(&self, cap: u32) -> Result<(), PolyError> {
        let d = self.degree();
        if d > cap {
            Err(PolyError::DegreeOverflow { found: d, cap })
        } else {
            Ok(())
        }
    }

    /// Parse expressions like `0.5*p1^2 - p2*p3 + 1`.
    pub fn parse(src: &str) -> Result<Poly, PolyError> {
        Parser { src: src.as_bytes(), pos: 0 }.parse_all()
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, &ex) in e.iter().enumerate() {
                if ex > 0 {
                    write!(f, "*p{}^{}", i + 1, ex)?;
                }
            }
        }
        Ok(())
    }
}

fn powi(x: f64, n: u8) -> f64 {
    let mut out = 1.0;
    for _ in 0..n {
        out *= x;
    }
    out
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn parse_all(&mut self) -> Result<Poly, PolyError> {
        let p = self.expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(self.err("trailing input"));
        }
        Ok(p)
    }

    fn err(&self, msg: &str) -> PolyError {
        PolyError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Poly, PolyError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = acc.add(&self.term()?.scale(-1.0));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Poly, PolyError> {
        let mut acc = self.factor()?;
        while let Some(b'*') = self.peek() {
            self.pos += 1;
            acc = acc.mul(&self.factor()?);
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Poly, PolyError> {
        let base = self.atom()?;
        if let Some(b'^') = self.peek() {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected integer exponent"));
            }
            let n: u32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|_| self.err("bad exponent"))?;
            let mut out = Poly::constant(1.0);
            for _ in 0..n {
                out = out.mul(&base);
            }
            return Ok(out);
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Poly, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(self.factor()?.scale(-1.0))
            }
            Some(b'p') => {
                self.pos += 1;
                match self.src.get(self.pos) {
                    Some(&c @ b'1'..=b'3') => {
                        self.pos += 1;
                        Ok(Poly::var((c - b'1') as usize))
                    }
                    _ => Err(self.err("expected p1, p2 or p3")),
                }
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    if c.is_ascii_digit() || c == b'.' {
                        self.pos += 1;
                    } else if (c == b'e' || c == b'E')
                        && self.pos + 1 < self.src.len()
                        && (self.src[self.pos + 1].is_ascii_digit()
                            || self.src[self.pos + 1] == b'-'
                            || self.src[self.pos + 1] == b'+')
                    {
                        self.pos += 2;
                    } else {
                        break;
                    }
                }
                let v: f64 = std::str::from_utf8(&self.src[start..self.pos])
                    .unwrap()
                    .parse()
                    .map_err(|_| self.err("bad number"))?;
                Ok(Poly::constant(v))
            }
            _ => Err(self.err("unexpected token")),
        }
    }
}

/// Complex-valued polynomial, the natural coefficient of a single Fourier mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CPoly {
    pub re: Poly,
    pub im: Poly,
}

impl CPoly {
    pub fn zero() -> Self {
        CPoly::default()
    }

    pub fn from_real(re: Poly) -> Self {
        CPoly { re, im: Poly::zero() }
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn conj(&self) -> CPoly {
        CPoly { re: self.re.clone(), im: self.im.scale(-1.0) }
    }

    pub fn add(&self, other: &CPoly) -> CPoly {
        CPoly { re: self.re.add(&other.re), im: self.im.add(&other.im) }
    }

    /// Multiply by a complex constant.
    pub fn scale(&self, z: Complex64) -> CPoly {
        CPoly {
            re: self.re.scale(z.re).add(&self.im.scale(-z.im)),
            im: self.re.scale(z.im).add(&self.im.scale(z.re)),
        }
    }

    pub fn eval(&self, p: &Vector3<f64>) -> Complex64 {
        Complex64::new(self.re.eval(p), self.im.eval(p))
    }

    pub fn partial(&self, i: usize) -> CPoly {
        CPoly { re: self.re.partial(i), im: self.im.partial(i) }
    }

    pub fn compose_linear(&self, m: &Matrix3<f64>) -> CPoly {
        CPoly { re: self.re.compose_linear(m), im: self.im.compose_linear(m) }
    }

    pub fn degree(&self) -> u32 {
        self.re.degree().max(self.im.degree())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_eval() {
        let p = Poly::parse("0.5*p1^2 - p2*p3 + 2").unwrap();
        let x = Vector3::new(2.0, 3.0, 4.0);
        assert_eq!(p.eval(&x), 0.5 * 4.0 - 12.0 + 2.0);
        assert_eq!(p.degree(), 2);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Poly::parse("p4").is_err());
        assert!(Poly::parse("1 +").is_err());
        assert!(Poly::parse("(p1").is_err());
    }

    #[test]
    fn partials_are_exact() {
        let p = Poly::parse("p1^3*p2").unwrap();
        let dp1 = p.partial(0);
        let x = Vector3::new(1.5, -2.0, 0.3);
        assert!((dp1.eval(&x) - 3.0 * 1.5f64.powi(2) * -2.0).abs() < 1e-15);
    }

    #[test]
    fn linear_substitution_matches_direct_eval() {
        let p = Poly::parse("p1^2 + p2*p3 - 0.25*p3^2").unwrap();
        let m = Matrix3::new(1.0, 2.0, 0.0, 0.0, 1.0, -1.0, 3.0, 0.0, 1.0);
        let q = Vector3::new(0.7, -0.2, 1.1);
        let composed = p.compose_linear(&m);
        assert!((composed.eval(&q) - p.eval(&(m * q))).abs() < 1e-12);
    }

    #[test]
    fn degree_cap() {
        let p = Poly::parse("p1^5").unwrap();
        assert_eq!(p.check_degree(4), Err(PolyError::DegreeOverflow { found: 5, cap: 4 }));
        assert!(p.check_degree(5).is_ok());
    }
}
