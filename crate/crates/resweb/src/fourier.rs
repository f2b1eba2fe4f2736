//! Finite Fourier series on T^3 with polynomial momentum coefficients, and
//! plain two-angle series used by reduced normal forms.
//!
//! A series stores every mode explicitly, with the Hermitian pairing
//! `c_{-k} = conj(c_k)` enforced at insertion so the represented function is
//! real. Differentiation in the angles multiplies a mode by `i k`, which keeps
//! the algebra exact.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::poly::{CPoly, Poly};

pub type Mode3 = [i64; 3];

#[derive(Debug, Clone, Default)]
pub struct FourierSeries3 {
    modes: BTreeMap<Mode3, CPoly>,
}

// JSON maps need string keys, so the series serializes as an entry list.
impl Serialize for FourierSeries3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<(&Mode3, &CPoly)> = self.modes.iter().collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FourierSeries3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries: Vec<(Mode3, CPoly)> = Vec::deserialize(d)?;
        Ok(FourierSeries3 { modes: entries.into_iter().collect() })
    }
}

fn neg(k: &Mode3) -> Mode3 {
    [-k[0], -k[1], -k[2]]
}

impl FourierSeries3 {
    pub fn new() -> Self {
        Self::default()
    }

    /// `coeff(p) * cos(<k, q>)`
    pub fn add_cos(&mut self, k: Mode3, coeff: Poly) {
        self.add_complex_pair(k, CPoly::from_real(coeff.scale(0.5)));
    }

    /// `coeff(p) * sin(<k, q>)`
    pub fn add_sin(&mut self, k: Mode3, coeff: Poly) {
        // sin = (e^{ikq} - e^{-ikq}) / 2i  =>  amplitude -i/2 at k.
        let amp = CPoly::from_real(coeff).scale(Complex64::new(0.0, -0.5));
        self.add_complex_pair(k, amp);
    }

    /// Insert `amp` at `k` and its conjugate at `-k`. For `k = 0` the
    /// imaginary part must vanish for the sum to stay real.
    pub fn add_complex_pair(&mut self, k: Mode3, amp: CPoly) {
        if amp.is_zero() {
            return;
        }
        if k == [0, 0, 0] {
            assert!(amp.im.is_zero(), "zero mode must have a real amplitude");
            self.accumulate(k, amp);
            return;
        }
        self.accumulate(k, amp.clone());
        self.accumulate(neg(&k), amp.conj());
    }

    fn accumulate(&mut self, k: Mode3, amp: CPoly) {
        let slot = self.modes.entry(k).or_insert_with(CPoly::zero);
        *slot = slot.add(&amp);
        if slot.is_zero() {
            self.modes.remove(&k);
        }
    }

    /// Raw insertion without the Hermitian mirror. Callers iterating a full
    /// `+/-k` mode set insert each side themselves.
    pub fn add_raw_mode(&mut self, k: Mode3, amp: CPoly) {
        if !amp.is_zero() {
            self.accumulate(k, amp);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> impl Iterator<Item = (&Mode3, &CPoly)> {
        self.modes.iter()
    }

    pub fn max_degree(&self) -> u32 {
        self.modes.values().map(|c| c.degree()).max().unwrap_or(0)
    }

    pub fn max_mode_norm(&self) -> i64 {
        self.modes
            .keys()
            .map(|k| k.iter().map(|x| x.abs()).max().unwrap())
            .max()
            .unwrap_or(0)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        let probe = Vector3::new(0.37, -1.21, 0.59);
        self.modes.iter().all(|(k, c)| match self.modes.get(&neg(k)) {
            Some(cc) => (cc.eval(&probe) - c.eval(&probe).conj()).norm() <= tol,
            None => false,
        })
    }

    pub fn eval_complex(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            acc += c.eval(p) * Complex64::from_polar(1.0, phase);
        }
        acc
    }

    pub fn eval(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
        self.eval_complex(p, q).re
    }

    pub fn grad_q(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            let v = c.eval(p) * Complex64::from_polar(1.0, phase) * Complex64::new(0.0, 1.0);
            g.x += v.re * k[0] as f64;
            g.y += v.re * k[1] as f64;
            g.z += v.re * k[2] as f64;
        }
        g
    }

    pub fn grad_p(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            let rot = Complex64::from_polar(1.0, phase);
            for i in 0..3 {
                g[i] += (c.partial(i).eval(p) * rot).re;
            }
        }
        g
    }

    /// Second angle derivative `d^2 / dq_i dq_j`.
    pub fn d2_qq(&self, p: &Vector3<f64>, q: &Vector3<f64>, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            let v = c.eval(p) * Complex64::from_polar(1.0, phase);
            acc -= v.re * k[i] as f64 * k[j] as f64;
        }
        acc
    }

    pub fn d2_pq(&self, p: &Vector3<f64>, q: &Vector3<f64>, ip: usize, iq: usize) -> f64 {
        let mut acc = 0.0;
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            let v = c.partial(ip).eval(p)
                * Complex64::from_polar(1.0, phase)
                * Complex64::new(0.0, k[iq] as f64);
            acc += v.re;
        }
        acc
    }

    pub fn d2_pp(&self, p: &Vector3<f64>, q: &Vector3<f64>, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for (k, c) in &self.modes {
            let phase = k[0] as f64 * q.x + k[1] as f64 * q.y + k[2] as f64 * q.z;
            acc += (c.partial(i).partial(j).eval(p) * Complex64::from_polar(1.0, phase)).re;
        }
        acc
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::new();
        for (k, c) in &self.modes {
            out.modes.insert(*k, c.scale(Complex64::new(s, 0.0)));
        }
        out
    }

    pub fn filter<F: Fn(&Mode3) -> bool>(&self, pred: F) -> Self {
        let mut out = Self::new();
        for (k, c) in &self.modes {
            if pred(k) {
                out.modes.insert(*k, c.clone());
            }
        }
        out
    }

    /// Change of frame for an exact integer transform of the angles.
    ///
    /// If the new angles satisfy `q = angle_mat^{-1} * q_new` (so a mode `k`
    /// becomes `k_new = mode_map(k)`) and the momenta satisfy
    /// `p = momentum_mat * p_new`, the series in the new variables has mode
    /// `mode_map(k)` with coefficient `c_k(momentum_mat * p_new)`.
    pub fn transformed<F: Fn(&Mode3) -> Mode3>(
        &self,
        mode_map: F,
        momentum_mat: &Matrix3<f64>,
    ) -> Self {
        let mut out = Self::new();
        for (k, c) in &self.modes {
            let nk = mode_map(k);
            out.modes.insert(nk, c.compose_linear(momentum_mat));
        }
        out
    }

    /// Map `q -> q + shift` (used by flows with exact mode algebra).
    pub fn angle_shifted(&self, shift: &Vector3<f64>) -> Self {
        let mut out = Self::new();
        for (k, c) in &self.modes {
            let phase =
                k[0] as f64 * shift.x + k[1] as f64 * shift.y + k[2] as f64 * shift.z;
            out.modes.insert(*k, c.scale(Complex64::from_polar(1.0, phase)));
        }
        out
    }
}

/// Two-angle numeric Fourier series: the reduced potential `V` and the
/// resonant term restricted to the double-resonance point live here.
#[derive(Debug, Clone, Default)]
pub struct Fourier2 {
    modes: BTreeMap<(i64, i64), (f64, f64)>,
}

impl Serialize for Fourier2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<(i64, i64, f64, f64)> = self
            .modes
            .iter()
            .map(|((a, b), (re, im))| (*a, *b, *re, *im))
            .collect();
        entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Fourier2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries: Vec<(i64, i64, f64, f64)> = Vec::deserialize(d)?;
        Ok(Fourier2 {
            modes: entries.into_iter().map(|(a, b, re, im)| ((a, b), (re, im))).collect(),
        })
    }
}

impl Fourier2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut s = Self::new();
        s.add_mode((0, 0), Complex64::new(c, 0.0));
        s
    }

    /// `a * cos(n1 x1 + n2 x2)`
    pub fn add_cos(&mut self, n: (i64, i64), a: f64) {
        self.add_mode(n, Complex64::new(a / 2.0, 0.0));
    }

    pub fn add_mode(&mut self, n: (i64, i64), amp: Complex64) {
        if amp.norm() == 0.0 {
            return;
        }
        if n == (0, 0) {
            assert!(amp.im.abs() < 1e-14, "zero mode must be real");
            Self::acc(&mut self.modes, n, amp.re, 0.0);
            return;
        }
        Self::acc(&mut self.modes, n, amp.re, amp.im);
        Self::acc(&mut self.modes, (-n.0, -n.1), amp.re, -amp.im);
    }

    fn acc(map: &mut BTreeMap<(i64, i64), (f64, f64)>, n: (i64, i64), re: f64, im: f64) {
        let e = map.entry(n).or_insert((0.0, 0.0));
        e.0 += re;
        e.1 += im;
        if e.0 == 0.0 && e.1 == 0.0 {
            map.remove(&n);
        }
    }

    pub fn add_constant(&mut self, c: f64) {
        Self::acc(&mut self.modes, (0, 0), c, 0.0);
        if let Some(e) = self.modes.get(&(0, 0)) {
            if e.0 == 0.0 && e.1 == 0.0 {
                self.modes.remove(&(0, 0));
            }
        }
    }

    pub fn modes(&self) -> impl Iterator<Item = (&(i64, i64), &(f64, f64))> {
        self.modes.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eval(&self, x: &Vector2<f64>) -> f64 {
        let mut acc = 0.0;
        for (n, (re, im)) in &self.modes {
            let phase = n.0 as f64 * x.x + n.1 as f64 * x.y;
            acc += re * phase.cos() - im * phase.sin();
        }
        acc
    }

    pub fn grad(&self, x: &Vector2<f64>) -> Vector2<f64> {
        let mut g = Vector2::zeros();
        for (n, (re, im)) in &self.modes {
            let phase = n.0 as f64 * x.x + n.1 as f64 * x.y;
            let d = -re * phase.sin() - im * phase.cos();
            g.x += d * n.0 as f64;
            g.y += d * n.1 as f64;
        }
        g
    }

    pub fn hessian(&self, x: &Vector2<f64>) -> nalgebra::Matrix2<f64> {
        let mut h = nalgebra::Matrix2::zeros();
        for (n, (re, im)) in &self.modes {
            let phase = n.0 as f64 * x.x + n.1 as f64 * x.y;
            let dd = -re * phase.cos() + im * phase.sin();
            let (a, b) = (n.0 as f64, n.1 as f64);
            h[(0, 0)] += dd * a * a;
            h[(0, 1)] += dd * a * b;
            h[(1, 0)] += dd * a * b;
            h[(1, 1)] += dd * b * b;
        }
        h
    }

    /// Max of the series on an `n x n` grid with a Newton polish of the best
    /// grid cell. Returns (max value, arg max).
    pub fn max_on_grid(&self, n: usize) -> (f64, Vector2<f64>) {
        let mut best = (f64::NEG_INFINITY, Vector2::zeros());
        let step = 2.0 * std::f64::consts::PI / n as f64;
        for i in 0..n {
            for j in 0..n {
                let x = Vector2::new(i as f64 * step, j as f64 * step);
                let v = self.eval(&x);
                if v > best.0 {
                    best = (v, x);
                }
            }
        }
        // Newton polish on the gradient.
        let mut x = best.1;
        for _ in 0..40 {
            let g = self.grad(&x);
            let h = self.hessian(&x);
            let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
            if det.abs() < 1e-14 || g.norm() < 1e-14 {
                break;
            }
            let dx = Vector2::new(
                (h[(1, 1)] * g.x - h[(0, 1)] * g.y) / det,
                (-h[(1, 0)] * g.x + h[(0, 0)] * g.y) / det,
            );
            if dx.norm() > step {
                break;
            }
            x -= dx;
        }
        let v = self.eval(&x);
        if v > best.0 {
            (v, x)
        } else {
            best
        }
    }

    pub fn sup_grad_components(&self, n: usize) -> (f64, f64) {
        let step = 2.0 * std::f64::consts::PI / n as f64;
        let mut m = (0.0f64, 0.0f64);
        for i in 0..n {
            for j in 0..n {
                let g = self.grad(&Vector2::new(i as f64 * step, j as f64 * step));
                m.0 = m.0.max(g.x.abs());
                m.1 = m.1.max(g.y.abs());
            }
        }
        m
    }

    /// C^1-size on a grid: max of |f|, |df/dx1|, |df/dx2|.
    pub fn c1_size(&self, n: usize) -> f64 {
        let step = 2.0 * std::f64::consts::PI / n as f64;
        let mut m = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let x = Vector2::new(i as f64 * step, j as f64 * step);
                let g = self.grad(&x);
                m = m.max(self.eval(&x).abs()).max(g.x.abs()).max(g.y.abs());
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cosine_mode_is_real_and_correct() {
        let mut s = FourierSeries3::new();
        s.add_cos([1, -1, 0], Poly::constant(0.5));
        let p = Vector3::zeros();
        let q = Vector3::new(0.3, 0.1, 2.0);
        assert_relative_eq!(s.eval(&p, &q), 0.5 * (0.3f64 - 0.1).cos(), epsilon = 1e-14);
        assert!(s.eval_complex(&p, &q).im.abs() < 1e-15);
        assert!(s.is_hermitian(1e-14));
    }

    #[test]
    fn angle_gradient_matches_finite_difference() {
        let mut s = FourierSeries3::new();
        s.add_cos([2, 0, 1], Poly::parse("p1 + 0.3*p2^2").unwrap());
        s.add_sin([0, 1, -1], Poly::constant(0.7));
        let p = Vector3::new(0.4, -0.2, 1.0);
        let q = Vector3::new(1.0, 2.0, 3.0);
        let g = s.grad_q(&p, &q);
        let h = 1e-6;
        for i in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (s.eval(&p, &qp) - s.eval(&p, &qm)) / (2.0 * h);
            assert_relative_eq!(g[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn two_angle_max_shift() {
        let mut v = Fourier2::new();
        v.add_cos((1, 0), 1.0);
        v.add_cos((0, 2), 0.5);
        let (m, _) = v.max_on_grid(64);
        assert_relative_eq!(m, 1.5, epsilon = 1e-10);
        v.add_constant(-m);
        let (m2, _) = v.max_on_grid(64);
        assert!(m2.abs() < 1e-10);
    }
}
