//! Exact integer and rational arithmetic: total irreducibility, unimodular
//! completions, the shear matrices of the second reduction step, rational
//! periods and scalar Dirichlet approximation.
//!
//! Floating point is deliberately absent from this module except in
//! `dirichlet_approx`, whose input is a real number by nature.

use nalgebra::Matrix3;
use num_integer::Integer;
use num_rational::Rational64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type IVec3 = [i64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("zero vector")]
    ZeroVector,
    #[error("vector {0:?} is not totally irreducible")]
    NotIrreducible(IVec3),
    #[error("shear input must have the form (0, a, b) with (a, b) != (0, 0), got {0:?}")]
    BadShape(IVec3),
    #[error("zero frequency has no period")]
    ZeroFrequency,
}

/// Pairwise gcd test with the zero conventions `gcd(a, 0) = |a|`,
/// `gcd(0, 0) = 0`; zero pairs are accepted so unit vectors pass.
pub fn totally_irreducible(k: &IVec3) -> Result<bool, LatticeError> {
    if *k == [0, 0, 0] {
        return Err(LatticeError::ZeroVector);
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            if k[i].abs().gcd(&k[j].abs()) > 1 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Columns `(k', k*, k_extra)` of a unimodular matrix `M0^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodularTriple {
    pub k_prime: IVec3,
    pub k_star: IVec3,
    pub k_extra: IVec3,
    /// Columns are `(k', k*, k_extra)`.
    pub m0_t: [IVec3; 3],
}

fn columns(a: IVec3, b: IVec3, c: IVec3) -> [IVec3; 3] {
    [
        [a[0], b[0], c[0]],
        [a[1], b[1], c[1]],
        [a[2], b[2], c[2]],
    ]
}

pub fn det3(m: &[IVec3; 3]) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Integer adjugate; for a unimodular matrix `adj / det` is the exact inverse.
pub fn adjugate3(m: &[IVec3; 3]) -> [IVec3; 3] {
    let c = |i: usize, j: usize| -> i64 {
        let rows: Vec<usize> = (0..3).filter(|&r| r != i).collect();
        let cols: Vec<usize> = (0..3).filter(|&c| c != j).collect();
        let minor = m[rows[0]][cols[0]] * m[rows[1]][cols[1]]
            - m[rows[0]][cols[1]] * m[rows[1]][cols[0]];
        if (i + j) % 2 == 0 {
            minor
        } else {
            -minor
        }
    };
    // adj = cofactor transpose
    [
        [c(0, 0), c(1, 0), c(2, 0)],
        [c(0, 1), c(1, 1), c(2, 1)],
        [c(0, 2), c(1, 2), c(2, 2)],
    ]
}

pub fn mat_mul_vec(m: &[IVec3; 3], v: &IVec3) -> IVec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn to_f64(m: &[IVec3; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j] as f64)
}

impl UnimodularTriple {
    pub fn det(&self) -> i64 {
        det3(&self.m0_t)
    }

    /// `M0 = (M0^t)^t`, rows `(k', k*, k_extra)`.
    pub fn m0(&self) -> [IVec3; 3] {
        let t = &self.m0_t;
        [
            [t[0][0], t[1][0], t[2][0]],
            [t[0][1], t[1][1], t[2][1]],
            [t[0][2], t[1][2], t[2][2]],
        ]
    }

    /// Exact integer `M0^{-t}`; this sends a mode `k` of the original angles
    /// to the corresponding mode of the rotated angles.
    pub fn m0_inv_t(&self) -> [IVec3; 3] {
        let d = self.det();
        debug_assert!(d == 1 || d == -1);
        let adj = adjugate3(&self.m0_t);
        // inverse of M0^t = adj / det; we need (M0^t)^{-1} then transpose? No:
        // M0^{-t} = (M0^{-1})^t = (M0^t)^{-1} works directly on column vectors.
        let mut inv = adj;
        if d == -1 {
            for row in inv.iter_mut() {
                for x in row.iter_mut() {
                    *x = -*x;
                }
            }
        }
        inv
    }

    pub fn rotate_mode(&self, k: &IVec3) -> IVec3 {
        mat_mul_vec(&self.m0_inv_t(), k)
    }
}

/// Completes a totally irreducible `k'` to a unimodular matrix with first
/// column `k'`. The two-nonzero-entry case solves a Bezout identity with the
/// minimal-norm representative (ties broken lexicographically largest);
/// remaining patterns are handled by coordinate permutation.
pub fn unimodular_complete(k_prime: &IVec3) -> Result<UnimodularTriple, LatticeError> {
    if !totally_irreducible(k_prime)? {
        return Err(LatticeError::NotIrreducible(*k_prime));
    }
    // Unit vector case.
    let nonzero: Vec<usize> = (0..3).filter(|&i| k_prime[i] != 0).collect();
    if nonzero.len() == 1 {
        let i = nonzero[0];
        let mut k_star = [0i64; 3];
        let mut k_extra = [0i64; 3];
        k_star[(i + 1) % 3] = 1;
        k_extra[(i + 2) % 3] = 1;
        let m0_t = columns(*k_prime, k_star, k_extra);
        let triple = UnimodularTriple { k_prime: *k_prime, k_star, k_extra, m0_t };
        debug_assert!(triple.det().abs() == 1);
        return Ok(triple);
    }
    // Pick a coordinate pair (i, j) with both entries nonzero; permute it into
    // the leading positions, solve, and undo the permutation.
    let (i, j) = if k_prime[0] != 0 && k_prime[1] != 0 {
        (0, 1)
    } else if k_prime[0] != 0 && k_prime[2] != 0 {
        (0, 2)
    } else {
        (1, 2)
    };
    let l = 3 - i - j; // the remaining axis
    let (a, b) = (k_prime[i], k_prime[j]);
    // Solve a*y - b*x = 1; total irreducibility gives gcd(|a|, |b|) = 1.
    let eg = a.extended_gcd(&b);
    debug_assert_eq!(eg.gcd.abs(), 1);
    // a*eg.x + b*eg.y = gcd; we want a*y - b*x = 1.
    let sign = eg.gcd.signum();
    let mut x0 = -eg.y * sign;
    let mut y0 = eg.x * sign;
    debug_assert_eq!(a * y0 - b * x0, 1);
    // Minimal-norm representative of (x0, y0) + t (a, b).
    let denom = (a * a + b * b) as f64;
    let t_opt = -((x0 * a + y0 * b) as f64) / denom;
    let mut best: Option<(i64, i64, i64)> = None;
    for t in [t_opt.floor() as i64, t_opt.ceil() as i64, t_opt.round() as i64] {
        let (x, y) = (x0 + t * a, y0 + t * b);
        let n = x * x + y * y;
        let better = match best {
            None => true,
            Some((bn, bx, by)) => n < bn || (n == bn && (x, y) > (bx, by)),
        };
        if better {
            best = Some((n, x, y));
        }
    }
    let (_, bx, by) = best.unwrap();
    x0 = bx;
    y0 = by;
    let mut k_star = [0i64; 3];
    k_star[i] = x0;
    k_star[j] = y0;
    let mut k_extra = [0i64; 3];
    k_extra[l] = 1;
    let m0_t = columns(*k_prime, k_star, k_extra);
    let triple = UnimodularTriple { k_prime: *k_prime, k_star, k_extra, m0_t };
    debug_assert!(triple.det().abs() == 1, "det = {}", triple.det());
    Ok(triple)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShearBranch {
    /// `|k''_2| >= |k''_3|`: the surviving fast angle is the third one.
    SecondDominant,
    /// `|k''_3| > |k''_2|`: the roles of the last two coordinates swap.
    ThirdDominant,
}

/// The exact rational shear diagonalizing the second resonance direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearTransform {
    pub kpp_bar: IVec3,
    pub branch: ShearBranch,
    pub m_t: [[Rational64; 3]; 3],
    pub m_inv: [[Rational64; 3]; 3],
    /// `|k''| = max(|k''_2|, |k''_3|)`, the extended angle period factor.
    pub period_factor: i64,
}

fn rat_identity() -> [[Rational64; 3]; 3] {
    let mut m = [[Rational64::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = Rational64::new(1, 1);
    }
    m
}

pub fn rat_mat_mul(a: &[[Rational64; 3]; 3], b: &[[Rational64; 3]; 3]) -> [[Rational64; 3]; 3] {
    let mut out = [[Rational64::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = Rational64::zero();
            for (l, brow) in b.iter().enumerate() {
                s += a[i][l] * brow[j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn rat_to_f64(m: &[[Rational64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| *m[i][j].numer() as f64 / *m[i][j].denom() as f64)
}

impl ShearTransform {
    /// `M = (M^t)^t` as floats.
    pub fn m(&self) -> Matrix3<f64> {
        rat_to_f64(&self.m_t).transpose()
    }

    pub fn m_t_f64(&self) -> Matrix3<f64> {
        rat_to_f64(&self.m_t)
    }

    pub fn m_inv_f64(&self) -> Matrix3<f64> {
        rat_to_f64(&self.m_inv)
    }

    pub fn shear_entry(&self) -> Rational64 {
        match self.branch {
            ShearBranch::SecondDominant => self.m_t[2][1],
            ShearBranch::ThirdDominant => self.m_t[1][2],
        }
    }
}

/// Builds the shear for a rotated second resonance `(0, a, b)` with
/// `gcd(a, b) = 1`. The off-diagonal entry has magnitude at most one, so the
/// transform is uniformly bounded over all second resonances.
pub fn shear_transform(kpp_bar: &IVec3) -> Result<ShearTransform, LatticeError> {
    if kpp_bar[0] != 0 || (kpp_bar[1] == 0 && kpp_bar[2] == 0) {
        return Err(LatticeError::BadShape(*kpp_bar));
    }
    let (a, b) = (kpp_bar[1], kpp_bar[2]);
    if a.abs().gcd(&b.abs()) > 1 {
        return Err(LatticeError::NotIrreducible(*kpp_bar));
    }
    let mut m_t = rat_identity();
    let mut m_inv = rat_identity();
    let branch;
    let period_factor;
    if a.abs() >= b.abs() {
        branch = ShearBranch::SecondDominant;
        period_factor = a.abs();
        let r = Rational64::new(b, a);
        m_t[2][1] = r;
        m_inv[1][2] = -r;
    } else {
        branch = ShearBranch::ThirdDominant;
        period_factor = b.abs();
        let r = Rational64::new(a, b);
        m_t[1][2] = r;
        m_inv[2][1] = -r;
    }
    Ok(ShearTransform { kpp_bar: *kpp_bar, branch, m_t, m_inv, period_factor })
}

/// Least integer `T >= 1` with `T * omega` integral: the lcm of the reduced
/// denominators.
pub fn rational_period(omega: &[Rational64; 3]) -> Result<i64, LatticeError> {
    if omega.iter().all(|w| w.is_zero()) {
        return Err(LatticeError::ZeroFrequency);
    }
    let mut t = 1i64;
    for w in omega {
        t = t.lcm(w.denom());
    }
    Ok(t.abs())
}

/// Distance to the nearest integer.
pub fn dist_to_int(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// Least `k` with `1 <= k < K` and `dist(k omega, Z) <= 1/K`. Existence is
/// guaranteed by Dirichlet's approximation theorem. Continued-fraction
/// convergents give an upper bound for the search, and the prefix scan below
/// it returns the least witness.
pub fn dirichlet_approx(omega: f64, k_bound: f64) -> i64 {
    assert!(k_bound > 1.0, "need K > 1");
    let target = 1.0 / k_bound;
    // Convergent denominators of the continued fraction of omega.
    let mut upper: i64 = k_bound.ceil() as i64 - 1;
    let mut x = omega.fract().abs();
    let (mut q_prev, mut q) = (0i64, 1i64);
    for _ in 0..64 {
        if dist_to_int(q as f64 * omega) <= target && (q as f64) < k_bound {
            upper = upper.min(q);
            break;
        }
        if x.abs() < 1e-15 {
            break;
        }
        x = 1.0 / x;
        let a = x.floor();
        x -= a;
        let q_next = a as i64 * q + q_prev;
        q_prev = q;
        q = q_next;
        if q_prev as f64 >= k_bound {
            break;
        }
    }
    for k in 1..=upper.max(1) {
        if dist_to_int(k as f64 * omega) <= target {
            return k;
        }
    }
    // Fall back to a full scan; unreachable in exact arithmetic, kept as a
    // guard against rounding at the boundary.
    let mut best = (f64::INFINITY, 1i64);
    for k in 1..(k_bound.ceil() as i64) {
        let d = dist_to_int(k as f64 * omega);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn irreducibility_cases() {
        assert!(totally_irreducible(&[2, 3, 5]).unwrap());
        assert!(!totally_irreducible(&[2, 4, 5]).unwrap());
        assert!(totally_irreducible(&[1, 0, 0]).unwrap());
        assert!(totally_irreducible(&[0, 1, -1]).unwrap());
        assert!(!totally_irreducible(&[0, 2, 3]).unwrap());
        assert_eq!(totally_irreducible(&[0, 0, 0]), Err(LatticeError::ZeroVector));
    }

    #[test]
    fn completion_of_unit_vector_is_identity() {
        let t = unimodular_complete(&[1, 0, 0]).unwrap();
        assert_eq!(t.m0_t, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(t.det(), 1);
    }

    #[test]
    fn completion_of_ones() {
        let t = unimodular_complete(&[1, 1, 1]).unwrap();
        assert_eq!(t.k_extra, [0, 0, 1]);
        assert_eq!(t.k_star, [0, 1, 0]);
        assert_eq!(t.det(), 1);
    }

    #[test]
    fn completion_bezout_case() {
        let t = unimodular_complete(&[3, 5, 7]).unwrap();
        // 3 * k*_2 - 5 * k*_1 = 1 with the minimal-norm representative.
        assert_eq!(3 * t.k_star[1] - 5 * t.k_star[0], 1);
        assert_eq!(t.k_star, [1, 2, 0]);
        assert_eq!(t.det().abs(), 1);
    }

    #[test]
    fn completion_rejects_reducible() {
        assert_eq!(
            unimodular_complete(&[2, 4, 5]),
            Err(LatticeError::NotIrreducible([2, 4, 5]))
        );
    }

    #[test]
    fn completion_with_zero_middle_entry() {
        let t = unimodular_complete(&[1, 0, 1]).unwrap();
        assert_eq!(t.det().abs(), 1);
        assert_eq!(t.m0_t[0][0], 1);
    }

    #[test]
    fn shear_branch_one() {
        let s = shear_transform(&[0, 1, -1]).unwrap();
        assert_eq!(s.branch, ShearBranch::SecondDominant);
        let expect = [
            [Rational64::new(1, 1), Rational64::zero(), Rational64::zero()],
            [Rational64::zero(), Rational64::new(1, 1), Rational64::zero()],
            [Rational64::zero(), Rational64::new(-1, 1), Rational64::new(1, 1)],
        ];
        assert_eq!(s.m_t, expect);
        assert_eq!(s.period_factor, 1);
    }

    #[test]
    fn shear_trivial_when_aligned() {
        let s = shear_transform(&[0, 1, 0]).unwrap();
        assert_eq!(s.m_t, rat_identity());
        assert!(s.shear_entry().is_zero());
    }

    #[test]
    fn shear_exact_round_trip() {
        let s = shear_transform(&[0, 2, 5]).unwrap();
        assert_eq!(s.branch, ShearBranch::ThirdDominant);
        assert_eq!(s.m_t[1][2], Rational64::new(2, 5));
        // M^t (M^{-1})^t = (M^{-1} M)^t = I in exact rationals.
        let m_inv_t = {
            let mut t = [[Rational64::zero(); 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] = s.m_inv[j][i];
                }
            }
            t
        };
        assert_eq!(rat_mat_mul(&s.m_t, &m_inv_t), rat_identity());
    }

    #[test]
    fn shear_rejects_bad_shapes() {
        assert!(matches!(shear_transform(&[1, 1, 0]), Err(LatticeError::BadShape(_))));
        assert!(matches!(shear_transform(&[0, 2, 4]), Err(LatticeError::NotIrreducible(_))));
    }

    #[test]
    fn rational_periods() {
        let r = |n, d| Rational64::new(n, d);
        assert_eq!(rational_period(&[r(0, 1), r(1, 2), r(1, 4)]).unwrap(), 4);
        assert_eq!(rational_period(&[r(0, 1), r(1, 1), r(1, 1)]).unwrap(), 1);
        let t = rational_period(&[r(0, 1), r(2, 3), r(1, 2)]).unwrap();
        // Brute-force oracle over T = 1..6.
        let brute = (1..=6)
            .find(|t| {
                [r(0, 1), r(2, 3), r(1, 2)]
                    .iter()
                    .all(|w| (*w * Rational64::new(*t, 1)).is_integer())
            })
            .unwrap();
        assert_eq!(t, brute);
        assert_eq!(t, 6);
    }

    #[test]
    fn dirichlet_examples() {
        assert_eq!(dirichlet_approx(1.0 / 3.0, 4.0), 3);
        let k = dirichlet_approx(std::f64::consts::SQRT_2 - 1.0, 10.0);
        assert_eq!(k, 5);
        assert!(dist_to_int(5.0 * (std::f64::consts::SQRT_2 - 1.0)) <= 0.1);
        let k = dirichlet_approx(std::f64::consts::PI - 3.0, 100.0);
        assert_eq!(k, 7);
        assert!(dist_to_int(7.0 * (std::f64::consts::PI - 3.0)) <= 0.01);
    }

    #[test]
    fn dirichlet_is_least_witness() {
        // Brute-force cross-check on a few irrationals.
        for (omega, kb) in [(0.7548776662, 23.0), (0.3183098861, 57.0), (0.9102392266, 12.0)] {
            let k = dirichlet_approx(omega, kb);
            assert!(dist_to_int(k as f64 * omega) <= 1.0 / kb);
            for smaller in 1..k {
                assert!(dist_to_int(smaller as f64 * omega) > 1.0 / kb);
            }
        }
    }

    proptest! {
        #[test]
        fn completion_det_is_unimodular(
            a in -50i64..=50, b in -50i64..=50, c in -50i64..=50
        ) {
            let k = [a, b, c];
            if k != [0, 0, 0] && totally_irreducible(&k).unwrap() {
                let t = unimodular_complete(&k).unwrap();
                prop_assert_eq!(t.det().abs(), 1);
                prop_assert_eq!(t.m0_t[0][0], k[0]);
                prop_assert_eq!(t.m0_t[1][0], k[1]);
                prop_assert_eq!(t.m0_t[2][0], k[2]);
                // Exact integer inverse round-trip.
                let inv = t.m0_inv_t();
                let e1 = mat_mul_vec(&inv, &k);
                prop_assert_eq!(e1, [1, 0, 0]);
            }
        }

        #[test]
        fn dirichlet_bound_always_holds(omega in -10.0f64..10.0, kb in 1.5f64..500.0) {
            let k = dirichlet_approx(omega, kb);
            prop_assert!(k >= 1);
            prop_assert!((k as f64) < kb);
            prop_assert!(dist_to_int(k as f64 * omega) <= 1.0 / kb + 1e-12);
        }
    }
}
