//! The nearly integrable system `H(p, q) = h(p) + eps * P(p, q)` on
//! `B_D x T^3`: convex integrable part, finite Fourier perturbation, exact
//! jets, grid sup-norms and convexity bounds.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::FourierSeries3;
use crate::poly::{Poly, PolyError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("Hessian eigenvalue {0} <= 0: h is not convex on the sampled region")]
    NotConvex(f64),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("level set h = {energy} leaves the ball B_{radius}")]
    LevelSetEscapes { energy: f64, radius: f64 },
    #[error("eps must be >= 0, got {0}")]
    NegativeEps(f64),
    #[error("energy {energy} is not above min h = {min_h}")]
    EnergyBelowMin { energy: f64, min_h: f64 },
}

/// Convex integrable part: a quadratic form or a polynomial with exact jets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum HKind {
    Quadratic(Matrix3<f64>),
    Polynomial(Poly),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvexHamiltonian {
    pub kind: HKind,
    pub domain_radius: f64,
}

/// Sampled region for convexity bounds.
#[derive(Debug, Clone, Copy)]
pub enum Region {
    Ball(f64),
    /// Points with `|h(p) - energy| <= width` inside the domain ball.
    LevelShell { energy: f64, width: f64 },
}

impl ConvexHamiltonian {
    pub fn quadratic(q: Matrix3<f64>, domain_radius: f64) -> Self {
        assert!(
            (q - q.transpose()).norm() < 1e-12,
            "quadratic form must be symmetric"
        );
        ConvexHamiltonian { kind: HKind::Quadratic(q), domain_radius }
    }

    pub fn unit(domain_radius: f64) -> Self {
        Self::quadratic(Matrix3::identity(), domain_radius)
    }

    pub fn polynomial(p: Poly, domain_radius: f64) -> Self {
        ConvexHamiltonian { kind: HKind::Polynomial(p), domain_radius }
    }

    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        match &self.kind {
            HKind::Quadratic(q) => 0.5 * (q * p).dot(p),
            HKind::Polynomial(poly) => poly.eval(p),
        }
    }

    pub fn grad(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match &self.kind {
            HKind::Quadratic(q) => q * p,
            HKind::Polynomial(poly) => {
                Vector3::new(
                    poly.partial(0).eval(p),
                    poly.partial(1).eval(p),
                    poly.partial(2).eval(p),
                )
            }
        }
    }

    pub fn hess(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        match &self.kind {
            HKind::Quadratic(q) => *q,
            HKind::Polynomial(poly) => {
                let mut h = Matrix3::zeros();
                for i in 0..3 {
                    for j in 0..3 {
                        h[(i, j)] = poly.partial(i).partial(j).eval(p);
                    }
                }
                h
            }
        }
    }

    /// Third directional derivative tensor contracted twice; used only by
    /// tests that need an independent Taylor-tail oracle.
    pub fn min_value_estimate(&self) -> f64 {
        // Coarse grid minimum over the domain ball; h is convex so this is
        // accurate enough for validity checks.
        let n = 17;
        let r = self.domain_radius;
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = Vector3::new(
                        -r + 2.0 * r * i as f64 / (n - 1) as f64,
                        -r + 2.0 * r * j as f64 / (n - 1) as f64,
                        -r + 2.0 * r * k as f64 / (n - 1) as f64,
                    );
                    if p.norm() <= r {
                        best = best.min(self.value(&p));
                    }
                }
            }
        }
        best
    }

    /// Min/max Hessian eigenvalue over a sampled region.
    pub fn convexity_bounds(&self, region: Region) -> Result<(f64, f64), ModelError> {
        let n = 13;
        let r = self.domain_radius;
        let mut m = f64::INFINITY;
        let mut m_prime = f64::NEG_INFINITY;
        let mut seen = false;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let p = Vector3::new(
                        -r + 2.0 * r * i as f64 / (n - 1) as f64,
                        -r + 2.0 * r * j as f64 / (n - 1) as f64,
                        -r + 2.0 * r * k as f64 / (n - 1) as f64,
                    );
                    let inside = match region {
                        Region::Ball(rad) => p.norm() <= rad,
                        Region::LevelShell { energy, width } => {
                            p.norm() <= r && (self.value(&p) - energy).abs() <= width
                        }
                    };
                    if !inside {
                        continue;
                    }
                    seen = true;
                    let h = self.hess(&p);
                    let sym = nalgebra::SymmetricEigen::new(h);
                    for ev in sym.eigenvalues.iter() {
                        m = m.min(*ev);
                        m_prime = m_prime.max(*ev);
                    }
                }
            }
        }
        assert!(seen, "empty sampling region");
        if m <= 0.0 {
            return Err(ModelError::NotConvex(m));
        }
        Ok((m, m_prime))
    }
}

/// Exact first derivatives and momentum Hessian of `H` at a point.
#[derive(Debug, Clone)]
pub struct Jet {
    pub value: f64,
    pub grad_p: Vector3<f64>,
    pub grad_q: Vector3<f64>,
    pub hess_p: Matrix3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NearlyIntegrableSystem {
    pub h: ConvexHamiltonian,
    pub pert: FourierSeries3,
    pub eps: f64,
    pub energy: f64,
    /// Smoothness metadata r >= 6; only recorded, never differentiated to.
    pub smoothness: u32,
}

/// Degree cap for mode coefficients; rejected at construction.
pub const MAX_COEFF_DEGREE: u32 = 4;

impl NearlyIntegrableSystem {
    pub fn new(
        h: ConvexHamiltonian,
        pert: FourierSeries3,
        eps: f64,
        energy: f64,
        smoothness: u32,
    ) -> Result<Self, ModelError> {
        if eps < 0.0 {
            return Err(ModelError::NegativeEps(eps));
        }
        for (_, c) in pert.modes() {
            c.re.check_degree(MAX_COEFF_DEGREE)?;
            c.im.check_degree(MAX_COEFF_DEGREE)?;
        }
        let min_h = h.min_value_estimate();
        if energy <= min_h {
            return Err(ModelError::EnergyBelowMin { energy, min_h });
        }
        // Sample the level set: walk rays from the minimum region and check
        // the crossing radius stays inside B_D.
        let n_dir = 26;
        for a in 0..n_dir {
            let t = a as f64 / n_dir as f64 * std::f64::consts::TAU;
            for b in 1..6 {
                let ph = b as f64 / 6.0 * std::f64::consts::PI;
                let dir = Vector3::new(ph.sin() * t.cos(), ph.sin() * t.sin(), ph.cos());
                let mut s = 0.0;
                let mut hit = false;
                while s <= h.domain_radius {
                    if h.value(&(dir * s)) >= energy {
                        hit = true;
                        break;
                    }
                    s += h.domain_radius / 256.0;
                }
                if !hit {
                    return Err(ModelError::LevelSetEscapes {
                        energy,
                        radius: h.domain_radius,
                    });
                }
            }
        }
        Ok(NearlyIntegrableSystem { h, pert, eps, energy, smoothness })
    }

    pub fn value(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
        self.h.value(p) + self.eps * self.pert.eval(p, q)
    }

    /// Value, gradients and momentum Hessian, all from the stored
    /// representation. Angles are reduced mod 2 pi internally.
    pub fn evaluate_jet(&self, p: &Vector3<f64>, q: &Vector3<f64>) -> Jet {
        let q = reduce_angles(q);
        let mut hess_p = self.h.hess(p);
        for i in 0..3 {
            for j in 0..3 {
                hess_p[(i, j)] += self.eps * self.pert.d2_pp(p, &q, i, j);
            }
        }
        Jet {
            value: self.value(p, &q),
            grad_p: self.h.grad(p) + self.pert.grad_p(p, &q) * self.eps,
            grad_q: self.pert.grad_q(p, &q) * self.eps,
            hess_p,
        }
    }
}

/// Reduce each angle into `[0, 2 pi)`. Centralized here so every module agrees.
pub fn reduce_angles(q: &Vector3<f64>) -> Vector3<f64> {
    q.map(reduce_angle)
}

pub fn reduce_angle(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut y = x % tau;
    if y < 0.0 {
        y += tau;
    }
    y
}

/// Sup of |P| (order 0) or of all partial derivatives up to `order` over a
/// refined grid on `B_radius x T^3`. A lower bound of the true sup; the grid
/// is doubled until the relative change drops below `rel_tol` (or the level
/// cap is hit).
pub fn sup_norms(pert: &FourierSeries3, radius: f64, order: u8, rel_tol: f64) -> f64 {
    if pert.is_empty() {
        return 0.0;
    }
    let p_dependent = pert.max_degree() > 0;
    let mut nq = 8usize;
    let mut np = if p_dependent { 5usize } else { 1usize };
    let mut prev = sup_norms_at(pert, radius, order, np, nq);
    for _ in 0..5 {
        nq *= 2;
        if p_dependent {
            np = np * 2 - 1;
        }
        let cur = sup_norms_at(pert, radius, order, np, nq);
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1e-300) {
            return cur;
        }
        prev = cur;
    }
    prev
}

fn sup_norms_at(pert: &FourierSeries3, radius: f64, order: u8, np: usize, nq: usize) -> f64 {
    let mut best = 0.0f64;
    let p_points: Vec<Vector3<f64>> = if np == 1 {
        vec![Vector3::zeros()]
    } else {
        let mut pts = Vec::new();
        for i in 0..np {
            for j in 0..np {
                for k in 0..np {
                    let p = Vector3::new(
                        -radius + 2.0 * radius * i as f64 / (np - 1) as f64,
                        -radius + 2.0 * radius * j as f64 / (np - 1) as f64,
                        -radius + 2.0 * radius * k as f64 / (np - 1) as f64,
                    );
                    if p.norm() <= radius {
                        pts.push(p);
                    }
                }
            }
        }
        pts
    };
    let step = std::f64::consts::TAU / nq as f64;
    for p in &p_points {
        for i in 0..nq {
            for j in 0..nq {
                for k in 0..nq {
                    let q = Vector3::new(i as f64 * step, j as f64 * step, k as f64 * step);
                    best = best.max(pert.eval(p, &q).abs());
                    if order >= 1 {
                        let gq = pert.grad_q(p, &q);
                        let gp = pert.grad_p(p, &q);
                        for t in 0..3 {
                            best = best.max(gq[t].abs()).max(gp[t].abs());
                        }
                    }
                    if order >= 2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                best = best.max(pert.d2_qq(p, &q, a, b).abs());
                                best = best.max(pert.d2_pq(p, &q, a, b).abs());
                                best = best.max(pert.d2_pp(p, &q, a, b).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn unit_system(pert: FourierSeries3, eps: f64) -> NearlyIntegrableSystem {
        NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, eps, 0.5, 6).unwrap()
    }

    #[test]
    fn jet_of_pure_quadratic() {
        let sys = unit_system(FourierSeries3::new(), 0.0);
        let jet = sys.evaluate_jet(&Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.3, 5.0, -2.0));
        assert_relative_eq!(jet.value, 0.5);
        assert_relative_eq!(jet.grad_p, Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(jet.grad_q, Vector3::zeros());
        assert_relative_eq!(jet.hess_p, Matrix3::identity());
    }

    #[test]
    fn jet_of_cosine_at_stationary_angle() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, 0, 0], Poly::constant(1.0));
        let sys = unit_system(pert, 0.1);
        let jet = sys.evaluate_jet(&Vector3::zeros(), &Vector3::zeros());
        assert_relative_eq!(jet.value, 0.1);
        assert_relative_eq!(jet.grad_q, Vector3::zeros());
    }

    #[test]
    fn jet_with_momentum_coefficient() {
        // p2 * cos(q1) at p = (0,2,0), q1 = pi/3: H = 2 + 2 cos(pi/3) = 3.
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, 0, 0], Poly::var(1));
        let sys = unit_system(pert, 1.0);
        let p = Vector3::new(0.0, 2.0, 0.0);
        let q = Vector3::new(std::f64::consts::FRAC_PI_3, 0.0, 0.0);
        let jet = sys.evaluate_jet(&p, &q);
        assert_relative_eq!(jet.value, 3.0, epsilon = 1e-14);
        assert_relative_eq!(
            jet.grad_q.x,
            -2.0 * std::f64::consts::FRAC_PI_3.sin(),
            epsilon = 1e-14
        );
        // Cross-check against central differences at 1e-6 relative tolerance.
        let h = 1e-6;
        let fd = (sys.value(&p, &Vector3::new(q.x + h, 0.0, 0.0))
            - sys.value(&p, &Vector3::new(q.x - h, 0.0, 0.0)))
            / (2.0 * h);
        assert_relative_eq!(jet.grad_q.x, fd, max_relative = 1e-6);
    }

    #[test]
    fn jets_match_finite_differences_on_random_points() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, -1, 0], Poly::parse("0.5 + 0.2*p1").unwrap());
        pert.add_sin([0, 2, 1], Poly::parse("p3^2").unwrap());
        let sys = unit_system(pert, 0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let q = Vector3::new(
                rng.gen_range(0.0..6.28),
                rng.gen_range(0.0..6.28),
                rng.gen_range(0.0..6.28),
            );
            let jet = sys.evaluate_jet(&p, &q);
            let h = 1e-6;
            for i in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let fd = (sys.value(&pp, &q) - sys.value(&pm, &q)) / (2.0 * h);
                assert_relative_eq!(jet.grad_p[i], fd, max_relative = 1e-5, epsilon = 1e-9);
                let mut qp = q;
                let mut qm = q;
                qp[i] += h;
                qm[i] -= h;
                let fd = (sys.value(&p, &qp) - sys.value(&p, &qm)) / (2.0 * h);
                assert_relative_eq!(jet.grad_q[i], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fourier_sum_is_real_on_random_points() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([3, -2, 1], Poly::parse("p1*p2").unwrap());
        pert.add_sin([1, 1, 1], Poly::constant(0.25));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let q = Vector3::new(rng.gen::<f64>() * 6.28, rng.gen::<f64>() * 6.28, rng.gen::<f64>() * 6.28);
            assert!(pert.eval_complex(&p, &q).im.abs() < 1e-12);
        }
    }

    #[test]
    fn sup_norm_of_single_cosine() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, 0, 0], Poly::constant(1.0));
        let n = sup_norms(&pert, 2.0, 0, 1e-3);
        assert!((n - 1.0).abs() < 1e-2);
    }

    #[test]
    fn sup_norm_empty_is_zero() {
        assert_eq!(sup_norms(&FourierSeries3::new(), 2.0, 0, 1e-3), 0.0);
    }

    #[test]
    fn sup_norm_of_two_cosines_attained_at_zero() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, 0, 0], Poly::constant(1.0));
        pert.add_cos([0, 1, -1], Poly::constant(1.0));
        let n = sup_norms(&pert, 2.0, 0, 1e-4);
        assert!((n - 2.0).abs() < 1e-6, "sup = {n}");
    }

    #[test]
    fn sup_norm_monotone_under_adding_modes() {
        let mut a = FourierSeries3::new();
        a.add_cos([1, 0, 0], Poly::constant(0.7));
        let na = sup_norms(&a, 2.0, 1, 1e-3);
        a.add_cos([0, 2, 1], Poly::constant(0.4));
        let nb = sup_norms(&a, 2.0, 1, 1e-3);
        assert!(nb >= na);
    }

    #[test]
    fn convexity_bounds_identity_and_diagonal() {
        let h = ConvexHamiltonian::unit(2.0);
        let (m, mp) = h.convexity_bounds(Region::Ball(1.0)).unwrap();
        assert_relative_eq!(m, 1.0);
        assert_relative_eq!(mp, 1.0);

        let hd = ConvexHamiltonian::quadratic(
            Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
            2.0,
        );
        let (m, mp) = hd.convexity_bounds(Region::Ball(1.0)).unwrap();
        assert_relative_eq!(m, 1.0);
        assert_relative_eq!(mp, 3.0);
    }

    #[test]
    fn convexity_bounds_quartic() {
        // h = |p|^2/2 + 0.1 p1^4 on |p| <= 1: Hessian diag(1 + 1.2 p1^2, 1, 1).
        let poly = Poly::parse("0.5*(p1^2 + p2^2 + p3^2) + 0.1*p1^4").unwrap();
        let h = ConvexHamiltonian::polynomial(poly, 1.0);
        let (m, mp) = h.convexity_bounds(Region::Ball(1.0)).unwrap();
        assert_relative_eq!(m, 1.0, epsilon = 1e-12);
        assert_relative_eq!(mp, 2.2, epsilon = 1e-12);
    }

    #[test]
    fn non_convex_rejected() {
        let poly = Poly::parse("0.5*p1^2 - p2^2 + 0.5*p3^2").unwrap();
        let h = ConvexHamiltonian::polynomial(poly, 1.0);
        assert!(matches!(
            h.convexity_bounds(Region::Ball(1.0)),
            Err(ModelError::NotConvex(_))
        ));
    }

    #[test]
    fn degree_cap_enforced_at_construction() {
        let mut pert = FourierSeries3::new();
        pert.add_cos([1, 0, 0], Poly::parse("p1^5").unwrap());
        let r = NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, 0.1, 0.5, 6);
        assert!(matches!(r, Err(ModelError::Poly(_))));
    }

    #[test]
    fn level_set_containment_checked() {
        let r = NearlyIntegrableSystem::new(
            ConvexHamiltonian::unit(1.0),
            FourierSeries3::new(),
            0.0,
            5.0,
            6,
        );
        assert!(matches!(r, Err(ModelError::LevelSetEscapes { .. })));
    }
}
