//! Resonance circles on an energy level, double-resonance points with
//! periods controlled by Dirichlet approximation, the disc covering of the
//! circle, strong/weak classification and candidate paths between two
//! prescribed momenta.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::Fourier2;
use crate::lattice::{self, IVec3};
use crate::model::{ConvexHamiltonian, NearlyIntegrableSystem};

#[derive(Debug, Error)]
pub enum ResonanceError {
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error("resonance plane of k = {0:?} does not meet the level set")]
    NoIntersection(IVec3),
    #[error("continuation stalled after {steps} steps without closing the loop")]
    StallDetected { steps: usize },
    #[error("Newton did not converge at {0:?}")]
    NewtonDiverged(Vector3<f64>),
    #[error("kappa = {0} outside (0, 1/6)")]
    BadKappa(f64),
    #[error("no resonance circle within delta/2 = {half_delta} of {point:?} for |k| <= {k_search}")]
    NoResonanceWithinDelta {
        point: Vector3<f64>,
        half_delta: f64,
        k_search: i64,
    },
    #[error("single-resonance maximum is degenerate: |d2 Z| = {0} below tolerance")]
    DegenerateSingleResonance(f64),
}

pub const TOL_LEVEL: f64 = 1e-10;
pub const TOL_RES: f64 = 1e-10;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_CAP: usize = 50;

/// A single-resonance circle `{h = E, <k, grad h> = 0}` with an arc-length
/// parametrization. The sample list is closed: first point == last point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceCircle {
    pub k: IVec3,
    pub energy: f64,
    pub samples: Vec<Vector3<f64>>,
    pub cum_len: Vec<f64>,
}

impl ResonanceCircle {
    pub fn circumference(&self) -> f64 {
        *self.cum_len.last().unwrap()
    }

    /// Point at a given arc length (linear interpolation between samples).
    pub fn at_arclen(&self, s: f64) -> Vector3<f64> {
        let total = self.circumference();
        let mut s = s % total;
        if s < 0.0 {
            s += total;
        }
        let idx = match self
            .cum_len
            .binary_search_by(|x| x.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let i = idx.min(self.samples.len() - 2);
        let seg = self.cum_len[i + 1] - self.cum_len[i];
        let t = if seg > 0.0 { (s - self.cum_len[i]) / seg } else { 0.0 };
        self.samples[i] * (1.0 - t) + self.samples[i + 1] * t
    }

    pub fn min_distance(&self, p: &Vector3<f64>) -> f64 {
        self.samples
            .iter()
            .map(|s| (s - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn closest_arclen(&self, p: &Vector3<f64>) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, s) in self.samples.iter().enumerate() {
            let d = (s - p).norm();
            if d < best.0 {
                best = (d, self.cum_len[i]);
            }
        }
        best.1
    }
}

/// Newton corrector onto `{h = E, g = 0}` using the pseudo-inverse of the
/// 2x3 constraint Jacobian.
fn correct(
    h: &ConvexHamiltonian,
    k: &Vector3<f64>,
    energy: f64,
    start: &Vector3<f64>,
) -> Result<Vector3<f64>, ResonanceError> {
    let mut p = *start;
    for _ in 0..NEWTON_CAP {
        let hv = h.value(&p) - energy;
        let gv = k.dot(&h.grad(&p));
        if hv.abs() < NEWTON_TOL && gv.abs() < NEWTON_TOL {
            return Ok(p);
        }
        let j1 = h.grad(&p);
        let j2 = h.hess(&p) * k;
        // Solve J^t (J J^t)^{-1} r with J rows (j1, j2).
        let a = j1.dot(&j1);
        let b = j1.dot(&j2);
        let c = j2.dot(&j2);
        let det = a * c - b * b;
        if det.abs() < 1e-300 {
            break;
        }
        let r1 = hv;
        let r2 = gv;
        let l1 = (c * r1 - b * r2) / det;
        let l2 = (-b * r1 + a * r2) / det;
        p -= j1 * l1 + j2 * l2;
    }
    Err(ResonanceError::NewtonDiverged(*start))
}

/// Traces the circle `{h = E, <k, grad h> = 0}` by predictor-corrector
/// continuation and resamples it uniformly in arc length. Every returned
/// sample is Newton-polished back onto the constraint set.
pub fn trace_circle(
    h: &ConvexHamiltonian,
    energy: f64,
    k: &IVec3,
    n_samples: usize,
) -> Result<ResonanceCircle, ResonanceError> {
    if !lattice::totally_irreducible(k)? {
        return Err(lattice::LatticeError::NotIrreducible(*k).into());
    }
    let kf = Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64);
    // Start point: pick a direction in the plane normal to Hess(0) * k and
    // scale onto the level set, then correct.
    let n = (h.hess(&Vector3::zeros()) * kf).normalize();
    let a = if n.x.abs() < 0.9 {
        Vector3::x().cross(&n).normalize()
    } else {
        Vector3::y().cross(&n).normalize()
    };
    let mut start = None;
    'dirs: for frac in 0..8 {
        let th = frac as f64 / 8.0 * std::f64::consts::TAU;
        let dir = (a * th.cos() + n.cross(&a) * th.sin()).normalize();
        // Expand along the ray until the level is crossed.
        let mut s = 1e-3;
        while s < h.domain_radius * 2.0 {
            if h.value(&(dir * s)) >= energy {
                if let Ok(p) = correct(h, &kf, energy, &(dir * s)) {
                    start = Some(p);
                    break 'dirs;
                }
                break;
            }
            s *= 1.25;
        }
    }
    let p0 = start.ok_or(ResonanceError::NoIntersection(*k))?;

    // March.
    let mut raw = vec![p0];
    let mut p = p0;
    let scale = p0.norm().max(1.0);
    let max_steps = 10 * n_samples.max(64);
    let base_step = scale * 0.02;
    let mut total = 0.0;
    let mut closed = false;
    for step_idx in 0..max_steps {
        let tangent = h.grad(&p).cross(&(h.hess(&p) * kf));
        let t_norm = tangent.norm();
        if t_norm < 1e-14 {
            return Err(ResonanceError::StallDetected { steps: step_idx });
        }
        let t_hat = tangent / t_norm;
        let pred = p + t_hat * base_step;
        let corrected = correct(h, &kf, energy, &pred)?;
        total += (corrected - p).norm();
        p = corrected;
        raw.push(p);
        if step_idx > 8 && (p - p0).norm() < base_step {
            closed = true;
            break;
        }
    }
    if !closed {
        return Err(ResonanceError::StallDetected { steps: max_steps });
    }
    raw.push(p0);
    let _ = total;

    // Arc-length resample to n_samples segments, polishing each point.
    let mut cum = vec![0.0];
    for w in raw.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let circ = *cum.last().unwrap();
    let mut samples = Vec::with_capacity(n_samples + 1);
    for i in 0..n_samples {
        let s = circ * i as f64 / n_samples as f64;
        let idx = match cum.binary_search_by(|x| x.partial_cmp(&s).unwrap()) {
            Ok(j) => j,
            Err(j) => j.saturating_sub(1),
        }
        .min(raw.len() - 2);
        let seg = cum[idx + 1] - cum[idx];
        let t = if seg > 0.0 { (s - cum[idx]) / seg } else { 0.0 };
        let guess = raw[idx] * (1.0 - t) + raw[idx + 1] * t;
        samples.push(correct(h, &kf, energy, &guess)?);
    }
    samples.push(samples[0]);
    let mut cum_len = vec![0.0];
    for w in samples.windows(2) {
        cum_len.push(cum_len.last().unwrap() + (w[1] - w[0]).norm());
    }
    Ok(ResonanceCircle { k: *k, energy, samples, cum_len })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strength {
    Strong,
    Weak,
    Unclassified,
}

/// A double-resonance point on a circle: the second integer resonance, its
/// integer period on the sup-normalized frequency square, and the covering
/// disc radius `T^{-1} eps^kappa`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoubleResonance {
    pub p_dd: Vector3<f64>,
    pub k_prime: IVec3,
    pub k_second: IVec3,
    /// Second resonance in the rotated frame, always of the form (0, a, b).
    pub kpp_bar: IVec3,
    pub period: i64,
    pub freq: Vector3<f64>,
    pub disc_radius: f64,
    pub strength: Strength,
    /// Classification diagnostic: coupling C^1 size / single-resonance
    /// curvature. Below theta means weak.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub found: Vec<DoubleResonance>,
    pub skipped: Vec<String>,
    pub t_max: f64,
}

/// All double resonances on `circle` whose period does not exceed
/// `K* eps^{-(1-3kappa)/3}`.
///
/// Rational directions are enumerated on the four sides of the unit square
/// in the rotated frequency plane: every primitive integer pair `(u2, u3)`
/// with `max(|u2|, |u3|) <= T_max` is one square point of period
/// `max(|u2|, |u3|)`; a Newton solve places the corresponding point on the
/// circle. Results are sorted by `(T, k'' lex)` so parallel enumeration stays
/// deterministic.
pub fn find_double_resonances(
    h: &ConvexHamiltonian,
    circle: &ResonanceCircle,
    eps: f64,
    kappa: f64,
    k_star_const: f64,
) -> Result<EnumerationReport, ResonanceError> {
    if !(0.0 < kappa && kappa < 1.0 / 6.0) {
        return Err(ResonanceError::BadKappa(kappa));
    }
    let t_max = k_star_const * eps.powf(-(1.0 - 3.0 * kappa) / 3.0);
    let triple = lattice::unimodular_complete(&circle.k)?;
    let m0 = lattice::to_f64(&triple.m0());
    let m0_t = lattice::to_f64(&triple.m0_t);

    let mut found = Vec::new();
    let mut skipped = Vec::new();
    let t_cap = t_max.floor() as i64;
    for u2 in -t_cap..=t_cap {
        for u3 in -t_cap..=t_cap {
            if (u2, u3) == (0, 0) {
                continue;
            }
            let t = u2.abs().max(u3.abs());
            if t as f64 > t_max {
                continue;
            }
            if num_integer::gcd(u2.abs(), u3.abs()) != 1 {
                continue;
            }
            // Rotated-frame second resonance orthogonal to (u2, u3), with a
            // canonical sign.
            let mut kpp_bar = [0i64, -u3, u2];
            if kpp_bar[1] < 0 || (kpp_bar[1] == 0 && kpp_bar[2] < 0) {
                kpp_bar = [0, -kpp_bar[1], -kpp_bar[2]];
            }
            debug_assert_eq!(kpp_bar[1].abs().max(kpp_bar[2].abs()), t);
            match solve_direction(h, circle, &m0, Vector2::new(u2 as f64, u3 as f64)) {
                Ok(p_dd) => {
                    let freq = h.grad(&p_dd);
                    let k_second = lattice::mat_mul_vec(&triple.m0_t, &kpp_bar);
                    debug_assert!(k_second.iter().zip(freq.iter()).map(|(a, b)| *a as f64 * b).sum::<f64>().abs() < 1e-6);
                    found.push(DoubleResonance {
                        p_dd,
                        k_prime: circle.k,
                        k_second,
                        kpp_bar,
                        period: t,
                        freq,
                        disc_radius: eps.powf(kappa) / t as f64,
                        strength: Strength::Unclassified,
                        margin: None,
                    });
                }
                Err(e) => skipped.push(format!("direction ({u2},{u3}): {e}")),
            }
        }
    }
    found.sort_by(|a, b| {
        (a.period, a.k_second)
            .partial_cmp(&(b.period, b.k_second))
            .unwrap()
    });
    let _ = m0_t;
    Ok(EnumerationReport { found, skipped, t_max })
}

/// Newton solve for the circle point whose rotated frequency is parallel to
/// `(0, d2, d3)` with positive orientation.
fn solve_direction(
    h: &ConvexHamiltonian,
    circle: &ResonanceCircle,
    m0: &Matrix3<f64>,
    dir: Vector2<f64>,
) -> Result<Vector3<f64>, ResonanceError> {
    let k_rows = (m0.row(0).transpose(), m0.row(1).transpose(), m0.row(2).transpose());
    // Seed: sample with the best aligned rotated frequency.
    let mut best = (f64::NEG_INFINITY, circle.samples[0]);
    for s in &circle.samples {
        let w = m0 * h.grad(s);
        let plane = Vector2::new(w.y, w.z);
        let c = plane.normalize().dot(&dir.normalize());
        if c > best.0 {
            best = (c, *s);
        }
    }
    let mut p = best.1;
    for _ in 0..NEWTON_CAP {
        let g = h.grad(&p);
        let w = m0 * g;
        let f = Vector3::new(
            h.value(&p) - circle.energy,
            w.x,
            dir.y * w.y - dir.x * w.z,
        );
        if f.norm() < NEWTON_TOL {
            let plane = Vector2::new(w.y, w.z);
            if plane.dot(&dir) <= 0.0 {
                return Err(ResonanceError::NewtonDiverged(best.1));
            }
            return Ok(p);
        }
        let hess = h.hess(&p);
        let j = Matrix3::from_rows(&[
            g.transpose(),
            (hess * k_rows.0).transpose(),
            (hess * (k_rows.1 * dir.y - k_rows.2 * dir.x)).transpose(),
        ]);
        match j.lu().solve(&f) {
            Some(dp) => p -= dp,
            None => return Err(ResonanceError::NewtonDiverged(best.1)),
        }
    }
    Err(ResonanceError::NewtonDiverged(best.1))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveringReport {
    pub discs: Vec<(Vector3<f64>, f64)>,
    /// Arc-length positions of check samples not inside any disc.
    pub uncovered_samples: Vec<f64>,
    pub max_period: i64,
    pub n_checked: usize,
    /// Empirical constant relating frequency-circle chords to unit-square
    /// chords, and the largest radial scale to the square.
    pub d_empirical: f64,
    pub lambda_max: f64,
    /// Left side of the smallness condition `eps^{(1-3k)/3 - k} <= m K*/(d L^2)`.
    pub eps_condition_lhs: f64,
    pub eps_condition_rhs: f64,
}

impl CoveringReport {
    pub fn is_covered(&self) -> bool {
        self.uncovered_samples.is_empty()
    }
}

/// Builds the disc system of the admitted double resonances and verifies a
/// dense sample of the circle is covered. An uncovered outcome is a valid
/// diagnostic (the construction only works below a smallness threshold), so
/// it is reported, not raised.
pub fn dirichlet_cover(
    h: &ConvexHamiltonian,
    circle: &ResonanceCircle,
    eps: f64,
    kappa: f64,
    k_star_const: f64,
    n_check: usize,
) -> Result<CoveringReport, ResonanceError> {
    let report = find_double_resonances(h, circle, eps, kappa, k_star_const)?;
    let discs: Vec<(Vector3<f64>, f64)> = report
        .found
        .iter()
        .map(|dr| (dr.p_dd, dr.disc_radius))
        .collect();
    let mut uncovered = Vec::new();
    let circ = circle.circumference();
    for i in 0..n_check {
        let s = circ * i as f64 / n_check as f64;
        let p = circle.at_arclen(s);
        let inside = discs.iter().any(|(c, r)| (p - c).norm() <= *r);
        if !inside {
            uncovered.push(s);
        }
    }
    // Empirical geometry constants: map circle samples to the rotated
    // frequency plane and to the unit square, then compare chords.
    let triple = lattice::unimodular_complete(&circle.k)?;
    let m0 = lattice::to_f64(&triple.m0());
    let mut d_emp = 0.0f64;
    let mut lambda_max = 0.0f64;
    let mut prev: Option<(Vector2<f64>, Vector2<f64>)> = None;
    for s in &circle.samples {
        let w = m0 * h.grad(s);
        let plane = Vector2::new(w.y, w.z);
        let sup = plane.x.abs().max(plane.y.abs());
        if sup == 0.0 {
            continue;
        }
        // lambda scales a square point back to the frequency circle.
        let square = plane / sup;
        lambda_max = lambda_max.max(sup);
        if let Some((pw, ps)) = prev {
            let dw = (plane - pw).norm();
            let ds = (square - ps).norm();
            if ds > 1e-12 {
                d_emp = d_emp.max(dw / ds);
            }
        }
        prev = Some((plane, square));
    }
    let (m, _) = h.convexity_bounds(crate::model::Region::LevelShell {
        energy: circle.energy,
        width: 0.05 * circle.energy.abs().max(1.0),
    }).map_err(|_| ResonanceError::NoIntersection(circle.k))?;
    let lhs = eps.powf((1.0 - 3.0 * kappa) / 3.0 - kappa);
    let rhs = m * k_star_const / (d_emp.max(1e-12) * lambda_max.powi(2));
    Ok(CoveringReport {
        discs,
        uncovered_samples: uncovered,
        max_period: report.found.iter().map(|d| d.period).max().unwrap_or(0),
        n_checked: n_check,
        d_empirical: d_emp,
        lambda_max,
        eps_condition_lhs: lhs,
        eps_condition_rhs: rhs,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassifyThresholds {
    /// Weak iff coupling C^1 size < theta * single-resonance curvature.
    pub theta: f64,
    pub curvature_tol: f64,
    pub grid: usize,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        ClassifyThresholds { theta: 0.25, curvature_tol: 1e-8, grid: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyDiagnostics {
    pub coupling_c1: f64,
    pub single_curvature: f64,
    /// coupling_c1 / single_curvature; weak iff below theta.
    pub margin: f64,
}

/// Splits the resonant part of `P` at the double resonance into the single-
/// resonance series (modes parallel to k') and the coupling series (modes
/// with a nonzero k'' component), both as functions of the two resonant
/// angles frozen at `p''`.
pub fn resonant_split_at(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
) -> (Fourier2, Fourier2) {
    // Stored 3-D modes already appear with both signs, so each pair must be
    // inserted once: keep the lexicographically positive representative.
    let mut single = Fourier2::new();
    let mut coupling = Fourier2::new();
    let kp = dr.k_prime;
    let ks = dr.k_second;
    for (k, c) in sys.pert.modes() {
        if let Some((j, l)) = span_coords(k, &kp, &ks) {
            if (j, l) < (-j, -l) {
                continue;
            }
            let amp = c.eval(&dr.p_dd);
            if l == 0 && j != 0 {
                single.add_mode((j, 0), amp);
            } else if l != 0 {
                coupling.add_mode((j, l), amp);
            }
        }
    }
    (single, coupling)
}

/// Integer coordinates `(j, l)` with `k = j k' + l k''`, if they exist.
pub fn span_coords(k: &IVec3, kp: &IVec3, ks: &IVec3) -> Option<(i64, i64)> {
    // Solve the 3x2 integer system exactly via cross products.
    let cross = [
        kp[1] * ks[2] - kp[2] * ks[1],
        kp[2] * ks[0] - kp[0] * ks[2],
        kp[0] * ks[1] - kp[1] * ks[0],
    ];
    // k must be orthogonal to kp x ks to lie in the span.
    if k[0] * cross[0] + k[1] * cross[1] + k[2] * cross[2] != 0 {
        return None;
    }
    // Find a 2x2 subsystem with nonzero determinant.
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let det = kp[a] * ks[b] - kp[b] * ks[a];
        if det != 0 {
            let j_num = k[a] * ks[b] - k[b] * ks[a];
            let l_num = kp[a] * k[b] - kp[b] * k[a];
            if j_num % det != 0 || l_num % det != 0 {
                return None;
            }
            let (j, l) = (j_num / det, l_num / det);
            // Verify the remaining equation.
            if (0..3).all(|i| k[i] == j * kp[i] + l * ks[i]) {
                return Some((j, l));
            }
            return None;
        }
    }
    None
}

/// Strong/weak classification: weak iff the C^1 size of the coupling term at
/// `p''` is below `theta` times the curvature of the single-resonance
/// potential at its global maximum.
pub fn classify(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
    thresholds: &ClassifyThresholds,
) -> Result<(Strength, ClassifyDiagnostics), ResonanceError> {
    let (single, coupling) = resonant_split_at(sys, dr);
    // Curvature of the single-resonance term at its global maximum.
    let (_, argmax) = single.max_on_grid(thresholds.grid);
    let d2 = single.hessian(&argmax)[(0, 0)];
    let d_p = d2.abs();
    if single.is_zero() || d_p < thresholds.curvature_tol {
        return Err(ResonanceError::DegenerateSingleResonance(d_p));
    }
    let coupling_c1 = coupling.c1_size(thresholds.grid);
    let margin = coupling_c1 / d_p;
    let strength = if margin < thresholds.theta {
        Strength::Weak
    } else {
        Strength::Strong
    };
    Ok((
        strength,
        ClassifyDiagnostics { coupling_c1, single_curvature: d_p, margin },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatePath {
    pub k_star: IVec3,
    pub k_target: IVec3,
    pub circle_star: ResonanceCircle,
    pub circle_target: ResonanceCircle,
    /// Concatenated polyline from near p_star to near p_target.
    pub polyline: Vec<Vector3<f64>>,
}

/// Finds totally irreducible `k` with `|k| <= k_search` whose circles pass
/// closest to the two endpoints, and joins the endpoints through a circle
/// intersection when the two circles differ.
pub fn candidate_path(
    sys: &NearlyIntegrableSystem,
    p_star: &Vector3<f64>,
    p_target: &Vector3<f64>,
    k_search: i64,
    delta: f64,
) -> Result<CandidatePath, ResonanceError> {
    let h = &sys.h;
    let energy = sys.energy;
    let mut candidates: Vec<IVec3> = Vec::new();
    for a in -k_search..=k_search {
        for b in -k_search..=k_search {
            for c in -k_search..=k_search {
                let k = [a, b, c];
                if k == [0, 0, 0] {
                    continue;
                }
                // Canonical sign: first nonzero entry positive.
                let first = *k.iter().find(|x| **x != 0).unwrap();
                if first < 0 {
                    continue;
                }
                if totally_irreducible(&k) {
                    candidates.push(k);
                }
            }
        }
    }
    let pick = |p: &Vector3<f64>,
                other: &Vector3<f64>|
     -> Result<(IVec3, ResonanceCircle, f64), ResonanceError> {
        // Rank by the first-order residual, trace the best few, then measure
        // the true distance. Several circles can pass exactly through an
        // endpoint; ties are broken by closeness to the other endpoint, so a
        // circle carrying both endpoints wins when one exists.
        let g = h.grad(p);
        let mut ranked: Vec<(f64, IVec3)> = candidates
            .iter()
            .map(|k| {
                let kf = Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64);
                ((kf.dot(&g)).abs() / kf.norm(), *k)
            })
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best: Option<(f64, f64, IVec3, ResonanceCircle)> = None;
        for (_, k) in ranked.iter().take(12) {
            if let Ok(circle) = trace_circle(h, energy, k, 256) {
                let d = circle.min_distance(p);
                let d_other = circle.min_distance(other);
                // Distances are sampled at the tracing resolution; anything
                // within a sample spacing counts as a tie.
                let tie = circle.circumference() / 256.0;
                let better = match &best {
                    None => true,
                    Some((bd, bo, _, _)) => d + tie < *bd || (d < bd + tie && d_other < *bo),
                };
                if better {
                    best = Some((d, d_other, *k, circle));
                }
            }
        }
        let (d, _, k, circle) = best.ok_or(ResonanceError::NoIntersection([0, 0, 0]))?;
        if d > delta / 2.0 {
            return Err(ResonanceError::NoResonanceWithinDelta {
                point: *p,
                half_delta: delta / 2.0,
                k_search,
            });
        }
        Ok((k, circle, d))
    };
    let (k_star, circle_star, _) = pick(p_star, p_target)?;
    let (k_target, circle_target, _) = pick(p_target, p_star)?;

    let polyline = if k_star == k_target {
        arc_between(&circle_star, p_star, p_target)
    } else {
        // Intersection: solve {h = E, <k1, grad h> = 0, <k2, grad h> = 0}.
        let inter = circle_intersection(h, energy, &circle_star, &circle_target)?;
        let mut path = arc_between(&circle_star, p_star, &inter);
        path.extend(arc_between(&circle_target, &inter, p_target));
        path
    };
    Ok(CandidatePath { k_star, k_target, circle_star, circle_target, polyline })
}

fn totally_irreducible(k: &IVec3) -> bool {
    lattice::totally_irreducible(k).unwrap_or(false)
}

fn arc_between(circle: &ResonanceCircle, a: &Vector3<f64>, b: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let sa = circle.closest_arclen(a);
    let sb = circle.closest_arclen(b);
    let circ = circle.circumference();
    let forward = (sb - sa).rem_euclid(circ);
    let (start, len, dir) = if forward <= circ - forward {
        (sa, forward, 1.0)
    } else {
        (sa, circ - forward, -1.0)
    };
    let n = 64;
    (0..=n)
        .map(|i| circle.at_arclen(start + dir * len * i as f64 / n as f64))
        .collect()
}

fn circle_intersection(
    h: &ConvexHamiltonian,
    energy: f64,
    c1: &ResonanceCircle,
    c2: &ResonanceCircle,
) -> Result<Vector3<f64>, ResonanceError> {
    let k1 = Vector3::new(c1.k[0] as f64, c1.k[1] as f64, c1.k[2] as f64);
    let k2 = Vector3::new(c2.k[0] as f64, c2.k[1] as f64, c2.k[2] as f64);
    // Seed at the closest sample pair.
    let mut best = (f64::INFINITY, c1.samples[0]);
    for a in &c1.samples {
        let d = c2.min_distance(a);
        if d < best.0 {
            best = (d, *a);
        }
    }
    let mut p = best.1;
    for _ in 0..NEWTON_CAP {
        let g = h.grad(&p);
        let f = Vector3::new(h.value(&p) - energy, k1.dot(&g), k2.dot(&g));
        if f.norm() < NEWTON_TOL {
            return Ok(p);
        }
        let hess = h.hess(&p);
        let j = Matrix3::from_rows(&[
            g.transpose(),
            (hess * k1).transpose(),
            (hess * k2).transpose(),
        ]);
        match j.lu().solve(&f) {
            Some(dp) => p -= dp,
            None => return Err(ResonanceError::NewtonDiverged(best.1)),
        }
    }
    Err(ResonanceError::NewtonDiverged(best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::FourierSeries3;
    use crate::poly::Poly;
    use approx::assert_relative_eq;

    fn unit_h() -> ConvexHamiltonian {
        ConvexHamiltonian::unit(3.0)
    }

    #[test]
    fn circle_on_sphere_diagonal_resonance() {
        let c = trace_circle(&unit_h(), 0.5, &[1, 1, 1], 256).unwrap();
        for s in &c.samples {
            assert!((s.norm_squared() / 2.0 - 0.5).abs() < TOL_LEVEL, "level residual");
            assert!((s.x + s.y + s.z).abs() < TOL_RES, "resonance residual");
        }
        assert!((c.samples[0] - c.samples[c.samples.len() - 1]).norm() < 1e-12);
        // Great circle of radius 1 has circumference 2 pi.
        assert_relative_eq!(c.circumference(), std::f64::consts::TAU, epsilon = 1e-3);
    }

    #[test]
    fn circle_axis_resonance() {
        let c = trace_circle(&unit_h(), 0.5, &[1, 0, 0], 128).unwrap();
        for s in &c.samples {
            assert!(s.x.abs() < 1e-9);
            assert_relative_eq!(s.y * s.y + s.z * s.z, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn circle_anisotropic_matches_parametric_oracle() {
        let q = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        let h = ConvexHamiltonian::quadratic(q, 3.0);
        let c = trace_circle(&h, 1.0, &[1, 1, 1], 512).unwrap();
        for s in &c.samples {
            assert!((h.value(s) - 1.0).abs() < 1e-9);
            let g = h.grad(s);
            assert!((g.x + g.y + g.z).abs() < 1e-9);
        }
        // Independent oracle: the circle is an exact ellipse. Basis of the
        // plane {<Qk, p> = 0}, reduced 2x2 form, dense parametric length.
        let n = (q * Vector3::new(1.0, 1.0, 1.0)).normalize();
        let e1 = Vector3::x().cross(&n).normalize();
        let e2 = n.cross(&e1);
        let a11 = (q * e1).dot(&e1);
        let a12 = (q * e1).dot(&e2);
        let a22 = (q * e2).dot(&e2);
        let steps = 1_000_000usize;
        let mut len = 0.0;
        let mut prev: Option<Vector3<f64>> = None;
        let mut first = None;
        for i in 0..=steps {
            let th = i as f64 / steps as f64 * std::f64::consts::TAU;
            let (ct, st) = (th.cos(), th.sin());
            let quad = 0.5 * (a11 * ct * ct + 2.0 * a12 * ct * st + a22 * st * st);
            let r = (1.0 / quad).sqrt();
            let p = (e1 * ct + e2 * st) * r;
            if first.is_none() {
                first = Some(p);
            }
            if let Some(pr) = prev {
                len += (p - pr).norm();
            }
            prev = Some(p);
        }
        assert_relative_eq!(c.circumference(), len, epsilon = 1e-4);
    }

    #[test]
    fn axis_double_resonances() {
        let h = unit_h();
        let c = trace_circle(&h, 0.5, &[1, 0, 0], 256).unwrap();
        let rep = find_double_resonances(&h, &c, 1e-3, 0.15, 1.0).unwrap();
        // (0, 0, +-1) must appear: freq (0, 0, +-1), second resonance (0,1,0).
        let north = rep
            .found
            .iter()
            .find(|d| (d.p_dd - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
        assert!(north.is_some());
        let north = north.unwrap();
        assert_eq!(north.period, 1);
        for d in &rep.found {
            assert!((d.p_dd.norm_squared() / 2.0 - 0.5).abs() < 1e-9);
            assert!(d.freq.dot(&Vector3::new(1.0, 0.0, 0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_double_resonance_hand_solve() {
        // E = 1, k' = (1,0,0), k'' = (0,1,-1): p'' = (0,1,1), freq (0,1,1), T = 1.
        let h = unit_h();
        let c = trace_circle(&h, 1.0, &[1, 0, 0], 256).unwrap();
        let rep = find_double_resonances(&h, &c, 1e-3, 0.15, 1.0).unwrap();
        let hit = rep
            .found
            .iter()
            .find(|d| (d.p_dd - Vector3::new(0.0, 1.0, 1.0)).norm() < 1e-10)
            .expect("expected (0,1,1)");
        assert_eq!(hit.period, 1);
        assert_eq!(hit.k_second[0], 0);
        assert_eq!((hit.k_second[1] + hit.k_second[2]), 0, "k'' ~ (0,1,-1)");
        let opposite = rep
            .found
            .iter()
            .any(|d| (d.p_dd - Vector3::new(0.0, -1.0, -1.0)).norm() < 1e-10);
        assert!(opposite);
    }

    #[test]
    fn period_budget_matches_exponent() {
        // eps = 1e-4, kappa = 0.15, K* = 1: T <= 10^{0.7333} ~ 5.41.
        let h = unit_h();
        let c = trace_circle(&h, 0.5, &[1, 0, 0], 128).unwrap();
        let rep = find_double_resonances(&h, &c, 1e-4, 0.15, 1.0).unwrap();
        assert!((rep.t_max - 5.41).abs() < 0.01);
        let max_t = rep.found.iter().map(|d| d.period).max().unwrap();
        assert_eq!(max_t, 5);
    }

    #[test]
    fn periods_agree_with_rationalized_frequency() {
        let h = unit_h();
        let c = trace_circle(&h, 0.5, &[1, 1, 1], 128).unwrap();
        let rep = find_double_resonances(&h, &c, 1e-3, 0.15, 1.0).unwrap();
        for d in &rep.found {
            // Rationalize: freq is parallel to the primitive k' x k''.
            let u = [
                d.k_prime[1] * d.k_second[2] - d.k_prime[2] * d.k_second[1],
                d.k_prime[2] * d.k_second[0] - d.k_prime[0] * d.k_second[2],
                d.k_prime[0] * d.k_second[1] - d.k_prime[1] * d.k_second[0],
            ];
            let g = num_integer::gcd(num_integer::gcd(u[0].abs(), u[1].abs()), u[2].abs());
            let u = [u[0] / g, u[1] / g, u[2] / g];
            // Check parallel to the measured frequency.
            let uf = Vector3::new(u[0] as f64, u[1] as f64, u[2] as f64);
            assert!(uf.cross(&d.freq).norm() < 1e-7 * uf.norm() * d.freq.norm().max(1.0));
            // Sup-normalize in the rotated frame and take the exact period.
            let triple = lattice::unimodular_complete(&d.k_prime).unwrap();
            let ub = lattice::mat_mul_vec(&triple.m0_inv_t(), &u);
            // rotate modes uses M0^{-t}; frequencies rotate by M0. Use M0.
            let m0 = triple.m0();
            let wb = lattice::mat_mul_vec(&m0, &u);
            let _ = ub;
            assert_eq!(wb[0], 0);
            let sup = wb[1].abs().max(wb[2].abs());
            let t = lattice::rational_period(&[
                num_rational::Rational64::new(wb[0], sup),
                num_rational::Rational64::new(wb[1], sup),
                num_rational::Rational64::new(wb[2], sup),
            ])
            .unwrap();
            assert_eq!(t, d.period, "period mismatch at {:?}", d.k_second);
        }
    }

    #[test]
    fn covering_diagonal_small_eps() {
        let h = unit_h();
        let c = trace_circle(&h, 0.5, &[1, 1, 1], 512).unwrap();
        let rep = dirichlet_cover(&h, &c, 1e-3, 0.15, 1.0, 2000).unwrap();
        assert!(rep.is_covered(), "{} uncovered", rep.uncovered_samples.len());
    }

    #[test]
    fn covering_fails_when_no_periods_admitted() {
        // K* so small that no period passes: everything uncovered.
        let h = unit_h();
        let c = trace_circle(&h, 0.5, &[1, 1, 1], 256).unwrap();
        let rep = dirichlet_cover(&h, &c, 1e-3, 0.15, 0.01, 500).unwrap();
        assert!(!rep.is_covered());
        assert!(rep.discs.is_empty());
    }

    #[test]
    fn covering_single_huge_disc() {
        // One T = 1 disc with radius beyond the circumference covers trivially:
        // eps close to 1 makes radius eps^kappa ~ 1 against a tiny circle.
        let h = ConvexHamiltonian::quadratic(Matrix3::identity() * 1.0, 3.0);
        let c = trace_circle(&h, 0.02, &[1, 0, 0], 128).unwrap();
        let rep = dirichlet_cover(&h, &c, 0.9, 0.15, 1.0, 500).unwrap();
        assert!(rep.is_covered());
    }

    fn sys_with(modes: Vec<([i64; 3], f64)>, eps: f64, energy: f64) -> NearlyIntegrableSystem {
        let mut pert = FourierSeries3::new();
        for (k, a) in modes {
            pert.add_cos(k, Poly::constant(a));
        }
        NearlyIntegrableSystem::new(unit_h(), pert, eps, energy, 6).unwrap()
    }

    fn dr_at(sys: &NearlyIntegrableSystem, p: Vector3<f64>, ks: IVec3) -> DoubleResonance {
        let kpb = {
            let triple = lattice::unimodular_complete(&[1, 0, 0]).unwrap();
            lattice::mat_mul_vec(&triple.m0_inv_t(), &ks)
        };
        DoubleResonance {
            p_dd: p,
            k_prime: [1, 0, 0],
            k_second: ks,
            kpp_bar: kpb,
            period: kpb[1].abs().max(kpb[2].abs()),
            freq: sys.h.grad(&p),
            disc_radius: 0.1,
            strength: Strength::Unclassified,
            margin: None,
        }
    }

    #[test]
    fn classify_no_coupling_is_weak() {
        let sys = sys_with(vec![([1, 0, 0], 1.0)], 1e-3, 1.0);
        let dr = dr_at(&sys, Vector3::new(0.0, 1.0, 1.0), [0, 1, -1]);
        let (s, diag) = classify(&sys, &dr, &ClassifyThresholds::default()).unwrap();
        assert_eq!(s, Strength::Weak);
        assert!(diag.margin < 1e-12);
    }

    #[test]
    fn classify_strong_coupling() {
        let sys = sys_with(vec![([1, 0, 0], 1.0), ([0, 1, -1], 0.9)], 1e-3, 1.0);
        let dr = dr_at(&sys, Vector3::new(0.0, 1.0, 1.0), [0, 1, -1]);
        let th = ClassifyThresholds { theta: 0.5, ..Default::default() };
        let (s, diag) = classify(&sys, &dr, &th).unwrap();
        assert_eq!(s, Strength::Strong);
        assert_relative_eq!(diag.single_curvature, 1.0, epsilon = 1e-6);
        assert_relative_eq!(diag.coupling_c1, 0.9, epsilon = 1e-6);
    }

    #[test]
    fn classify_tail_mode_is_weak() {
        // |P_k| ~ ||k||^{-6} for k'' = (0, 8, -5): coupling 13^{-6} << 1.
        let tail = 13.0f64.powi(-6);
        let sys = sys_with(vec![([1, 0, 0], 1.0), ([0, 8, -5], tail)], 1e-3, 1.0);
        // p'' with freq orthogonal to (1,0,0) and (0,8,-5): (0,5,8)/sqrt scale.
        let dir = Vector3::new(0.0, 5.0, 8.0).normalize() * (2.0f64).sqrt();
        let dr = dr_at(&sys, dir, [0, 8, -5]);
        let (s, diag) = classify(&sys, &dr, &ClassifyThresholds::default()).unwrap();
        assert_eq!(s, Strength::Weak);
        assert!(diag.margin < 1e-4);
    }

    #[test]
    fn classify_scale_invariance() {
        let mut rng_scale = [0.37f64, 2.0, 11.5];
        for lambda in rng_scale.iter_mut() {
            let sys = sys_with(vec![([1, 0, 0], *lambda), ([0, 1, -1], 0.9 * *lambda)], 1e-3, 1.0);
            let dr = dr_at(&sys, Vector3::new(0.0, 1.0, 1.0), [0, 1, -1]);
            let (s, diag) = classify(&sys, &dr, &ClassifyThresholds::default()).unwrap();
            assert_eq!(s, Strength::Strong);
            assert_relative_eq!(diag.margin, 0.9, epsilon = 1e-6);
        }
    }

    #[test]
    fn classify_degenerate_single_resonance() {
        let sys = sys_with(vec![([0, 1, -1], 0.5)], 1e-3, 1.0);
        let dr = dr_at(&sys, Vector3::new(0.0, 1.0, 1.0), [0, 1, -1]);
        assert!(matches!(
            classify(&sys, &dr, &ClassifyThresholds::default()),
            Err(ResonanceError::DegenerateSingleResonance(_))
        ));
    }

    #[test]
    fn span_coordinates() {
        assert_eq!(span_coords(&[1, 0, 0], &[1, 0, 0], &[0, 1, -1]), Some((1, 0)));
        assert_eq!(span_coords(&[0, 2, -2], &[1, 0, 0], &[0, 1, -1]), Some((0, 2)));
        assert_eq!(span_coords(&[1, -1, 0], &[1, 0, 0], &[0, 1, -1]), None);
    }

    #[test]
    fn path_single_circle() {
        let sys = sys_with(vec![], 0.0, 0.5);
        // Generic points of the circle {p1 = 0}: no other |k| <= 2 circle
        // passes through them, so both endpoints pick k = (1, 0, 0).
        let a = Vector3::new(0.0, 0.3f64.cos(), 0.3f64.sin());
        let b = Vector3::new(0.0, 1.1f64.cos(), 1.1f64.sin());
        let path = candidate_path(&sys, &a, &b, 2, 0.2).unwrap();
        assert_eq!(path.k_star, path.k_target);
        assert_eq!(path.k_star, [1, 0, 0]);
        // Endpoint accuracy is limited by the circle sampling resolution.
        let spacing = path.circle_star.circumference() / 256.0;
        assert!((path.polyline.first().unwrap() - a).norm() < 2.0 * spacing);
        assert!((path.polyline.last().unwrap() - b).norm() < 2.0 * spacing);
    }

    #[test]
    fn path_coincident_endpoints() {
        let sys = sys_with(vec![], 0.0, 0.5);
        let a = Vector3::new(0.0, 0.6f64.cos(), 0.6f64.sin());
        let path = candidate_path(&sys, &a, &a, 2, 0.2).unwrap();
        assert_eq!(path.k_star, path.k_target);
    }

    #[test]
    fn path_through_intersection() {
        let sys = sys_with(vec![], 0.0, 0.5);
        // Perturb endpoints slightly off the axes so distinct circles win.
        let a = Vector3::new(0.0, 0.9486832980505138, 0.31622776601683794); // on p1=0
        let b = Vector3::new(0.9486832980505138, 0.0, 0.31622776601683794); // on p2=0
        let path = candidate_path(&sys, &a, &b, 1, 0.3).unwrap();
        assert_ne!(path.k_star, path.k_target);
        // Path passes near an intersection of the two circles (p1 = p2 = 0).
        let hits = path
            .polyline
            .iter()
            .any(|p| p.x.abs() < 1e-6 && p.y.abs() < 1e-6);
        assert!(hits);
    }

    #[test]
    fn path_rejects_when_search_too_small() {
        let sys = sys_with(vec![], 0.0, 0.5);
        // This level-set point is at least ~0.07 from every |k| <= 1 circle,
        // which exceeds delta / 2 = 0.0075.
        let p = Vector3::new(0.9, 0.35, 0.25).normalize();
        let r = candidate_path(&sys, &p, &p, 1, 0.015);
        assert!(matches!(r, Err(ResonanceError::NoResonanceWithinDelta { .. })));
    }
}
