//! Reduction of the system at a double resonance to a planar mechanical
//! normal form `G(x, y, theta) = <B y, y>/2 - V(x1, |k''| x2) + R`, with every
//! stage of the transform chain invertible and the remainder measured, not
//! assumed.
//!
//! Stages: unimodular rotation aligning the first resonance, one averaging
//! step generated by the solution of the homological equation, the rational
//! shear aligning the second resonance, the sqrt(eps) rescaling around the
//! double-resonance momentum, and the energetic reduction solving
//! `G_tilde(x, y, -G, theta) = 0` for the reduced Hamiltonian.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::{Fourier2, FourierSeries3};
use crate::lattice::{self, ShearBranch, ShearTransform, UnimodularTriple};
use crate::model::NearlyIntegrableSystem;
use crate::resonance::DoubleResonance;

#[derive(Debug, Error)]
pub enum NormalFormError {
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error("resonant denominator {denom} vanished on a kept mode {mode:?}")]
    ResonantDivision { mode: [i64; 3], denom: f64 },
    #[error("energetic reduction Newton diverged at x={x:?}, y={y:?}, theta={theta}")]
    NewtonDiverged { x: Vector2<f64>, y: Vector2<f64>, theta: f64 },
    #[error("delta' = {0} outside (0, 1/2)")]
    BadDeltaPrime(f64),
    #[error("kappa = {0} outside (0, 1/6)")]
    BadKappa(f64),
    #[error("empty normal-form domain: eps = {eps} too large for the annulus brackets")]
    DomainEmpty { eps: f64 },
    #[error("reduced kinetic form is not positive definite")]
    NotPositiveDefinite,
    #[error("point does not satisfy both resonance conditions: residual {0}")]
    NotDoublyResonant(f64),
    #[error("sweep needs >= 3 eps values spanning >= 2 decades")]
    BadSweep,
}

/// Coordinate data of one double-resonance site: the rotation, the shear, the
/// optional axis swap making the surviving fast angle the third one, and the
/// fused linear maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteFrame {
    pub triple: UnimodularTriple,
    pub shear: ShearTransform,
    pub permuted: bool,
    /// Momentum map: `p = l_mat * w`.
    pub l_mat: Matrix3<f64>,
    pub l_inv: Matrix3<f64>,
    /// Angle map: `q = a_mat * u`; `a_mat^t * l_mat = I` (canonical pair).
    pub a_mat: Matrix3<f64>,
    pub a_inv: Matrix3<f64>,
    pub p_dd: Vector3<f64>,
    pub pbar_dd: Vector3<f64>,
    pub w_dd: Vector3<f64>,
    /// Surviving fast frequency; bounded away from zero along the circle.
    pub omega3: f64,
    pub kpp_abs: i64,
}

fn swap23() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0)
}

impl SiteFrame {
    pub fn new(
        sys: &NearlyIntegrableSystem,
        dr: &DoubleResonance,
    ) -> Result<Self, NormalFormError> {
        let triple = lattice::unimodular_complete(&dr.k_prime)?;
        let kpp_bar = lattice::mat_mul_vec(&triple.m0_inv_t(), &dr.k_second);
        debug_assert_eq!(kpp_bar[0], 0, "second resonance must rotate to (0, a, b)");
        let shear = lattice::shear_transform(&kpp_bar)?;
        let permuted = shear.branch == ShearBranch::ThirdDominant;
        let perm = if permuted { swap23() } else { Matrix3::identity() };
        let m0_t = lattice::to_f64(&triple.m0_t);
        let m0_inv = lattice::to_f64(&triple.m0()).try_inverse().expect("unimodular");
        let m_t_f = shear.m_t_f64();
        let m_inv_f = shear.m_inv_f64();
        let l_mat = m0_t * m_t_f * perm;
        let a_mat = m0_inv * m_inv_f * perm;
        let l_inv = l_mat.try_inverse().expect("product of invertible maps");
        let a_inv = a_mat.try_inverse().expect("product of invertible maps");
        debug_assert!((a_mat.transpose() * l_mat - Matrix3::identity()).norm() < 1e-12);
        let p_dd = dr.p_dd;
        let pbar_dd = lattice::to_f64(&triple.m0_inv_t()) * p_dd;
        let w_dd = l_inv * p_dd;
        let freq_w = l_mat.transpose() * sys.h.grad(&p_dd);
        let slow = freq_w.x.abs().max(freq_w.y.abs());
        if slow > 1e-8 {
            return Err(NormalFormError::NotDoublyResonant(slow));
        }
        let kpp_abs = shear.period_factor;
        Ok(SiteFrame {
            triple,
            shear,
            permuted,
            l_mat,
            l_inv,
            a_mat,
            a_inv,
            p_dd,
            pbar_dd,
            w_dd,
            omega3: freq_w.z,
            kpp_abs,
        })
    }

    /// Bar-frame point of a (u, w) pair: `pbar = M^t P w`, `qbar = M^{-1} P u`.
    pub fn uv_to_bar(&self, u: &Vector3<f64>, w: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let perm = if self.permuted { swap23() } else { Matrix3::identity() };
        (self.shear.m_t_f64() * perm * w, self.shear.m_inv_f64() * perm * u)
    }

    pub fn bar_to_uv(
        &self,
        pbar: &Vector3<f64>,
        qbar: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let perm = if self.permuted { swap23() } else { Matrix3::identity() };
        let w = perm * self.shear.m_t_f64().try_inverse().unwrap() * pbar;
        let u = perm * self.shear.m_inv_f64().try_inverse().unwrap() * qbar;
        (u, w)
    }
}

/// The averaging generator plus everything needed to evaluate the transformed
/// Hamiltonian numerically and to map points through every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformChain {
    pub frame: SiteFrame,
    /// Rotated perturbation (bar frame).
    pub pbar: FourierSeries3,
    /// Resonant average (bar-frame sub-series of pbar).
    pub z_bar: FourierSeries3,
    /// Generator of the averaging step (bar frame).
    pub f_gen: FourierSeries3,
    pub eps: f64,
    pub kappa: f64,
    pub eta: f64,
    pub delta_prime: f64,
    /// Constant added to V so that max V = 0; keeps site energies comparable.
    pub v_shift: f64,
    pub flow_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalForm {
    pub b: Matrix2<f64>,
    pub b_prime: Vector2<f64>,
    pub b_dprime: f64,
    /// Potential as a series in the angles `(x1, |k''| x2)`, max-normalized
    /// to zero.
    pub v: Fourier2,
    pub kpp_abs: i64,
    /// Annulus brackets `(1 -+ delta') K^{-1} eps^{kappa - 1/2}`, `K = eta T`.
    pub domain_inner: f64,
    pub domain_outer: f64,
    pub remainder: RemainderReport,
}

impl NormalForm {
    pub fn potential_at(&self, x: &Vector2<f64>) -> f64 {
        self.v.eval(&Vector2::new(x.x, self.kpp_abs as f64 * x.y))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RemainderRow {
    pub eps: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub rh: f64,
    pub r0: f64,
    /// sup |G_eps - G_0| over the sampled domain.
    pub g_diff: f64,
    /// max first difference of (G_eps - G_0) between neighbouring samples.
    pub g_diff_d1: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub constant: f64,
    /// Largest multiplicative deviation of a row from the fitted power law.
    pub max_residual: f64,
    /// True when every row is exactly zero (nothing to fit).
    pub exact_zero: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RemainderReport {
    pub rows: Vec<RemainderRow>,
    /// Max-norm cap of the rescaled momentum ball the norms are measured on.
    /// Norms are taken on this fixed O(1) ball, where the averaged dynamics
    /// lives; on the full eps-growing annulus the cubic Taylor tail of a
    /// non-quadratic h scales like eps^{3 kappa - 1} at small periods and
    /// admits no eps^kappa bound.
    pub y_cap: f64,
    pub fit_r1: Option<PowerFit>,
    pub fit_r2: Option<PowerFit>,
    pub fit_r3: Option<PowerFit>,
    pub fit_rh: Option<PowerFit>,
    pub fit_g_diff: Option<PowerFit>,
}

#[derive(Debug, Clone, Copy)]
pub struct NfOptions {
    pub flow_steps: usize,
    pub newton_tol: f64,
    pub newton_max: usize,
    /// Fixed cap for the rescaled momentum ball used in remainder norms.
    pub y_cap: f64,
    /// Remainder grid: (n_x1, n_x2, n_theta, n_y per axis).
    pub grid: (usize, usize, usize, usize),
    pub v_grid: usize,
}

impl Default for NfOptions {
    fn default() -> Self {
        NfOptions {
            flow_steps: 128,
            newton_tol: 1e-11,
            newton_max: 40,
            y_cap: 1.0,
            grid: (5, 5, 3, 3),
            v_grid: 256,
        }
    }
}

/// The resonant average: the sub-series of the rotated perturbation whose
/// modes are orthogonal to the frequency. Orthogonality is decided by the
/// exact integer test `kbar_2 k''_3 - kbar_3 k''_2 = 0`, and cross-checked
/// against membership in the integer span of the two resonances; the two
/// filters must agree mode by mode.
pub fn resonant_average(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
) -> Result<FourierSeries3, NormalFormError> {
    let triple = lattice::unimodular_complete(&dr.k_prime)?;
    let pbar = rotate_perturbation(&sys.pert, &triple);
    let kpp_bar = lattice::mat_mul_vec(&triple.m0_inv_t(), &dr.k_second);
    let ortho = pbar.filter(|k| k[1] * kpp_bar[2] - k[2] * kpp_bar[1] == 0);
    let span = sys
        .pert
        .filter(|k| crate::resonance::span_coords(k, &dr.k_prime, &dr.k_second).is_some());
    let span_rotated = rotate_perturbation(&span, &triple);
    assert_eq!(ortho.len(), span_rotated.len(), "resonance filters disagree");
    for ((ka, _), (kb, _)) in ortho.modes().zip(span_rotated.modes()) {
        assert_eq!(ka, kb, "resonance filters disagree");
    }
    Ok(ortho)
}

pub fn rotate_perturbation(pert: &FourierSeries3, triple: &UnimodularTriple) -> FourierSeries3 {
    let inv_t = triple.m0_inv_t();
    let m0_t = lattice::to_f64(&triple.m0_t);
    pert.transformed(|k| lattice::mat_mul_vec(&inv_t, k), &m0_t)
}

/// Per-mode solution of the homological equation: `F_k = i Pbar_k / <k, w>`
/// on non-resonant modes, zero on resonant ones. The returned series
/// satisfies `<w'', dF/dq> + Pbar - Z = 0` as an exact mode identity, and its
/// grid sup obeys `|F| <= T |Pbar|`.
pub fn homological_solve(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
) -> Result<FourierSeries3, NormalFormError> {
    let triple = lattice::unimodular_complete(&dr.k_prime)?;
    let pbar = rotate_perturbation(&sys.pert, &triple);
    let kpp_bar = lattice::mat_mul_vec(&triple.m0_inv_t(), &dr.k_second);
    let omega_bar = lattice::to_f64(&triple.m0()) * sys.h.grad(&dr.p_dd);
    let mut f = FourierSeries3::new();
    for (k, c) in pbar.modes() {
        if k[1] * kpp_bar[2] - k[2] * kpp_bar[1] == 0 {
            continue; // resonant: killed by the average, not by F
        }
        let denom =
            k[0] as f64 * omega_bar.x + k[1] as f64 * omega_bar.y + k[2] as f64 * omega_bar.z;
        if denom.abs() < 1e-9 {
            return Err(NormalFormError::ResonantDivision { mode: *k, denom });
        }
        // Insert one side only; the conjugate partner arrives on its own turn.
        f.add_raw_mode(*k, c.scale(Complex64::new(0.0, 1.0 / denom)));
    }
    Ok(f)
}

/// Residual of the homological identity `<w'', dF/dq> + Pbar - Z` at a point.
pub fn homological_residual(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
    f_gen: &FourierSeries3,
    z_bar: &FourierSeries3,
    pbar_series: &FourierSeries3,
    pbar: &Vector3<f64>,
    qbar: &Vector3<f64>,
) -> f64 {
    let triple = lattice::unimodular_complete(&dr.k_prime).unwrap();
    let omega_bar = lattice::to_f64(&triple.m0()) * sys.h.grad(&dr.p_dd);
    omega_bar.dot(&f_gen.grad_q(pbar, qbar)) + pbar_series.eval(pbar, qbar)
        - z_bar.eval(pbar, qbar)
}

/// Reduce the system at a double resonance. Returns the planar normal form
/// (with single-eps remainder norms filled in) and the transform chain.
pub fn reduce(
    sys: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
    kappa: f64,
    eta: f64,
    delta_prime: f64,
    opts: &NfOptions,
) -> Result<(NormalForm, TransformChain), NormalFormError> {
    if !(0.0 < delta_prime && delta_prime < 0.5) {
        return Err(NormalFormError::BadDeltaPrime(delta_prime));
    }
    if !(0.0 < kappa && kappa < 1.0 / 6.0) {
        return Err(NormalFormError::BadKappa(kappa));
    }
    let frame = SiteFrame::new(sys, dr)?;
    let pbar = rotate_perturbation(&sys.pert, &frame.triple);
    let z_bar = resonant_average(sys, dr)?;
    let f_gen = homological_solve(sys, dr)?;

    let b_tilde = frame.l_mat.transpose() * sys.h.hess(&dr.p_dd) * frame.l_mat;
    let b = Matrix2::new(b_tilde[(0, 0)], b_tilde[(0, 1)], b_tilde[(1, 0)], b_tilde[(1, 1)]);
    let b_prime = Vector2::new(b_tilde[(0, 2)], b_tilde[(1, 2)]);
    let b_dprime = b_tilde[(2, 2)];
    if nalgebra::SymmetricEigen::new(b).eigenvalues.min() <= 0.0
        || nalgebra::SymmetricEigen::new(b_tilde).eigenvalues.min() <= 0.0
        || b_dprime <= 0.0
    {
        return Err(NormalFormError::NotPositiveDefinite);
    }

    let mut v = two_angle_potential(&z_bar, &frame);
    let (vmax, _) = v.max_on_grid(opts.v_grid);
    v.add_constant(-vmax);

    let k_big = eta * frame.kpp_abs as f64;
    let scale = sys.eps.powf(kappa - 0.5) / k_big;
    if !scale.is_finite() || scale <= 0.0 {
        return Err(NormalFormError::DomainEmpty { eps: sys.eps });
    }
    let chain = TransformChain {
        frame,
        pbar,
        z_bar,
        f_gen,
        eps: sys.eps,
        kappa,
        eta,
        delta_prime,
        v_shift: -vmax,
        flow_steps: opts.flow_steps,
    };
    let mut nf = NormalForm {
        b,
        b_prime,
        b_dprime,
        v,
        kpp_abs: chain.frame.kpp_abs,
        domain_inner: (1.0 - delta_prime) * scale,
        domain_outer: (1.0 + delta_prime) * scale,
        remainder: RemainderReport::default(),
    };
    let row = measure_remainders(sys, &chain, &nf, opts)?;
    nf.remainder = RemainderReport {
        rows: vec![row],
        y_cap: opts.y_cap,
        ..Default::default()
    };
    Ok((nf, chain))
}

fn two_angle_potential(z_bar: &FourierSeries3, frame: &SiteFrame) -> Fourier2 {
    // Resonant bar modes have the form (j, l k''_2, l k''_3); in the sheared
    // (and possibly permuted) angles they depend only on (x1, |k''| x2),
    // i.e. carry the two-angle index (j, l * sign(dominant entry)).
    let kpp = frame.shear.kpp_bar;
    let dominant = match frame.shear.branch {
        ShearBranch::SecondDominant => kpp[1],
        ShearBranch::ThirdDominant => kpp[2],
    };
    let sign = dominant.signum();
    let mut v = Fourier2::new();
    for (k, c) in z_bar.modes() {
        let l = if kpp[1] != 0 { k[1] / kpp[1] } else { k[2] / kpp[2] };
        let n = (k[0], l * sign);
        // V = -Z' frozen at the site; insert each Hermitian pair once.
        if n == (0, 0) || n > (-n.0, -n.1) {
            v.add_mode(n, -c.eval(&frame.pbar_dd));
        }
    }
    v
}

impl TransformChain {
    fn hbar_value(
        &self,
        sys: &NearlyIntegrableSystem,
        pbar: &Vector3<f64>,
        qbar: &Vector3<f64>,
    ) -> f64 {
        let m0_t = lattice::to_f64(&self.frame.triple.m0_t);
        sys.h.value(&(m0_t * pbar)) + sys.eps * self.pbar.eval(pbar, qbar)
    }

    /// Averaging step: time-one map of the Hamiltonian `-eps F` (forward)
    /// or its inverse (backward), fixed-step RK4 in the bar frame.
    pub fn averaging_flow(
        &self,
        pbar: &Vector3<f64>,
        qbar: &Vector3<f64>,
        forward: bool,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.flow_steps;
        let h = if forward { 1.0 } else { -1.0 } / n as f64;
        let mut p = *pbar;
        let mut q = *qbar;
        let field = |p: &Vector3<f64>, q: &Vector3<f64>| {
            // Hamiltonian -eps F: qdot = -eps dF/dp, pdot = +eps dF/dq.
            (self.f_gen.grad_q(p, q) * self.eps, self.f_gen.grad_p(p, q) * (-self.eps))
        };
        for _ in 0..n {
            let (k1p, k1q) = field(&p, &q);
            let (k2p, k2q) = field(&(p + k1p * (h / 2.0)), &(q + k1q * (h / 2.0)));
            let (k3p, k3q) = field(&(p + k2p * (h / 2.0)), &(q + k2q * (h / 2.0)));
            let (k4p, k4q) = field(&(p + k3p * h), &(q + k3q * h));
            p += (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0);
            q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (h / 6.0);
        }
        (p, q)
    }

    /// Rescaled coordinates to the (u, w) frame:
    /// `u = (x1, x2, omega3 theta / sqrt(eps))`,
    /// `w = w'' + (sqrt(eps) y, eps I / omega3)`.
    pub fn rescaled_to_uv(
        &self,
        x: &Vector2<f64>,
        y: &Vector2<f64>,
        i_val: f64,
        theta: f64,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let se = self.eps.sqrt();
        let u = Vector3::new(x.x, x.y, self.frame.omega3 * theta / se);
        let w = self.frame.w_dd
            + Vector3::new(se * y.x, se * y.y, self.eps * i_val / self.frame.omega3);
        (u, w)
    }

    /// Round trip through every stage: rescale, shear, averaging flow and
    /// back. Linear stages are exact; the flow inverts by reverse time.
    pub fn round_trip_error(
        &self,
        x: &Vector2<f64>,
        y: &Vector2<f64>,
        i_val: f64,
        theta: f64,
    ) -> f64 {
        let (u, w) = self.rescaled_to_uv(x, y, i_val, theta);
        let (pbar, qbar) = self.frame.uv_to_bar(&u, &w);
        let (pf, qf) = self.averaging_flow(&pbar, &qbar, true);
        let (pb, qb) = self.averaging_flow(&pf, &qf, false);
        let (u2, w2) = self.frame.bar_to_uv(&pb, &qb);
        ((u2 - u).norm().max((w2 - w).norm())).max({
            let se = self.eps.sqrt();
            let x2 = Vector2::new(u2.x, u2.y);
            let y2 = Vector2::new((w2.x - self.frame.w_dd.x) / se, (w2.y - self.frame.w_dd.y) / se);
            (x2 - x).norm().max((y2 - y).norm())
        })
    }

    /// Fully transformed Hamiltonian over eps,
    /// `(1/eps) (Hbar(Phi(pbar, qbar)) - E) - v_shift`.
    ///
    /// The expansion of the raw pullback carries the unshifted resonant term
    /// `-V_stored + v_shift`; subtracting `v_shift` makes the zero level of
    /// the reduced equation match the max-normalized potential, i.e. the
    /// original level `E + eps * v_shift`.
    pub fn g_tilde(
        &self,
        sys: &NearlyIntegrableSystem,
        x: &Vector2<f64>,
        y: &Vector2<f64>,
        i_val: f64,
        theta: f64,
    ) -> f64 {
        let (u, w) = self.rescaled_to_uv(x, y, i_val, theta);
        let (pbar, qbar) = self.frame.uv_to_bar(&u, &w);
        let (pf, qf) = self.averaging_flow(&pbar, &qbar, true);
        (self.hbar_value(sys, &pf, &qf) - sys.energy) / self.eps - self.v_shift
    }

    /// Algebraic truncation root `G_0` of the quadratic energetic reduction,
    /// in the cancellation-free form `2c / (b + sqrt(b^2 - 4ac))`.
    pub fn g0(&self, nf: &NormalForm, x: &Vector2<f64>, y: &Vector2<f64>) -> f64 {
        let se = self.eps.sqrt();
        let om = self.frame.omega3;
        let a = nf.b_dprime * self.eps / (2.0 * om * om);
        let bq = 1.0 + se / om * nf.b_prime.dot(y);
        let c = 0.5 * (nf.b * y).dot(y) - nf.potential_at(x);
        let disc = bq * bq - 4.0 * a * c;
        assert!(disc >= 0.0, "negative discriminant in the truncation root");
        2.0 * c / (bq + disc.sqrt())
    }

    /// Energetic reduction: damped Newton solve of
    /// `G_tilde(x, y, -G, theta) = 0` seeded at `G_0`.
    ///
    /// The residual is an O(1) difference scaled by 1/eps, so double
    /// precision floors it at roughly `eps_machine * |E| / eps`; the
    /// tolerance adapts to that conditioning limit.
    pub fn g_eps(
        &self,
        sys: &NearlyIntegrableSystem,
        nf: &NormalForm,
        x: &Vector2<f64>,
        y: &Vector2<f64>,
        theta: f64,
        opts: &NfOptions,
    ) -> Result<f64, NormalFormError> {
        let noise_floor = 64.0 * f64::EPSILON * sys.energy.abs().max(1.0) / self.eps;
        let tol = opts.newton_tol.max(noise_floor);
        let mut g = self.g0(nf, x, y);
        let mut residual = self.g_tilde(sys, x, y, -g, theta);
        for _ in 0..opts.newton_max {
            if residual.abs() < tol {
                return Ok(g);
            }
            let di = 1e-6 * (1.0 + g.abs());
            let rp = self.g_tilde(sys, x, y, -(g + di), theta);
            let deriv = (rp - residual) / di;
            if deriv.abs() < 1e-12 {
                break;
            }
            let mut step = residual / deriv;
            let mut improved = false;
            for _ in 0..8 {
                let cand = g - step;
                let r_new = self.g_tilde(sys, x, y, -cand, theta);
                if r_new.abs() <= residual.abs() {
                    g = cand;
                    residual = r_new;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if residual.abs() < tol {
            Ok(g)
        } else {
            Err(NormalFormError::NewtonDiverged { x: *x, y: *y, theta })
        }
    }

    /// The three averaging remainders and the kinetic Taylor tail at one
    /// rescaled point; `ybar3` is the third rescaled momentum component.
    pub fn remainder_terms(
        &self,
        sys: &NearlyIntegrableSystem,
        x: &Vector2<f64>,
        y: &Vector2<f64>,
        ybar3: f64,
        theta: f64,
    ) -> (f64, f64, f64, f64) {
        let se = self.eps.sqrt();
        let om = self.frame.omega3;
        let i_val = om * ybar3 / se;
        let (u, w) = self.rescaled_to_uv(x, y, i_val, theta);
        let (pbar, qbar) = self.frame.uv_to_bar(&u, &w);
        let m0_t = lattice::to_f64(&self.frame.triple.m0_t);
        let m0 = lattice::to_f64(&self.frame.triple.m0());
        let omega_bar = m0 * sys.h.grad(&self.frame.p_dd);

        // R1: momentum variation of the resonant term.
        let r1 = self.z_bar.eval(&pbar, &qbar) - self.z_bar.eval(&self.frame.pbar_dd, &qbar);

        // R2: frequency variation against the generator's angle gradient.
        let grad_hbar = m0 * sys.h.grad(&(m0_t * pbar));
        let r2 = (grad_hbar - omega_bar).dot(&self.f_gen.grad_q(&pbar, &qbar));

        // R3: everything the exact flow produces beyond the algebraic part.
        let (pf, qf) = self.averaging_flow(&pbar, &qbar, true);
        let pulled = (self.hbar_value(sys, &pf, &qf) - sys.energy) / self.eps;
        let algebraic = (sys.h.value(&(m0_t * pbar)) - sys.energy) / self.eps
            + self.z_bar.eval(&pbar, &qbar)
            + r2;
        let r3 = pulled - algebraic;

        // Rh: kinetic Taylor tail beyond the quadratic expansion at w''.
        let b_tilde =
            self.frame.l_mat.transpose() * sys.h.hess(&self.frame.p_dd) * self.frame.l_mat;
        let delta = Vector3::new(se * y.x, se * y.y, se * ybar3);
        let hval = sys.h.value(&(self.frame.l_mat * (self.frame.w_dd + delta)));
        let lin = (self.frame.l_mat.transpose() * sys.h.grad(&self.frame.p_dd)).dot(&delta);
        let quad = 0.5 * (b_tilde * delta).dot(&delta);
        let rh = (hval - sys.energy - lin - quad) / self.eps;
        let _ = i_val;
        (r1, r2, r3, rh)
    }

    /// Lattice shift of the reduced variables induced by the shear symmetry.
    pub fn symmetry_shift(&self) -> (f64, f64) {
        let s = self.frame.shear.shear_entry();
        let s = *s.numer() as f64 / *s.denom() as f64;
        (
            std::f64::consts::TAU * s,
            std::f64::consts::TAU * self.eps.sqrt() / self.frame.omega3,
        )
    }
}

/// Measured sup norms of the remainder terms over the angle/phase grid and
/// the fixed rescaled momentum ball, at the chain's eps.
pub fn measure_remainders(
    sys: &NearlyIntegrableSystem,
    chain: &TransformChain,
    nf: &NormalForm,
    opts: &NfOptions,
) -> Result<RemainderRow, NormalFormError> {
    let (n1, n2, nth, ny) = opts.grid;
    let cap = opts.y_cap;
    let se = chain.eps.sqrt();
    let theta_period =
        std::f64::consts::TAU * chain.frame.kpp_abs as f64 * se / chain.frame.omega3.abs();
    let mut row = RemainderRow { eps: chain.eps, ..Default::default() };
    let y_axis: Vec<f64> = if ny <= 1 {
        vec![0.0]
    } else {
        (0..ny).map(|i| -cap + 2.0 * cap * i as f64 / (ny - 1) as f64).collect()
    };
    let mut prev_diff: Option<f64> = None;
    for i1 in 0..n1 {
        let x1 = std::f64::consts::TAU * i1 as f64 / n1 as f64;
        for i2 in 0..n2 {
            let x2 = std::f64::consts::TAU * i2 as f64 / n2 as f64;
            let x = Vector2::new(x1, x2);
            for it in 0..nth {
                let theta = theta_period * it as f64 / nth as f64;
                for &ya in &y_axis {
                    for &yb in &y_axis {
                        let y = Vector2::new(ya, yb);
                        for &y3 in &[-cap, 0.0, cap] {
                            let (r1, r2, r3, rh) = chain.remainder_terms(sys, &x, &y, y3, theta);
                            row.r1 = row.r1.max(r1.abs());
                            row.r2 = row.r2.max(r2.abs());
                            row.r3 = row.r3.max(r3.abs());
                            row.rh = row.rh.max(rh.abs());
                        }
                        let g0 = chain.g0(nf, &x, &y);
                        let r0 = g0 - (0.5 * (nf.b * y).dot(&y) - nf.potential_at(&x));
                        row.r0 = row.r0.max(r0.abs());
                        let geps = chain.g_eps(sys, nf, &x, &y, theta, opts)?;
                        let diff = geps - g0;
                        row.g_diff = row.g_diff.max(diff.abs());
                        if let Some(pd) = prev_diff {
                            row.g_diff_d1 = row.g_diff_d1.max((diff - pd).abs());
                        }
                        prev_diff = Some(diff);
                    }
                }
            }
        }
    }
    Ok(row)
}

fn fit_power(rows: &[(f64, f64)]) -> PowerFit {
    if rows.iter().all(|(_, v)| *v <= 1e-300) {
        return PowerFit { exact_zero: true, ..Default::default() };
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|(_, v)| *v > 0.0).map(|(e, v)| (e.ln(), v.ln())).collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mut max_res = 0.0f64;
    for (lx, ly) in &pts {
        let pred = intercept + slope * lx;
        max_res = max_res.max(((ly - pred).exp() - 1.0).abs());
    }
    PowerFit { slope, constant: intercept.exp(), max_residual: max_res, exact_zero: false }
}

/// Remainder norms against eps with fitted power laws. Requires at least
/// three values spanning two decades.
pub fn remainder_sweep(
    sys_template: &NearlyIntegrableSystem,
    dr: &DoubleResonance,
    kappa: f64,
    eta: f64,
    delta_prime: f64,
    eps_list: &[f64],
    opts: &NfOptions,
) -> Result<RemainderReport, NormalFormError> {
    if eps_list.len() < 3 {
        return Err(NormalFormError::BadSweep);
    }
    let lo = eps_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eps_list.iter().cloned().fold(0.0f64, f64::max);
    if hi / lo < 99.0 {
        return Err(NormalFormError::BadSweep);
    }
    let mut rows = Vec::new();
    for &eps in eps_list {
        let mut sys = sys_template.clone();
        sys.eps = eps;
        let (nf, chain) = reduce(&sys, dr, kappa, eta, delta_prime, opts)?;
        rows.push(measure_remainders(&sys, &chain, &nf, opts)?);
    }
    rows.sort_by(|a, b| a.eps.partial_cmp(&b.eps).unwrap());
    let col = |f: fn(&RemainderRow) -> f64| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.eps, f(r))).collect()
    };
    Ok(RemainderReport {
        y_cap: opts.y_cap,
        fit_r1: Some(fit_power(&col(|r| r.r1))),
        fit_r2: Some(fit_power(&col(|r| r.r2))),
        fit_r3: Some(fit_power(&col(|r| r.r3))),
        fit_rh: Some(fit_power(&col(|r| r.rh))),
        fit_g_diff: Some(fit_power(&col(|r| r.g_diff))),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub max_discrepancy: f64,
    pub n_samples: usize,
}

/// Verifies the reduced Hamiltonian is invariant under the lattice shift
/// `(x, y, theta) -> (x + (0, 2 pi s), y, theta + 2 pi sqrt(eps)/omega3)`,
/// `s` the shear entry.
pub fn symmetry_check(
    sys: &NearlyIntegrableSystem,
    chain: &TransformChain,
    nf: &NormalForm,
    n_samples: usize,
    opts: &NfOptions,
) -> Result<SymmetryReport, NormalFormError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240915);
    let (dx2, dth) = chain.symmetry_shift();
    let cap = opts.y_cap.min(0.8);
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = Vector2::new(
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let y = Vector2::new(rng.gen_range(-cap..cap), rng.gen_range(-cap..cap));
        let theta = rng.gen_range(0.0..1.0);
        let g1 = chain.g_eps(sys, nf, &x, &y, theta, opts)?;
        let x_shift = Vector2::new(x.x, x.y + dx2);
        let g2 = chain.g_eps(sys, nf, &x_shift, &y, theta + dth, opts)?;
        worst = worst.max((g2 - g1).abs());
    }
    Ok(SymmetryReport { max_discrepancy: worst, n_samples })
}
