//! Variational objects of the averaged planar system
//! `L = <A phi', phi'>/2 + V(phi)`: minimal periodic orbits in a prescribed
//! homology class, Floquet multipliers, bifurcation energies, alpha/beta
//! functions along homology rays, cohomology channels, and their affine
//! embedding back into `H^1(T^3)`.
//!
//! Conventions: angles are 2 pi periodic, a class-`g` loop of period `tau`
//! has rotation vector `(2 pi / tau) g`, and we parametrize rays by
//! `lambda = 2 pi / tau` so the rotation vector is `lambda g`. With these
//! units the free system has `beta(rho) = |rho|^2/2` and `alpha(c) = |c|^2/2`.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fourier::Fourier2;
use crate::normalform::{NormalForm, TransformChain};

#[derive(Debug, Error)]
pub enum AveragedError {
    #[error("homology class must be nonzero and primitive, got {0:?}")]
    BadClass([i64; 2]),
    #[error("minimization stuck: gradient {grad} after {iters} iterations")]
    MinimizationStuck { grad: f64, iters: usize },
    #[error("energy target {target} outside the reachable bracket [{lo}, {hi}]")]
    EnergyBracket { target: f64, lo: f64, hi: f64 },
    #[error("beta samples fail discrete convexity at indices {0:?}")]
    NonConvexSamples([usize; 3]),
    #[error("channel degenerate: potential has no angle dependence")]
    DegenerateChannel,
}

/// Kinetic metric plus periodic potential; the potential's angles are both
/// 2 pi periodic in this frame. `x2_factor` remembers the original second
/// angle compression `|k''|` for maps back to the sheared frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MechanicalSystem {
    pub a: Matrix2<f64>,
    pub a_inv: Matrix2<f64>,
    pub pot: Fourier2,
    pub x2_factor: i64,
}

impl MechanicalSystem {
    pub fn new(a: Matrix2<f64>, pot: Fourier2) -> Self {
        let a_inv = a.try_inverse().expect("kinetic metric must be invertible");
        MechanicalSystem { a, a_inv, pot, x2_factor: 1 }
    }

    /// Averaged frame of a normal form: angles `(x1, |k''| x2)`, kinetic
    /// matrix `diag(1,|k''|) B diag(1,|k''|)` inverted into a metric.
    pub fn from_normal_form(nf: &NormalForm) -> Self {
        let t = nf.kpp_abs as f64;
        let d = Matrix2::new(1.0, 0.0, 0.0, t);
        let b_avg = d * nf.b * d;
        let a = b_avg.try_inverse().expect("positive definite");
        MechanicalSystem {
            a,
            a_inv: b_avg,
            pot: nf.v.clone(),
            x2_factor: nf.kpp_abs,
        }
    }

    pub fn pendulum_rotator() -> Self {
        let mut pot = Fourier2::new();
        pot.add_cos((1, 0), 1.0);
        pot.add_constant(-1.0);
        MechanicalSystem::new(Matrix2::identity(), pot)
    }

    pub fn lagrangian(&self, phi: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
        0.5 * (self.a * v).dot(v) + self.pot.eval(phi)
    }

    pub fn energy_of(&self, phi: &Vector2<f64>, v: &Vector2<f64>) -> f64 {
        0.5 * (self.a * v).dot(v) - self.pot.eval(phi)
    }

    /// Directions along which the potential is constant (continuous
    /// translation symmetries), as an orthonormal basis.
    pub fn symmetry_directions(&self) -> Vec<Vector2<f64>> {
        let active: Vec<Vector2<f64>> = self
            .pot
            .modes()
            .filter(|(n, _)| **n != (0, 0))
            .map(|(n, _)| Vector2::new(n.0 as f64, n.1 as f64))
            .collect();
        if active.is_empty() {
            return vec![Vector2::x(), Vector2::y()];
        }
        // Rank of the active mode set.
        let mut basis: Vec<Vector2<f64>> = Vec::new();
        for v in &active {
            let mut w = *v;
            for b in &basis {
                w -= b * w.dot(b);
            }
            if w.norm() > 1e-9 {
                basis.push(w.normalize());
            }
        }
        if basis.len() == 2 {
            vec![]
        } else {
            // One active direction: the symmetry is its orthogonal complement.
            let b = basis[0];
            vec![Vector2::new(-b.y, b.x)]
        }
    }

    /// Smallest eigenvalue of the kinetic form of the sheared frame
    /// (`B = D^{-1} A^{-1} D^{-1}`, `D = diag(1, |k''|)`).
    pub fn sheared_kinetic_min_eig(&self) -> f64 {
        let t = self.x2_factor as f64;
        let d_inv = Matrix2::new(1.0, 0.0, 0.0, 1.0 / t);
        let b = d_inv * self.a_inv * d_inv;
        nalgebra::SymmetricEigen::new(b).eigenvalues.min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrbitFlag {
    Hyperbolic,
    Elliptic,
    Degenerate,
}

#[derive(Debug, Clone, Copy)]
pub enum OrbitTarget {
    /// Rotation parameter: period `tau = 2 pi / lambda`.
    Lambda(f64),
    /// Prescribed energy; the period is solved by bisection (energy decreases
    /// with period for these systems) and polished by shooting.
    Energy(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub class: [i64; 2],
    pub tau: f64,
    /// Lifted node positions; `nodes[N] = nodes[0] + 2 pi g`.
    pub nodes: Vec<Vector2<f64>>,
    pub action: f64,
    pub energy: f64,
    /// Max variation of the per-segment discrete energy.
    pub energy_drift: f64,
    pub el_residual: f64,
    /// Nontrivial Floquet pair (mu, 1/mu) as (re, im) pairs.
    pub floquet: [(f64, f64); 2],
    pub flag: OrbitFlag,
    /// |mu * (1/mu) - 1| for the extracted pair.
    pub floquet_product_defect: f64,
    /// Initial condition of the shooting-refined orbit (phi, v).
    pub refined_ic: ([f64; 2], [f64; 2]),
    pub refined_tau: f64,
    pub refined_action: f64,
}

impl PeriodicOrbit {
    pub fn beta_value(&self) -> f64 {
        self.action / self.tau
    }

    /// Oscillation of the sheared-frame momentum `(I1, |k''| I2)` along the
    /// orbit, in the max norm.
    pub fn momentum_oscillation(&self, ms: &MechanicalSystem) -> f64 {
        let n = self.nodes.len() - 1;
        let dt = self.tau / n as f64;
        let t = ms.x2_factor as f64;
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for j in 0..n {
            let v = (self.nodes[j + 1] - self.nodes[j]) / dt;
            let i_mom = ms.a * v;
            let y = Vector2::new(i_mom.x, t * i_mom.y);
            lo = lo.inf(&y);
            hi = hi.sup(&y);
        }
        (hi - lo).amax()
    }

    pub fn max_sheared_momentum(&self, ms: &MechanicalSystem) -> f64 {
        let n = self.nodes.len() - 1;
        let dt = self.tau / n as f64;
        let t = ms.x2_factor as f64;
        let mut m = 0.0f64;
        for j in 0..n {
            let v = (self.nodes[j + 1] - self.nodes[j]) / dt;
            let i_mom = ms.a * v;
            m = m.max(i_mom.x.abs().max((t * i_mom.y).abs()));
        }
        m
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OrbitOptions {
    pub n_nodes: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Max-norm tolerance on the discrete Euler-Lagrange residual.
    pub el_tol: f64,
    pub max_iters: usize,
    /// Action gap below which two minima count as tied.
    pub act_tol: f64,
    /// Node-distance above which tied minima count as distinct orbits.
    pub sep_tol: f64,
    /// Steps per node for the Floquet/shooting integrator.
    pub int_factor: usize,
    pub hyperbolic_margin: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        OrbitOptions {
            n_nodes: 256,
            n_starts: 8,
            seed: 7,
            el_tol: 1e-8,
            max_iters: 4000,
            act_tol: 1e-7,
            sep_tol: 1e-2,
            int_factor: 8,
            hyperbolic_margin: 1e-3,
        }
    }
}

fn is_primitive(g: &[i64; 2]) -> bool {
    *g != [0, 0] && num_integer::gcd(g[0].abs(), g[1].abs()) == 1
}

/// Discrete action of a lifted loop.
fn action_of(ms: &MechanicalSystem, nodes: &[Vector2<f64>], tau: f64) -> f64 {
    let n = nodes.len() - 1;
    let dt = tau / n as f64;
    let mut s = 0.0;
    for j in 0..n {
        let d = nodes[j + 1] - nodes[j];
        s += 0.5 * (ms.a * d).dot(&d) / dt
            + dt * 0.5 * (ms.pot.eval(&nodes[j]) + ms.pot.eval(&nodes[j + 1]));
    }
    s
}

fn action_gradient(ms: &MechanicalSystem, nodes: &[Vector2<f64>], tau: f64, grad: &mut [Vector2<f64>]) {
    let n = nodes.len() - 1;
    let dt = tau / n as f64;
    for j in 0..n {
        let prev = if j == 0 { nodes[n - 1] - nodes[n] + nodes[0] } else { nodes[j - 1] };
        // For j = 0 the lifted predecessor is nodes[n-1] - 2 pi g.
        let next = nodes[j + 1];
        grad[j] = ms.a * (nodes[j] * 2.0 - prev - next) / dt + ms.pot.grad(&nodes[j]) * dt;
    }
}

/// Solve the cyclic block-tridiagonal Newton system
/// `(diag_j, off) x = rhs` with constant off-diagonal block `off` and corner
/// coupling, via block Thomas elimination plus a rank-4 Woodbury correction.
fn solve_cyclic(
    diag: &[Matrix2<f64>],
    off: &Matrix2<f64>,
    rhs: &[Vector2<f64>],
) -> Option<Vec<Vector2<f64>>> {
    let n = diag.len();
    if n < 3 {
        return None;
    }
    let tri_solve = |b: &[Vector2<f64>]| -> Option<Vec<Vector2<f64>>> {
        let mut c = vec![Matrix2::zeros(); n];
        let mut d = vec![Vector2::zeros(); n];
        let mut m = diag[0];
        let mut m_inv = m.try_inverse()?;
        c[0] = m_inv * off;
        d[0] = m_inv * b[0];
        for j in 1..n {
            m = diag[j] - off * c[j - 1];
            m_inv = m.try_inverse()?;
            c[j] = m_inv * off;
            d[j] = m_inv * (b[j] - off * d[j - 1]);
        }
        let mut x = vec![Vector2::zeros(); n];
        x[n - 1] = d[n - 1];
        for j in (0..n - 1).rev() {
            x[j] = d[j] - c[j] * x[j + 1];
        }
        Some(x)
    };
    // Corners: M[0][n-1] = off, M[n-1][0] = off. Woodbury with
    // U = (e_0 b1, e_0 b2, e_{n-1} b1, e_{n-1} b2), V rows placing off-blocks.
    let base = tri_solve(rhs)?;
    let mut cols = Vec::with_capacity(4);
    for block in [0usize, n - 1] {
        for comp in 0..2 {
            let mut e = vec![Vector2::zeros(); n];
            e[block][comp] = 1.0;
            cols.push(tri_solve(&e)?);
        }
    }
    // V^t x picks off * x[n-1] stacked with off * x[0].
    let vt = |x: &[Vector2<f64>]| -> Vector4<f64> {
        let a = off * x[n - 1];
        let b = off * x[0];
        Vector4::new(a.x, a.y, b.x, b.y)
    };
    let mut small = Matrix4::identity();
    for (i, col) in cols.iter().enumerate() {
        let v = vt(col);
        for r in 0..4 {
            small[(r, i)] += v[r];
        }
    }
    let rhs_small = vt(&base);
    let corr = small.lu().solve(&rhs_small)?;
    let mut x = base;
    for (i, col) in cols.iter().enumerate() {
        for j in 0..n {
            x[j] -= col[j] * corr[i];
        }
    }
    Some(x)
}

#[derive(Debug, Clone)]
struct LocalMin {
    nodes: Vec<Vector2<f64>>,
    action: f64,
}

/// Minimize the discrete action over class-`g` loops of fixed period, from
/// one seed, with Barzilai-Borwein descent followed by damped Newton.
fn minimize_from(
    ms: &MechanicalSystem,
    g: &[i64; 2],
    tau: f64,
    start: Vec<Vector2<f64>>,
    opts: &OrbitOptions,
) -> Result<LocalMin, AveragedError> {
    let n = opts.n_nodes;
    let dt = tau / n as f64;
    let lift = Vector2::new(
        std::f64::consts::TAU * g[0] as f64,
        std::f64::consts::TAU * g[1] as f64,
    );
    let mut nodes = start;
    debug_assert_eq!(nodes.len(), n + 1);
    let close = |nodes: &mut Vec<Vector2<f64>>| {
        let last = nodes[0] + lift;
        nodes[n] = last;
    };
    close(&mut nodes);
    let mut grad = vec![Vector2::zeros(); n];
    let mut grad_prev = vec![Vector2::zeros(); n];
    let mut nodes_prev = nodes.clone();
    action_gradient(ms, &nodes, tau, &mut grad);
    let inf = |g: &[Vector2<f64>]| g.iter().map(|v| v.amax()).fold(0.0f64, f64::max);
    let mut step = dt / (1.0 + ms.a_inv.norm());
    let mut iters = 0usize;
    // Barzilai-Borwein with a backtracking guard; the damped Newton below
    // finishes the job, so this only needs to reach the basin.
    let bb_cap = opts.max_iters.min(400);
    while inf(&grad) > 1e-3 && iters < bb_cap {
        iters += 1;
        let act0 = action_of(ms, &nodes, tau);
        let mut trial = nodes.clone();
        loop {
            for j in 0..n {
                trial[j] = nodes[j] - grad[j] * step;
            }
            close(&mut trial);
            if action_of(ms, &trial, tau) <= act0 || step < 1e-14 {
                break;
            }
            step *= 0.5;
        }
        nodes_prev.copy_from_slice(&nodes);
        grad_prev.copy_from_slice(&grad);
        nodes = trial.clone();
        action_gradient(ms, &nodes, tau, &mut grad);
        // BB step from the last displacement/gradient change.
        let mut sy = 0.0;
        let mut yy = 0.0;
        for j in 0..n {
            let s = nodes[j] - nodes_prev[j];
            let y = grad[j] - grad_prev[j];
            sy += s.dot(&y);
            yy += y.dot(&y);
        }
        if yy > 1e-300 && sy > 0.0 {
            step = (sy / yy).clamp(1e-12, 1e3);
        }
    }
    // Damped Newton polish on the full cyclic system.
    let off = ms.a * (-1.0 / dt);
    for _ in 0..60 {
        action_gradient(ms, &nodes, tau, &mut grad);
        let g_inf = inf(&grad);
        if g_inf < opts.el_tol * dt {
            break;
        }
        let mut diag: Vec<Matrix2<f64>> = (0..n)
            .map(|j| ms.a * (2.0 / dt) + ms.pot.hessian(&nodes[j]) * dt)
            .collect();
        // Small Levenberg floor: the continuous time-shift family makes the
        // Hessian singular at the minimizer.
        let floor = 1e-9 * (1.0 + ms.a.norm() / dt);
        for d in diag.iter_mut() {
            d[(0, 0)] += floor;
            d[(1, 1)] += floor;
        }
        match solve_cyclic(&diag, &off, &grad) {
            Some(delta) => {
                let act0 = action_of(ms, &nodes, tau);
                let mut scale = 1.0;
                let mut accepted = false;
                for _ in 0..12 {
                    let mut trial = nodes.clone();
                    for j in 0..n {
                        trial[j] = nodes[j] - delta[j] * scale;
                    }
                    close(&mut trial);
                    let mut tg = vec![Vector2::zeros(); n];
                    action_gradient(ms, &trial, tau, &mut tg);
                    if inf(&tg) < g_inf || action_of(ms, &trial, tau) < act0 {
                        nodes = trial;
                        accepted = true;
                        break;
                    }
                    scale *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            None => break,
        }
    }
    action_gradient(ms, &nodes, tau, &mut grad);
    let grad_inf = inf(&grad);
    if grad_inf > opts.el_tol * dt * 100.0 {
        return Err(AveragedError::MinimizationStuck { grad: grad_inf, iters });
    }
    Ok(LocalMin { action: action_of(ms, &nodes, tau), nodes })
}

fn wrap_pi(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut y = x % tau;
    if y >= std::f64::consts::PI {
        y -= tau;
    }
    if y < -std::f64::consts::PI {
        y += tau;
    }
    y
}

/// Orbit distance modulo time shift and the potential's continuous
/// translation symmetries.
fn orbit_distance(
    ms: &MechanicalSystem,
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
) -> f64 {
    let n = a.len() - 1;
    let sym = ms.symmetry_directions();
    // Lifted winding per period, to interpolate across the wrap.
    let wind = a[n] - a[0];
    let sample_a = |s: f64| -> Vector2<f64> {
        // a at fractional node index s, lifted linearly.
        let laps = (s / n as f64).floor();
        let s_in = s - laps * n as f64;
        let j = (s_in.floor() as usize).min(n - 1);
        let t = s_in - j as f64;
        a[j] * (1.0 - t) + a[j + 1] * t + wind * laps
    };
    let dist_at = |s: f64| -> f64 {
        let mut deltas = Vec::with_capacity(n);
        for j in 0..n {
            let d = sample_a(j as f64 + s) - b[j];
            deltas.push(Vector2::new(wrap_pi(d.x), wrap_pi(d.y)));
        }
        let mean = deltas.iter().sum::<Vector2<f64>>() / n as f64;
        let mut mean_sym = Vector2::zeros();
        for dir in &sym {
            mean_sym += dir * mean.dot(dir);
        }
        deltas
            .iter()
            .map(|d| {
                let r = d - mean_sym;
                wrap_pi(r.x).abs().max(wrap_pi(r.y).abs())
            })
            .fold(0.0f64, f64::max)
    };
    // Coarse scan over integer time shifts, then fractional refinement.
    let step = (n / 64).max(1);
    let mut best = (f64::INFINITY, 0.0f64);
    let mut s = 0;
    while s < n {
        let d = dist_at(s as f64);
        if d < best.0 {
            best = (d, s as f64);
        }
        s += step;
    }
    let mut out = best.0;
    let mut width = step as f64;
    let mut center = best.1;
    for _ in 0..8 {
        for ds in [-0.5, -0.25, 0.25, 0.5] {
            let s = center + ds * width;
            let d = dist_at(s);
            if d < out {
                out = d;
                center = s;
            }
        }
        width *= 0.5;
    }
    out
}

/// All distinct local minimizers reachable from the deterministic multi-start
/// (plus continuation seeds), sorted by action.
fn find_minima(
    ms: &MechanicalSystem,
    g: &[i64; 2],
    tau: f64,
    seeds: &[Vec<Vector2<f64>>],
    opts: &OrbitOptions,
) -> Result<Vec<LocalMin>, AveragedError> {
    let n = opts.n_nodes;
    let lift = Vector2::new(
        std::f64::consts::TAU * g[0] as f64,
        std::f64::consts::TAU * g[1] as f64,
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts: Vec<Vec<Vector2<f64>>> = Vec::new();
    // Continuation seeds (all tied minimizers of the previous parameter)
    // carry the basin structure; fewer fresh starts are then enough to keep
    // watching for new competitors.
    let n_fresh = if seeds.is_empty() { opts.n_starts } else { (opts.n_starts / 3).max(2) };
    for s in seeds {
        starts.push(s.clone());
    }
    for k in 0..n_fresh {
        let base = Vector2::new(
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let amp = if k == 0 { 0.0 } else { rng.gen_range(0.0..0.4) };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let nodes: Vec<Vector2<f64>> = (0..=n)
            .map(|j| {
                let t = j as f64 / n as f64;
                base + lift * t + dir * (amp * (std::f64::consts::TAU * t + phase).sin())
            })
            .collect();
        starts.push(nodes);
    }
    let mut minima: Vec<LocalMin> = Vec::new();
    let mut last_err = None;
    for start in starts {
        match minimize_from(ms, g, tau, start, opts) {
            Ok(m) => {
                let dup = minima
                    .iter()
                    .any(|other| orbit_distance(ms, &m.nodes, &other.nodes) < opts.sep_tol);
                if !dup {
                    minima.push(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    if minima.is_empty() {
        return Err(last_err.unwrap_or(AveragedError::MinimizationStuck { grad: f64::NAN, iters: 0 }));
    }
    minima.sort_by(|a, b| a.action.partial_cmp(&b.action).unwrap());
    Ok(minima)
}

/// RK4 integration of state + variational matrix; returns the end state, the
/// monodromy, and the integrated action.
fn integrate_orbit(
    ms: &MechanicalSystem,
    z0: &Vector4<f64>,
    tau: f64,
    steps: usize,
) -> (Vector4<f64>, Matrix4<f64>, f64) {
    let field = |z: &Vector4<f64>| -> Vector4<f64> {
        let phi = Vector2::new(z.x, z.y);
        let v = Vector2::new(z.z, z.w);
        let acc = ms.a_inv * ms.pot.grad(&phi);
        Vector4::new(v.x, v.y, acc.x, acc.y)
    };
    let jac = |z: &Vector4<f64>| -> Matrix4<f64> {
        let phi = Vector2::new(z.x, z.y);
        let hv = ms.a_inv * ms.pot.hessian(&phi);
        let mut j = Matrix4::zeros();
        j[(0, 2)] = 1.0;
        j[(1, 3)] = 1.0;
        for r in 0..2 {
            for c in 0..2 {
                j[(2 + r, c)] = hv[(r, c)];
            }
        }
        j
    };
    let h = tau / steps as f64;
    let mut z = *z0;
    let mut m = Matrix4::identity();
    let mut action = 0.0;
    for _ in 0..steps {
        let l0 = ms.lagrangian(&Vector2::new(z.x, z.y), &Vector2::new(z.z, z.w));
        let k1 = field(&z);
        let a1 = jac(&z) * m;
        let z2 = z + k1 * (h / 2.0);
        let k2 = field(&z2);
        let a2 = jac(&z2) * (m + a1 * (h / 2.0));
        let z3 = z + k2 * (h / 2.0);
        let k3 = field(&z3);
        let a3 = jac(&z3) * (m + a2 * (h / 2.0));
        let z4 = z + k3 * h;
        let k4 = field(&z4);
        let a4 = jac(&z4) * (m + a3 * h);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        m += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        let lmid = ms.lagrangian(&Vector2::new(z3.x, z3.y), &Vector2::new(z3.z, z3.w));
        let l1 = ms.lagrangian(&Vector2::new(z.x, z.y), &Vector2::new(z.z, z.w));
        action += h / 6.0 * (l0 + 4.0 * lmid + l1);
    }
    (z, m, action)
}

/// Newton shooting refinement of a periodic orbit. `energy_target` adds an
/// energy row (and frees tau); otherwise tau stays fixed. Rank-deficient
/// Jacobians (orbit families) are handled by an SVD least-squares step.
fn shoot_refine(
    ms: &MechanicalSystem,
    z0: &Vector4<f64>,
    tau0: f64,
    lift: &Vector2<f64>,
    steps: usize,
    energy_target: Option<f64>,
) -> (Vector4<f64>, f64, Matrix4<f64>, f64) {
    let mut z = *z0;
    let mut tau = tau0;
    let mut best = (f64::INFINITY, z, tau, Matrix4::identity(), 0.0);
    for _ in 0..12 {
        let (zf, m, act) = integrate_orbit(ms, &z, tau, steps);
        let f = Vector4::new(
            zf.x - z.x - lift.x,
            zf.y - z.y - lift.y,
            zf.z - z.z,
            zf.w - z.w,
        );
        let mut rows = 4;
        let free_tau = energy_target.is_some();
        let e_row = if let Some(et) = energy_target {
            rows += 1;
            ms.energy_of(&Vector2::new(z.x, z.y), &Vector2::new(z.z, z.w)) - et
        } else {
            0.0
        };
        let res = f.norm() + e_row.abs();
        if res < best.0 {
            best = (res, z, tau, m, act);
        }
        if res < 1e-12 {
            break;
        }
        // Assemble the bordered least-squares system.
        let zdot = {
            let phi = Vector2::new(z.x, z.y);
            let v = Vector2::new(z.z, z.w);
            let acc = ms.a_inv * ms.pot.grad(&phi);
            Vector4::new(v.x, v.y, acc.x, acc.y)
        };
        let ncols = if free_tau { 5 } else { 4 };
        let nrows = rows + 1; // phase condition
        let mut jm = nalgebra::DMatrix::<f64>::zeros(nrows, ncols);
        let mi = m - Matrix4::identity();
        for r in 0..4 {
            for c in 0..4 {
                jm[(r, c)] = mi[(r, c)];
            }
        }
        if free_tau {
            let zf_dot = {
                let phi = Vector2::new(zf.x, zf.y);
                let v = Vector2::new(zf.z, zf.w);
                let acc = ms.a_inv * ms.pot.grad(&phi);
                Vector4::new(v.x, v.y, acc.x, acc.y)
            };
            for r in 0..4 {
                jm[(r, 4)] = zf_dot[r];
            }
            // Energy row: dE/dz = (grad of E), dE/dtau = 0.
            let phi = Vector2::new(z.x, z.y);
            let v = Vector2::new(z.z, z.w);
            let de_phi = -ms.pot.grad(&phi);
            let de_v = ms.a * v;
            jm[(4, 0)] = de_phi.x;
            jm[(4, 1)] = de_phi.y;
            jm[(4, 2)] = de_v.x;
            jm[(4, 3)] = de_v.y;
        }
        // Phase condition: step orthogonal to the flow direction.
        for c in 0..4 {
            jm[(nrows - 1, c)] = zdot[c];
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(nrows);
        for r in 0..4 {
            rhs[r] = -f[r];
        }
        if free_tau {
            rhs[4] = -e_row;
        }
        let svd = jm.svd(true, true);
        let sol = match svd.solve(&rhs, 1e-10) {
            Ok(s) => s,
            Err(_) => break,
        };
        for c in 0..4 {
            z[c] += sol[c];
        }
        if free_tau {
            tau += sol[4];
            if tau <= 0.0 {
                break;
            }
        }
    }
    let (_, z, tau, m, act) = best;
    (z, tau, m, act)
}

fn extract_floquet(m: &Matrix4<f64>, margin: f64) -> ([(f64, f64); 2], OrbitFlag, f64) {
    let eig = m.complex_eigenvalues();
    let mut idx: Vec<usize> = (0..4).collect();
    idx.sort_by(|&a, &b| {
        eig[b]
            .norm()
            .ln()
            .abs()
            .partial_cmp(&eig[a].norm().ln().abs())
            .unwrap()
    });
    let (mu, nu) = if eig[idx[0]].norm() >= eig[idx[1]].norm() {
        (eig[idx[0]], eig[idx[1]])
    } else {
        (eig[idx[1]], eig[idx[0]])
    };
    let pair = [(mu.re, mu.im), (nu.re, nu.im)];
    let defect = (mu * nu - num_complex::Complex64::new(1.0, 0.0)).norm();
    // mu is the larger multiplier of the nontrivial pair.
    let flag = if mu.norm() > 1.0 + margin && mu.im.abs() < margin * mu.norm() {
        OrbitFlag::Hyperbolic
    } else if mu.norm().ln().abs() < margin {
        if mu.im.abs() > margin {
            OrbitFlag::Elliptic
        } else {
            OrbitFlag::Degenerate
        }
    } else {
        OrbitFlag::Elliptic
    };
    (pair, flag, defect)
}

/// Global minimal periodic orbit of class `g` at a prescribed rotation
/// parameter or energy.
pub fn minimal_orbit(
    ms: &MechanicalSystem,
    g: [i64; 2],
    target: OrbitTarget,
    opts: &OrbitOptions,
) -> Result<PeriodicOrbit, AveragedError> {
    if !is_primitive(&g) {
        return Err(AveragedError::BadClass(g));
    }
    match target {
        OrbitTarget::Lambda(lambda) => {
            assert!(lambda > 0.0, "rotation parameter must be positive");
            let tau = std::f64::consts::TAU / lambda;
            let minima = find_minima(ms, &g, tau, &[], opts)?;
            build_orbit(ms, g, tau, &minima[0], opts, None)
        }
        OrbitTarget::Energy(e_target) => {
            // Bracket the period: energy decreases as tau grows.
            let mut tau_lo = 0.05;
            let mut tau_hi = 64.0;
            let energy_at = |tau: f64, seed: &[Vec<Vector2<f64>>]| -> Result<(f64, LocalMin), AveragedError> {
                let m = find_minima(ms, &g, tau, seed, opts)?;
                let orbit_energy = discrete_energy(ms, &m[0].nodes, tau).0;
                Ok((orbit_energy, m.into_iter().next().unwrap()))
            };
            let (mut e_lo, _) = energy_at(tau_lo, &[])?;
            let (mut e_hi, _) = energy_at(tau_hi, &[])?;
            if !(e_hi <= e_target && e_target <= e_lo) {
                return Err(AveragedError::EnergyBracket { target: e_target, lo: e_hi, hi: e_lo });
            }
            let mut seed: Vec<Vec<Vector2<f64>>> = Vec::new();
            let mut mid_min = None;
            for _ in 0..60 {
                let tau = 0.5 * (tau_lo + tau_hi);
                let (e, m) = energy_at(tau, &seed)?;
                seed = vec![m.nodes.clone()];
                mid_min = Some((tau, m));
                if e > e_target {
                    tau_lo = tau;
                    e_lo = e;
                } else {
                    tau_hi = tau;
                    e_hi = e;
                }
                if (tau_hi - tau_lo) < 1e-12 * tau_hi {
                    break;
                }
            }
            let _ = (e_lo, e_hi);
            let (tau, m) = mid_min.unwrap();
            build_orbit(ms, g, tau, &m, opts, Some(e_target))
        }
    }
}

fn discrete_energy(ms: &MechanicalSystem, nodes: &[Vector2<f64>], tau: f64) -> (f64, f64) {
    let n = nodes.len() - 1;
    let dt = tau / n as f64;
    let mut mean = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..n {
        let v = (nodes[j + 1] - nodes[j]) / dt;
        let e = 0.5 * (ms.a * v).dot(&v)
            - 0.5 * (ms.pot.eval(&nodes[j]) + ms.pot.eval(&nodes[j + 1]));
        mean += e / n as f64;
        lo = lo.min(e);
        hi = hi.max(e);
    }
    (mean, hi - lo)
}

fn build_orbit(
    ms: &MechanicalSystem,
    g: [i64; 2],
    tau: f64,
    m: &LocalMin,
    opts: &OrbitOptions,
    energy_target: Option<f64>,
) -> Result<PeriodicOrbit, AveragedError> {
    let n = opts.n_nodes;
    let dt = tau / n as f64;
    let (energy, drift) = discrete_energy(ms, &m.nodes, tau);
    // EL residual: A (phi_{j+1} - 2 phi_j + phi_{j-1}) / dt^2 - grad V.
    let mut el = 0.0f64;
    for j in 0..n {
        let prev = if j == 0 { m.nodes[n - 1] - m.nodes[n] + m.nodes[0] } else { m.nodes[j - 1] };
        let r = ms.a * (m.nodes[j + 1] - m.nodes[j] * 2.0 + prev) / (dt * dt)
            - ms.pot.grad(&m.nodes[j]);
        el = el.max(r.amax());
    }
    // Shooting-refined IC for the Floquet pass.
    let v0 = (m.nodes[1] - (m.nodes[n - 1] - m.nodes[n] + m.nodes[0])) / (2.0 * dt);
    let z0 = Vector4::new(m.nodes[0].x, m.nodes[0].y, v0.x, v0.y);
    let lift = Vector2::new(
        std::f64::consts::TAU * g[0] as f64,
        std::f64::consts::TAU * g[1] as f64,
    );
    let steps = (opts.int_factor * n).max(1024);
    let (z_ref, tau_ref, monodromy, action_ref) =
        shoot_refine(ms, &z0, tau, &lift, steps, energy_target);
    let (floquet, flag, defect) = extract_floquet(&monodromy, opts.hyperbolic_margin);
    let refined_energy =
        ms.energy_of(&Vector2::new(z_ref.x, z_ref.y), &Vector2::new(z_ref.z, z_ref.w));
    Ok(PeriodicOrbit {
        class: g,
        tau,
        nodes: m.nodes.clone(),
        action: m.action,
        energy: if energy_target.is_some() { refined_energy } else { energy },
        energy_drift: drift,
        el_residual: el,
        floquet,
        flag,
        floquet_product_defect: defect,
        refined_ic: ([z_ref.x, z_ref.y], [z_ref.z, z_ref.w]),
        refined_tau: tau_ref,
        refined_action: action_ref,
    })
}

/// One scanned point of a channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSample {
    pub lambda: f64,
    pub beta: f64,
    pub energy: f64,
    pub orbit_count: usize,
    pub is_bifurcation: bool,
    pub hyperbolic: bool,
    pub floquet_norm: f64,
    pub momentum_osc: f64,
    pub max_momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CylinderSegment {
    pub e_lo: f64,
    pub e_hi: f64,
    pub hyperbolicity_margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelData {
    pub class: [i64; 2],
    pub samples: Vec<ChannelSample>,
    pub bifurcation_lambdas: Vec<f64>,
    /// Energies at the bifurcation points, ordered increasingly.
    pub energies: Vec<f64>,
    pub segments: Vec<CylinderSegment>,
    /// Half the minimal gap between consecutive bifurcation energies.
    pub segment_pad: f64,
    /// Oscillation bound from the potential's slopes and the period-one
    /// energy; every scanned orbit's measured oscillation must stay below.
    pub osc_bound: f64,
    pub osc_measured_max: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelOptions {
    pub orbit: OrbitOptions,
    pub segment_pad_cap: f64,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        ChannelOptions { orbit: OrbitOptions::default(), segment_pad_cap: 0.1 }
    }
}

/// Scan a homology ray: continuation-seeded minimization over the lambda
/// grid, bifurcation detection by tied distinct minimizers, per-segment
/// hyperbolicity margins, and the oscillation bound check.
pub fn scan_channel(
    ms: &MechanicalSystem,
    g: [i64; 2],
    lambda_range: (f64, f64),
    n_grid: usize,
    opts: &ChannelOptions,
) -> Result<ChannelData, AveragedError> {
    if !is_primitive(&g) {
        return Err(AveragedError::BadClass(g));
    }
    if ms.pot.modes().all(|(n, _)| *n == (0, 0)) {
        return Err(AveragedError::DegenerateChannel);
    }
    assert!(lambda_range.0 > 0.0 && n_grid >= 16);
    let oo = &opts.orbit;
    let mut samples = Vec::new();
    let mut bif_lambdas = Vec::new();
    let mut energies = Vec::new();
    let mut seeds: Vec<Vec<Vector2<f64>>> = Vec::new();
    for i in 0..n_grid {
        let lambda = lambda_range.0
            + (lambda_range.1 - lambda_range.0) * i as f64 / (n_grid - 1) as f64;
        let tau = std::f64::consts::TAU / lambda;
        let minima = find_minima(ms, &g, tau, &seeds, oo)?;
        let tied: Vec<&LocalMin> = minima
            .iter()
            .filter(|m| m.action - minima[0].action < oo.act_tol)
            .collect();
        // Carry every tied minimizer forward so persistent double minima
        // stay tracked along the sweep.
        seeds = tied.iter().take(4).map(|m| m.nodes.clone()).collect();
        let is_bif = tied.len() >= 2;
        let orbit = build_orbit(ms, g, tau, &minima[0], oo, None)?;
        if is_bif {
            bif_lambdas.push(lambda);
            energies.push(orbit.energy);
        }
        let mu_norm = (orbit.floquet[0].0.powi(2) + orbit.floquet[0].1.powi(2)).sqrt();
        samples.push(ChannelSample {
            lambda,
            beta: orbit.beta_value(),
            energy: orbit.energy,
            orbit_count: tied.len(),
            is_bifurcation: is_bif,
            hyperbolic: orbit.flag == OrbitFlag::Hyperbolic,
            floquet_norm: mu_norm,
            momentum_osc: orbit.momentum_oscillation(ms),
            max_momentum: orbit.max_sheared_momentum(ms),
        });
    }
    // Merge adjacent bifurcation detections (one crossing can fire twice).
    let mut merged_l = Vec::new();
    let mut merged_e = Vec::new();
    for (l, e) in bif_lambdas.iter().zip(&energies) {
        if merged_l.last().map_or(true, |last: &f64| (l - last).abs() > 2.0 * (lambda_range.1 - lambda_range.0) / n_grid as f64) {
            merged_l.push(*l);
            merged_e.push(*e);
        }
    }
    merged_e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pad = if merged_e.len() >= 2 {
        let min_gap = merged_e
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        (min_gap / 2.0).min(opts.segment_pad_cap)
    } else {
        opts.segment_pad_cap
    };
    // Segments between bifurcation energies (including the scan ends).
    let e_min = samples.iter().map(|s| s.energy).fold(f64::INFINITY, f64::min);
    let e_max = samples.iter().map(|s| s.energy).fold(f64::NEG_INFINITY, f64::max);
    let mut cuts = vec![e_min];
    cuts.extend(&merged_e);
    cuts.push(e_max);
    let mut segments = Vec::new();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let margin = samples
            .iter()
            .filter(|s| s.energy >= lo && s.energy <= hi && !s.is_bifurcation)
            .map(|s| s.floquet_norm - 1.0)
            .fold(f64::INFINITY, f64::min);
        segments.push(CylinderSegment {
            e_lo: lo - pad,
            e_hi: hi + pad,
            hyperbolicity_margin: if margin.is_finite() { margin } else { 0.0 },
        });
    }
    // Oscillation bound: slopes of the potential and the period-one energy.
    let t = ms.x2_factor as f64;
    let (g1, g2) = ms.pot.sup_grad_components(128);
    let slope_term = 2.0 * g1.max(t * g2);
    let e1 = minimal_orbit(ms, g, OrbitTarget::Lambda(std::f64::consts::TAU), &oo.clone())
        .map(|o| o.energy)
        .unwrap_or(e_max);
    let (vmax, _) = ms.pot.max_on_grid(64);
    let m_small = ms.sheared_kinetic_min_eig();
    let osc_bound = slope_term.max(4.0 / m_small * (e1 + vmax).max(0.0).sqrt());
    let osc_measured = samples.iter().map(|s| s.momentum_osc).fold(0.0f64, f64::max);
    Ok(ChannelData {
        class: g,
        samples,
        bifurcation_lambdas: merged_l,
        energies: merged_e,
        segments,
        segment_pad: pad,
        osc_bound,
        osc_measured_max: osc_measured,
    })
}

/// Endpoint parameter where the sheared momentum reaches `y_target`
/// (bisection; max momentum grows with lambda).
pub fn lambda_endpoint(
    ms: &MechanicalSystem,
    g: [i64; 2],
    y_target: f64,
    lambda_bracket: (f64, f64),
    opts: &OrbitOptions,
) -> Result<f64, AveragedError> {
    let measure = |lambda: f64| -> Result<f64, AveragedError> {
        let o = minimal_orbit(ms, g, OrbitTarget::Lambda(lambda), opts)?;
        Ok(o.max_sheared_momentum(ms))
    };
    let (mut lo, mut hi) = lambda_bracket;
    let m_lo = measure(lo)?;
    let m_hi = measure(hi)?;
    if !(m_lo <= y_target && y_target <= m_hi) {
        return Err(AveragedError::EnergyBracket { target: y_target, lo: m_lo, hi: m_hi });
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if measure(mid)? < y_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Alpha/beta data along one homology ray.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaBeta {
    pub class: [i64; 2],
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    /// Supporting pairing `<c, g>` per sample (centered slopes of beta).
    pub mu: Vec<f64>,
    /// Alpha values at the sampled flats: `mu * lambda - beta`.
    pub alpha: Vec<f64>,
    /// Zero-rotation value `beta(0) = min V`.
    pub beta_zero: f64,
    /// Level and half-width of the flat at zero rotation.
    pub flat_level: f64,
    pub flat_halfwidth: f64,
    /// Worst violation of the Fenchel inequality on the sample grid.
    pub duality_violation: f64,
    /// Worst matched-pair duality gap.
    pub matched_gap: f64,
}

/// Beta samples along a ray, their discrete convex conjugate, and the flat
/// at zero rotation. Refuses to conjugate non-convex samples.
pub fn alpha_beta(
    ms: &MechanicalSystem,
    g: [i64; 2],
    lambda_grid: &[f64],
    opts: &OrbitOptions,
) -> Result<AlphaBeta, AveragedError> {
    if !is_primitive(&g) {
        return Err(AveragedError::BadClass(g));
    }
    let mut lambda: Vec<f64> = lambda_grid.to_vec();
    lambda.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut beta = Vec::with_capacity(lambda.len());
    let mut seeds: Vec<Vec<Vector2<f64>>> = Vec::new();
    for &l in &lambda {
        let tau = std::f64::consts::TAU / l;
        let minima = find_minima(ms, &g, tau, &seeds, opts)?;
        seeds = vec![minima[0].nodes.clone()];
        beta.push(minima[0].action / tau);
    }
    // Zero-rotation value: the minimal average action of a rest point, min V.
    let beta_zero = min_potential(ms);
    check_convexity(&lambda, &beta, beta_zero)?;
    // Supporting slopes by centered differences; ends one-sided.
    let n = lambda.len();
    let mut mu = vec![0.0; n];
    for i in 0..n {
        mu[i] = if i == 0 {
            (beta[1] - beta[0]) / (lambda[1] - lambda[0])
        } else if i == n - 1 {
            (beta[n - 1] - beta[n - 2]) / (lambda[n - 1] - lambda[n - 2])
        } else {
            (beta[i + 1] - beta[i - 1]) / (lambda[i + 1] - lambda[i - 1])
        };
    }
    let alpha: Vec<f64> = (0..n).map(|i| mu[i] * lambda[i] - beta[i]).collect();
    // Flat at zero rotation: level -beta(0), half width = right slope at 0.
    let flat_level = -beta_zero;
    let flat_halfwidth = (beta[0] - beta_zero) / lambda[0];
    // Fenchel checks on the grid (including the zero sample).
    let mut violation = 0.0f64;
    let mut matched = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let gap = alpha[i] + beta[j] - mu[i] * lambda[j];
            violation = violation.max(-gap);
            if i == j {
                matched = matched.max(gap.abs());
            }
        }
        let gap0 = alpha[i] + beta_zero;
        violation = violation.max(-gap0);
    }
    Ok(AlphaBeta {
        class: g,
        lambda,
        beta,
        mu,
        alpha,
        beta_zero,
        flat_level,
        flat_halfwidth,
        duality_violation: violation,
        matched_gap: matched,
    })
}

fn min_potential(ms: &MechanicalSystem) -> f64 {
    // min V = -max(-V); modes() yields both Hermitian sides, insert each once.
    let mut neg = Fourier2::new();
    for (nmode, (re, im)) in ms.pot.modes() {
        if *nmode == (0, 0) || *nmode > (-nmode.0, -nmode.1) {
            neg.add_mode(*nmode, num_complex::Complex64::new(-re, -im));
        }
    }
    -neg.max_on_grid(256).0
}

fn check_convexity(lambda: &[f64], beta: &[f64], beta_zero: f64) -> Result<(), AveragedError> {
    // Include the zero sample at the head.
    let mut xs = vec![0.0];
    xs.extend_from_slice(lambda);
    let mut ys = vec![beta_zero];
    ys.extend_from_slice(beta);
    for i in 0..xs.len().saturating_sub(2) {
        let (x0, x1, x2) = (xs[i], xs[i + 1], xs[i + 2]);
        let (y0, y1, y2) = (ys[i], ys[i + 1], ys[i + 2]);
        let s01 = (y1 - y0) / (x1 - x0);
        let s12 = (y2 - y1) / (x2 - x1);
        if s12 < s01 - 1e-7 * (1.0 + s01.abs()) {
            return Err(AveragedError::NonConvexSamples([i, i + 1, i + 2]));
        }
    }
    Ok(())
}

/// Affine embedding of a channel's alpha graph into `H^1(T^3)`.
///
/// A class `c` of the averaged frame with normalized alpha value `a`
/// (min alpha = 0) lifts to the momentum-like vector
/// `L (w'' + (sqrt(eps) c_x1, sqrt(eps) c_x2, -eps a / omega3))` where
/// `c_x = diag(1, |k''|) c` is the class in the sheared frame. The site
/// momentum is the image of the zero class at the flat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelEmbedding {
    pub l_mat: nalgebra::Matrix3<f64>,
    pub l_inv: nalgebra::Matrix3<f64>,
    pub w_dd: Vector3<f64>,
    pub eps: f64,
    pub omega3: f64,
    pub x2_factor: i64,
    pub points: Vec<Vector3<f64>>,
}

impl ChannelEmbedding {
    pub fn embed(&self, c_avg: &Vector2<f64>, alpha_norm: f64) -> Vector3<f64> {
        let se = self.eps.sqrt();
        let t = self.x2_factor as f64;
        let c_x = Vector2::new(c_avg.x, t * c_avg.y);
        self.l_mat
            * (self.w_dd
                + Vector3::new(se * c_x.x, se * c_x.y, -self.eps * alpha_norm / self.omega3))
    }

    pub fn unembed(&self, p: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let w = self.l_inv * p - self.w_dd;
        let se = self.eps.sqrt();
        let t = self.x2_factor as f64;
        (
            Vector2::new(w.x / se, w.y / (se * t)),
            -w.z * self.omega3 / self.eps,
        )
    }

    pub fn site_center(&self) -> Vector3<f64> {
        self.l_mat * self.w_dd
    }

    pub fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for i in 0..self.points.len() {
            for j in (i + 1)..self.points.len() {
                d = d.max((self.points[i] - self.points[j]).norm());
            }
        }
        d
    }
}

/// Embed the supporting classes of an alpha/beta scan through a site's
/// transform chain.
pub fn embed_channel(ab: &AlphaBeta, chain: &TransformChain) -> ChannelEmbedding {
    let gf = Vector2::new(ab.class[0] as f64, ab.class[1] as f64);
    let alpha_min = ab.flat_level.min(
        ab.alpha.iter().cloned().fold(f64::INFINITY, f64::min),
    );
    let mut emb = ChannelEmbedding {
        l_mat: chain.frame.l_mat,
        l_inv: chain.frame.l_inv,
        w_dd: chain.frame.w_dd,
        eps: chain.eps,
        omega3: chain.frame.omega3,
        x2_factor: chain.frame.kpp_abs,
        points: Vec::new(),
    };
    let mut pts = Vec::new();
    for i in 0..ab.lambda.len() {
        let c = gf * (ab.mu[i] / gf.norm_squared());
        pts.push(emb.embed(&c, ab.alpha[i] - alpha_min));
    }
    emb.points = pts;
    emb
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub xi: f64,
    pub required_length: f64,
    pub measured_length: f64,
    pub passes: bool,
    pub site_a: Vector3<f64>,
    pub site_b: Vector3<f64>,
}

/// Channel overlap between two adjacent reduced sites: the arc length along
/// the circle whose `xi sqrt(eps)/4` disc maps into both local domains,
/// compared against `(xi/2) sqrt(eps)`.
pub fn overlap_check(
    circle: &crate::resonance::ResonanceCircle,
    chain_a: &TransformChain,
    chain_b: &TransformChain,
    xi: f64,
    n_samples: usize,
) -> OverlapReport {
    let eps = chain_a.eps;
    let se = eps.sqrt();
    let margin = xi * se / 4.0;
    let inside = |chain: &TransformChain, p: &Vector3<f64>| -> bool {
        let m0_inv_t = lattice_inv_t(chain);
        let pbar = m0_inv_t * p;
        let radius = (chain.eta * chain.frame.kpp_abs as f64).recip() * eps.powf(chain.kappa);
        let d = (pbar - chain.frame.pbar_dd).amax();
        d <= radius - margin
    };
    let circ = circle.circumference();
    let mut measured = 0.0;
    let ds = circ / n_samples as f64;
    for i in 0..n_samples {
        let p = circle.at_arclen(circ * i as f64 / n_samples as f64);
        if inside(chain_a, &p) && inside(chain_b, &p) {
            measured += ds;
        }
    }
    let required = xi / 2.0 * se;
    OverlapReport {
        xi,
        required_length: required,
        measured_length: measured,
        passes: measured >= required,
        site_a: chain_a.frame.p_dd,
        site_b: chain_b.frame.p_dd,
    }
}

fn lattice_inv_t(chain: &TransformChain) -> nalgebra::Matrix3<f64> {
    crate::lattice::to_f64(&chain.frame.triple.m0_inv_t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn free_system() -> MechanicalSystem {
        MechanicalSystem::new(Matrix2::identity(), Fourier2::new())
    }

    #[test]
    fn constant_angle_orbit_action() {
        // A = I, V = cos p1 - 1, g = (0,1), tau = 2 pi: phi1 = pi, phi2 = t,
        // action 2 pi (1/2 + V(pi)) = -3 pi.
        let ms = MechanicalSystem::pendulum_rotator();
        let opts = OrbitOptions { n_nodes: 256, ..Default::default() };
        let o = minimal_orbit(&ms, [0, 1], OrbitTarget::Lambda(1.0), &opts).unwrap();
        assert_relative_eq!(o.action, -3.0 * std::f64::consts::PI, epsilon = 1e-6);
        for nref in &o.nodes {
            assert!((wrap_pi(nref.x - std::f64::consts::PI)).abs() < 1e-6);
        }
        assert_eq!(o.flag, OrbitFlag::Hyperbolic);
        assert!(o.floquet_product_defect < 1e-6);
        // Multipliers e^{+-2 pi}.
        let mu = (o.floquet[0].0.powi(2) + o.floquet[0].1.powi(2)).sqrt();
        assert_relative_eq!(mu.max(1.0 / mu), (std::f64::consts::TAU).exp(), max_relative = 1e-4);
    }

    #[test]
    fn free_motion_is_degenerate() {
        let ms = free_system();
        let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Lambda(1.0), &OrbitOptions::default())
            .unwrap();
        assert_relative_eq!(o.action, std::f64::consts::PI, epsilon = 1e-9);
        assert_eq!(o.flag, OrbitFlag::Degenerate);
    }

    #[test]
    fn rotation_orbit_matches_quadrature() {
        // Pendulum rotation at E = 3: period and action from the 1-D
        // quadrature oracle tau = int dphi/sqrt(2(E+V)),
        // S = int (E + 2V)/sqrt(2(E+V)) dphi.
        let ms = MechanicalSystem::pendulum_rotator();
        let quad = |f: &dyn Fn(f64) -> f64| -> f64 {
            let n = 20000;
            let h = std::f64::consts::TAU / n as f64;
            let mut s = 0.0;
            for i in 0..n {
                let a = i as f64 * h;
                s += h / 6.0 * (f(a) + 4.0 * f(a + h / 2.0) + f(a + h));
            }
            s
        };
        let vpot = |x: f64| x.cos() - 1.0;
        let tau_oracle = quad(&|x| 1.0 / (2.0 * (3.0 + vpot(x))).sqrt());
        let s_oracle = quad(&|x| (3.0 + 2.0 * vpot(x)) / (2.0 * (3.0 + vpot(x))).sqrt());
        let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
        let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Energy(3.0), &opts).unwrap();
        assert_relative_eq!(o.refined_tau, tau_oracle, epsilon = 1e-4);
        assert_relative_eq!(o.refined_action, s_oracle, epsilon = 1e-4);
        assert!(o.floquet_product_defect < 1e-6);
        assert_relative_eq!(o.energy, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn discretization_converges_under_refinement() {
        let ms = MechanicalSystem::pendulum_rotator();
        let a1 = minimal_orbit(
            &ms,
            [1, 0],
            OrbitTarget::Lambda(2.0),
            &OrbitOptions { n_nodes: 1024, ..Default::default() },
        )
        .unwrap()
        .action;
        let a2 = minimal_orbit(
            &ms,
            [1, 0],
            OrbitTarget::Lambda(2.0),
            &OrbitOptions { n_nodes: 2048, ..Default::default() },
        )
        .unwrap()
        .action;
        assert!((a1 - a2).abs() < 1e-6, "delta = {}", (a1 - a2).abs());
    }

    #[test]
    fn el_residual_small_after_refinement() {
        let ms = MechanicalSystem::pendulum_rotator();
        let opts = OrbitOptions::default();
        let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Lambda(1.5), &opts).unwrap();
        assert!(o.el_residual < 1e-8, "EL residual {}", o.el_residual);
        // The trapezoid discretization conserves energy to O(dt^2).
        let dt = o.tau / opts.n_nodes as f64;
        assert!(o.energy_drift < 10.0 * dt * dt, "energy drift {}", o.energy_drift);
    }

    #[test]
    fn rejects_imprimitive_class() {
        let ms = MechanicalSystem::pendulum_rotator();
        assert!(matches!(
            minimal_orbit(&ms, [2, 4], OrbitTarget::Lambda(1.0), &OrbitOptions::default()),
            Err(AveragedError::BadClass(_))
        ));
    }

    #[test]
    fn pendulum_channel_has_no_bifurcations() {
        let ms = MechanicalSystem::pendulum_rotator();
        let ch = scan_channel(&ms, [1, 0], (1.0, 2.5), 16, &ChannelOptions::default()).unwrap();
        assert!(ch.bifurcation_lambdas.is_empty());
        assert!(ch.osc_measured_max <= ch.osc_bound + 1e-9);
    }

    #[test]
    fn two_well_channel_bifurcates_everywhere() {
        // V = (cos 2 phi1 - 1)/2 has two symmetric wells at phi1 = pi/2 and
        // 3 pi/2. Minimal (0,1)-orbits sit in one well each; the shift
        // phi1 -> phi1 + pi exchanges them at equal action, so the detector
        // must flag a tied pair at every lambda.
        let mut pot = Fourier2::new();
        pot.add_cos((2, 0), 0.5);
        pot.add_constant(-0.5);
        let ms = MechanicalSystem::new(Matrix2::identity(), pot);
        let mut opts = ChannelOptions::default();
        opts.orbit.n_starts = 12;
        let ch = scan_channel(&ms, [0, 1], (1.0, 2.0), 16, &opts).unwrap();
        let flagged = ch.samples.iter().filter(|s| s.is_bifurcation).count();
        assert_eq!(
            flagged,
            ch.samples.len(),
            "only {flagged} of {} samples flagged",
            ch.samples.len()
        );
        // Oracle: the two wells give identical actions by the symmetry.
        for s in &ch.samples {
            assert!(s.orbit_count >= 2);
        }
    }

    #[test]
    fn degenerate_channel_rejected() {
        let ms = free_system();
        assert!(matches!(
            scan_channel(&ms, [1, 0], (1.0, 2.0), 16, &ChannelOptions::default()),
            Err(AveragedError::DegenerateChannel)
        ));
    }

    #[test]
    fn pendulum_rotation_oscillation_matches_quadrature() {
        // Osc of y1 along the E = 3 rotation orbit: max - min of
        // sqrt(2(3+V)) over V = cos(phi1) - 1 in [-2, 0] is sqrt(6) - sqrt(2).
        let ms = MechanicalSystem::pendulum_rotator();
        let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
        let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Energy(3.0), &opts).unwrap();
        let osc = o.momentum_oscillation(&ms);
        assert_relative_eq!(osc, 6.0f64.sqrt() - 2.0f64.sqrt(), epsilon = 1e-3);
    }

    #[test]
    fn free_alpha_beta_is_quadratic() {
        let ms = free_system();
        let grid: Vec<f64> = (1..=8).map(|i| 0.4 * i as f64).collect();
        let ab = alpha_beta(&ms, [1, 0], &grid, &OrbitOptions::default()).unwrap();
        for (i, &l) in ab.lambda.iter().enumerate() {
            assert_relative_eq!(ab.beta[i], 0.5 * l * l, epsilon = 1e-8);
        }
        // alpha(c) = c^2/2 at the matched samples (centered slopes are exact
        // for the quadratic except at the ends).
        for i in 1..ab.lambda.len() - 1 {
            assert_relative_eq!(ab.alpha[i], 0.5 * ab.mu[i] * ab.mu[i], epsilon = 1e-6);
        }
        assert!(ab.duality_violation < 1e-8);
    }

    #[test]
    fn pendulum_flat_boundary_and_level() {
        let ms = MechanicalSystem::pendulum_rotator();
        let grid: Vec<f64> = vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
        let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
        let ab = alpha_beta(&ms, [1, 0], &grid, &opts).unwrap();
        assert_relative_eq!(ab.flat_level, 2.0, epsilon = 1e-3);
        assert_relative_eq!(ab.flat_halfwidth, 4.0 / std::f64::consts::PI, epsilon = 1e-3);
        assert_relative_eq!(ab.beta_zero, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn nonconvex_samples_refused() {
        let err = check_convexity(&[1.0, 2.0, 3.0], &[0.0, 2.0, 2.5], -0.5);
        assert!(matches!(err, Err(AveragedError::NonConvexSamples(_))));
    }

    #[test]
    fn orbit_distance_quotients_symmetry() {
        let ms = MechanicalSystem::pendulum_rotator();
        let n = 64;
        let mk = |offset: f64| -> Vec<Vector2<f64>> {
            (0..=n)
                .map(|j| {
                    Vector2::new(
                        std::f64::consts::TAU * j as f64 / n as f64,
                        1.0 + offset,
                    )
                })
                .collect()
        };
        let a = mk(0.0);
        let b = mk(2.5); // differs only along the phi2 symmetry
        assert!(orbit_distance(&ms, &a, &b) < 1e-9);
        // Constant-phi1 loops at different phi1 are genuinely distinct:
        // no time shift or phi2 translation relates them.
        let c: Vec<Vector2<f64>> = (0..=n)
            .map(|j| Vector2::new(1.0, std::f64::consts::TAU * j as f64 / n as f64))
            .collect();
        let d: Vec<Vector2<f64>> = (0..=n)
            .map(|j| Vector2::new(2.2, std::f64::consts::TAU * j as f64 / n as f64))
            .collect();
        assert!(orbit_distance(&ms, &c, &d) > 0.5);
    }
}
