//! Discrete weak-KAM machinery: a short-time action kernel on a torus grid,
//! Lax-Oleinik value iteration for backward/forward solutions, elementary
//! solutions on the double cover selected by vanishing penalties, barrier
//! fields, argmin component diagnostics, and the modulus-of-continuity fit.
//!
//! All solutions are gauged to zero mean; only differences, argmin sets and
//! the drift (the alpha value) are contract-bearing.

use nalgebra::Vector2;
#[cfg(test)]
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaged::MechanicalSystem;

#[derive(Debug, Error)]
pub enum WeakKamError {
    #[error("grid resolution {0} below the minimum of 32")]
    GridTooCoarse(usize),
    #[error("tau^2 |V''| = {0} too large for a unique short segment (cap 0.1)")]
    TauTooLarge(f64),
    #[error("two distinct short-segment minimizers persist after halving tau")]
    NonUniqueShortSegment,
    #[error("Lax-Oleinik did not converge: residual {residual} after {iters} iterations")]
    NotConverged {
        residual: f64,
        iters: usize,
        partial: Box<WeakKAMSolution>,
    },
    #[error("the lifted Aubry copies are not separated at grid resolution")]
    CopiesNotSeparated,
    #[error("double cover requires an even first resolution, got {0}")]
    OddCoverResolution(usize),
    #[error("need at least {need} parameter samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cover {
    /// Base torus: both angles mod 2 pi.
    Base,
    /// Double cover in the first angle: q1 mod 4 pi, q2 mod 2 pi.
    DoubleQ1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    pub cover: Cover,
    pub n1: usize,
    pub n2: usize,
}

impl TorusGrid {
    pub fn new(cover: Cover, n1: usize, n2: usize) -> Result<Self, WeakKamError> {
        if n1 < 32 {
            return Err(WeakKamError::GridTooCoarse(n1));
        }
        if n2 < 32 {
            return Err(WeakKamError::GridTooCoarse(n2));
        }
        if cover == Cover::DoubleQ1 && n1 % 2 != 0 {
            return Err(WeakKamError::OddCoverResolution(n1));
        }
        Ok(TorusGrid { cover, n1, n2 })
    }

    pub fn len1(&self) -> f64 {
        match self.cover {
            Cover::Base => std::f64::consts::TAU,
            Cover::DoubleQ1 => 2.0 * std::f64::consts::TAU,
        }
    }

    pub fn h1(&self) -> f64 {
        self.len1() / self.n1 as f64
    }

    pub fn h2(&self) -> f64 {
        std::f64::consts::TAU / self.n2 as f64
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn idx(&self, i1: usize, i2: usize) -> usize {
        i1 * self.n2 + i2
    }

    pub fn point(&self, i1: usize, i2: usize) -> Vector2<f64> {
        Vector2::new(i1 as f64 * self.h1(), i2 as f64 * self.h2())
    }

    pub fn wrap(&self, i1: i64, i2: i64) -> (usize, usize) {
        (
            (i1.rem_euclid(self.n1 as i64)) as usize,
            (i2.rem_euclid(self.n2 as i64)) as usize,
        )
    }

    /// Torus distance between cell centers, respecting the cover periods.
    pub fn torus_dist(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let l1 = self.len1();
        let d1 = (a.0 as f64 - b.0 as f64).abs() * self.h1();
        let d1 = d1.min(l1 - d1);
        let d2 = (a.1 as f64 - b.1 as f64).abs() * self.h2();
        let d2 = d2.min(std::f64::consts::TAU - d2);
        (d1 * d1 + d2 * d2).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Field2D {
    pub grid: TorusGrid,
    pub data: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: TorusGrid) -> Self {
        Field2D { data: vec![0.0; grid.len()], grid }
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: TorusGrid, f: F) -> Self {
        let mut data = vec![0.0; grid.len()];
        for i1 in 0..grid.n1 {
            for i2 in 0..grid.n2 {
                let p = grid.point(i1, i2);
                data[grid.idx(i1, i2)] = f(p.x, p.y);
            }
        }
        Field2D { grid, data }
    }

    pub fn at(&self, i1: usize, i2: usize) -> f64 {
        self.data[self.grid.idx(i1, i2)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn subtract_mean(&mut self) {
        let m = self.mean();
        for v in &mut self.data {
            *v -= m;
        }
    }

    pub fn sup_diff(&self, other: &Field2D) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
    }

    /// Forward difference in the first angle at midpoints, |du/dq1|.
    pub fn forward_d1_abs(&self, i1: usize, i2: usize) -> f64 {
        let (j1, j2) = self.grid.wrap(i1 as i64 + 1, i2 as i64);
        ((self.at(j1, j2) - self.at(i1, i2)) / self.grid.h1()).abs()
    }

    /// Centered second difference along an axis, normalized by spacing^2.
    pub fn second_difference(&self, i1: usize, i2: usize, axis: usize) -> f64 {
        let (p, m, h) = if axis == 0 {
            (
                self.grid.wrap(i1 as i64 + 1, i2 as i64),
                self.grid.wrap(i1 as i64 - 1, i2 as i64),
                self.grid.h1(),
            )
        } else {
            (
                self.grid.wrap(i1 as i64, i2 as i64 + 1),
                self.grid.wrap(i1 as i64, i2 as i64 - 1),
                self.grid.h2(),
            )
        };
        (self.at(p.0, p.1) - 2.0 * self.at(i1, i2) + self.at(m.0, m.1)) / (h * h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Offset {
    di: i64,
    dj: i64,
    dq: Vector2<f64>,
}

/// Short-time action kernel `S_{-tau}(q', q)` on all grid pairs within the
/// speed horizon `|q - q'| <= 2 D tau`, minimized over one interior node with
/// midpoint potential sampling and Newton refinement.
pub struct ActionKernel {
    pub grid: TorusGrid,
    pub tau: f64,
    pub speed_bound: f64,
    pub ms: MechanicalSystem,
    offsets: Vec<Offset>,
    offset_ids: std::collections::HashMap<(i64, i64), usize>,
    /// svals[from * n_offsets + o] = S(q_from, q_from + dq_o).
    svals: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    pub speed_bound: f64,
    /// Fraction of pairs probed with extra starts for segment uniqueness.
    pub probe_fraction: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { speed_bound: 3.0, probe_fraction: 0.01 }
    }
}

/// Value and end-gradients of the two-segment minimal action between two
/// points of the plane (envelope theorem at the optimal interior node).
fn segment_action(
    ms: &MechanicalSystem,
    tau: f64,
    from: &Vector2<f64>,
    to: &Vector2<f64>,
    extra_start: Option<Vector2<f64>>,
) -> (f64, Vector2<f64>, Vector2<f64>, Vector2<f64>) {
    let mut m = extra_start.unwrap_or((from + to) * 0.5);
    for _ in 0..12 {
        let g = (ms.a * (m - from)) * (2.0 / tau) - (ms.a * (to - m)) * (2.0 / tau)
            + (ms.pot.grad(&((from + m) * 0.5)) + ms.pot.grad(&((m + to) * 0.5))) * (tau / 4.0);
        if g.amax() < 1e-13 {
            break;
        }
        let h = ms.a * (4.0 / tau)
            + (ms.pot.hessian(&((from + m) * 0.5)) + ms.pot.hessian(&((m + to) * 0.5)))
                * (tau / 8.0);
        match h.try_inverse() {
            Some(hi) => m -= hi * g,
            None => break,
        }
    }
    let seg = |a: &Vector2<f64>, b: &Vector2<f64>| -> f64 {
        let d = b - a;
        (ms.a * d).dot(&d) / tau + (tau / 2.0) * ms.pot.eval(&((a + b) * 0.5))
    };
    let s = seg(from, &m) + seg(&m, to);
    let d_to = (ms.a * (to - m)) * (2.0 / tau) + ms.pot.grad(&((m + to) * 0.5)) * (tau / 4.0);
    let d_from = (ms.a * (from - m)) * (2.0 / tau) + ms.pot.grad(&((from + m) * 0.5)) * (tau / 4.0);
    (s, d_from, d_to, m)
}

pub fn build_kernel(
    ms: &MechanicalSystem,
    grid: TorusGrid,
    tau: f64,
    opts: &KernelOptions,
) -> Result<ActionKernel, WeakKamError> {
    // Curvature cap guaranteeing a unique interior node.
    let vpp = sup_hessian_norm(ms);
    let mut tau = tau;
    if tau * tau * vpp >= 0.1 {
        return Err(WeakKamError::TauTooLarge(tau * tau * vpp));
    }
    for attempt in 0..2 {
        match try_build(ms, grid, tau, opts) {
            Ok(k) => return Ok(k),
            Err(WeakKamError::NonUniqueShortSegment) if attempt == 0 => {
                tau *= 0.5; // one automatic halving, then give up
            }
            Err(e) => return Err(e),
        }
    }
    Err(WeakKamError::NonUniqueShortSegment)
}

fn sup_hessian_norm(ms: &MechanicalSystem) -> f64 {
    let mut m = 0.0f64;
    for i in 0..32 {
        for j in 0..32 {
            let x = Vector2::new(
                i as f64 / 32.0 * std::f64::consts::TAU,
                j as f64 / 32.0 * std::f64::consts::TAU,
            );
            m = m.max(ms.pot.hessian(&x).norm());
        }
    }
    m
}

fn try_build(
    ms: &MechanicalSystem,
    grid: TorusGrid,
    tau: f64,
    opts: &KernelOptions,
) -> Result<ActionKernel, WeakKamError> {
    let horizon = 2.0 * opts.speed_bound * tau;
    let r1 = (horizon / grid.h1()).ceil() as i64;
    let r2 = (horizon / grid.h2()).ceil() as i64;
    let mut offsets = Vec::new();
    for di in -r1..=r1 {
        for dj in -r2..=r2 {
            let dq = Vector2::new(di as f64 * grid.h1(), dj as f64 * grid.h2());
            if dq.norm() <= horizon {
                offsets.push(Offset { di, dj, dq });
            }
        }
    }
    let n_off = offsets.len();
    let svals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|p| {
            let i1 = p / grid.n2;
            let i2 = p % grid.n2;
            let from = grid.point(i1, i2);
            let ms = ms.clone();
            let offsets = offsets.clone();
            (0..n_off).map(move |o| {
                let to = from + offsets[o].dq;
                segment_action(&ms, tau, &from, &to, None).0
            })
        })
        .collect();
    let offset_ids = offsets
        .iter()
        .enumerate()
        .map(|(o, off)| ((off.di, off.dj), o))
        .collect();
    let kernel = ActionKernel {
        grid,
        tau,
        speed_bound: opts.speed_bound,
        ms: ms.clone(),
        offsets,
        offset_ids,
        svals,
    };
    // Uniqueness probe: perturbed interior starts must land on the same value.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let n_probe = ((grid.len() as f64) * opts.probe_fraction) as usize + 8;
    for _ in 0..n_probe {
        let i1 = rng.gen_range(0..grid.n1);
        let i2 = rng.gen_range(0..grid.n2);
        let o = rng.gen_range(0..n_off);
        let from = grid.point(i1, i2);
        let to = from + kernel.offsets[o].dq;
        let base = kernel.svals[grid.idx(i1, i2) * n_off + o];
        for _ in 0..3 {
            let jitter = Vector2::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
            let start = (from + to) * 0.5 + jitter;
            let (s, _, _, _) = segment_action(&kernel.ms, tau, &from, &to, Some(start));
            if s < base - 1e-9 * (1.0 + base.abs()) {
                return Err(WeakKamError::NonUniqueShortSegment);
            }
        }
    }
    Ok(kernel)
}

impl ActionKernel {
    pub fn n_offsets(&self) -> usize {
        self.offsets.len()
    }

    fn offset_id(&self, di: i64, dj: i64) -> Option<usize> {
        self.offset_ids.get(&(di, dj)).copied()
    }

    pub fn s_at(&self, from: (usize, usize), o: usize) -> f64 {
        self.svals[self.grid.idx(from.0, from.1) * self.offsets.len() + o]
    }

    /// Exact evaluator for checks and the continuous polish.
    pub fn eval_pair(
        &self,
        from: &Vector2<f64>,
        to: &Vector2<f64>,
    ) -> (f64, Vector2<f64>, Vector2<f64>) {
        let (s, d_from, d_to, _) = segment_action(&self.ms, self.tau, from, to, None);
        (s, d_from, d_to)
    }

    /// Sampled twist check: the cross derivative d^2 S / dq dq' must be
    /// negative definite along the axes.
    pub fn twist_check(&self, n_samples: usize, seed: u64) -> bool {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for _ in 0..n_samples {
            let from = Vector2::new(
                rng.gen_range(0.0..self.grid.len1()),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let dq = Vector2::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * (self.speed_bound * self.tau * 0.5);
            let to = from + dq;
            for axis in 0..2 {
                let mut fp = from;
                fp[axis] += h;
                let (_, _, g_plus) = self.eval_pair(&fp, &to);
                let (_, _, g_minus) = self.eval_pair(&from, &to);
                let d = (g_plus[axis] - g_minus[axis]) / h;
                if d >= 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Backward,
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideTag {
    Plain,
    Left,
    Right,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakKAMSolution {
    pub direction: Direction,
    pub side: SideTag,
    pub u: Field2D,
    pub c: [f64; 2],
    pub residual: f64,
    pub alpha_estimate: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Continuous sub-grid polish of the final drift estimate.
    pub polish: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-9, max_iters: 4000, polish: true }
    }
}

/// One min-plus (backward) or max-plus (forward) step. `add_from`/`add_to`
/// are endpoint potentials added to the kernel (penalties, bumps), scaled by
/// the caller.
pub fn lax_oleinik_step(
    kernel: &ActionKernel,
    u: &Field2D,
    c: &Vector2<f64>,
    direction: Direction,
    add_from: Option<&Field2D>,
    add_to: Option<&Field2D>,
) -> Field2D {
    let grid = kernel.grid;
    let n_off = kernel.offsets.len();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let i1 = p / grid.n2;
            let i2 = p % grid.n2;
            match direction {
                Direction::Backward => {
                    // u_new(q) = min_{q'} S(q', q) - <c, q - q'> + u(q').
                    let mut best = f64::INFINITY;
                    for (o, off) in kernel.offsets.iter().enumerate() {
                        // q' = q - dq, stored at the q' row.
                        let (f1, f2) = grid.wrap(i1 as i64 - off.di, i2 as i64 - off.dj);
                        let mut v = kernel.svals[grid.idx(f1, f2) * n_off + o]
                            - c.dot(&off.dq)
                            + u.at(f1, f2);
                        if let Some(af) = add_from {
                            v += af.at(f1, f2);
                        }
                        if let Some(at) = add_to {
                            v += at.at(i1, i2);
                        }
                        if v < best {
                            best = v;
                        }
                    }
                    best
                }
                Direction::Forward => {
                    // u_new(q) = max_{q''} u(q'') - S(q, q'') + <c, q'' - q>.
                    let mut best = f64::NEG_INFINITY;
                    for (o, off) in kernel.offsets.iter().enumerate() {
                        let (t1, t2) = grid.wrap(i1 as i64 + off.di, i2 as i64 + off.dj);
                        let mut v = u.at(t1, t2)
                            - kernel.svals[grid.idx(i1, i2) * n_off + o]
                            + c.dot(&off.dq);
                        if let Some(af) = add_from {
                            v -= af.at(i1, i2);
                        }
                        if let Some(at) = add_to {
                            v -= at.at(t1, t2);
                        }
                        if v > best {
                            best = v;
                        }
                    }
                    best
                }
            }
        })
        .collect();
    Field2D { grid, data }
}

/// Argmin / argmax offset index per grid point for one step.
pub fn lax_oleinik_argmin(
    kernel: &ActionKernel,
    u: &Field2D,
    c: &Vector2<f64>,
    direction: Direction,
) -> Vec<usize> {
    let grid = kernel.grid;
    let n_off = kernel.offsets.len();
    (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let i1 = p / grid.n2;
            let i2 = p % grid.n2;
            let mut best = (f64::INFINITY, 0usize);
            for (o, off) in kernel.offsets.iter().enumerate() {
                let v = match direction {
                    Direction::Backward => {
                        let (f1, f2) = grid.wrap(i1 as i64 - off.di, i2 as i64 - off.dj);
                        kernel.svals[grid.idx(f1, f2) * n_off + o] - c.dot(&off.dq) + u.at(f1, f2)
                    }
                    Direction::Forward => {
                        let (t1, t2) = grid.wrap(i1 as i64 + off.di, i2 as i64 + off.dj);
                        -(u.at(t1, t2) - kernel.svals[grid.idx(i1, i2) * n_off + o]
                            + c.dot(&off.dq))
                    }
                };
                if v < best.0 {
                    best = (v, o);
                }
            }
            best.1
        })
        .collect()
}

/// Iterate the Lax-Oleinik operator to its additive fixed point. The drift
/// per step estimates `alpha(c)` (negated for the backward operator); the
/// final estimate uses a continuous sub-grid polish when enabled.
pub fn lax_oleinik(
    kernel: &ActionKernel,
    c: Vector2<f64>,
    u0: Option<Field2D>,
    direction: Direction,
    opts: &SolveOptions,
) -> Result<WeakKAMSolution, Box<WeakKamError>> {
    let (sol, extras) = lax_oleinik_with(kernel, c, u0, direction, None, opts)?;
    let _ = extras;
    Ok(sol)
}

pub(crate) fn lax_oleinik_with(
    kernel: &ActionKernel,
    c: Vector2<f64>,
    u0: Option<Field2D>,
    direction: Direction,
    add_from: Option<&Field2D>,
    opts: &SolveOptions,
) -> Result<(WeakKAMSolution, f64), Box<WeakKamError>> {
    let mut u = u0.unwrap_or_else(|| Field2D::zeros(kernel.grid));
    u.subtract_mean();
    let mut drift = 0.0;
    let mut residual = f64::INFINITY;
    let mut iters = 0;
    for it in 0..opts.max_iters {
        iters = it + 1;
        let mut next = lax_oleinik_step(kernel, &u, &c, direction, add_from, None);
        drift = next.mean() - u.mean();
        // Shift-invariant residual.
        residual = next
            .data
            .iter()
            .zip(&u.data)
            .map(|(a, b)| (a - b - drift).abs())
            .fold(0.0f64, f64::max);
        next.subtract_mean();
        u = next;
        if residual < opts.tol {
            break;
        }
    }
    let mut alpha = match direction {
        Direction::Backward => -drift / kernel.tau,
        Direction::Forward => drift / kernel.tau,
    };
    if opts.polish {
        // Continue with the sub-cell refined operator; its drift removes the
        // offset-lattice quantization. On non-hyperbolic classes the residual
        // decays only slowly, so the drift is averaged over a tail window.
        let polish_cap = if residual < opts.tol { 500 } else { 150 };
        let mut ur = u.clone();
        let mut tail: Vec<f64> = Vec::new();
        let mut refined_converged = false;
        for _ in 0..polish_cap {
            let mut next = refined_step(kernel, &ur, &c, direction, add_from);
            let d = next.mean() - ur.mean();
            let r = next
                .data
                .iter()
                .zip(&ur.data)
                .map(|(a, b)| (a - b - d).abs())
                .fold(0.0f64, f64::max);
            next.subtract_mean();
            ur = next;
            tail.push(d);
            if r < opts.tol && tail.len() >= 3 {
                refined_converged = true;
                break;
            }
        }
        // Take the refined drift when the refined operator settles, or as a
        // best effort when the discrete iteration never converged. At a
        // converged discrete fixed point whose refined corrections keep
        // oscillating (kink cells), the discrete eigenvalue is the cleaner
        // number and is kept.
        if refined_converged || residual >= opts.tol {
            let window = tail.len().min(50);
            let d_avg = tail[tail.len() - window..].iter().sum::<f64>() / window as f64;
            alpha = match direction {
                Direction::Backward => -d_avg / kernel.tau,
                Direction::Forward => d_avg / kernel.tau,
            };
        }
    }
    let sol = WeakKAMSolution {
        direction,
        side: SideTag::Plain,
        u,
        c: [c.x, c.y],
        residual,
        alpha_estimate: alpha,
        iterations: iters,
    };
    if residual >= opts.tol {
        return Err(Box::new(WeakKamError::NotConverged {
            residual,
            iters,
            partial: Box::new(sol),
        }));
    }
    Ok((sol, drift))
}

/// One application of the sub-cell refined operator: a quadratic is fitted to
/// the nine exact discrete objective values around each point's argmin offset
/// and minimized inside one cell. Where the local quadratic is not positive
/// definite (kink cells) the discrete value is kept, so the correction only
/// uses trusted structure. For a quadratic objective (free kinetic case) the
/// refinement is exact.
fn refined_step(
    kernel: &ActionKernel,
    u: &Field2D,
    c: &Vector2<f64>,
    direction: Direction,
    add_from: Option<&Field2D>,
) -> Field2D {
    let grid = kernel.grid;
    let n_off = kernel.offsets.len();
    let obj = |p: usize, o: usize| -> f64 {
        let i1 = p / grid.n2;
        let i2 = p % grid.n2;
        let off = &kernel.offsets[o];
        match direction {
            Direction::Backward => {
                let (f1, f2) = grid.wrap(i1 as i64 - off.di, i2 as i64 - off.dj);
                kernel.svals[grid.idx(f1, f2) * n_off + o] - c.dot(&off.dq)
                    + u.at(f1, f2)
                    + add_from.map_or(0.0, |a| a.at(f1, f2))
            }
            Direction::Forward => {
                let (t1, t2) = grid.wrap(i1 as i64 + off.di, i2 as i64 + off.dj);
                -(u.at(t1, t2) - kernel.svals[grid.idx(i1, i2) * n_off + o] + c.dot(&off.dq)
                    - add_from.map_or(0.0, |a| a.at(i1, i2)))
            }
        }
    };
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0usize);
            for o in 0..n_off {
                let v = obj(p, o);
                if v < best.0 {
                    best = (v, o);
                }
            }
            let f0 = best.0;
            let off = kernel.offsets[best.1];
            // Nine-point stencil in offset space.
            let mut fval = [[0.0f64; 3]; 3];
            let mut ok = true;
            'stencil: for (a, da) in (-1i64..=1).enumerate() {
                for (b, db) in (-1i64..=1).enumerate() {
                    match kernel.offset_id(off.di + da, off.dj + db) {
                        Some(o) => fval[a][b] = obj(p, o),
                        None => {
                            ok = false;
                            break 'stencil;
                        }
                    }
                }
            }
            let refined = if ok {
                let (h1, h2) = (grid.h1(), grid.h2());
                let gx = (fval[2][1] - fval[0][1]) / (2.0 * h1);
                let gy = (fval[1][2] - fval[1][0]) / (2.0 * h2);
                let hxx = (fval[2][1] - 2.0 * fval[1][1] + fval[0][1]) / (h1 * h1);
                let hyy = (fval[1][2] - 2.0 * fval[1][1] + fval[1][0]) / (h2 * h2);
                let hxy = (fval[2][2] - fval[2][0] - fval[0][2] + fval[0][0]) / (4.0 * h1 * h2);
                let det = hxx * hyy - hxy * hxy;
                if hxx > 0.0 && det > 0.0 {
                    let dx = (-(gx * hyy - gy * hxy) / det).clamp(-h1, h1);
                    let dy = (-(gy * hxx - gx * hxy) / det).clamp(-h2, h2);
                    let corr = gx * dx + gy * dy
                        + 0.5 * (hxx * dx * dx + 2.0 * hxy * dx * dy + hyy * dy * dy);
                    if corr < 0.0 {
                        f0 + corr
                    } else {
                        f0
                    }
                } else {
                    f0
                }
            } else {
                f0
            };
            match direction {
                Direction::Backward => refined,
                Direction::Forward => -refined,
            }
        })
        .collect();
    Field2D { grid, data }
}

/// Connected components (8-neighbor, periodic) of a cell set.
pub fn components(grid: &TorusGrid, cells: &[bool]) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; cells.len()];
    let mut out = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let i1 = p / grid.n2;
            let i2 = p % grid.n2;
            comp.push((i1, i2));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = grid.wrap(i1 as i64 + di, i2 as i64 + dj);
                    let q = grid.idx(a, b);
                    if cells[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementaryBundle {
    pub ul_minus: WeakKAMSolution,
    pub ul_plus: WeakKAMSolution,
    pub ur_minus: WeakKAMSolution,
    pub ur_plus: WeakKAMSolution,
    /// Lifted Aubry proxy cells of the two copies.
    pub copy_left: Vec<(usize, usize)>,
    pub copy_right: Vec<(usize, usize)>,
    /// Max deviation from the base solution on the matching tubes (gauge
    /// aligned), per side and direction.
    pub matching_deviation: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ElementaryOptions {
    pub solve: SolveOptions,
    /// Tube half-width in grid cells for the penalty support and matching.
    pub tube_cells: usize,
    /// Sublevel threshold locating the base Aubry proxy.
    pub argmin_level: f64,
}

impl Default for ElementaryOptions {
    fn default() -> Self {
        ElementaryOptions {
            solve: SolveOptions::default(),
            tube_cells: 4,
            argmin_level: 1e-4,
        }
    }
}

/// Elementary solutions on the double cover: the two lifted Aubry copies are
/// located from the base-torus barrier, each side is solved with a bump
/// penalty supported in a tube around the opposite copy, and the vanishing-
/// penalty limit is taken by two-level Richardson extrapolation.
pub fn elementary_solutions(
    kernel_cover: &ActionKernel,
    c: Vector2<f64>,
    penalty_levels: &[f64],
    opts: &ElementaryOptions,
) -> Result<ElementaryBundle, Box<WeakKamError>> {
    assert!(
        kernel_cover.grid.cover == Cover::DoubleQ1,
        "elementary solutions live on the double cover"
    );
    assert!(penalty_levels.len() >= 2, "need at least two penalty levels");
    let cover = kernel_cover.grid;
    // Base-torus solve.
    let base_grid = TorusGrid::new(Cover::Base, cover.n1 / 2, cover.n2).map_err(Box::new)?;
    let base_kernel = try_build(
        &kernel_cover.ms,
        base_grid,
        kernel_cover.tau,
        &KernelOptions { speed_bound: kernel_cover.speed_bound, probe_fraction: 0.0 },
    )
    .map_err(Box::new)?;
    let um = lax_oleinik(&base_kernel, c, None, Direction::Backward, &opts.solve)?;
    let up = lax_oleinik(&base_kernel, c, None, Direction::Forward, &opts.solve)?;
    // Base Aubry proxy: argmin of the base barrier plus invariance filtering.
    let mut b = Field2D::zeros(base_grid);
    for i in 0..b.data.len() {
        b.data[i] = um.u.data[i] - up.u.data[i];
    }
    let bmin = b.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut set: Vec<bool> = b.data.iter().map(|v| v - bmin <= opts.argmin_level).collect();
    for _ in 0..2 {
        set = invariance_filter(&base_kernel, &um.u, &up.u, &c, &set);
    }
    // Lift to the cover and split into components.
    let mut lifted = vec![false; cover.len()];
    for i1 in 0..cover.n1 {
        for i2 in 0..cover.n2 {
            if set[base_grid.idx(i1 % base_grid.n1, i2)] {
                lifted[cover.idx(i1, i2)] = true;
            }
        }
    }
    let comps = components(&cover, &lifted);
    if comps.len() < 2 {
        return Err(Box::new(WeakKamError::CopiesNotSeparated));
    }
    // Group components into the two deck translates: cells in [0, 2 pi) make
    // the left copy by the lift-ordering convention.
    let half = cover.n1 / 2;
    let mut copy_left: Vec<(usize, usize)> = Vec::new();
    let mut copy_right: Vec<(usize, usize)> = Vec::new();
    for comp in &comps {
        let left_cells = comp.iter().filter(|(i1, _)| *i1 < half).count();
        if left_cells * 2 > comp.len() {
            copy_left.extend(comp.iter().cloned());
        } else {
            copy_right.extend(comp.iter().cloned());
        }
    }
    if copy_left.is_empty() || copy_right.is_empty() {
        return Err(Box::new(WeakKamError::CopiesNotSeparated));
    }
    // Tube distance fields and separation check.
    let dist_l = distance_cells(&cover, &copy_left);
    let dist_r = distance_cells(&cover, &copy_right);
    let tube = opts.tube_cells as f64;
    let sep = copy_left
        .iter()
        .map(|&cell| dist_r[cover.idx(cell.0, cell.1)])
        .fold(f64::INFINITY, f64::min);
    if sep <= 2.0 * tube {
        return Err(Box::new(WeakKamError::CopiesNotSeparated));
    }
    // Penalty profiles: cos^2 bump inside the tube around each copy.
    let bump = |dist: &[f64]| -> Field2D {
        let mut f = Field2D::zeros(cover);
        for (i, d) in dist.iter().enumerate() {
            if *d <= tube {
                let x = *d / tube * std::f64::consts::FRAC_PI_2;
                f.data[i] = x.cos().powi(2);
            }
        }
        f
    };
    let bump_l = bump(&dist_l);
    let bump_r = bump(&dist_r);

    let solve_side = |opposite: &Field2D, dir: Direction| -> Result<WeakKAMSolution, Box<WeakKamError>> {
        let mut levels: Vec<WeakKAMSolution> = Vec::new();
        let mut seed: Option<Field2D> = None;
        for &v in penalty_levels {
            let mut pen = opposite.clone();
            for x in &mut pen.data {
                *x *= v * kernel_cover.tau / 2.0;
            }
            let (sol, _) =
                lax_oleinik_with(kernel_cover, c, seed.clone(), dir, Some(&pen), &opts.solve)?;
            seed = Some(sol.u.clone());
            levels.push(sol);
        }
        // Two-level Richardson extrapolation to penalty zero (levels halve).
        let n = levels.len();
        let (u1, u2) = (&levels[n - 2].u, &levels[n - 1].u);
        let mut u = u2.clone();
        for i in 0..u.data.len() {
            u.data[i] = 2.0 * u2.data[i] - u1.data[i];
        }
        u.subtract_mean();
        let mut out = levels[n - 1].clone();
        out.u = u;
        Ok(out)
    };
    let mut ul_minus = solve_side(&bump_r, Direction::Backward)?;
    let mut ul_plus = solve_side(&bump_r, Direction::Forward)?;
    let mut ur_minus = solve_side(&bump_l, Direction::Backward)?;
    let mut ur_plus = solve_side(&bump_l, Direction::Forward)?;
    ul_minus.side = SideTag::Left;
    ul_plus.side = SideTag::Left;
    ur_minus.side = SideTag::Right;
    ur_plus.side = SideTag::Right;

    // Matching with the lifted base solution near the own copy.
    let lift_field = |f: &Field2D| -> Field2D {
        let mut out = Field2D::zeros(cover);
        for i1 in 0..cover.n1 {
            for i2 in 0..cover.n2 {
                out.data[cover.idx(i1, i2)] = f.at(i1 % base_grid.n1, i2);
            }
        }
        out
    };
    let base_minus = lift_field(&um.u);
    let base_plus = lift_field(&up.u);
    let mut matching = 0.0f64;
    let mut check = |sol: &WeakKAMSolution, base: &Field2D, dist: &[f64]| {
        let cells: Vec<usize> = (0..cover.len()).filter(|&i| dist[i] <= tube).collect();
        if cells.is_empty() {
            return;
        }
        let gauge = cells
            .iter()
            .map(|&i| sol.u.data[i] - base.data[i])
            .sum::<f64>()
            / cells.len() as f64;
        for &i in &cells {
            matching = matching.max((sol.u.data[i] - base.data[i] - gauge).abs());
        }
    };
    check(&ul_minus, &base_minus, &dist_l);
    check(&ul_plus, &base_plus, &dist_l);
    check(&ur_minus, &base_minus, &dist_r);
    check(&ur_plus, &base_plus, &dist_r);

    Ok(ElementaryBundle {
        ul_minus,
        ul_plus,
        ur_minus,
        ur_plus,
        copy_left,
        copy_right,
        matching_deviation: matching,
    })
}

/// Keep cells whose one-step backward and forward partners stay in the set.
fn invariance_filter(
    kernel: &ActionKernel,
    u_minus: &Field2D,
    u_plus: &Field2D,
    c: &Vector2<f64>,
    set: &[bool],
) -> Vec<bool> {
    let grid = kernel.grid;
    let back = lax_oleinik_argmin(kernel, u_minus, c, Direction::Backward);
    let fwd = lax_oleinik_argmin(kernel, u_plus, c, Direction::Forward);
    (0..grid.len())
        .map(|p| {
            if !set[p] {
                return false;
            }
            let i1 = p / grid.n2;
            let i2 = p % grid.n2;
            let ob = kernel.offsets[back[p]];
            let of = kernel.offsets[fwd[p]];
            let (b1, b2) = grid.wrap(i1 as i64 - ob.di, i2 as i64 - ob.dj);
            let (f1, f2) = grid.wrap(i1 as i64 + of.di, i2 as i64 + of.dj);
            set[grid.idx(b1, b2)] && set[grid.idx(f1, f2)]
        })
        .collect()
}

/// Grid distance (in cells, Euclidean over the wrapped index offsets) to a
/// cell set, by multi-source BFS relaxation.
fn distance_cells(grid: &TorusGrid, cells: &[(usize, usize)]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut frontier: Vec<(usize, usize)> = cells.to_vec();
    for &(a, b) in cells {
        dist[grid.idx(a, b)] = 0.0;
    }
    // Chamfer-style sweeps are enough at these resolutions.
    for _ in 0..grid.n1.max(grid.n2) {
        let mut changed = false;
        let mut next = Vec::new();
        for &(i1, i2) in &frontier {
            let d0 = dist[grid.idx(i1, i2)];
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = grid.wrap(i1 as i64 + di, i2 as i64 + dj);
                    let w = ((di * di + dj * dj) as f64).sqrt();
                    let q = grid.idx(a, b);
                    if d0 + w < dist[q] - 1e-12 {
                        dist[q] = d0 + w;
                        next.push((a, b));
                        changed = true;
                    }
                }
            }
        }
        frontier = next;
        if !changed {
            break;
        }
    }
    dist
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierField {
    pub b: Field2D,
    pub min: f64,
    /// Cells within the solver tolerance of the minimum.
    pub argmin: Vec<(usize, usize)>,
}

/// Pointwise difference of a backward and a forward solution on one grid.
/// Both inputs must be mean-zero (the shared gauge).
pub fn barrier(ul_minus: &WeakKAMSolution, ur_plus: &WeakKAMSolution) -> BarrierField {
    assert_eq!(ul_minus.u.grid, ur_plus.u.grid, "barrier needs one grid");
    assert!(ul_minus.u.mean().abs() < 1e-8 && ur_plus.u.mean().abs() < 1e-8);
    let grid = ul_minus.u.grid;
    let mut b = Field2D::zeros(grid);
    for i in 0..b.data.len() {
        b.data[i] = ul_minus.u.data[i] - ur_plus.u.data[i];
    }
    let min = b.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = (ul_minus.residual + ur_plus.residual).max(1e-12) * 10.0;
    let argmin: Vec<(usize, usize)> = (0..grid.len())
        .filter(|&i| b.data[i] - min <= tol)
        .map(|i| (i / grid.n2, i % grid.n2))
        .collect();
    BarrierField { b, min, argmin }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Square {
    pub center: (f64, f64),
    pub half_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentReport {
    pub cells: usize,
    pub diameter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArgminReport {
    pub delta_level: f64,
    pub components: Vec<ComponentReport>,
    pub max_diameter: f64,
    /// Per declared square: true when the sublevel set is trivial for it
    /// (neither axis projection of any component covers the square).
    pub square_verdicts: Vec<(Square, bool)>,
    pub sublevel_cells: usize,
}

/// Flood-fill components of `{B <= min B + delta_level}`, their diameters,
/// and the projection-triviality verdict per declared square.
pub fn argmin_components(
    barrier: &BarrierField,
    delta_level: f64,
    squares: &[Square],
) -> ArgminReport {
    let grid = barrier.b.grid;
    let cells: Vec<bool> = barrier
        .b
        .data
        .iter()
        .map(|v| v - barrier.min <= delta_level)
        .collect();
    let comps = components(&grid, &cells);
    let mut reports = Vec::new();
    let mut max_d = 0.0f64;
    for comp in &comps {
        let mut d = 0.0f64;
        // Diameter via the bounding structure; exact pairwise is fine at
        // these component sizes but cap the work on huge blobs.
        if comp.len() <= 4000 {
            for i in 0..comp.len() {
                for j in (i + 1)..comp.len() {
                    d = d.max(grid.torus_dist(comp[i], comp[j]));
                }
            }
        } else {
            d = (grid.len1().powi(2) + std::f64::consts::TAU.powi(2)).sqrt() / 2.0;
        }
        max_d = max_d.max(d);
        reports.push(ComponentReport { cells: comp.len(), diameter: d });
    }
    let verdicts = squares
        .iter()
        .map(|sq| {
            let in_square = |cell: (usize, usize)| -> bool {
                let p = grid.point(cell.0, cell.1);
                wrap_dist(p.x, sq.center.0, grid.len1()) <= sq.half_width
                    && wrap_dist(p.y, sq.center.1, std::f64::consts::TAU) <= sq.half_width
            };
            // Non-trivial iff some component's restriction to the square
            // covers the full projection interval on axis 1 or axis 2.
            let cols = (2.0 * sq.half_width / grid.h1()).floor() as usize;
            let rows = (2.0 * sq.half_width / grid.h2()).floor() as usize;
            let mut nontrivial = false;
            for comp in &comps {
                let inside: Vec<(usize, usize)> =
                    comp.iter().cloned().filter(|&c| in_square(c)).collect();
                if inside.is_empty() {
                    continue;
                }
                let distinct1 = distinct_count(inside.iter().map(|c| c.0));
                let distinct2 = distinct_count(inside.iter().map(|c| c.1));
                if distinct1 >= cols.max(1) || distinct2 >= rows.max(1) {
                    nontrivial = true;
                    break;
                }
            }
            (*sq, !nontrivial)
        })
        .collect();
    ArgminReport {
        delta_level,
        components: reports,
        max_diameter: max_d,
        square_verdicts: verdicts,
        sublevel_cells: cells.iter().filter(|x| **x).count(),
    }
}

fn wrap_dist(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs() % period;
    d.min(period - d)
}

fn distinct_count<I: Iterator<Item = usize>>(it: I) -> usize {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[derive(Debug, Clone)]
pub struct ModulusSample {
    pub sigma: f64,
    pub c: [f64; 2],
    pub barrier: Field2D,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulusReport {
    /// Fitted constant of |B - B'| <= C (sqrt|ds| + |dc|) on the region.
    pub c_fit: f64,
    /// Holder exponent fitted on sigma-only pairs (0.5 expected).
    pub sigma_exponent: Option<f64>,
    /// Lipschitz slope fitted on c-only pairs.
    pub c_slope: Option<f64>,
    pub n_pairs: usize,
}

/// Fit the half-Holder-in-sigma plus Lipschitz-in-c modulus on a family of
/// barrier fields restricted to a region mask.
pub fn modulus_check(
    samples: &[ModulusSample],
    mask: &[bool],
) -> Result<ModulusReport, WeakKamError> {
    if samples.len() < 3 {
        return Err(WeakKamError::TooFewSamples { need: 3, got: samples.len() });
    }
    let sup_on = |a: &Field2D, b: &Field2D| -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((x, y), _)| (x - y).abs())
            .fold(0.0f64, f64::max)
    };
    let mut c_fit = 0.0f64;
    let mut c_pairs: Vec<(f64, f64)> = Vec::new();
    let mut n_pairs = 0;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let d = sup_on(&samples[i].barrier, &samples[j].barrier);
            let ds = (samples[i].sigma - samples[j].sigma).abs();
            let dc = ((samples[i].c[0] - samples[j].c[0]).powi(2)
                + (samples[i].c[1] - samples[j].c[1]).powi(2))
            .sqrt();
            let denom = ds.sqrt() + dc;
            if denom > 1e-14 {
                c_fit = c_fit.max(d / denom);
                n_pairs += 1;
            }
            if ds < 1e-14 && dc > 1e-14 && d > 0.0 {
                c_pairs.push((dc, d));
            }
        }
    }
    // Holder exponent in sigma from pairs anchored at the smallest sigma of
    // each c-group (anchored differences isolate the sqrt scaling).
    let mut sig_pairs: Vec<(f64, f64)> = Vec::new();
    for i in 0..samples.len() {
        let anchor = samples
            .iter()
            .filter(|s| {
                (s.c[0] - samples[i].c[0]).abs() < 1e-14
                    && (s.c[1] - samples[i].c[1]).abs() < 1e-14
            })
            .min_by(|a, b| a.sigma.partial_cmp(&b.sigma).unwrap())
            .unwrap();
        let ds = (samples[i].sigma - anchor.sigma).abs();
        if ds > 1e-14 {
            let d = sup_on(&samples[i].barrier, &anchor.barrier);
            if d > 0.0 {
                sig_pairs.push((ds.ln(), d.ln()));
            }
        }
    }
    let sigma_exponent = if sig_pairs.len() >= 2 {
        let n = sig_pairs.len() as f64;
        let sx: f64 = sig_pairs.iter().map(|p| p.0).sum();
        let sy: f64 = sig_pairs.iter().map(|p| p.1).sum();
        let sxx: f64 = sig_pairs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = sig_pairs.iter().map(|p| p.0 * p.1).sum();
        Some((n * sxy - sx * sy) / (n * sxx - sx * sx))
    } else {
        None
    };
    let c_slope = if !c_pairs.is_empty() {
        Some(c_pairs.iter().map(|(dc, d)| d / dc).fold(0.0f64, f64::max))
    } else {
        None
    };
    Ok(ModulusReport { c_fit, sigma_exponent, c_slope, n_pairs })
}
