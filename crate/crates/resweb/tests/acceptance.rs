//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Tolerances are pinned in code.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resweb::averaged::{
    alpha_beta, embed_channel, minimal_orbit, overlap_check, scan_channel, ChannelOptions,
    MechanicalSystem, OrbitOptions, OrbitTarget,
};
use resweb::estimates::{verify_deviation, DeviationOptions};
use resweb::fourier::{Fourier2, FourierSeries3};
use resweb::lattice::{dirichlet_approx, dist_to_int, totally_irreducible, unimodular_complete};
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::normalform::{
    homological_residual, homological_solve, reduce, remainder_sweep, resonant_average,
    rotate_perturbation, symmetry_check, NfOptions,
};
use resweb::poly::Poly;
use resweb::resonance::{dirichlet_cover, find_double_resonances, trace_circle};
use resweb::weakkam::{
    barrier, build_kernel, elementary_solutions, lax_oleinik, lax_oleinik_step, Cover, Direction,
    ElementaryOptions, Field2D, KernelOptions, SolveOptions, TorusGrid,
};

fn unit_system(modes: Vec<([i64; 3], &str)>, eps: f64, energy: f64) -> NearlyIntegrableSystem {
    let mut pert = FourierSeries3::new();
    for (k, c) in modes {
        pert.add_cos(k, Poly::parse(c).unwrap());
    }
    NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, eps, energy, 6).unwrap()
}

fn site_at(
    sys: &NearlyIntegrableSystem,
    k_prime: [i64; 3],
    p: Vector3<f64>,
    kappa: f64,
    k_star: f64,
) -> resweb::resonance::DoubleResonance {
    let circle = trace_circle(&sys.h, sys.energy, &k_prime, 512).unwrap();
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, kappa, k_star).unwrap();
    rep.found
        .into_iter()
        .find(|d| (d.p_dd - p).norm() < 1e-8)
        .expect("requested double resonance")
}

#[test]
fn acceptance_01_lattice_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut tested = 0;
    while tested < 1000 {
        let k = [
            rng.gen_range(-50i64..=50),
            rng.gen_range(-50i64..=50),
            rng.gen_range(-50i64..=50),
        ];
        if k == [0, 0, 0] || !totally_irreducible(&k).unwrap() {
            continue;
        }
        tested += 1;
        let t = unimodular_complete(&k).unwrap();
        assert_eq!(t.det().abs(), 1, "determinant not unimodular at {k:?}");
        assert_eq!([t.m0_t[0][0], t.m0_t[1][0], t.m0_t[2][0]], k);
    }
    let mut worst_margin = f64::INFINITY;
    for _ in 0..10_000 {
        let omega = rng.gen_range(-20.0f64..20.0);
        let kb = rng.gen_range(1.5f64..2000.0);
        let k = dirichlet_approx(omega, kb);
        assert!(k >= 1 && (k as f64) < kb);
        let d = dist_to_int(k as f64 * omega);
        assert!(d <= 1.0 / kb + 1e-12, "bound violated: {d} > 1/{kb}");
        worst_margin = worst_margin.min(1.0 / kb - d);
    }
    println!(
        "acceptance 01 lattice exactness: PASS (1000 completions det +-1, 10^4 approximations in bound, min slack {worst_margin:.2e})"
    );
}

#[test]
fn acceptance_02_covering() {
    let h = ConvexHamiltonian::unit(3.0);
    let circle = trace_circle(&h, 0.5, &[1, 1, 1], 1024).unwrap();
    let kappa = 0.15;
    let t_exponent = (1.0 - 3.0 * kappa) / 3.0;
    for eps in [1e-2, 1e-3, 1e-4] {
        let rep = dirichlet_cover(&h, &circle, eps, kappa, 1.0, 10_000).unwrap();
        assert!(
            rep.is_covered(),
            "eps = {eps}: {} of {} samples uncovered",
            rep.uncovered_samples.len(),
            rep.n_checked
        );
        let t_cap = eps.powf(-t_exponent);
        assert!(
            (rep.max_period as f64) <= t_cap,
            "eps = {eps}: period {} above eps^(-0.18333) = {t_cap}",
            rep.max_period
        );
    }
    println!("acceptance 02 covering: PASS (zero uncovered at 10^4 checks for eps in 1e-2..1e-4, periods within the budget)");
}

#[test]
fn acceptance_03_homological_identity() {
    let sys = unit_system(
        vec![([1, 0, 0], "1.0"), ([0, 1, -1], "1.0"), ([1, -1, 0], "1.0")],
        1e-3,
        1.0,
    );
    let dr = site_at(&sys, [1, 0, 0], Vector3::new(0.0, 1.0, 1.0), 0.15, 1.0);
    let triple = resweb::lattice::unimodular_complete(&dr.k_prime).unwrap();
    let pbar = rotate_perturbation(&sys.pert, &triple);
    let z = resonant_average(&sys, &dr).unwrap();
    let f = homological_solve(&sys, &dr).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = Vector3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        let q = Vector3::new(
            rng.gen_range(0.0..6.28),
            rng.gen_range(0.0..6.28),
            rng.gen_range(0.0..6.28),
        );
        worst = worst.max(homological_residual(&sys, &dr, &f, &z, &pbar, &p, &q).abs());
    }
    assert!(worst < 1e-12, "identity residual {worst}");
    println!("acceptance 03 homological identity: PASS (max residual {worst:.2e} over 10^3 points)");
}

#[test]
fn acceptance_04_normal_form_blocks() {
    let sys = unit_system(vec![([1, 0, 0], "1.0"), ([0, 1, -1], "0.5")], 1e-3, 1.0);
    let dr = site_at(&sys, [1, 0, 0], Vector3::new(0.0, 1.0, 1.0), 0.15, 1.0);
    assert_eq!(dr.k_second, [0, 1, -1]);
    let opts = NfOptions::default();
    let (nf, chain) = reduce(&sys, &dr, 0.15, 1.0, 0.25, &opts).unwrap();
    // Independent oracle: B_tilde = M M^t for the shear of (0, 1, -1).
    let m_t = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 1.0);
    let oracle = m_t.transpose() * m_t;
    let tol = 1e-14;
    assert!((nf.b[(0, 0)] - oracle[(0, 0)]).abs() <= tol);
    assert!((nf.b[(0, 1)] - oracle[(0, 1)]).abs() <= tol);
    assert!((nf.b[(1, 1)] - oracle[(1, 1)]).abs() <= tol);
    assert_eq!(nf.b, Matrix2::new(1.0, 0.0, 0.0, 2.0));
    assert_eq!(nf.b_prime, Vector2::new(0.0, -1.0));
    assert_eq!(nf.b_dprime, 1.0);
    let sym = symmetry_check(&sys, &chain, &nf, 100, &opts).unwrap();
    assert!(sym.max_discrepancy < 1e-9, "symmetry {}", sym.max_discrepancy);
    println!(
        "acceptance 04 normal form blocks: PASS (B = [[1,0],[0,2]], B' = (0,-1), B'' = 1 exactly; symmetry {:.2e})",
        sym.max_discrepancy
    );
}

#[test]
fn acceptance_05_remainder_scaling() {
    // Quartic correction makes the kinetic tail genuinely nonzero; the
    // momentum-dependent coefficient does the same for the resonant term.
    let h = ConvexHamiltonian::polynomial(
        Poly::parse("0.5*(p1^2 + p2^2 + p3^2) + 0.1*p1^4").unwrap(),
        3.0,
    );
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::parse("0.5 + 0.3*p2").unwrap());
    pert.add_cos([1, -1, 0], Poly::parse("0.6").unwrap());
    let sys = NearlyIntegrableSystem::new(h, pert, 1e-2, 1.0, 6).unwrap();
    let dr = site_at(&sys, [1, 0, 0], Vector3::new(0.0, 1.0, 1.0), 0.15, 1.0);
    let kappa = 0.15;
    let eps_list = [1e-2, 1e-3, 1e-4, 1e-5];
    let opts = NfOptions { grid: (4, 4, 2, 3), ..Default::default() };
    let rep = remainder_sweep(&sys, &dr, kappa, 1.0, 0.25, &eps_list, &opts).unwrap();
    let r1 = rep.fit_r1.clone().unwrap();
    let rh = rep.fit_rh.clone().unwrap();
    let gd = rep.fit_g_diff.clone().unwrap();
    assert!(!r1.exact_zero && r1.slope >= kappa - 0.02, "R1 slope {}", r1.slope);
    assert!(!rh.exact_zero && rh.slope >= kappa - 0.02, "Rh slope {}", rh.slope);
    assert!(gd.max_residual < 0.20, "G fit residual {}", gd.max_residual);
    for row in &rep.rows {
        let bound = gd.constant * row.eps.powf(kappa) * (1.0 + gd.max_residual);
        assert!(
            row.g_diff <= bound,
            "|G_eps - G_0| = {} above fitted * eps^kappa = {bound} at eps = {}",
            row.g_diff,
            row.eps
        );
    }
    println!(
        "acceptance 05 remainder scaling: PASS (slopes R1 {:.3}, Rh {:.3} >= {:.2}; |Ge-G0| fit residual {:.1}%)",
        r1.slope,
        rh.slope,
        kappa - 0.02,
        100.0 * gd.max_residual
    );
}

#[test]
fn acceptance_06_pendulum_alpha_flat() {
    let ms = MechanicalSystem::pendulum_rotator();
    let grid = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
    let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
    let ab = alpha_beta(&ms, [1, 0], &grid, &opts).unwrap();
    let c_star = 4.0 / std::f64::consts::PI;
    // Quadrature oracle for the boundary: (1/2pi) * integral sqrt(2(2+V)).
    let oracle: f64 = {
        let n = 40000;
        let h = std::f64::consts::TAU / n as f64;
        let f = |x: f64| (2.0f64 * (2.0 + x.cos() - 1.0)).sqrt();
        (0..n)
            .map(|i| {
                let a = i as f64 * h;
                h / 6.0 * (f(a) + 4.0 * f(a + h / 2.0) + f(a + h))
            })
            .sum::<f64>()
            / std::f64::consts::TAU
    };
    assert!((oracle - c_star).abs() < 1e-9, "oracle sanity");
    assert!(
        (ab.flat_halfwidth - c_star).abs() < 1e-3,
        "flat boundary {} vs 4/pi {}",
        ab.flat_halfwidth,
        c_star
    );
    assert!((ab.flat_level - 2.0).abs() < 1e-3, "flat level {}", ab.flat_level);
    println!(
        "acceptance 06 pendulum alpha flat: PASS (boundary {:.6} vs 4/pi = {:.6}, level {:.6})",
        ab.flat_halfwidth, c_star, ab.flat_level
    );
}

#[test]
fn acceptance_07_minimal_orbit_oracle() {
    let ms = MechanicalSystem::pendulum_rotator();
    let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
    // Rotation orbit at E = 3 against the 1-D quadrature.
    let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Energy(3.0), &opts).unwrap();
    let quad = |f: &dyn Fn(f64) -> f64| -> f64 {
        let n = 40000;
        let h = std::f64::consts::TAU / n as f64;
        (0..n)
            .map(|i| {
                let a = i as f64 * h;
                h / 6.0 * (f(a) + 4.0 * f(a + h / 2.0) + f(a + h))
            })
            .sum()
    };
    let vpot = |x: f64| x.cos() - 1.0;
    let tau_oracle = quad(&|x| 1.0 / (2.0 * (3.0 + vpot(x))).sqrt());
    let s_oracle = quad(&|x| (3.0 + 2.0 * vpot(x)) / (2.0 * (3.0 + vpot(x))).sqrt());
    assert!((o.refined_tau - tau_oracle).abs() < 1e-4, "period {} vs {}", o.refined_tau, tau_oracle);
    assert!((o.refined_action - s_oracle).abs() < 1e-4, "action {} vs {}", o.refined_action, s_oracle);
    assert!(o.floquet_product_defect < 1e-6, "product defect {}", o.floquet_product_defect);
    // Constant-angle orbit of class (0,1).
    let o2 = minimal_orbit(&ms, [0, 1], OrbitTarget::Lambda(1.0), &opts).unwrap();
    assert!(
        (o2.action + 3.0 * std::f64::consts::PI).abs() < 1e-6,
        "action {} vs -3 pi",
        o2.action
    );
    assert!(o2.floquet_product_defect < 1e-6);
    println!(
        "acceptance 07 minimal orbit oracle: PASS (tau/action match quadrature to {:.1e}/{:.1e}, Floquet defects {:.1e}/{:.1e})",
        (o.refined_tau - tau_oracle).abs(),
        (o.refined_action - s_oracle).abs(),
        o.floquet_product_defect,
        o2.floquet_product_defect
    );
}

#[test]
fn acceptance_08_weak_kam() {
    // Free case: alpha(c) = |c|^2/2 for 10 random classes.
    let free = MechanicalSystem::new(Matrix2::identity(), Fourier2::new());
    let kernel = build_kernel(
        &free,
        TorusGrid::new(Cover::Base, 48, 48).unwrap(),
        0.35,
        &KernelOptions { speed_bound: 2.0, probe_fraction: 0.005 },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst_alpha = 0.0f64;
    for _ in 0..10 {
        let c = Vector2::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
        let sol =
            lax_oleinik(&kernel, c, None, Direction::Backward, &SolveOptions::default()).unwrap();
        worst_alpha = worst_alpha.max((sol.alpha_estimate - 0.5 * c.norm_squared()).abs());
    }
    assert!(worst_alpha < 1e-4, "free alpha error {worst_alpha}");

    // Pendulum: alpha at the zero class and the gradient profile.
    let ms = MechanicalSystem::pendulum_rotator();
    let kp = build_kernel(
        &ms,
        TorusGrid::new(Cover::Base, 256, 32).unwrap(),
        0.2,
        &KernelOptions { speed_bound: 2.6, probe_fraction: 0.002 },
    )
    .unwrap();
    let sol = lax_oleinik(&kp, Vector2::zeros(), None, Direction::Backward, &SolveOptions::default())
        .unwrap();
    assert!((sol.alpha_estimate - 2.0).abs() < 1e-3, "pendulum alpha {}", sol.alpha_estimate);
    let h1 = kp.grid.h1();
    let mut worst_profile = 0.0f64;
    for i1 in 0..kp.grid.n1 {
        let fd = sol.u.forward_d1_abs(i1, 0);
        let target = 2.0 * ((i1 as f64 + 0.5) * h1 / 2.0).cos().abs();
        worst_profile = worst_profile.max((fd - target).abs());
    }
    assert!(
        worst_profile <= 3.0 * h1,
        "gradient profile off by {worst_profile} > 3 h = {}",
        3.0 * h1
    );

    // Non-expansiveness on 100 random field pairs.
    let c = Vector2::new(0.2, 0.1);
    for _ in 0..100 {
        let u = Field2D {
            grid: kernel.grid,
            data: (0..kernel.grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let mut v = u.clone();
        for x in &mut v.data {
            *x += rng.gen_range(-0.5..0.5);
        }
        let tu = lax_oleinik_step(&kernel, &u, &c, Direction::Backward, None, None);
        let tv = lax_oleinik_step(&kernel, &v, &c, Direction::Backward, None, None);
        assert!(tu.sup_diff(&tv) <= u.sup_diff(&v) + 1e-12);
    }
    println!(
        "acceptance 08 weak kam: PASS (free alpha {:.1e}, pendulum alpha {:.6}, profile {:.4} <= {:.4}, non-expansive)",
        worst_alpha,
        sol.alpha_estimate,
        worst_profile,
        3.0 * h1
    );
}

#[test]
fn acceptance_09_barrier_properties() {
    let ms = MechanicalSystem::pendulum_rotator();
    let kernel = build_kernel(
        &ms,
        TorusGrid::new(Cover::DoubleQ1, 128, 32).unwrap(),
        0.2,
        &KernelOptions { speed_bound: 2.6, probe_fraction: 0.002 },
    )
    .unwrap();
    let bundle = elementary_solutions(
        &kernel,
        Vector2::zeros(),
        &[0.4, 0.2],
        &ElementaryOptions::default(),
    )
    .unwrap();
    let bf = barrier(&bundle.ul_minus, &bundle.ur_plus);
    // The lifted separatrix branch connects the two copies; with the exact
    // dynamics the barrier vanishes along it. delta_level must dominate the
    // grid discretization of the two solutions.
    let delta_level = 0.05;
    assert!(bf.min.abs() <= delta_level, "barrier min {} beyond delta", bf.min);
    // Points on the projected branch reach within delta_level of the min.
    let grid = bf.b.grid;
    let mut on_branch_worst = 0.0f64;
    for i1 in 0..grid.n1 {
        let best_in_row = (0..grid.n2)
            .map(|i2| bf.b.at(i1, i2) - bf.min)
            .fold(f64::INFINITY, f64::min);
        on_branch_worst = on_branch_worst.max(best_in_row);
    }
    assert!(
        on_branch_worst <= delta_level,
        "branch misses the sublevel set by {on_branch_worst}"
    );

    // Gauge invariance: shifting u^- by a constant shifts min, not argmin.
    let mut shifted = bundle.ul_minus.clone();
    for x in &mut shifted.u.data {
        *x += 0.4321;
    }
    let mut b2 = Field2D::zeros(grid);
    for i in 0..b2.data.len() {
        b2.data[i] = shifted.u.data[i] - bundle.ur_plus.u.data[i];
    }
    let min2 = b2.data.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((min2 - bf.min - 0.4321).abs() < 1e-12);
    for cell in &bf.argmin {
        assert!(b2.data[grid.idx(cell.0, cell.1)] - min2 <= 1e-10);
    }

    // Translation identity: an arrival-endpoint bump shifts the one-step
    // operator output exactly by the bump on its support.
    let sol = lax_oleinik(
        &kernel,
        Vector2::zeros(),
        None,
        Direction::Backward,
        &SolveOptions::default(),
    )
    .unwrap();
    let bump = Field2D::from_fn(grid, |q1, q2| {
        let d1 = (q1 - 0.7).rem_euclid(grid.len1());
        let d1 = d1.min(grid.len1() - d1);
        let d2 = (q2 - 2.0).rem_euclid(std::f64::consts::TAU);
        let d2 = d2.min(std::f64::consts::TAU - d2);
        let r2 = d1 * d1 + d2 * d2;
        if r2 < 0.25 {
            2e-3 * (1.0 - r2 / 0.25).powi(2)
        } else {
            0.0
        }
    });
    let base = lax_oleinik_step(&kernel, &sol.u, &Vector2::zeros(), Direction::Backward, None, None);
    let bumped =
        lax_oleinik_step(&kernel, &sol.u, &Vector2::zeros(), Direction::Backward, None, Some(&bump));
    let mut worst_shift = 0.0f64;
    for i in 0..grid.len() {
        worst_shift = worst_shift.max(((bumped.data[i] - base.data[i]) - bump.data[i]).abs());
    }
    assert!(worst_shift < 1e-9, "translation identity off by {worst_shift}");
    println!(
        "acceptance 09 barrier properties: PASS (min {:.2e} within {delta_level}, branch within {:.2e}, gauge ok, translation {:.1e})",
        bf.min, on_branch_worst, worst_shift
    );
}

#[test]
fn acceptance_10_deviation_suite() {
    let sys = unit_system(vec![([1, 0, 0], "1.0")], 1e-3, 0.5);
    let omega = Vector3::new(0.63, 1.0, 0.77);
    let rep = verify_deviation(
        &sys,
        &omega,
        &[1e-2, 1e-3, 1e-4],
        &DeviationOptions::default(),
    )
    .unwrap();
    assert!((rep.d_h - 2.0).abs() < 1e-9, "D_H = {}", rep.d_h);
    for r in &rep.rows {
        assert!(
            r.deviation <= 2.0 * r.eps.sqrt(),
            "deviation {} above 2 sqrt(eps) at eps = {}",
            r.deviation,
            r.eps
        );
        assert!(r.pass_size && r.pass_location && !r.flagged, "row flagged: {r:?}");
        assert!(r.nu_ratio.is_finite());
    }
    // The fitted ratio stays bounded across the sweep (no blow-up as eps -> 0).
    let ratios: Vec<f64> = rep.rows.iter().map(|r| r.nu_ratio).collect();
    let rmax = ratios.iter().cloned().fold(0.0f64, f64::max);
    assert!(rmax <= 1.0, "|nu - 1|/sqrt(eps) = {rmax} unexpectedly large");
    let cc = rep.rows[1].crosscheck_gap.expect("weak-KAM cross-check ran");
    assert!(cc < 5e-3, "cross-check alpha gap {cc}");
    println!(
        "acceptance 10 deviation suite: PASS (D_H = {}, max deviation ratio {:.3}, C_r = {:.2e}, cross-check gap {:.1e})",
        rep.d_h,
        rep.rows
            .iter()
            .map(|r| r.deviation / r.bound)
            .fold(0.0f64, f64::max),
        rep.c_r_fitted,
        cc
    );
}

#[test]
fn acceptance_11_channel_embedding_and_overlap() {
    let (kappa, eta) = (0.1, 0.5);
    let sys = unit_system(vec![([1, 0, 0], "1.0")], 1e-4, 0.5);
    let circle = trace_circle(&sys.h, sys.energy, &[1, 0, 0], 1024).unwrap();
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, kappa, 1.0).unwrap();
    let half = 0.5f64.sqrt();
    let site_a = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-8)
        .unwrap();
    let site_b = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, half, half)).norm() < 1e-8)
        .unwrap();
    let opts = NfOptions::default();

    // Embedding round trip and the sqrt(eps) diameter scaling.
    let mut diameters = Vec::new();
    for eps in [1e-3, 1e-4, 1e-5] {
        let mut sys_e = sys.clone();
        sys_e.eps = eps;
        let (nf, chain) = reduce(&sys_e, site_a, kappa, eta, 0.25, &opts).unwrap();
        let ms = MechanicalSystem::from_normal_form(&nf);
        let grid: Vec<f64> = (0..6).map(|i| 0.8 + 0.24 * i as f64).collect();
        let ab = alpha_beta(&ms, [0, 1], &grid, &OrbitOptions::default()).unwrap();
        let emb = embed_channel(&ab, &chain);
        diameters.push((eps, emb.diameter()));
        // Round trip through the affine maps, measured on the embedded side
        // where no 1/eps amplification of rounding enters.
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        for _ in 0..50 {
            let c = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let a = rng.gen_range(0.0..3.0);
            let p = emb.embed(&c, a);
            let (c2, a2) = emb.unembed(&p);
            let p2 = emb.embed(&c2, a2);
            assert!((p2 - p).norm() < 1e-12, "round trip {:e}", (p2 - p).norm());
            // The reduced-side coordinates are recovered to the conditioning
            // of the scaling, far below the channel scale.
            assert!((c2 - c).norm() < 1e-9 && (a2 - a).abs() < 1e-9);
        }
        // The zero class at the flat maps to the site momentum.
        assert!((emb.site_center() - site_a.p_dd).norm() < 1e-12);
    }
    let slope = {
        let (e1, d1) = diameters[0];
        let (e2, d2) = diameters[2];
        (d2 / d1).ln() / (e2 / e1).ln()
    };
    assert!((slope - 0.5).abs() <= 0.05, "diameter slope {slope}");

    // Overlap of the two adjacent period-one sites with the measured xi.
    let (nf_a, chain_a) = reduce(&sys, site_a, kappa, eta, 0.25, &opts).unwrap();
    let (_, chain_b) = reduce(&sys, site_b, kappa, eta, 0.25, &opts).unwrap();
    let ms = MechanicalSystem::from_normal_form(&nf_a);
    let ch = scan_channel(&ms, [0, 1], (0.8, 2.0), 16, &ChannelOptions {
        orbit: OrbitOptions::default(),
        ..Default::default()
    })
    .unwrap();
    let dev = verify_deviation(
        &sys,
        &Vector3::new(0.63, 1.0, 0.77),
        &[1e-3, 1e-4],
        &DeviationOptions { crosscheck_row: None, ..Default::default() },
    )
    .unwrap();
    // Oscillation of the site orbits mapped back to momentum space.
    let c_v = chain_a.frame.l_mat.norm() * ch.osc_measured_max;
    let xi = 4.0 * (c_v + dev.d_h + dev.c_h);
    let overlap = overlap_check(&circle, &chain_a, &chain_b, xi, 8192);
    assert!(
        overlap.passes,
        "overlap {} below (xi/2) sqrt(eps) = {}",
        overlap.measured_length, overlap.required_length
    );
    println!(
        "acceptance 11 channel embedding: PASS (round trip 1e-12, diameter slope {slope:.3}, overlap {:.4} >= {:.4} with xi = {xi:.2})",
        overlap.measured_length, overlap.required_length
    );
}

#[test]
fn acceptance_12_determinism() {
    use resweb::pipeline::{RunConfig, Workspace, STAGES};
    let config_text = r#"
[system]
quadratic = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
modes = [{ k = [1, 0, 0], coeff = "1.0" }]
eps = 1e-4
energy = 0.5

[geometry]
kappa = 0.1
eta = 0.5

[targets]
p_star = [0.0, 0.0, 1.0]
p_target = [0.0, 1.0, 0.0]

[numerics]
circle_samples = 256
cover_checks = 2000
orbit_nodes = 128
lambda_grid = 16
lambda_range = [0.8, 2.0]
wk_grid = [64, 32]
deviation_eps = [1e-2, 1e-3]

[output]
dir = "unused"
"#;
    let config: RunConfig = toml::from_str(config_text).unwrap();
    config.validate().unwrap();
    let base = std::env::temp_dir().join(format!("resweb-acc12-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    let run = |dir: &std::path::Path| {
        let mut ws = Workspace::open(config.clone(), Some(dir)).unwrap();
        for stage in STAGES {
            ws.run_stage(stage).unwrap();
        }
    };
    let d1 = base.join("run1");
    let d2 = base.join("run2");
    run(&d1);
    run(&d2);
    let mut compared = 0;
    for entry in std::fs::read_dir(&d1).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_string_lossy().to_string();
        if name == "manifest.json" || name == ".lock" {
            continue;
        }
        let a = std::fs::read(d1.join(&name)).unwrap();
        let b = std::fs::read(d2.join(&name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between runs");
        compared += 1;
    }
    assert!(compared >= 6, "expected several artifacts, compared {compared}");
    // Third run over run1: every stage must report cached.
    let mut ws = Workspace::open(config, Some(&d1)).unwrap();
    for stage in STAGES {
        assert!(ws.run_stage(stage).unwrap(), "stage {stage} was not cached");
    }
    drop(ws);
    let _ = std::fs::remove_dir_all(&base);
    println!("acceptance 12 determinism: PASS ({compared} artifacts byte-identical, re-run fully cached)");
}
