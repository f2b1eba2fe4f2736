//! Discrete weak-KAM solutions by Lax-Oleinik value iteration: the free
//! system reproduces alpha(c) = |c|^2/2, the pendulum reproduces the
//! separatrix energy and the gradient profile of its solution.

use nalgebra::{Matrix2, Vector2};
use resweb::averaged::MechanicalSystem;
use resweb::fourier::Fourier2;
use resweb::weakkam::{
    build_kernel, lax_oleinik, Cover, Direction, KernelOptions, SolveOptions, TorusGrid,
};

fn main() {
    // Free case.
    let ms = MechanicalSystem::new(Matrix2::identity(), Fourier2::new());
    let kernel = build_kernel(
        &ms,
        TorusGrid::new(Cover::Base, 48, 48).unwrap(),
        0.35,
        &KernelOptions { speed_bound: 2.0, probe_fraction: 0.01 },
    )
    .expect("kernel");
    for c in [Vector2::new(0.3, 0.0), Vector2::new(0.4, -0.7)] {
        let sol = lax_oleinik(&kernel, c, None, Direction::Backward, &SolveOptions::default())
            .expect("solution");
        println!(
            "free: c = ({:+.2}, {:+.2})  alpha = {:.8}  (|c|^2/2 = {:.8})  iters {}",
            c.x,
            c.y,
            sol.alpha_estimate,
            0.5 * c.norm_squared(),
            sol.iterations
        );
    }

    // Pendulum times rotator at the zero class.
    let ms = MechanicalSystem::pendulum_rotator();
    let kernel = build_kernel(
        &ms,
        TorusGrid::new(Cover::Base, 256, 32).unwrap(),
        0.2,
        &KernelOptions { speed_bound: 2.6, probe_fraction: 0.005 },
    )
    .expect("kernel");
    let sol = lax_oleinik(
        &kernel,
        Vector2::zeros(),
        None,
        Direction::Backward,
        &SolveOptions::default(),
    )
    .expect("solution");
    println!(
        "pendulum: alpha = {:.10} (separatrix energy 2), residual {:.1e}, iters {}",
        sol.alpha_estimate, sol.residual, sol.iterations
    );
    // |d1 u| against the separatrix momentum profile 2 |cos(q1/2)|.
    let h1 = kernel.grid.h1();
    let mut worst = 0.0f64;
    for i1 in 0..kernel.grid.n1 {
        let fd = sol.u.forward_d1_abs(i1, 0);
        let target = 2.0 * ((i1 as f64 + 0.5) * h1 / 2.0).cos().abs();
        worst = worst.max((fd - target).abs());
    }
    println!("gradient profile deviation: {:.4} (3 cells of slope = {:.4})", worst, 3.0 * h1);
}
