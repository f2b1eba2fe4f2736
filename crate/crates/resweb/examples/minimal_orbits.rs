//! Minimal periodic orbits of the averaged planar system: fixed rotation
//! parameter, fixed energy via shooting, and Floquet multipliers.

use resweb::averaged::{minimal_orbit, MechanicalSystem, OrbitOptions, OrbitTarget};

fn main() {
    let ms = MechanicalSystem::pendulum_rotator();
    let opts = OrbitOptions { n_nodes: 512, ..Default::default() };

    // Hyperbolic orbit: constant first angle on top of the potential ridge.
    let o = minimal_orbit(&ms, [0, 1], OrbitTarget::Lambda(1.0), &opts).expect("orbit");
    println!(
        "class (0,1), tau = {:.4}: action {:.8} (exact -3 pi = {:.8})",
        o.tau,
        o.action,
        -3.0 * std::f64::consts::PI
    );
    println!(
        "  flag {:?}, multipliers ({:.4}, {:.4}), product defect {:.2e}",
        o.flag,
        o.floquet[0].0,
        o.floquet[1].0,
        o.floquet_product_defect
    );

    // Rotation orbit at fixed energy, with the quadrature oracle.
    let o = minimal_orbit(&ms, [1, 0], OrbitTarget::Energy(3.0), &opts).expect("orbit");
    let quad = |f: &dyn Fn(f64) -> f64| -> f64 {
        let n = 40000;
        let h = std::f64::consts::TAU / n as f64;
        (0..n).map(|i| { let a = i as f64 * h; h / 6.0 * (f(a) + 4.0 * f(a + h / 2.0) + f(a + h)) }).sum()
    };
    let vpot = |x: f64| x.cos() - 1.0;
    let tau_oracle = quad(&|x| 1.0 / (2.0 * (3.0 + vpot(x))).sqrt());
    let s_oracle = quad(&|x| (3.0 + 2.0 * vpot(x)) / (2.0 * (3.0 + vpot(x))).sqrt());
    println!(
        "class (1,0) at E = 3: tau {:.6} (oracle {:.6}), action {:.6} (oracle {:.6})",
        o.refined_tau, tau_oracle, o.refined_action, s_oracle
    );
    println!(
        "  energy {:.10}, EL residual {:.2e}, momentum oscillation {:.6}",
        o.energy,
        o.el_residual,
        o.momentum_oscillation(&ms)
    );
}
