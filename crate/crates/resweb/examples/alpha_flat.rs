//! Alpha/beta data along a homology ray and the flat at zero rotation: for
//! the pendulum factor the flat sits at the separatrix energy 2 with half
//! width 4/pi.

use resweb::averaged::{alpha_beta, MechanicalSystem, OrbitOptions};

fn main() {
    let ms = MechanicalSystem::pendulum_rotator();
    let grid = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];
    let opts = OrbitOptions { n_nodes: 512, ..Default::default() };
    let ab = alpha_beta(&ms, [1, 0], &grid, &opts).expect("alpha/beta");

    println!("{:>8} {:>12} {:>12} {:>12}", "lambda", "beta", "mu = <c,g>", "alpha");
    for i in 0..ab.lambda.len() {
        println!(
            "{:>8.3} {:>12.6} {:>12.6} {:>12.6}",
            ab.lambda[i], ab.beta[i], ab.mu[i], ab.alpha[i]
        );
    }
    println!("beta(0)          = {:.9} (min V = -2)", ab.beta_zero);
    println!(
        "flat level       = {:.6} (separatrix energy 2)",
        ab.flat_level
    );
    println!(
        "flat half width  = {:.6} (4/pi = {:.6})",
        ab.flat_halfwidth,
        4.0 / std::f64::consts::PI
    );
    println!(
        "duality: worst violation {:.2e}, matched-pair gap {:.2e}",
        ab.duality_violation, ab.matched_gap
    );
}
