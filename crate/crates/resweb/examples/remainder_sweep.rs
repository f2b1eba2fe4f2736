//! Remainder scaling: sup norms of the reduction remainders against eps,
//! with fitted power laws. The quartic term in h makes the kinetic Taylor
//! tail genuinely nonzero.

use nalgebra::Vector3;
use resweb::fourier::FourierSeries3;
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::normalform::{remainder_sweep, NfOptions, PowerFit};
use resweb::poly::Poly;
use resweb::resonance::{find_double_resonances, trace_circle};

fn main() {
    let h = ConvexHamiltonian::polynomial(
        Poly::parse("0.5*(p1^2 + p2^2 + p3^2) + 0.1*p1^4").expect("poly"),
        3.0,
    );
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::constant(1.0));
    pert.add_cos([1, -1, 0], Poly::constant(0.6));
    let sys = NearlyIntegrableSystem::new(h, pert, 1e-2, 1.0, 6).expect("system");

    let circle = trace_circle(&sys.h, sys.energy, &[1, 0, 0], 512).expect("circle");
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, 0.15, 1.0).expect("enumeration");
    let dr = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, 1.0, 1.0)).norm() < 1e-6)
        .expect("site");

    let kappa = 0.15;
    let eps_list = [1e-2, 1e-3, 1e-4, 1e-5];
    let opts = NfOptions { grid: (4, 4, 2, 3), ..Default::default() };
    let sweep = remainder_sweep(&sys, dr, kappa, 1.0, 0.25, &eps_list, &opts).expect("sweep");

    println!("{:>9} {:>11} {:>11} {:>11} {:>11} {:>11}", "eps", "R1", "R2", "R3", "Rh", "|Ge-G0|");
    for row in &sweep.rows {
        println!(
            "{:>9.0e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e} {:>11.3e}",
            row.eps, row.r1, row.r2, row.r3, row.rh, row.g_diff
        );
    }
    let show = |name: &str, fit: &Option<PowerFit>| {
        let f = fit.as_ref().unwrap();
        if f.exact_zero {
            println!("{name}: identically zero");
        } else {
            println!(
                "{name}: slope {:.3} (floor kappa = {kappa}), constant {:.3e}, fit residual {:.1}%",
                f.slope,
                f.constant,
                100.0 * f.max_residual
            );
        }
    };
    show("R1     ", &sweep.fit_r1);
    show("R2     ", &sweep.fit_r2);
    show("R3     ", &sweep.fit_r3);
    show("Rh     ", &sweep.fit_rh);
    show("|Ge-G0|", &sweep.fit_g_diff);
}
