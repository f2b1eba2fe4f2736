//! Full reduction at a double resonance: averaging step, shear, rescaling and
//! energetic reduction, with the kinetic blocks, the reduced potential and
//! the measured remainder norms.

use nalgebra::Vector3;
use resweb::fourier::FourierSeries3;
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::normalform::{reduce, symmetry_check, NfOptions};
use resweb::poly::Poly;
use resweb::resonance::{find_double_resonances, trace_circle};

fn main() {
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::constant(1.0));
    pert.add_cos([0, 1, -1], Poly::constant(1.0));
    pert.add_cos([1, -1, 0], Poly::constant(1.0));
    let sys = NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, 1e-3, 1.0, 6)
        .expect("system");

    let circle = trace_circle(&sys.h, sys.energy, &[1, 0, 0], 512).expect("circle");
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, 0.15, 1.0).expect("enumeration");
    let dr = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, 1.0, 1.0)).norm() < 1e-9)
        .expect("site (0, 1, 1)");
    println!("site p'' = {:?}, k' = {:?}, k'' = {:?}, T = {}", dr.p_dd, dr.k_prime, dr.k_second, dr.period);

    let opts = NfOptions::default();
    let (nf, chain) = reduce(&sys, dr, 0.15, 1.0, 0.25, &opts).expect("reduction");
    println!("B        = [[{}, {}], [{}, {}]]", nf.b[(0, 0)], nf.b[(0, 1)], nf.b[(1, 0)], nf.b[(1, 1)]);
    println!("B'       = ({}, {})", nf.b_prime.x, nf.b_prime.y);
    println!("B''      = {}", nf.b_dprime);
    println!("omega3   = {}", chain.frame.omega3);
    println!("|k''|    = {}", nf.kpp_abs);
    println!("domain   = [{:.4}, {:.4}]", nf.domain_inner, nf.domain_outer);
    println!("V modes:");
    for (n, (re, im)) in nf.v.modes() {
        println!("  {:?}: {re:+.6} {im:+.6}i", n);
    }
    let row = &nf.remainder.rows[0];
    println!(
        "remainders at eps = {:.0e}: R1 {:.3e}  R2 {:.3e}  R3 {:.3e}  Rh {:.3e}  R0 {:.3e}",
        row.eps, row.r1, row.r2, row.r3, row.rh, row.r0
    );
    println!("sup |G_eps - G_0| = {:.3e}", row.g_diff);

    let sym = symmetry_check(&sys, &chain, &nf, 200, &opts).expect("symmetry");
    println!("lattice-shift symmetry discrepancy over {} samples: {:.3e}", sym.n_samples, sym.max_discrepancy);
}
