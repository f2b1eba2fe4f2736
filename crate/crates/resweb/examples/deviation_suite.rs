//! Deviation bounds for minimal sets: flat localization within
//! 2 sqrt(|P|/m) sqrt(eps), rotation rescaling nu, the exclusion radius
//! formula, and the weak-KAM cross-check of the quadrature route.

use nalgebra::Vector3;
use resweb::estimates::{verify_deviation, DeviationOptions};
use resweb::fourier::FourierSeries3;
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::poly::Poly;

fn main() {
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::constant(1.0));
    let sys = NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, 1e-3, 0.5, 6)
        .expect("system");
    let omega = Vector3::new(0.63, 1.0, 0.77);
    let rep = verify_deviation(
        &sys,
        &omega,
        &[1e-2, 1e-3, 1e-4],
        &DeviationOptions::default(),
    )
    .expect("deviation report");

    println!(
        "|P| = {}, |d_p P| = {}, m = {}, C_s = {}, D_H = {}",
        rep.p_norm, rep.dp_norm, rep.m_lower, rep.c_s, rep.d_h
    );
    println!(
        "{:>9} {:>12} {:>12} {:>7} {:>12} {:>10}",
        "eps", "deviation", "bound", "pass", "nu", "|nu-1|/se"
    );
    for r in &rep.rows {
        println!(
            "{:>9.0e} {:>12.4e} {:>12.4e} {:>7} {:>12.8} {:>10.3e}",
            r.eps,
            r.deviation,
            r.bound,
            r.pass_size && r.pass_location,
            r.nu,
            r.nu_ratio
        );
        if let (Some(gap), Some(defect)) = (r.crosscheck_gap, r.crosscheck_deviation) {
            println!(
                "          weak-KAM cross-check: alpha gap {:.2e}, gain defect {:.2e}",
                gap, defect
            );
        }
    }
    println!("fitted C_r = {:.4}, C_H = {:.4}", rep.c_r_fitted, rep.c_h);
    println!("all rows pass: {}", rep.all_pass());
}
