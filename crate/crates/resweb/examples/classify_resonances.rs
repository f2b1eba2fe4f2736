//! Strong/weak classification of double resonances: the coupling part of the
//! resonant term against the curvature of the single-resonance potential.

use resweb::fourier::FourierSeries3;
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::poly::Poly;
use resweb::resonance::{classify, find_double_resonances, trace_circle, ClassifyThresholds};

fn main() {
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::constant(1.0));
    pert.add_cos([0, 1, -1], Poly::constant(0.9));
    pert.add_cos([0, 8, -5], Poly::constant(13.0f64.powi(-6)));
    let sys = NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, 1e-3, 1.0, 6)
        .expect("system");

    let circle = trace_circle(&sys.h, sys.energy, &[1, 0, 0], 512).expect("circle");
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, 0.12, 4.0).expect("enumeration");
    let thresholds = ClassifyThresholds::default();
    println!("theta = {}, {} sites", thresholds.theta, rep.found.len());
    for dr in rep.found.iter().take(12) {
        match classify(&sys, &dr.clone(), &thresholds) {
            Ok((s, diag)) => println!(
                "T = {:>2}  k'' = {:>12}  {:?}  coupling {:.3e}  curvature {:.3}  margin {:.3e}",
                dr.period,
                format!("{:?}", dr.k_second),
                s,
                diag.coupling_c1,
                diag.single_curvature,
                diag.margin
            ),
            Err(e) => println!("T = {:>2}  k'' = {:?}: {e}", dr.period, dr.k_second),
        }
    }
}
