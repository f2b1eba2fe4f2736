//! Trace resonance circles on an energy level and enumerate the double
//! resonances admitted by the period budget.

use nalgebra::Vector3;
use resweb::model::ConvexHamiltonian;
use resweb::resonance::{find_double_resonances, trace_circle};

fn main() {
    let h = ConvexHamiltonian::unit(3.0);
    let energy = 0.5;
    let (eps, kappa, k_star) = (1e-3, 0.15, 1.0);

    for k in [[1, 0, 0], [1, 1, 1]] {
        let circle = trace_circle(&h, energy, &k, 512).expect("circle");
        println!(
            "circle k = {:?}: circumference {:.6}, {} samples",
            k,
            circle.circumference(),
            circle.samples.len()
        );
        let rep = find_double_resonances(&h, &circle, eps, kappa, k_star).expect("enumeration");
        println!(
            "  period budget T <= {:.3}; {} double resonances",
            rep.t_max,
            rep.found.len()
        );
        for dr in rep.found.iter().take(6) {
            let p: Vector3<f64> = dr.p_dd;
            println!(
                "  T = {}  k'' = {:?}  p'' = ({:+.4}, {:+.4}, {:+.4})  disc radius {:.4}",
                dr.period, dr.k_second, p.x, p.y, p.z, dr.disc_radius
            );
        }
        if rep.found.len() > 6 {
            println!("  ... {} more", rep.found.len() - 6);
        }
    }
}
