//! Disc covering of a resonance circle: every admitted double resonance
//! carries a disc of radius T^{-1} eps^kappa, and the union must cover the
//! circle once eps is small enough.

use resweb::model::ConvexHamiltonian;
use resweb::resonance::{dirichlet_cover, trace_circle};

fn main() {
    let h = ConvexHamiltonian::unit(3.0);
    let circle = trace_circle(&h, 0.5, &[1, 1, 1], 512).expect("circle");
    let kappa = 0.15;

    println!("circle k = (1,1,1), kappa = {kappa}");
    for eps in [1e-2, 1e-3, 1e-4] {
        let rep = dirichlet_cover(&h, &circle, eps, kappa, 1.0, 10_000).expect("cover");
        println!(
            "eps = {eps:>8.0e}: discs {:>4}, max period {}, uncovered {:>4}/{}  {}",
            rep.discs.len(),
            rep.max_period,
            rep.uncovered_samples.len(),
            rep.n_checked,
            if rep.is_covered() { "covered" } else { "NOT covered" }
        );
        println!(
            "            chord ratio d = {:.3}, smallness lhs = {:.3e} vs rhs = {:.3e}",
            rep.d_empirical, rep.eps_condition_lhs, rep.eps_condition_rhs
        );
    }

    // A tiny period budget admits no discs at all: the diagnostic path.
    let rep = dirichlet_cover(&h, &circle, 1e-3, kappa, 0.01, 1000).expect("cover");
    println!(
        "K* = 0.01 forces an empty disc system: uncovered {}/{}",
        rep.uncovered_samples.len(),
        rep.n_checked
    );
}
