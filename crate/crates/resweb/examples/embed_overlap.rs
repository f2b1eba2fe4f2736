//! Embedding a site channel back into H^1(T^3) and the overlap of adjacent
//! site domains along the circle.

use nalgebra::Vector3;
use resweb::averaged::{alpha_beta, embed_channel, overlap_check, MechanicalSystem, OrbitOptions};
use resweb::fourier::FourierSeries3;
use resweb::model::{ConvexHamiltonian, NearlyIntegrableSystem};
use resweb::normalform::{reduce, NfOptions};
use resweb::poly::Poly;
use resweb::resonance::{find_double_resonances, trace_circle};

fn main() {
    let mut pert = FourierSeries3::new();
    pert.add_cos([1, 0, 0], Poly::constant(1.0));
    let sys = NearlyIntegrableSystem::new(ConvexHamiltonian::unit(3.0), pert, 1e-4, 0.5, 6)
        .expect("system");
    let (kappa, eta) = (0.1, 0.5);

    let circle = trace_circle(&sys.h, sys.energy, &[1, 0, 0], 1024).expect("circle");
    let rep = find_double_resonances(&sys.h, &circle, sys.eps, kappa, 1.0).expect("enumeration");
    // Two adjacent period-one sites, 45 degrees apart on the circle.
    let site_a = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-8)
        .expect("site a");
    let half = 0.5f64.sqrt();
    let site_b = rep
        .found
        .iter()
        .find(|d| (d.p_dd - Vector3::new(0.0, half, half)).norm() < 1e-8)
        .expect("site b");

    let opts = NfOptions::default();
    let (nf_a, chain_a) = reduce(&sys, site_a, kappa, eta, 0.25, &opts).expect("reduce a");
    let (_, chain_b) = reduce(&sys, site_b, kappa, eta, 0.25, &opts).expect("reduce b");

    // Embed the alpha graph of site a.
    let ms = MechanicalSystem::from_normal_form(&nf_a);
    let grid: Vec<f64> = (0..8).map(|i| 0.6 + 0.2 * i as f64).collect();
    let ab = alpha_beta(&ms, [0, 1], &grid, &OrbitOptions::default()).expect("alpha");
    let emb = embed_channel(&ab, &chain_a);
    println!("site a center maps to p'' = {:?}", emb.site_center());
    println!("embedded channel diameter = {:.6} (sqrt(eps) = {:.6})", emb.diameter(), sys.eps.sqrt());
    let (c_back, a_back) = emb.unembed(&emb.points[3]);
    println!("round trip of a sample point: c = ({:.4}, {:.4}), alpha = {:.4}", c_back.x, c_back.y, a_back);

    // Overlap of the two site domains along the circle.
    let xi = 20.0;
    let rep = overlap_check(&circle, &chain_a, &chain_b, xi, 8192);
    println!(
        "overlap: measured {:.4} vs required (xi/2) sqrt(eps) = {:.4}  ->  {}",
        rep.measured_length,
        rep.required_length,
        if rep.passes { "PASS" } else { "FAIL" }
    );
}
