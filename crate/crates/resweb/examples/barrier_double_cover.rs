//! Elementary weak-KAM solutions on the double cover, the barrier between
//! the two lifted Aubry copies, and its argmin component diagnostics.

use nalgebra::Vector2;
use resweb::averaged::MechanicalSystem;
use resweb::weakkam::{
    argmin_components, barrier, build_kernel, elementary_solutions, Cover, ElementaryOptions,
    KernelOptions, Square, TorusGrid,
};

fn main() {
    let ms = MechanicalSystem::pendulum_rotator();
    let kernel = build_kernel(
        &ms,
        TorusGrid::new(Cover::DoubleQ1, 128, 32).unwrap(),
        0.2,
        &KernelOptions { speed_bound: 2.6, probe_fraction: 0.005 },
    )
    .expect("kernel");

    let bundle = elementary_solutions(
        &kernel,
        Vector2::zeros(),
        &[0.4, 0.2],
        &ElementaryOptions::default(),
    )
    .expect("elementary solutions");
    println!(
        "copies: {} left cells (around q1 = pi), {} right cells (around q1 = 3 pi)",
        bundle.copy_left.len(),
        bundle.copy_right.len()
    );
    println!("near-tube matching deviation vs the base solution: {:.2e}", bundle.matching_deviation);

    let bf = barrier(&bundle.ul_minus, &bundle.ur_plus);
    println!("barrier: min = {:.6}, {} cells at the minimum", bf.min, bf.argmin.len());

    let rep = argmin_components(
        &bf,
        0.02,
        &[Square { center: (std::f64::consts::PI, 3.0), half_width: 0.5 }],
    );
    println!(
        "sublevel at delta = {}: {} cells in {} components, max diameter {:.4}",
        rep.delta_level,
        rep.sublevel_cells,
        rep.components.len(),
        rep.max_diameter
    );
    for (sq, trivial) in &rep.square_verdicts {
        println!(
            "square at ({:.2}, {:.2}) halfwidth {:.2}: {}",
            sq.center.0,
            sq.center.1,
            sq.half_width,
            if *trivial { "trivial" } else { "NON-trivial" }
        );
    }
}
