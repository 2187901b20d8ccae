use std::time::Instant;

use ebe_core::approx::{assemble, decompose, diagonal_solve};
use ebe_core::grid::build_grid;
use ebe_core::mat2::{c, Mat2};
use ebe_core::poly::{charges, HolomorphicData, Polynomial};
use ebe_core::solver::{continuity_solve, default_schedule, moment_map, small_section_check};

fn data_sets() -> Vec<(&'static str, HolomorphicData)> {
    let one = Polynomial::one;
    let z = || Polynomial::monomial(1);
    vec![
        (
            "trivial",
            HolomorphicData::validate(one(), Polynomial::zero(), one()).unwrap(),
        ),
        ("charge2", HolomorphicData::validate(one(), one(), z()).unwrap()),
        ("charge3", HolomorphicData::validate(z(), one(), z()).unwrap()),
    ]
}

fn main() {
    for (name, d) in data_sets() {
        for &nn in &[17usize, 33] {
            let t0 = Instant::now();
            let grid = build_grid(6.0, 0.4, 12.4, nn, nn, nn, 1.12).unwrap();
            let cs = charges(&d).unwrap();
            let dec = decompose(&cs).unwrap();
            let sol = diagonal_solve(&d.p, &grid).unwrap();
            let am = assemble(&grid, &d, &dec, &sol.u).unwrap();
            match continuity_solve(grid.clone(), &d, &am.h0, &default_schedule(), None) {
                Ok(rec) => {
                    println!(
                        "{name} [{nn}] ok in {:?}: resid {:.2e} scale {:.2e} sup_rho_hat_s {:.3e}",
                        t0.elapsed(),
                        rec.final_residual,
                        rec.scale,
                        rec.sup_rho_hat_s
                    );
                    if name == "charge2" && nn == 33 {
                        let sec = small_section_check(&grid, &rec.h, &d).unwrap();
                        println!("  section exponent {:.3}", sec.median_exponent);
                        // uniqueness partner: restart from s = -M(H0)
                        let t1 = Instant::now();
                        let m0 = moment_map(&grid, &am.h0, &d.p).unwrap();
                        let init: Vec<Mat2> =
                            m0.iter().map(|m| -m.herm_part().traceless_part()).collect();
                        let rec2 = continuity_solve(
                            grid.clone(),
                            &d,
                            &am.h0,
                            &default_schedule(),
                            Some(&init),
                        )
                        .unwrap();
                        let mut dh = 0.0f64;
                        for k in 0..grid.len() {
                            dh = dh.max((rec.h[k] - rec2.h[k]).max_abs());
                        }
                        println!(
                            "  second solve in {:?}: sup|H1-H2| = {:.3e}",
                            t1.elapsed(),
                            dh
                        );
                        let _ = c(0.0, 0.0);
                    }
                }
                Err(e) => println!("{name} [{nn}] FAILED in {:?}: {e:?}", t0.elapsed()),
            }
        }
    }
}
