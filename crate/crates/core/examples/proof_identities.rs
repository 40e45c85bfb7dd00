//! Prints the integer constants, the kernel vectors and the coefficient
//! checks behind the stability argument for r = 3..8.

use filter_funnel::analysis::{a_recurrence_failures, a_recurrence_pairs, coefficient_check, ProofConstants};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for r in 3..=8 {
        let consts = ProofConstants::new(r).expect("r >= 2");
        println!("r = {r}");
        for (i, row) in consts.a.iter().enumerate() {
            println!("  a_{},j = {row:?}", i + 1);
        }
        println!(
            "  recurrence: {} pairs, {} failures",
            a_recurrence_pairs(r),
            a_recurrence_failures(r).len()
        );
        let c: Vec<String> = consts.c.iter().map(|v| format!("{v:+.6}")).collect();
        println!("  c = [{}], q = {:+.6e}", c.join(", "), consts.q);
        let r_mats: Vec<DMatrix<f64>> = (1..r)
            .map(|_| DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let chk = coefficient_check(r, &r_mats).expect("r >= 2");
        println!(
            "  random R_i: moments {:.1e}, vanishing {:.1e}, leading {:.1e} -> {}",
            chk.max_moment_residual,
            chk.max_vanishing_residual,
            chk.max_leading_residual,
            if chk.passed { "ok" } else { "FAILED" }
        );
    }
}
