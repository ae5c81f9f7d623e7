//! Truncated SVD as a rank-`r` projection.
//!
//! The squared error of the best rank-`r` approximation equals the energy
//! in the discarded singular values, which is what the server relies on
//! when it projects the aggregated update back onto the adapter rank.

use fedsrd::seed::rng_from;
use fedsrd::tensor::{rank_r_approx, svd_full};
use fedsrd::DenseMatrix;

/// Returns `(r, projection error, tail energy)` for every rank.
pub fn run_example() -> fedsrd::Result<Vec<(usize, f64, f64)>> {
    let mut rng = rng_from(7);
    let m = DenseMatrix::random_gaussian(32, 24, 1.0, &mut rng);
    let sigma = svd_full(&m)?.singular_values;

    println!("{:>4} {:>14} {:>14}", "r", "|M - M_r|_F^2", "tail energy");
    let mut rows = Vec::new();
    for r in 1..=m.cols() {
        let err = m.sub(&rank_r_approx(&m, r)?)?.frobenius_norm().powi(2);
        let tail = sigma[r..].iter().fold(0.0, |acc, s| acc + s * s);
        if r % 4 == 0 || r == 1 {
            println!("{r:>4} {err:>14.6} {tail:>14.6}");
        }
        rows.push((r, err, tail));
    }
    Ok(rows)
}

fn main() -> fedsrd::Result<()> {
    run_example()?;
    Ok(())
}
