//! Importance-aware pruning of a `B` update against magnitude pruning.
//!
//! An entry of `dB` only matters through the row of `A` it multiplies. When
//! the rows of `A` have very different norms, scoring by `|dB| * |A row|`
//! keeps more of the full-rank update `dB A` than scoring by `|dB|` alone.

use fedsrd::seed::rng_from;
use fedsrd::sparsify::{importance_b, adaptive_ratio, magnitude_sparsify, prune_by_importance};
use fedsrd::{DenseMatrix, SparsityConfig};

pub struct Comparison {
    pub rho: f64,
    pub kept: usize,
    /// Share of `|dB A|_F` retained by each method.
    pub importance_share: f64,
    pub magnitude_share: f64,
}

pub fn run_example() -> fedsrd::Result<Comparison> {
    let mut rng = rng_from(11);
    let (d_out, r, d_in) = (64, 8, 64);
    let delta_b = DenseMatrix::random_gaussian(d_out, r, 1.0, &mut rng);
    // rows of A with norms spread over two orders of magnitude
    let a = DenseMatrix::random_gaussian(r, d_in, 1.0, &mut rng);
    let a = DenseMatrix::from_fn(r, d_in, |v, j| a[(v, j)] * 10f64.powf(v as f64 / (r - 1) as f64 * 2.0 - 1.0));

    let scores = importance_b(&delta_b, &a)?;
    let config = SparsityConfig::default();
    let rho = adaptive_ratio(&scores, &config);
    let by_importance = prune_by_importance(&delta_b, &scores, rho)?;
    let by_magnitude = magnitude_sparsify(&delta_b, rho)?;

    let full = delta_b.matmul(&a)?.frobenius_norm();
    let share = |kept: &DenseMatrix| -> fedsrd::Result<f64> {
        let lost = delta_b.sub(kept)?.matmul(&a)?.frobenius_norm();
        Ok(1.0 - lost / full)
    };
    let out = Comparison {
        rho,
        kept: by_importance.nnz(),
        importance_share: share(&by_importance.to_dense())?,
        magnitude_share: share(&by_magnitude.to_dense())?,
    };
    println!("drop ratio {:.3}, {} of {} entries kept", out.rho, out.kept, delta_b.len());
    println!("update retained: importance {:.3}, magnitude {:.3}", out.importance_share, out.magnitude_share);
    Ok(out)
}

fn main() -> fedsrd::Result<()> {
    run_example()?;
    Ok(())
}
