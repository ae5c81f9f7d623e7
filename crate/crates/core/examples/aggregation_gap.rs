//! Why averaging the factors separately is not averaging the updates.
//!
//! For two clients, `mean(B) mean(A)` differs from `mean(B A)` by the cross
//! term `(B1 - B2)(A1 - A2) / 4`, which is large exactly when the clients
//! disagree.

use fedsrd::seed::rng_from;
use fedsrd::{DenseMatrix, LoraPair};

pub struct Gap {
    pub gap: f64,
    pub cross_term: f64,
    pub mean_update: f64,
}

pub fn run_example() -> fedsrd::Result<Gap> {
    let mut rng = rng_from(21);
    let (d, r) = (32, 4);
    let mut pair = || {
        LoraPair::new(
            DenseMatrix::random_gaussian(d, r, 1.0, &mut rng),
            DenseMatrix::random_gaussian(r, d, 1.0, &mut rng),
        )
    };
    let (p1, p2) = (pair()?, pair()?);

    let avg_b = DenseMatrix::mean_of(&[p1.b.clone(), p2.b.clone()])?;
    let avg_a = DenseMatrix::mean_of(&[p1.a.clone(), p2.a.clone()])?;
    let product_of_means = avg_b.matmul(&avg_a)?;
    let mean_of_products = DenseMatrix::mean_of(&[p1.product(), p2.product()])?;
    let cross = p1.b.sub(&p2.b)?.matmul(&p1.a.sub(&p2.a)?)?.scale(0.25);

    let out = Gap {
        gap: mean_of_products.sub(&product_of_means)?.frobenius_norm(),
        cross_term: cross.frobenius_norm(),
        mean_update: mean_of_products.frobenius_norm(),
    };
    println!("|mean(BA)|                 {:.4}", out.mean_update);
    println!("|mean(BA) - mean(B)mean(A)| {:.4}", out.gap);
    println!("|cross term|               {:.4}", out.cross_term);
    Ok(out)
}

fn main() -> fedsrd::Result<()> {
    run_example()?;
    Ok(())
}
