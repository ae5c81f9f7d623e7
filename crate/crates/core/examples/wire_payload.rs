//! Encoding a sparse delta for the wire and checking its cost.
//!
//! ```text
//! cargo run --example wire_payload [out.bin]
//! ```
//!
//! With a path, the raw-bitmap payload is also written there so it can be
//! examined with `fedsrd inspect`.

use fedsrd::seed::rng_from;
use fedsrd::sparsify::dare_sparsify;
use fedsrd::wire::{encode_dense, encode_with, BitmapCoding};
use fedsrd::{account, decode, DenseMatrix};

pub struct Sizes {
    pub raw: usize,
    pub rle: usize,
    pub dense: usize,
    pub predicted_raw: usize,
}

pub fn run_example(out: Option<&std::path::Path>) -> fedsrd::Result<Sizes> {
    let mut rng = rng_from(3);
    let m = DenseMatrix::random_gaussian(64, 8, 1.0, &mut rng);
    let delta = dare_sparsify(&m, 0.8, 5)?;

    let raw = encode_with(&delta, BitmapCoding::Raw)?;
    let rle = encode_with(&delta, BitmapCoding::Rle)?;
    let dense = encode_dense(&m)?;
    let back = decode(&raw)?;
    assert_eq!(back.mask(), delta.mask());
    assert_eq!(decode(&rle)?, back);

    let sizes = Sizes {
        raw: raw.len(),
        rle: rle.len(),
        dense: dense.len(),
        predicted_raw: account(64, 8, delta.nnz(), false, true).total_bytes,
    };
    println!("64x8 delta, {} of {} entries kept", delta.nnz(), m.len());
    println!("raw bitmap {} bytes (predicted {})", sizes.raw, sizes.predicted_raw);
    println!("rle bitmap {} bytes", sizes.rle);
    println!("dense      {} bytes", sizes.dense);
    let worst = m
        .data()
        .iter()
        .zip(decode(&dense)?.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("largest f32 rounding error {worst:.2e}");

    if let Some(path) = out {
        std::fs::write(path, &raw)?;
        println!("wrote {}", path.display());
    }
    Ok(sizes)
}

fn main() -> fedsrd::Result<()> {
    let path = std::env::args().nth(1).map(std::path::PathBuf::from);
    run_example(path.as_deref())?;
    Ok(())
}
