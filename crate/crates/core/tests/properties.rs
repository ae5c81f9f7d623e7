//! Property tests against independent oracles: nalgebra for the linear
//! algebra, brute-force contribution matrices for importance scores, and
//! direct byte counting for the wire format.

use nalgebra::DMatrix;
use proptest::prelude::*;

use fedsrd::lora::{compute_delta, full_rank_delta};
use fedsrd::seed::rng_from;
use fedsrd::sparsify::{importance_a, importance_b};
use fedsrd::tensor::{kurtosis, pseudoinverse, quantile_threshold, rank_r_approx, svd_full};
use fedsrd::wire::{encode_dense, encode_with, rle_bitmap, unrle_bitmap, BitmapCoding};
use fedsrd::{account, decode, encode, DenseMatrix, LoraPair, SparseDelta};

fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    DenseMatrix::random_gaussian(rows, cols, 1.0, &mut rng_from(seed))
}

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Gaussian matrix with a random share of entries forced to zero.
fn sparse_gaussian(rows: usize, cols: usize, keep: f64, seed: u64) -> DenseMatrix {
    let mask = gaussian(rows, cols, seed ^ 0xA5A5);
    let g = gaussian(rows, cols, seed);
    let cut = quantile_threshold(mask.data(), 1.0 - keep.clamp(0.0, 1.0)).unwrap_or(0.0);
    DenseMatrix::from_fn(rows, cols, |i, j| if keep >= 1.0 || mask[(i, j)] > cut { g[(i, j)] } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn singular_values_match_nalgebra(rows in 1usize..20, cols in 1usize..20, seed: u64) {
        let m = gaussian(rows, cols, seed);
        let ours = svd_full(&m).unwrap().singular_values;
        let mut theirs: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!(rel_close(*a, *b, 1e-10), "{} vs {}", a, b);
        }
    }

    #[test]
    fn rank_r_error_is_tail_energy(rows in 1usize..16, cols in 1usize..16, seed: u64) {
        let m = gaussian(rows, cols, seed);
        let na = to_na(&m).svd(true, true);
        let mut sigma: Vec<f64> = na.singular_values.iter().copied().collect();
        sigma.sort_by(|a, b| b.total_cmp(a));
        for r in 1..=rows.min(cols) {
            let err = m.sub(&rank_r_approx(&m, r).unwrap()).unwrap().frobenius_norm().powi(2);
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
            prop_assert!((err - tail).abs() <= 1e-9 * sigma[0] * sigma[0], "r={} {} vs {}", r, err, tail);
        }
    }

    #[test]
    fn pseudoinverse_satisfies_penrose_conditions(rows in 1usize..14, cols in 1usize..14, rank in 1usize..6, seed: u64) {
        let k = rank.min(rows).min(cols);
        let m = gaussian(rows, k, seed).matmul(&gaussian(k, cols, seed.wrapping_add(1))).unwrap();
        let p = pseudoinverse(&m, 1e-10).unwrap();
        let scale = m.max_abs().max(p.max_abs()).max(1.0);
        let close = |x: &DenseMatrix, y: &DenseMatrix| x.sub(y).unwrap().max_abs() <= 1e-8 * scale * scale * scale;
        let mpm = m.matmul(&p).unwrap().matmul(&m).unwrap();
        let pmp = p.matmul(&m).unwrap().matmul(&p).unwrap();
        let mp = m.matmul(&p).unwrap();
        let pm = p.matmul(&m).unwrap();
        prop_assert!(close(&mpm, &m));
        prop_assert!(close(&pmp, &p));
        prop_assert!(close(&mp, &mp.transpose()));
        prop_assert!(close(&pm, &pm.transpose()));
    }

    // nalgebra's SVD can return wrong singular values for rank-deficient
    // input, so the oracle here is the symmetric eigensolver on M^T M.
    #[test]
    fn rank_deficient_singular_values_match_gram_eigenvalues(rows in 2usize..14, cols in 2usize..14, rank in 1usize..6, seed: u64) {
        let k = rank.min(rows).min(cols);
        let m = gaussian(rows, k, seed).matmul(&gaussian(k, cols, seed.wrapping_add(1))).unwrap();
        let ours = svd_full(&m).unwrap().singular_values;
        let na = to_na(&m);
        let mut eig: Vec<f64> = (na.transpose() * &na).symmetric_eigen().eigenvalues.iter().map(|e| e.max(0.0)).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let top = ours[0] * ours[0];
        for (i, s) in ours.iter().enumerate() {
            prop_assert!((s * s - eig[i]).abs() <= 1e-10 * top, "sigma_{} {} vs {}", i, s * s, eig[i]);
        }
        let energy: f64 = ours.iter().map(|s| s * s).sum();
        prop_assert!(rel_close(energy, m.frobenius_norm().powi(2), 1e-12));
    }

    #[test]
    fn quantile_brackets_the_right_share(values in prop::collection::vec(-1e3f64..1e3, 1..200), q in 0.0f64..=1.0) {
        let t = quantile_threshold(&values, q).unwrap();
        let n = values.len() as f64;
        let below = values.iter().filter(|&&v| v < t).count() as f64;
        let at_or_below = values.iter().filter(|&&v| v <= t).count() as f64;
        // linear interpolation between order statistics floor(q(n-1)) and ceil(q(n-1))
        prop_assert!(below <= (q * (n - 1.0)).ceil());
        prop_assert!(at_or_below >= (q * (n - 1.0)).floor() + 1.0);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= t && t <= max);
    }

    #[test]
    fn kurtosis_is_affine_invariant(values in prop::collection::vec(-10f64..10.0, 4..100), a in 0.1f64..50.0, b in -100f64..100.0) {
        let base = kurtosis(&values);
        let moved: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        if let (Some(x), Some(y)) = (base, kurtosis(&moved)) {
            prop_assert!(rel_close(x, y, 1e-6), "{} vs {}", x, y);
        }
        if let Some(k) = base {
            prop_assert!(k >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn importance_is_the_norm_of_each_entry_contribution(d_out in 1usize..17, r in 1usize..9, d_in in 1usize..17, seed: u64) {
        let delta_b = gaussian(d_out, r, seed);
        let a_prev = gaussian(r, d_in, seed ^ 1);
        let scores = importance_b(&delta_b, &a_prev).unwrap();
        for u in 0..d_out {
            for v in 0..r {
                let single = DenseMatrix::from_fn(d_out, r, |i, j| if (i, j) == (u, v) { delta_b[(u, v)] } else { 0.0 });
                let want = single.matmul(&a_prev).unwrap().frobenius_norm();
                prop_assert!(rel_close(scores.scores[(u, v)], want, 1e-10));
            }
        }
        let delta_a = gaussian(r, d_in, seed ^ 2);
        let b_new = gaussian(d_out, r, seed ^ 3);
        let scores = importance_a(&delta_a, &b_new).unwrap();
        for u in 0..r {
            for v in 0..d_in {
                let single = DenseMatrix::from_fn(r, d_in, |i, j| if (i, j) == (u, v) { delta_a[(u, v)] } else { 0.0 });
                let want = b_new.matmul(&single).unwrap().frobenius_norm();
                prop_assert!(rel_close(scores.scores[(u, v)], want, 1e-10));
            }
        }
    }

    #[test]
    fn full_rank_delta_is_the_product_difference(d_out in 1usize..12, r in 1usize..6, d_in in 1usize..12, seed: u64) {
        let old = LoraPair::new(gaussian(d_out, r, seed), gaussian(r, d_in, seed ^ 1)).unwrap();
        let new = LoraPair::new(gaussian(d_out, r, seed ^ 2), gaussian(r, d_in, seed ^ 3)).unwrap();
        let delta = compute_delta(&new, &old).unwrap();
        let got = full_rank_delta(&delta, &new.b, &old.a).unwrap();
        let want = new.product().sub(&old.product()).unwrap();
        prop_assert!(got.sub(&want).unwrap().max_abs() <= 1e-12 * want.max_abs().max(1.0));
    }

    #[test]
    fn wire_round_trip_and_exact_cost(rows in 0usize..20, cols in 0usize..20, keep in 0.0f64..=1.0, seed: u64) {
        let m = sparse_gaussian(rows, cols, keep, seed);
        let delta = SparseDelta::from_nonzero(&m);
        let narrowed = delta.narrowed();
        for coding in [BitmapCoding::Raw, BitmapCoding::Rle, BitmapCoding::Auto] {
            let bytes = encode_with(&delta, coding).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), narrowed.clone());
        }
        let raw = encode(&delta, false).unwrap();
        prop_assert_eq!(raw.len(), account(rows, cols, delta.nnz(), false, true).total_bytes);
        let dense = encode_dense(&m).unwrap();
        prop_assert_eq!(dense.len(), account(rows, cols, rows * cols, true, false).total_bytes);
        prop_assert_eq!(decode(&dense).unwrap().to_dense(), narrowed.to_dense());
    }

    #[test]
    fn rle_round_trips_any_bitmap(bits in prop::collection::vec(any::<bool>(), 0..500)) {
        let packed = rle_bitmap(&bits);
        prop_assert_eq!(unrle_bitmap(&packed, bits.len()).unwrap(), bits);
    }
}
