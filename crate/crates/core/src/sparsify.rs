//! Client-side sparsification of LoRA factor updates.
//!
//! The importance of an entry of `dB` is its magnitude times the norm of the
//! row of `A` it multiplies; for `dA` it is the magnitude times the norm of
//! the matching column of `B`. This is the Frobenius norm of the rank-one
//! matrix the entry alone contributes to the full-rank update. Per-matrix
//! drop ratios grow with the log-kurtosis of the score distribution, so
//! matrices whose importance is concentrated in a few entries are pruned
//! harder.
//!
//! Random drop-and-rescale and plain magnitude pruning are provided as
//! baselines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_from;
use crate::tensor::{col_norms, kurtosis, quantile_threshold, row_norms, DenseMatrix};
use crate::wire::SparseDelta;

/// Nonnegative per-entry importance, same shape as the scored delta.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: DenseMatrix,
}

impl ImportanceScores {
    pub fn values(&self) -> &[f64] {
        self.scores.data()
    }
}

/// Parameters of the kurtosis-adaptive drop ratio
/// `clamp(alpha + kurtosis_coeff * ln(kurtosis), lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsityConfig {
    pub alpha: f64,
    pub kurtosis_coeff: f64,
    pub ratio_upper_bound: f64,
    pub ratio_lower_bound: f64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            kurtosis_coeff: 0.1,
            ratio_upper_bound: 0.99,
            ratio_lower_bound: 0.0,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        let Self {
            alpha,
            kurtosis_coeff,
            ratio_upper_bound: upper,
            ratio_lower_bound: lower,
        } = *self;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if !kurtosis_coeff.is_finite() {
            return Err(Error::Config(format!("kurtosis_coeff {kurtosis_coeff}")));
        }
        if !(0.0 <= lower && lower <= upper && upper <= 1.0) {
            return Err(Error::Config(format!(
                "ratio bounds [{lower}, {upper}] must satisfy 0 <= lower <= upper <= 1"
            )));
        }
        Ok(())
    }
}

/// `|dB[u,v]| * |A_prev[v,:]|`
pub fn importance_b(delta_b: &DenseMatrix, a_prev: &DenseMatrix) -> Result<ImportanceScores> {
    if delta_b.cols() != a_prev.rows() {
        return Err(Error::Shape {
            op: "importance_b",
            left: delta_b.shape(),
            right: a_prev.shape(),
        });
    }
    let norms = row_norms(a_prev);
    let scores = DenseMatrix::from_fn(delta_b.rows(), delta_b.cols(), |u, v| delta_b[(u, v)].abs() * norms[v]);
    Ok(ImportanceScores { scores })
}

/// `|dA[u,v]| * |B_new[:,u]|`
pub fn importance_a(delta_a: &DenseMatrix, b_new: &DenseMatrix) -> Result<ImportanceScores> {
    if b_new.cols() != delta_a.rows() {
        return Err(Error::Shape {
            op: "importance_a",
            left: delta_a.shape(),
            right: b_new.shape(),
        });
    }
    let norms = col_norms(b_new);
    let scores = DenseMatrix::from_fn(delta_a.rows(), delta_a.cols(), |u, v| delta_a[(u, v)].abs() * norms[u]);
    Ok(ImportanceScores { scores })
}

/// Drop ratio for a given kurtosis; a degenerate distribution (`None`)
/// falls back to `alpha`.
pub fn ratio_from_kurtosis(kurt: Option<f64>, config: &SparsityConfig) -> f64 {
    let raw = match kurt {
        Some(k) if k > 0.0 => config.alpha + config.kurtosis_coeff * k.ln(),
        _ => config.alpha,
    };
    raw.clamp(config.ratio_lower_bound, config.ratio_upper_bound)
}

/// Kurtosis-adaptive drop ratio over the flattened scores.
pub fn adaptive_ratio(scores: &ImportanceScores, config: &SparsityConfig) -> f64 {
    ratio_from_kurtosis(kurtosis(scores.values()), config)
}

/// Keeps entries whose score is strictly above the `rho`-quantile of all
/// scores; kept values are copied unchanged.
pub fn prune_by_importance(delta: &DenseMatrix, scores: &ImportanceScores, rho: f64) -> Result<SparseDelta> {
    if delta.shape() != scores.scores.shape() {
        return Err(Error::Shape {
            op: "prune_by_importance",
            left: delta.shape(),
            right: scores.scores.shape(),
        });
    }
    if delta.is_empty() {
        return Ok(SparseDelta::empty(delta.rows(), delta.cols()));
    }
    let threshold = quantile_threshold(scores.values(), rho)?;
    let s = scores.values();
    Ok(SparseDelta::from_filter(delta, |i, _| s[i] > threshold))
}

/// Full importance-aware pipeline for one factor: score, pick the adaptive
/// ratio, prune. Returns the sparse delta and the realized ratio.
pub fn sparsify_with_scores(
    delta: &DenseMatrix,
    scores: &ImportanceScores,
    config: &SparsityConfig,
) -> Result<(SparseDelta, f64)> {
    let rho = adaptive_ratio(scores, config);
    Ok((prune_by_importance(delta, scores, rho)?, rho))
}

/// Drops each entry independently with probability `drop_prob` and scales
/// survivors by `1 / (1 - drop_prob)`.
pub fn dare_sparsify(delta: &DenseMatrix, drop_prob: f64, seed: u64) -> Result<SparseDelta> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidInput(format!("drop probability {drop_prob} outside [0, 1)")));
    }
    let mut rng = rng_from(seed);
    let rescale = 1.0 / (1.0 - drop_prob);
    let mut mask = Vec::with_capacity(delta.len());
    let mut values = Vec::new();
    for &v in delta.data() {
        let keep = rng.random::<f64>() >= drop_prob;
        mask.push(keep);
        if keep {
            values.push(v * rescale);
        }
    }
    SparseDelta::new(delta.rows(), delta.cols(), mask, values)
}

/// Keeps entries whose magnitude is strictly above the `rho`-quantile of
/// all magnitudes.
pub fn magnitude_sparsify(delta: &DenseMatrix, rho: f64) -> Result<SparseDelta> {
    if delta.is_empty() {
        return Ok(SparseDelta::empty(delta.rows(), delta.cols()));
    }
    let magnitudes: Vec<f64> = delta.data().iter().map(|x| x.abs()).collect();
    let threshold = quantile_threshold(&magnitudes, rho)?;
    Ok(SparseDelta::from_filter(delta, |_, v| v.abs() > threshold))
}
