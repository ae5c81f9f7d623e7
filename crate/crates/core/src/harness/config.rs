//! Simulation configuration, read from TOML.
//!
//! Every key is optional and falls back to the desk-scale default below;
//! unknown keys are rejected.
//!
//! ```toml
//! num_clients = 4
//! num_rounds = 30
//! layers = [[64, 64], [64, 64], [64, 64], [64, 64]]
//! rank = 8
//! strategy = "fedsrd"          # fedsrd | fedsrd-e | fedavg | fedavg+importance
//!                              # | fedavg+dare | fedavg+magnitude | ffa
//! # upload_sparsifier = "none" # none | importance | dare | magnitude
//! download_sparsity = 0.8
//! baseline_drop_ratio = 0.9
//! local_steps = 20
//! lr = 1e-3
//! batch_size = 128
//! master_seed = 42
//! teacher_shift_scale = 32.0
//! pinv_tol = 0.1            # relative to the largest singular value
//! bitmap_coding = "raw"        # raw | rle | auto
//! # output_path = "metrics.csv"
//!
//! [sparsity]
//! alpha = 0.9
//! kurtosis_coeff = 0.1
//! ratio_upper_bound = 0.99
//! ratio_lower_bound = 0.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::server::Mode;
use crate::sparsify::SparsityConfig;
use crate::wire::BitmapCoding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum Strategy {
    /// Importance-sparse uploads, reconstruct-aggregate, rank-`r` projection,
    /// alternating single-factor sparse download.
    #[serde(rename = "fedsrd")]
    FedSrd,
    /// As `fedsrd` without the projection.
    #[serde(rename = "fedsrd-e")]
    FedSrdE,
    /// Dense uploads, factors averaged separately, dense download.
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg+importance")]
    FedAvgImportance,
    #[serde(rename = "fedavg+dare")]
    FedAvgDare,
    #[serde(rename = "fedavg+magnitude")]
    FedAvgMagnitude,
    /// `A` frozen at initialization; only `B` is trained and averaged.
    #[serde(rename = "ffa")]
    Ffa,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FedSrd,
        Strategy::FedSrdE,
        Strategy::FedAvg,
        Strategy::FedAvgImportance,
        Strategy::FedAvgDare,
        Strategy::FedAvgMagnitude,
        Strategy::Ffa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedSrd => "fedsrd",
            Strategy::FedSrdE => "fedsrd-e",
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgImportance => "fedavg+importance",
            Strategy::FedAvgDare => "fedavg+dare",
            Strategy::FedAvgMagnitude => "fedavg+magnitude",
            Strategy::Ffa => "ffa",
        }
    }

    /// Server mode for the reconstruct-aggregate strategies.
    pub fn srd_mode(self) -> Option<Mode> {
        match self {
            Strategy::FedSrd => Some(Mode::Full),
            Strategy::FedSrdE => Some(Mode::Efficient),
            _ => None,
        }
    }

    pub fn default_upload_sparsifier(self) -> UploadSparsifier {
        match self {
            Strategy::FedSrd | Strategy::FedSrdE | Strategy::FedAvgImportance => UploadSparsifier::Importance,
            Strategy::FedAvgDare => UploadSparsifier::Dare,
            Strategy::FedAvgMagnitude => UploadSparsifier::Magnitude,
            Strategy::FedAvg | Strategy::Ffa => UploadSparsifier::None,
        }
    }
}

/// How clients thin their factor deltas before upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UploadSparsifier {
    /// Send every entry.
    None,
    /// Structural importance with the kurtosis-adaptive ratio.
    Importance,
    /// Random drop with rescaling at `baseline_drop_ratio`.
    Dare,
    /// Magnitude pruning at `baseline_drop_ratio`.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub num_clients: usize,
    pub num_rounds: usize,
    /// `[d_out, d_in]` per adapted layer.
    pub layers: Vec<[usize; 2]>,
    pub rank: usize,
    pub strategy: Strategy,
    /// Overrides the strategy's default upload sparsifier.
    pub upload_sparsifier: Option<UploadSparsifier>,
    pub sparsity: SparsityConfig,
    /// Drop probability of the server's broadcast.
    pub download_sparsity: f64,
    /// Fixed drop ratio of the DARE and magnitude upload baselines.
    pub baseline_drop_ratio: f64,
    pub local_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub master_seed: u64,
    /// Frobenius norm of every client's teacher shift.
    pub teacher_shift_scale: f64,
    pub pinv_tol: f64,
    pub bitmap_coding: BitmapCoding,
    pub output_path: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_clients: 4,
            num_rounds: 30,
            layers: vec![[64, 64]; 4],
            rank: 8,
            strategy: Strategy::FedSrd,
            upload_sparsifier: None,
            sparsity: SparsityConfig::default(),
            download_sparsity: 0.8,
            baseline_drop_ratio: 0.9,
            local_steps: 20,
            lr: 1e-3,
            batch_size: 128,
            master_seed: 42,
            teacher_shift_scale: 32.0,
            pinv_tol: 0.1,
            bitmap_coding: BitmapCoding::Raw,
            output_path: None,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file. Relative `output_path`s resolve
    /// against the current directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn upload_sparsifier(&self) -> UploadSparsifier {
        self.upload_sparsifier
            .unwrap_or_else(|| self.strategy.default_upload_sparsifier())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.num_rounds == 0 {
            return bad("num_rounds must be at least 1".into());
        }
        if self.layers.is_empty() {
            return bad("layers must not be empty".into());
        }
        for &[d_out, d_in] in &self.layers {
            if d_out == 0 || d_in == 0 {
                return bad(format!("layer [{d_out}, {d_in}] has a zero dimension"));
            }
            if self.rank == 0 || self.rank > d_out.min(d_in) {
                return bad(format!("rank {} invalid for layer [{d_out}, {d_in}]", self.rank));
            }
        }
        self.sparsity.validate()?;
        if !(0.0..1.0).contains(&self.download_sparsity) {
            return bad(format!("download_sparsity {} outside [0, 1)", self.download_sparsity));
        }
        if !(0.0..1.0).contains(&self.baseline_drop_ratio) {
            return bad(format!("baseline_drop_ratio {} outside [0, 1)", self.baseline_drop_ratio));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.teacher_shift_scale >= 0.0 && self.teacher_shift_scale.is_finite()) {
            return bad(format!("teacher_shift_scale {}", self.teacher_shift_scale));
        }
        if !(self.pinv_tol > 0.0 && self.pinv_tol.is_finite()) {
            return bad(format!("pinv_tol {}", self.pinv_tol));
        }
        Ok(())
    }
}
