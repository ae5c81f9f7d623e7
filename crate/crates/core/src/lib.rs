//! Federated fine-tuning of low-rank adapters with sparse, reconstructed
//! aggregation.
//!
//! Clients train LoRA pairs locally and upload importance-sparsified factor
//! deltas. The server keeps a mirror of every client, averages the products
//! `B_i A_i` in full-rank space, projects the average back to rank `r`, and
//! broadcasts a single randomly sparsified factor update per round.

pub mod cli;
pub mod error;
pub mod harness;
pub mod lora;
pub mod seed;
pub mod server;
pub mod sparsify;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use harness::{run_simulation, RoundMetrics, SimConfig, Simulation, Strategy};
pub use lora::{LayerSpec, LoraPair};
pub use server::{ClientMirror, GlobalState, Mode};
pub use sparsify::SparsityConfig;
pub use tensor::DenseMatrix;
pub use wire::{account, decode, encode, ByteAccount, SparseDelta};
