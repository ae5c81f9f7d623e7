//! End-to-end simulation of the protocol and its baselines.
//!
//! A round runs in three steps:
//!
//! 1. every client trains from the state it holds, sparsifies its factor
//!    deltas and uploads them (clients run in parallel);
//! 2. the server aggregates what it received and produces one broadcast;
//! 3. clients and server mirrors apply the broadcast, and the round's
//!    metrics are recorded.
//!
//! Every payload travels through [`encode`](crate::wire::encode) and
//! [`decode`], so byte counts are exact and both sides only ever see
//! transmitted (f32) values. Clients keep no local state between rounds
//! beyond the initial pair plus the broadcasts they received.

pub mod config;
pub mod metrics;

use rayon::prelude::*;

pub use config::{SimConfig, Strategy, UploadSparsifier};
pub use metrics::{emit_metrics, read_metrics, MetricsWriter, RoundMetrics, COLUMNS};

use crate::error::{Error, Result};
use crate::lora::{batch_loss, expected_loss, init_lora, synthetic_tasks, train, ClientTask, LayerSpec, LoraPair, Trainable};
use crate::seed::{derive_seed, mix, Purpose};
use crate::server::{reconstruct_aggregate, srd_round, ClientMirror, Factor, GlobalState};
use crate::sparsify::{dare_sparsify, importance_a, importance_b, magnitude_sparsify, sparsify_with_scores, ImportanceScores};
use crate::tensor::DenseMatrix;
use crate::wire::{decode, encode_dense, encode_with, BitmapCoding, ClientUpdate, GlobalDownload, LayerPayload, SparseDelta};

/// Encodes a delta the way it goes on the wire and decodes it again.
/// Fully populated deltas use the dense layout, everything else the
/// configured bitmap coding.
pub fn transmit(delta: &SparseDelta, coding: BitmapCoding) -> Result<(SparseDelta, usize)> {
    let bytes = if !delta.mask().is_empty() && delta.mask().iter().all(|&b| b) {
        encode_dense(&delta.to_dense())?
    } else {
        encode_with(delta, coding)?
    };
    Ok((decode(&bytes)?, bytes.len()))
}

fn transmit_payload(payload: &LayerPayload, coding: BitmapCoding) -> Result<(LayerPayload, usize)> {
    let mut bytes = 0;
    let mut send = |part: &Option<SparseDelta>| -> Result<Option<SparseDelta>> {
        part.as_ref()
            .map(|d| {
                let (received, n) = transmit(d, coding)?;
                bytes += n;
                Ok(received)
            })
            .transpose()
    };
    let b = send(&payload.b)?;
    let a = send(&payload.a)?;
    Ok((LayerPayload { b, a }, bytes))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_finite(xs: impl IntoIterator<Item = f64>) -> f64 {
    mean(xs.into_iter().filter(|x| x.is_finite()))
}

fn norm_ratio(delta: &DenseMatrix, prev: &DenseMatrix) -> f64 {
    let denom = prev.frobenius_norm();
    if denom == 0.0 {
        f64::NAN
    } else {
        delta.frobenius_norm() / denom
    }
}

/// What one client did in a round.
#[derive(Debug, Clone)]
pub struct ClientRound {
    pub client_id: usize,
    /// Locally trained pair per layer, before sparsification.
    pub trained: Vec<LoraPair>,
    /// The upload as the server decoded it.
    pub upload: ClientUpdate,
    pub upload_bytes: u64,
    pub loss: f64,
    pub rho_b: Vec<f64>,
    pub rho_a: Vec<f64>,
    /// `|dB dA|_F` per layer.
    pub omitted: Vec<f64>,
}

/// Everything observable about one round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub clients: Vec<ClientRound>,
    /// Mean of the mirrored client products before projection; only for
    /// the reconstruct-aggregate strategies.
    pub aggregate: Option<Vec<DenseMatrix>>,
    /// The broadcast as the clients decoded it.
    pub download: GlobalDownload,
}

#[derive(Debug, Clone)]
enum Server {
    Srd {
        state: GlobalState,
        mirrors: Vec<ClientMirror>,
    },
    Avg {
        global: Vec<LoraPair>,
    },
}

struct ServerRound {
    download: GlobalDownload,
    bytes: usize,
    aggregate: Option<Vec<DenseMatrix>>,
    residual: f64,
    ratio_a: f64,
    ratio_b: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    specs: Vec<LayerSpec>,
    tasks: Vec<ClientTask>,
    client_states: Vec<Vec<LoraPair>>,
    server: Server,
    round: u64,
    cumulative_bytes: u64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let master = config.master_seed;
        let specs = config
            .layers
            .iter()
            .enumerate()
            .map(|(l, &[d_out, d_in])| {
                LayerSpec::random(d_out, d_in, config.rank, derive_seed(master, l as u64, 0, Purpose::FrozenBase))
            })
            .collect::<Result<Vec<_>>>()?;
        let init: Vec<LoraPair> = specs
            .iter()
            .enumerate()
            .map(|(l, s)| init_lora(s, derive_seed(master, l as u64, 0, Purpose::AdapterInit)))
            .collect();
        let tasks = synthetic_tasks(
            &specs,
            config.num_clients,
            config.teacher_shift_scale,
            config.batch_size,
            master,
        );
        let server = match config.strategy.srd_mode() {
            Some(mode) => Server::Srd {
                state: GlobalState::new(init.clone(), mode),
                mirrors: (0..config.num_clients)
                    .map(|i| ClientMirror::new(i, init.clone()))
                    .collect(),
            },
            None => Server::Avg { global: init.clone() },
        };
        Ok(Self {
            client_states: vec![init; config.num_clients],
            config,
            specs,
            tasks,
            server,
            round: 0,
            cumulative_bytes: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn tasks(&self) -> &[ClientTask] {
        &self.tasks
    }

    /// Completed rounds.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.num_rounds as u64
    }

    /// The pair each client starts its next round from.
    pub fn client_states(&self) -> &[Vec<LoraPair>] {
        &self.client_states
    }

    /// The server's global pair per layer.
    pub fn global_layers(&self) -> &[LoraPair] {
        match &self.server {
            Server::Srd { state, .. } => &state.layers,
            Server::Avg { global } => global,
        }
    }

    pub fn mirrors(&self) -> Option<&[ClientMirror]> {
        match &self.server {
            Server::Srd { mirrors, .. } => Some(mirrors),
            Server::Avg { .. } => None,
        }
    }

    /// Mean over clients and layers of `|W - W*_i|_F^2`.
    pub fn eval_loss(&self, pair_of: impl Fn(usize, usize) -> LoraPair) -> Result<f64> {
        let mut total = 0.0;
        for task in &self.tasks {
            for (l, spec) in self.specs.iter().enumerate() {
                total += expected_loss(spec, &pair_of(task.client_id, l), &task.teacher_weights[l])?;
            }
        }
        Ok(total / (self.tasks.len() * self.specs.len()) as f64)
    }

    fn sparsify_upload(
        &self,
        delta: &DenseMatrix,
        scores: impl FnOnce() -> Result<ImportanceScores>,
        seed: u64,
    ) -> Result<(SparseDelta, f64)> {
        let p = self.config.baseline_drop_ratio;
        match self.config.upload_sparsifier() {
            UploadSparsifier::None => Ok((SparseDelta::from_dense(delta), 0.0)),
            UploadSparsifier::Importance => sparsify_with_scores(delta, &scores()?, &self.config.sparsity),
            UploadSparsifier::Dare => Ok((dare_sparsify(delta, p, seed)?, p)),
            UploadSparsifier::Magnitude => Ok((magnitude_sparsify(delta, p)?, p)),
        }
    }

    fn client_round(&self, i: usize, t: u64) -> Result<ClientRound> {
        let master = self.config.master_seed;
        let task = self.tasks[i].with_seed(derive_seed(master, i as u64, t, Purpose::Batch));
        let b_only = self.config.strategy == Strategy::Ffa;
        let trainable = if b_only { Trainable::OnlyB } else { Trainable::Both };

        let mut out = ClientRound {
            client_id: i,
            trained: Vec::with_capacity(self.specs.len()),
            upload: ClientUpdate {
                client_id: i,
                layers: Vec::with_capacity(self.specs.len()),
            },
            upload_bytes: 0,
            loss: 0.0,
            rho_b: Vec::new(),
            rho_a: Vec::new(),
            omitted: Vec::new(),
        };
        for (l, (spec, base)) in self.specs.iter().zip(&self.client_states[i]).enumerate() {
            let trained = train(spec, base, &task, l, self.config.local_steps, self.config.lr, trainable)?;
            out.loss += batch_loss(spec, &trained, &task, l)? / self.specs.len() as f64;
            let delta_b = trained.b.sub(&base.b)?;
            let delta_a = trained.a.sub(&base.a)?;
            out.omitted.push(delta_b.matmul(&delta_a)?.frobenius_norm());

            let seed = |factor: u64| derive_seed(master, mix(&[i as u64, l as u64, factor]), t, Purpose::UploadDare);
            let (sparse_b, rho_b) = self.sparsify_upload(&delta_b, || importance_b(&delta_b, &base.a), seed(0))?;
            out.rho_b.push(rho_b);
            let payload = if b_only {
                out.rho_a.push(f64::NAN);
                LayerPayload::b_only(sparse_b)
            } else {
                let (sparse_a, rho_a) = self.sparsify_upload(&delta_a, || importance_a(&delta_a, &trained.b), seed(1))?;
                out.rho_a.push(rho_a);
                LayerPayload::both(sparse_b, sparse_a)
            };
            let (received, bytes) = transmit_payload(&payload, self.config.bitmap_coding)?;
            out.upload.layers.push(received);
            out.upload_bytes += bytes as u64;
            out.trained.push(trained);
        }
        Ok(out)
    }

    fn srd_server(&mut self, clients: &[ClientRound], t: u64) -> Result<ServerRound> {
        let Server::Srd { state, mirrors } = &mut self.server else {
            unreachable!("srd_server on an averaging server");
        };
        let uploads: Vec<ClientUpdate> = clients.iter().map(|c| c.upload.clone()).collect();
        let seed = derive_seed(self.config.master_seed, 0, t, Purpose::DownloadDare);
        let out = srd_round(state, mirrors, &uploads, self.config.download_sparsity, seed, self.config.pinv_tol)?;
        let aggregate = reconstruct_aggregate(mirrors)?;

        let mut bytes = 0;
        let mut layers = Vec::with_capacity(out.download.layers.len());
        for payload in &out.download.layers {
            let (received, n) = transmit_payload(payload, self.config.bitmap_coding)?;
            layers.push(received);
            bytes += n;
        }
        let download = GlobalDownload { round: t, layers };
        for mirror in mirrors.iter_mut() {
            mirror.apply_download(&download)?;
        }
        // commit the broadcast as received, keeping the global pair equal
        // to every client's state
        *state = state.advance(&download)?;

        let factor = out.stats[0].factor;
        let (ratio_a, ratio_b) = match factor {
            Factor::A => (mean_finite(out.stats.iter().map(|s| s.ratio_a)), f64::NAN),
            Factor::B => (f64::NAN, mean_finite(out.stats.iter().map(|s| s.ratio_b))),
        };
        Ok(ServerRound {
            download,
            bytes,
            aggregate: Some(aggregate),
            residual: mean(out.stats.iter().map(|s| s.residual)),
            ratio_a,
            ratio_b,
        })
    }

    /// Separate averaging of `B` and `A` (only `B` for FFA).
    fn avg_server(&mut self, clients: &[ClientRound], t: u64) -> Result<ServerRound> {
        if clients.is_empty() {
            return Err(Error::EmptyCohort);
        }
        let coding = self.config.bitmap_coding;
        let dense_uploads = self.config.upload_sparsifier() == UploadSparsifier::None;
        let b_only = self.config.strategy == Strategy::Ffa;
        let Server::Avg { global } = &mut self.server else {
            unreachable!("avg_server on a reconstructing server");
        };

        let mut bytes = 0;
        let mut layers = Vec::with_capacity(global.len());
        let (mut ratios_a, mut ratios_b) = (Vec::new(), Vec::new());
        for (l, prev) in global.iter_mut().enumerate() {
            let received = clients
                .iter()
                .map(|c| prev.apply_payload(&c.upload.layers[l]))
                .collect::<Result<Vec<_>>>()?;
            let bs: Vec<DenseMatrix> = received.iter().map(|p| p.b.clone()).collect();
            let delta_b = DenseMatrix::mean_of(&bs)?.sub(&prev.b)?;
            let to_send = |d: &DenseMatrix| {
                if dense_uploads {
                    SparseDelta::from_dense(d)
                } else {
                    SparseDelta::from_nonzero(d)
                }
            };
            ratios_b.push(norm_ratio(&delta_b, &prev.b));
            let payload = if b_only {
                LayerPayload::b_only(to_send(&delta_b))
            } else {
                let as_: Vec<DenseMatrix> = received.iter().map(|p| p.a.clone()).collect();
                let delta_a = DenseMatrix::mean_of(&as_)?.sub(&prev.a)?;
                ratios_a.push(norm_ratio(&delta_a, &prev.a));
                LayerPayload::both(to_send(&delta_b), to_send(&delta_a))
            };
            let (received, n) = transmit_payload(&payload, coding)?;
            *prev = prev.apply_payload(&received)?;
            layers.push(received);
            bytes += n;
        }
        Ok(ServerRound {
            download: GlobalDownload { round: t, layers },
            bytes,
            aggregate: None,
            residual: f64::NAN,
            ratio_a: mean_finite(ratios_a),
            ratio_b: mean_finite(ratios_b),
        })
    }

    /// Runs one round.
    pub fn step(&mut self) -> Result<RoundReport> {
        if self.is_finished() {
            return Err(Error::InvalidInput(format!(
                "all {} rounds already ran",
                self.config.num_rounds
            )));
        }
        let t = self.round + 1;
        let m = self.config.num_clients;
        let clients = (0..m)
            .into_par_iter()
            .map(|i| self.client_round(i, t))
            .collect::<Result<Vec<_>>>()?;

        let server = if self.config.strategy.srd_mode().is_some() {
            self.srd_server(&clients, t)?
        } else {
            self.avg_server(&clients, t)?
        };
        for state in &mut self.client_states {
            for (pair, payload) in state.iter_mut().zip(&server.download.layers) {
                *pair = pair.apply_payload(payload)?;
            }
        }

        let upload_bytes: u64 = clients.iter().map(|c| c.upload_bytes).sum();
        let download_bytes = server.bytes as u64 * m as u64;
        self.cumulative_bytes += upload_bytes + download_bytes;
        self.round = t;

        let global = self.global_layers().to_vec();
        let eval_loss = self.eval_loss(|_, l| global[l].clone())?;
        let sync_eval_loss = self.eval_loss(|i, l| self.client_states[i][l].clone())?;
        let per_layer = |pick: fn(&ClientRound) -> &Vec<f64>| -> Vec<f64> {
            (0..self.specs.len())
                .map(|l| mean(clients.iter().map(|c| pick(c)[l])))
                .collect()
        };
        let rho_b_layers = per_layer(|c| &c.rho_b);
        let rho_a_layers = per_layer(|c| &c.rho_a);
        let client_losses: Vec<f64> = clients.iter().map(|c| c.loss).collect();

        let metrics = RoundMetrics {
            round: t,
            train_loss: mean(client_losses.iter().copied()),
            eval_loss,
            sync_eval_loss,
            upload_bytes,
            download_bytes,
            cumulative_bytes: self.cumulative_bytes,
            rho_b_mean: mean(rho_b_layers.iter().copied()),
            rho_a_mean: mean(rho_a_layers.iter().copied()),
            residual: server.residual,
            ratio_a: server.ratio_a,
            ratio_b: server.ratio_b,
            omitted_norm: mean(clients.iter().flat_map(|c| c.omitted.iter().copied())),
            client_losses,
            rho_b_layers,
            rho_a_layers,
        };
        Ok(RoundReport {
            metrics,
            clients,
            aggregate: server.aggregate,
            download: server.download,
        })
    }
}

/// Runs every round of `config`. When `output_path` is set, each row is
/// written and flushed as soon as its round finishes, so a run that stops
/// on an error leaves the completed rounds on disk.
pub fn run_simulation(config: &SimConfig) -> Result<Vec<RoundMetrics>> {
    let mut writer = config.output_path.as_deref().map(MetricsWriter::create).transpose()?;
    let mut sim = Simulation::new(config.clone())?;
    let mut rows = Vec::with_capacity(config.num_rounds);
    while !sim.is_finished() {
        let report = sim.step()?;
        if let Some(w) = writer.as_mut() {
            w.write(&report.metrics)?;
        }
        rows.push(report.metrics);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(strategy: Strategy) -> SimConfig {
        SimConfig {
            num_clients: 3,
            num_rounds: 4,
            layers: vec![[12, 10], [8, 8]],
            rank: 3,
            strategy,
            local_steps: 5,
            batch_size: 32,
            ..SimConfig::default()
        }
    }

    #[test]
    fn every_strategy_runs_with_exact_byte_totals() {
        for s in Strategy::ALL {
            let rows = run_simulation(&small(s)).unwrap();
            assert_eq!(rows.len(), 4, "{}", s.name());
            let mut total = 0;
            for r in &rows {
                total += r.upload_bytes + r.download_bytes;
                assert_eq!(r.cumulative_bytes, total);
                assert!(r.eval_loss.is_finite() && r.train_loss.is_finite());
            }
        }
    }

    #[test]
    fn transmit_prefers_dense_layout_when_full() {
        let m = DenseMatrix::from_rows(&[[1.0, 0.0], [0.5, -2.0]]).unwrap();
        let (back, n) = transmit(&SparseDelta::from_dense(&m), BitmapCoding::Raw).unwrap();
        assert_eq!(n, 18 + 16);
        assert_eq!(back.to_dense(), m);
        let (back, n) = transmit(&SparseDelta::from_nonzero(&m), BitmapCoding::Raw).unwrap();
        assert_eq!(n, 18 + 1 + 12);
        assert_eq!(back.to_dense(), m);
    }

    #[test]
    fn step_past_the_end_is_an_error() {
        let mut sim = Simulation::new(SimConfig {
            num_rounds: 1,
            ..small(Strategy::FedAvg)
        })
        .unwrap();
        sim.step().unwrap();
        assert!(sim.step().is_err());
    }
}
