//! Server side: mirror client states, aggregate in full-rank space, and
//! turn the aggregate back into a single factor update for download.
//!
//! Per layer and round `t` the server
//!
//! 1. rebuilds every client's post-training pair from its sparse upload,
//! 2. averages the products `B_i A_i` (not the factors),
//! 3. optionally projects the average onto rank `r` by truncated SVD,
//! 4. forms `w_diff = W_t - B_{t-1} A_{t-1}` and solves the linearized
//!    `w_diff ~ B dA + dB A` for `dA` alone in even rounds and `dB` alone
//!    in odd rounds (least squares through the pseudoinverse),
//! 5. randomly sparsifies and rescales that update, applies it to its own
//!    pair and broadcasts it, so server and clients hold the same pair.

use crate::error::{Error, Result};
use crate::lora::LoraPair;
use crate::seed::mix;
use crate::sparsify::dare_sparsify;
use crate::tensor::{pseudoinverse, rank_r_approx, DenseMatrix};
use crate::wire::{ClientUpdate, GlobalDownload, LayerPayload};

/// Whether the aggregate is projected onto rank `r` before decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Truncated-SVD projection of the aggregate.
    Full,
    /// Skip the projection and decompose the raw aggregate.
    Efficient,
}

/// The factor a round's download updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// Round `t` (1-based) solves for `A` when even and for `B` when odd.
pub fn factor_for_round(t: u64) -> Factor {
    if t.is_multiple_of(2) {
        Factor::A
    } else {
        Factor::B
    }
}

/// Global adapter state held by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub layers: Vec<LoraPair>,
    /// `B A` of `layers`, the reference the next aggregate is compared to.
    pub reference: Vec<DenseMatrix>,
    /// Number of completed rounds.
    pub round: u64,
    pub mode: Mode,
}

impl GlobalState {
    pub fn new(layers: Vec<LoraPair>, mode: Mode) -> Self {
        let reference = layers.iter().map(LoraPair::product).collect();
        Self {
            layers,
            reference,
            round: 0,
            mode,
        }
    }
}

impl GlobalState {
    /// The state after applying `download` to every layer.
    pub fn advance(&self, download: &GlobalDownload) -> Result<GlobalState> {
        if download.layers.len() != self.layers.len() {
            return Err(Error::Shape {
                op: "advance layers",
                left: (self.layers.len(), 0),
                right: (download.layers.len(), 0),
            });
        }
        let layers = self
            .layers
            .iter()
            .zip(&download.layers)
            .map(|(pair, payload)| pair.apply_payload(payload))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalState {
            reference: layers.iter().map(LoraPair::product).collect(),
            layers,
            round: download.round,
            mode: self.mode,
        })
    }
}

/// The server's copy of one client's adapter state.
///
/// `base` is the state the client starts each round from (initial pair plus
/// every broadcast download); `current` is `base` plus whatever the client
/// uploaded this round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMirror {
    pub client_id: usize,
    pub base: Vec<LoraPair>,
    pub current: Vec<LoraPair>,
}

impl ClientMirror {
    pub fn new(client_id: usize, layers: Vec<LoraPair>) -> Self {
        Self {
            client_id,
            current: layers.clone(),
            base: layers,
        }
    }

    /// Adds an upload's sparse deltas to the current state.
    pub fn absorb_upload(&mut self, upload: &ClientUpdate) -> Result<()> {
        if upload.layers.len() != self.current.len() {
            return Err(Error::Shape {
                op: "absorb_upload layers",
                left: (self.current.len(), 0),
                right: (upload.layers.len(), 0),
            });
        }
        let updated = self
            .current
            .iter()
            .zip(&upload.layers)
            .map(|(pair, payload)| pair.apply_payload(payload))
            .collect::<Result<Vec<_>>>()?;
        self.current = updated;
        Ok(())
    }

    /// Applies a broadcast to the base and drops this round's upload, which
    /// is what the client itself does.
    pub fn apply_download(&mut self, download: &GlobalDownload) -> Result<()> {
        if download.layers.len() != self.base.len() {
            return Err(Error::Shape {
                op: "apply_download layers",
                left: (self.base.len(), 0),
                right: (download.layers.len(), 0),
            });
        }
        let updated = self
            .base
            .iter()
            .zip(&download.layers)
            .map(|(pair, payload)| pair.apply_payload(payload))
            .collect::<Result<Vec<_>>>()?;
        self.base = updated;
        self.current = self.base.clone();
        Ok(())
    }
}

/// Per-layer uniform average of the client products `B_i A_i`.
pub fn reconstruct_aggregate(mirrors: &[ClientMirror]) -> Result<Vec<DenseMatrix>> {
    let first = mirrors.first().ok_or(Error::EmptyCohort)?;
    (0..first.current.len())
        .map(|layer| {
            let products: Vec<DenseMatrix> = mirrors.iter().map(|m| m.current[layer].product()).collect();
            DenseMatrix::mean_of(&products)
        })
        .collect()
}

pub fn project_global(w: &DenseMatrix, rank: usize, mode: Mode) -> Result<DenseMatrix> {
    match mode {
        Mode::Full => rank_r_approx(w, rank),
        Mode::Efficient => Ok(w.clone()),
    }
}

/// `dA = pinv(B_prev) w_diff`, the least-squares solution of
/// `B_prev dA = w_diff`.
pub fn decompose_even(w_diff: &DenseMatrix, b_prev: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if w_diff.rows() != b_prev.rows() {
        return Err(Error::Shape {
            op: "decompose_even",
            left: w_diff.shape(),
            right: b_prev.shape(),
        });
    }
    pseudoinverse(b_prev, tol)?.matmul(w_diff)
}

/// `dB = w_diff pinv(A_prev)`, the least-squares solution of
/// `dB A_prev = w_diff`.
pub fn decompose_odd(w_diff: &DenseMatrix, a_prev: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    if w_diff.cols() != a_prev.cols() {
        return Err(Error::Shape {
            op: "decompose_odd",
            left: w_diff.shape(),
            right: a_prev.shape(),
        });
    }
    w_diff.matmul(&pseudoinverse(a_prev, tol)?)
}

/// Per-layer diagnostics of one decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub factor: Factor,
    /// `|w_diff - B dA|_F` (even) or `|w_diff - dB A|_F` (odd).
    pub residual: f64,
    pub w_diff_norm: f64,
    /// `|dA| / |A_prev|`, zero in odd rounds.
    pub ratio_a: f64,
    /// `|dB| / |B_prev|`, zero in even rounds and NaN when `B_prev = 0`.
    pub ratio_b: f64,
}

/// Result of [`srd_round`].
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub download: GlobalDownload,
    pub state: GlobalState,
    pub stats: Vec<LayerStats>,
}

fn norm_ratio(delta: &DenseMatrix, prev: &DenseMatrix) -> f64 {
    let denom = prev.frobenius_norm();
    if denom == 0.0 {
        f64::NAN
    } else {
        delta.frobenius_norm() / denom
    }
}

/// One server round: absorb uploads into the mirrors, aggregate, project,
/// decompose, sparsify the single factor update and commit it to the global
/// pair.
///
/// The committed update is the broadcast itself (randomly sparsified and
/// rescaled), not the dense solve. A caller that transmits the broadcast
/// lossily should rebuild the state from what was received with
/// [`GlobalState::advance`].
///
/// Mirrors keep the absorbed uploads; callers apply the (decoded) download
/// to mirrors and clients alike once it has been transmitted.
pub fn srd_round(
    state: &GlobalState,
    mirrors: &mut [ClientMirror],
    uploads: &[ClientUpdate],
    download_sparsity: f64,
    seed: u64,
    pinv_tol: f64,
) -> Result<RoundOutcome> {
    if mirrors.is_empty() {
        return Err(Error::EmptyCohort);
    }
    if !(0.0..1.0).contains(&download_sparsity) {
        return Err(Error::InvalidInput(format!("download sparsity {download_sparsity} outside [0, 1)")));
    }
    for upload in uploads {
        let mirror = mirrors
            .iter_mut()
            .find(|m| m.client_id == upload.client_id)
            .ok_or_else(|| Error::InvalidInput(format!("upload from unknown client {}", upload.client_id)))?;
        mirror.absorb_upload(upload)?;
    }

    let aggregate = reconstruct_aggregate(mirrors)?;
    if aggregate.len() != state.layers.len() {
        return Err(Error::Shape {
            op: "srd_round layers",
            left: (state.layers.len(), 0),
            right: (aggregate.len(), 0),
        });
    }
    let t = state.round + 1;
    let factor = factor_for_round(t);

    let mut layers = Vec::with_capacity(state.layers.len());
    let mut reference = Vec::with_capacity(state.layers.len());
    let mut payloads = Vec::with_capacity(state.layers.len());
    let mut stats = Vec::with_capacity(state.layers.len());
    for (l, (w, prev)) in aggregate.iter().zip(&state.layers).enumerate() {
        let projected = project_global(w, prev.rank(), state.mode)?;
        let w_diff = projected.sub(&state.reference[l])?;
        let layer_seed = mix(&[seed, l as u64]);
        let (payload, residual, ratio_a, ratio_b) = match factor {
            Factor::A => {
                let delta_a = decompose_even(&w_diff, &prev.b, pinv_tol)?;
                let residual = w_diff.sub(&prev.b.matmul(&delta_a)?)?.frobenius_norm();
                let ratio_a = norm_ratio(&delta_a, &prev.a);
                let sparse = dare_sparsify(&delta_a, download_sparsity, layer_seed)?;
                (LayerPayload::a_only(sparse), residual, ratio_a, 0.0)
            }
            Factor::B => {
                let delta_b = decompose_odd(&w_diff, &prev.a, pinv_tol)?;
                let residual = w_diff.sub(&delta_b.matmul(&prev.a)?)?.frobenius_norm();
                let ratio_b = norm_ratio(&delta_b, &prev.b);
                let sparse = dare_sparsify(&delta_b, download_sparsity, layer_seed)?;
                (LayerPayload::b_only(sparse), residual, 0.0, ratio_b)
            }
        };
        let next = prev.apply_payload(&payload)?;
        reference.push(next.product());
        layers.push(next);
        payloads.push(payload);
        stats.push(LayerStats {
            factor,
            residual,
            w_diff_norm: w_diff.frobenius_norm(),
            ratio_a,
            ratio_b,
        });
    }

    Ok(RoundOutcome {
        download: GlobalDownload { round: t, layers: payloads },
        state: GlobalState {
            layers,
            reference,
            round: t,
            mode: state.mode,
        },
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{svd_full, DEFAULT_PINV_TOL};
    use crate::wire::SparseDelta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::random_gaussian(rows, cols, 1.0, rng)
    }

    fn pair(d_out: usize, d_in: usize, r: usize, rng: &mut ChaCha8Rng) -> LoraPair {
        LoraPair::new(gaussian(d_out, r, rng), gaussian(r, d_in, rng)).unwrap()
    }

    fn full_update(client_id: usize, db: &DenseMatrix, da: &DenseMatrix) -> ClientUpdate {
        ClientUpdate {
            client_id,
            layers: vec![LayerPayload::both(SparseDelta::from_dense(db), SparseDelta::from_dense(da))],
        }
    }

    #[test]
    fn absorb_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pair(4, 3, 2, &mut rng);
        let mut mirror = ClientMirror::new(0, vec![p.clone()]);
        let empty = ClientUpdate {
            client_id: 0,
            layers: vec![LayerPayload::both(SparseDelta::empty(4, 2), SparseDelta::empty(2, 3))],
        };
        mirror.absorb_upload(&empty).unwrap();
        assert_eq!(mirror.current[0], p);

        let (db1, da1) = (gaussian(4, 2, &mut rng), gaussian(2, 3, &mut rng));
        let (db2, da2) = (gaussian(4, 2, &mut rng), gaussian(2, 3, &mut rng));
        let mut seq = ClientMirror::new(0, vec![p.clone()]);
        seq.absorb_upload(&full_update(0, &db1, &da1)).unwrap();
        seq.absorb_upload(&full_update(0, &db2, &da2)).unwrap();
        let mut summed = ClientMirror::new(0, vec![p.clone()]);
        summed
            .absorb_upload(&full_update(0, &db1.add(&db2).unwrap(), &da1.add(&da2).unwrap()))
            .unwrap();
        assert!(seq.current[0].b.sub(&summed.current[0].b).unwrap().max_abs() < 1e-14);
        assert!(seq.current[0].a.sub(&summed.current[0].a).unwrap().max_abs() < 1e-14);

        // an unsparsified upload reproduces the client's trained pair
        let trained = pair(4, 3, 2, &mut rng);
        let mut exact = ClientMirror::new(0, vec![p.clone()]);
        exact
            .absorb_upload(&full_update(0, &trained.b.sub(&p.b).unwrap(), &trained.a.sub(&p.a).unwrap()))
            .unwrap();
        assert!(exact.current[0].b.sub(&trained.b).unwrap().max_abs() < 1e-15);

        let wrong = full_update(0, &gaussian(3, 2, &mut rng), &da1);
        assert!(matches!(exact.absorb_upload(&wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = pair(5, 4, 2, &mut rng);
        let single = reconstruct_aggregate(&[ClientMirror::new(0, vec![p.clone()])]).unwrap();
        assert_eq!(single[0], p.product());

        let neg = LoraPair::new(p.b.scale(-1.0), p.a.clone()).unwrap();
        let cancel = reconstruct_aggregate(&[ClientMirror::new(0, vec![p.clone()]), ClientMirror::new(1, vec![neg])]).unwrap();
        assert!(cancel[0].max_abs() < 1e-15);

        let q = pair(5, 4, 2, &mut rng);
        let avg_products = reconstruct_aggregate(&[ClientMirror::new(0, vec![p.clone()]), ClientMirror::new(1, vec![q.clone()])]).unwrap();
        let b_avg = p.b.add(&q.b).unwrap().scale(0.5);
        let a_avg = p.a.add(&q.a).unwrap().scale(0.5);
        let product_of_avgs = b_avg.matmul(&a_avg).unwrap();
        // the gap is the cross term (B1 - B2)(A1 - A2) / 4
        let cross = p.b.sub(&q.b).unwrap().matmul(&p.a.sub(&q.a).unwrap()).unwrap().scale(0.25);
        let gap = avg_products[0].sub(&product_of_avgs).unwrap();
        assert!(gap.frobenius_norm() > 1e-3);
        assert!(gap.sub(&cross).unwrap().max_abs() < 1e-12);

        assert_eq!(reconstruct_aggregate(&[]), Err(Error::EmptyCohort));
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = gaussian(6, 5, &mut rng);
        assert_eq!(project_global(&w, 2, Mode::Efficient).unwrap(), w);

        let low = pair(6, 5, 2, &mut rng).product();
        assert!(project_global(&low, 2, Mode::Full).unwrap().sub(&low).unwrap().max_abs() < 1e-9);

        let s = svd_full(&w).unwrap().singular_values;
        let tail: f64 = s[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = project_global(&w, 2, Mode::Full).unwrap().sub(&w).unwrap().frobenius_norm();
        assert!((err - tail).abs() < 1e-9);
    }

    #[test]
    fn decompose_even_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = gaussian(8, 3, &mut rng);
        let zero = decompose_even(&DenseMatrix::zeros(8, 5), &b, DEFAULT_PINV_TOL).unwrap();
        assert_eq!(zero.shape(), (3, 5));
        assert!(zero.max_abs() < 1e-15);

        let x = gaussian(3, 5, &mut rng);
        let got = decompose_even(&b.matmul(&x).unwrap(), &b, DEFAULT_PINV_TOL).unwrap();
        assert!(got.sub(&x).unwrap().max_abs() < 1e-8);

        let q = svd_full(&b).unwrap().u;
        let w = gaussian(8, 5, &mut rng);
        let got = decompose_even(&w, &q, DEFAULT_PINV_TOL).unwrap();
        assert!(got.sub(&q.transpose().matmul(&w).unwrap()).unwrap().max_abs() < 1e-10);

        let residual = w.sub(&b.matmul(&decompose_even(&w, &b, DEFAULT_PINV_TOL).unwrap()).unwrap()).unwrap();
        assert!(b.transpose().matmul(&residual).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn decompose_odd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = gaussian(3, 9, &mut rng);
        assert!(decompose_odd(&DenseMatrix::zeros(6, 9), &a, DEFAULT_PINV_TOL).unwrap().max_abs() < 1e-15);

        let y = gaussian(6, 3, &mut rng);
        let got = decompose_odd(&y.matmul(&a).unwrap(), &a, DEFAULT_PINV_TOL).unwrap();
        assert!(got.sub(&y).unwrap().max_abs() < 1e-8);

        let q = svd_full(&a).unwrap().vh;
        let w = gaussian(6, 9, &mut rng);
        let got = decompose_odd(&w, &q, DEFAULT_PINV_TOL).unwrap();
        assert!(got.sub(&w.matmul(&q.transpose()).unwrap()).unwrap().max_abs() < 1e-10);
        assert!(decompose_odd(&w, &gaussian(3, 8, &mut rng), DEFAULT_PINV_TOL).is_err());
    }

    fn setup(mode: Mode) -> (GlobalState, Vec<ClientMirror>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = pair(7, 6, 2, &mut rng);
        let state = GlobalState::new(vec![p.clone()], mode);
        let mirrors = vec![ClientMirror::new(0, vec![p])];
        (state, mirrors, rng)
    }

    #[test]
    fn zero_uploads_give_zero_download() {
        let (state, mut mirrors, _) = setup(Mode::Full);
        let upload = ClientUpdate {
            client_id: 0,
            layers: vec![LayerPayload::both(SparseDelta::empty(7, 2), SparseDelta::empty(2, 6))],
        };
        let out = srd_round(&state, &mut mirrors, &[upload], 0.8, 1, DEFAULT_PINV_TOL).unwrap();
        let payload = &out.download.layers[0];
        assert!(payload.a.is_none());
        assert!(payload.b.as_ref().unwrap().values().iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(out.state.round, 1);
    }

    #[test]
    fn rounds_alternate_b_then_a() {
        let (mut state, mut mirrors, mut rng) = setup(Mode::Efficient);
        let mut seen = Vec::new();
        for t in 0..5 {
            let upload = full_update(0, &gaussian(7, 2, &mut rng).scale(0.1), &gaussian(2, 6, &mut rng).scale(0.1));
            let out = srd_round(&state, &mut mirrors, &[upload], 0.5, t, DEFAULT_PINV_TOL).unwrap();
            let payload = &out.download.layers[0];
            assert!(payload.a.is_some() != payload.b.is_some());
            seen.push(if payload.b.is_some() { 'B' } else { 'A' });
            for m in mirrors.iter_mut() {
                m.apply_download(&out.download).unwrap();
            }
            state = out.state;
        }
        assert_eq!(seen, vec!['B', 'A', 'B', 'A', 'B']);
    }

    #[test]
    fn even_round_projects_onto_column_space() {
        let (state, mut mirrors, mut rng) = setup(Mode::Efficient);
        // move the state to round 1 so the next round is even
        let state = GlobalState { round: 1, ..state };
        let prev = state.layers[0].clone();
        let (db, da) = (gaussian(7, 2, &mut rng).scale(0.2), gaussian(2, 6, &mut rng).scale(0.2));
        let trained = LoraPair::new(prev.b.add(&db).unwrap(), prev.a.add(&da).unwrap()).unwrap();
        let out = srd_round(&state, &mut mirrors, &[full_update(0, &db, &da)], 0.0, 3, DEFAULT_PINV_TOL).unwrap();
        let delta_w = trained.product().sub(&prev.product()).unwrap();
        let projector = prev.b.matmul(&pseudoinverse(&prev.b, DEFAULT_PINV_TOL).unwrap()).unwrap();
        let want = prev.product().add(&projector.matmul(&delta_w).unwrap()).unwrap();
        let got = out.state.layers[0].product();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-10);
        // download sparsity 0 broadcasts the exact update
        let sent = out.download.layers[0].a.as_ref().unwrap().to_dense();
        assert!(sent.sub(&out.state.layers[0].a.sub(&prev.a).unwrap()).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn global_pair_commits_the_broadcast() {
        let (mut state, mut mirrors, mut rng) = setup(Mode::Full);
        for t in 0..4 {
            let upload = full_update(0, &gaussian(7, 2, &mut rng).scale(0.1), &gaussian(2, 6, &mut rng).scale(0.1));
            let out = srd_round(&state, &mut mirrors, &[upload], 0.8, t, DEFAULT_PINV_TOL).unwrap();
            mirrors[0].apply_download(&out.download).unwrap();
            assert_eq!(mirrors[0].base, out.state.layers);
            assert_eq!(out.state.reference[0], out.state.layers[0].product());
            assert_eq!(state.advance(&out.download).unwrap(), out.state);
            state = out.state;
        }
    }

    #[test]
    fn round_validates_inputs() {
        let (state, mut mirrors, _) = setup(Mode::Full);
        assert!(srd_round(&state, &mut mirrors, &[], 1.0, 0, DEFAULT_PINV_TOL).is_err());
        assert_eq!(srd_round(&state, &mut [], &[], 0.5, 0, DEFAULT_PINV_TOL).unwrap_err(), Error::EmptyCohort);
    }
}
