//! LoRA adapter state, synthetic client tasks and local training.
//!
//! Each layer is an independent linear map `W = W0 + B A` with `W0` frozen.
//! A client's task for a layer is noiseless teacher-student regression
//! towards `W0 + G_i`, where the shift `G_i` mixes a rank-`r` component
//! shared by all clients with a rank-`r` component private to client `i`.
//! Distinct shifts give the clients conflicting optima.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{derive_seed, mix, rng_from, Purpose};
use crate::tensor::DenseMatrix;
use crate::wire::LayerPayload;

/// Shape and frozen base weights of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub frozen_base: DenseMatrix,
}

impl LayerSpec {
    pub fn new(rank: usize, frozen_base: DenseMatrix) -> Result<Self> {
        let (d_out, d_in) = frozen_base.shape();
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::InvalidRank {
                rank,
                max: d_out.min(d_in),
            });
        }
        Ok(Self {
            d_out,
            d_in,
            rank,
            frozen_base,
        })
    }

    /// Spec with Gaussian `W0` entries of std `1/sqrt(d_in)`.
    pub fn random(d_out: usize, d_in: usize, rank: usize, seed: u64) -> Result<Self> {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        let base = DenseMatrix::random_gaussian(d_out, d_in, std, &mut rng_from(seed));
        Self::new(rank, base)
    }
}

/// One layer's adapter factors: `B` is `d_out x r`, `A` is `r x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
}

impl LoraPair {
    pub fn new(b: DenseMatrix, a: DenseMatrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "lora pair",
                left: b.shape(),
                right: a.shape(),
            });
        }
        Ok(Self { b, a })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// The low-rank update `B A`.
    pub fn product(&self) -> DenseMatrix {
        self.b.matmul(&self.a).expect("pair shapes checked at construction")
    }

    fn check_matches(&self, b: (usize, usize), a: (usize, usize), op: &'static str) -> Result<()> {
        if self.b.shape() != b {
            return Err(Error::Shape {
                op,
                left: self.b.shape(),
                right: b,
            });
        }
        if self.a.shape() != a {
            return Err(Error::Shape {
                op,
                left: self.a.shape(),
                right: a,
            });
        }
        Ok(())
    }

    /// Adds whichever factor updates the payload carries.
    pub fn apply_payload(&self, payload: &LayerPayload) -> Result<LoraPair> {
        let mut out = self.clone();
        if let Some(db) = &payload.b {
            db.add_into(&mut out.b)?;
        }
        if let Some(da) = &payload.a {
            da.add_into(&mut out.a)?;
        }
        Ok(out)
    }
}

/// Dense factor updates `(dB, dA)` between two states of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPair {
    pub delta_b: DenseMatrix,
    pub delta_a: DenseMatrix,
}

impl DeltaPair {
    pub fn zeros_like(pair: &LoraPair) -> Self {
        Self {
            delta_b: DenseMatrix::zeros(pair.b.rows(), pair.b.cols()),
            delta_a: DenseMatrix::zeros(pair.a.rows(), pair.a.cols()),
        }
    }
}

/// `B = 0`, `A ~ N(0, 1/r)` elementwise, so the initial update `B A` is
/// exactly zero.
pub fn init_lora(spec: &LayerSpec, seed: u64) -> LoraPair {
    let std = 1.0 / (spec.rank as f64).sqrt();
    LoraPair {
        b: DenseMatrix::zeros(spec.d_out, spec.rank),
        a: DenseMatrix::random_gaussian(spec.rank, spec.d_in, std, &mut rng_from(seed)),
    }
}

/// `W0 + B A`
pub fn effective_weight(spec: &LayerSpec, pair: &LoraPair) -> Result<DenseMatrix> {
    pair.check_matches((spec.d_out, spec.rank), (spec.rank, spec.d_in), "effective_weight")?;
    spec.frozen_base.add(&pair.product())
}

pub fn compute_delta(new: &LoraPair, old: &LoraPair) -> Result<DeltaPair> {
    Ok(DeltaPair {
        delta_b: new.b.sub(&old.b)?,
        delta_a: new.a.sub(&old.a)?,
    })
}

pub fn apply_delta(pair: &LoraPair, delta: &DeltaPair) -> Result<LoraPair> {
    Ok(LoraPair {
        b: pair.b.add(&delta.delta_b)?,
        a: pair.a.add(&delta.delta_a)?,
    })
}

/// Full-rank weight change `dB A_old + B_new dA`, which equals
/// `B_new A_new - B_old A_old` exactly.
pub fn full_rank_delta(delta: &DeltaPair, b_new: &DenseMatrix, a_old: &DenseMatrix) -> Result<DenseMatrix> {
    let through_a = delta.delta_b.matmul(a_old)?;
    let through_b = b_new.matmul(&delta.delta_a)?;
    through_a.add(&through_b)
}

/// One client's private regression targets, one teacher per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTask {
    pub client_id: usize,
    pub teacher_weights: Vec<DenseMatrix>,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl ClientTask {
    /// Same task, different sampling stream.
    pub fn with_seed(&self, rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..self.clone()
        }
    }

    /// The fixed input batch (`d_in x batch_size`, standard Gaussian) used
    /// for `layer` under the current seed.
    pub fn batch(&self, layer: usize) -> DenseMatrix {
        let d_in = self.teacher_weights[layer].cols();
        let mut rng = rng_from(mix(&[self.rng_seed, layer as u64]));
        DenseMatrix::random_gaussian(d_in, self.batch_size, 1.0, &mut rng)
    }

    fn teacher(&self, layer: usize, spec: &LayerSpec) -> Result<&DenseMatrix> {
        let teacher = self
            .teacher_weights
            .get(layer)
            .ok_or_else(|| Error::InvalidInput(format!("task has no layer {layer}")))?;
        if teacher.shape() != spec.frozen_base.shape() {
            return Err(Error::Shape {
                op: "teacher",
                left: teacher.shape(),
                right: spec.frozen_base.shape(),
            });
        }
        Ok(teacher)
    }
}

fn random_low_rank<R: Rng>(d_out: usize, d_in: usize, rank: usize, rng: &mut R) -> DenseMatrix {
    let left = DenseMatrix::random_gaussian(d_out, rank, 1.0, rng);
    let right = DenseMatrix::random_gaussian(rank, d_in, 1.0, rng);
    let m = left.matmul(&right).expect("inner dims agree");
    let norm = m.frobenius_norm();
    m.scale(1.0 / norm)
}

/// Builds `num_clients` heterogeneous tasks over `specs`.
///
/// For every layer the teacher shift is `G_i = s * (C + D_i) / |C + D_i|_F`
/// with `C` a unit-norm rank-`r` matrix shared by all clients, `D_i` a
/// unit-norm rank-`r` matrix drawn per client, and `s = shift_scale`.
pub fn synthetic_tasks(
    specs: &[LayerSpec],
    num_clients: usize,
    shift_scale: f64,
    batch_size: usize,
    master_seed: u64,
) -> Vec<ClientTask> {
    let shared: Vec<DenseMatrix> = specs
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let mut rng = rng_from(derive_seed(master_seed, l as u64, 0, Purpose::Teacher));
            random_low_rank(spec.d_out, spec.d_in, spec.rank, &mut rng)
        })
        .collect();
    (0..num_clients)
        .map(|client| {
            let teacher_weights = specs
                .iter()
                .zip(&shared)
                .enumerate()
                .map(|(l, (spec, common))| {
                    let entity = ((client as u64 + 1) << 32) | l as u64;
                    let mut rng = rng_from(derive_seed(master_seed, entity, 0, Purpose::Teacher));
                    let own = random_low_rank(spec.d_out, spec.d_in, spec.rank, &mut rng);
                    let shift = common.add(&own).expect("same layer shape");
                    let shift = shift.scale(shift_scale / shift.frobenius_norm());
                    spec.frozen_base.add(&shift).expect("same layer shape")
                })
                .collect();
            ClientTask {
                client_id: client,
                teacher_weights,
                batch_size,
                rng_seed: derive_seed(master_seed, client as u64, 0, Purpose::Batch),
            }
        })
        .collect()
}

/// Expected squared error of `W0 + B A` against `teacher` over standard
/// Gaussian inputs, i.e. `|W - W*|_F^2`.
pub fn expected_loss(spec: &LayerSpec, pair: &LoraPair, teacher: &DenseMatrix) -> Result<f64> {
    let w = effective_weight(spec, pair)?;
    Ok(w.sub(teacher)?.frobenius_norm().powi(2))
}

/// Batch loss `|(W - W*) X|_F^2 / batch` on the task's batch for `layer`.
pub fn batch_loss(spec: &LayerSpec, pair: &LoraPair, task: &ClientTask, layer: usize) -> Result<f64> {
    let teacher = task.teacher(layer, spec)?;
    let residual = effective_weight(spec, pair)?.sub(teacher)?;
    let x = task.batch(layer);
    Ok(residual.matmul(&x)?.frobenius_norm().powi(2) / task.batch_size as f64)
}

/// Which factors local training may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Both,
    /// `A` stays at its current value.
    OnlyB,
}

/// Full-batch gradient descent on `B` and `A` for `steps` steps.
pub fn local_train(
    spec: &LayerSpec,
    pair: &LoraPair,
    task: &ClientTask,
    layer: usize,
    steps: usize,
    lr: f64,
) -> Result<LoraPair> {
    train(spec, pair, task, layer, steps, lr, Trainable::Both)
}

/// Gradient descent with `A` frozen.
pub fn local_train_frozen_a(
    spec: &LayerSpec,
    pair: &LoraPair,
    task: &ClientTask,
    layer: usize,
    steps: usize,
    lr: f64,
) -> Result<LoraPair> {
    train(spec, pair, task, layer, steps, lr, Trainable::OnlyB)
}

pub fn train(
    spec: &LayerSpec,
    pair: &LoraPair,
    task: &ClientTask,
    layer: usize,
    steps: usize,
    lr: f64,
    trainable: Trainable,
) -> Result<LoraPair> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate {lr}")));
    }
    pair.check_matches((spec.d_out, spec.rank), (spec.rank, spec.d_in), "local_train")?;
    let teacher = task.teacher(layer, spec)?;
    if steps == 0 {
        return Ok(pair.clone());
    }

    // With targets W* X and loss |(W0 + BA - W*) X|^2 / n, the gradient in W
    // is 2 (BA - G) S with G = W* - W0 and S = X X^T / n. Precomputing S and
    // G S keeps each step at O(r d^2).
    let x = task.batch(layer);
    let second_moment = x.matmul(&x.transpose())?.scale(1.0 / task.batch_size as f64);
    let shift = teacher.sub(&spec.frozen_base)?;
    let shift_moment = shift.matmul(&second_moment)?;

    let mut b = pair.b.clone();
    let mut a = pair.a.clone();
    for step in 0..steps {
        // grad_W = 2 (B A S - G S)
        let a_s = a.matmul(&second_moment)?;
        let mut grad_w = b.matmul(&a_s)?;
        grad_w.axpy(-1.0, &shift_moment)?;
        let grad_b = grad_w.matmul(&a.transpose())?;
        let grad_a = match trainable {
            Trainable::Both => Some(b.transpose().matmul(&grad_w)?),
            Trainable::OnlyB => None,
        };
        b.axpy(-2.0 * lr, &grad_b)?;
        if let Some(grad_a) = grad_a {
            a.axpy(-2.0 * lr, &grad_a)?;
        }
        if !b.is_finite() || !a.is_finite() {
            return Err(Error::Divergence {
                client: task.client_id,
                layer,
                step,
            });
        }
    }
    Ok(LoraPair { b, a })
}
