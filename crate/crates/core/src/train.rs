//! Soft Dice loss, Adam with decoupled weight decay, step learning-rate decay
//! and the patch-based training loop.

use std::io::Write;
use std::sync::mpsc::sync_channel;

use crate::netbuild::{forward_pass, ForwardOptions, NetError, NetGraph, ParamStore};
use crate::rng::{derive_seed, SplitMix64};
use crate::synthdata::{crop_patch, zscore_bscan, SegSample, SynthError};
use crate::tensor::{Backward, Scalar, Tape, Tensor, TensorError, Var};

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("non-finite value at iteration {iteration} in `{parameter}`")]
    NonFinite { iteration: usize, parameter: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Patch extent, one entry per input dimension.
    pub patch: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    /// First iteration run at the decayed rate.
    pub decay_iteration: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Geographic-atrophy schedule.
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 8,
            patch: vec![64, 256, 64],
            lr: 1e-3,
            weight_decay: 1e-5,
            decay_iteration: 20_000,
            decay_factor: 10.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Vessel-segmentation schedule.
    pub fn vessels() -> Self {
        Self {
            iterations: 10_000,
            patch: vec![32, 128, 256],
            decay_iteration: 6_000,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.decay_iteration > self.iterations {
            return fail(format!(
                "decay_iteration {} exceeds iterations {}",
                self.decay_iteration, self.iterations
            ));
        }
        if !(self.decay_factor > 1.0) {
            return fail(format!("decay_factor {} must exceed 1", self.decay_factor));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr must be positive and weight_decay non-negative".into());
        }
        if self.patch.is_empty() || self.patch.contains(&0) {
            return fail(format!("bad patch {:?}", self.patch));
        }
        Ok(())
    }
}

pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    if iteration < config.decay_iteration {
        config.lr
    } else {
        config.lr / config.decay_factor
    }
}

fn dice_terms<T: Scalar>(pred: &[T], target: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p.as_f64(), t.as_f64());
        inter += p * t;
        total += p + t;
    }
    (inter, total)
}

fn check_extents<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> std::result::Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` over the whole tensor.
pub fn dice_loss_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> std::result::Result<f64, TensorError> {
    check_extents(pred, target)?;
    let (inter, total) = dice_terms(pred.data(), target.data());
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

struct DiceAdjoint<T: Scalar> {
    target: Tensor<T>,
    eps: f64,
}

impl<T: Scalar> Backward<T> for DiceAdjoint<T> {
    fn backward(&self, grad_out: &Tensor<T>, inputs: &[&Tensor<T>]) -> std::result::Result<Vec<Option<Tensor<T>>>, TensorError> {
        let pred = inputs[0];
        let (inter, total) = dice_terms(pred.data(), self.target.data());
        let s = total + self.eps;
        let num = 2.0 * inter + self.eps;
        let g = grad_out.data()[0].as_f64();
        let data = self
            .target
            .data()
            .iter()
            .map(|&t| T::of(-g * (2.0 * t.as_f64() * s - num) / (s * s)))
            .collect();
        Ok(vec![Some(Tensor::new(pred.shape().to_vec(), data)?)])
    }
}

/// Records the soft Dice loss of `pred` against a constant `target`.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, eps: f64) -> std::result::Result<Var, TensorError> {
    let value = dice_loss_value(tape.value(pred), target, eps)?;
    let adjoint = DiceAdjoint {
        target: target.clone(),
        eps,
    };
    tape.custom(Tensor::scalar(T::of(value)), &[pred], Box::new(adjoint))
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step; the weight decay `lr * wd * theta` is added to the update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    weight_decay: f64,
) -> std::result::Result<(), TensorError> {
    if grads.len() != params.tensors.len() || state.m.len() != grads.len() {
        return Err(TensorError::Invalid {
            op: "adam_step",
            msg: format!("{} gradients for {} parameters", grads.len(), params.tensors.len()),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, wd, eps) = (T::of(lr), T::of(weight_decay), T::of(state.eps));
    let one = T::one();
    for (k, g) in grads.iter().enumerate() {
        let p = &mut params.tensors[k];
        if g.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (theta, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv<W: Write>(w: &mut W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "iter,loss,lr")?;
    for r in records {
        writeln!(w, "{},{},{}", r.iteration, r.loss, r.lr)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub losses: Vec<LossRecord>,
}

/// One batch: input `[B, 1, patch..]` and target `[B, patch_1, patch_2]`.
type Batch = (Tensor<f32>, Tensor<f32>);

fn check_dataset(graph: &NetGraph, samples: &[SegSample], config: &TrainConfig) -> Result<()> {
    let arch = &graph.config;
    if arch.n_dims != 3 || arch.target_dims != 2 {
        return Err(TrainError::Data(format!(
            "volumes are 3D with 2D masks; network maps {}D to {}D",
            arch.n_dims, arch.target_dims
        )));
    }
    if graph.extent.0 != config.patch {
        return Err(TrainError::Data(format!(
            "network built for {:?}, patch is {:?}",
            graph.extent.0, config.patch
        )));
    }
    if samples.is_empty() {
        return Err(TrainError::Data("no training samples".into()));
    }
    for s in samples {
        if s.volume.rank() != 3 || s.volume.shape().iter().zip(&config.patch).any(|(v, p)| p > v) {
            return Err(TrainError::Data(format!(
                "sample `{}` {:?} smaller than patch {:?}",
                s.id,
                s.volume.shape(),
                config.patch
            )));
        }
    }
    Ok(())
}

fn make_batch(samples: &[SegSample], patch: &[usize], batch: usize, rng: &mut SplitMix64) -> Result<Batch> {
    let mut xs = Vec::with_capacity(batch);
    let mut ys = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = &samples[rng.below(samples.len())];
        let crop = crop_patch(s, patch, rng)?;
        let mut shape = vec![1];
        shape.extend_from_slice(patch);
        xs.push(crop.volume.reshape(&shape)?);
        ys.push(crop.mask);
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

fn first_non_finite(graph: &NetGraph, tensors: &[Tensor<f32>]) -> Option<String> {
    tensors
        .iter()
        .zip(&graph.params)
        .find(|(t, _)| !t.is_finite())
        .map(|(_, spec)| spec.name.clone())
}

/// Trains `graph` (built for the patch extent) on `samples`.
///
/// Volumes are slice-wise z-scored once up front. Batches are produced on a
/// helper thread through a bounded queue and consumed in production order.
/// `on_checkpoint` is called after every `checkpoint_every` iterations.
pub fn train(
    graph: &NetGraph,
    samples: &[SegSample],
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ParamStore<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.check()?;
    check_dataset(graph, samples, config)?;
    let prepared: Vec<SegSample> = samples
        .iter()
        .map(|s| SegSample {
            volume: zscore_bscan(&s.volume),
            ..s.clone()
        })
        .collect();

    let mut params = ParamStore::init(graph, config.seed);
    let mut state = OptimState::new(&params);
    let mut losses = Vec::with_capacity(config.iterations);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        let prepared = &prepared;
        scope.spawn(move || {
            let mut rng = SplitMix64::new(derive_seed(config.seed, 1));
            for _ in 0..config.iterations {
                let batch = make_batch(prepared, &config.patch, config.batch_size, &mut rng);
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });

        for iteration in 0..config.iterations {
            let (x, y) = rx.recv().expect("producer yields one batch per iteration")?;
            let lr = lr_at(iteration, config);
            let non_finite = |parameter: String| TrainError::NonFinite { iteration, parameter };
            let mut pass = match forward_pass(graph, &params, x, ForwardOptions::default(), true, false) {
                Err(NetError::Tensor(TensorError::NonFinite { op })) => {
                    return Err(non_finite(first_non_finite(graph, &params.tensors).unwrap_or(op.to_string())))
                }
                r => r?,
            };
            let loss = dice_loss(&mut pass.tape, pass.output, &y, DICE_EPS)?;
            let value = pass.tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let culprit = first_non_finite(graph, &params.tensors).unwrap_or_else(|| "loss".into());
                return Err(non_finite(culprit));
            }
            pass.tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = pass
                .params
                .iter()
                .zip(&params.tensors)
                .map(|(&v, p)| pass.tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if let Some(name) = first_non_finite(graph, &grads) {
                return Err(non_finite(format!("{name} (gradient)")));
            }
            adam_step(&mut params, &grads, &mut state, lr, config.weight_decay)?;
            losses.push(LossRecord {
                iteration,
                loss: value,
                lr,
            });
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                on_checkpoint(iteration + 1, &params)?;
            }
        }
        Ok(())
    })?;

    Ok(TrainOutcome { params, losses })
}
