//! Gradient-masked sparse finetuning and a LoRA baseline on synthetic
//! teacher–student regression tasks.
//!
//! Masking is applied to the full gradient right before the optimizer step;
//! positions outside the mask are never written, so they stay bit-identical
//! to their initial values.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::adapter::{LoraAdapter, ScalingRule, SparseAdapter};
use crate::error::{Result, ShiraError};
use crate::linalg::DenseMatrix;
use crate::mask::Mask;
use crate::model::{Batch, LossKind, ModelGrads, TensorId, ToyModel};
use crate::rng::{derive_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = ShiraError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(ShiraError::param(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossKind,
    /// Update biases as well (default: frozen).
    pub train_biases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0,
            steps: 2000,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            seed: 0,
            loss: LossKind::Mse,
            train_biases: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ShiraError::param("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ShiraError::param("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_masked: f64,
    pub grad_norm_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm_masked,grad_norm_total\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", r.step, r.loss, r.grad_norm_masked, r.grad_norm_total);
        }
        s
    }
}

/// Synthetic regression target: a teacher network equal to a base network
/// plus sparse perturbations of its weight tensors.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub teacher: ToyModel,
    pub perturbations: Vec<(TensorId, SparseAdapter)>,
    /// Inputs are nonzero only on features `start..start+len` when set.
    pub input_block: Option<(usize, usize)>,
    pub seed: u64,
}

impl TeacherTask {
    /// Perturbs `density` of each listed tensor of `base` with
    /// `N(0, magnitude²)` values at uniformly random positions. With an input
    /// block, `w1` perturbations are confined to the block's columns.
    pub fn new(
        base: &ToyModel,
        tensors: &[TensorId],
        density: f64,
        magnitude: f64,
        input_block: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=0.02 + 1e-12).contains(&density) {
            return Err(ShiraError::param(format!(
                "perturbation density must be at most 0.02, got {density}"
            )));
        }
        if let Some((start, len)) = input_block {
            if len == 0 || start + len > base.input_dim() {
                return Err(ShiraError::param("input block outside the input dimension"));
            }
        }
        let mut rng = SeededRng::new(derive_seed(seed, 0x7EAC));
        let mut teacher = base.clone();
        let mut perturbations = Vec::new();
        for &id in tensors {
            let w = base.weight(id);
            let (rows, cols) = w.shape();
            let candidates: Vec<usize> = (0..rows * cols)
                .filter(|&i| match (id, input_block) {
                    (TensorId::W1, Some((start, len))) => (start..start + len).contains(&(i % cols)),
                    _ => true,
                })
                .collect();
            let k = ((density * (rows * cols) as f64).floor() as usize).min(candidates.len());
            let picks = rng.sample_indices(candidates.len(), k);
            let indices: Vec<usize> = picks.into_iter().map(|p| candidates[p]).collect();
            let values: Vec<f64> = indices
                .iter()
                .map(|_| loop {
                    let v = rng.gaussian() * magnitude;
                    if v != 0.0 {
                        break v;
                    }
                })
                .collect();
            let adapter = SparseAdapter::new(id.name(), rows, cols, indices, values)?;
            adapter.scatter_into(teacher.weight_mut(id), 1.0)?;
            perturbations.push((id, adapter));
        }
        Ok(Self {
            teacher,
            perturbations,
            input_block,
            seed,
        })
    }

    pub fn perturbation(&self, id: TensorId) -> Option<&SparseAdapter> {
        self.perturbations.iter().find(|(t, _)| *t == id).map(|(_, a)| a)
    }

    /// Masks equal to the perturbation supports.
    pub fn oracle_masks(&self) -> Vec<(TensorId, Mask)> {
        self.perturbations.iter().map(|(id, a)| (*id, a.support())).collect()
    }

    /// Gaussian inputs labelled by the teacher.
    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<Batch> {
        let dim = self.teacher.input_dim();
        let mut rng = SeededRng::new(derive_seed(self.seed, seed));
        let mut data = vec![0.0; batch_size * dim];
        for row in data.chunks_mut(dim) {
            for (j, x) in row.iter_mut().enumerate() {
                let inside = self.input_block.is_none_or(|(s, l)| (s..s + l).contains(&j));
                if inside {
                    *x = rng.gaussian();
                }
            }
        }
        let inputs = DenseMatrix::from_vec(batch_size, dim, data)?;
        let targets = self.teacher.forward(&inputs)?;
        Ok(Batch { inputs, targets })
    }

    /// Held-out evaluation batch, drawn from a stream disjoint from training.
    pub fn heldout(&self, size: usize) -> Result<Batch> {
        self.sample(size, u64::MAX - 1)
    }

    /// Training batch for `step` under `config`.
    pub fn train_batch(&self, config: &TrainConfig, step: usize) -> Result<Batch> {
        self.sample(config.batch_size, derive_seed(config.seed, step as u64))
    }

    pub fn calibration_batches(&self, count: usize, batch_size: usize) -> Result<Vec<Batch>> {
        (0..count)
            .map(|i| self.sample(batch_size, derive_seed(0xCA11B, i as u64)))
            .collect()
    }
}

pub fn evaluate(model: &ToyModel, batch: &Batch, loss: LossKind) -> Result<f64> {
    model.loss(&batch.inputs, &batch.targets, loss)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Stepper {
    kind: Optimizer,
    lr: f64,
    t: i32,
    states: Vec<AdamState>,
}

impl Stepper {
    fn new(config: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            t: 0,
            states: sizes
                .iter()
                .map(|&n| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates `param[i]` for every `i` accepted by `active`.
    fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], active: impl Fn(usize) -> bool) {
        match self.kind {
            Optimizer::Sgd => {
                for (i, (p, g)) in param.iter_mut().zip(grad).enumerate() {
                    if active(i) {
                        *p -= self.lr * g;
                    }
                }
            }
            Optimizer::Adam => {
                let st = &mut self.states[slot];
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (i, (p, g)) in param.iter_mut().zip(grad).enumerate() {
                    if !active(i) {
                        continue;
                    }
                    st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
                    st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = st.m[i] / c1;
                    let vhat = st.v[i] / c2;
                    *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ShiraError::Training {
            step,
            message: format!("loss became {loss}"),
        })
    }
}

fn sq_norm(s: &[f64]) -> f64 {
    s.iter().map(|x| x * x).sum()
}

/// Trainable positions of the two weight tensors.
enum Trainable<'a> {
    All,
    Masked(&'a [(TensorId, Mask)]),
}

impl Trainable<'_> {
    fn mask(&self, id: TensorId) -> Option<Option<&Mask>> {
        match self {
            Trainable::All => Some(None),
            Trainable::Masked(ms) => ms.iter().find(|(t, _)| *t == id).map(|(_, m)| Some(m)),
        }
    }
}

fn fit(
    model: &ToyModel,
    trainable: Trainable<'_>,
    task: &TeacherTask,
    config: &TrainConfig,
) -> Result<(ToyModel, TrainLog)> {
    config.validate()?;
    let mut model = model.clone();
    let sizes = [model.w1.len(), model.w2.len(), model.b1.len(), model.b2.len()];
    let mut opt = Stepper::new(config, &sizes);
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let batch = task.train_batch(config, step)?;
        let (loss, mut grads) = model.loss_and_grad(&batch.inputs, &batch.targets, config.loss)?;
        check_loss(step, loss)?;
        let total = grads.norm();
        let mut masked_sq = 0.0;
        for id in TensorId::ALL {
            match trainable.mask(id) {
                Some(Some(mask)) => mask.apply_to(grads.weight_mut(id)),
                Some(None) => {}
                None => grads.weight_mut(id).as_mut_slice().fill(0.0),
            }
            masked_sq += sq_norm(grads.weight(id).as_slice());
        }
        if config.train_biases {
            masked_sq += sq_norm(&grads.b1) + sq_norm(&grads.b2);
        }
        opt.tick();
        for (slot, id) in TensorId::ALL.into_iter().enumerate() {
            let g = grads.weight(id).as_slice();
            match trainable.mask(id) {
                Some(Some(mask)) => opt.update(slot, model.weight_mut(id).as_mut_slice(), g, |i| mask.contains(i)),
                Some(None) => opt.update(slot, model.weight_mut(id).as_mut_slice(), g, |_| true),
                None => {}
            }
        }
        if config.train_biases {
            opt.update(2, &mut model.b1, &grads.b1, |_| true);
            opt.update(3, &mut model.b2, &grads.b2, |_| true);
        }
        log.records.push(StepRecord {
            step,
            loss,
            grad_norm_masked: masked_sq.sqrt(),
            grad_norm_total: total,
        });
    }
    Ok((model, log))
}

/// Sparse finetuning: only positions set in the per-tensor masks move.
/// Weight tensors without a mask entry are frozen.
pub fn train_shira(
    model: &ToyModel,
    masks: &[(TensorId, Mask)],
    task: &TeacherTask,
    config: &TrainConfig,
) -> Result<(ToyModel, TrainLog)> {
    for (id, m) in masks {
        if m.shape() != model.weight(*id).shape() {
            return Err(ShiraError::shape(format!(
                "mask for {id} is {:?}, tensor is {:?}",
                m.shape(),
                model.weight(*id).shape()
            )));
        }
    }
    fit(model, Trainable::Masked(masks), task, config)
}

/// Ordinary full finetuning of both weight tensors.
pub fn train_full(model: &ToyModel, task: &TeacherTask, config: &TrainConfig) -> Result<(ToyModel, TrainLog)> {
    fit(model, Trainable::All, task, config)
}

/// Sparse adapters `W_tuned − W_base` for each weight tensor.
pub fn extract_adapters(base: &ToyModel, tuned: &ToyModel) -> Result<Vec<(TensorId, SparseAdapter)>> {
    TensorId::ALL
        .into_iter()
        .map(|id| Ok((id, crate::adapter::extract(tuned.weight(id), base.weight(id), id.name())?)))
        .collect()
}

/// LoRA adapters attached to a frozen base model.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub adapters: Vec<(TensorId, LoraAdapter)>,
}

impl LoraSet {
    pub fn init(
        model: &ToyModel,
        targets: &[TensorId],
        rank: usize,
        alpha: f64,
        rule: ScalingRule,
        seed: u64,
    ) -> Result<Self> {
        let adapters = targets
            .iter()
            .map(|&id| {
                let (n, m) = model.weight(id).shape();
                Ok((id, LoraAdapter::init(id.name(), n, m, rank, alpha, rule, derive_seed(seed, id as u64 + 11))?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { adapters })
    }

    /// Base model with every adapter fused into its target.
    pub fn merged(&self, base: &ToyModel) -> Result<ToyModel> {
        let mut m = base.clone();
        for (id, a) in &self.adapters {
            *m.weight_mut(*id) = crate::adapter::fuse_lora(m.weight(*id), a)?;
        }
        Ok(m)
    }
}

/// Gradients of the loss with respect to each adapter's `(A, B)` factors.
pub fn lora_factor_grads(
    base: &ToyModel,
    set: &LoraSet,
    batch: &Batch,
    loss: LossKind,
) -> Result<(f64, Vec<(DenseMatrix, DenseMatrix)>)> {
    let merged = set.merged(base)?;
    let (value, grads): (f64, ModelGrads) = merged.loss_and_grad(&batch.inputs, &batch.targets, loss)?;
    let out = set
        .adapters
        .iter()
        .map(|(id, a)| {
            let g = grads.weight(*id);
            let s = a.effective_scale();
            let ga = g.matmul(&a.b.transpose())?.scaled(s);
            let gb = a.a.t_matmul(g)?.scaled(s);
            Ok((ga, gb))
        })
        .collect::<Result<_>>()?;
    Ok((value, out))
}

/// Trains LoRA factors on `targets`; base weights never change.
pub fn train_lora(
    model: &ToyModel,
    targets: &[TensorId],
    rank: usize,
    alpha: f64,
    rule: ScalingRule,
    task: &TeacherTask,
    config: &TrainConfig,
) -> Result<(LoraSet, TrainLog)> {
    config.validate()?;
    for &id in targets {
        let (n, m) = model.weight(id).shape();
        if rank == 0 || rank > n.min(m) {
            return Err(ShiraError::param(format!("rank {rank} invalid for {id} ({n}x{m})")));
        }
    }
    let mut set = LoraSet::init(model, targets, rank, alpha, rule, config.seed)?;
    let sizes: Vec<usize> = set
        .adapters
        .iter()
        .flat_map(|(_, a)| [a.a.len(), a.b.len()])
        .collect();
    let mut opt = Stepper::new(config, &sizes);
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let batch = task.train_batch(config, step)?;
        let (loss, grads) = lora_factor_grads(model, &set, &batch, config.loss)?;
        check_loss(step, loss)?;
        let norm = grads
            .iter()
            .map(|(ga, gb)| sq_norm(ga.as_slice()) + sq_norm(gb.as_slice()))
            .sum::<f64>()
            .sqrt();
        opt.tick();
        for (k, ((_, a), (ga, gb))) in set.adapters.iter_mut().zip(&grads).enumerate() {
            opt.update(2 * k, a.a.as_mut_slice(), ga.as_slice(), |_| true);
            opt.update(2 * k + 1, a.b.as_mut_slice(), gb.as_slice(), |_| true);
        }
        log.records.push(StepRecord {
            step,
            loss,
            grad_norm_masked: norm,
            grad_norm_total: norm,
        });
    }
    Ok((set, log))
}
