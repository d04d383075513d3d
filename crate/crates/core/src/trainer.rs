//! Optimization loops: contrastive pretraining on unlabeled patches and
//! supervised fine-tuning on full images, both with SGD plus momentum.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::model::{self, Gradients, Mode, ModelError, ModelSpec, ModelState};
use crate::sampler::{self, SampleError};
use crate::sc_loss::{self, FeatureBatch, ScLossError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("{phase} diverged at step {step}: loss is {loss}")]
    Diverged { phase: Phase, step: u64, loss: f64 },
    #[error("label {label} of example {index} is outside the model's {num_classes} classes")]
    LabelRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Loss(#[from] ScLossError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

/// Step decay: `initial * decay^(epoch / every)`, epochs counted from 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay: 1.0,
            every: usize::MAX,
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.every).unwrap_or(0);
        self.initial * self.decay.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Contrastive patch side; `None` picks half the shorter image side.
    pub patch_size: Option<usize>,
    /// Overrides the spec's tap weights, one per tap.
    pub tap_weights: Option<Vec<f64>>,
    /// Pretraining steps per epoch; `None` means `len / batch_size`.
    pub steps_per_epoch: Option<usize>,
    /// Sampler threads; 1 keeps runs bit-reproducible.
    pub workers: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            batch_size: 32,
            lr: LrSchedule {
                initial: 0.01,
                decay: 0.5,
                every: 10,
            },
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            seed: 0,
            patch_size: None,
            tap_weights: None,
            steps_per_epoch: None,
            workers: 1,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self, expected: Phase) -> Result<()> {
        if self.phase != expected {
            return Err(TrainError::Config(format!(
                "config is for {}, called {expected}",
                self.phase
            )));
        }
        let min_batch = if expected == Phase::Pretrain { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(TrainError::Config(format!(
                "{expected} needs batch size >= {min_batch}, got {}",
                self.batch_size
            )));
        }
        if !(self.lr.initial >= 0.0 && self.lr.initial.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} is invalid",
                self.lr.initial
            )));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate decay {} is invalid",
                self.lr.decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum {} is outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight decay {} is invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub lr: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    pub state: ModelState<T>,
    pub dataset_size: usize,
    pub steps: u64,
    pub wall_clock_secs: f64,
    /// Accuracy on the evaluation set, when one was supplied.
    pub eval_accuracy: Option<f64>,
}

impl<T> TrainReport<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// SGD with classical momentum: `v = mu * v + g + wd * p; p -= lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        state: &mut ModelState<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) {
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        let lr = T::of(lr);
        for (name, param) in state.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, &gi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let mut d = gi;
                if wd != T::zero() {
                    d += wd * *p;
                }
                *vi = mu * *vi + d;
                *p -= lr * *vi;
            }
        }
        state.step_count += 1;
    }
}

fn add_grads<T: Scalar>(into: &mut BTreeMap<String, Tensor<T>>, from: Gradients<T>) {
    for (name, g) in from.params {
        match into.get_mut(&name) {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Loss and parameter gradients of one contrastive step.
pub fn sc_step_gradients<T: Scalar>(
    spec: &ModelSpec,
    state: &ModelState<T>,
    anchors: &Tensor<T>,
    positives: &Tensor<T>,
    weights: &[f64],
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let fa = model::forward(spec, state, anchors, Mode::Features)?;
    let fp = model::forward(spec, state, positives, Mode::Features)?;
    let batches = fa
        .outputs
        .iter()
        .zip(&fp.outputs)
        .map(|(a, p)| FeatureBatch::new(a.clone(), p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = sc_loss::sc_multi_tap_loss(&batches, weights)?;
    let ga: Vec<_> = loss.taps.iter().map(|t| t.grad_f1.clone()).collect();
    let gp: Vec<_> = loss.taps.iter().map(|t| t.grad_f2.clone()).collect();
    let mut grads = BTreeMap::new();
    add_grads(&mut grads, model::backward(spec, state, &fa, &ga)?);
    add_grads(&mut grads, model::backward(spec, state, &fp, &gp)?);
    Ok((loss.loss, grads))
}

fn tap_weights(spec: &ModelSpec, config: &TrainConfig) -> Result<Vec<f64>> {
    match &config.tap_weights {
        Some(w) if w.len() != spec.taps.len() => Err(TrainError::Config(format!(
            "{} tap weights given for {} taps",
            w.len(),
            spec.taps.len()
        ))),
        Some(w) => Ok(w.clone()),
        None => Ok(spec.taps.iter().map(|t| t.weight).collect()),
    }
}

pub fn pretrain<T: Scalar>(
    spec: &ModelSpec,
    init: &ModelState<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    pretrain_with(spec, init, dataset, config, |_| {})
}

/// Contrastive pretraining; `on_epoch` sees each log record as it is made.
pub fn pretrain_with<T: Scalar>(
    spec: &ModelSpec,
    init: &ModelState<T>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport<T>> {
    config.validate(Phase::Pretrain)?;
    init.check_against(spec)?;
    let weights = tap_weights(spec, config)?;
    let (_, h, w) = dataset
        .image_shape()
        .ok_or_else(|| TrainError::Config("pretraining dataset is empty".into()))?;
    let patch = config
        .patch_size
        .unwrap_or_else(|| sampler::default_patch_size(h, w));
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or(dataset.len() / config.batch_size)
        .max(1);

    let started = Instant::now();
    let mut state = init.clone();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut epochs = Vec::with_capacity(config.epochs);

    sampler::with_batch_stream::<T, _, _>(
        dataset,
        config.batch_size,
        patch,
        config.seed,
        config.workers,
        |stream| {
            for epoch in 0..config.epochs {
                let lr = config.lr.at_epoch(epoch);
                let mut total = 0.0;
                for _ in 0..steps_per_epoch {
                    let batch = stream.next_batch()?;
                    let (loss, grads) =
                        sc_step_gradients(spec, &state, &batch.anchors, &batch.positives, &weights)
                            .map_err(|e| diverged_or(e, Phase::Pretrain, state.step_count))?;
                    let loss = loss.as_f64();
                    if !loss.is_finite() {
                        return Err(TrainError::Diverged {
                            phase: Phase::Pretrain,
                            step: state.step_count,
                            loss,
                        });
                    }
                    total += loss;
                    sgd.step(&mut state, &grads, lr);
                    check_params(&state, Phase::Pretrain)?;
                }
                let rec = EpochRecord {
                    epoch: epoch + 1,
                    phase: Phase::Pretrain,
                    loss: total / steps_per_epoch as f64,
                    accuracy: None,
                    lr,
                };
                on_epoch(&rec);
                epochs.push(rec);
            }
            Ok(())
        },
    )?;

    Ok(TrainReport {
        phase: Phase::Pretrain,
        epochs,
        state,
        dataset_size: dataset.len(),
        steps: steps_per_epoch as u64 * config.epochs as u64,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        eval_accuracy: None,
    })
}

/// Non-finite values surfacing inside the network become divergence errors.
fn diverged_or(e: TrainError, phase: Phase, step: u64) -> TrainError {
    let non_finite = matches!(
        &e,
        TrainError::Model(ModelError::Tensor(
            crate::tensor::TensorError::NonFinite { .. }
        )) | TrainError::Loss(ScLossError::NonFinite)
            | TrainError::Loss(ScLossError::Tensor(
                crate::tensor::TensorError::NonFinite { .. }
            ))
    );
    if non_finite {
        TrainError::Diverged {
            phase,
            step,
            loss: f64::NAN,
        }
    } else {
        e
    }
}

fn check_params<T: Scalar>(state: &ModelState<T>, phase: Phase) -> Result<()> {
    if state
        .params
        .values()
        .all(|t| t.data().iter().all(|v| v.is_finite()))
    {
        Ok(())
    } else {
        Err(TrainError::Diverged {
            phase,
            step: state.step_count,
            loss: f64::NAN,
        })
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits
        .dims2("cross_entropy_loss")
        .map_err(ModelError::from)?;
    if labels.len() != n {
        return Err(TrainError::Config(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (i, (row, &label)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        if label >= k {
            return Err(TrainError::LabelRange {
                index: i,
                label,
                num_classes: k,
            });
        }
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_n);
        }
    }
    let grad = Tensor::new(vec![n, k], grad).map_err(ModelError::from)?;
    Ok((total * inv_n, grad))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn stack_images<T: Scalar>(dataset: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = indices.iter().map(|&i| dataset.image(i).cast()).collect();
    Ok(Tensor::stack(&items).map_err(ModelError::from)?)
}

fn labels_for(dataset: &Dataset, spec: &ModelSpec) -> Result<Vec<usize>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| TrainError::Config(format!("dataset `{}` has no labels", dataset.name)))?;
    let num_classes = spec.num_classes()?;
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(TrainError::LabelRange {
            index,
            label,
            num_classes,
        });
    }
    Ok(labels.to_vec())
}

const EVAL_CHUNK: usize = 128;

/// Top-1 accuracy over `dataset`.
pub fn eval<T: Scalar>(spec: &ModelSpec, state: &ModelState<T>, dataset: &Dataset) -> Result<f64> {
    let labels = labels_for(dataset, spec)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("evaluation dataset is empty".into()));
    }
    let mut correct = 0usize;
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(EVAL_CHUNK) {
        let x = stack_images::<T>(dataset, chunk)?;
        let fwd = model::infer(spec, state, &x, Mode::Logits)?;
        let logits = fwd.output();
        let k = logits.shape()[1];
        for (row, &i) in logits.data().chunks_exact(k).zip(chunk) {
            if argmax(row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Zeroes the weight and bias of the final (classifier) layer, the usual
/// starting point for a new head on top of pretrained features.
pub fn reset_head<T: Scalar>(spec: &ModelSpec, state: &mut ModelState<T>) -> Result<()> {
    spec.num_classes()?;
    let last = spec.layers.len() - 1;
    for name in [model::weight_name(last), model::bias_name(last)] {
        let p = state
            .params
            .get_mut(&name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        p.data_mut().fill(T::zero());
    }
    Ok(())
}

pub fn finetune<T: Scalar>(
    spec: &ModelSpec,
    pretrained: &ModelState<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    finetune_with(spec, pretrained, train, test, config, |_| {})
}

/// Supervised training of every layer from `pretrained`. Each epoch record
/// carries the running training accuracy; the report carries test accuracy
/// when `test` is given.
pub fn finetune_with<T: Scalar>(
    spec: &ModelSpec,
    pretrained: &ModelState<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport<T>> {
    config.validate(Phase::Finetune)?;
    pretrained.check_against(spec)?;
    let labels = labels_for(train, spec)?;
    if let Some(test) = test {
        labels_for(test, spec)?;
    }
    if train.is_empty() {
        return Err(TrainError::Config("fine-tuning dataset is empty".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = pretrained.clone();
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = 0u64;

    for epoch in 0..config.epochs {
        let lr = config.lr.at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = stack_images::<T>(train, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let fwd = model::forward(spec, &state, &x, Mode::Logits)
                .map_err(|e| diverged_or(e.into(), Phase::Finetune, state.step_count))?;
            let logits = fwd.output();
            let (loss, grad) = cross_entropy_loss(logits, &y)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    phase: Phase::Finetune,
                    step: state.step_count,
                    loss,
                });
            }
            let k = logits.shape()[1];
            correct += logits
                .data()
                .chunks_exact(k)
                .zip(&y)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let grads = model::backward(spec, &state, &fwd, &[grad])
                .map_err(|e| diverged_or(e.into(), Phase::Finetune, state.step_count))?;
            sgd.step(&mut state, &grads.params, lr);
            check_params(&state, Phase::Finetune)?;
            total += loss;
            batches += 1;
            steps += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase: Phase::Finetune,
            loss: total / batches as f64,
            accuracy: Some(correct as f64 / train.len() as f64),
            lr,
        };
        on_epoch(&rec);
        epochs.push(rec);
    }

    let eval_accuracy = test.map(|t| eval(spec, &state, t)).transpose()?;
    Ok(TrainReport {
        phase: Phase::Finetune,
        epochs,
        state,
        dataset_size: train.len(),
        steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        eval_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![3, 5]).unwrap();
        let (loss, grad) = cross_entropy_loss(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        // row 0: (0.2 - 1) / 3 at the label
        assert!((grad.data()[0] - (0.2 - 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_approaches_zero_loss() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[1]).unwrap();
        assert!(loss < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(vec![1, 3]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(TrainError::LabelRange { label: 3, .. })
        ));
    }

    #[test]
    fn schedule_decays_in_steps() {
        let s = LrSchedule {
            initial: 0.1,
            decay: 0.5,
            every: 2,
        };
        assert_eq!(s.at_epoch(0), 0.1);
        assert_eq!(s.at_epoch(1), 0.1);
        assert_eq!(s.at_epoch(2), 0.05);
        assert_eq!(s.at_epoch(5), 0.025);
        assert_eq!(LrSchedule::constant(0.3).at_epoch(1000), 0.3);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::pretrain();
        c.batch_size = 1;
        assert!(c.validate(Phase::Pretrain).is_err());
        let mut c = TrainConfig::pretrain();
        c.momentum = 1.0;
        assert!(c.validate(Phase::Pretrain).is_err());
        assert!(TrainConfig::finetune().validate(Phase::Pretrain).is_err());
        let mut c = TrainConfig::finetune();
        c.batch_size = 1;
        assert!(c.validate(Phase::Finetune).is_ok());
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut state = ModelState {
            params: BTreeMap::from([(
                "w".to_string(),
                Tensor::<f64>::new(vec![2], vec![1.0, -2.0]).unwrap(),
            )]),
            step_count: 0,
        };
        let grads = BTreeMap::from([(
            "w".to_string(),
            Tensor::new(vec![2], vec![0.5, 0.25]).unwrap(),
        )]);
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.step(&mut state, &grads, 0.1);
        sgd.step(&mut state, &grads, 0.1);
        assert_eq!(
            state.params["w"].data(),
            &[1.0 - 0.05 - 0.05, -2.0 - 0.025 - 0.025]
        );
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut state = ModelState {
            params: BTreeMap::from([(
                "w".to_string(),
                Tensor::<f64>::new(vec![1], vec![0.0]).unwrap(),
            )]),
            step_count: 0,
        };
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())]);
        let mut sgd = Sgd::new(0.5, 0.0);
        sgd.step(&mut state, &grads, 1.0);
        sgd.step(&mut state, &grads, 1.0);
        // v1 = 1, v2 = 1.5
        assert_eq!(state.params["w"].data(), &[-2.5]);
    }
}
