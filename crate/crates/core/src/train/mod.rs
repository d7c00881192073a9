//! Adam training with deterministic batch order, per-epoch evaluation and
//! resumable checkpoints.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CURVE_FILE, MODEL_FILE, STATE_FILE};

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::mpsc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::features::Task;
use crate::map::Map2;
use crate::metrics::{evaluate_maps, MetricError, MetricsReport};
use crate::model::{Mode, Model, ModelError};
use crate::params::ParamError;
use crate::tensor::{Graph, Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations_per_epoch: u64,
    pub epochs: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate, record a curve row and checkpoint every this many epochs.
    pub eval_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many total steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Bound of the batch prefetch queue.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations_per_epoch: 1000,
            epochs: 200,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 1,
            checkpoint_dir: None,
            max_steps: None,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        let full = self.epochs * self.iterations_per_epoch;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn validate(&self, dataset_len: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.iterations_per_epoch == 0 || self.epochs == 0 || self.eval_every == 0 || self.prefetch == 0 {
            return bad("batch_size, iterations_per_epoch, epochs, eval_every and prefetch must be positive");
        }
        if dataset_len == 0 {
            return bad("dataset is empty");
        }
        if self.batch_size > dataset_len {
            return bad("batch_size exceeds dataset size");
        }
        if !(self.learning_rate >= 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("optimizer hyperparameters out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub avg_nrmse: f64,
    pub avg_ssim: f64,
    pub auc: Option<f64>,
}

pub const CURVE_HEADER: &str = "epoch,loss,avg_nrmse,avg_ssim,auc";

pub fn curve_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in history {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.loss, r.avg_nrmse, r.avg_ssim, auc);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    /// Sum of step losses within the current, unfinished epoch.
    pub epoch_loss_sum: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let optimizer = Adam::new(&model.params, config.learning_rate, config.beta1, config.beta2, config.eps);
        TrainState { model, optimizer, step: 0, epoch: 0, seed: config.seed, epoch_loss_sum: 0.0, history: Vec::new() }
    }
}

/// Dataset indices of the batch used at `step`: consecutive slices of a
/// stream of per-pass permutations, each seeded by `(seed, pass)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let start = step as u128 * batch_size as u128;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u128, Vec<usize>)> = None;
    for pos in start..start + batch_size as u128 {
        let pass = pos / n as u128;
        let offset = (pos % n as u128) as usize;
        if cached.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (pass as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            rng.set_stream(pass as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((pass, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[offset]);
    }
    out
}

struct Batch {
    x: Tensor4<f32>,
    y: Tensor4<f32>,
}

fn check_sample_shape(model: &Model, s: &crate::dataset::Sample) -> Result<(), TrainError> {
    model.check_input([1, s.channels, s.height, s.width])?;
    Ok(())
}

fn assemble(ds: &dyn Dataset, idx: &[usize]) -> Result<Batch, DatasetError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    for &i in idx {
        let s = ds.sample(i)?;
        let d = (s.channels, s.height, s.width);
        if dims.is_some_and(|p| p != d) {
            return Err(DatasetError::ShapeMismatch(format!("sample {} has shape {d:?}, batch has {:?}", s.id, dims.unwrap())));
        }
        dims = Some(d);
        xs.extend_from_slice(&s.features);
        ys.extend_from_slice(&s.label);
    }
    let (c, h, w) = dims.expect("nonempty batch");
    let n = idx.len();
    Ok(Batch { x: Tensor4 { dims: [n, c, h, w], data: xs }, y: Tensor4 { dims: [n, 1, h, w], data: ys } })
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(state: &mut TrainState, batch: &Batch) -> Result<f64, TrainError> {
    let step = state.step;
    let non_finite = |what: &str| TrainError::NonFinite { step, what: what.to_string() };
    let mut g = Graph::<f32>::new();
    let vars = state.model.bind(&mut g, true);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let map_tensor = |e: ModelError| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => non_finite(&format!("activation in {op}")),
        other => TrainError::Model(other),
    };
    let tr = state.model.forward(&mut g, x, &vars, Mode::Train).map_err(map_tensor)?;
    let loss = g.mse_loss(tr.output, y).map_err(|e| map_tensor(e.into()))?;
    let loss_value = g.value(loss).data[0] as f64;
    g.backward(loss).map_err(|e| match e {
        TensorError::NonFinite { .. } => non_finite("gradient"),
        other => TrainError::Model(other.into()),
    })?;
    let grads: IndexMap<String, Vec<f32>> =
        vars.iter().filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec()))).collect();
    drop(g);
    state.optimizer.step(&mut state.model.params, &grads);
    state.model.update_running_stats(&tr.batch_stats)?;
    if state.model.params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
        return Err(non_finite("parameter"));
    }
    state.step += 1;
    Ok(loss_value)
}

/// Eval-mode metrics over a whole dataset; DRC adds a pooled ROC.
pub fn evaluate(model: &Model, dataset: &dyn Dataset) -> Result<MetricsReport, TrainError> {
    let mut pairs = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let s = dataset.sample(i)?;
        check_sample_shape(model, &s)?;
        let x = Tensor4 { dims: [1, s.channels, s.height, s.width], data: s.features.clone() };
        let pred = model.predict(&x)?;
        let pred = Map2::from_vec(s.height, s.width, pred.data.iter().map(|&v| v as f64).collect());
        pairs.push((s.id.clone(), s.label_map(), pred));
    }
    Ok(evaluate_maps(&pairs, dataset.task() == Task::Drc)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Loss of every step run by this call, in order.
    pub step_losses: Vec<f64>,
}

/// Runs optimizer steps from `state.step` up to the configured total. At
/// every `eval_every`-th epoch boundary the model is evaluated on `eval`
/// (or the training set), a curve row is appended and, with a checkpoint
/// directory, a checkpoint plus `curve.csv` is written.
pub fn train(
    state: &mut TrainState,
    dataset: &dyn Dataset,
    eval: Option<&dyn Dataset>,
    config: &TrainConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainOutcome, TrainError> {
    config.validate(dataset.len())?;
    if dataset.task() != state.model.config().task {
        return Err(TrainError::Config(format!("dataset task {} vs model task {}", dataset.task(), state.model.config().task)));
    }
    check_sample_shape(&state.model, &dataset.sample(0)?)?;
    let total = config.total_steps();
    let start = state.step;
    let n = dataset.len();
    let mut losses = Vec::new();
    if start >= total {
        return Ok(TrainOutcome { step_losses: losses });
    }
    let seed = state.seed;
    std::thread::scope(|scope| -> Result<(), TrainError> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch, DatasetError>>(config.prefetch);
        let producer = scope.spawn(move || {
            for step in start..total {
                let idx = batch_indices(seed, step, config.batch_size, n);
                if tx.send(assemble(dataset, &idx)).is_err() {
                    break;
                }
            }
        });
        let result = (|| {
            for _ in start..total {
                let batch = rx.recv().map_err(|_| TrainError::Config("batch producer stopped".into()))??;
                let loss = train_step(state, &batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { step: state.step - 1, what: "loss".into() });
                }
                losses.push(loss);
                on_step(state.step, loss);
                state.epoch_loss_sum += loss;
                if state.step % config.iterations_per_epoch == 0 {
                    state.epoch += 1;
                    let mean = state.epoch_loss_sum / config.iterations_per_epoch as f64;
                    state.epoch_loss_sum = 0.0;
                    if state.epoch % config.eval_every == 0 {
                        let report = evaluate(&state.model, eval.unwrap_or(dataset))?;
                        state.history.push(EpochRecord {
                            epoch: state.epoch,
                            loss: mean,
                            avg_nrmse: report.avg_nrmse,
                            avg_ssim: report.avg_ssim,
                            auc: report.auc(),
                        });
                        if let Some(dir) = &config.checkpoint_dir {
                            save_checkpoint(state, dir)?;
                        }
                    }
                }
            }
            Ok(())
        })();
        drop(rx);
        producer.join().expect("batch producer panicked");
        result
    })?;
    Ok(TrainOutcome { step_losses: losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_stream_covers_each_pass() {
        let n = 7;
        let mut seen: Vec<usize> = (0..7).flat_map(|s| batch_indices(3, s, 2, n)).collect();
        seen.truncate(14);
        let mut first: Vec<usize> = seen[..7].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 5, 2, n), batch_indices(3, 5, 2, n));
        assert_ne!(batch_indices(3, 0, 7, n), batch_indices(4, 0, 7, n));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert!(c.validate(16).is_ok());
        assert!(c.validate(8).is_err());
        let c = TrainConfig { eval_every: 0, ..TrainConfig::default() };
        assert!(c.validate(100).is_err());
        assert_eq!(TrainConfig { max_steps: Some(5), ..TrainConfig::default() }.total_steps(), 5);
    }

    #[test]
    fn curve_format() {
        let h = vec![
            EpochRecord { epoch: 1, loss: 0.5, avg_nrmse: 0.1, avg_ssim: 0.9, auc: None },
            EpochRecord { epoch: 2, loss: 0.25, avg_nrmse: 0.05, avg_ssim: 0.95, auc: Some(0.75) },
        ];
        assert_eq!(curve_csv(&h), "epoch,loss,avg_nrmse,avg_ssim,auc\n1,0.5,0.1,0.9,\n2,0.25,0.05,0.95,0.75\n");
    }
}
