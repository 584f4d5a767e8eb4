use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::InterMulti;
use crate::data::{FeatureDataset, UtteranceSample};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `grads` is in parameter order.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Mean loss over a dataset, computed in batches of the configured size.
pub fn evaluate_loss(model: &InterMulti, data: &FeatureDataset) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.samples().chunks(model.config().batch_size) {
        let batch: Vec<&UtteranceSample> = chunk.iter().collect();
        let labels: Vec<_> = chunk.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let out = model.forward(&mut g, &p, &batch)?;
        let loss = model.loss(&mut g, out.predictions, &labels)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

pub fn train(model: &mut InterMulti, train: &FeatureDataset, val: &FeatureDataset) -> Result<TrainOutcome> {
    train_with(model, train, val, |_| {})
}

/// Adam with early stopping on validation loss. `on_epoch` sees each
/// record as soon as it is complete. On return the model holds the
/// parameters of the best epoch.
pub fn train_with(
    model: &mut InterMulti,
    train: &FeatureDataset,
    val: &FeatureDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = model.config().clone();
    for d in [train, val] {
        if d.is_empty() {
            return Err(Error::data(format!("{} split is empty", d.split())));
        }
        d.check_task(cfg.task)?;
        if d.dims() != cfg.input_dims {
            return Err(Error::shape("train", &cfg.input_dims, &d.dims()));
        }
    }
    if train.split() == val.split() {
        return Err(Error::Config(format!(
            "training and validation data are both tagged `{}`",
            train.split()
        )));
    }

    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.params().clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&UtteranceSample> = idx.iter().map(|&i| &train.samples()[i]).collect();
            let (loss, mut grads) = batch_gradients(model, &batch, false)
                .map_err(|e| diverged(e, epoch, b))?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                let op = match batch_gradients(model, &batch, true) {
                    Err(Error::NonFinite { op, .. }) => op.to_string(),
                    Err(e) => return Err(e),
                    Ok(_) => "backward".to_string(),
                };
                return Err(Error::Divergence { epoch, batch: b, op });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.update(model.params_mut(), &grads);
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                op: "validation loss".into(),
            });
        }
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_epoch = epoch;
            since_best = 0;
            best.copy_from(model.params())?;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            improved,
        };
        on_epoch(&record);
        epochs.push(record);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.params_mut().copy_from(&best)?;
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op, .. } => Error::Divergence {
            epoch,
            batch,
            op: op.to_string(),
        },
        other => other,
    }
}

/// Loss and per-parameter gradients for one batch.
pub(crate) fn batch_gradients(model: &InterMulti, batch: &[&UtteranceSample], checked: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let labels: Vec<_> = batch.iter().map(|s| s.label).collect();
    let mut g = Graph::new().with_finite_checks(checked);
    let p = model.params().bind(&mut g);
    let out = model.forward(&mut g, &p, batch)?;
    let loss = model.loss(&mut g, out.predictions, &labels)?;
    g.backward(loss)?;
    let grads = p.vars().iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((g.value(loss).item()?, grads))
}
