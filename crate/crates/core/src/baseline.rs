//! End-to-end binary baseline: the projection head followed by a two-class
//! softmax layer, trained with cross-entropy on game-agnostic labels.

use rand::seq::SliceRandom;

use crate::data::{CheckpointMeta, HeadParams, LabeledDataset, ProjectionCheckpoint, Split};
use crate::error::{Error, Result};
use crate::projection::{ProjectionGrads, ProjectionModel};
use crate::seed;
use crate::trainer::{lr_at, EpochLog, TrainConfig, TrainLog};
use crate::vecops::{dot, log_sum_exp};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub projection: ProjectionModel,
    /// 2 x d, row-major.
    pub head_weights: Vec<f64>,
    pub head_bias: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineGrads {
    pub projection: ProjectionGrads,
    pub head_weights: Vec<f64>,
    pub head_bias: [f64; 2],
}

impl BaselineModel {
    /// Projection initialised as for the few-shot heads; the classifier head starts at zero.
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            projection: ProjectionModel::init(dim, seed)?,
            head_weights: vec![0.0; 2 * dim],
            head_bias: [0.0; 2],
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.dim()
    }

    pub fn logits(&self, r: &[f64]) -> [f64; 2] {
        let d = self.dim();
        [
            dot(&self.head_weights[..d], r) + self.head_bias[0],
            dot(&self.head_weights[d..], r) + self.head_bias[1],
        ]
    }

    /// Argmax class; equal logits predict class 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let l = self.logits(&self.projection.project(x));
        (l[1] > l[0]) as u8
    }

    pub fn sgd_step(&mut self, grads: &BaselineGrads, lr: f64) {
        self.projection.sgd_step(&grads.projection, lr);
        for (w, g) in self.head_weights.iter_mut().zip(&grads.head_weights) {
            *w -= lr * g;
        }
        for (b, g) in self.head_bias.iter_mut().zip(&grads.head_bias) {
            *b -= lr * g;
        }
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: String) -> ProjectionCheckpoint {
        self.projection.to_checkpoint(CheckpointMeta {
            seed,
            method: "baseline".into(),
            config_hash,
            head: Some(HeadParams {
                weights: self.head_weights.iter().map(|&v| v as f32).collect(),
                bias: self.head_bias.iter().map(|&v| v as f32).collect(),
            }),
        })
    }

    pub fn from_checkpoint(ckpt: &ProjectionCheckpoint) -> Result<Self> {
        let head = ckpt
            .metadata
            .head
            .as_ref()
            .ok_or_else(|| Error::Validation("checkpoint carries no classifier head".into()))?;
        let projection = ProjectionModel::from_checkpoint(ckpt)?;
        Ok(Self {
            projection,
            head_weights: head.weights.iter().map(|&v| v as f64).collect(),
            head_bias: [head.bias[0] as f64, head.bias[1] as f64],
        })
    }
}

/// Mean cross-entropy of `softmax(V r + c)` over the batch, with gradients
/// for the head and the projection.
pub fn ce_loss(model: &BaselineModel, batch: &[(&[f64], u8)]) -> Result<(f64, BaselineGrads)> {
    if batch.is_empty() {
        return Err(Error::Contract("cross-entropy over an empty batch".into()));
    }
    let d = model.dim();
    let n = batch.len() as f64;
    let mut grads = BaselineGrads {
        projection: ProjectionGrads::zeros(d),
        head_weights: vec![0.0; 2 * d],
        head_bias: [0.0; 2],
    };
    let mut loss = 0.0;
    for &(x, y) in batch {
        if y > 1 {
            return Err(Error::Contract(format!("binary label {y} out of range")));
        }
        let cache = model.projection.forward(x);
        let r = cache.output();
        let logits = model.logits(r);
        let lse = log_sum_exp(&logits);
        loss += (lse - logits[y as usize]) / n;
        let mut d_r = vec![0.0; d];
        for k in 0..2 {
            let dl = ((logits[k] - lse).exp() - (k == y as usize) as u8 as f64) / n;
            grads.head_bias[k] += dl;
            let row = &model.head_weights[k * d..(k + 1) * d];
            for j in 0..d {
                grads.head_weights[k * d + j] += dl * r[j];
                d_r[j] += dl * row[j];
            }
        }
        model.projection.backward_into(&cache, &d_r, &mut grads.projection)?;
    }
    Ok((loss, grads))
}

/// Plain binary accuracy over every sample of `split`.
pub fn eval_binary(model: &BaselineModel, dataset: &LabeledDataset, split: Split) -> Result<f64> {
    let idx = dataset.indices_in(split);
    if idx.is_empty() {
        return Err(Error::Validation(format!("split {split} has no samples")));
    }
    let correct = idx
        .iter()
        .filter(|&&i| {
            let s = &dataset.samples()[i];
            model.predict(&s.vector) == s.y_binary
        })
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Mini-batch SGD over train-split samples with the shared learning-rate
/// schedule; early stopping on validation binary accuracy.
pub fn train_baseline(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(BaselineModel, TrainLog)> {
    config.validate()?;
    let train = dataset.indices_in(Split::Train);
    if train.is_empty() {
        return Err(Error::Validation("train split has no samples".into()));
    }
    if dataset.indices_in(Split::Valid).is_empty() {
        return Err(Error::Validation("valid split has no samples".into()));
    }
    let mut model = BaselineModel::init(dataset.dim(), seed::derive(config.seed, &[seed::tag("init")]))?;
    let mut best = model.clone();
    let mut log = TrainLog::default();
    let mut best_acc = f64::NEG_INFINITY;
    let mut order = train.clone();
    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        let mut rng = seed::rng(config.seed, &[seed::tag("baseline-shuffle"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], u8)> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset.samples()[i];
                    (s.vector.as_slice(), s.y_binary)
                })
                .collect();
            let (loss, grads) = ce_loss(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at epoch {epoch}, batch {batches}")));
            }
            model.sgd_step(&grads, lr);
            loss_sum += loss;
            batches += 1;
            log.steps += 1;
        }
        let val = eval_binary(&model, dataset, Split::Valid)?;
        log.epochs.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, val_accuracy: val, lr });
        if val > best_acc {
            best_acc = val;
            best = model.clone();
            log.best_epoch = epoch;
            log.best_val_accuracy = val;
        } else if epoch - log.best_epoch >= config.patience_epochs {
            break;
        }
    }
    Ok((best, log))
}
