//! Episodic training of the projection head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CheckpointMeta, LabeledDataset, ProjectionCheckpoint, Split};
use crate::error::{Error, Result};
use crate::losses::{self, EpisodeBatch, LossConfig, LossOutput};
use crate::projection::{ForwardCache, ProjectionGrads, ProjectionModel};
use crate::sampler::{Episode, EpisodeSampler, EpisodeSpec};
use crate::seed;

/// Lower and upper bound (exclusive) of the accepted initial learning rate.
pub const LR_RANGE: (f64, f64) = (1e-3, 1e-2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pn,
    Mn,
    Sc,
    Baseline,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pn, Method::Mn, Method::Sc, Method::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pn => "pn",
            Method::Mn => "mn",
            Method::Sc => "sc",
            Method::Baseline => "baseline",
        }
    }

    pub fn is_episodic(self) -> bool {
        self != Method::Baseline
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn" => Ok(Method::Pn),
            "mn" => Ok(Method::Mn),
            "sc" => Ok(Method::Sc),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Validation(format!("unknown method {other:?}; expected pn|mn|sc|baseline"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub lr0: f64,
    pub episodes_per_epoch: usize,
    pub lr_halve_every_epochs: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub val_episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub loss: LossConfig,
    /// Mini-batch size of the binary baseline.
    pub batch_size: usize,
    pub seed: u64,
    /// Accept `lr0` outside [`LR_RANGE`].
    pub allow_any_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Pn,
            lr0: 5e-3,
            episodes_per_epoch: 20,
            lr_halve_every_epochs: 5,
            patience_epochs: 10,
            max_epochs: 200,
            val_episodes_per_epoch: 20,
            n_way: 5,
            k_shot: 5,
            q_query: 5,
            loss: LossConfig::default(),
            batch_size: 32,
            seed: 0,
            allow_any_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn fsl(method: Method, n_way: usize, k_shot: usize, seed: u64) -> Self {
        Self { method, n_way, k_shot, seed, ..Self::default() }
    }

    pub fn baseline(seed: u64) -> Self {
        Self { method: Method::Baseline, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::Validation(format!("lr {} must be positive", self.lr0)));
        }
        if !self.allow_any_lr && !(self.lr0 > LR_RANGE.0 && self.lr0 < LR_RANGE.1) {
            return Err(Error::Validation(format!(
                "lr {} outside (1e-3,1e-2); pass --allow-lr to override",
                self.lr0
            )));
        }
        if self.patience_epochs == 0
            || self.max_epochs == 0
            || self.lr_halve_every_epochs == 0
            || self.episodes_per_epoch == 0
            || self.val_episodes_per_epoch == 0
            || self.batch_size == 0
        {
            return Err(Error::Validation(
                "patience, max epochs, halving period, episode counts and batch size must be positive".into(),
            ));
        }
        self.loss.validate()?;
        if self.method.is_episodic() {
            self.spec(Split::Train, 0).validate()?;
        }
        Ok(())
    }

    pub fn spec(&self, split: Split, seed: u64) -> EpisodeSpec {
        EpisodeSpec { n_way: self.n_way, k_shot: self.k_shot, q_query: self.q_query, split, seed }
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// `lr0 * 0.5^floor(epoch / halving_period)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * 0.5f64.powi((epoch / config.lr_halve_every_epochs) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Number of SGD updates applied.
    pub steps: usize,
}

/// Projects every support and query sample of an episode.
pub fn project_episode(
    model: &ProjectionModel,
    dataset: &LabeledDataset,
    episode: &Episode,
) -> (EpisodeBatch, Vec<ForwardCache>, Vec<ForwardCache>) {
    let forward = |items: &[crate::sampler::EpisodeItem]| -> Vec<ForwardCache> {
        items.iter().map(|it| model.forward(&dataset.samples()[it.index].vector)).collect()
    };
    let s_cache = forward(&episode.support);
    let q_cache = forward(&episode.query);
    let batch = EpisodeBatch {
        support: s_cache.iter().map(|c| c.output().to_vec()).collect(),
        support_classes: episode.support.iter().map(|i| i.class).collect(),
        query: q_cache.iter().map(|c| c.output().to_vec()).collect(),
        query_classes: episode.query.iter().map(|i| i.class).collect(),
    };
    (batch, s_cache, q_cache)
}

pub fn episode_loss(method: Method, batch: &EpisodeBatch, config: &LossConfig) -> Result<LossOutput> {
    match method {
        Method::Pn => losses::pn_loss(batch, config),
        Method::Mn => losses::mn_loss(batch),
        Method::Sc => losses::sc_loss(batch, config),
        Method::Baseline => Err(Error::Contract("the baseline has no episodic loss".into())),
    }
}

/// Mean prototype-predictor accuracy of `model` over episodes `0..n` of `sampler`.
pub fn mean_episode_accuracy(
    model: &ProjectionModel,
    dataset: &LabeledDataset,
    sampler: &EpisodeSampler,
    n: usize,
    loss: &LossConfig,
) -> Result<Vec<f64>> {
    (0..n as u64)
        .map(|i| {
            let episode = sampler.sample(i);
            let (batch, _, _) = project_episode(model, dataset, &episode);
            losses::episode_accuracy(&batch, loss)
        })
        .collect()
}

/// Trains a projection head episodically and returns the checkpoint of the
/// epoch with the best validation accuracy (earliest on ties).
pub fn train_fsl(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ProjectionCheckpoint, TrainLog)> {
    let (model, log) = train_fsl_model(dataset, config)?;
    let meta = CheckpointMeta {
        seed: config.seed,
        method: config.method.to_string(),
        config_hash: config.hash(),
        head: None,
    };
    Ok((model.to_checkpoint(meta), log))
}

pub fn train_fsl_model(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(ProjectionModel, TrainLog)> {
    config.validate()?;
    if !config.method.is_episodic() {
        return Err(Error::Validation("train_fsl needs pn, mn or sc; use train_baseline".into()));
    }
    let train = EpisodeSampler::new(
        dataset,
        config.spec(Split::Train, seed::derive(config.seed, &[seed::tag("train-episodes")])),
    )?;
    let valid = EpisodeSampler::new(
        dataset,
        config.spec(Split::Valid, seed::derive(config.seed, &[seed::tag("valid-episodes")])),
    )?;
    let mut model = ProjectionModel::init(dataset.dim(), seed::derive(config.seed, &[seed::tag("init")]))?;
    let mut best = model.clone();
    let mut log = TrainLog { best_val_accuracy: f64::NEG_INFINITY, ..Default::default() };
    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        let mut loss_sum = 0.0;
        for i in 0..config.episodes_per_epoch {
            let index = (epoch * config.episodes_per_epoch + i) as u64;
            let episode = train.sample(index);
            let (batch, s_cache, q_cache) = project_episode(&model, dataset, &episode);
            let out = episode_loss(config.method, &batch, &config.loss)?;
            if !out.loss.is_finite() {
                return Err(Error::Train(format!("non-finite loss at epoch {epoch}, training episode {index}")));
            }
            let mut grads = ProjectionGrads::zeros(model.dim());
            for (cache, g) in s_cache.iter().zip(&out.d_support).chain(q_cache.iter().zip(&out.d_query)) {
                model.backward_into(cache, g, &mut grads)?;
            }
            if !grads.is_finite() {
                return Err(Error::Train(format!("non-finite gradient at epoch {epoch}, training episode {index}")));
            }
            model.sgd_step(&grads, lr);
            log.steps += 1;
            loss_sum += out.loss;
        }
        let val = mean_episode_accuracy(&model, dataset, &valid, config.val_episodes_per_epoch, &config.loss)?;
        let val = val.iter().sum::<f64>() / val.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / config.episodes_per_epoch as f64,
            val_accuracy: val,
            lr,
        });
        if val > log.best_val_accuracy {
            log.best_val_accuracy = val;
            log.best_epoch = epoch;
            best = model.clone();
        } else if epoch - log.best_epoch >= config.patience_epochs {
            break;
        }
    }
    Ok((best, log))
}
