//! Seeded N-way K-shot episode sampling.
//!
//! Episode `i` of a spec draws from `ChaCha8Rng` seeded with
//! `derive(seed, [tag(split), i])`: first `n_way` eligible classes without
//! replacement, then for each drawn class `k_shot + q_query` of its samples
//! without replacement, the first `k_shot` forming the support set.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub split: Split,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_query < 1 {
            return Err(Error::Validation(format!(
                "episode spec needs n_way >= 2, k_shot >= 1, q_query >= 1 (got {}/{}/{})",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }
}

/// A sample drawn into an episode: its position in the dataset and its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    pub index: usize,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

/// Classes of `split` with at least `k_shot + q_query` samples, ascending.
pub fn eligible_classes(dataset: &LabeledDataset, split: Split, k_shot: usize, q_query: usize) -> Vec<u32> {
    dataset
        .classes_in(split)
        .into_iter()
        .filter(|(_, members)| members.len() >= k_shot + q_query)
        .map(|(c, _)| c)
        .collect()
}

/// Precomputed class index for repeated sampling from one split.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    spec: EpisodeSpec,
    classes: Vec<u32>,
    members: BTreeMap<u32, Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(dataset: &LabeledDataset, spec: EpisodeSpec) -> Result<Self> {
        spec.validate()?;
        let need = spec.k_shot + spec.q_query;
        let members: BTreeMap<u32, Vec<usize>> = dataset
            .classes_in(spec.split)
            .into_iter()
            .filter(|(_, m)| m.len() >= need)
            .collect();
        if members.len() < spec.n_way {
            return Err(Error::Sampler(format!(
                "{}-way {}-shot with {} queries needs {} classes with >= {need} samples in the {} split, found {}",
                spec.n_way,
                spec.k_shot,
                spec.q_query,
                spec.n_way,
                spec.split,
                members.len()
            )));
        }
        let classes = members.keys().copied().collect();
        Ok(Self { spec, classes, members })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn sample(&self, episode_index: u64) -> Episode {
        let spec = &self.spec;
        let mut rng = seed::rng(spec.seed, &[seed::tag(spec.split.as_str()), episode_index]);
        let drawn: Vec<u32> = index::sample(&mut rng, self.classes.len(), spec.n_way)
            .into_iter()
            .map(|i| self.classes[i])
            .collect();
        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query = Vec::with_capacity(spec.n_way * spec.q_query);
        for &class in &drawn {
            let pool = &self.members[&class];
            let picks = index::sample(&mut rng, pool.len(), spec.k_shot + spec.q_query);
            for (j, p) in picks.into_iter().enumerate() {
                let item = EpisodeItem { index: pool[p], class };
                if j < spec.k_shot {
                    support.push(item);
                } else {
                    query.push(item);
                }
            }
        }
        Episode { classes: drawn, support, query }
    }
}

pub fn sample_episode(dataset: &LabeledDataset, spec: EpisodeSpec, episode_index: u64) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, spec)?.sample(episode_index))
}
