//! Episodic objectives over projected embeddings, with analytic gradients
//! with respect to every support and query embedding.
//!
//! * prototypical: softmax over negative distances to class-mean prototypes;
//! * matching: attention `softmax_s(r_q . r_s)` summed over same-class supports;
//! * supervised contrastive: support anchors against query positives, with the
//!   normaliser running over the whole query set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{axpy, dist, dot, log_sum_exp, softmax};

/// Probability floor applied before `ln` in the matching loss.
pub const MN_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub distance: Distance,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { distance: Distance::Euclidean, tau: 0.07 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Validation(format!("temperature tau = {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Projected support and query embeddings of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub support: Vec<Vec<f64>>,
    pub support_classes: Vec<u32>,
    pub query: Vec<Vec<f64>>,
    pub query_classes: Vec<u32>,
}

impl EpisodeBatch {
    fn check(&self) -> Result<()> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(Error::Contract("episode batch needs support and query samples".into()));
        }
        if self.support.len() != self.support_classes.len() || self.query.len() != self.query_classes.len() {
            return Err(Error::Contract("embedding and class counts differ".into()));
        }
        let dim = self.support[0].len();
        if self.support.iter().chain(&self.query).any(|v| v.len() != dim) {
            return Err(Error::Contract("embeddings of unequal length".into()));
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.support[0].len()
    }
}

/// Loss value and its gradient with respect to each support and query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_support: Vec<Vec<f64>>,
    pub d_query: Vec<Vec<f64>>,
}

impl LossOutput {
    fn zeros(batch: &EpisodeBatch, loss: f64) -> Self {
        let d = batch.dim();
        Self {
            loss,
            d_support: vec![vec![0.0; d]; batch.support.len()],
            d_query: vec![vec![0.0; d]; batch.query.len()],
        }
    }
}

/// Per-class mean of the support embeddings, keyed by class id.
pub fn prototypes(support: &[Vec<f64>], classes: &[u32]) -> Result<BTreeMap<u32, Vec<f64>>> {
    if support.len() != classes.len() {
        return Err(Error::Contract("support and class counts differ".into()));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (v, &c) in support.iter().zip(classes) {
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; v.len()], 0));
        axpy(1.0, v, &mut e.0);
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Contract("no support samples to build prototypes from".into()));
    }
    Ok(sums
        .into_iter()
        .map(|(c, (mut s, n))| {
            s.iter_mut().for_each(|x| *x /= n as f64);
            (c, s)
        })
        .collect())
}

fn distance(kind: Distance, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Distance::Euclidean => dist(a, b),
        Distance::SquaredEuclidean => {
            let d = dist(a, b);
            d * d
        }
    }
}

/// `d distance(a, b) / d a`; the Euclidean cusp at `a == b` takes subgradient 0.
fn distance_grad(kind: Distance, a: &[f64], b: &[f64]) -> Vec<f64> {
    match kind {
        Distance::Euclidean => {
            let d = dist(a, b);
            if d == 0.0 {
                vec![0.0; a.len()]
            } else {
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
        }
        Distance::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
    }
}

fn class_position(classes: &[u32], c: u32) -> Result<usize> {
    classes
        .binary_search(&c)
        .map_err(|_| Error::Contract(format!("query class {c} has no support samples")))
}

/// Prototype class probabilities per query, columns ordered by ascending class id.
pub fn pn_probabilities(batch: &EpisodeBatch, config: &LossConfig) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    batch.check()?;
    let protos = prototypes(&batch.support, &batch.support_classes)?;
    let classes: Vec<u32> = protos.keys().copied().collect();
    let probs = batch
        .query
        .iter()
        .map(|q| {
            let logits: Vec<f64> = protos.values().map(|c| -distance(config.distance, q, c)).collect();
            softmax(&logits)
        })
        .collect();
    Ok((classes, probs))
}

pub fn pn_loss(batch: &EpisodeBatch, config: &LossConfig) -> Result<LossOutput> {
    batch.check()?;
    let protos = prototypes(&batch.support, &batch.support_classes)?;
    let classes: Vec<u32> = protos.keys().copied().collect();
    let centers: Vec<&Vec<f64>> = protos.values().collect();
    let mut counts = vec![0usize; classes.len()];
    for &c in &batch.support_classes {
        counts[class_position(&classes, c)?] += 1;
    }
    let nq = batch.query.len() as f64;
    let mut out = LossOutput::zeros(batch, 0.0);
    let mut d_centers = vec![vec![0.0; batch.dim()]; classes.len()];
    for (qi, (q, &qc)) in batch.query.iter().zip(&batch.query_classes).enumerate() {
        let target = class_position(&classes, qc)?;
        let logits: Vec<f64> = centers.iter().map(|c| -distance(config.distance, q, c)).collect();
        let lse = log_sum_exp(&logits);
        out.loss += (lse - logits[target]) / nq;
        for (n, c) in centers.iter().enumerate() {
            // d loss / d logit_n = p_n - [n == target]; logit_n = -d(q, c_n).
            let coeff = ((logits[n] - lse).exp() - (n == target) as u8 as f64) / nq;
            if coeff == 0.0 {
                continue;
            }
            let g = distance_grad(config.distance, q, c);
            axpy(-coeff, &g, &mut out.d_query[qi]);
            axpy(coeff, &g, &mut d_centers[n]);
        }
    }
    for (si, &sc) in batch.support_classes.iter().enumerate() {
        let n = class_position(&classes, sc)?;
        axpy(1.0 / counts[n] as f64, &d_centers[n], &mut out.d_support[si]);
    }
    Ok(out)
}

/// Matching-network class probabilities per query, columns by ascending class id.
pub fn mn_probabilities(batch: &EpisodeBatch) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    batch.check()?;
    let mut classes = batch.support_classes.clone();
    classes.sort_unstable();
    classes.dedup();
    let probs = batch
        .query
        .iter()
        .map(|q| {
            let logits: Vec<f64> = batch.support.iter().map(|s| dot(q, s)).collect();
            let attn = softmax(&logits);
            let mut p = vec![0.0; classes.len()];
            for (a, &c) in attn.iter().zip(&batch.support_classes) {
                p[classes.binary_search(&c).expect("class present")] += a;
            }
            p
        })
        .collect();
    Ok((classes, probs))
}

pub fn mn_loss(batch: &EpisodeBatch) -> Result<LossOutput> {
    batch.check()?;
    let nq = batch.query.len() as f64;
    let floor = MN_PROB_FLOOR.ln();
    let mut out = LossOutput::zeros(batch, 0.0);
    for (qi, (q, &qc)) in batch.query.iter().zip(&batch.query_classes).enumerate() {
        let logits: Vec<f64> = batch.support.iter().map(|s| dot(q, s)).collect();
        let positive: Vec<f64> = logits
            .iter()
            .zip(&batch.support_classes)
            .filter(|(_, &c)| c == qc)
            .map(|(&l, _)| l)
            .collect();
        let lse_all = log_sum_exp(&logits);
        let log_p = log_sum_exp(&positive) - lse_all;
        if !(log_p >= floor) {
            log::warn!("matching-network probability below {MN_PROB_FLOOR}; clamped");
            out.loss -= floor / nq;
            continue;
        }
        out.loss -= log_p / nq;
        // log p = lse(pos) - lse(all); d/dl_s = [s pos] a_s / p - a_s.
        for (si, (s, &sc)) in batch.support.iter().zip(&batch.support_classes).enumerate() {
            let a = (logits[si] - lse_all).exp();
            let dlogp = if sc == qc { a / log_p.exp() - a } else { -a };
            let coeff = -dlogp / nq;
            axpy(coeff, s, &mut out.d_query[qi]);
            axpy(coeff, q, &mut out.d_support[si]);
        }
    }
    Ok(out)
}

pub fn sc_loss(batch: &EpisodeBatch, config: &LossConfig) -> Result<LossOutput> {
    config.validate()?;
    batch.check()?;
    let tau = config.tau;
    let ns = batch.support.len() as f64;
    let mut out = LossOutput::zeros(batch, 0.0);
    for (si, (s, &sc)) in batch.support.iter().zip(&batch.support_classes).enumerate() {
        let positives: Vec<usize> = (0..batch.query.len())
            .filter(|&qi| batch.query_classes[qi] == sc)
            .collect();
        if positives.is_empty() {
            return Err(Error::Contract(format!("support class {sc} has no positive in the query set")));
        }
        let np = positives.len() as f64;
        let logits: Vec<f64> = batch.query.iter().map(|q| dot(s, q) / tau).collect();
        let lse = log_sum_exp(&logits);
        let term: f64 = positives.iter().map(|&p| lse - logits[p]).sum::<f64>() / np;
        out.loss += term / ns;
        for (qi, q) in batch.query.iter().enumerate() {
            let is_pos = batch.query_classes[qi] == sc;
            let dlogit = ((logits[qi] - lse).exp() - if is_pos { 1.0 / np } else { 0.0 }) / ns;
            axpy(dlogit / tau, q, &mut out.d_support[si]);
            axpy(dlogit / tau, s, &mut out.d_query[qi]);
        }
    }
    Ok(out)
}

/// Nearest-prototype class per query; ties go to the smallest class id.
pub fn predict(batch: &EpisodeBatch, config: &LossConfig) -> Result<Vec<u32>> {
    batch.check()?;
    let protos = prototypes(&batch.support, &batch.support_classes)?;
    Ok(batch
        .query
        .iter()
        .map(|q| {
            let mut best = (f64::INFINITY, u32::MAX);
            for (&c, p) in &protos {
                let d = distance(config.distance, q, p);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect())
}

/// Fraction of queries whose predicted class matches.
pub fn episode_accuracy(batch: &EpisodeBatch, config: &LossConfig) -> Result<f64> {
    let pred = predict(batch, config)?;
    let correct = pred.iter().zip(&batch.query_classes).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_loss_gradients, random_batch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_way() -> EpisodeBatch {
        EpisodeBatch {
            support: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            support_classes: vec![0, 1],
            query: vec![vec![1.0, 0.0]],
            query_classes: vec![0],
        }
    }

    #[test]
    fn prototype_examples() {
        let p = prototypes(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[3, 3]).unwrap();
        assert_eq!(p[&3], vec![0.5, 0.5]);
        let single = prototypes(&[vec![0.2, 0.9]], &[1]).unwrap();
        assert_eq!(single[&1], vec![0.2, 0.9]);
        let same = prototypes(&vec![vec![0.3, 0.4]; 4], &[2; 4]).unwrap();
        assert_eq!(same[&2], vec![0.3, 0.4]);
        assert!(prototypes(&[], &[]).is_err());
    }

    #[test]
    fn pn_two_way_hand_value() {
        // softmax(-[0, sqrt 2]) -> p0 = 1 / (1 + e^{-sqrt 2}).
        let out = pn_loss(&two_way(), &LossConfig::default()).unwrap();
        let p0 = 1.0 / (1.0 + (-(2f64).sqrt()).exp());
        assert!((p0 - 0.8044).abs() < 1e-4);
        assert!((out.loss - (-p0.ln())).abs() < 1e-12);
        assert!((out.loss - 0.2177).abs() < 1e-4);
    }

    #[test]
    fn equidistant_query_gives_ln_n() {
        let batch = EpisodeBatch {
            support: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            support_classes: vec![4, 7, 9],
            query: vec![vec![0.0, 0.0]],
            query_classes: vec![7],
        };
        let out = pn_loss(&batch, &LossConfig::default()).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mn_two_way_hand_value() {
        let out = mn_loss(&two_way()).unwrap();
        let a0 = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((a0 - 0.7311).abs() < 1e-4);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn mn_identical_supports_give_ln_n() {
        let batch = EpisodeBatch {
            support: vec![vec![0.6, 0.8]; 5],
            support_classes: vec![0, 1, 2, 3, 4],
            query: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            query_classes: vec![2, 4],
        };
        assert!((mn_loss(&batch).unwrap().loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mn_missing_positive_is_clamped() {
        let batch = EpisodeBatch { query_classes: vec![5], ..two_way() };
        let out = mn_loss(&batch).unwrap();
        assert!((out.loss + MN_PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(out.d_query[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sc_hand_value_and_monotonicity() {
        let batch = EpisodeBatch {
            support: vec![vec![1.0, 0.0]],
            support_classes: vec![0],
            query: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            query_classes: vec![0, 1],
        };
        let cfg = LossConfig { tau: 1.0, ..Default::default() };
        let base = sc_loss(&batch, &cfg).unwrap().loss;
        let e = 1f64.exp();
        assert!((base - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((base - 0.3133).abs() < 1e-4);
        // Raise r_s . r_p from 1 to 1.5 with r_s . r_negative held at 0.
        let stronger = EpisodeBatch { query: vec![vec![1.5, 0.0], vec![0.0, 1.0]], ..batch.clone() };
        assert!(sc_loss(&stronger, &cfg).unwrap().loss < base);
        assert!(matches!(sc_loss(&batch, &LossConfig { tau: 0.0, ..cfg }), Err(Error::Validation(_))));
    }

    #[test]
    fn predict_examples() {
        let cfg = LossConfig::default();
        let batch = EpisodeBatch {
            support: vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, 0.5]],
            support_classes: vec![8, 2, 5],
            query: vec![vec![0.5, 0.0], vec![0.25, 0.0], vec![0.0, 0.45]],
            query_classes: vec![2, 2, 5],
        };
        // Second query ties between classes 8 and 2: lower id wins.
        assert_eq!(predict(&batch, &cfg).unwrap(), vec![2, 2, 5]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = random_batch(&mut rng, 4, 3, 2, 3);
            for probs in [pn_probabilities(&b, &LossConfig::default()).unwrap().1, mn_probabilities(&b).unwrap().1] {
                for p in probs {
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_label_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        for _ in 0..20 {
            let b = random_batch(&mut rng, 5, 3, 2, 2);
            // Permute class ids: c -> 5000 - c reverses their order too.
            let perm = |cs: &[u32]| cs.iter().map(|c| 5000 - c).collect::<Vec<_>>();
            let p = EpisodeBatch {
                support_classes: perm(&b.support_classes),
                query_classes: perm(&b.query_classes),
                ..b.clone()
            };
            for (x, y) in [
                (pn_loss(&b, &cfg).unwrap().loss, pn_loss(&p, &cfg).unwrap().loss),
                (mn_loss(&b).unwrap().loss, mn_loss(&p).unwrap().loss),
                (sc_loss(&b, &cfg).unwrap().loss, sc_loss(&p, &cfg).unwrap().loss),
            ] {
                assert!(x >= 0.0);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pn_on_own_support_beats_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = random_batch(&mut rng, 6, 4, 1, 1);
            let own = EpisodeBatch {
                query: b.support.clone(),
                query_classes: b.support_classes.clone(),
                ..b
            };
            assert!(pn_loss(&own, &LossConfig::default()).unwrap().loss < 4f64.ln());
        }
    }

    #[test]
    fn predict_invariant_to_distance_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let b = random_batch(&mut rng, 5, 4, 2, 3);
            let scaled = EpisodeBatch {
                support: b.support.iter().map(|v| v.iter().map(|x| 3.5 * x).collect()).collect(),
                query: b.query.iter().map(|v| v.iter().map(|x| 3.5 * x).collect()).collect(),
                ..b.clone()
            };
            let cfg = LossConfig::default();
            let sq = LossConfig { distance: Distance::SquaredEuclidean, ..cfg };
            let base = predict(&b, &cfg).unwrap();
            assert_eq!(base, predict(&scaled, &cfg).unwrap());
            assert_eq!(base, predict(&b, &sq).unwrap());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig::default();
        let sq = LossConfig { distance: Distance::SquaredEuclidean, ..cfg };
        for _ in 0..10 {
            let b = random_batch(&mut rng, 6, 3, 2, 2);
            assert!(check_loss_gradients(&b, |x| pn_loss(x, &cfg)).unwrap() < 1e-4);
            assert!(check_loss_gradients(&b, |x| pn_loss(x, &sq)).unwrap() < 1e-4);
            let b = random_batch(&mut rng, 6, 5, 1, 2);
            assert!(check_loss_gradients(&b, mn_loss).unwrap() < 1e-4);
            let b = random_batch(&mut rng, 6, 4, 2, 3);
            assert!(check_loss_gradients(&b, |x| sc_loss(x, &cfg)).unwrap() < 1e-4);
        }
    }
}
