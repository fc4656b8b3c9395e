//! Central finite-difference checks of every hand-written backward pass.
//!
//! The probes only evaluate loss values, never the analytic gradient code,
//! so they stay an independent oracle for it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baseline::{ce_loss, BaselineModel};
use crate::error::Result;
use crate::losses::{mn_loss, pn_loss, sc_loss, Distance, EpisodeBatch, LossConfig, LossOutput};
use crate::projection::ProjectionModel;
use crate::seed;
use crate::vecops::{dot, norm};

pub const FD_STEP: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to round-off compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn central_difference(x0: f64, h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Random episode of unit vectors with arbitrary distinct class ids.
pub fn random_batch(rng: &mut ChaCha8Rng, dim: usize, n_way: usize, k_shot: usize, q_query: usize) -> EpisodeBatch {
    let mut classes: Vec<u32> = Vec::new();
    while classes.len() < n_way {
        let c = rng.random_range(0..1000);
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let mut batch = EpisodeBatch { support: vec![], support_classes: vec![], query: vec![], query_classes: vec![] };
    for &c in &classes {
        for _ in 0..k_shot {
            batch.support.push(random_unit(rng, dim));
            batch.support_classes.push(c);
        }
        for _ in 0..q_query {
            batch.query.push(random_unit(rng, dim));
            batch.query_classes.push(c);
        }
    }
    batch
}

/// Max relative error between `loss`'s analytic embedding gradients and
/// central differences over every support and query coordinate.
pub fn check_loss_gradients(
    batch: &EpisodeBatch,
    loss: impl Fn(&EpisodeBatch) -> Result<LossOutput>,
) -> Result<f64> {
    let analytic = loss(batch)?;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let n = if which == 0 { batch.support.len() } else { batch.query.len() };
        for i in 0..n {
            for j in 0..batch.support[0].len() {
                let mut probe = batch.clone();
                let x0 = if which == 0 { batch.support[i][j] } else { batch.query[i][j] };
                let fd = central_difference(x0, FD_STEP, |v| {
                    if which == 0 {
                        probe.support[i][j] = v;
                    } else {
                        probe.query[i][j] = v;
                    }
                    loss(&probe).map(|o| o.loss).unwrap_or(f64::NAN)
                });
                let a = if which == 0 { analytic.d_support[i][j] } else { analytic.d_query[i][j] };
                worst = worst.max(rel_err(a, fd));
            }
        }
    }
    Ok(worst)
}

/// Checks `dW`, `db` of the projection under the linear probe loss `g . r`.
pub fn check_projection_gradients(rng: &mut ChaCha8Rng, dim: usize) -> Result<f64> {
    let mut model = ProjectionModel::init(dim, rng.random())?;
    {
        let (_, bias) = model.params_mut();
        for b in bias.iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = model.backward(&model.forward(&x), &upstream)?;
    let mut worst: f64 = 0.0;
    for k in 0..dim * dim + dim {
        let mut probe = model.clone();
        let x0 = if k < dim * dim { model.weights()[k] } else { model.bias()[k - dim * dim] };
        let fd = central_difference(x0, FD_STEP, |v| {
            let (w, b) = probe.params_mut();
            if k < dim * dim {
                w[k] = v;
            } else {
                b[k - dim * dim] = v;
            }
            dot(&probe.project(&x), &upstream)
        });
        let a = if k < dim * dim { grads.weights[k] } else { grads.bias[k - dim * dim] };
        worst = worst.max(rel_err(a, fd));
    }
    Ok(worst)
}

/// Checks every parameter gradient of the baseline cross-entropy.
pub fn check_baseline_gradients(rng: &mut ChaCha8Rng, dim: usize, batch_size: usize) -> Result<f64> {
    let mut model = BaselineModel::init(dim, rng.random())?;
    for w in model.head_weights.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    model.head_bias = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    {
        let (_, bias) = model.projection.params_mut();
        for b in bias.iter_mut() {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let xs: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<u8> = (0..batch_size).map(|_| rng.random_range(0..2)).collect();
    let batch: Vec<(&[f64], u8)> = xs.iter().map(|x| x.as_slice()).zip(ys.iter().copied()).collect();
    let (_, grads) = ce_loss(&model, &batch)?;

    let n_proj = dim * dim + dim;
    let n_total = n_proj + 2 * dim + 2;
    let mut worst: f64 = 0.0;
    for k in 0..n_total {
        let read = |m: &BaselineModel| -> f64 {
            if k < dim * dim {
                m.projection.weights()[k]
            } else if k < n_proj {
                m.projection.bias()[k - dim * dim]
            } else if k < n_proj + 2 * dim {
                m.head_weights[k - n_proj]
            } else {
                m.head_bias[k - n_proj - 2 * dim]
            }
        };
        let mut probe = model.clone();
        let fd = central_difference(read(&model), FD_STEP, |v| {
            if k < dim * dim {
                probe.projection.params_mut().0[k] = v;
            } else if k < n_proj {
                probe.projection.params_mut().1[k - dim * dim] = v;
            } else if k < n_proj + 2 * dim {
                probe.head_weights[k - n_proj] = v;
            } else {
                probe.head_bias[k - n_proj - 2 * dim] = v;
            }
            ce_loss(&probe, &batch).map(|(l, _)| l).unwrap_or(f64::NAN)
        });
        let a = if k < dim * dim {
            grads.projection.weights[k]
        } else if k < n_proj {
            grads.projection.bias[k - dim * dim]
        } else if k < n_proj + 2 * dim {
            grads.head_weights[k - n_proj]
        } else {
            grads.head_bias[k - n_proj - 2 * dim]
        };
        worst = worst.max(rel_err(a, fd));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub dim: usize,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Runs every gradient suite for `trials` random instances at `dim`.
pub fn run_suites(dim: usize, trials: usize, base_seed: u64) -> Result<Vec<SuiteResult>> {
    let names = ["pn", "pn-squared", "mn", "sc", "projection", "baseline-ce"];
    let mut out = Vec::new();
    for name in names {
        let mut rng = seed::rng(base_seed, &[seed::tag(name), dim as u64]);
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let n_way = rng.random_range(2..=5);
            let k_shot = rng.random_range(1..=3);
            let err = match name {
                "pn" => {
                    let b = random_batch(&mut rng, dim, n_way, k_shot, 2);
                    check_loss_gradients(&b, |x| pn_loss(x, &LossConfig::default()))?
                }
                "pn-squared" => {
                    let b = random_batch(&mut rng, dim, n_way, k_shot, 2);
                    let cfg = LossConfig { distance: Distance::SquaredEuclidean, ..Default::default() };
                    check_loss_gradients(&b, |x| pn_loss(x, &cfg))?
                }
                "mn" => {
                    let b = random_batch(&mut rng, dim, n_way, k_shot, 2);
                    check_loss_gradients(&b, mn_loss)?
                }
                "sc" => {
                    let b = random_batch(&mut rng, dim, n_way, k_shot, 3);
                    check_loss_gradients(&b, |x| sc_loss(x, &LossConfig::default()))?
                }
                "projection" => check_projection_gradients(&mut rng, dim)?,
                _ => check_baseline_gradients(&mut rng, dim, 8)?,
            };
            worst = worst.max(err);
        }
        out.push(SuiteResult {
            name: name.to_string(),
            dim,
            trials,
            max_rel_err: worst,
            passed: worst < MAX_REL_ERR,
        });
    }
    Ok(out)
}
