//! The trainable head `r = normalize(relu(W x + b))`.

use rand::Rng;

use crate::data::{CheckpointMeta, ProjectionCheckpoint};
use crate::error::{Error, Result};
use crate::seed;
use crate::vecops::{dot, norm};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    dim: usize,
    /// dim x dim, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    norm_epsilon: f64,
    /// Bumped on every parameter update so stale caches can be detected.
    generation: u64,
}

/// Intermediate values of one forward pass, consumed by [`ProjectionModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    x: Vec<f64>,
    pre: Vec<f64>,
    h_norm: f64,
    r: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProjectionGrads {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim * dim], bias: vec![0.0; dim] }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

impl ProjectionModel {
    /// Uniform fan-in initialisation `W ~ U(-sqrt(6/d), sqrt(6/d))`, `b = 0`.
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("projection dim must be positive".into()));
        }
        let bound = (6.0 / dim as f64).sqrt();
        let mut rng = seed::rng(seed, &[seed::tag("projection-init")]);
        let weights = (0..dim * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            dim,
            weights,
            bias: vec![0.0; dim],
            norm_epsilon: DEFAULT_NORM_EPSILON,
            generation: 0,
        })
    }

    pub fn from_parts(dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.len() != dim * dim || bias.len() != dim {
            return Err(Error::Validation(format!(
                "projection parameters do not form a {dim}x{dim} layer"
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("projection parameters must be finite".into()));
        }
        Ok(Self { dim, weights, bias, norm_epsilon: DEFAULT_NORM_EPSILON, generation: 0 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn norm_epsilon(&self) -> f64 {
        self.norm_epsilon
    }

    /// Direct parameter access for finite-difference probes. Invalidates caches.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.generation += 1;
        (&mut self.weights, &mut self.bias)
    }

    pub fn forward(&self, x: &[f64]) -> ForwardCache {
        assert_eq!(x.len(), self.dim, "input length must equal projection dim");
        let pre: Vec<f64> = self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect();
        let h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let h_norm = norm(&h);
        let denom = h_norm.max(self.norm_epsilon);
        let r = h.iter().map(|v| v / denom).collect();
        ForwardCache { generation: self.generation, x: x.to_vec(), pre, h_norm, r }
    }

    /// Projected embedding only.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).r
    }

    pub fn backward(&self, cache: &ForwardCache, dl_dr: &[f64]) -> Result<ProjectionGrads> {
        let mut grads = ProjectionGrads::zeros(self.dim);
        self.backward_into(cache, dl_dr, &mut grads)?;
        Ok(grads)
    }

    /// Adds this sample's parameter gradient to `grads` and returns `dL/dx`.
    ///
    /// `dL/dh = (I - r r^T) dL/dr / |h|`, zero when the norm fell back to
    /// `norm_epsilon`; then gated by the ReLU mask.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        dl_dr: &[f64],
        grads: &mut ProjectionGrads,
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.x.len() != self.dim {
            return Err(Error::Contract(
                "forward cache does not belong to the current model parameters".into(),
            ));
        }
        if dl_dr.len() != self.dim || grads.bias.len() != self.dim {
            return Err(Error::Contract("gradient length mismatch".into()));
        }
        let mut dx = vec![0.0; self.dim];
        if cache.h_norm < self.norm_epsilon {
            return Ok(dx);
        }
        let r_dot_g = dot(&cache.r, dl_dr);
        for i in 0..self.dim {
            if cache.pre[i] <= 0.0 {
                continue;
            }
            let d_pre = (dl_dr[i] - cache.r[i] * r_dot_g) / cache.h_norm;
            grads.bias[i] += d_pre;
            let row = i * self.dim;
            for (j, xj) in cache.x.iter().enumerate() {
                grads.weights[row + j] += d_pre * xj;
                dx[j] += d_pre * self.weights[row + j];
            }
        }
        Ok(dx)
    }

    pub fn sgd_step(&mut self, grads: &ProjectionGrads, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * g;
        }
        self.generation += 1;
    }

    pub fn to_checkpoint(&self, metadata: CheckpointMeta) -> ProjectionCheckpoint {
        ProjectionCheckpoint {
            d_in: self.dim,
            d_out: self.dim,
            weights: self.weights.iter().map(|&v| v as f32).collect(),
            bias: self.bias.iter().map(|&v| v as f32).collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: &ProjectionCheckpoint) -> Result<Self> {
        ckpt.validate()?;
        Self::from_parts(
            ckpt.d_in,
            ckpt.weights.iter().map(|&v| v as f64).collect(),
            ckpt.bias.iter().map(|&v| v as f64).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_difference;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(dim: usize) -> ProjectionModel {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        ProjectionModel::from_parts(dim, w, vec![0.0; dim]).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ProjectionModel::init(4, 7).unwrap();
        assert_eq!(a, ProjectionModel::init(4, 7).unwrap());
        assert_ne!(a, ProjectionModel::init(4, 8).unwrap());
        assert!(a.bias().iter().all(|&b| b == 0.0));
        let big = ProjectionModel::init(512, 1).unwrap();
        assert_eq!(big.weights().len(), 512 * 512);
        let bound = (6.0f64 / 512.0).sqrt();
        assert!(big.weights().iter().all(|w| w.abs() <= bound));
        assert!(matches!(ProjectionModel::init(0, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn forward_normalises_three_four_five() {
        let r = identity(2).project(&[3.0, 4.0]);
        assert!((r[0] - 0.6).abs() < 1e-15 && (r[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dead_relu_gives_zero_vector_and_zero_gradient() {
        let m = identity(3);
        let cache = m.forward(&[-1.0, -2.0, 0.0]);
        assert_eq!(cache.output(), &[0.0, 0.0, 0.0]);
        let g = m.backward(&cache, &[1.0, 2.0, 3.0]).unwrap();
        assert!(g.weights.iter().chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let m = ProjectionModel::init(5, 3).unwrap();
        let cache = m.forward(&[0.3, -0.1, 0.8, 0.2, 0.5]);
        let g = m.backward(&cache, &[0.0; 5]).unwrap();
        assert_eq!(g, ProjectionGrads::zeros(5));
    }

    #[test]
    fn one_dimensional_output_is_scale_invariant() {
        // r = 1 for every positive h, so dr/dW = 0; finite differences agree.
        let m = ProjectionModel::from_parts(1, vec![2.0], vec![0.0]).unwrap();
        let g = m.backward(&m.forward(&[1.0]), &[1.0]).unwrap();
        assert_eq!(g.weights, vec![0.0]);
        let fd = central_difference(2.0, 1e-6, |w| {
            ProjectionModel::from_parts(1, vec![w], vec![0.0]).unwrap().project(&[1.0])[0]
        });
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn stale_cache_is_contract_error() {
        let mut m = ProjectionModel::init(3, 1).unwrap();
        let cache = m.forward(&[1.0, 1.0, 1.0]);
        let g = m.backward(&cache, &[1.0, 0.0, 0.0]).unwrap();
        m.sgd_step(&g, 0.1);
        assert!(matches!(m.backward(&cache, &[1.0, 0.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn random_instance_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = ProjectionModel::init(5, 2).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g_up: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |model: &ProjectionModel| dot(&model.project(&x), &g_up);
        let g = m.backward(&m.forward(&x), &g_up).unwrap();
        for k in 0..25 {
            let fd = central_difference(m.weights()[k], 1e-6, |v| {
                let mut p = m.clone();
                p.params_mut().0[k] = v;
                loss(&p)
            });
            let err = (fd - g.weights[k]).abs() / fd.abs().max(g.weights[k].abs()).max(1e-6);
            assert!(err < 1e-5, "W[{k}]: analytic {} vs fd {fd}", g.weights[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip_rounds_to_f32() {
        let m = ProjectionModel::init(3, 5).unwrap();
        let meta = CheckpointMeta { seed: 5, method: "pn".into(), config_hash: String::new(), head: None };
        let back = ProjectionModel::from_checkpoint(&m.to_checkpoint(meta)).unwrap();
        for (a, b) in back.weights().iter().zip(m.weights()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    proptest! {
        #[test]
        fn output_is_unit_or_zero(
            seed in 0u64..1000,
            x in prop::collection::vec(-10.0f64..10.0, 6),
        ) {
            let r = ProjectionModel::init(6, seed).unwrap().project(&x);
            let n = norm(&r);
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn joint_positive_scaling_leaves_output_unchanged(
            seed in 0u64..1000,
            c in 0.01f64..100.0,
            x in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let m = ProjectionModel::init(4, seed).unwrap();
            let mut bias = m.bias().to_vec();
            for (i, b) in bias.iter_mut().enumerate() {
                *b = 0.1 * i as f64 - 0.15;
            }
            let base = ProjectionModel::from_parts(4, m.weights().to_vec(), bias.clone()).unwrap();
            let scaled = ProjectionModel::from_parts(
                4,
                m.weights().iter().map(|w| w * c).collect(),
                bias.iter().map(|b| b * c).collect(),
            ).unwrap();
            let (a, b) = (base.project(&x), scaled.project(&x));
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
