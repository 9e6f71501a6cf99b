//! Analytic Gaussian-mixture targets with exact densities and scores.
//!
//! Every component is isotropic (`variance * I`). Convolving such a mixture
//! with isotropic Gaussian noise of scale `sigma` is again a mixture with
//! variances `v_i + sigma^2`, which is what [`GaussianMixture::perturb`]
//! returns; the annealed samplers use it as ground-truth noise-perturbed score.

mod particles;

pub use particles::{ParticleSet, SnapshotInfo};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One isotropic mixture component. `weight` is stored as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Mixture of isotropic Gaussians. Raw weights are kept; all evaluation uses
/// the weights divided by their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    log_weights: Vec<f64>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("mixture dimension must be positive".into()));
        }
        for (i, c) in components.iter().enumerate() {
            check_dim(dim, c.mean.len())?;
            check_finite("component mean", &c.mean)?;
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} variance must be positive, got {}",
                    c.variance
                )));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} weight must be non-negative, got {}",
                    c.weight
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("mixture weights sum to zero".into()));
        }
        let log_weights = components.iter().map(|c| (c.weight / total).ln()).collect();
        Ok(Self {
            components,
            log_weights,
            dim,
        })
    }

    /// Two-mode mixture `0.2 N(-5·1, I) + 0.8 N(5·1, I)` in `dim` dimensions.
    pub fn imbalanced_pair(dim: usize) -> Self {
        Self::imbalanced_pair_with_offset(dim, 5.0)
    }

    /// Same as [`Self::imbalanced_pair`] with means at `±offset` per coordinate.
    pub fn imbalanced_pair_with_offset(dim: usize, offset: f64) -> Self {
        Self::new(vec![
            Component {
                weight: 0.2,
                mean: vec![-offset; dim],
                variance: 1.0,
            },
            Component {
                weight: 0.8,
                mean: vec![offset; dim],
                variance: 1.0,
            },
        ])
        .expect("valid preset")
    }

    /// Four-mode 2-d mixture with raw weights 0.8, 0.2, 0.6, 0.4 (normalized 0.4, 0.1, 0.3, 0.2).
    pub fn four_mode() -> Self {
        let comp = |w: f64, m: [f64; 2]| Component {
            weight: w,
            mean: m.to_vec(),
            variance: 1.0,
        };
        Self::new(vec![
            comp(0.8, [5.0, 5.0]),
            comp(0.2, [-5.0, -5.0]),
            comp(0.6, [5.0, -5.0]),
            comp(0.4, [-5.0, 5.0]),
        ])
        .expect("valid preset")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn raw_weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        self.components.iter().map(|c| c.weight / total).collect()
    }

    fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim as f64;
        for ((c, lw), o) in self.components.iter().zip(&self.log_weights).zip(out.iter_mut()) {
            let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = lw - 0.5 * d * (LN_2PI + c.variance.ln()) - 0.5 * sq / c.variance;
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        check_finite("evaluation point", x)
    }

    /// `log p(x)` via log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        let mut terms = vec![0.0; self.components.len()];
        self.component_log_densities(x, &mut terms);
        Ok(log_sum_exp(&terms))
    }

    /// Posterior component probabilities `r_i(x)`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut r = vec![0.0; self.components.len()];
        self.responsibilities_into(x, &mut r);
        Ok(r)
    }

    fn responsibilities_into(&self, x: &[f64], r: &mut [f64]) {
        self.component_log_densities(x, r);
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in r.iter_mut() {
            *v /= total;
        }
    }

    /// Exact score `∇ log p(x) = Σ r_i(x) (μ_i - x) / v_i`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.components.len()];
        self.score_into(x, &mut out, &mut scratch);
        Ok(out)
    }

    /// Allocation-free score for validated input; `scratch` holds one slot per component.
    pub(crate) fn score_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        self.responsibilities_into(x, scratch);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &r) in self.components.iter().zip(scratch.iter()) {
            if r == 0.0 {
                continue;
            }
            let scale = r / c.variance;
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += scale * (m - xi);
            }
        }
    }

    /// Convolution with `N(0, sigma^2 I)`: every variance grows by `sigma^2`.
    pub fn perturb(&self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "perturbation sigma must be positive, got {sigma}"
            )));
        }
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.clone(),
                variance: c.variance + sigma * sigma,
            })
            .collect();
        Self::new(components)
    }

    /// Unnormalized `log p(x)^(1/beta) = log p(x) / beta`.
    pub fn tempered_log_density(&self, x: &[f64], beta: f64) -> Result<f64> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
        }
        Ok(self.log_density(x)? / beta)
    }

    /// `n` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleSet> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        let weights = self.normalized_weights();
        let mut flat = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            // zero-weight trailing components must never be picked by round-off
            while weights[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            let c = &self.components[pick];
            let sd = c.variance.sqrt();
            for m in &c.mean {
                let z: f64 = rng.sample(StandardNormal);
                flat.push(m + sd * z);
            }
        }
        ParticleSet::from_flat(n, self.dim, flat)
    }

    /// Smallest pairwise mean distance divided by the largest component standard deviation.
    pub fn separation_ratio(&self) -> f64 {
        let max_sd = self
            .components
            .iter()
            .map(|c| c.variance.sqrt())
            .fold(0.0, f64::max);
        let mut min_dist = f64::INFINITY;
        for (i, a) in self.components.iter().enumerate() {
            for b in &self.components[i + 1..] {
                let dist = a
                    .mean
                    .iter()
                    .zip(&b.mean)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        min_dist / max_sd
    }
}

/// Numerically stable `log Σ exp(v_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
