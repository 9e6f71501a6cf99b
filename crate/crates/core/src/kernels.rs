//! Positive-definite kernels with gradients, conditioned on the noise level.
//!
//! All kernels here are radial in some feature space: `k(x, y) = f(‖u - v‖²)`
//! with `u, v` either the inputs themselves (data space) or the outputs of a
//! noise-conditional encoder (code space). The radial profile `f` is an RBF
//! `exp(-γ r²)`, an inverse multiquadric `(1 + c r²)^τ`, or their sum.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::distributions::ParticleSet;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::score_learning::ConditionalNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Imq,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpace {
    #[default]
    Data,
    Code,
}

/// How the RBF coefficient is derived from the reference median distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `γ = γ0 / med`
    Linear,
    /// `γ = γ0 / med²`, invariant to rescaling the data.
    #[default]
    Squared,
}

fn default_tau0() -> f64 {
    -0.5
}

/// Serializable kernel description; becomes a [`ConditionedKernel`] once bound to a noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "one")]
    pub gamma0: f64,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default)]
    pub space: KernelSpace,
    #[serde(default)]
    pub bandwidth_rule: BandwidthRule,
    /// Divide IMQ squared distances by the squared reference median.
    #[serde(default)]
    pub imq_rescale: bool,
    /// For code-space kernels, take the median over encoded reference points.
    #[serde(default)]
    pub code_median: bool,
    /// Optional per-level IMQ exponents overriding `tau0`.
    #[serde(default)]
    pub tau_by_level: Vec<f64>,
    #[serde(skip)]
    pub encoder: Option<Arc<ConditionalNet>>,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn rbf(gamma0: f64) -> Self {
        Self::new(KernelFamily::Rbf, gamma0, default_tau0())
    }

    pub fn imq(tau0: f64) -> Self {
        Self::new(KernelFamily::Imq, 1.0, tau0)
    }

    pub fn mixed(gamma0: f64, tau0: f64) -> Self {
        Self::new(KernelFamily::Mixed, gamma0, tau0)
    }

    pub fn new(family: KernelFamily, gamma0: f64, tau0: f64) -> Self {
        Self {
            family,
            gamma0,
            tau0,
            space: KernelSpace::Data,
            bandwidth_rule: BandwidthRule::default(),
            imq_rescale: false,
            code_median: false,
            tau_by_level: Vec::new(),
            encoder: None,
        }
    }

    pub fn with_rule(mut self, rule: BandwidthRule) -> Self {
        self.bandwidth_rule = rule;
        self
    }

    /// Switches to code space through `encoder`.
    pub fn with_encoder(mut self, encoder: Arc<ConditionalNet>) -> Self {
        self.space = KernelSpace::Code;
        self.encoder = Some(encoder);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma0 must be positive, got {}",
                self.gamma0
            )));
        }
        for &tau in std::iter::once(&self.tau0).chain(&self.tau_by_level) {
            if !(tau < 0.0 && tau.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "IMQ exponent must be negative, got {tau}"
                )));
            }
        }
        match (self.space, &self.encoder) {
            (KernelSpace::Code, None) => Err(Error::InvalidParameter(
                "code-space kernel requires an encoder".into(),
            )),
            (KernelSpace::Data, Some(_)) => Err(Error::InvalidParameter(
                "data-space kernel must not carry an encoder".into(),
            )),
            _ => Ok(()),
        }
    }

    fn tau_for_level(&self, level: Option<usize>) -> f64 {
        level
            .and_then(|l| self.tau_by_level.get(l).copied())
            .unwrap_or(self.tau0)
    }
}

/// Median of the `n(n-1)/2` pairwise Euclidean distances.
pub fn median_pairwise(ps: &ParticleSet) -> Result<f64> {
    let n = ps.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "median pairwise distance needs at least two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = ps.row(i);
        for j in (i + 1)..n {
            dists.push(sq_dist(a, ps.row(j)).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Degenerate(
            "median pairwise distance is zero; points are (mostly) identical".into(),
        ))
    }
}

/// Median with the even-count convention of averaging the two central order statistics.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let m = values.len();
    debug_assert!(m > 0);
    let upper_idx = m / 2;
    let (_, upper, _) = values.select_nth_unstable_by(upper_idx, f64::total_cmp);
    let upper = *upper;
    if m % 2 == 1 {
        upper
    } else {
        let lower = values[..upper_idx]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// A kernel bound to one noise level: bandwidth and exponent are resolved.
#[derive(Debug, Clone)]
pub struct ConditionedKernel {
    family: KernelFamily,
    space: KernelSpace,
    sigma: f64,
    gamma: f64,
    tau: f64,
    median: f64,
    imq_scale: f64,
    encoder: Option<Arc<ConditionalNet>>,
}

/// `(f, df/dr², d²f/d(r²)²)` of the radial profile.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Radial {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Resolves `γ(σ)` and `τ(σ)` against `reference`, which should hold samples of `p_σ`.
pub fn condition(spec: &KernelSpec, sigma: f64, reference: &ParticleSet) -> Result<ConditionedKernel> {
    condition_at_level(spec, None, sigma, reference)
}

/// Like [`condition`], honoring a per-level IMQ exponent override when present.
pub fn condition_at_level(
    spec: &KernelSpec,
    level: Option<usize>,
    sigma: f64,
    reference: &ParticleSet,
) -> Result<ConditionedKernel> {
    spec.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let median = match (&spec.encoder, spec.code_median) {
        (Some(enc), true) => {
            check_dim(enc.input_dim(), reference.dim())?;
            let codes = enc.forward_batch(reference.as_array(), sigma);
            median_pairwise(&ParticleSet::new(codes)?)?
        }
        _ => median_pairwise(reference)?,
    };
    if let Some(enc) = &spec.encoder {
        check_dim(enc.input_dim(), reference.dim())?;
    }
    Ok(ConditionedKernel::from_parts(spec, sigma, median, spec.tau_for_level(level)))
}

impl ConditionedKernel {
    fn from_parts(spec: &KernelSpec, sigma: f64, median: f64, tau: f64) -> Self {
        let gamma = match spec.bandwidth_rule {
            BandwidthRule::Linear => spec.gamma0 / median,
            BandwidthRule::Squared => spec.gamma0 / (median * median),
        };
        let imq_scale = if spec.imq_rescale {
            1.0 / (median * median)
        } else {
            1.0
        };
        Self {
            family: spec.family,
            space: spec.space,
            sigma,
            gamma,
            tau,
            median,
            imq_scale,
            encoder: spec.encoder.clone(),
        }
    }

    /// A kernel with an explicit bandwidth, bypassing the median heuristic.
    pub fn with_gamma(spec: &KernelSpec, sigma: f64, gamma: f64) -> Result<Self> {
        spec.validate()?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let mut k = Self::from_parts(spec, sigma, 1.0, spec.tau0);
        k.gamma = gamma;
        Ok(k)
    }

    /// Same bandwidth, rebound to another noise level (only the encoder input changes).
    pub fn at_sigma(&self, sigma: f64) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }
    pub fn space(&self) -> KernelSpace {
        self.space
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    /// Reference median the bandwidth was derived from.
    pub fn median(&self) -> f64 {
        self.median
    }
    pub fn encoder(&self) -> Option<&Arc<ConditionalNet>> {
        self.encoder.as_ref()
    }

    #[inline]
    pub(crate) fn radial(&self, r2: f64) -> Radial {
        let mut out = Radial {
            value: 0.0,
            d1: 0.0,
            d2: 0.0,
        };
        if matches!(self.family, KernelFamily::Rbf | KernelFamily::Mixed) {
            let e = (-self.gamma * r2).exp();
            out.value += e;
            out.d1 -= self.gamma * e;
            out.d2 += self.gamma * self.gamma * e;
        }
        if matches!(self.family, KernelFamily::Imq | KernelFamily::Mixed) {
            let c = self.imq_scale;
            let base = 1.0 + c * r2;
            let p = base.powf(self.tau - 2.0);
            out.value += p * base * base;
            out.d1 += self.tau * c * p * base;
            out.d2 += self.tau * (self.tau - 1.0) * c * c * p;
        }
        out
    }

    /// Value and `df/dr²` only; the hot path of the samplers.
    #[inline]
    pub(crate) fn radial_value_d1(&self, r2: f64) -> (f64, f64) {
        match self.family {
            KernelFamily::Rbf => {
                let e = (-self.gamma * r2).exp();
                (e, -self.gamma * e)
            }
            _ => {
                let r = self.radial(r2);
                (r.value, r.d1)
            }
        }
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_dim(x.len(), y.len())?;
        if let Some(enc) = &self.encoder {
            check_dim(enc.input_dim(), x.len())?;
        }
        check_finite("kernel argument", x)?;
        check_finite("kernel argument", y)
    }

    /// Feature map: identity in data space, the encoder in code space.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match &self.encoder {
            Some(enc) => enc.forward(x, self.sigma),
            None => x.to_vec(),
        }
    }

    pub(crate) fn embed_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        match &self.encoder {
            Some(enc) => enc.forward_batch(xs, self.sigma),
            None => xs.to_owned(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_pair(x, y)?;
        let (u, v) = (self.embed(x), self.embed(y));
        Ok(self.radial(sq_dist(&u, &v)).value)
    }

    /// Gradient of `k(x, y)` with respect to `x`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_pair(x, y)?;
        Ok(self.grad_x_unchecked(x, y))
    }

    pub(crate) fn grad_x_unchecked(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.encoder {
            None => {
                let r = self.radial(sq_dist(x, y));
                x.iter().zip(y).map(|(a, b)| 2.0 * r.d1 * (a - b)).collect()
            }
            Some(enc) => {
                let u = enc.forward(x, self.sigma);
                let v = enc.forward(y, self.sigma);
                let r = self.radial(sq_dist(&u, &v));
                let upstream: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * r.d1 * (a - b)).collect();
                enc.input_vjp(x, self.sigma, &upstream)
            }
        }
    }

    /// `tr(∇_x ∇_y k(x, y))`. Closed form in data space; central differences
    /// of the code-space `∇_y k` otherwise.
    pub(crate) fn cross_hessian_trace(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.encoder {
            None => {
                let r2 = sq_dist(x, y);
                let r = self.radial(r2);
                -4.0 * r.d2 * r2 - 2.0 * x.len() as f64 * r.d1
            }
            Some(_) => {
                let mut trace = 0.0;
                let mut xp = x.to_vec();
                for a in 0..x.len() {
                    let h = 1e-5 * (1.0 + x[a].abs());
                    xp[a] = x[a] + h;
                    let gp = self.grad_x_unchecked(y, &xp)[a];
                    xp[a] = x[a] - h;
                    let gm = self.grad_x_unchecked(y, &xp)[a];
                    xp[a] = x[a];
                    trace += (gp - gm) / (2.0 * h);
                }
                trace
            }
        }
    }
}
