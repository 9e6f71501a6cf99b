//! Particle samplers: Stein variational updates with an entropy regularizer,
//! Langevin updates, and the annealing loop tying both to a noise schedule.

mod direction;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use direction::{stein_direction, stein_directions};

use crate::distributions::{GaussianMixture, ParticleSet, SnapshotInfo};
use crate::error::{check_dim, Error, Result};
use crate::kernels::{condition_at_level, ConditionedKernel, KernelSpec};
use crate::score_learning::ConditionalNet;

/// Particle norms beyond this abort a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Strictly decreasing noise levels `σ_1 > … > σ_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.sigmas
    }
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::InvalidParameter("noise schedule needs at least one level".into()));
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter("noise levels must be positive and finite".into()));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidParameter("noise levels must be strictly decreasing".into()));
        }
        Ok(Self { sigmas })
    }

    /// `levels` values from `sigma_max` down to `sigma_min` with a constant ratio.
    pub fn geometric(sigma_max: f64, sigma_min: f64, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParameter("noise schedule needs at least one level".into()));
        }
        if levels == 1 {
            return Self::new(vec![sigma_min]);
        }
        if !(sigma_max > sigma_min && sigma_min > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need sigma_max > sigma_min > 0, got {sigma_max} and {sigma_min}"
            )));
        }
        let ratio = (sigma_min / sigma_max).ln() / (levels - 1) as f64;
        let mut sigmas: Vec<f64> = (0..levels).map(|l| sigma_max * (ratio * l as f64).exp()).collect();
        sigmas[levels - 1] = sigma_min;
        Self::new(sigmas)
    }

    /// Ten levels from 20 down to 1.
    pub fn toy() -> Self {
        Self::geometric(20.0, 1.0, 10).expect("valid constants")
    }

    /// Ten levels from 1 down to 0.01.
    pub fn image() -> Self {
        Self::geometric(1.0, 0.01, 10).expect("valid constants")
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `η_l = ε (σ_l / σ_L)²`.
    pub fn step_size(&self, epsilon: f64, level: usize) -> f64 {
        let ratio = self.sigmas[level] / self.sigmas[self.len() - 1];
        epsilon * ratio * ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub epsilon: f64,
    /// Inner iterations per level.
    pub steps: usize,
    pub beta: f64,
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            steps: 100,
            beta: 1.0,
            alpha: 1.0,
            n: 1024,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.steps == 0 || self.n == 0 {
            return bad("steps and particle count must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        Ok(())
    }
}

/// Something that returns `s(x, σ)`.
#[derive(Debug, Clone)]
pub enum ScoreSource {
    /// Exact mixture score; with `perturb`, the score of the mixture convolved with `N(0, σ²I)`.
    Analytic { mixture: GaussianMixture, perturb: bool },
    Learned(Arc<ConditionalNet>),
    /// `factor · s(x, σ)` of the inner source.
    Scaled { inner: Box<ScoreSource>, factor: f64 },
}

impl ScoreSource {
    pub fn analytic(mixture: GaussianMixture) -> Self {
        Self::Analytic { mixture, perturb: true }
    }

    pub fn dim(&self) -> usize {
        match self {
            ScoreSource::Analytic { mixture, .. } => mixture.dim(),
            ScoreSource::Learned(net) => net.input_dim(),
            ScoreSource::Scaled { inner, .. } => inner.dim(),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self::Scaled {
            inner: Box::new(self),
            factor,
        }
    }

    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let ps = ParticleSet::from_flat(1, x.len(), x.to_vec())?;
        Ok(self.scores(&ps, sigma)?.into_raw_vec_and_offset().0)
    }

    /// Scores of every particle, `n x d`; errors name the first particle with a non-finite score.
    pub fn scores(&self, particles: &ParticleSet, sigma: f64) -> Result<Array2<f64>> {
        check_dim(self.dim(), particles.dim())?;
        let out = self.scores_unchecked(particles, sigma)?;
        let d = particles.dim();
        if let Some(bad) = out
            .as_slice()
            .expect("standard layout")
            .chunks_exact(d)
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFiniteScore { index: bad });
        }
        Ok(out)
    }

    fn scores_unchecked(&self, particles: &ParticleSet, sigma: f64) -> Result<Array2<f64>> {
        match self {
            ScoreSource::Analytic { mixture, perturb } => {
                let perturbed;
                let gm = if *perturb {
                    perturbed = mixture.perturb(sigma)?;
                    &perturbed
                } else {
                    mixture
                };
                let (n, d) = (particles.len(), particles.dim());
                let mut out = Array2::zeros((n, d));
                let mut scratch = vec![0.0; gm.components().len()];
                let flat = out.as_slice_mut().expect("standard layout");
                for (x, o) in particles.rows().zip(flat.chunks_exact_mut(d)) {
                    gm.score_into(x, o, &mut scratch);
                }
                Ok(out)
            }
            ScoreSource::Learned(net) => Ok(net.forward_batch(particles.as_array(), sigma)),
            ScoreSource::Scaled { inner, factor } => Ok(inner.scores_unchecked(particles, sigma)? * *factor),
        }
    }
}

fn check_particles(ps: &ParticleSet) -> std::result::Result<(), String> {
    for (i, row) in ps.rows().enumerate() {
        let norm2: f64 = row.iter().map(|v| v * v).sum();
        if !norm2.is_finite() {
            return Err(format!("particle {i} is non-finite"));
        }
        if norm2 > DIVERGENCE_LIMIT * DIVERGENCE_LIMIT {
            return Err(format!("particle {i} has norm {:.3e}", norm2.sqrt()));
        }
    }
    Ok(())
}

/// One synchronous update `x_i ← x_i + η φ(x_i)`, all directions taken from the pre-update set.
pub fn svgd_step(
    particles: &ParticleSet,
    k: &ConditionedKernel,
    s: &ScoreSource,
    sigma: f64,
    beta: f64,
    eta: f64,
) -> Result<ParticleSet> {
    check_eta(eta)?;
    let scores = s.scores(particles, sigma)?;
    let phi = stein_directions(particles, k, &scores, beta)?;
    let mut next = particles.as_array().to_owned();
    next.scaled_add(eta, &phi);
    finish(next)
}

/// One Langevin update `x + (η/2) s(x, σ) + α √η z`.
///
/// Each particle draws its noise from its own stream of a generator seeded by
/// `rng`, so the result does not depend on evaluation order.
pub fn sgld_step<R: Rng + ?Sized>(
    particles: &ParticleSet,
    s: &ScoreSource,
    sigma: f64,
    eta: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<ParticleSet> {
    check_eta(eta)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {alpha}")));
    }
    let scores = s.scores(particles, sigma)?;
    let step_seed: u64 = rng.gen();
    let noise_scale = alpha * eta.sqrt();
    let mut next = particles.as_array().to_owned();
    next.scaled_add(0.5 * eta, &scores);
    if noise_scale > 0.0 {
        for (i, mut row) in next.rows_mut().into_iter().enumerate() {
            let mut stream = ChaCha8Rng::seed_from_u64(step_seed);
            stream.set_stream(i as u64);
            for v in row.iter_mut() {
                *v += noise_scale * stream.sample::<f64, _>(StandardNormal);
            }
        }
    }
    finish(next)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("step size must be positive, got {eta}")))
    }
}

fn finish(next: Array2<f64>) -> Result<ParticleSet> {
    if next.iter().all(|v| v.is_finite()) {
        Ok(ParticleSet::from_array_unchecked(next))
    } else {
        Err(Error::NonFinite("updated particles".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopKind {
    Svgd,
    Sgld,
}

/// When the kernel bandwidth is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelConditioning {
    /// Re-resolve at every level against samples of `p_σ`.
    #[default]
    PerLevel,
    /// Resolve once against the unperturbed reference and keep it for all levels.
    Fixed,
}

/// What the median heuristic is computed on.
#[derive(Debug, Clone)]
pub enum ReferenceSource {
    /// Fresh draws from the perturbed target.
    Target { mixture: GaussianMixture, samples: usize },
    /// The particles at the start of each level.
    Particles,
}

#[derive(Debug, Clone)]
pub struct AnnealOptions {
    pub conditioning: KernelConditioning,
    pub reference: ReferenceSource,
    /// Levels `0..=l` run Langevin updates before switching to the chosen loop.
    pub switch_level: Option<usize>,
    pub keep_snapshots: bool,
}

impl Default for AnnealOptions {
    fn default() -> Self {
        Self {
            conditioning: KernelConditioning::PerLevel,
            reference: ReferenceSource::Particles,
            switch_level: None,
            keep_snapshots: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub level: usize,
    pub sigma: f64,
    pub eta: f64,
    pub kind: LoopKind,
    /// Resolved RBF coefficient; `None` for Langevin levels.
    pub gamma: Option<f64>,
    pub median: Option<f64>,
    pub max_norm: f64,
    pub snapshot: Option<ParticleSet>,
}

#[derive(Debug, Clone)]
pub struct AnnealOutcome {
    pub particles: ParticleSet,
    pub trace: Vec<LevelRecord>,
}

/// Runs `cfg.steps` updates at each level of `schedule`, carrying particles between levels.
pub fn anneal(
    kind: LoopKind,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    k_spec: Option<&KernelSpec>,
    s: &ScoreSource,
    init: &ParticleSet,
    opts: &AnnealOptions,
) -> Result<AnnealOutcome> {
    cfg.validate()?;
    check_dim(cfg.n, init.len())?;
    check_dim(s.dim(), init.dim())?;
    let needs_kernel = kind == LoopKind::Svgd
        && opts.switch_level.is_none_or(|l| l + 1 < schedule.len());
    let spec = match (needs_kernel, k_spec) {
        (true, None) => {
            return Err(Error::InvalidParameter("SVGD loop needs a kernel spec".into()));
        }
        (_, spec) => spec,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reference_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_4ef5);

    let fixed_kernel = match (spec, opts.conditioning, needs_kernel) {
        (Some(spec), KernelConditioning::Fixed, true) => {
            let reference = match &opts.reference {
                ReferenceSource::Target { mixture, samples } => mixture.sample_with(*samples, &mut reference_rng)?,
                ReferenceSource::Particles => init.clone(),
            };
            Some(condition_at_level(spec, None, schedule.sigmas()[schedule.len() - 1], &reference)?)
        }
        _ => None,
    };

    let mut x = init.clone();
    let mut trace = Vec::with_capacity(schedule.len());
    for (level, &sigma) in schedule.sigmas().iter().enumerate() {
        let eta = schedule.step_size(cfg.epsilon, level);
        let level_kind = match opts.switch_level {
            Some(l) if level <= l => LoopKind::Sgld,
            _ => kind,
        };
        let kernel = match level_kind {
            LoopKind::Sgld => None,
            LoopKind::Svgd => Some(match &fixed_kernel {
                Some(k) => k.at_sigma(sigma),
                None => {
                    let spec = spec.expect("checked above");
                    let reference = match &opts.reference {
                        ReferenceSource::Target { mixture, samples } => {
                            mixture.perturb(sigma)?.sample_with(*samples, &mut reference_rng)?
                        }
                        ReferenceSource::Particles => x.clone(),
                    };
                    condition_at_level(spec, Some(level), sigma, &reference)?
                }
            }),
        };
        for iteration in 0..cfg.steps {
            let next = match &kernel {
                Some(k) => svgd_step(&x, k, s, sigma, cfg.beta, eta),
                None => sgld_step(&x, s, sigma, eta, cfg.alpha, &mut rng),
            };
            let next = next.map_err(|e| Error::Diverged {
                level,
                iteration,
                reason: e.to_string(),
            })?;
            check_particles(&next).map_err(|reason| Error::Diverged {
                level,
                iteration,
                reason,
            })?;
            x = next;
        }
        trace.push(LevelRecord {
            level,
            sigma,
            eta,
            kind: level_kind,
            gamma: kernel.as_ref().map(|k| k.gamma()),
            median: kernel.as_ref().map(|k| k.median()),
            max_norm: x.max_norm(),
            snapshot: opts.keep_snapshots.then(|| x.clone()),
        });
    }
    Ok(AnnealOutcome { particles: x, trace })
}

/// How the starting particles are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    UniformBox { low: f64, high: f64 },
    Gaussian { scale: f64 },
    FromFile { path: PathBuf },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::UniformBox { low: -8.0, high: 8.0 }
    }
}

pub fn init_particles(mode: &InitMode, n: usize, d: usize, seed: u64) -> Result<ParticleSet> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidParameter("need n >= 1 and d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        InitMode::UniformBox { low, high } => {
            if !(low < high && low.is_finite() && high.is_finite()) {
                return Err(Error::InvalidParameter(format!("bad box [{low}, {high}]")));
            }
            let data = Array2::from_shape_simple_fn((n, d), || rng.gen_range(*low..*high));
            ParticleSet::new(data)
        }
        InitMode::Gaussian { scale } => {
            if !(*scale >= 0.0 && scale.is_finite()) {
                return Err(Error::InvalidParameter(format!("bad init scale {scale}")));
            }
            let data = Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal));
            ParticleSet::new(data)
        }
        InitMode::FromFile { path } => {
            let (ps, _) = ParticleSet::load(path)?;
            check_dim(n, ps.len())?;
            check_dim(d, ps.dim())?;
            Ok(ps)
        }
    }
}

/// Persists every snapshot held by `trace` as `level_<l>.bin` under `dir`.
pub fn save_trace(trace: &[LevelRecord], dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for rec in trace {
        if let Some(ps) = &rec.snapshot {
            let path = dir.join(format!("level_{:02}.bin", rec.level));
            ps.save(
                &path,
                SnapshotInfo {
                    level: Some(rec.level),
                    sigma: Some(rec.sigma),
                },
            )?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests;
