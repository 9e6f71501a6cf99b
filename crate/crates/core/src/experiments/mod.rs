//! Experiment runners for the toy studies and the command-line front end.
//!
//! Runners are pure functions of an [`ExperimentConfig`]; they return typed
//! results that convert into CSV [`Table`]s. Persisting those tables, particle
//! snapshots and checkpoints is left to the CLI.

pub mod cli;
mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{
    BetaSweepConfig, ExperimentConfig, KernelReference, MedianConfig, Method, MethodOverrides, ScheduleConfig, SweepConfig,
    TargetConfig, TargetKind, TrainSection,
};

use crate::distributions::{GaussianMixture, ParticleSet};
use crate::error::{Error, Result};
use crate::kernels::median_pairwise;
use crate::metrics::{improved_pr, mmd_squared, mode_occupancy, MetricReport};
use crate::samplers::{
    anneal, init_particles, AnnealOptions, AnnealOutcome, KernelConditioning, LoopKind, NoiseSchedule,
    ReferenceSource, ScoreSource,
};
use crate::score_learning::{
    self, default_bottleneck, ConditionalNet, DataSource, Model, Objective, OutputScaling, TrainConfig,
};

/// Fresh draws from the target used as the kernel-median reference.
pub const REFERENCE_SAMPLES: usize = 1024;

/// Seed streams derived from a run seed, kept apart so adding one consumer never shifts another.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

const STREAM_REAL: u64 = 1;
const STREAM_NULL: u64 = 2;
const STREAM_MEDIAN: u64 = 3;

/// CSV-ready table with a fixed column set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        std::fs::write(&path, self.to_csv())?;
        Ok(path)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Everything a run produced, with the config echo needed to replay it.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: String,
    pub tables: Vec<Table>,
    pub snapshots: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    /// Wall-clock seconds per labelled stage; not part of any CSV.
    pub timings: Vec<(String, f64)>,
    pub failures: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config: cfg.to_toml(),
            tables: Vec::new(),
            snapshots: Vec::new(),
            checkpoints: Vec::new(),
            timings: Vec::new(),
            failures: Vec::new(),
        }
    }

    /// Writes every table as `<name>.csv`, the config echo as `config.toml`, and `record.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for t in &self.tables {
            t.write(dir)?;
        }
        std::fs::write(dir.join("config.toml"), &self.config)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("record.json"), json)?;
        Ok(())
    }
}

/// Runs one method from `init` toward `target` with the configured schedule.
///
/// Non-annealed methods run `steps * levels` iterations at the smallest noise
/// level with the unperturbed score and a kernel fixed on target samples.
/// `learned` replaces the analytic score; `encoder` moves kernels to code space.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    target: &GaussianMixture,
    init: &ParticleSet,
    seed: u64,
    learned: Option<&ScoreSource>,
    encoder: Option<Arc<ConditionalNet>>,
) -> Result<AnnealOutcome> {
    run_method_with(cfg, method, target, init, seed, learned, encoder, false)
}

#[allow(clippy::too_many_arguments)]
fn run_method_with(
    cfg: &ExperimentConfig,
    method: Method,
    target: &GaussianMixture,
    init: &ParticleSet,
    seed: u64,
    learned: Option<&ScoreSource>,
    encoder: Option<Arc<ConditionalNet>>,
    keep_snapshots: bool,
) -> Result<AnnealOutcome> {
    let full = cfg.schedule.build()?;
    let mut sampler = cfg.sampler_for(method);
    sampler.n = init.len();
    sampler.seed = seed;
    let schedule = if method.is_annealed() {
        full
    } else {
        sampler.steps *= full.len();
        NoiseSchedule::new(vec![full.sigmas()[full.len() - 1]])?
    };
    let score = match learned {
        Some(s) => s.clone(),
        None => ScoreSource::Analytic {
            mixture: target.clone(),
            perturb: method.is_annealed(),
        },
    };
    let mut spec = cfg.kernel_for(method);
    if let Some(enc) = encoder {
        spec = spec.with_encoder(enc);
    }
    let opts = AnnealOptions {
        conditioning: if method == Method::NckSvgd {
            KernelConditioning::PerLevel
        } else {
            KernelConditioning::Fixed
        },
        reference: match cfg.kernel_reference {
            KernelReference::Target => ReferenceSource::Target {
                mixture: target.clone(),
                samples: REFERENCE_SAMPLES,
            },
            KernelReference::Particles => ReferenceSource::Particles,
        },
        switch_level: cfg.switch_level_for(method),
        keep_snapshots,
    };
    let kind = if method.uses_kernel() { LoopKind::Svgd } else { LoopKind::Sgld };
    anneal(kind, &schedule, &sampler, method.uses_kernel().then_some(&spec), &score, init, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Method name, or `null` for two independent target draws.
    pub method: String,
    pub d: usize,
    pub seed: u64,
    pub mmd2: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub timings: Vec<(String, f64)>,
}

impl SweepResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new("sweep", &["method", "d", "seed", "mmd2", "status"]);
        for r in &self.rows {
            let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("error: {}", e.replace(',', ";")));
            t.push(vec![r.method.clone(), r.d.to_string(), r.seed.to_string(), opt(r.mmd2), status]);
        }
        t
    }

    /// Mean MMD² of `method` at dimension `d` over the seeds that succeeded.
    pub fn mean(&self, method: &str, d: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.d == d)
            .filter_map(|r| r.mmd2)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// MMD² against real samples for every (dimension, seed, method) cell; failures are recorded, not fatal.
pub fn run_dimension_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let mut out = SweepResult::default();
    for &d in &cfg.sweep.dims {
        let target = cfg.target.build(d)?;
        for &seed in &cfg.seeds {
            let init = init_particles(&cfg.init, cfg.sampler.n, d, seed)?;
            let real = target.sample(cfg.sweep.real_samples, derived_seed(seed, STREAM_REAL))?;
            let null = target.sample(cfg.sweep.real_samples, derived_seed(seed, STREAM_NULL))?;
            out.rows.push(SweepRow {
                method: "null".into(),
                d,
                seed,
                mmd2: Some(mmd_squared(&real, &null, cfg.mmd_bandwidth)?),
                error: None,
            });
            for &method in &cfg.sweep.methods {
                let start = Instant::now();
                let result = run_method(cfg, method, &target, &init, seed, None, None)
                    .and_then(|o| mmd_squared(&o.particles, &real, cfg.mmd_bandwidth));
                out.timings
                    .push((format!("{method} d={d} seed={seed}"), start.elapsed().as_secs_f64()));
                let (mmd2, error) = match result {
                    Ok(v) => (Some(v), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                out.rows.push(SweepRow {
                    method: method.name().into(),
                    d,
                    seed,
                    mmd2,
                    error,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    pub d: usize,
    pub seed: u64,
    pub level: usize,
    pub sigma: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MedianResult {
    pub rows: Vec<MedianRow>,
}

impl MedianResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new("medians", &["d", "seed", "level", "sigma", "median"]);
        for r in &self.rows {
            t.push(vec![
                r.d.to_string(),
                r.seed.to_string(),
                r.level.to_string(),
                r.sigma.to_string(),
                r.median.to_string(),
            ]);
        }
        t
    }

    /// Per-level median over seeds at dimension `d`, ordered by level.
    pub fn seed_medians(&self, d: usize) -> Vec<f64> {
        let levels = self.rows.iter().filter(|r| r.d == d).map(|r| r.level + 1).max().unwrap_or(0);
        (0..levels)
            .map(|l| {
                let mut v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.d == d && r.level == l)
                    .map(|r| r.median)
                    .collect();
                crate::kernels::median_in_place(&mut v)
            })
            .collect()
    }

    /// Ratio of the largest-noise to the smallest-noise seed median at dimension `d`.
    pub fn spread(&self, d: usize) -> f64 {
        let m = self.seed_medians(d);
        m[0] / m[m.len() - 1]
    }
}

/// Median pairwise distance of samples from each perturbed target, per dimension, level and seed.
pub fn run_median_diagnostic(cfg: &ExperimentConfig) -> Result<MedianResult> {
    let schedule = cfg.schedule.build()?;
    let mut out = MedianResult::default();
    for &d in &cfg.median.dims {
        let target = cfg.target.build(d)?;
        for &seed in &cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, STREAM_MEDIAN));
            for (level, &sigma) in schedule.sigmas().iter().enumerate() {
                let sample = target.perturb(sigma)?.sample_with(cfg.median.samples, &mut rng)?;
                out.rows.push(MedianRow {
                    d,
                    seed,
                    level,
                    sigma,
                    median: median_pairwise(&sample)?,
                });
            }
        }
    }
    Ok(out)
}

fn working_dim(cfg: &ExperimentConfig) -> usize {
    cfg.target.native_dim().unwrap_or(cfg.dim)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyRow {
    pub method: String,
    pub seed: u64,
    pub component: usize,
    pub weight: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default)]
pub struct WeightRecoveryResult {
    pub rows: Vec<OccupancyRow>,
    pub particles: Vec<(Method, u64, ParticleSet)>,
    pub warnings: Vec<String>,
}

impl WeightRecoveryResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new("occupancy", &["method", "seed", "component", "weight", "fraction"]);
        for r in &self.rows {
            t.push(vec![
                r.method.clone(),
                r.seed.to_string(),
                r.component.to_string(),
                r.weight.to_string(),
                r.fraction.to_string(),
            ]);
        }
        t
    }

    pub fn fraction(&self, method: Method, seed: u64, component: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method.name() && r.seed == seed && r.component == component)
            .map(|r| r.fraction)
    }
}

/// Vanilla SVGD against NCK-SVGD from the same initial particles, with analytic or learned scores.
pub fn run_weight_recovery(cfg: &ExperimentConfig, learned: Option<&ScoreSource>) -> Result<WeightRecoveryResult> {
    let d = working_dim(cfg);
    let target = cfg.target.build(d)?;
    let weights = target.normalized_weights();
    let mut out = WeightRecoveryResult::default();
    for &seed in &cfg.seeds {
        let init = init_particles(&cfg.init, cfg.sampler.n, d, seed)?;
        for method in [Method::Svgd, Method::NckSvgd] {
            let outcome = run_method(cfg, method, &target, &init, seed, learned, None)?;
            let occ = mode_occupancy(&outcome.particles, &target)?;
            if let Some(w) = occ.warning {
                out.warnings.push(w);
            }
            for (c, (&w, &f)) in weights.iter().zip(&occ.fractions).enumerate() {
                out.rows.push(OccupancyRow {
                    method: method.name().into(),
                    seed,
                    component: c,
                    weight: w,
                    fraction: f,
                });
            }
            out.particles.push((method, seed, outcome.particles));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaRow {
    pub beta: f64,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub occupancy: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BetaSweepResult {
    pub rows: Vec<BetaRow>,
    /// `(beta, x, y, density)` of the normalized tempered target on the configured grid.
    pub grid: Vec<(f64, f64, f64, f64)>,
}

impl BetaSweepResult {
    pub fn tables(&self) -> Vec<Table> {
        let k = self.rows.first().map_or(0, |r| r.occupancy.len());
        let mut cols = vec!["beta".to_string(), "seed".into(), "precision".into(), "recall".into()];
        cols.extend((0..k).map(|c| format!("occupancy_{c}")));
        let mut t = Table {
            name: "beta_sweep".into(),
            columns: cols,
            rows: Vec::new(),
        };
        for r in &self.rows {
            let mut row = vec![r.beta.to_string(), r.seed.to_string(), r.precision.to_string(), r.recall.to_string()];
            row.extend(r.occupancy.iter().map(|o| o.to_string()));
            t.push(row);
        }
        let mut g = Table::new("density_grid", &["beta", "x", "y", "density"]);
        for &(b, x, y, p) in &self.grid {
            g.push(vec![b.to_string(), x.to_string(), y.to_string(), p.to_string()]);
        }
        vec![t, g]
    }

    pub fn row(&self, beta: f64, seed: u64) -> Option<&BetaRow> {
        self.rows.iter().find(|r| r.beta == beta && r.seed == seed)
    }
}

/// Normalized `p^{1/β}` on an `points x points` grid over `[low, high]²` (2-d targets only).
pub fn tempered_density_grid(
    target: &GaussianMixture,
    beta: f64,
    low: f64,
    high: f64,
    points: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    if target.dim() != 2 {
        return Err(Error::InvalidParameter("density grids need a 2-d target".into()));
    }
    if points < 2 || !(low < high) {
        return Err(Error::InvalidParameter("density grid needs at least two points per side".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let step = (high - low) / (points - 1) as f64;
    let mut cells = Vec::with_capacity(points * points);
    for i in 0..points {
        for j in 0..points {
            let (x, y) = (low + i as f64 * step, low + j as f64 * step);
            cells.push((x, y, target.tempered_log_density(&[x, y], beta)?));
        }
    }
    let max = cells.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = cells.iter().map(|c| (c.2 - max).exp()).sum::<f64>() * step * step;
    Ok(cells.into_iter().map(|(x, y, l)| (x, y, (l - max).exp() / total)).collect())
}

/// NCK-SVGD at each β of the sweep, scored by kNN precision/recall and mode occupancy.
pub fn run_beta_sweep(cfg: &ExperimentConfig) -> Result<BetaSweepResult> {
    let d = working_dim(cfg);
    let target = cfg.target.build(d)?;
    let bs = &cfg.beta_sweep;
    let mut out = BetaSweepResult::default();
    for &seed in &cfg.seeds {
        let init = init_particles(&cfg.init, cfg.sampler.n, d, seed)?;
        let real = target.sample(bs.real_samples, derived_seed(seed, STREAM_REAL))?;
        for &beta in &bs.betas {
            let mut swept = cfg.clone();
            swept.methods.entry(Method::NckSvgd).or_default().beta = Some(beta);
            let outcome = run_method(&swept, Method::NckSvgd, &target, &init, seed, None, None)?;
            let (precision, recall) = improved_pr(&real, &outcome.particles, bs.k_neighbors)?;
            let occ = mode_occupancy(&outcome.particles, &target)?;
            out.rows.push(BetaRow {
                beta,
                seed,
                precision,
                recall,
                occupancy: occ.fractions,
            });
        }
    }
    if d == 2 {
        for &beta in &bs.betas {
            for (x, y, p) in tempered_density_grid(&target, beta, bs.grid_low, bs.grid_high, bs.grid_points)? {
                out.grid.push((beta, x, y, p));
            }
        }
    }
    Ok(out)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        batch_size: cfg.train.batch_size,
        steps: cfg.train.steps,
        learning_rate: cfg.train.learning_rate,
        optimizer: cfg.train.optimizer,
        seed,
        schedule: cfg.schedule.build()?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainScoreResult {
    pub net: ConditionalNet,
    pub losses: Vec<f64>,
    /// Mean Euclidean error against the analytic perturbed score on the evaluation grid, per level.
    pub grid_errors: Vec<(f64, f64)>,
}

impl TrainScoreResult {
    pub fn tables(&self) -> Vec<Table> {
        let mut loss = Table::new("loss", &["step", "loss"]);
        for (i, l) in self.losses.iter().enumerate() {
            loss.push(vec![i.to_string(), l.to_string()]);
        }
        let mut err = Table::new("score_error", &["sigma", "mean_error"]);
        for (s, e) in &self.grid_errors {
            err.push(vec![s.to_string(), e.to_string()]);
        }
        vec![loss, err]
    }
}

/// Evenly spaced `points x points` grid over `[low, high]²`.
pub fn square_grid(low: f64, high: f64, points: usize) -> Result<ParticleSet> {
    if points < 2 {
        return Err(Error::InvalidParameter("grid needs at least two points per side".into()));
    }
    let step = (high - low) / (points - 1) as f64;
    let mut flat = Vec::with_capacity(points * points * 2);
    for i in 0..points {
        for j in 0..points {
            flat.push(low + i as f64 * step);
            flat.push(low + j as f64 * step);
        }
    }
    ParticleSet::from_flat(points * points, 2, flat)
}

/// Trains a noise-conditional score network with the multi-level objective on the configured target.
pub fn run_train_score(cfg: &ExperimentConfig, seed: u64) -> Result<TrainScoreResult> {
    let d = working_dim(cfg);
    let target = cfg.target.build(d)?;
    let scaling = if cfg.train.inverse_sigma_output {
        OutputScaling::InverseSigma
    } else {
        OutputScaling::None
    };
    let net = ConditionalNet::mlp(d, &cfg.train.hidden, d, scaling, seed)?;
    let tc = train_config(cfg, seed)?;
    let outcome = score_learning::train(Objective::Ncsn, Model::Score(net), &DataSource::Mixture(target.clone()), &tc)?;
    let Model::Score(net) = outcome.model else {
        unreachable!("score objective returns a score model")
    };
    let mut grid_errors = Vec::new();
    if d == 2 {
        let grid = square_grid(cfg.train.eval_grid_low, cfg.train.eval_grid_high, cfg.train.eval_grid_points)?;
        for &sigma in tc.schedule.sigmas() {
            let perturbed = target.perturb(sigma)?;
            grid_errors.push((sigma, score_learning::mean_score_error(&net, &grid, sigma, |x| perturbed.score(x))?));
        }
    }
    Ok(TrainScoreResult {
        net,
        losses: outcome.losses,
        grid_errors,
    })
}

#[derive(Debug, Clone)]
pub struct TrainKernelResult {
    pub encoder: ConditionalNet,
    pub decoder: ConditionalNet,
    pub losses: Vec<f64>,
}

/// Trains the noise-conditional autoencoder whose encoder serves code-space kernels.
pub fn run_train_kernel(cfg: &ExperimentConfig, seed: u64) -> Result<TrainKernelResult> {
    let d = working_dim(cfg);
    let target = cfg.target.build(d)?;
    let h = cfg.train.bottleneck.unwrap_or_else(|| default_bottleneck(d));
    let encoder = ConditionalNet::mlp(d, &cfg.train.hidden, h, OutputScaling::None, seed)?;
    let decoder = ConditionalNet::mlp(h, &cfg.train.hidden, d, OutputScaling::None, seed.wrapping_add(1))?;
    let tc = train_config(cfg, seed)?;
    let outcome = score_learning::train(
        Objective::Ncae,
        Model::Autoencoder { encoder, decoder },
        &DataSource::Mixture(target),
        &tc,
    )?;
    let Model::Autoencoder { encoder, decoder } = outcome.model else {
        unreachable!("autoencoder objective returns an autoencoder")
    };
    Ok(TrainKernelResult {
        encoder,
        decoder,
        losses: outcome.losses,
    })
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub outcome: AnnealOutcome,
    pub reports: Vec<MetricReport>,
}

impl SampleResult {
    pub fn tables(&self) -> Vec<Table> {
        let mut m = Table::new("metrics", &MetricReport::CSV_HEADER.split(',').collect::<Vec<_>>());
        for r in &self.reports {
            for line in r.csv_rows() {
                m.push(line.splitn(7, ',').map(String::from).collect());
            }
        }
        let mut t = Table::new("trace", &["level", "sigma", "eta", "loop", "gamma", "median", "max_norm"]);
        for r in &self.outcome.trace {
            t.push(vec![
                r.level.to_string(),
                r.sigma.to_string(),
                r.eta.to_string(),
                match r.kind {
                    LoopKind::Svgd => "svgd".into(),
                    LoopKind::Sgld => "sgld".into(),
                },
                opt(r.gamma),
                opt(r.median),
                r.max_norm.to_string(),
            ]);
        }
        vec![m, t]
    }
}

/// One sampling run with MMD² against fresh target samples and mode occupancy.
pub fn run_sample(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    learned: Option<&ScoreSource>,
    encoder: Option<Arc<ConditionalNet>>,
    keep_snapshots: bool,
) -> Result<SampleResult> {
    let d = working_dim(cfg);
    let target = cfg.target.build(d)?;
    let init = init_particles(&cfg.init, cfg.sampler.n, d, seed)?;
    let outcome = run_method_with(cfg, method, &target, &init, seed, learned, encoder, keep_snapshots)?;
    let real = target.sample(cfg.sweep.real_samples, derived_seed(seed, STREAM_REAL))?;
    let mmd = mmd_squared(&outcome.particles, &real, cfg.mmd_bandwidth)?;
    let occ = mode_occupancy(&outcome.particles, &target)?;
    let common = vec![("method".to_string(), method.name().to_string())];
    let reports = vec![
        MetricReport {
            metric: "mmd2".into(),
            values: vec![("value".into(), mmd)],
            params: [common.clone(), vec![("bandwidth".into(), format!("{:?}", cfg.mmd_bandwidth).to_lowercase())]]
                .concat(),
            n_real: real.len(),
            n_gen: outcome.particles.len(),
            seed: Some(seed),
        },
        MetricReport {
            metric: "occupancy".into(),
            values: occ
                .fractions
                .iter()
                .enumerate()
                .map(|(c, f)| (format!("component_{c}"), *f))
                .collect(),
            params: common,
            n_real: 0,
            n_gen: outcome.particles.len(),
            seed: Some(seed),
        },
    ];
    Ok(SampleResult { outcome, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
seeds = [0, 1]
[sampler]
n = 48
steps = 5
epsilon = 1.0
[schedule]
sigma_max = 10.0
sigma_min = 1.0
levels = 3
[sweep]
dims = [2, 3]
methods = ["a-svgd", "nck-svgd", "a-sgld"]
real_samples = 64
[median]
dims = [2, 8]
samples = 128
[beta_sweep]
betas = [0.5, 1.0]
k_neighbors = 3
real_samples = 64
grid_low = -6.0
grid_high = 6.0
grid_points = 5
"#,
        )
        .unwrap()
    }

    #[test]
    fn sweep_records_every_cell_and_is_reproducible() {
        let cfg = small_cfg();
        let a = run_dimension_sweep(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 4);
        assert!(a.rows.iter().all(|r| r.mmd2.is_some()));
        let b = run_dimension_sweep(&cfg).unwrap();
        assert_eq!(a.table().to_csv(), b.table().to_csv());
        assert!(a.mean("nck-svgd", 2).is_some());
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let mut cfg = small_cfg();
        cfg.sweep.methods = vec![Method::ASgld];
        cfg.methods.insert(
            Method::ASgld,
            MethodOverrides {
                epsilon: Some(1e9),
                ..Default::default()
            },
        );
        let r = run_dimension_sweep(&cfg).unwrap();
        let failed: Vec<_> = r.rows.iter().filter(|r| r.method == "a-sgld").collect();
        assert!(failed.iter().all(|r| r.error.is_some() && r.mmd2.is_none()));
        assert!(r.table().to_csv().contains("error: "));
    }

    #[test]
    fn medians_grow_with_noise() {
        let r = run_median_diagnostic(&small_cfg()).unwrap();
        for d in [2, 8] {
            let m = r.seed_medians(d);
            assert!(m.windows(2).all(|w| w[0] > w[1]));
        }
        assert!(r.spread(2) < r.spread(8));
    }

    #[test]
    fn density_grid_at_unit_beta_is_normalized_target() {
        let gm = GaussianMixture::four_mode();
        let grid = tempered_density_grid(&gm, 1.0, -6.0, 6.0, 7).unwrap();
        let step: f64 = 2.0;
        let raw: Vec<f64> = grid.iter().map(|&(x, y, _)| gm.log_density(&[x, y]).unwrap()).collect();
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = raw.iter().map(|l| (l - max).exp()).sum::<f64>() * step * step;
        for (&(_, _, p), l) in grid.iter().zip(&raw) {
            assert_eq!(p, (l - max).exp() / total);
        }
        let flat = tempered_density_grid(&gm, 1e6, -6.0, 6.0, 7).unwrap();
        let first = flat[0].2;
        assert!(flat.iter().all(|c| (c.2 - first).abs() < 1e-3 * first));
    }

    #[test]
    fn beta_sweep_emits_rows_and_grid() {
        let mut cfg = small_cfg();
        cfg.target.kind = TargetKind::FourMode;
        cfg.seeds = vec![0];
        let r = run_beta_sweep(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.grid.len(), 2 * 25);
        let tables = r.tables();
        assert_eq!(tables[0].columns.len(), 8);
        assert!(r.row(0.5, 0).is_some());
    }

    #[test]
    fn weight_recovery_reports_both_methods() {
        let mut cfg = small_cfg();
        cfg.seeds = vec![4];
        let r = run_weight_recovery(&cfg, None).unwrap();
        assert_eq!(r.rows.len(), 4);
        let total: f64 = (0..2).map(|c| r.fraction(Method::Svgd, 4, c).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(r.particles.len(), 2);
    }

    #[test]
    fn sample_reports_metrics_and_trace() {
        let cfg = small_cfg();
        let r = run_sample(&cfg, Method::NckSvgd, 3, None, None, false).unwrap();
        let tables = r.tables();
        assert_eq!(tables[0].rows.len(), 3);
        assert_eq!(tables[1].rows.len(), 3);
        assert!(r.outcome.trace.iter().all(|t| t.gamma.is_some()));
    }

    #[test]
    fn learned_score_and_code_space_runs() {
        let mut cfg = small_cfg();
        cfg.train.steps = 20;
        cfg.train.hidden = vec![8];
        let trained = run_train_score(&cfg, 0).unwrap();
        assert_eq!(trained.losses.len(), 20);
        assert_eq!(trained.grid_errors.len(), 3);
        let kernel = run_train_kernel(&cfg, 0).unwrap();
        assert_eq!(kernel.encoder.output_dim(), 1);
        let learned = ScoreSource::Learned(Arc::new(trained.net));
        let r = run_sample(&cfg, Method::NckSvgd, 0, Some(&learned), Some(Arc::new(kernel.encoder)), false).unwrap();
        assert_eq!(r.outcome.particles.len(), 48);
    }

    #[test]
    fn particle_reference_changes_kernel_medians() {
        let mut cfg = small_cfg();
        let a = run_sample(&cfg, Method::NckSvgd, 0, None, None, false).unwrap();
        cfg.kernel_reference = KernelReference::Particles;
        let b = run_sample(&cfg, Method::NckSvgd, 0, None, None, false).unwrap();
        assert_ne!(a.outcome.trace[0].median, b.outcome.trace[0].median);
    }

    #[test]
    fn tables_render_fixed_columns() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec!["1".into(), "0.5".into()]);
        assert_eq!(t.to_csv(), "a,b\n1,0.5\n");
    }
}
