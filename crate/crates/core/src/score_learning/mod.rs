//! Score networks, denoising objectives and the noise-conditional autoencoder.
//!
//! Every loss returns its value together with the exact parameter gradient
//! (flat, in the layout of [`FeedforwardNet::params`]).

mod net;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use net::{Activation, ConditionalNet, Conditioning, FeedforwardNet, Layer, OutputScaling};

use crate::distributions::{GaussianMixture, ParticleSet};
use crate::error::{check_dim, Error, Result};
use crate::samplers::NoiseSchedule;

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// Weighted denoising loss on pre-drawn noise: `½ mean_i w_i ‖s(x̃_i, σ_i) + z_i/σ_i‖²`.
fn weighted_dsm(
    net: &ConditionalNet,
    batch: &ParticleSet,
    z: &Array2<f64>,
    sigmas: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_dim(net.input_dim(), batch.dim())?;
    check_dim(net.input_dim(), net.output_dim())?;
    let b = batch.len() as f64;
    let mut noisy = batch.as_array().to_owned();
    for ((mut row, zr), &s) in noisy.rows_mut().into_iter().zip(z.rows()).zip(sigmas) {
        row.scaled_add(s, &zr);
    }
    let (tape, mut resid) = net.forward_tape(noisy.view(), sigmas);
    let mut loss = 0.0;
    for (((mut r, zr), &s), &w) in resid.rows_mut().into_iter().zip(z.rows()).zip(sigmas).zip(weights) {
        r.scaled_add(1.0 / s, &zr);
        loss += w * r.dot(&r);
        r *= w / b;
    }
    let mut grad = vec![0.0; net.net().num_params()];
    net.backward_tape(&tape, resid, sigmas, &mut grad);
    Ok((0.5 * loss / b, grad))
}

/// Denoising score matching at a single noise level.
pub fn dsm_loss<R: Rng + ?Sized>(
    net: &ConditionalNet,
    batch: &ParticleSet,
    sigma: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    check_sigma(sigma)?;
    let z = standard_normal(rng, batch.len(), batch.dim());
    let n = batch.len();
    weighted_dsm(net, batch, &z, &vec![sigma; n], &vec![1.0; n])
}

/// Draws the noise first and then one uniformly random level per example.
fn noise_and_levels<R: Rng + ?Sized>(
    rng: &mut R,
    batch: &ParticleSet,
    schedule: &NoiseSchedule,
) -> (Array2<f64>, Vec<f64>) {
    let z = standard_normal(rng, batch.len(), batch.dim());
    let sigmas = (0..batch.len())
        .map(|_| schedule.sigmas()[rng.gen_range(0..schedule.len())])
        .collect();
    (z, sigmas)
}

/// Multi-level objective: `σ_l²`-weighted denoising score matching with a random level per example.
pub fn ncsn_loss<R: Rng + ?Sized>(
    net: &ConditionalNet,
    batch: &ParticleSet,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let (z, sigmas) = noise_and_levels(rng, batch, schedule);
    let weights: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    weighted_dsm(net, batch, &z, &sigmas, &weights)
}

#[derive(Debug, Clone)]
pub struct AutoencoderLoss {
    pub loss: f64,
    pub encoder_grad: Vec<f64>,
    pub decoder_grad: Vec<f64>,
}

/// Denoising reconstruction `½ mean_i ‖D(E(x̃_i, σ_i), σ_i) − x_i‖² / σ_i²`.
pub fn ncae_loss<R: Rng + ?Sized>(
    encoder: &ConditionalNet,
    decoder: &ConditionalNet,
    batch: &ParticleSet,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<AutoencoderLoss> {
    let d = batch.dim();
    check_dim(d, encoder.input_dim())?;
    check_dim(encoder.output_dim(), decoder.input_dim())?;
    check_dim(d, decoder.output_dim())?;
    if encoder.output_dim() > d {
        return Err(Error::InvalidParameter(format!(
            "code width {} exceeds data dimension {d}",
            encoder.output_dim()
        )));
    }
    let (z, sigmas) = noise_and_levels(rng, batch, schedule);
    let b = batch.len() as f64;
    let x = batch.as_array();
    let mut noisy = x.to_owned();
    for ((mut row, zr), &s) in noisy.rows_mut().into_iter().zip(z.rows()).zip(&sigmas) {
        row.scaled_add(s, &zr);
    }
    let (enc_tape, codes) = encoder.forward_tape(noisy.view(), &sigmas);
    let (dec_tape, recon) = decoder.forward_tape(codes.view(), &sigmas);
    let mut resid = recon - x;
    let mut loss = 0.0;
    for (mut r, &s) in resid.rows_mut().into_iter().zip(&sigmas) {
        let w = 1.0 / (s * s);
        loss += w * r.dot(&r);
        r *= w / b;
    }
    let mut decoder_grad = vec![0.0; decoder.net().num_params()];
    let code_grad = decoder.backward_tape(&dec_tape, resid, &sigmas, &mut decoder_grad);
    let mut encoder_grad = vec![0.0; encoder.net().num_params()];
    encoder.backward_tape(&enc_tape, code_grad, &sigmas, &mut encoder_grad);
    Ok(AutoencoderLoss {
        loss: 0.5 * loss / b,
        encoder_grad,
        decoder_grad,
    })
}

/// Implicit score matching `mean_i [tr ∇_x s(x_i) + ½‖s(x_i)‖²]` for an unconditional `d → d` net.
pub fn score_matching_loss(net: &FeedforwardNet, batch: &ParticleSet) -> Result<(f64, Vec<f64>)> {
    check_dim(net.input_dim(), batch.dim())?;
    check_dim(net.input_dim(), net.output_dim())?;
    let b = batch.len() as f64;
    let tape = net.forward_tape(batch.as_array());
    let out = tape.output().clone();
    let half_sq = 0.5 * out.iter().map(|v| v * v).sum::<f64>();
    let mut grad = vec![0.0; net.num_params()];
    net.backward_tape(&tape, out / b, &mut grad);
    let trace = net.jacobian_trace_with_grad(batch.as_array(), 1.0 / b, &mut grad);
    Ok(((trace + half_sq) / b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub schedule: NoiseSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidParameter("batch size and step count must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Where training batches come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Mixture(GaussianMixture),
    /// Resampled with replacement.
    Samples(ParticleSet),
}

impl DataSource {
    pub fn dim(&self) -> usize {
        match self {
            DataSource::Mixture(gm) => gm.dim(),
            DataSource::Samples(ps) => ps.dim(),
        }
    }

    pub fn batch<R: Rng>(&self, size: usize, rng: &mut R) -> Result<ParticleSet> {
        match self {
            DataSource::Mixture(gm) => gm.sample_with(size, rng),
            DataSource::Samples(ps) => {
                let d = ps.dim();
                let mut flat = Vec::with_capacity(size * d);
                for _ in 0..size {
                    flat.extend_from_slice(ps.row(rng.gen_range(0..ps.len())));
                }
                ParticleSet::from_flat(size, d, flat)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Single-level denoising score matching.
    Dsm { sigma: f64 },
    Ncsn,
    Ncae,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Score(ConditionalNet),
    Autoencoder {
        encoder: ConditionalNet,
        decoder: ConditionalNet,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` optimizer updates of `objective` starting from `model`.
pub fn train(objective: Objective, model: Model, data: &DataSource, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    match (objective, model) {
        (Objective::Dsm { .. } | Objective::Ncsn, Model::Score(mut net)) => {
            check_dim(net.input_dim(), data.dim())?;
            let mut params = net.net().params();
            let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
            for step in 0..cfg.steps {
                let batch = data.batch(cfg.batch_size, &mut rng)?;
                let (loss, grad) = match objective {
                    Objective::Dsm { sigma } => dsm_loss(&net, &batch, sigma, &mut rng)?,
                    _ => ncsn_loss(&net, &batch, &cfg.schedule, &mut rng)?,
                };
                guard(step, loss, &grad)?;
                losses.push(loss);
                opt.step(&mut params, &grad);
                net.net_mut().set_params(&params)?;
            }
            Ok(TrainOutcome {
                model: Model::Score(net),
                losses,
            })
        }
        (Objective::Ncae, Model::Autoencoder { mut encoder, mut decoder }) => {
            check_dim(encoder.input_dim(), data.dim())?;
            let mut pe = encoder.net().params();
            let mut pd = decoder.net().params();
            let mut opt_e = Optimizer::new(cfg.optimizer, cfg.learning_rate, pe.len());
            let mut opt_d = Optimizer::new(cfg.optimizer, cfg.learning_rate, pd.len());
            for step in 0..cfg.steps {
                let batch = data.batch(cfg.batch_size, &mut rng)?;
                let out = ncae_loss(&encoder, &decoder, &batch, &cfg.schedule, &mut rng)?;
                guard(step, out.loss, &out.encoder_grad)?;
                guard(step, out.loss, &out.decoder_grad)?;
                losses.push(out.loss);
                opt_e.step(&mut pe, &out.encoder_grad);
                opt_d.step(&mut pd, &out.decoder_grad);
                encoder.net_mut().set_params(&pe)?;
                decoder.net_mut().set_params(&pd)?;
            }
            Ok(TrainOutcome {
                model: Model::Autoencoder { encoder, decoder },
                losses,
            })
        }
        (objective, _) => Err(Error::InvalidParameter(format!(
            "objective {objective:?} does not match the supplied model"
        ))),
    }
}

fn guard(step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { step, loss })
    }
}

/// Default code width for a `d`-dimensional encoder: `ceil(d / 4)`.
pub fn default_bottleneck(d: usize) -> usize {
    d.div_ceil(4).max(1)
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Mean Euclidean distance between a learned score and `reference` over `points` at level `sigma`.
pub fn mean_score_error(
    net: &ConditionalNet,
    points: &ParticleSet,
    sigma: f64,
    reference: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let learned = net.forward_batch(points.as_array(), sigma);
    let mut total = 0.0;
    for (row, l) in points.rows().zip(learned.axis_iter(Axis(0))) {
        let r = reference(row)?;
        total += r.iter().zip(l.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / points.len() as f64)
}
