//! Sample-quality metrics: MMD, kernelized Stein discrepancy, kNN precision/recall
//! and mode occupancy.
//!
//! Pairwise sums are accumulated over sorted terms so that every statistic is
//! exactly symmetric in its arguments and invariant to particle order.

use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianMixture, ParticleSet};
use crate::error::{check_dim, Error, Result};
use crate::kernels::{median_in_place, sq_dist, ConditionedKernel};
use crate::samplers::ScoreSource;

/// RBF bandwidth for MMD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "gamma")]
pub enum Bandwidth {
    /// `γ = 1 / (2 med²)` with `med` the median distance of the pooled sample.
    #[default]
    Median,
    /// `k(x, y) = exp(-γ ‖x − y‖²)` with the given `γ`.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    /// U-statistic, self-pairs excluded.
    #[default]
    Unbiased,
    /// V-statistic, self-pairs included.
    Biased,
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

fn pooled_median(x: &ParticleSet, y: &ParticleSet) -> Result<f64> {
    let rows: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    let med = median_in_place(&mut dists);
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::Degenerate("pooled median distance is zero".into()))
    }
}

/// Resolves the RBF coefficient `γ` used by [`mmd_squared`].
pub fn mmd_gamma(x: &ParticleSet, y: &ParticleSet, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Median => {
            let med = pooled_median(x, y)?;
            Ok(1.0 / (2.0 * med * med))
        }
        Bandwidth::Fixed(g) if g > 0.0 && g.is_finite() => Ok(g),
        Bandwidth::Fixed(g) => Err(Error::InvalidParameter(format!("MMD gamma must be positive, got {g}"))),
    }
}

/// Unbiased squared MMD with an RBF kernel.
pub fn mmd_squared(x: &ParticleSet, y: &ParticleSet, bandwidth: Bandwidth) -> Result<f64> {
    mmd_squared_with(x, y, bandwidth, MmdEstimator::Unbiased)
}

pub fn mmd_squared_with(
    x: &ParticleSet,
    y: &ParticleSet,
    bandwidth: Bandwidth,
    estimator: MmdEstimator,
) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidParameter("MMD needs at least two points per sample".into()));
    }
    let gamma = mmd_gamma(x, y, bandwidth)?;
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &ParticleSet| -> f64 {
        let n = s.len();
        let mut terms = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                terms.push(k(s.row(i), s.row(j)));
            }
        }
        let off = 2.0 * sorted_sum(terms);
        match estimator {
            MmdEstimator::Unbiased => off / (n * (n - 1)) as f64,
            MmdEstimator::Biased => (off + n as f64) / (n * n) as f64,
        }
    };
    let mut cross = Vec::with_capacity(x.len() * y.len());
    for a in x.rows() {
        for b in y.rows() {
            cross.push(k(a, b));
        }
    }
    let cross = sorted_sum(cross) / (x.len() * y.len()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Stein kernel `u_p(x, y)`, arranged so that `u_p(x, y) == u_p(y, x)` bit for bit.
fn stein_kernel(k: &ConditionedKernel, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> f64 {
    let kv = k.eval(x, y).expect("validated inputs");
    let gx = k.grad_x_unchecked(x, y);
    let gy = k.grad_x_unchecked(y, x);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let ss = dot(sx, sy) * kv;
    let cross = dot(sx, &gy) + dot(sy, &gx);
    let trace = 0.5 * (k.cross_hessian_trace(x, y) + k.cross_hessian_trace(y, x));
    ss + cross + trace
}

/// U-statistic estimate of the squared kernelized Stein discrepancy between `x` and the score source.
pub fn ksd_squared(x: &ParticleSet, s: &ScoreSource, sigma: f64, k: &ConditionedKernel) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidParameter("KSD needs at least two points".into()));
    }
    let scores = s.scores(x, sigma)?;
    let scores = scores.as_slice().expect("standard layout");
    let d = x.dim();
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            terms.push(stein_kernel(
                k,
                x.row(i),
                x.row(j),
                &scores[i * d..(i + 1) * d],
                &scores[j * d..(j + 1) * d],
            ));
        }
    }
    Ok(2.0 * sorted_sum(terms) / (n * (n - 1)) as f64)
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii_sq(a: &ParticleSet, k: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(a.len());
    a.rows()
        .enumerate()
        .map(|(i, p)| {
            buf.clear();
            buf.extend(a.rows().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| sq_dist(p, q)));
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn coverage(manifold: &ParticleSet, radii_sq: &[f64], probes: &ParticleSet) -> f64 {
    let inside = probes
        .rows()
        .filter(|p| manifold.rows().zip(radii_sq).any(|(c, &r2)| sq_dist(p, c) <= r2))
        .count();
    inside as f64 / probes.len() as f64
}

/// kNN-manifold precision (generated points covered by the real manifold) and
/// recall (real points covered by the generated manifold). Boundary points count as inside.
pub fn improved_pr(real: &ParticleSet, gen: &ParticleSet, k_neighbors: usize) -> Result<(f64, f64)> {
    check_dim(real.dim(), gen.dim())?;
    if k_neighbors == 0 {
        return Err(Error::InvalidParameter("k_neighbors must be at least 1".into()));
    }
    if real.len() <= k_neighbors || gen.len() <= k_neighbors {
        return Err(Error::InvalidParameter(format!(
            "precision/recall with k = {k_neighbors} needs more than {k_neighbors} points per set"
        )));
    }
    let real_r = knn_radii_sq(real, k_neighbors);
    let gen_r = knn_radii_sq(gen, k_neighbors);
    Ok((coverage(real, &real_r, gen), coverage(gen, &gen_r, real)))
}

/// Ratio above which mixture modes count as well separated for occupancy.
pub const SEPARATION_THRESHOLD: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub fractions: Vec<f64>,
    pub warning: Option<String>,
}

/// Fraction of particles whose nearest component mean is each component's.
pub fn mode_occupancy(x: &ParticleSet, gm: &GaussianMixture) -> Result<Occupancy> {
    check_dim(gm.dim(), x.dim())?;
    let mut counts = vec![0usize; gm.components().len()];
    for p in x.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, comp) in gm.components().iter().enumerate() {
            let d2 = sq_dist(p, &comp.mean);
            if d2 < best_d {
                best_d = d2;
                best = c;
            }
        }
        counts[best] += 1;
    }
    let ratio = gm.separation_ratio();
    let warning = (ratio <= SEPARATION_THRESHOLD).then(|| {
        format!("modes are not well separated (distance / std = {ratio:.3}); occupancy is unreliable")
    });
    Ok(Occupancy {
        fractions: counts.iter().map(|&c| c as f64 / x.len() as f64).collect(),
        warning,
    })
}

/// One evaluated metric with enough configuration to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<(String, f64)>,
    pub params: Vec<(String, String)>,
    pub n_real: usize,
    pub n_gen: usize,
    pub seed: Option<u64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,statistic,value,n_real,n_gen,seed,params";

    pub fn csv_rows(&self) -> Vec<String> {
        let params = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        let seed = self.seed.map_or_else(String::new, |s| s.to_string());
        self.values
            .iter()
            .map(|(stat, v)| format!("{},{stat},{v},{},{},{seed},{params}", self.metric, self.n_real, self.n_gen))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}
