//! TOML experiment configuration.
//!
//! Every section is optional; missing keys take the toy-protocol defaults.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! output_dir = "runs/sweep"
//!
//! [target]
//! kind = "imbalanced_pair"      # or "four_mode", "custom"
//! offset = 5.0
//! scaled_means = false          # ±offset / sqrt(d / 2) per coordinate
//!
//! [schedule]
//! sigma_max = 20.0
//! sigma_min = 1.0
//! levels = 10
//!
//! [init]
//! mode = "uniform_box"
//! low = -8.0
//! high = 8.0
//!
//! [sampler]
//! n = 1024
//! steps = 100
//! epsilon = 1.0
//! beta = 1.0
//! alpha = 1.0
//!
//! [kernel]
//! family = "rbf"
//! gamma0 = 1.0
//! tau0 = -0.5
//! bandwidth_rule = "squared"
//!
//! [methods.nck-svgd]
//! epsilon = 8.0
//! gamma0 = 4.0
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{Component, GaussianMixture};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::metrics::Bandwidth;
use crate::samplers::{InitMode, NoiseSchedule, SamplerConfig};
use crate::score_learning::OptimizerKind;

/// Sampling algorithms compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sgld")]
    Sgld,
    #[serde(rename = "svgd")]
    Svgd,
    #[serde(rename = "a-sgld")]
    ASgld,
    #[serde(rename = "a-svgd")]
    ASvgd,
    #[serde(rename = "nck-svgd")]
    NckSvgd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Sgld, Method::Svgd, Method::ASgld, Method::ASvgd, Method::NckSvgd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgld => "sgld",
            Method::Svgd => "svgd",
            Method::ASgld => "a-sgld",
            Method::ASvgd => "a-svgd",
            Method::NckSvgd => "nck-svgd",
        }
    }

    pub fn is_annealed(self) -> bool {
        matches!(self, Method::ASgld | Method::ASvgd | Method::NckSvgd)
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, Method::Svgd | Method::ASvgd | Method::NckSvgd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    ImbalancedPair,
    FourMode,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(default)]
    pub kind: TargetKind,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default)]
    pub scaled_means: bool,
    #[serde(default)]
    pub components: Vec<Component>,
}

fn default_offset() -> f64 {
    5.0
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            kind: TargetKind::default(),
            offset: default_offset(),
            scaled_means: false,
            components: Vec::new(),
        }
    }
}

impl TargetConfig {
    /// The target in dimension `d`; fixed-dimension targets reject other `d`.
    pub fn build(&self, d: usize) -> Result<GaussianMixture> {
        match self.kind {
            TargetKind::ImbalancedPair => {
                if d == 0 {
                    return Err(Error::Config("dimension must be positive".into()));
                }
                let offset = if self.scaled_means {
                    self.offset / (d as f64 / 2.0).sqrt()
                } else {
                    self.offset
                };
                Ok(GaussianMixture::imbalanced_pair_with_offset(d, offset))
            }
            TargetKind::FourMode => {
                if d != 2 {
                    return Err(Error::Config(format!("four-mode target is 2-d, asked for d = {d}")));
                }
                Ok(GaussianMixture::four_mode())
            }
            TargetKind::Custom => {
                let gm = GaussianMixture::new(self.components.clone())?;
                if gm.dim() != d {
                    return Err(Error::Config(format!(
                        "custom target has dimension {}, asked for d = {d}",
                        gm.dim()
                    )));
                }
                Ok(gm)
            }
        }
    }

    /// Natural dimension for fixed-dimension targets.
    pub fn native_dim(&self) -> Option<usize> {
        match self.kind {
            TargetKind::ImbalancedPair => None,
            TargetKind::FourMode => Some(2),
            TargetKind::Custom => self.components.first().map(|c| c.mean.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_max: 20.0,
            sigma_min: 1.0,
            levels: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::geometric(self.sigma_max, self.sigma_min, self.levels)
    }
}

/// Per-method overrides of the shared sampler and kernel settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MethodOverrides {
    pub epsilon: Option<f64>,
    pub steps: Option<usize>,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma0: Option<f64>,
    /// Langevin warm start for levels `0..=switch_level`.
    pub switch_level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub dims: Vec<usize>,
    pub methods: Vec<Method>,
    pub real_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 4, 8, 16, 32, 64],
            methods: vec![Method::ASvgd, Method::NckSvgd],
            real_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MedianConfig {
    pub dims: Vec<usize>,
    pub samples: usize,
}

impl Default for MedianConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 4, 8, 16, 32, 64],
            samples: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSweepConfig {
    pub betas: Vec<f64>,
    pub k_neighbors: usize,
    pub real_samples: usize,
    /// Box `[low, high]²` and points per side for the tempered density grid.
    pub grid_low: f64,
    pub grid_high: f64,
    pub grid_points: usize,
}

impl Default for BetaSweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.05, 0.5, 1.0, 2.0, 4.0],
            k_neighbors: 3,
            real_samples: 1024,
            grid_low: -10.0,
            grid_high: 10.0,
            grid_points: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    /// Code width for the autoencoder; defaults to `ceil(d / 4)`.
    pub bottleneck: Option<usize>,
    pub inverse_sigma_output: bool,
    /// Grid `[low, high]²` with this many points per side for score-error evaluation.
    pub eval_grid_points: usize,
    pub eval_grid_low: f64,
    pub eval_grid_high: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 20_000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            hidden: vec![64, 64],
            bottleneck: None,
            inverse_sigma_output: true,
            eval_grid_points: 20,
            eval_grid_low: -8.0,
            eval_grid_high: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelReference {
    /// Fresh draws from the (perturbed) target.
    #[default]
    Target,
    /// The current particle positions.
    Particles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Dimension for single-dimension commands when the target does not fix it.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub methods: BTreeMap<Method, MethodOverrides>,
    /// Ignore per-method step overrides so every method spends the same number of score evaluations.
    #[serde(default)]
    pub matched_compute: bool,
    /// Where per-level kernel medians come from.
    #[serde(default)]
    pub kernel_reference: KernelReference,
    #[serde(default)]
    pub mmd_bandwidth: Bandwidth,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub median: MedianConfig,
    #[serde(default)]
    pub beta_sweep: BetaSweepConfig,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_dim() -> usize {
    2
}

fn default_kernel() -> KernelSpec {
    KernelSpec::rbf(1.0)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.schedule.build()?;
        self.sampler.validate()?;
        self.kernel.validate()?;
        for m in self.methods.keys() {
            self.sampler_for(*m).validate()?;
        }
        Ok(())
    }

    /// Shared sampler settings with the method's overrides applied.
    pub fn sampler_for(&self, method: Method) -> SamplerConfig {
        let mut cfg = self.sampler;
        if let Some(o) = self.methods.get(&method) {
            if let Some(v) = o.epsilon {
                cfg.epsilon = v;
            }
            if let (Some(v), false) = (o.steps, self.matched_compute) {
                cfg.steps = v;
            }
            if let Some(v) = o.beta {
                cfg.beta = v;
            }
            if let Some(v) = o.alpha {
                cfg.alpha = v;
            }
        }
        cfg
    }

    pub fn kernel_for(&self, method: Method) -> KernelSpec {
        let mut spec = self.kernel.clone();
        if let Some(g) = self.methods.get(&method).and_then(|o| o.gamma0) {
            spec.gamma0 = g;
        }
        spec
    }

    pub fn switch_level_for(&self, method: Method) -> Option<usize> {
        self.methods.get(&method).and_then(|o| o.switch_level)
    }
}
