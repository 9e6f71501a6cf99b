//! `ncksvgd` command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    run_beta_sweep, run_dimension_sweep, run_median_diagnostic, run_sample, run_train_kernel, run_train_score,
    run_weight_recovery, tempered_density_grid, ExperimentConfig, Method, RunRecord, Table,
};
use crate::distributions::{ParticleSet, SnapshotInfo};
use crate::error::{Error, Result};
use crate::kernels::condition;
use crate::metrics::{improved_pr, ksd_squared, mmd_squared, Bandwidth};
use crate::samplers::{save_trace, ScoreSource};
use crate::score_learning::ConditionalNet;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "NCKSVGD_OUT_DIR";

/// Column set printed by `eval`.
pub const EVAL_HEADER: &str = "metric,mmd2,ksd2,precision,recall,n_real,n_gen,params";

#[derive(Parser, Debug)]
#[command(name = "ncksvgd", version, about = "Noise-conditional kernel SVGD samplers and toy benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Particle count override.
    #[arg(long)]
    n: Option<usize>,
    /// Iterations per noise level override.
    #[arg(long)]
    steps: Option<usize>,
    /// Dimension override for single-dimension commands.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// MMD² against the target across dimensions.
    SweepDim(Common),
    /// Median pairwise distance of perturbed targets per level.
    MedianDiag(Common),
    /// Mode occupancy of SVGD and NCK-SVGD on an imbalanced mixture.
    WeightRecovery {
        #[command(flatten)]
        common: Common,
        /// Learned score checkpoint used in place of the analytic score.
        #[arg(long)]
        score_net: Option<PathBuf>,
    },
    /// Precision/recall and occupancy across entropy weights.
    BetaSweep(Common),
    /// Train a noise-conditional score network.
    TrainScore(Common),
    /// Train the noise-conditional autoencoder for code-space kernels.
    TrainKernel(Common),
    /// Run one sampler and write particles.bin and metrics.csv.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        score_net: Option<PathBuf>,
        /// Encoder checkpoint; moves kernels to its code space.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Also write the particles after every level.
        #[arg(long)]
        snapshots: bool,
    },
    /// Compare two particle files; prints one CSV row.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, value_enum)]
        metric: EvalMetric,
        /// Config supplying the target and kernel for ksd.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Neighbours for ipr.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Fixed RBF precision for mmd instead of the median heuristic.
        #[arg(long)]
        gamma: Option<f64>,
        /// Noise level of the score for ksd; defaults to the smallest configured level.
        #[arg(long)]
        sigma: Option<f64>,
        /// Print the column header first.
        #[arg(long)]
        header: bool,
    },
    /// Convert particles to CSV and emit the tempered density grid.
    PlotData {
        #[command(flatten)]
        common: Common,
        /// Particle file to convert.
        #[arg(long)]
        particles: Option<PathBuf>,
        /// Entropy weight of the density grid.
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMetric {
    Mmd,
    Ipr,
    Ksd,
}

impl clap::ValueEnum for Method {
    fn value_variants<'a>() -> &'a [Self] {
        &Method::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Parses `argv` (program name first), runs the subcommand, and returns the process exit status.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 2;
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(n) = common.n {
        cfg.sampler.n = n;
    }
    if let Some(t) = common.steps {
        cfg.sampler.steps = t;
    }
    if let Some(d) = common.dim {
        cfg.dim = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--out`, then the config's `output_dir`, then `$NCKSVGD_OUT_DIR/<command>`, then `runs/<command>`.
fn resolve_out_dir(common: &Common, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(p) = &common.out {
        return p.clone();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::InvalidParameter(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !overwrite {
            return Err(Error::InvalidParameter(format!(
                "output directory {} is not empty; pass --overwrite to reuse it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

struct Session {
    cfg: ExperimentConfig,
    dir: PathBuf,
    record: RunRecord,
    start: Instant,
}

impl Session {
    fn open(common: &Common, command: &str) -> Result<Self> {
        let cfg = load_config(common)?;
        let dir = resolve_out_dir(common, &cfg, command);
        prepare_out_dir(&dir, common.overwrite)?;
        let record = RunRecord::new(command, &cfg);
        Ok(Self {
            cfg,
            dir,
            record,
            start: Instant::now(),
        })
    }

    fn tables(&mut self, tables: impl IntoIterator<Item = Table>) {
        self.record.tables.extend(tables);
    }

    fn finish(mut self) -> Result<()> {
        self.record.timings.push(("total".into(), self.start.elapsed().as_secs_f64()));
        self.record.write(&self.dir)?;
        eprintln!("wrote {}", self.dir.display());
        Ok(())
    }
}

fn load_score(path: &Option<PathBuf>) -> Result<Option<ScoreSource>> {
    path.as_ref()
        .map(|p| ConditionalNet::load(p).map(|n| ScoreSource::Learned(Arc::new(n))))
        .transpose()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SweepDim(common) => {
            let mut s = Session::open(&common, "sweep-dim")?;
            let r = run_dimension_sweep(&s.cfg)?;
            s.record.failures.extend(r.rows.iter().filter_map(|row| {
                row.error.as_ref().map(|e| format!("{} d={} seed={}: {e}", row.method, row.d, row.seed))
            }));
            s.record.timings.extend(r.timings.iter().cloned());
            s.tables([r.table()]);
            s.finish()
        }
        Command::MedianDiag(common) => {
            let mut s = Session::open(&common, "median-diag")?;
            let r = run_median_diagnostic(&s.cfg)?;
            s.tables([r.table()]);
            s.finish()
        }
        Command::WeightRecovery { common, score_net } => {
            let mut s = Session::open(&common, "weight-recovery")?;
            let learned = load_score(&score_net)?;
            let r = run_weight_recovery(&s.cfg, learned.as_ref())?;
            for (method, seed, ps) in &r.particles {
                let path = s.dir.join(format!("particles_{}_seed{seed}.bin", method.name()));
                ps.save(&path, SnapshotInfo::default())?;
                s.record.snapshots.push(path);
            }
            s.record.failures.extend(r.warnings.iter().cloned());
            s.tables([r.table()]);
            s.finish()
        }
        Command::BetaSweep(common) => {
            let mut s = Session::open(&common, "beta-sweep")?;
            let r = run_beta_sweep(&s.cfg)?;
            s.tables(r.tables());
            s.finish()
        }
        Command::TrainScore(common) => {
            let mut s = Session::open(&common, "train-score")?;
            let seed = s.cfg.seeds[0];
            let r = run_train_score(&s.cfg, seed)?;
            let path = s.dir.join("score_net.ckpt");
            r.net.save(&path)?;
            s.record.checkpoints.push(path);
            s.tables(r.tables());
            s.finish()
        }
        Command::TrainKernel(common) => {
            let mut s = Session::open(&common, "train-kernel")?;
            let seed = s.cfg.seeds[0];
            let r = run_train_kernel(&s.cfg, seed)?;
            for (name, net) in [("encoder.ckpt", &r.encoder), ("decoder.ckpt", &r.decoder)] {
                let path = s.dir.join(name);
                net.save(&path)?;
                s.record.checkpoints.push(path);
            }
            let mut loss = Table::new("loss", &["step", "loss"]);
            for (i, l) in r.losses.iter().enumerate() {
                loss.push(vec![i.to_string(), l.to_string()]);
            }
            s.tables([loss]);
            s.finish()
        }
        Command::Sample {
            common,
            method,
            score_net,
            encoder,
            snapshots,
        } => {
            let mut s = Session::open(&common, "sample")?;
            let seed = s.cfg.seeds[0];
            let learned = load_score(&score_net)?;
            let encoder = encoder.as_ref().map(|p| ConditionalNet::load(p).map(Arc::new)).transpose()?;
            let r = run_sample(&s.cfg, method, seed, learned.as_ref(), encoder, snapshots)?;
            let path = s.dir.join("particles.bin");
            r.outcome.particles.save(&path, SnapshotInfo::default())?;
            s.record.snapshots.push(path);
            if snapshots {
                s.record.snapshots.extend(save_trace(&r.outcome.trace, &s.dir)?);
            }
            s.tables(r.tables());
            s.finish()
        }
        Command::Eval {
            real,
            gen,
            metric,
            config,
            k,
            gamma,
            sigma,
            header,
        } => {
            let line = eval_row(&real, &gen, metric, config.as_deref(), k, gamma, sigma)?;
            let mut out = std::io::stdout().lock();
            if header {
                writeln!(out, "{EVAL_HEADER}")?;
            }
            writeln!(out, "{line}")?;
            Ok(())
        }
        Command::PlotData { common, particles, beta } => {
            let mut s = Session::open(&common, "plot-data")?;
            if let Some(p) = &particles {
                let (ps, _) = ParticleSet::load(p)?;
                s.tables([particle_table(&ps)]);
            }
            let d = s.cfg.target.native_dim().unwrap_or(s.cfg.dim);
            let target = s.cfg.target.build(d)?;
            if d == 2 {
                let bs = &s.cfg.beta_sweep;
                let mut g = Table::new("density_grid", &["beta", "x", "y", "density"]);
                for (x, y, p) in tempered_density_grid(&target, beta, bs.grid_low, bs.grid_high, bs.grid_points)? {
                    g.push(vec![beta.to_string(), x.to_string(), y.to_string(), p.to_string()]);
                }
                s.tables([g]);
            }
            s.finish()
        }
    }
}

fn particle_table(ps: &ParticleSet) -> Table {
    let cols: Vec<String> = (0..ps.dim()).map(|j| format!("x{j}")).collect();
    let mut t = Table {
        name: "particles".into(),
        columns: cols,
        rows: Vec::new(),
    };
    for row in ps.rows() {
        t.push(row.iter().map(|v| v.to_string()).collect());
    }
    t
}

fn eval_row(
    real: &Path,
    gen: &Path,
    metric: EvalMetric,
    config: Option<&Path>,
    k: usize,
    gamma: Option<f64>,
    sigma: Option<f64>,
) -> Result<String> {
    let (real, _) = ParticleSet::load(real)?;
    let (gen, _) = ParticleSet::load(gen)?;
    let (n_real, n_gen) = (real.len(), gen.len());
    let cells = match metric {
        EvalMetric::Mmd => {
            let bw = gamma.map_or(Bandwidth::Median, Bandwidth::Fixed);
            let v = mmd_squared(&real, &gen, bw)?;
            let params = gamma.map_or_else(|| "bandwidth=median".to_string(), |g| format!("bandwidth=fixed;gamma={g}"));
            ["mmd".to_string(), v.to_string(), String::new(), String::new(), String::new(), params]
        }
        EvalMetric::Ipr => {
            let (p, r) = improved_pr(&real, &gen, k)?;
            ["ipr".to_string(), String::new(), String::new(), p.to_string(), r.to_string(), format!("k={k}")]
        }
        EvalMetric::Ksd => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let target = cfg.target.build(gen.dim())?;
            let schedule = cfg.schedule.build()?;
            let sigma = sigma.unwrap_or(schedule.sigmas()[schedule.len() - 1]);
            let score = ScoreSource::Analytic {
                mixture: target,
                perturb: true,
            };
            let kernel = condition(&cfg.kernel, sigma, &gen)?;
            let v = ksd_squared(&gen, &score, sigma, &kernel)?;
            ["ksd".to_string(), String::new(), v.to_string(), String::new(), String::new(), format!("sigma={sigma}")]
        }
    };
    let [name, mmd, ksd, p, r, params] = cells;
    Ok(format!("{name},{mmd},{ksd},{p},{r},{n_real},{n_gen},{params}"))
}
