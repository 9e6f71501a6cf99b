use super::*;
use crate::distributions::Component;
use crate::kernels::{condition, KernelFamily};
use crate::score_learning::OutputScaling;

fn standard_normal(d: usize) -> GaussianMixture {
    GaussianMixture::new(vec![Component {
        weight: 1.0,
        mean: vec![0.0; d],
        variance: 1.0,
    }])
    .unwrap()
}

fn gaussian_points(n: usize, d: usize, seed: u64) -> ParticleSet {
    init_particles(&InitMode::Gaussian { scale: 1.5 }, n, d, seed).unwrap()
}

fn kernel(family: KernelFamily, reference: &ParticleSet) -> ConditionedKernel {
    condition(&KernelSpec::new(family, 0.8, -0.3), 1.0, reference).unwrap()
}

#[test]
fn geometric_schedule_has_constant_ratio() {
    let s = NoiseSchedule::toy();
    assert_eq!(s.len(), 10);
    assert_eq!(s.sigmas()[0], 20.0);
    assert_eq!(s.sigmas()[9], 1.0);
    let r0 = s.sigmas()[1] / s.sigmas()[0];
    for w in s.sigmas().windows(2) {
        assert!((w[1] / w[0] - r0).abs() < 1e-12);
    }
    let img = NoiseSchedule::image();
    assert!((img.sigmas()[9] - 0.01).abs() < 1e-15 && img.sigmas()[0] == 1.0);
}

#[test]
fn schedules_must_decrease() {
    assert!(NoiseSchedule::new(vec![1.0, 1.0]).is_err());
    assert!(NoiseSchedule::new(vec![1.0, 2.0]).is_err());
    assert!(NoiseSchedule::new(vec![]).is_err());
    assert!(NoiseSchedule::new(vec![0.0]).is_err());
}

#[test]
fn step_size_scales_with_sigma_ratio() {
    let s = NoiseSchedule::new(vec![4.0, 2.0, 1.0]).unwrap();
    assert_eq!(s.step_size(0.5, 0), 8.0);
    assert_eq!(s.step_size(0.5, 2), 0.5);
    let single = NoiseSchedule::new(vec![0.3]).unwrap();
    assert_eq!(single.step_size(0.7, 0), 0.7);
}

#[test]
fn single_particle_direction_is_its_score() {
    let gm = GaussianMixture::imbalanced_pair(2);
    let s = ScoreSource::analytic(gm);
    let ps = ParticleSet::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let k = ConditionedKernel::with_gamma(&KernelSpec::rbf(1.0), 1.0, 0.3).unwrap();
    let phi = stein_direction(&ps, &k, &s, 1.0, 2.0, 0).unwrap();
    assert_eq!(phi, s.score(&[1.0, -2.0], 1.0).unwrap());
}

#[test]
fn batched_directions_match_pairwise_evaluation() {
    let gm = GaussianMixture::imbalanced_pair(3);
    let s = ScoreSource::analytic(gm);
    let ps = gaussian_points(12, 3, 1);
    for family in [KernelFamily::Rbf, KernelFamily::Imq, KernelFamily::Mixed] {
        let k = kernel(family, &ps);
        for beta in [0.0, 0.5, 1.0, 3.0] {
            let scores = s.scores(&ps, 2.0).unwrap();
            let batched = stein_directions(&ps, &k, &scores, beta).unwrap();
            for i in 0..ps.len() {
                let direct = stein_direction(&ps, &k, &s, 2.0, beta, i).unwrap();
                for (a, b) in batched.row(i).iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{family:?} {a} {b}");
                }
            }
        }
    }
}

fn code_kernel(reference: &ParticleSet) -> ConditionedKernel {
    let enc = ConditionalNet::mlp(reference.dim(), &[6], 2, OutputScaling::None, 3).unwrap();
    let spec = KernelSpec::mixed(1.0, -0.3).with_encoder(Arc::new(enc));
    condition(&spec, 0.7, reference).unwrap()
}

#[test]
fn code_space_batched_directions_match_pairwise_evaluation() {
    let s = ScoreSource::analytic(standard_normal(3));
    let ps = gaussian_points(9, 3, 2);
    let k = code_kernel(&ps);
    let scores = s.scores(&ps, 0.7).unwrap();
    let batched = stein_directions(&ps, &k, &scores, 1.3).unwrap();
    for i in 0..ps.len() {
        let direct = stein_direction(&ps, &k, &s, 0.7, 1.3, i).unwrap();
        for (a, b) in batched.row(i).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} {b}");
        }
    }
}

#[test]
fn zero_beta_leaves_only_the_smoothed_score() {
    let s = ScoreSource::analytic(standard_normal(2));
    let ps = gaussian_points(6, 2, 3);
    let k = kernel(KernelFamily::Rbf, &ps);
    let phi = stein_direction(&ps, &k, &s, 1.0, 0.0, 2).unwrap();
    let scores = s.scores(&ps, 1.0).unwrap();
    let mut expected = [0.0; 2];
    for (j, xj) in ps.rows().enumerate() {
        let kv = k.eval(xj, ps.row(2)).unwrap();
        for a in 0..2 {
            expected[a] += kv * scores[[j, a]] / 6.0;
        }
    }
    for a in 0..2 {
        assert!((phi[a] - expected[a]).abs() < 1e-15);
    }
}

#[test]
fn entropy_regularized_direction_matches_tempered_target() {
    let gm = GaussianMixture::four_mode();
    let ps = gaussian_points(10, 2, 4);
    for beta in [0.05, 0.5, 2.0, 4.0] {
        let s = ScoreSource::analytic(gm.clone());
        let tempered = ScoreSource::analytic(gm.clone()).scaled(1.0 / beta);
        let k = kernel(KernelFamily::Mixed, &ps);
        let lhs = stein_direction(&ps, &k, &s, 3.0, beta, 1).unwrap();
        let rhs = stein_direction(&ps, &k, &tempered, 3.0, 1.0, 1).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - beta * b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}

#[test]
fn single_particle_at_mode_is_a_fixed_point() {
    let s = ScoreSource::Analytic { mixture: standard_normal(2), perturb: false };
    let ps = ParticleSet::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let k = ConditionedKernel::with_gamma(&KernelSpec::rbf(1.0), 1.0, 1.0).unwrap();
    for beta in [0.0, 1.0, 5.0] {
        assert_eq!(svgd_step(&ps, &k, &s, 1.0, beta, 0.1).unwrap(), ps);
    }
}

#[test]
fn coincident_particles_stay_coincident() {
    // zero score: a single flat component is emulated by a huge variance
    let flat = GaussianMixture::new(vec![Component {
        weight: 1.0,
        mean: vec![0.0, 0.0],
        variance: 1e300,
    }])
    .unwrap();
    let s = ScoreSource::Analytic { mixture: flat, perturb: false };
    let ps = ParticleSet::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let k = ConditionedKernel::with_gamma(&KernelSpec::rbf(1.0), 1.0, 1.0).unwrap();
    let next = svgd_step(&ps, &k, &s, 1.0, 1.0, 0.5).unwrap();
    assert_eq!(next.row(0), next.row(1));
}

#[test]
fn svgd_recovers_standard_normal_moments() {
    let d = 2;
    let s = ScoreSource::Analytic { mixture: standard_normal(d), perturb: false };
    let mut ps = init_particles(&InitMode::Gaussian { scale: 3.0 }, 256, d, 5).unwrap();
    let reference = standard_normal(d).sample(1024, 6).unwrap();
    let k = condition(&KernelSpec::rbf(1.0), 1.0, &reference).unwrap();
    for _ in 0..500 {
        ps = svgd_step(&ps, &k, &s, 1.0, 1.0, 0.5).unwrap();
    }
    for m in ps.mean() {
        assert!(m.abs() < 0.05, "mean {m}");
    }
    let cov = ps.covariance();
    let diff = nalgebra::Matrix2::new(cov[[0, 0]] - 1.0, cov[[0, 1]], cov[[1, 0]], cov[[1, 1]] - 1.0);
    let op = diff.symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(op < 0.1, "covariance {cov}");
}

#[test]
fn sgld_without_noise_is_gradient_ascent() {
    let gm = standard_normal(2);
    let s = ScoreSource::Analytic { mixture: gm, perturb: false };
    let ps = ParticleSet::from_rows(&[vec![1.0, -2.0], vec![0.0, 0.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let next = sgld_step(&ps, &s, 1.0, 0.2, 0.0, &mut rng).unwrap();
    assert_eq!(next.row(0), &[0.9, -1.8]);
    assert_eq!(next.row(1), &[0.0, 0.0]);
}

#[test]
fn sgld_reaches_stationary_variance() {
    let s = ScoreSource::Analytic { mixture: standard_normal(2), perturb: false };
    let mut ps = init_particles(&InitMode::Gaussian { scale: 0.0 }, 512, 2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5000 {
        ps = sgld_step(&ps, &s, 1.0, 1e-2, 1.0, &mut rng).unwrap();
    }
    let cov = ps.covariance();
    for a in 0..2 {
        assert!((cov[[a, a]] - 1.0).abs() < 0.15, "{}", cov[[a, a]]);
    }
}

#[test]
fn sgld_noise_follows_particles_under_permutation() {
    let s = ScoreSource::Analytic { mixture: standard_normal(2), perturb: false };
    let ps = gaussian_points(5, 2, 7);
    let a = sgld_step(&ps, &s, 1.0, 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sgld_step(&ps, &s, 1.0, 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn non_finite_scores_identify_the_particle() {
    let sharp = GaussianMixture::new(vec![Component {
        weight: 1.0,
        mean: vec![0.0, 0.0],
        variance: 1e-300,
    }])
    .unwrap();
    let s = ScoreSource::Analytic { mixture: sharp, perturb: false };
    let ps = ParticleSet::from_rows(&[vec![0.0, 0.0], vec![1e10, 0.0]]).unwrap();
    match s.scores(&ps, 1.0) {
        Err(Error::NonFiniteScore { index }) => assert_eq!(index, 1),
        other => panic!("unexpected {other:?}"),
    }
}

fn cfg(n: usize, steps: usize, epsilon: f64) -> SamplerConfig {
    SamplerConfig {
        epsilon,
        steps,
        beta: 1.0,
        alpha: 1.0,
        n,
        seed: 9,
    }
}

#[test]
fn single_level_anneal_is_plain_steps() {
    let gm = GaussianMixture::imbalanced_pair(2);
    let s = ScoreSource::analytic(gm.clone());
    let init = gaussian_points(16, 2, 8);
    let schedule = NoiseSchedule::new(vec![1.5]).unwrap();
    let spec = KernelSpec::rbf(1.0);
    let out = anneal(LoopKind::Svgd, &schedule, &cfg(16, 5, 0.3), Some(&spec), &s, &init, &AnnealOptions::default()).unwrap();
    let k = condition(&spec, 1.5, &init).unwrap();
    let mut x = init.clone();
    for _ in 0..5 {
        x = svgd_step(&x, &k, &s, 1.5, 1.0, 0.3).unwrap();
    }
    assert_eq!(out.particles, x);
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].eta, 0.3);
}

#[test]
fn anneal_is_deterministic_and_permutation_equivariant() {
    let gm = GaussianMixture::imbalanced_pair(2);
    let s = ScoreSource::analytic(gm.clone());
    let init = init_particles(&InitMode::default(), 24, 2, 1).unwrap();
    let schedule = NoiseSchedule::geometric(5.0, 1.0, 3).unwrap();
    let opts = AnnealOptions {
        reference: ReferenceSource::Target { mixture: gm, samples: 64 },
        ..AnnealOptions::default()
    };
    let spec = KernelSpec::mixed(1.0, -0.2);
    let run = |x: &ParticleSet| anneal(LoopKind::Svgd, &schedule, &cfg(24, 10, 0.2), Some(&spec), &s, x, &opts).unwrap().particles;
    let a = run(&init);
    assert_eq!(a, run(&init));
    let perm: Vec<usize> = (0..24).rev().collect();
    let b = run(&init.permuted(&perm).unwrap());
    let a_perm = a.permuted(&perm).unwrap();
    for (p, q) in a_perm.as_flat().iter().zip(b.as_flat()) {
        assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
    }
}

#[test]
fn warm_start_runs_langevin_first() {
    let gm = GaussianMixture::imbalanced_pair(2);
    let s = ScoreSource::analytic(gm.clone());
    let init = init_particles(&InitMode::default(), 16, 2, 2).unwrap();
    let schedule = NoiseSchedule::geometric(4.0, 1.0, 4).unwrap();
    let opts = AnnealOptions {
        switch_level: Some(1),
        ..AnnealOptions::default()
    };
    let out = anneal(LoopKind::Svgd, &schedule, &cfg(16, 3, 0.1), Some(&KernelSpec::rbf(1.0)), &s, &init, &opts).unwrap();
    let kinds: Vec<LoopKind> = out.trace.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, vec![LoopKind::Sgld, LoopKind::Sgld, LoopKind::Svgd, LoopKind::Svgd]);
    assert!(out.trace[0].gamma.is_none() && out.trace[3].gamma.is_some());
}

#[test]
fn svgd_loop_requires_kernel() {
    let s = ScoreSource::analytic(standard_normal(1));
    let init = gaussian_points(4, 1, 0);
    let r = anneal(LoopKind::Svgd, &NoiseSchedule::toy(), &cfg(4, 1, 1.0), None, &s, &init, &AnnealOptions::default());
    assert!(matches!(r, Err(Error::InvalidParameter(_))));
}

#[test]
fn divergence_guard_reports_level_and_iteration() {
    let s = ScoreSource::Analytic { mixture: standard_normal(1), perturb: false };
    let init = ParticleSet::from_rows(&[vec![1.0]]).unwrap();
    let schedule = NoiseSchedule::new(vec![1.0]).unwrap();
    // x ← x − 5x/2 grows by 1.5× in magnitude each step
    let r = anneal(LoopKind::Sgld, &schedule, &SamplerConfig { alpha: 0.0, ..cfg(1, 100, 5.0) }, None, &s, &init, &AnnealOptions::default());
    match r {
        Err(Error::Diverged { level, iteration, .. }) => {
            assert_eq!(level, 0);
            assert!(iteration > 10 && iteration < 100);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn published_defaults_are_accepted() {
    let toy = SamplerConfig { epsilon: 1.0, steps: 100, beta: 1.0, alpha: 1.0, n: 1024, seed: 0 };
    toy.validate().unwrap();
    for eps in [2e-4, 4e-4, 6e-4] {
        let image = SamplerConfig { epsilon: eps, steps: 50, beta: 1.0, alpha: 1.0, n: 128, seed: 0 };
        image.validate().unwrap();
        let s = ScoreSource::analytic(standard_normal(4));
        let init = gaussian_points(128, 4, 1);
        let out = anneal(LoopKind::Svgd, &NoiseSchedule::image(), &SamplerConfig { steps: 2, ..image }, Some(&KernelSpec::rbf(1.0)), &s, &init, &AnnealOptions::default());
        assert!(out.is_ok());
    }
}

#[test]
fn init_modes() {
    let box_init = init_particles(&InitMode::UniformBox { low: -8.0, high: 8.0 }, 1024, 2, 3).unwrap();
    assert!(box_init.as_flat().iter().all(|v| (-8.0..=8.0).contains(v)));
    let origin = init_particles(&InitMode::Gaussian { scale: 0.0 }, 10, 3, 3).unwrap();
    assert!(origin.as_flat().iter().all(|&v| v == 0.0));
    assert_eq!(box_init, init_particles(&InitMode::default(), 1024, 2, 3).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    box_init.save(&path, SnapshotInfo::default()).unwrap();
    let back = init_particles(&InitMode::FromFile { path: path.clone() }, 1024, 2, 0).unwrap();
    assert_eq!(back.as_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), box_init.as_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(init_particles(&InitMode::FromFile { path: dir.path().join("missing.bin") }, 1, 1, 0).is_err());
}
