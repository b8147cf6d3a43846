use nalgebra::{DMatrix, DVector};
use tada_core::denoiser::{ConstantDenoiser, CountingDenoiser, Denoiser, GaussianMixture};
use tada_core::dynamics::{AugmentedConfig, AugmentedState, CoefficientBundle};
use tada_core::metrics::{sliced_wasserstein2, SampleBatch};
use tada_core::rng::{aux_stream, sample_stream};
use tada_core::sampler::{
    fm_baseline_sample, make_schedule, sample_prior, tada_sample, tada_step, HistoryCache,
    SamplerRun, Scheme, TadaSampler,
};

fn poly2(cfg: &AugmentedConfig, steps: usize, order: usize) -> tada_core::sampler::Schedule {
    make_schedule(
        Scheme::Polynomial { p: 2.0 },
        steps,
        order,
        cfg.delta(),
        cfg,
    )
    .unwrap()
}

fn single_gaussian(mean: f64, var: f64) -> GaussianMixture {
    GaussianMixture::new(
        vec![1.0],
        vec![DVector::from_element(1, mean)],
        vec![DVector::from_element(1, var)],
    )
    .unwrap()
}

#[test]
fn constant_denoiser_reaches_its_target() {
    let c = DVector::from_vec(vec![1.5, -0.75]);
    for n in 1..=4 {
        let cfg = AugmentedConfig::new(n, 1.0, 1e-3).unwrap();
        let sampler = TadaSampler::new(cfg.clone(), poly2(&cfg, 20, 3), 3).unwrap();
        let out = sampler
            .sample(&ConstantDenoiser(c.clone()), 2, 5, 32)
            .unwrap();
        for x in &out {
            assert!((x - &c).amax() < 1e-2);
        }
        // the terminal state's first variable is pushed onto the target
        let prior = sample_prior(&cfg, 2, &mut sample_stream(5, 0)).unwrap();
        let mut traj = Vec::new();
        sampler
            .run_from(&ConstantDenoiser(c.clone()), prior, Some(&mut traj))
            .unwrap();
        assert_eq!(traj.len(), 21);
    }
}

#[test]
fn scalar_step_with_perfect_denoiser_follows_exact_flow() {
    // N = 1, x_hat = x1 constant: x_t = (1 - t) x0 + t x1 exactly, and one
    // order-1 step integrates the constant force exactly.
    let cfg = AugmentedConfig::new(1, 1.0, 1e-3).unwrap();
    let (x0, x1) = (0.8, -1.25);
    let state = AugmentedState::new(DMatrix::from_element(1, 1, x0), 0.0);
    let bundle = CoefficientBundle::at(&cfg, 0.0).unwrap();
    let mut cache = HistoryCache::new(1);
    let t = 0.6;
    let next = tada_step(
        &state,
        &ConstantDenoiser(DVector::from_element(1, x1)),
        &bundle,
        t,
        &mut cache,
    )
    .unwrap();
    assert!((next.vars[(0, 0)] - ((1.0 - t) * x0 + t * x1)).abs() < 1e-14);
    assert_eq!(cache.len(), 1);
}

#[test]
fn nfe_accounting() {
    let cfg = AugmentedConfig::new(2, 1.0, 1e-3).unwrap();
    let counting = CountingDenoiser::new(GaussianMixture::ring(8, 2.0, 0.2).unwrap());
    let run = SamplerRun {
        config: cfg.clone(),
        schedule: poly2(&cfg, 15, 3),
        order: 3,
        seed: 1,
        batch: 1,
    };
    tada_sample(&counting, &run, 2).unwrap();
    assert_eq!(counting.calls(), 16);
    assert_eq!(TadaSampler::from_run(&run).unwrap().nfe(), 16);
}

#[test]
fn batches_are_deterministic_and_partition_free() {
    let cfg = AugmentedConfig::new(3, 2.0, 1e-3).unwrap();
    let gmm = GaussianMixture::ring(8, 2.0, 0.2).unwrap();
    let sampler = TadaSampler::new(cfg.clone(), poly2(&cfg, 12, 3), 3).unwrap();
    let a = sampler.sample(&gmm, 2, 9, 40).unwrap();
    let b = sampler.sample(&gmm, 2, 9, 40).unwrap();
    let head = sampler.sample(&gmm, 2, 9, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..10], &head[..]);
    let other = sampler.sample(&gmm, 2, 10, 10).unwrap();
    assert_ne!(&a[..10], &other[..]);
}

#[test]
fn prior_covariance_matches_sigma0() {
    let cfg = AugmentedConfig::new(2, 3.0, 1e-3).unwrap();
    let mut rng = aux_stream(4, 0);
    let draws = 100_000;
    let mut acc = DMatrix::<f64>::zeros(2, 2);
    for _ in 0..draws {
        let x = sample_prior(&cfg, 1, &mut rng).unwrap().vars;
        acc += &x * x.transpose();
    }
    acc /= draws as f64;
    for (got, want) in acc.iter().zip(cfg.sigma0().iter()) {
        if *want == 0.0 {
            assert!(got.abs() < 0.03 * cfg.k_scale());
        } else {
            assert!((got / want - 1.0).abs() < 0.03, "{got} vs {want}");
        }
    }
}

#[test]
fn baseline_recovers_single_gaussian_mean() {
    let (m, s2) = (0.7, 0.36);
    let g = single_gaussian(m, s2);
    let cfg = AugmentedConfig::new(1, 1.0, 1e-3).unwrap();
    let batch = 10_000;
    let out = fm_baseline_sample(&g, &poly2(&cfg, 50, 3), 3, 1, 3, batch).unwrap();
    let mean = out.iter().map(|x| x[0]).sum::<f64>() / batch as f64;
    assert!(
        (mean - m).abs() < 3.0 * s2.sqrt() / (batch as f64).sqrt(),
        "{mean}"
    );
}

#[test]
fn higher_order_baseline_is_more_accurate_at_ten_steps() {
    let gmm = GaussianMixture::new(
        vec![0.3, 0.7],
        vec![
            DVector::from_vec(vec![-1.5, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ],
        vec![DVector::from_vec(vec![0.05, 0.05]); 2],
    )
    .unwrap();
    let cfg = AugmentedConfig::new(1, 1.0, 1e-3).unwrap();
    let mut rng = aux_stream(8, 0);
    let truth =
        SampleBatch::new((0..20_000).map(|_| gmm.sample(&mut rng)).collect(), "truth").unwrap();
    let sw = |order: usize| {
        let out = fm_baseline_sample(&gmm, &poly2(&cfg, 10, order), order, 2, 6, 20_000).unwrap();
        sliced_wasserstein2(&SampleBatch::new(out, "fm").unwrap(), &truth, 128, 2).unwrap()
    };
    let (euler, third) = (sw(1), sw(3));
    assert!(third < euler, "order 3: {third}, order 1: {euler}");
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn terminal_error_decays_at_nominal_order() {
    let g = single_gaussian(0.7, 0.25);
    for n in [1, 2] {
        let cfg = AugmentedConfig::new(n, 1.0, 1e-3).unwrap();
        let reference = TadaSampler::new(cfg.clone(), poly2(&cfg, 8192, 3), 3)
            .unwrap()
            .sample(&g, 1, 3, 64)
            .unwrap();
        for order in 1..=3 {
            let points: Vec<(f64, f64)> = [32usize, 64, 128, 256]
                .iter()
                .map(|&steps| {
                    let out = TadaSampler::new(cfg.clone(), poly2(&cfg, steps, order), order)
                        .unwrap()
                        .sample(&g, 1, 3, 64)
                        .unwrap();
                    let err = out
                        .iter()
                        .zip(&reference)
                        .map(|(a, b)| (a - b).amax())
                        .fold(0.0, f64::max);
                    ((steps as f64).ln(), err.ln())
                })
                .collect();
            let s = slope(&points);
            assert!(s <= -(order as f64) + 0.3, "N={n} order={order} slope {s}");
        }
    }
}

#[test]
fn denoiser_dimension_mismatch_is_reported() {
    struct Wrong;
    impl Denoiser for Wrong {
        fn dim(&self) -> usize {
            3
        }
        fn denoise(&self, _q: &tada_core::denoiser::DenoiseQuery<'_>) -> DVector<f64> {
            DVector::zeros(3)
        }
    }
    let cfg = AugmentedConfig::new(2, 1.0, 1e-3).unwrap();
    let sampler = TadaSampler::new(cfg.clone(), poly2(&cfg, 4, 1), 1).unwrap();
    assert!(sampler.sample(&Wrong, 2, 0, 1).is_err());
}
