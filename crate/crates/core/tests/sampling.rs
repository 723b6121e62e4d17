use noisetransfer::data::derive_rng;
use noisetransfer::image::ImagePatch;
use noisetransfer::noise::{sample_noisy, NoiseKind, NoiseSpec, Regime};
use noisetransfer::Error;
use statrs::distribution::{ContinuousCDF, Normal};

fn noise(clean: &ImagePatch, spec: &NoiseSpec, seed: u64) -> Vec<f64> {
    let y = sample_noisy(clean, spec, &mut derive_rng(seed, 0, 0)).unwrap();
    y.data().iter().zip(clean.data()).map(|(a, b)| (*a as f64) - (*b as f64)).collect()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
fn ks_stat(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at alpha = 0.01.
fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[test]
fn zero_sigma_is_identity() {
    let mut rng = derive_rng(1, 0, 0);
    let x = ImagePatch::procedural(16, 16, &mut rng);
    let y = sample_noisy(&x, &NoiseSpec::gaussian(0.0), &mut rng).unwrap();
    assert_eq!(x, y);
}

#[test]
fn gaussian_moments() {
    let x = ImagePatch::filled(64, 64, 3, 0.5);
    let n = noise(&x, &NoiseSpec::gaussian(25.0), 3);
    let sd = 25.0 / 255.0;
    let (m, v) = mean_var(&n);
    assert!(m.abs() <= 3.0 * sd / (n.len() as f64).sqrt(), "mean {m}");
    assert!((v.sqrt() / sd - 1.0).abs() <= 0.02, "std {}", v.sqrt());
}

#[test]
fn gaussian_noise_is_normal() {
    let x = ImagePatch::filled(64, 64, 3, 0.5);
    let mut n = noise(&x, &NoiseSpec::gaussian(25.0), 4);
    let normal = Normal::new(0.0, 25.0 / 255.0).unwrap();
    let d = ks_stat(&mut n, |v| normal.cdf(v));
    assert!(d < ks_critical_001(n.len()), "KS statistic {d}");
}

#[test]
fn gaussian_noise_is_signal_independent() {
    let x = ImagePatch::new(64, 64, 3, (0..64 * 64 * 3).map(|i| (i % 97) as f32 / 96.0).collect());
    let n = noise(&x, &NoiseSpec::gaussian(30.0), 5);
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (mx, vx) = mean_var(&xs);
    let (mn, vn) = mean_var(&n);
    let cov = xs.iter().zip(&n).map(|(a, b)| (a - mx) * (b - mn)).sum::<f64>() / (n.len() as f64 - 1.0);
    let corr = cov / (vx * vn).sqrt();
    assert!(corr.abs() < 4.0 / (n.len() as f64).sqrt(), "correlation {corr}");
}

#[test]
fn poisson_variance() {
    let x = ImagePatch::filled(64, 64, 3, 0.5);
    let n = noise(&x, &NoiseSpec::poisson(30.0), 6);
    let (m, v) = mean_var(&n);
    assert!(m.abs() < 4.0 * (0.5f64 / 30.0).sqrt() / (n.len() as f64).sqrt(), "mean {m}");
    assert!((v / (0.5 / 30.0) - 1.0).abs() <= 0.05, "variance {v}");
}

#[test]
fn poisson_variance_slope_tracks_intensity() {
    let lam = 20.0;
    let levels = [0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0];
    let vars: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(i, &lv)| mean_var(&noise(&ImagePatch::filled(64, 64, 3, lv as f32), &NoiseSpec::poisson(lam), 10 + i as u64)).1)
        .collect();
    let k = levels.len() as f64;
    let (mx, my) = (levels.iter().sum::<f64>() / k, vars.iter().sum::<f64>() / k);
    let slope = levels.iter().zip(&vars).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / levels.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope * lam - 1.0).abs() <= 0.05, "slope {slope} vs {}", 1.0 / lam);
}

#[test]
fn poisson_gaussian_variance_adds() {
    let x = ImagePatch::filled(64, 64, 3, 0.6);
    let spec = NoiseSpec::poisson_gaussian(25.0, 20.0);
    let (m, v) = mean_var(&noise(&x, &spec, 7));
    let expected = 0.6 / 25.0 + (20.0f64 / 255.0).powi(2);
    assert!((spec.variance_at(0.6) - expected).abs() < 1e-12);
    assert!(m.abs() < 0.005, "mean {m}");
    assert!((v / expected - 1.0).abs() <= 0.05, "variance {v} vs {expected}");
}

#[test]
fn poisson_at_zero_rate_is_exactly_zero() {
    let x = ImagePatch::filled(8, 8, 3, 0.0);
    let y = sample_noisy(&x, &NoiseSpec::poisson(50.0), &mut derive_rng(0, 0, 0)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_is_not_clipped() {
    let x = ImagePatch::filled(32, 32, 3, 0.02);
    let y = sample_noisy(&x, &NoiseSpec::gaussian(50.0), &mut derive_rng(0, 0, 0)).unwrap();
    assert!(y.data().iter().any(|&v| v < 0.0));
    assert!(!y.in_unit_range());
    assert!(y.clip01().in_unit_range());
}

#[test]
fn same_seed_same_output() {
    let x = ImagePatch::filled(16, 16, 3, 0.3);
    for spec in [NoiseSpec::gaussian(10.0), NoiseSpec::poisson(10.0), NoiseSpec::poisson_gaussian(10.0, 5.0)] {
        let a = sample_noisy(&x, &spec, &mut derive_rng(42, 1, 2)).unwrap();
        let b = sample_noisy(&x, &spec, &mut derive_rng(42, 1, 2)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn invalid_specs_are_config_errors() {
    let bad = [
        NoiseSpec { kind: NoiseKind::Gaussian, sigma: None, lam: None },
        NoiseSpec { kind: NoiseKind::Gaussian, sigma: Some(-1.0), lam: None },
        NoiseSpec { kind: NoiseKind::Poisson, sigma: Some(3.0), lam: Some(5.0) },
        NoiseSpec { kind: NoiseKind::Poisson, sigma: None, lam: Some(0.0) },
        NoiseSpec { kind: NoiseKind::PoissonGaussian, sigma: None, lam: Some(5.0) },
    ];
    let x = ImagePatch::filled(4, 4, 3, 0.5);
    for spec in bad {
        let err = sample_noisy(&x, &spec, &mut derive_rng(0, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{spec:?}: {err}");
    }
}

#[test]
fn clean_outside_unit_range_is_rejected() {
    let x = ImagePatch::filled(4, 4, 3, 1.5);
    assert!(sample_noisy(&x, &NoiseSpec::gaussian(5.0), &mut derive_rng(0, 0, 0)).is_err());
}

#[test]
fn training_sigma_is_uniform() {
    let mut rng = derive_rng(8, 0, 0);
    let mut sigmas = Vec::new();
    while sigmas.len() < 10_000 {
        if let Some(s) = NoiseSpec::sample(Regime::Train, &mut rng).sigma {
            sigmas.push(s);
        }
    }
    assert!(sigmas.iter().all(|s| (0.0..=70.0).contains(s)));
    let d = ks_stat(&mut sigmas, |v| (v / 70.0).clamp(0.0, 1.0));
    assert!(d < ks_critical_001(sigmas.len()), "KS statistic {d}");
}

#[test]
fn training_specs_cover_every_kind() {
    let mut rng = derive_rng(9, 0, 0);
    let mut seen = [0usize; 3];
    for _ in 0..3000 {
        let s = NoiseSpec::sample(Regime::Train, &mut rng);
        s.validate().unwrap();
        seen[s.kind as usize] += 1;
        if let Some(l) = s.lam {
            assert!((5.0..=100.0).contains(&l));
        }
    }
    assert!(seen.iter().all(|&c| c > 800), "{seen:?}");
}

#[test]
fn evaluation_regime_ranges() {
    let mut rng = derive_rng(10, 0, 0);
    for _ in 0..10_000 {
        let s = NoiseSpec::sample(Regime::N2gEval, &mut rng);
        if let Some(l) = s.lam {
            assert!((5.0..=50.0).contains(&l), "lambda {l}");
        }
        if let Some(sg) = s.sigma {
            assert!((0.0..=50.0).contains(&sg), "sigma {sg}");
        }
    }
}

#[test]
fn spec_sampling_is_seeded() {
    let a: Vec<NoiseSpec> = (0..20).map(|i| NoiseSpec::sample(Regime::Train, &mut derive_rng(3, 0, i))).collect();
    let b: Vec<NoiseSpec> = (0..20).map(|i| NoiseSpec::sample(Regime::Train, &mut derive_rng(3, 0, i))).collect();
    assert_eq!(a, b);
}
