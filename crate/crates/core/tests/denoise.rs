use noisetransfer::data::CleanPool;
use noisetransfer::denoise::{
    load_denoiser, make_denoise_pairs, save_denoiser, train_denoiser, DenoisePair, DenoiserConfig, GaussianOracle,
    NoiseSynthesizer, PairSource,
};
use noisetransfer::image::ImagePatch;
use noisetransfer::metrics::psnr;

fn small() -> DenoiserConfig {
    DenoiserConfig { layers: 4, channels: 12, epochs: 3, steps_per_epoch: 60, batch: 8, patch: 24, pairs: 96, ..Default::default() }
}

fn validation(n: usize, seed: u64) -> Vec<(ImagePatch, ImagePatch)> {
    let pool = CleanPool::procedural(n, 32, seed).unwrap();
    make_denoise_pairs(&GaussianOracle { sigma: 25.0 }, &pool, n, 32, seed + 1)
        .unwrap()
        .into_iter()
        .map(|p| (p.clean, p.noisy))
        .collect()
}

#[test]
fn zero_pairs_and_reproducibility() {
    let pool = CleanPool::procedural(3, 32, 0).unwrap();
    let oracle = GaussianOracle { sigma: 25.0 };
    assert!(make_denoise_pairs(&oracle, &pool, 0, 16, 1).unwrap().is_empty());
    let a = make_denoise_pairs(&oracle, &pool, 5, 16, 1).unwrap();
    let b = make_denoise_pairs(&oracle, &pool, 5, 16, 1).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!((&p.clean, &p.noisy, &p.source), (&q.clean, &q.noisy, &q.source));
        assert!(matches!(&p.source, PairSource::Generated { seed: 1, .. }));
    }
    assert_eq!(oracle.name(), "gaussian_oracle(sigma=25)");
}

#[test]
fn zero_epochs_returns_initial_network() {
    let cfg = DenoiserConfig { epochs: 0, ..small() };
    let val = validation(2, 10);
    let pairs = make_denoise_pairs(&GaussianOracle { sigma: 25.0 }, &CleanPool::procedural(2, 32, 3).unwrap(), 4, 24, 4).unwrap();
    let t = train_denoiser(&pairs, &val, &cfg, 5).unwrap();
    assert_eq!(t.history.len(), 1);
    let fresh = train_denoiser(&[], &val, &cfg, 5).unwrap();
    let ids: Vec<_> = t.store.ids().collect();
    for id in ids {
        assert_eq!(t.store.get(id), fresh.store.get(id));
    }
}

#[test]
fn captured_pairs_rejected_in_generative_only_mode() {
    let x = ImagePatch::filled(24, 24, 3, 0.5);
    let pairs = vec![DenoisePair { clean: x.clone(), noisy: x, source: PairSource::Captured }];
    assert!(train_denoiser(&pairs, &[], &small(), 0).is_err());
    let open = DenoiserConfig { generative_only: false, epochs: 1, steps_per_epoch: 2, ..small() };
    assert!(train_denoiser(&pairs, &[], &open, 0).is_ok());
}

#[test]
fn validation_psnr_improves_over_first_epochs_and_survives_save() {
    let cfg = small();
    let pool = CleanPool::procedural(16, 48, 7).unwrap();
    let pairs = make_denoise_pairs(&GaussianOracle { sigma: 25.0 }, &pool, cfg.pairs, cfg.patch, 8).unwrap();
    let val = validation(6, 20);
    let t = train_denoiser(&pairs, &val, &cfg, 9).unwrap();
    let curve: Vec<f64> = t.history.iter().map(|h| h.val.psnr).collect();
    assert!(curve.windows(2).all(|w| w[1] > w[0]), "{curve:?}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    save_denoiser(&path, &t, 3).unwrap();
    let (net, store) = load_denoiser(&path).unwrap();
    let noisy: Vec<ImagePatch> = val.iter().map(|p| p.1.clone()).collect();
    assert_eq!(net.denoise(&store, &noisy), t.net.denoise(&t.store, &noisy));
    let out = net.denoise(&store, &noisy[..1]).remove(0).clip01();
    assert!(psnr(&out, &val[0].0).unwrap() > psnr(&val[0].1.clip01(), &val[0].0).unwrap());
}
