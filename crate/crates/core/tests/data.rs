use std::path::Path;
use std::sync::Arc;

use noisetransfer::data::{
    derive_rng, extract_positive_pair, positive_pair_coords, read_manifest, write_manifest, BatchPlan, BatchSource,
    CleanPool, DataConfig, PairedDataset, Prefetcher, Provenance, Record, ReferenceMode,
};
use noisetransfer::image::ImagePatch;
use noisetransfer::noise::{sample_noisy, NoiseSpec};
use noisetransfer::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.99);
    (stat, crit)
}

#[test]
fn patch_positions_are_uniform() {
    let (size, patch) = (200, 96);
    let positions = size - patch + 1;
    let mut rng = derive_rng(11, 0, 0);
    let mut ys = vec![0u64; positions];
    let mut xs = vec![0u64; positions];
    let cell = 15;
    let mut grid = vec![0u64; positions.div_ceil(cell).pow(2)];
    for _ in 0..10_000 {
        let ((y, x), b) = positive_pair_coords(size, size, patch, &mut rng).unwrap();
        assert_ne!((y, x), b);
        ys[y] += 1;
        xs[x] += 1;
        grid[(y / cell) * positions.div_ceil(cell) + x / cell] += 1;
    }
    for counts in [&ys, &xs, &grid] {
        let (stat, crit) = chi_square_uniform(counts);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }
}

#[test]
fn single_position_gives_identical_patches() {
    let img = ImagePatch::procedural(96, 96, &mut derive_rng(0, 0, 0));
    let (a, b) = extract_positive_pair(&img, 96, Path::new("x.png"), &mut derive_rng(1, 0, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, img);
}

#[test]
fn pair_is_seeded_and_distinct() {
    let img = ImagePatch::procedural(200, 200, &mut derive_rng(0, 0, 0));
    let p1 = extract_positive_pair(&img, 96, Path::new("x.png"), &mut derive_rng(5, 0, 0)).unwrap();
    let p2 = extract_positive_pair(&img, 96, Path::new("x.png"), &mut derive_rng(5, 0, 0)).unwrap();
    assert_eq!(p1, p2);
    assert_ne!(p1.0, p1.1);
}

#[test]
fn small_image_error_names_file() {
    let img = ImagePatch::filled(50, 80, 3, 0.5);
    let err = extract_positive_pair(&img, 64, Path::new("tiny.png"), &mut derive_rng(0, 0, 0)).unwrap_err();
    assert!(matches!(err, Error::Data { .. }));
    assert!(err.to_string().contains("tiny.png"), "{err}");
}

fn real_dataset() -> Arc<PairedDataset> {
    let mut rng = derive_rng(3, 0, 0);
    let items = (0..4)
        .map(|i| {
            let c = ImagePatch::procedural(120, 120, &mut rng);
            let n = sample_noisy(&c, &NoiseSpec::gaussian(10.0 + 10.0 * i as f64), &mut rng).unwrap();
            (c, n, format!("scene{}", i % 2))
        })
        .collect();
    Arc::new(PairedDataset::from_pairs(items).unwrap())
}

fn source(cfg: &DataConfig, batch: usize, patch: usize) -> BatchSource {
    let plan = BatchPlan::new(cfg, batch, patch);
    let clean = Arc::new(CleanPool::procedural(4, 128, 1).unwrap());
    let real = (plan.n_real > 0).then(real_dataset);
    BatchSource::new(plan, real, clean, 99).unwrap()
}

#[test]
fn paper_batch_is_half_real() {
    let cfg = DataConfig::default();
    let b = source(&cfg, 32, 96).batch(0).unwrap();
    let real = b.provenance.iter().filter(|p| matches!(p, Provenance::Real { .. })).count();
    assert_eq!((real, b.len() - real), (16, 16));
}

#[test]
fn batch_shapes() {
    let b = source(&DataConfig::default(), 2, 96).batch(3).unwrap();
    for field in [&b.x, &b.y, &b.y_pos, &b.y_ref] {
        assert_eq!(field.len(), 2);
        for p in field {
            assert_eq!(p.dims(), (96, 96, 3));
        }
    }
}

#[test]
fn batches_are_pure_functions_of_step() {
    let cfg = DataConfig { reference: ReferenceMode::Unpaired, ..DataConfig::default() };
    let s = source(&cfg, 8, 32);
    assert_eq!(s.batch(7).unwrap(), s.batch(7).unwrap());
    assert_ne!(s.batch(7).unwrap(), s.batch(8).unwrap());
    let again = source(&cfg, 8, 32);
    assert_eq!(s.batch(7).unwrap(), again.batch(7).unwrap());
}

#[test]
fn augmentation_is_shared_within_a_sample() {
    let cfg = DataConfig {
        real_fraction: 0.0,
        synthetic_noise: vec![NoiseSpec::gaussian(0.0)],
        ..DataConfig::default()
    };
    let s = source(&cfg, 16, 32);
    for step in 0..4 {
        let b = s.batch(step).unwrap();
        for (x, y) in b.x.iter().zip(&b.y) {
            assert_eq!(x, y);
        }
    }
}

#[test]
fn synthetic_fields_share_a_spec_with_fresh_draws() {
    let cfg = DataConfig { real_fraction: 0.0, ..DataConfig::default() };
    let b = source(&cfg, 8, 32).batch(1).unwrap();
    for i in 0..b.len() {
        assert!(matches!(b.provenance[i], Provenance::Synthetic(_)));
        let n_y: Vec<f32> = b.y[i].data().iter().zip(b.x[i].data()).map(|(a, c)| a - c).collect();
        assert_ne!(b.y[i], b.y_pos[i]);
        assert!(n_y.iter().any(|v| *v != 0.0) || b.provenance[i].to_string().contains("sigma=0"));
    }
}

#[test]
fn real_samples_stay_within_a_group() {
    let ds = real_dataset();
    let cfg = DataConfig { real_fraction: 1.0, reference: ReferenceMode::Unpaired, ..DataConfig::default() };
    let b = source(&cfg, 8, 32).batch(2).unwrap();
    for p in &b.provenance {
        let Provenance::Real { group } = p else { panic!("expected a real sample") };
        assert!(ds.group_members(group).len() >= 2);
    }
}

#[test]
fn prefetcher_preserves_order() {
    let s = Arc::new(source(&DataConfig { real_fraction: 0.0, ..DataConfig::default() }, 4, 32));
    let inline: Vec<_> = Prefetcher::new(Arc::clone(&s), 5, 15, 0).map(|b| b.unwrap()).collect();
    let threaded: Vec<_> = Prefetcher::new(Arc::clone(&s), 5, 15, 3).map(|b| b.unwrap()).collect();
    assert_eq!(inline.len(), 10);
    assert_eq!(inline, threaded);
    assert_eq!(inline[0].step, 5);
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = derive_rng(0, 0, 0);
    let mut records = Vec::new();
    for i in 0..3 {
        let c = ImagePatch::procedural(40, 40, &mut rng);
        let n = sample_noisy(&c, &NoiseSpec::gaussian(15.0), &mut rng).unwrap().clip01();
        let (cp, np) = (dir.path().join(format!("c{i}.png")), dir.path().join(format!("n{i}.png")));
        c.save_png(&cp).unwrap();
        n.save_png(&np).unwrap();
        records.push(Record { clean: cp, noisy: np, group: format!("g{}", i % 2) });
    }
    let manifest = dir.path().join("pairs.tsv");
    write_manifest(&manifest, &records).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap(), records);
    let ds = PairedDataset::load(&manifest, 32).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.group_members("g0").len(), 2);
}

#[test]
fn malformed_manifest_line_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.tsv");
    std::fs::write(&manifest, "only-one-column\n").unwrap();
    let err = read_manifest(&manifest).unwrap_err();
    assert!(matches!(err, Error::Data { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}
