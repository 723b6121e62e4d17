use noisetransfer::data::derive_rng;
use noisetransfer::image::ImagePatch;
use noisetransfer::metrics::{noise_of, psnr, ssim, NoiseHistogram, PSNR_CAP};
use rand::Rng;

fn random(h: usize, w: usize, seed: u64) -> ImagePatch {
    let mut rng = derive_rng(seed, 0, 0);
    ImagePatch::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect())
}

/// Independent SSIM: direct 2-D window sums, no separability.
fn ssim_oracle(a: &ImagePatch, b: &ImagePatch) -> f64 {
    let (h, w, c) = a.dims();
    let r = 5i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let mut win = vec![0.0; 121];
    for i in 0..11 {
        for j in 0..11 {
            win[i * 11 + j] = g[i] * g[j];
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut n = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i * 11 + j];
                        let (p, q) = (a.get(y + i, x + j, ch) as f64, b.get(y + i, x + j, ch) as f64);
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += acc / n as f64;
    }
    total / c as f64
}

#[test]
fn noise_of_scales_to_eight_bit_units() {
    let x = random(8, 8, 1);
    assert!(noise_of(&x, &x).unwrap().iter().all(|&v| v == 0.0));
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v += 10.0 / 255.0);
    assert!(noise_of(&y, &x).unwrap().iter().all(|v| (v - 10.0).abs() < 1e-3));
    let z = random(8, 8, 2);
    let n = noise_of(&z, &x).unwrap();
    for ((a, b), v) in z.data().iter().zip(x.data()).zip(&n) {
        assert!((v - (*a as f64 - *b as f64) * 255.0).abs() < 1e-9);
    }
}

#[test]
fn psnr_closed_forms() {
    let a = random(16, 16, 3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = ImagePatch::filled(16, 16, 3, 0.5);
    let c = ImagePatch::filled(16, 16, 3, 0.6);
    assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-5);
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let a = random(24, 20, 4);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let mut b = a.clone();
    let mut rng = derive_rng(5, 0, 0);
    b.data_mut().iter_mut().for_each(|v| *v = (*v + rng.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0));
    let (got, want) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
    assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    assert!(ssim(&random(8, 8, 1), &random(8, 8, 2)).is_err());
}

#[test]
fn out_of_range_noise_lands_in_edge_bins() {
    let h = NoiseHistogram::from_values(&[-1000.0, -256.0, 255.9, 256.0, 9999.0, f64::from(0u8)]);
    assert_eq!(h.counts()[0], 2);
    assert_eq!(h.counts()[255], 3);
    assert_eq!(h.counts()[128], 1);
    assert_eq!(h.total(), 6);
}
