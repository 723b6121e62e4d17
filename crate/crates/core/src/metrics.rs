//! Noise-distribution metrics (AKLD, KS) and image-quality metrics (PSNR, SSIM).

use crate::error::{Error, Result};
use crate::image::ImagePatch;

pub const BINS: usize = 256;
pub const RANGE: (f64, f64) = (-256.0, 256.0);
pub const KL_EPS: f64 = 1e-12;
pub const PSNR_CAP: f64 = 100.0;

/// Noise on the 8-bit scale: `(noisy - clean) * 255`.
pub fn noise_of(noisy: &ImagePatch, clean: &ImagePatch) -> Result<Vec<f64>> {
    if noisy.dims() != clean.dims() {
        return Err(Error::Usage(format!("noisy {:?} and clean {:?} sizes differ", noisy.dims(), clean.dims())));
    }
    Ok(noisy.data().iter().zip(clean.data()).map(|(&y, &x)| (y as f64 - x as f64) * 255.0).collect())
}

/// Uniform-bin histogram of noise values; out-of-range values land in the
/// boundary bins.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl Default for NoiseHistogram {
    fn default() -> Self {
        Self { counts: vec![0; BINS], total: 0 }
    }
}

impl NoiseHistogram {
    pub fn bin_of(v: f64) -> usize {
        let width = (RANGE.1 - RANGE.0) / BINS as f64;
        let b = ((v - RANGE.0) / width).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(BINS - 1)
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut h = Self::default();
        h.extend(values);
        h
    }

    pub fn from_pair(noisy: &ImagePatch, clean: &ImagePatch) -> Result<Self> {
        Ok(Self::from_values(&noise_of(noisy, clean)?))
    }

    pub fn extend(&mut self, values: &[f64]) {
        for &v in values {
            self.counts[Self::bin_of(v)] += 1;
        }
        self.total += values.len() as u64;
    }

    pub fn merge(&mut self, other: &NoiseHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// `(p + eps) / (1 + BINS * eps)`, strictly positive and summing to one.
    pub fn smoothed(&self) -> Vec<f64> {
        let z = 1.0 + BINS as f64 * KL_EPS;
        self.normalized().into_iter().map(|p| (p + KL_EPS) / z).collect()
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.normalized()
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }
}

/// `KL(p || q)` between smoothed histograms.
pub fn kl_divergence(p: &NoiseHistogram, q: &NoiseHistogram) -> f64 {
    let (ps, qs) = (p.smoothed(), q.smoothed());
    ps.iter().zip(&qs).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Average KL divergence between real and generated noise. `fakes[i]` holds
/// the generator draws for item `i`; the KL is averaged over draws and then
/// over items.
pub fn akld(real: &[ImagePatch], fakes: &[Vec<ImagePatch>], clean: &[ImagePatch]) -> Result<f64> {
    if real.is_empty() || real.len() != clean.len() || real.len() != fakes.len() {
        return Err(Error::Usage(format!(
            "akld needs matching non-empty sets, got {} real, {} fake groups, {} clean",
            real.len(),
            fakes.len(),
            clean.len()
        )));
    }
    let mut total = 0.0;
    for ((y, draws), x) in real.iter().zip(fakes).zip(clean) {
        if draws.is_empty() {
            return Err(Error::Usage("akld needs at least one generated sample per item".into()));
        }
        let hr = NoiseHistogram::from_pair(y, x)?;
        let mut item = 0.0;
        for f in draws {
            item += kl_divergence(&hr, &NoiseHistogram::from_pair(f, x)?);
        }
        total += item / draws.len() as f64;
    }
    Ok(total / real.len() as f64)
}

/// Maximum CDF gap between pooled real and pooled generated noise histograms.
pub fn ks_value(real: &[ImagePatch], fake: &[ImagePatch], clean: &[ImagePatch]) -> Result<f64> {
    if real.is_empty() || real.len() != clean.len() || fake.len() != clean.len() {
        return Err(Error::Usage("ks_value needs matching non-empty sets".into()));
    }
    let (mut hr, mut hf) = (NoiseHistogram::default(), NoiseHistogram::default());
    for ((y, f), x) in real.iter().zip(fake).zip(clean) {
        hr.merge(&NoiseHistogram::from_pair(y, x)?);
        hf.merge(&NoiseHistogram::from_pair(f, x)?);
    }
    Ok(ks_histograms(&hr, &hf))
}

pub fn ks_histograms(a: &NoiseHistogram, b: &NoiseHistogram) -> f64 {
    a.cdf().iter().zip(b.cdf()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_same(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Usage(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

/// PSNR in dB for unit-peak images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, unit data range, valid region only, averaged over channels.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Usage(format!("ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}")));
    }
    let taps = gaussian_taps(SSIM_WIN, SSIM_SIGMA);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, ..) = filter_valid(&pa, h, w, &taps);
        let (mu_b, ..) = filter_valid(&pb, h, w, &taps);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let (sab, ..) = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        acc += s / n as f64;
    }
    Ok(acc / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_edges() {
        assert_eq!(NoiseHistogram::bin_of(-256.0), 0);
        assert_eq!(NoiseHistogram::bin_of(-1000.0), 0);
        assert_eq!(NoiseHistogram::bin_of(-0.5), 127);
        assert_eq!(NoiseHistogram::bin_of(0.0), 128);
        assert_eq!(NoiseHistogram::bin_of(255.9), 255);
        assert_eq!(NoiseHistogram::bin_of(1e9), 255);
    }

    #[test]
    fn smoothing_keeps_unit_mass() {
        let h = NoiseHistogram::from_values(&[0.0, 3.0, 3.0, -40.0]);
        assert!((h.smoothed().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = ImagePatch::filled(4, 4, 1, 0.5);
        let b = ImagePatch::filled(4, 4, 1, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity() {
        let a = ImagePatch::new(12, 12, 1, (0..144).map(|i| (i % 7) as f32 / 7.0).collect());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
