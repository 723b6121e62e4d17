//! Training objectives.

use nt_autodiff::{Element, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::gaussian_taps;

pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_noise_fm: f64,
    pub w_gan_fm: f64,
    pub w_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_noise_fm: 100.0, w_gan_fm: 100.0, w_recon: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("losses.w_noise_fm", self.w_noise_fm),
            ("losses.w_gan_fm", self.w_gan_fm),
            ("losses.w_recon", self.w_recon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconLossConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub padding: Padding,
}

impl Default for ReconLossConfig {
    fn default() -> Self {
        Self { kernel_size: 11, sigma: 3.0, padding: Padding::Reflect }
    }
}

impl ReconLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config("losses.recon.kernel_size", "must be odd and positive"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("losses.recon.sigma", "must be > 0"));
        }
        Ok(())
    }

    /// Normalized 1-D taps of the separable Gaussian.
    pub fn taps(&self) -> Vec<f64> {
        gaussian_taps(self.kernel_size, self.sigma)
    }
}

/// Switches that drop terms from the objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Train the discriminator without the contrastive term.
    pub no_lnoise_d: bool,
    /// Train the generator without the contrastive term and noise feature matching.
    pub no_lnoise_g_and_fm: bool,
}

/// Mean absolute difference pooled over all levels of two feature stacks.
pub fn fm_noise<'t, T: Element>(a: &[Var<'t, T>], b: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(a.len(), b.len(), "feature stacks differ in depth");
    let count: usize = a.iter().map(|v| v.value().len()).sum();
    let sums: Vec<_> = a.iter().zip(b).map(|(x, y)| x.sub(*y).abs().sum()).collect();
    Var::sum_all(&sums).mul_scalar(1.0 / count as f64)
}

/// Per-level mean absolute difference, summed over levels.
pub fn fm_gan<'t, T: Element>(a: &[Var<'t, T>], b: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(a.len(), b.len(), "feature stacks differ in depth");
    let means: Vec<_> = a.iter().zip(b).map(|(x, y)| x.sub(*y).abs().mean()).collect();
    Var::sum_all(&means)
}

/// `sum_l -mean log D(R)_l - mean log(1 - D(F)_l)`.
pub fn gan_d<'t, T: Element>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(real.len(), fake.len(), "score levels differ");
    let terms: Vec<_> = real
        .iter()
        .zip(fake)
        .flat_map(|(r, f)| {
            [r.log_clamped(LOG_FLOOR).mean().neg(), f.neg().add_scalar(1.0).log_clamped(LOG_FLOOR).mean().neg()]
        })
        .collect();
    Var::sum_all(&terms)
}

/// `sum_l -mean log D(F)_l`.
pub fn gan_g<'t, T: Element>(fake: &[Var<'t, T>]) -> Var<'t, T> {
    let terms: Vec<_> = fake.iter().map(|f| f.log_clamped(LOG_FLOOR).mean().neg()).collect();
    Var::sum_all(&terms)
}

/// `mean |GF(y) - GF(y_fake)|` with a channel-wise Gaussian blur.
pub fn recon<'t, T: Element>(y: Var<'t, T>, y_fake: Var<'t, T>, cfg: &ReconLossConfig) -> Var<'t, T> {
    let taps = cfg.taps();
    y.separable_filter_reflect(&taps).sub(y_fake.separable_filter_reflect(&taps)).abs().mean()
}

/// Combination rules for loss components, usable on plain numbers and on
/// graph values alike.
pub trait LossValue: Copy {
    fn plus(self, other: Self) -> Self;
    fn scaled(self, k: f64) -> Self;
}

impl LossValue for f64 {
    fn plus(self, other: Self) -> Self {
        self + other
    }

    fn scaled(self, k: f64) -> Self {
        self * k
    }
}

impl<T: Element> LossValue for Var<'_, T> {
    fn plus(self, other: Self) -> Self {
        self.add(other)
    }

    fn scaled(self, k: f64) -> Self {
        self.mul_scalar(k)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms<V> {
    pub noise: V,
    pub gan: V,
}

impl<V: LossValue> DiscriminatorTerms<V> {
    pub fn total(&self, ablation: &Ablation) -> V {
        if ablation.no_lnoise_d {
            self.gan
        } else {
            self.noise.plus(self.gan)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms<V> {
    pub noise: V,
    pub gan: V,
    pub fm_noise: V,
    pub fm_gan: V,
    pub recon: V,
}

impl<V: LossValue> GeneratorTerms<V> {
    /// Weighted sum; a zero weight drops its term entirely.
    pub fn total(&self, w: &LossWeights, ablation: &Ablation) -> V {
        let mut acc = self.gan;
        if !ablation.no_lnoise_g_and_fm {
            acc = acc.plus(self.noise);
            if w.w_noise_fm != 0.0 {
                acc = acc.plus(self.fm_noise.scaled(w.w_noise_fm));
            }
        }
        if w.w_gan_fm != 0.0 {
            acc = acc.plus(self.fm_gan.scaled(w.w_gan_fm));
        }
        if w.w_recon != 0.0 {
            acc = acc.plus(self.recon.scaled(w.w_recon));
        }
        acc
    }
}

impl<T: Element> DiscriminatorTerms<Var<'_, T>> {
    pub fn values(&self) -> DiscriminatorTerms<f64> {
        DiscriminatorTerms { noise: self.noise.item(), gan: self.gan.item() }
    }
}

impl<T: Element> GeneratorTerms<Var<'_, T>> {
    pub fn values(&self) -> GeneratorTerms<f64> {
        GeneratorTerms {
            noise: self.noise.item(),
            gan: self.gan.item(),
            fm_noise: self.fm_noise.item(),
            fm_gan: self.fm_gan.item(),
            recon: self.recon.item(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sums() {
        let t = GeneratorTerms { noise: 1.0, gan: 2.0, fm_noise: 3.0, fm_gan: 4.0, recon: 5.0 };
        assert_eq!(t.total(&LossWeights::default(), &Ablation::default()), 1.0 + 2.0 + 300.0 + 400.0 + 500.0);
        let zero = LossWeights { w_noise_fm: 0.0, w_gan_fm: 0.0, w_recon: 0.0 };
        assert_eq!(t.total(&zero, &Ablation::default()), 3.0);
        let abl = Ablation { no_lnoise_g_and_fm: true, ..Default::default() };
        assert_eq!(t.total(&LossWeights::default(), &abl), 2.0 + 400.0 + 500.0);
        let d = DiscriminatorTerms { noise: 0.7, gan: 1.5 };
        assert_eq!(d.total(&Ablation { no_lnoise_d: true, ..Default::default() }), 1.5);
        assert_eq!(d.total(&Ablation::default()), 2.2);
    }
}
