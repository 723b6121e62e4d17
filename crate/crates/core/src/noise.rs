//! Synthetic noise laws on `[0, 1]` images.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;

pub const TRAIN_SIGMA_RANGE: (f64, f64) = (0.0, 70.0);
pub const TRAIN_LAMBDA_RANGE: (f64, f64) = (5.0, 100.0);
pub const EVAL_SIGMA_RANGE: (f64, f64) = (0.0, 50.0);
pub const EVAL_LAMBDA_RANGE: (f64, f64) = (5.0, 50.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
    PoissonGaussian,
}

/// A noise law. `sigma` is a standard deviation on the 8-bit scale (applied
/// as `sigma / 255`); `lam` is the photon scale, so a pixel of intensity `x`
/// receives `Pois(lam * x) / lam`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Train,
    N2gEval,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self { kind: NoiseKind::Gaussian, sigma: Some(sigma), lam: None }
    }

    pub fn poisson(lam: f64) -> Self {
        Self { kind: NoiseKind::Poisson, sigma: None, lam: Some(lam) }
    }

    pub fn poisson_gaussian(lam: f64, sigma: f64) -> Self {
        Self { kind: NoiseKind::PoissonGaussian, sigma: Some(sigma), lam: Some(lam) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config("noise", msg.to_string()));
        match (self.kind, self.sigma, self.lam) {
            (NoiseKind::Gaussian, Some(_), None)
            | (NoiseKind::Poisson, None, Some(_))
            | (NoiseKind::PoissonGaussian, Some(_), Some(_)) => {}
            (NoiseKind::Gaussian, ..) => return bad("gaussian noise needs `sigma` and no `lam`"),
            (NoiseKind::Poisson, ..) => return bad("poisson noise needs `lam` and no `sigma`"),
            (NoiseKind::PoissonGaussian, ..) => return bad("poisson_gaussian noise needs both `lam` and `sigma`"),
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config("noise.sigma", format!("must be finite and >= 0, got {s}")));
            }
        }
        if let Some(l) = self.lam {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config("noise.lam", format!("must be finite and > 0, got {l}")));
            }
        }
        Ok(())
    }

    /// True when a parameter lies outside the training ranges. Such specs are
    /// accepted but worth a warning.
    pub fn outside_training_range(&self) -> bool {
        let out = |v: Option<f64>, (lo, hi): (f64, f64)| v.is_some_and(|v| v < lo || v > hi);
        out(self.sigma, TRAIN_SIGMA_RANGE) || out(self.lam, TRAIN_LAMBDA_RANGE)
    }

    /// Draws a spec uniformly: kind first, then each parameter from the
    /// regime's interval.
    pub fn sample<R: Rng>(regime: Regime, rng: &mut R) -> NoiseSpec {
        let (sr, lr) = match regime {
            Regime::Train => (TRAIN_SIGMA_RANGE, TRAIN_LAMBDA_RANGE),
            Regime::N2gEval => (EVAL_SIGMA_RANGE, EVAL_LAMBDA_RANGE),
        };
        let kind = match rng.gen_range(0..3) {
            0 => NoiseKind::Gaussian,
            1 => NoiseKind::Poisson,
            _ => NoiseKind::PoissonGaussian,
        };
        let sigma = rng.gen_range(sr.0..=sr.1);
        let lam = rng.gen_range(lr.0..=lr.1);
        match kind {
            NoiseKind::Gaussian => NoiseSpec::gaussian(sigma),
            NoiseKind::Poisson => NoiseSpec::poisson(lam),
            NoiseKind::PoissonGaussian => NoiseSpec::poisson_gaussian(lam, sigma),
        }
    }

    /// Per-pixel noise variance (on `[0, 1]` scale) at clean intensity `x`.
    pub fn variance_at(&self, x: f64) -> f64 {
        let g = self.sigma.map_or(0.0, |s| (s / 255.0).powi(2));
        let p = self.lam.map_or(0.0, |l| x / l);
        g + p
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.kind, self.sigma, self.lam) {
            (NoiseKind::Gaussian, Some(s), _) => write!(f, "gaussian(sigma={s:.2})"),
            (NoiseKind::Poisson, _, Some(l)) => write!(f, "poisson(lam={l:.2})"),
            (NoiseKind::PoissonGaussian, Some(s), Some(l)) => write!(f, "poisson_gaussian(lam={l:.2}, sigma={s:.2})"),
            _ => write!(f, "{:?}(invalid)", self.kind),
        }
    }
}

fn poisson_scaled<R: Rng>(x: f64, lam: f64, rng: &mut R) -> f64 {
    let rate = lam * x;
    if rate <= 0.0 {
        return 0.0;
    }
    let k: f64 = Poisson::new(rate).expect("positive finite rate").sample(rng);
    k / lam
}

/// Corrupts `clean` with one draw of `spec`. The result is not clipped.
pub fn sample_noisy<R: Rng>(clean: &ImagePatch, spec: &NoiseSpec, rng: &mut R) -> Result<ImagePatch> {
    spec.validate()?;
    if !clean.in_unit_range() {
        return Err(Error::Usage("clean image has values outside [0, 1]".into()));
    }
    let sd = spec.sigma.unwrap_or(0.0) / 255.0;
    let mut out = clean.clone();
    for v in out.data_mut() {
        let x = *v as f64;
        let mut y = match spec.lam {
            Some(lam) => poisson_scaled(x, lam, rng),
            None => x,
        };
        if sd > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            y += sd * n;
        }
        *v = y as f32;
    }
    Ok(out)
}
