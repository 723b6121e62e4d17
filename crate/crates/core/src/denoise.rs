//! Downstream check: train a small residual CNN denoiser on synthesized
//! noisy/clean pairs and measure PSNR/SSIM on held-out images.

use std::path::Path;

use log::info;
use nt_autodiff::nn::{Bound, Conv2d, ConvCfg};
use nt_autodiff::optim::Adam;
use nt_autodiff::optim::AdamConfig;
use nt_autodiff::{ParamStore, Tape};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::data::{derive_rng, domain, CleanPool};
use crate::error::{Error, Result};
use crate::eval::{embed_images, generate};
use crate::image::{from_tensor, to_tensor, ImagePatch};
use crate::metrics::{psnr, ssim};
use crate::trainer::{Networks, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub channels: usize,
    /// Predict the noise and subtract it from the input.
    pub residual: bool,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub patch: usize,
    /// Synthesized training pairs.
    pub pairs: usize,
    /// Train only on synthesized pairs, never on captured noisy images.
    pub generative_only: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            channels: 32,
            residual: true,
            lr: 1e-3,
            epochs: 5,
            steps_per_epoch: 200,
            batch: 8,
            patch: 32,
            pairs: 512,
            generative_only: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("denoise.layers", format!("must be at least 2, got {}", self.layers)));
        }
        for (k, v) in [
            ("denoise.channels", self.channels),
            ("denoise.steps_per_epoch", self.steps_per_epoch),
            ("denoise.batch", self.batch),
            ("denoise.patch", self.patch),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("denoise.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Where a noisy training image came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum PairSource {
    /// Synthesized; `reference` indexes the reference image used, if any.
    Generated { synthesizer: String, reference: Option<usize>, seed: u64 },
    /// A captured noisy image.
    Captured,
}

#[derive(Clone, Debug)]
pub struct DenoisePair {
    pub clean: ImagePatch,
    pub noisy: ImagePatch,
    pub source: PairSource,
}

/// Produces noisy versions of clean patches.
pub trait NoiseSynthesizer {
    fn name(&self) -> String;

    /// One noisy image per clean image, plus the reference index used for each.
    fn synthesize(&self, clean: &[ImagePatch], seed: u64) -> Result<Vec<(ImagePatch, Option<usize>)>>;
}

/// Exact Gaussian noise of a fixed level, standing in for a perfect generator.
pub struct GaussianOracle {
    pub sigma: f64,
}

impl NoiseSynthesizer for GaussianOracle {
    fn name(&self) -> String {
        format!("gaussian_oracle(sigma={})", self.sigma)
    }

    fn synthesize(&self, clean: &[ImagePatch], seed: u64) -> Result<Vec<(ImagePatch, Option<usize>)>> {
        let mut rng = derive_rng(seed, domain::DENOISE, 1);
        let sd = (self.sigma / 255.0) as f32;
        Ok(clean
            .iter()
            .map(|x| {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v += sd * rng.sample::<f32, _>(StandardNormal);
                }
                (y, None)
            })
            .collect())
    }
}

/// A trained generator conditioned on randomly chosen reference images.
pub struct GeneratorSynthesizer<'a> {
    pub nets: &'a Networks,
    pub g: &'a ParamStore<Real>,
    pub key: &'a ParamStore<Real>,
    pub references: Vec<ImagePatch>,
}

impl NoiseSynthesizer for GeneratorSynthesizer<'_> {
    fn name(&self) -> String {
        "generator".into()
    }

    fn synthesize(&self, clean: &[ImagePatch], seed: u64) -> Result<Vec<(ImagePatch, Option<usize>)>> {
        if self.references.is_empty() {
            return Err(Error::Usage("the generator needs at least one reference image".into()));
        }
        let emb = embed_images(self.nets, self.key, &self.references)?;
        let mut rng = derive_rng(seed, domain::DENOISE, 2);
        let picks: Vec<usize> = clean.iter().map(|_| rng.gen_range(0..self.references.len())).collect();
        let e: Vec<Vec<f64>> = picks.iter().map(|&i| emb[i].clone()).collect();
        let out = generate(self.nets, self.g, clean, &e, seed)?;
        Ok(out.into_iter().zip(picks).map(|(y, r)| (y, Some(r))).collect())
    }
}

/// `n` pairs from random crops of the clean pool.
pub fn make_denoise_pairs(
    synth: &dyn NoiseSynthesizer,
    pool: &CleanPool,
    n: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<DenoisePair>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = derive_rng(seed, domain::DENOISE, 0);
    let clean: Vec<ImagePatch> = (0..n)
        .map(|_| {
            let img = pool.get(rng.gen_range(0..pool.len()));
            if img.height() < patch || img.width() < patch {
                return Err(Error::data("<clean pool>", format!("image smaller than the {patch}px patch")));
            }
            let y = rng.gen_range(0..=img.height() - patch);
            let x = rng.gen_range(0..=img.width() - patch);
            Ok(img.crop(y, x, patch, patch))
        })
        .collect::<Result<_>>()?;
    let noisy = synth.synthesize(&clean, seed)?;
    Ok(clean
        .into_iter()
        .zip(noisy)
        .map(|(c, (y, r))| DenoisePair {
            clean: c,
            noisy: y,
            source: PairSource::Generated { synthesizer: synth.name(), reference: r, seed },
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    layers: Vec<Conv2d>,
}

impl Denoiser {
    pub fn new<R: Rng>(cfg: DenoiserConfig, channels: usize, store: &mut ParamStore<Real>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let c_in = if l == 0 { channels } else { cfg.channels };
            let c_out = if l + 1 == cfg.layers { channels } else { cfg.channels };
            layers.push(Conv2d::new(store, rng, &format!("denoiser.conv{l}"), ConvCfg::same(c_in, c_out, 3)));
        }
        Ok(Self { cfg, layers })
    }

    pub fn forward<'t>(&self, b: &Bound<'t, '_, Real>, x: nt_autodiff::Var<'t, Real>) -> nt_autodiff::Var<'t, Real> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        if self.cfg.residual {
            x.sub(h)
        } else {
            h
        }
    }

    pub fn denoise(&self, store: &ParamStore<Real>, noisy: &[ImagePatch]) -> Vec<ImagePatch> {
        noisy
            .iter()
            .flat_map(|img| {
                let tape = Tape::new();
                let b = Bound::new(&tape, store, false);
                let out = self.forward(&b, tape.constant(to_tensor(std::slice::from_ref(img))));
                from_tensor(&out.value())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR and SSIM of the clipped denoised images against clean ones.
/// SSIM is skipped (reported as NaN) for images below the window size.
pub fn evaluate_denoiser(
    den: &Denoiser,
    store: &ParamStore<Real>,
    pairs: &[(ImagePatch, ImagePatch)],
) -> Result<QualityReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("no evaluation pairs".into()));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (clean, noisy) in pairs {
        let out = den.denoise(store, std::slice::from_ref(noisy)).remove(0).clip01();
        p += psnr(&out, clean)?;
        s += ssim(&out, clean).unwrap_or(f64::NAN);
    }
    Ok(QualityReport { psnr: p / pairs.len() as f64, ssim: s / pairs.len() as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_l1: f64,
    pub val: QualityReport,
}

pub struct TrainedDenoiser {
    pub net: Denoiser,
    pub store: ParamStore<Real>,
    /// Entry 0 is the untrained network.
    pub history: Vec<EpochLog>,
}

/// L1 training of a fresh denoiser. With `cfg.generative_only`, any pair
/// whose noisy image was captured rather than synthesized is rejected.
pub fn train_denoiser(
    pairs: &[DenoisePair],
    val: &[(ImagePatch, ImagePatch)],
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    if cfg.generative_only && pairs.iter().any(|p| p.source == PairSource::Captured) {
        return Err(Error::Usage("generative-only training was given captured noisy images".into()));
    }
    let channels = pairs.first().map_or(3, |p| p.clean.channels());
    let mut rng = derive_rng(seed, domain::DENOISE, 3);
    let mut store = ParamStore::new();
    let net = Denoiser::new(cfg.clone(), channels, &mut store, &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }, &store);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let initial = if val.is_empty() { QualityReport { psnr: f64::NAN, ssim: f64::NAN } } else { evaluate_denoiser(&net, &store, val)? };
    history.push(EpochLog { epoch: 0, train_l1: f64::NAN, val: initial });
    if pairs.is_empty() {
        return Ok(TrainedDenoiser { net, store, history });
    }
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..pairs.len())).collect();
            let x: Vec<ImagePatch> = idx.iter().map(|&i| pairs[i].clean.clone()).collect();
            let y: Vec<ImagePatch> = idx.iter().map(|&i| pairs[i].noisy.clone()).collect();
            let tape = Tape::new();
            let b = Bound::new(&tape, &store, true);
            let out = net.forward(&b, tape.constant(to_tensor(&y)));
            let loss = out.sub(tape.constant(to_tensor(&x))).abs().mean();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite denoiser loss in epoch {epoch}")));
            }
            total += lv;
            let grads = tape.backward(loss);
            opt.step(&mut store, &grads);
        }
        let val_report = if val.is_empty() { QualityReport { psnr: f64::NAN, ssim: f64::NAN } } else { evaluate_denoiser(&net, &store, val)? };
        let log = EpochLog { epoch, train_l1: total / cfg.steps_per_epoch as f64, val: val_report };
        info!("denoiser epoch {epoch}: train L1 {:.5}, val PSNR {:.3} dB", log.train_l1, log.val.psnr);
        history.push(log);
    }
    Ok(TrainedDenoiser { net, store, history })
}

pub const DENOISER_KIND: &str = "noisetransfer-denoiser";

pub fn save_denoiser(path: &Path, trained: &TrainedDenoiser, channels: usize) -> Result<()> {
    let meta = serde_json::json!({
        "config": serde_json::to_value(&trained.net.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        "channels": channels,
    });
    let mut ar = Archive::new(DENOISER_KIND, meta);
    ar.push_store("denoiser", &trained.store);
    ar.write(path)
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, ParamStore<Real>)> {
    let ar = Archive::read(path)?;
    if ar.kind != DENOISER_KIND {
        return Err(Error::Checkpoint(format!("{} is not a denoiser checkpoint", path.display())));
    }
    let cfg: DenoiserConfig = serde_json::from_value(ar.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad denoiser config: {e}")))?;
    let channels = ar.meta["channels"].as_u64().ok_or_else(|| Error::Checkpoint("missing channel count".into()))? as usize;
    let mut store = ParamStore::new();
    let net = Denoiser::new(cfg, channels, &mut store, &mut derive_rng(0, 0, 0))?;
    ar.fill_store("denoiser", &mut store)?;
    Ok((net, store))
}
