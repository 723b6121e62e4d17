//! Two-branch discriminator over a shared residual trunk.
//!
//! The noise branch maps a noisy image to a bounded embedding; the GAN branch
//! scores `(clean, embedding, noisy)` triples at three receptive-field levels,
//! with instance-norm scale and shift predicted from the embedding.

use nt_autodiff::nn::{Bound, Conv2d, ConvCfg, Linear};
use nt_autodiff::{Element, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::LRELU_SLOPE;

pub const LEVELS: usize = 3;
pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub spectral_norm: bool,
    pub image_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, embed_dim: 128, mlp_hidden: 256, spectral_norm: true, image_channels: 3 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("discriminator.base_channels", self.base_channels),
            ("discriminator.embed_dim", self.embed_dim),
            ("discriminator.mlp_hidden", self.mlp_hidden),
            ("discriminator.image_channels", self.image_channels),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (LEVELS - 1)
    }
}

/// Which branch a trunk pass belongs to; decides how instance norms are
/// scaled and shifted.
#[derive(Clone, Copy)]
enum Branch<'t, T: Element> {
    Noise,
    Gan(Var<'t, T>),
}

#[derive(Clone, Debug)]
struct NormAffine {
    noise_gamma: ParamId,
    noise_beta: ParamId,
    gan_gamma: Linear,
    gan_beta: Linear,
}

impl NormAffine {
    fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, embed: usize) -> Self {
        Self {
            noise_gamma: store.add(format!("{name}.noise_gamma"), Tensor::full([c], T::one())),
            noise_beta: store.add(format!("{name}.noise_beta"), Tensor::zeros([c])),
            gan_gamma: Linear::new(store, rng, &format!("{name}.gan_gamma"), embed, c, true),
            gan_beta: Linear::new(store, rng, &format!("{name}.gan_beta"), embed, c, true),
        }
    }

    fn apply<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>, branch: Branch<'t, T>) -> Var<'t, T> {
        let n = x.shape()[0];
        let normed = x.instance_norm(IN_EPS);
        let (gamma, beta) = match branch {
            Branch::Noise => (b.param(self.noise_gamma).repeat_rows(n), b.param(self.noise_beta).repeat_rows(n)),
            Branch::Gan(e) => (self.gan_gamma.forward(b, e).add_scalar(1.0), self.gan_beta.forward(b, e)),
        };
        normed.scale_channels(gamma).shift_channels(beta)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm1: NormAffine,
    conv2: Conv2d,
    norm2: NormAffine,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>, branch: Branch<'t, T>) -> Var<'t, T> {
        let h = self.norm1.apply(b, self.conv1.forward(b, x), branch).leaky_relu(LRELU_SLOPE);
        let h = self.norm2.apply(b, self.conv2.forward(b, h), branch);
        let s = match &self.skip {
            Some(c) => c.forward(b, x),
            None => x,
        };
        h.add(s).leaky_relu(LRELU_SLOPE)
    }
}

#[derive(Clone, Debug)]
struct GanHead {
    conv: Conv2d,
    norm: Linear,
    shift: Linear,
    score: Conv2d,
}

/// Output of the noise branch.
pub struct NoiseOutput<'t, T: Element> {
    /// `(n, embed_dim)`, every component in `[-1, 1]`.
    pub embedding: Var<'t, T>,
    /// Per-level feature maps before pooling.
    pub features: Vec<Var<'t, T>>,
}

/// Output of the GAN branch.
pub struct GanOutput<'t, T: Element> {
    /// Per-level `(n, 1, h, w)` probabilities, smallest receptive field first.
    pub scores: Vec<Var<'t, T>>,
    /// Per-level feature maps before the scoring convolution.
    pub features: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    stem_noise: Conv2d,
    stem_gan: Conv2d,
    trunk: Vec<ResBlock>,
    noise_heads: Vec<Conv2d>,
    gan_heads: Vec<GanHead>,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

impl Discriminator {
    /// Registers all parameters in `store` under the `discriminator.` prefix.
    pub fn new<T: Element, R: Rng>(cfg: DiscriminatorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let sn = cfg.spectral_norm;
        let conv = |c_in, c_out, k| ConvCfg::same(c_in, c_out, k).spectral(sn);
        let c0 = cfg.base_channels;
        let ic = cfg.image_channels;
        let stem_noise = Conv2d::new(store, rng, "discriminator.stem_noise", conv(ic, c0, 3));
        let stem_gan = Conv2d::new(store, rng, "discriminator.stem_gan", conv(2 * ic, c0, 3));
        let mut trunk = Vec::with_capacity(LEVELS);
        let mut noise_heads = Vec::with_capacity(LEVELS);
        let mut gan_heads = Vec::with_capacity(LEVELS);
        let mut c_in = c0;
        for l in 0..LEVELS {
            let c = cfg.channels_at(l);
            let p = format!("discriminator.trunk{l}");
            trunk.push(ResBlock {
                conv1: Conv2d::new(store, rng, &format!("{p}.conv1"), conv(c_in, c, 3)),
                norm1: NormAffine::new(store, rng, &format!("{p}.norm1"), c, cfg.embed_dim),
                conv2: Conv2d::new(store, rng, &format!("{p}.conv2"), conv(c, c, 3)),
                norm2: NormAffine::new(store, rng, &format!("{p}.norm2"), c, cfg.embed_dim),
                skip: (c_in != c).then(|| Conv2d::new(store, rng, &format!("{p}.skip"), conv(c_in, c, 1).bias(false))),
            });
            noise_heads.push(Conv2d::new(store, rng, &format!("discriminator.noise_head{l}"), conv(c, c, 3)));
            let g = format!("discriminator.gan_head{l}");
            gan_heads.push(GanHead {
                conv: Conv2d::new(store, rng, &format!("{g}.conv"), conv(c, c, 3)),
                norm: Linear::new(store, rng, &format!("{g}.gamma"), cfg.embed_dim, c, true),
                shift: Linear::new(store, rng, &format!("{g}.beta"), cfg.embed_dim, c, true),
                score: Conv2d::new(store, rng, &format!("{g}.score"), conv(c, 1, 3)),
            });
            c_in = c;
        }
        let pooled = (0..LEVELS).map(|l| cfg.channels_at(l)).sum();
        let mlp_hidden = Linear::new(store, rng, "discriminator.mlp_hidden", pooled, cfg.mlp_hidden, true);
        let mlp_out = Linear::new(store, rng, "discriminator.mlp_out", cfg.mlp_hidden, cfg.embed_dim, true);
        Ok(Self { cfg, stem_noise, stem_gan, trunk, noise_heads, gan_heads, mlp_hidden, mlp_out })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Names of the parameters owned by the shared trunk.
    pub fn trunk_param_prefix(level: usize) -> String {
        format!("discriminator.trunk{level}.")
    }

    fn check_image(&self, s: &[usize]) -> Result<()> {
        let m = self.cfg.size_multiple();
        if s.len() != 4 || s[1] != self.cfg.image_channels || s[2] % m != 0 || s[3] % m != 0 || s[2] < m || s[3] < m {
            return Err(Error::Usage(format!(
                "discriminator expects (n, {}, h, w) with h, w multiples of {m}, got {s:?}",
                self.cfg.image_channels
            )));
        }
        Ok(())
    }

    /// Trunk outputs per level, average-pooled between levels.
    fn trunk<'t, T: Element>(&self, b: &Bound<'t, '_, T>, mut h: Var<'t, T>, branch: Branch<'t, T>) -> Vec<Var<'t, T>> {
        let mut out = Vec::with_capacity(LEVELS);
        for (l, block) in self.trunk.iter().enumerate() {
            if l > 0 {
                h = h.avg_pool2x();
            }
            h = block.forward(b, h, branch);
            out.push(h);
        }
        out
    }

    pub fn embed_noise<'t, T: Element>(&self, b: &Bound<'t, '_, T>, noisy: Var<'t, T>) -> Result<NoiseOutput<'t, T>> {
        self.check_image(&noisy.shape())?;
        let stem = self.stem_noise.forward(b, noisy).leaky_relu(LRELU_SLOPE);
        let levels = self.trunk(b, stem, Branch::Noise);
        let features: Vec<_> = levels
            .into_iter()
            .zip(&self.noise_heads)
            .map(|(h, head)| head.forward(b, h).leaky_relu(LRELU_SLOPE))
            .collect();
        let pooled: Vec<_> = features.iter().map(|f| f.global_avg_pool()).collect();
        let hidden = self.mlp_hidden.forward(b, Var::concat_cols(&pooled)).leaky_relu(LRELU_SLOPE);
        let embedding = self.mlp_out.forward(b, hidden).tanh();
        Ok(NoiseOutput { embedding, features })
    }

    pub fn score_gan<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        clean: Var<'t, T>,
        embedding: Var<'t, T>,
        noisy: Var<'t, T>,
    ) -> Result<GanOutput<'t, T>> {
        self.check_image(&noisy.shape())?;
        if clean.shape() != noisy.shape() {
            return Err(Error::Usage("clean and noisy inputs differ in shape".into()));
        }
        let es = embedding.shape();
        if es.len() != 2 || es[1] != self.cfg.embed_dim || es[0] != noisy.shape()[0] {
            return Err(Error::config(
                "discriminator.embed_dim",
                format!("expects ({}, {}) embeddings, got {es:?}", noisy.shape()[0], self.cfg.embed_dim),
            ));
        }
        let stem = self.stem_gan.forward(b, Var::concat_channels(&[clean, noisy])).leaky_relu(LRELU_SLOPE);
        let levels = self.trunk(b, stem, Branch::Gan(embedding));
        let mut scores = Vec::with_capacity(LEVELS);
        let mut features = Vec::with_capacity(LEVELS);
        for (h, head) in levels.into_iter().zip(&self.gan_heads) {
            let gamma = head.norm.forward(b, embedding).add_scalar(1.0);
            let beta = head.shift.forward(b, embedding);
            let f = head
                .conv
                .forward(b, h)
                .instance_norm(IN_EPS)
                .scale_channels(gamma)
                .shift_channels(beta)
                .leaky_relu(LRELU_SLOPE);
            scores.push(head.score.forward(b, f).sigmoid());
            features.push(f);
        }
        Ok(GanOutput { scores, features })
    }
}

#[cfg(test)]
mod tests {
    use nt_autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn output_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DiscriminatorConfig { base_channels: 4, embed_dim: 8, mlp_hidden: 16, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let d = Discriminator::new(cfg, &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let noisy: Vec<f32> = (0..2 * 3 * 16 * 16).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let y = tape.constant(Tensor::new([2, 3, 16, 16], noisy));
        let out = d.embed_noise(&b, y).unwrap();
        assert_eq!(out.embedding.shape(), vec![2, 8]);
        assert!(out.embedding.value().data().iter().all(|v| v.abs() <= 1.0));
        let x = tape.constant(Tensor::full([2, 3, 16, 16], 0.5));
        let gan = d.score_gan(&b, x, out.embedding, y).unwrap();
        let sides: Vec<usize> = gan.scores.iter().map(|s| s.shape()[2]).collect();
        assert_eq!(sides, vec![16, 8, 4]);
        assert!(gan.scores.iter().all(|s| s.value().data().iter().all(|&p| p > 0.0 && p < 1.0)));
    }
}
