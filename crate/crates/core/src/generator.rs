//! U-Net noise generator with embedding-conditioned feature transforms.

use nt_autodiff::nn::{Bound, Conv2d, ConvCfg, Linear};
use nt_autodiff::{Element, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Number of stride-2 down-convolutions.
    pub depth: usize,
    /// Channels of the Gaussian map injected at every modulation layer.
    pub z_dim: usize,
    pub embed_dim: usize,
    pub spectral_norm: bool,
    /// Predict `noisy - clean` instead of the noisy image.
    pub residual_output: bool,
    pub image_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            depth: 3,
            z_dim: 32,
            embed_dim: 128,
            spectral_norm: true,
            residual_output: false,
            image_channels: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("generator.base_channels", self.base_channels),
            ("generator.z_dim", self.z_dim),
            ("generator.embed_dim", self.embed_dim),
            ("generator.image_channels", self.image_channels),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.depth > 6 {
            return Err(Error::config("generator.depth", format!("must be at most 6, got {}", self.depth)));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// `gamma(e) * F + beta(e, z)`.
///
/// `gamma = 1 + Linear(lrelu(Linear(e)))` is constant over space; `beta` is a
/// 3x3 convolution over `lrelu(broadcast(Linear(e)) + Conv1x1(z))`, i.e. a
/// pointwise layer on the concatenation of the broadcast embedding and `z`.
#[derive(Clone, Debug)]
pub struct Sft {
    pub channels: usize,
    pub gamma_hidden: Linear,
    pub gamma_out: Linear,
    pub beta_embed: Linear,
    pub beta_z: Conv2d,
    pub beta_out: Conv2d,
}

impl Sft {
    fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c: usize, cfg: &GeneratorConfig) -> Self {
        let sn = cfg.spectral_norm;
        Self {
            channels: c,
            gamma_hidden: Linear::new(store, rng, &format!("{name}.gamma_hidden"), cfg.embed_dim, c, true),
            gamma_out: Linear::new(store, rng, &format!("{name}.gamma_out"), c, c, true),
            beta_embed: Linear::new(store, rng, &format!("{name}.beta_embed"), cfg.embed_dim, c, true),
            beta_z: Conv2d::new(store, rng, &format!("{name}.beta_z"), ConvCfg::same(cfg.z_dim, c, 1).bias(false).spectral(sn)),
            beta_out: Conv2d::new(store, rng, &format!("{name}.beta_out"), ConvCfg::same(c, c, 3).spectral(sn)),
        }
    }

    pub fn gamma<'t, T: Element>(&self, b: &Bound<'t, '_, T>, e: Var<'t, T>) -> Var<'t, T> {
        let h = self.gamma_hidden.forward(b, e).leaky_relu(LRELU_SLOPE);
        self.gamma_out.forward(b, h).add_scalar(1.0)
    }

    pub fn beta<'t, T: Element>(&self, b: &Bound<'t, '_, T>, e: Var<'t, T>, z: Var<'t, T>) -> Var<'t, T> {
        let (_, _, h, w) = z.value().dims4();
        let emb = self.beta_embed.forward(b, e).spatial_broadcast(h, w);
        let hidden = emb.add(self.beta_z.forward(b, z)).leaky_relu(LRELU_SLOPE);
        self.beta_out.forward(b, hidden)
    }

    pub fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, f: Var<'t, T>, e: Var<'t, T>, z: Var<'t, T>) -> Var<'t, T> {
        f.scale_channels(self.gamma(b, e)).add(self.beta(b, e, z))
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv: Conv2d,
    sft: Sft,
    down: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv2d,
    fuse: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    head: Conv2d,
    encoder: Vec<EncoderLevel>,
    mid: Conv2d,
    mid_sft: Sft,
    decoder: Vec<DecoderLevel>,
    tail: Conv2d,
}

impl Generator {
    /// Registers all parameters in `store` under the `generator.` prefix.
    pub fn new<T: Element, R: Rng>(cfg: GeneratorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let sn = cfg.spectral_norm;
        let conv = |c_in, c_out, k| ConvCfg::same(c_in, c_out, k).spectral(sn);
        let c0 = cfg.base_channels;
        let head = Conv2d::new(store, rng, "generator.head", conv(cfg.image_channels, c0, 3));
        let mut encoder = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let (c, c_next) = (cfg.channels_at(l), cfg.channels_at(l + 1));
            let p = format!("generator.enc{l}");
            encoder.push(EncoderLevel {
                conv: Conv2d::new(store, rng, &format!("{p}.conv"), conv(c, c, 3)),
                sft: Sft::new(store, rng, &format!("{p}.sft"), c, &cfg),
                down: Conv2d::new(store, rng, &format!("{p}.down"), conv(c, c_next, 3).stride(2)),
            });
        }
        let cm = cfg.channels_at(cfg.depth);
        let mid = Conv2d::new(store, rng, "generator.mid.conv", conv(cm, cm, 3));
        let mid_sft = Sft::new(store, rng, "generator.mid.sft", cm, &cfg);
        let mut decoder = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let (c, c_below) = (cfg.channels_at(l), cfg.channels_at(l + 1));
            let p = format!("generator.dec{l}");
            decoder.push(DecoderLevel {
                up: Conv2d::new(store, rng, &format!("{p}.up"), conv(c_below, c, 3)),
                fuse: Conv2d::new(store, rng, &format!("{p}.fuse"), conv(2 * c, c, 3)),
            });
        }
        let tail = Conv2d::new(store, rng, "generator.tail", conv(c0, cfg.image_channels, 3));
        Ok(Self { cfg, head, encoder, mid, mid_sft, decoder, tail })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Modulation layers in forward order, finest first.
    pub fn sft_layers(&self) -> impl Iterator<Item = &Sft> {
        self.encoder.iter().map(|l| &l.sft).chain(std::iter::once(&self.mid_sft))
    }

    /// Shapes of the `z` maps consumed by one forward pass on `(n, h, w)` inputs.
    pub fn z_shapes(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        (0..=self.cfg.depth).map(|l| [n, self.cfg.z_dim, h >> l, w >> l]).collect()
    }

    pub fn sample_z<T: Element, R: Rng>(&self, n: usize, h: usize, w: usize, rng: &mut R) -> Vec<Tensor<T>> {
        self.z_shapes(n, h, w)
            .into_iter()
            .map(|s| {
                let len = s.iter().product();
                let data = (0..len).map(|_| T::from_f64(rng.sample(StandardNormal))).collect();
                Tensor::new(s, data)
            })
            .collect()
    }

    pub fn check_inputs(&self, x: &[usize], e: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if x.len() != 4 || x[1] != c.image_channels {
            return Err(Error::Usage(format!("generator expects (n, {}, h, w) images, got {x:?}", c.image_channels)));
        }
        let m = c.size_multiple();
        if x[2] % m != 0 || x[3] % m != 0 {
            return Err(Error::Usage(format!("image size {}x{} is not a multiple of {m}", x[2], x[3])));
        }
        if e.len() != 2 || e[1] != c.embed_dim {
            return Err(Error::config(
                "generator.embed_dim",
                format!("expects {}-d embeddings, got shape {e:?}", c.embed_dim),
            ));
        }
        if e[0] != x[0] {
            return Err(Error::Usage(format!("{} embeddings for {} images", e[0], x[0])));
        }
        Ok(())
    }

    /// Forward pass with explicit noise maps (see [`Generator::z_shapes`]).
    pub fn forward_with_z<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        e: Var<'t, T>,
        z: &[Tensor<T>],
    ) -> Result<Var<'t, T>> {
        let xs = x.shape();
        self.check_inputs(&xs, &e.shape())?;
        let expected = self.z_shapes(xs[0], xs[2], xs[3]);
        if z.len() != expected.len() || z.iter().zip(&expected).any(|(t, s)| t.shape() != s) {
            return Err(Error::Usage("noise maps do not match the generator layout".into()));
        }
        let z: Vec<Var<'t, T>> = z.iter().map(|t| b.constant(t.clone())).collect();
        let act = |v: Var<'t, T>| v.leaky_relu(LRELU_SLOPE);

        let mut h = act(self.head.forward(b, x));
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for (l, level) in self.encoder.iter().enumerate() {
            let f = level.conv.forward(b, h);
            let s = act(level.sft.forward(b, f, e, z[l]));
            skips.push(s);
            h = act(level.down.forward(b, s));
        }
        let f = self.mid.forward(b, h);
        h = act(self.mid_sft.forward(b, f, e, z[self.cfg.depth]));
        for (level, skip) in self.decoder.iter().zip(skips.into_iter().rev()) {
            let up = act(level.up.forward(b, h.upsample2x()));
            h = act(level.fuse.forward(b, Var::concat_channels(&[up, skip])));
        }
        let out = self.tail.forward(b, h);
        Ok(if self.cfg.residual_output { x.add(out) } else { out })
    }

    /// Forward pass drawing fresh noise maps from `rng`.
    pub fn forward<'t, T: Element, R: Rng>(
        &self,
        b: &Bound<'t, '_, T>,
        x: Var<'t, T>,
        e: Var<'t, T>,
        rng: &mut R,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Usage(format!("generator expects NCHW images, got {s:?}")));
        }
        let z = self.sample_z(s[0], s[2], s[3], rng);
        self.forward_with_z(b, x, e, &z)
    }
}

#[cfg(test)]
mod tests {
    use nt_autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { base_channels: 4, depth: 2, z_dim: 2, embed_dim: 6, ..Default::default() }
    }

    #[test]
    fn shape_contract_and_embed_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(tiny(), &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let b = Bound::new(&tape, &store, false);
        let x = tape.constant(Tensor::full([2, 3, 8, 8], 0.5));
        let e = tape.constant(Tensor::zeros([2, 6]));
        let y = g.forward(&b, x, e, &mut rng).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 8, 8]);
        assert!(y.value().all_finite());
        let bad = tape.constant(Tensor::zeros([2, 5]));
        assert!(matches!(g.forward(&b, x, bad, &mut rng), Err(Error::Config { .. })));
        let odd = tape.constant(Tensor::zeros([2, 3, 6, 6]));
        assert!(g.forward(&b, odd, e, &mut rng).is_err());
    }
}
