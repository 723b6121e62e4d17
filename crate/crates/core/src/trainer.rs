//! Alternating discriminator/generator updates with a momentum key encoder
//! and a queue of negative keys.

use nt_autodiff::nn::Bound;
use nt_autodiff::optim::{Adam, AdamConfig};
use nt_autodiff::{ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, momentum_update, ContrastiveConfig, EmbeddingQueue};
use crate::data::{derive_rng, domain, TrainingBatch};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::to_tensor;
use crate::losses::{self, Ablation, DiscriminatorTerms, GeneratorTerms, LossWeights, ReconLossConfig};

/// Training runs in single precision.
pub type Real = f32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps_per_epoch: u64,
    pub epochs: u64,
    pub batch: usize,
    pub patch: usize,
    pub ablation: Ablation,
    /// Generator draws per evaluation item for AKLD.
    pub eval_draws: usize,
    /// Steps between metric-log lines.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            weight_decay: 1e-7,
            steps_per_epoch: 2000,
            epochs: 200,
            batch: 32,
            patch: 96,
            ablation: Ablation::default(),
            eval_draws: 50,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr", self.lr),
            ("train.beta1", self.beta1),
            ("train.beta2", self.beta2),
            ("train.weight_decay", self.weight_decay),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.lr == 0.0 {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (k, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if v >= 1.0 {
                return Err(Error::config(k, format!("must be < 1, got {v}")));
            }
        }
        for (k, v) in [
            ("train.steps_per_epoch", self.steps_per_epoch as usize),
            ("train.batch", self.batch),
            ("train.patch", self.patch),
            ("train.eval_draws", self.eval_draws),
            ("train.log_every", self.log_every as usize),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w_noise_fm: f64,
    pub w_gan_fm: f64,
    pub w_recon: f64,
    pub recon: ReconLossConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { w_noise_fm: w.w_noise_fm, w_gan_fm: w.w_gan_fm, w_recon: w.w_recon, recon: ReconLossConfig::default() }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { w_noise_fm: self.w_noise_fm, w_gan_fm: self.w_gan_fm, w_recon: self.w_recon }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        self.recon.validate()
    }
}

/// Everything a training step needs besides the batch and state.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub contrastive: ContrastiveConfig,
    pub losses: LossConfig,
    pub ablation: Ablation,
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub generator: Generator,
    pub discriminator: Discriminator,
}

/// Full mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub nets: Networks,
    pub g: ParamStore<Real>,
    pub d: ParamStore<Real>,
    /// Momentum copy of `d`; only its noise branch is ever evaluated.
    pub key: ParamStore<Real>,
    pub opt_g: Adam<Real>,
    pub opt_d: Adam<Real>,
    pub queue: EmbeddingQueue,
    /// Number of completed steps.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(
        gcfg: GeneratorConfig,
        dcfg: DiscriminatorConfig,
        ccfg: &ContrastiveConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if gcfg.embed_dim != dcfg.embed_dim {
            return Err(Error::config(
                "generator.embed_dim",
                format!("{} differs from discriminator.embed_dim {}", gcfg.embed_dim, dcfg.embed_dim),
            ));
        }
        if gcfg.image_channels != dcfg.image_channels {
            return Err(Error::config("generator.image_channels", "differs from discriminator.image_channels"));
        }
        let mut rng = derive_rng(seed, domain::INIT, 0);
        let mut g = ParamStore::new();
        let generator = Generator::new(gcfg, &mut g, &mut rng)?;
        let mut d = ParamStore::new();
        let discriminator = Discriminator::new(dcfg, &mut d, &mut rng)?;
        let key = d.clone();
        let adam = train.adam();
        Ok(Self {
            nets: Networks { generator, discriminator },
            opt_g: Adam::new(adam, &g),
            opt_d: Adam::new(adam, &d),
            g,
            d,
            key,
            queue: EmbeddingQueue::new(ccfg.queue_size, dcfg.embed_dim),
            step: 0,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub d: DiscriminatorTerms<f64>,
    pub g: GeneratorTerms<f64>,
    pub loss_d: f64,
    pub loss_g: f64,
    pub queue_len: usize,
}

impl StepRecord {
    /// `(name, value)` pairs for the metrics log.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("loss_d", self.loss_d),
            ("loss_g", self.loss_g),
            ("d_noise", self.d.noise),
            ("d_gan", self.d.gan),
            ("g_noise", self.g.noise),
            ("g_gan", self.g.gan),
            ("g_fm_noise", self.g.fm_noise),
            ("g_fm_gan", self.g.fm_gan),
            ("g_recon", self.g.recon),
            ("queue_len", self.queue_len as f64),
        ]
    }
}

fn check_finite(step: u64, entries: &[(&'static str, f64)]) -> Result<()> {
    if entries.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let parts: Vec<String> = entries.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::Numeric(format!("non-finite loss at batch {step}: {}", parts.join(", "))))
}

/// Key-encoder embeddings of a batch of images, without gradient.
pub fn key_embed(nets: &Networks, key: &ParamStore<Real>, images: &Tensor<Real>) -> Result<Tensor<Real>> {
    let tape = Tape::new();
    let b = Bound::new(&tape, key, false);
    let out = nets.discriminator.embed_noise(&b, tape.constant(images.clone()))?;
    Ok((*out.embedding.value()).clone())
}

/// One alternating update:
/// 1. embed references and positives with the key encoder;
/// 2. generate fakes without gradient and update D;
/// 3. regenerate with fresh noise maps and update G against the updated D;
/// 4. move the key encoder towards D and enqueue this step's positive keys.
pub fn train_step(state: &mut TrainState, batch: &TrainingBatch, cfg: &StepConfig) -> Result<StepRecord> {
    let step = state.step;
    let tau = cfg.contrastive.tau;
    let weights = cfg.losses.weights();
    state.g.spectral_step();
    state.d.spectral_step();
    state.key.spectral_step();

    let x = to_tensor::<Real>(&batch.x);
    let y = to_tensor::<Real>(&batch.y);
    let y_pos = to_tensor::<Real>(&batch.y_pos);
    let k_pos = key_embed(&state.nets, &state.key, &y_pos)?;
    let e = if batch.y_ref == batch.y_pos { k_pos.clone() } else { key_embed(&state.nets, &state.key, &to_tensor(&batch.y_ref))? };

    let gen = &state.nets.generator;
    let disc = &state.nets.discriminator;

    let fake = {
        let tape = Tape::new();
        let b = Bound::new(&tape, &state.g, false);
        let mut rng = derive_rng(state.seed, domain::GEN_D, step);
        let out = gen.forward(&b, tape.constant(x.clone()), tape.constant(e.clone()), &mut rng)?;
        (*out.value()).clone()
    };

    let d_terms = {
        let tape = Tape::new();
        let b = Bound::new(&tape, &state.d, true);
        let (xv, ev, yv) = (tape.constant(x.clone()), tape.constant(e.clone()), tape.constant(y.clone()));
        let q = disc.embed_noise(&b, yv)?.embedding;
        let noise = contrastive_loss(q, tape.constant(k_pos.clone()), &state.queue, tau);
        let real = disc.score_gan(&b, xv, ev, yv)?;
        let fake = disc.score_gan(&b, xv, ev, tape.constant(fake))?;
        let terms = DiscriminatorTerms { noise, gan: losses::gan_d(&real.scores, &fake.scores) };
        let total = terms.total(&cfg.ablation);
        let values = terms.values();
        check_finite(step, &[("d_noise", values.noise), ("d_gan", values.gan)])?;
        let grads = tape.backward(total);
        state.opt_d.step(&mut state.d, &grads);
        values
    };

    let g_terms = {
        let tape = Tape::new();
        let bg = Bound::new(&tape, &state.g, true);
        let bd = Bound::new(&tape, &state.d, false);
        let (xv, ev, yv) = (tape.constant(x), tape.constant(e), tape.constant(y));
        let mut rng = derive_rng(state.seed, domain::GEN_G, step);
        let fake = gen.forward(&bg, xv, ev, &mut rng)?;
        let q_fake = disc.embed_noise(&bd, fake)?;
        let q_real = disc.embed_noise(&bd, yv)?;
        let gan_fake = disc.score_gan(&bd, xv, ev, fake)?;
        let gan_real = disc.score_gan(&bd, xv, ev, yv)?;
        let terms = GeneratorTerms {
            noise: contrastive_loss(q_fake.embedding, tape.constant(k_pos.clone()), &state.queue, tau),
            gan: losses::gan_g(&gan_fake.scores),
            fm_noise: losses::fm_noise(&q_real.features, &q_fake.features),
            fm_gan: losses::fm_gan(&gan_real.features, &gan_fake.features),
            recon: losses::recon(yv, fake, &cfg.losses.recon),
        };
        let total = terms.total(&weights, &cfg.ablation);
        let values = terms.values();
        check_finite(
            step,
            &[
                ("g_noise", values.noise),
                ("g_gan", values.gan),
                ("g_fm_noise", values.fm_noise),
                ("g_fm_gan", values.fm_gan),
                ("g_recon", values.recon),
            ],
        )?;
        let grads = tape.backward(total);
        state.opt_g.step(&mut state.g, &grads);
        values
    };

    momentum_update(&state.d, &mut state.key, cfg.contrastive.momentum)?;
    state.queue.enqueue_tensor(&k_pos);
    state.step += 1;

    Ok(StepRecord {
        step: state.step,
        loss_d: d_terms.total(&cfg.ablation),
        loss_g: g_terms.total(&weights, &cfg.ablation),
        d: d_terms,
        g: g_terms,
        queue_len: state.queue.len(),
    })
}
