//! Held-out evaluation of a training state.

use nt_autodiff::nn::Bound;
use nt_autodiff::{ParamStore, Tape, Tensor};

use crate::contrastive::cosine_sim;
use crate::data::{derive_rng, domain, EvalItem};
use crate::error::{Error, Result};
use crate::image::{from_tensor, to_tensor, ImagePatch};
use crate::metrics::{akld, ks_value};
use crate::trainer::{key_embed, Networks, Real};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Key-encoder embeddings, one row per image.
pub fn embed_images(nets: &Networks, key: &ParamStore<Real>, images: &[ImagePatch]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let e = key_embed(nets, key, &to_tensor(chunk))?;
        let dim = e.shape()[1];
        out.extend(e.to_f64_vec().chunks(dim).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Generator output for clean images and embeddings (rows of `embeddings`).
pub fn generate(
    nets: &Networks,
    g: &ParamStore<Real>,
    clean: &[ImagePatch],
    embeddings: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<ImagePatch>> {
    if clean.len() != embeddings.len() {
        return Err(Error::Usage(format!("{} images but {} embeddings", clean.len(), embeddings.len())));
    }
    let mut rng = derive_rng(seed, domain::EVAL_GEN, 0);
    let mut out = Vec::with_capacity(clean.len());
    for (xs, es) in clean.chunks(EVAL_CHUNK).zip(embeddings.chunks(EVAL_CHUNK)) {
        let tape = Tape::new();
        let b = Bound::new(&tape, g, false);
        let dim = es[0].len();
        let e = Tensor::<Real>::from_f64([es.len(), dim], &es.concat());
        let y = nets.generator.forward(&b, tape.constant(to_tensor(xs)), tape.constant(e), &mut rng)?;
        out.extend(from_tensor(&y.value()));
    }
    Ok(out)
}

/// Mean cosine similarity of embedding pairs sharing a label and of pairs
/// with different labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub within: f64,
    pub between: f64,
}

impl Separation {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

pub fn separation(embeddings: &[Vec<f64>], labels: &[String]) -> Result<Separation> {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let s = cosine_sim(&embeddings[i], &embeddings[j])?;
            if labels[i] == labels[j] {
                w += s;
                nw += 1;
            } else {
                b += s;
                nb += 1;
            }
        }
    }
    if nw == 0 || nb == 0 {
        return Err(Error::Usage("separation needs at least two labels with two items each".into()));
    }
    Ok(Separation { within: w / nw as f64, between: b / nb as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub akld: f64,
    pub ks: f64,
    pub separation: Option<Separation>,
}

/// AKLD and KS of generated against real noise, conditioning each item on
/// the key embedding of its reference patch, plus embedding separation by
/// item label when at least two labels are present.
pub fn evaluate(
    nets: &Networks,
    g: &ParamStore<Real>,
    key: &ParamStore<Real>,
    items: &[EvalItem],
    draws: usize,
    seed: u64,
) -> Result<EvalReport> {
    if items.is_empty() || draws == 0 {
        return Err(Error::Usage("evaluation needs items and at least one draw".into()));
    }
    let clean: Vec<ImagePatch> = items.iter().map(|i| i.clean.clone()).collect();
    let real: Vec<ImagePatch> = items.iter().map(|i| i.noisy.clone()).collect();
    let refs: Vec<ImagePatch> = items.iter().map(|i| i.reference.clone()).collect();
    let e = embed_images(nets, key, &refs)?;
    let mut fakes: Vec<Vec<ImagePatch>> = vec![Vec::with_capacity(draws); items.len()];
    let mut first = Vec::new();
    for d in 0..draws {
        let gen = generate(nets, g, &clean, &e, seed.wrapping_add(d as u64))?;
        if d == 0 {
            first = gen.clone();
        }
        for (slot, f) in fakes.iter_mut().zip(gen) {
            slot.push(f);
        }
    }
    let akld_v = akld(&real, &fakes, &clean)?;
    let ks = ks_value(&real, &first, &clean)?;
    let labels: Vec<String> = items.iter().map(|i| i.label.clone()).collect();
    let emb = embed_images(nets, key, &real)?;
    let separation = separation(&emb, &labels).ok();
    Ok(EvalReport { akld: akld_v, ks, separation })
}
