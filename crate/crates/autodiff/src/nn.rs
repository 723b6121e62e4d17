//! Parameterized layers. Layers hold only ids; values live in a [`ParamStore`].

use rand::Rng;

use crate::{Element, ParamId, ParamStore, SpectralId, Tape, Tensor, Var};

/// A parameter store attached to a tape for one forward pass.
///
/// With `trainable == false` the parameters enter the tape as constants:
/// gradients still flow through the layer to its inputs but not into the
/// weights.
#[derive(Clone, Copy)]
pub struct Bound<'t, 's, T: Element> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    pub trainable: bool,
}

impl<'t, 's, T: Element> Bound<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { tape, store, trainable }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.tape.param(self.store, id, self.trainable)
    }

    pub fn spectral(&self, sn: SpectralId) -> Var<'t, T> {
        self.tape.spectral_weight(self.store, sn, self.trainable)
    }

    pub fn constant(&self, v: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(v)
    }
}

fn uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
}

impl ConvCfg {
    /// Stride-1 convolution with "same" zero padding.
    pub fn same(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self { c_in, c_out, kernel, stride: 1, pad: kernel / 2, bias: true, spectral: false }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cfg: ConvCfg,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub sn: Option<SpectralId>,
}

impl Conv2d {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: ConvCfg) -> Self {
        let fan_in = cfg.c_in * cfg.kernel * cfg.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight =
            store.add(format!("{name}.weight"), uniform(rng, &[cfg.c_out, cfg.c_in, cfg.kernel, cfg.kernel], bound));
        let bias = cfg.bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[cfg.c_out], bound)));
        let sn = cfg.spectral.then(|| store.add_spectral(weight, rng));
        Self { cfg, weight, bias, sn }
    }

    /// The weight as used in the forward pass (spectrally normalized if enabled).
    pub fn effective_weight<'t, T: Element>(&self, b: &Bound<'t, '_, T>) -> Var<'t, T> {
        match self.sn {
            Some(sn) => b.spectral(sn),
            None => b.param(self.weight),
        }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = self.effective_weight(b);
        let bias = self.bias.map(|id| b.param(id));
        x.conv2d(w, bias, self.cfg.stride, self.cfg.pad)
    }

    pub fn num_params(&self) -> usize {
        let c = &self.cfg;
        c.c_out * c.c_in * c.kernel * c.kernel + if c.bias { c.c_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_out, fan_in], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound)));
        Self { fan_in, fan_out, weight, bias }
    }

    pub fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(b.param(self.weight), self.bias.map(|id| b.param(id)))
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias.is_some() { self.fan_out } else { 0 }
    }
}
