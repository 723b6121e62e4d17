use crate::{Element, Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty: `weight_decay * theta` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with per-parameter step counts. Parameters without a gradient in a
/// given step are left untouched, state included.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    slots: Vec<AdamSlot<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let slots = store
            .ids()
            .map(|id| {
                let shape = store.get(id).shape().to_vec();
                AdamSlot { step: 0, m: Tensor::zeros(shape.clone()), v: Tensor::zeros(shape) }
            })
            .collect();
        Self { cfg, slots }
    }

    pub fn slots(&self) -> &[AdamSlot<T>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [AdamSlot<T>] {
        &mut self.slots
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        assert_eq!(self.slots.len(), store.len(), "optimizer/parameter count mismatch");
        let c = self.cfg;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let wd = T::from_f64(c.weight_decay);
        let eps = T::from_f64(c.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(store, id) else { continue };
            let g = g.clone();
            let slot = &mut self.slots[id.index()];
            slot.step += 1;
            let bc1 = T::from_f64(1.0 - c.beta1.powi(slot.step as i32));
            let bc2 = T::from_f64(1.0 - c.beta2.powi(slot.step as i32));
            let lr = T::from_f64(c.lr);
            let theta = store.get_mut(id).data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i] + wd * theta[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
