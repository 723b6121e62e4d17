use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{matrix_dims, normalized_wt_u};
use crate::{Element, ParamId, ParamStore, SpectralId, Tensor};

/// Inputs handed to a node's backward rule.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum CacheKey {
    Param(u64, usize, bool),
    Spectral(u64, usize, bool),
}

/// Records a forward computation for one reverse sweep.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    cache: RefCell<HashMap<CacheKey, usize>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), cache: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        nodes.len() - 1
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: self.push(value, Vec::new(), None, false) }
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: self.push(value, Vec::new(), None, true) }
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node so
    /// gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var<'_, T> {
        let key = CacheKey::Param(store.store_id(), id.0, trainable);
        if let Some(&node) = self.cache.borrow().get(&key) {
            return Var { tape: self, id: node };
        }
        let node = self.push(store.get(id).clone(), Vec::new(), None, trainable);
        self.cache.borrow_mut().insert(key, node);
        Var { tape: self, id: node }
    }

    /// `W / sigma(W)` where `sigma = u^T W v`, `v = normalize(W^T u)` and the
    /// stored vector `u` is held fixed. Gradient flows through `sigma`.
    pub fn spectral_weight(&self, store: &ParamStore<T>, sn: SpectralId, trainable: bool) -> Var<'_, T> {
        let key = CacheKey::Spectral(store.store_id(), sn.0, trainable);
        if let Some(&node) = self.cache.borrow().get(&key) {
            return Var { tape: self, id: node };
        }
        let wid = store.spectral_weight(sn);
        let w = self.param(store, wid, trainable);
        let wv = store.get(wid);
        let (rows, cols) = matrix_dims(wv);
        let u = store.spectral_u(sn);
        let v = normalized_wt_u(wv.data(), rows, cols, u);
        let mut outer = Vec::with_capacity(rows * cols);
        for &ur in u.iter() {
            for &vc in &v {
                outer.push(T::from_f64(ur.as_f64() * vc));
            }
        }
        let outer = Tensor::new(wv.shape().to_vec(), outer);
        let sigma = w.mul_const(&outer).sum();
        let out = w.div_scalar(sigma);
        self.cache.borrow_mut().insert(key, out.id);
        out
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        Var { tape: self, id: self.push(value, ids, backward, requires_grad) }
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(rule) => {
                    let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let ctx = BackwardCtx { grad: &g, inputs: &inputs, output: &node.value, needs: &needs };
                    let pgrads = rule(&ctx);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for ((&p, pg), &need) in node.parents.iter().zip(pgrads).zip(&needs) {
                        let (Some(pg), true) = (pg, need) else { continue };
                        assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    leaves.insert(id, g);
                }
            }
        }
        let params = self
            .cache
            .borrow()
            .iter()
            .filter_map(|(k, &node)| match *k {
                CacheKey::Param(store, idx, true) => Some(((store, idx), node)),
                _ => None,
            })
            .collect();
        Gradients { leaves, params }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<(u64, usize), usize>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&var.id)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&(store.store_id(), id.0)).and_then(|node| self.leaves.get(node))
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Single-element value as f64.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v.data()[0].as_f64()
    }

    /// The same value cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }
}
