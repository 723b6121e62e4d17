//! Cosine similarity, InfoNCE, the negative-key queue and the momentum
//! update of the key encoder.

use nt_autodiff::{Element, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    /// Store the negative queue in checkpoints so a resumed run continues exactly.
    pub persist_queue: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.1, momentum: 0.999, queue_size: 4096, persist_queue: false }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("contrastive.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.queue_size == 0 {
            return Err(Error::config("contrastive.queue_size", "must be positive"));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::config("contrastive.tau", format!("must be > 0, got {tau}")))
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `u.v / ((|u| + eps) (|v| + eps))`; zero vectors are rejected.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Usage(format!("cosine_sim of {}- and {}-vectors", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / ((nu + NORM_EPS) * (nv + NORM_EPS)))
}

/// InfoNCE for one query against one positive key and a set of negatives.
pub fn info_nce<'a>(
    q: &[f64],
    k_pos: &[f64],
    negatives: impl IntoIterator<Item = &'a [f64]>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let mut logits = vec![cosine_sim(q, k_pos)? / tau];
    for k in negatives {
        logits.push(cosine_sim(q, k)? / tau);
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok((lse - logits[0]).max(0.0))
}

/// Fixed-capacity FIFO of embeddings, stored as a ring buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingQueue {
    dim: usize,
    capacity: usize,
    len: usize,
    cursor: usize,
    data: Vec<f64>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue capacity and dimension must be positive");
        Self { dim, capacity, len: 0, cursor: 0, data: vec![0.0; capacity * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn push(&mut self, key: &[f64]) {
        assert_eq!(key.len(), self.dim, "queue entry dimension");
        let s = self.cursor * self.dim;
        self.data[s..s + self.dim].copy_from_slice(key);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Appends the rows of a `(n, dim)` block, evicting the oldest entries.
    pub fn enqueue(&mut self, keys: &[f64]) {
        assert_eq!(keys.len() % self.dim, 0, "enqueue block is not a whole number of rows");
        let rows = keys.len() / self.dim;
        let skip = rows.saturating_sub(self.capacity);
        for row in keys.chunks(self.dim).skip(skip) {
            self.push(row);
        }
    }

    pub fn enqueue_tensor<T: Element>(&mut self, keys: &Tensor<T>) {
        self.enqueue(&keys.to_f64_vec());
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.data[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Entries oldest first as a `(len, dim)` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.iter().flat_map(|r| r.iter().map(|&v| T::from_f64(v))).collect();
        Tensor::new([self.len, self.dim], data)
    }

    /// Raw state for checkpointing: `(len, cursor, ring buffer)`.
    pub fn raw_parts(&self) -> (usize, usize, &[f64]) {
        (self.len, self.cursor, &self.data)
    }

    pub fn from_raw_parts(capacity: usize, dim: usize, len: usize, cursor: usize, data: Vec<f64>) -> Result<Self> {
        if capacity == 0 || dim == 0 || len > capacity || cursor >= capacity || data.len() != capacity * dim {
            return Err(Error::Checkpoint(format!(
                "inconsistent queue state: capacity {capacity}, dim {dim}, len {len}, cursor {cursor}, {} values",
                data.len()
            )));
        }
        if len < capacity && cursor != len {
            return Err(Error::Checkpoint("queue cursor does not match its length".into()));
        }
        Ok(Self { dim, capacity, len, cursor, data })
    }
}

/// `key <- m * key + (1 - m) * query` over every parameter.
pub fn momentum_update<T: Element>(query: &ParamStore<T>, key: &mut ParamStore<T>, m: f64) -> Result<()> {
    key.check_isomorphic(query).map_err(Error::Checkpoint)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("contrastive.momentum", format!("must lie in [0, 1], got {m}")));
    }
    let (mk, mq) = (T::from_f64(m), T::from_f64(1.0 - m));
    for id in query.ids() {
        let q = query.get(id).data();
        for (k, &qv) in key.get_mut(id).data_mut().iter_mut().zip(q) {
            *k = mk * *k + mq * qv;
        }
    }
    Ok(())
}

/// Batch InfoNCE with an explicit negative set, averaged over rows.
///
/// `q` and `k_pos` are `(n, d)`; `negatives` is `(m, d)` and may be empty, in
/// which case every row's loss is zero.
pub fn info_nce_loss<'t, T: Element>(q: Var<'t, T>, k_pos: Var<'t, T>, negatives: Option<Var<'t, T>>, tau: f64) -> Var<'t, T> {
    let qn = q.l2_normalize_rows(NORM_EPS);
    let kn = k_pos.l2_normalize_rows(NORM_EPS);
    let pos = qn.mul(kn).row_sums();
    let logits = match negatives {
        Some(neg) => {
            let nn = neg.l2_normalize_rows(NORM_EPS);
            Var::concat_cols(&[pos, qn.linear(nn, None)])
        }
        None => pos,
    };
    let n = q.shape()[0];
    logits.mul_scalar(1.0 / tau).cross_entropy(&vec![0; n]).mean()
}

/// In-batch InfoNCE: row `i` of `k_pos` is the positive for query `i` and
/// the other rows serve as negatives.
pub fn info_nce_in_batch<'t, T: Element>(q: Var<'t, T>, k_pos: Var<'t, T>, tau: f64) -> Var<'t, T> {
    let qn = q.l2_normalize_rows(NORM_EPS);
    let kn = k_pos.l2_normalize_rows(NORM_EPS);
    let n = q.shape()[0];
    let targets: Vec<usize> = (0..n).collect();
    qn.linear(kn, None).mul_scalar(1.0 / tau).cross_entropy(&targets).mean()
}

/// The contrastive term used in training: queue negatives once any exist,
/// in-batch negatives while the queue is still empty.
pub fn contrastive_loss<'t, T: Element>(q: Var<'t, T>, k_pos: Var<'t, T>, queue: &EmbeddingQueue, tau: f64) -> Var<'t, T> {
    if queue.is_empty() {
        info_nce_in_batch(q, k_pos, tau)
    } else {
        let neg = q.tape().constant(queue.to_tensor());
        info_nce_loss(q, k_pos, Some(neg), tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_sim(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn info_nce_closed_forms() {
        let q = [1.0, 0.0];
        assert!(info_nce(&q, &q, std::iter::empty(), 0.1).unwrap() < 1e-12);
        let neg = [0.0, 1.0];
        let l = info_nce(&q, &q, [&neg[..]], 0.1).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);
        assert!(info_nce(&q, &q, std::iter::empty(), 0.0).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut qu = EmbeddingQueue::new(4, 1);
        qu.enqueue(&[1.0, 2.0]);
        assert_eq!(qu.len(), 2);
        qu.enqueue(&[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(qu.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![3.0, 4.0, 5.0, 6.0]);
        qu.enqueue(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(qu.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![9.0, 10.0, 11.0, 12.0]);
        let (len, cur, data) = qu.raw_parts();
        let back = EmbeddingQueue::from_raw_parts(4, 1, len, cur, data.to_vec()).unwrap();
        assert_eq!(back, qu);
    }
}
