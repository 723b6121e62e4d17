//! Single-file checkpoints: a magic tag, a JSON header, then named
//! little-endian `f32` arrays.
//!
//! ```text
//! "NTCKPT\0\0" | u32 version | u64 header length | header JSON | array data
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nt_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::contrastive::EmbeddingQueue;
use crate::error::{Error, Result};
use crate::trainer::{Real, TrainState};

pub const MAGIC: &[u8; 8] = b"NTCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory archive contents.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    arrays: Vec<(ArrayEntry, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, ..Default::default() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array {name}: shape/data mismatch");
        assert!(!self.index.contains_key(&name), "duplicate array {name}");
        let offset = self.arrays.last().map_or(0, |(e, d)| e.offset + d.len());
        self.index.insert(name.clone(), self.arrays.len());
        self.arrays.push((ArrayEntry { name, shape, offset }, data));
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let i = *self.index.get(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        let (e, d) = &self.arrays[i];
        Ok((&e.shape, d))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(e, _)| e.name.as_str())
    }

    /// Writes to a temporary sibling first, then renames into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&VERSION.to_le_bytes())?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            for (_, d) in &self.arrays {
                for v in d {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let data = &bytes[20 + hlen..];
        if data.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of floats"));
        }
        let floats: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut archive = Archive::new(header.kind, header.meta);
        for e in header.arrays {
            let len: usize = e.shape.iter().product();
            let slice = floats.get(e.offset..e.offset + len).ok_or_else(|| bad(&format!("array `{}` is truncated", e.name)))?;
            archive.push(e.name, e.shape, slice.to_vec());
        }
        Ok(archive)
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<Real>) {
        for id in store.ids() {
            let t = store.get(id);
            self.push(format!("{prefix}/{}", store.name(id)), t.shape().to_vec(), t.data().to_vec());
        }
        for sn in store.spectral_ids() {
            let u = store.spectral_u(sn).to_vec();
            self.push(format!("{prefix}/{}", store.spectral_name(sn)), vec![u.len()], u);
        }
    }

    /// Overwrites every value of `store` from arrays under `prefix`.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<Real>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let (shape, data) = self.get(&name)?;
            if shape != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {shape:?}, the configured network expects {:?}",
                    store.get(id).shape()
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(data);
        }
        let sns: Vec<_> = store.spectral_ids().collect();
        for sn in sns {
            let name = format!("{prefix}/{}", store.spectral_name(sn));
            let (_, data) = self.get(&name)?;
            if data.len() != store.spectral_u(sn).len() {
                return Err(Error::Checkpoint(format!("`{name}` has the wrong length")));
            }
            store.set_spectral_u(sn, data.to_vec());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    seed: u64,
    config: serde_json::Value,
    opt_g_steps: Vec<u64>,
    opt_d_steps: Vec<u64>,
    queue: QueueMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    cursor: usize,
    persisted: bool,
}

pub const TRAIN_KIND: &str = "noisetransfer-train";

/// Serializes a training state. `config` is stored verbatim for rebuilding
/// the networks; the queue is included only when `with_queue` is set.
pub fn save_train_state(path: &Path, state: &TrainState, config: serde_json::Value, with_queue: bool) -> Result<()> {
    let (len, cursor, qdata) = state.queue.raw_parts();
    let meta = TrainMeta {
        step: state.step,
        seed: state.seed,
        config,
        opt_g_steps: state.opt_g.slots().iter().map(|s| s.step).collect(),
        opt_d_steps: state.opt_d.slots().iter().map(|s| s.step).collect(),
        queue: QueueMeta { capacity: state.queue.capacity(), dim: state.queue.dim(), len, cursor, persisted: with_queue },
    };
    let mut ar = Archive::new(TRAIN_KIND, serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?);
    ar.push_store("generator", &state.g);
    ar.push_store("discriminator", &state.d);
    ar.push_store("key", &state.key);
    for (prefix, opt, store) in [("opt_g", &state.opt_g, &state.g), ("opt_d", &state.opt_d, &state.d)] {
        for (id, slot) in store.ids().zip(opt.slots()) {
            let name = store.name(id);
            ar.push(format!("{prefix}/{name}/m"), slot.m.shape().to_vec(), slot.m.data().to_vec());
            ar.push(format!("{prefix}/{name}/v"), slot.v.shape().to_vec(), slot.v.data().to_vec());
        }
    }
    if with_queue {
        // Entries come from f32 embeddings, so the narrowing is exact.
        ar.push("queue", vec![state.queue.capacity(), state.queue.dim()], qdata.iter().map(|&v| v as f32).collect());
    }
    ar.write(path)
}

/// Stored run configuration of a training checkpoint.
pub fn train_config_of(ar: &Archive) -> Result<serde_json::Value> {
    if ar.kind != TRAIN_KIND {
        return Err(Error::Checkpoint(format!("expected a training checkpoint, found `{}`", ar.kind)));
    }
    ar.meta.get("config").cloned().ok_or_else(|| Error::Checkpoint("header has no config".into()))
}

/// Restores values into `state`, which must have been built from the stored
/// configuration. Without a stored queue, the queue restarts empty.
pub fn restore_train_state(ar: &Archive, state: &mut TrainState) -> Result<()> {
    let meta: TrainMeta =
        serde_json::from_value(ar.meta.clone()).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    ar.fill_store("generator", &mut state.g)?;
    ar.fill_store("discriminator", &mut state.d)?;
    ar.fill_store("key", &mut state.key)?;
    for (prefix, steps, opt, store) in [
        ("opt_g", &meta.opt_g_steps, &mut state.opt_g, &state.g),
        ("opt_d", &meta.opt_d_steps, &mut state.opt_d, &state.d),
    ] {
        if steps.len() != store.len() {
            return Err(Error::Checkpoint(format!("{prefix}: optimizer state does not match the network")));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, slot), &st) in ids.into_iter().zip(opt.slots_mut()).zip(steps) {
            let name = store.name(id);
            let (_, m) = ar.get(&format!("{prefix}/{name}/m"))?;
            let (_, v) = ar.get(&format!("{prefix}/{name}/v"))?;
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(Error::Checkpoint(format!("{prefix}/{name}: moment size mismatch")));
            }
            slot.m = Tensor::new(slot.m.shape().to_vec(), m.to_vec());
            slot.v = Tensor::new(slot.v.shape().to_vec(), v.to_vec());
            slot.step = st;
        }
    }
    let q = &meta.queue;
    state.queue = if q.persisted {
        let (_, data) = ar.get("queue")?;
        EmbeddingQueue::from_raw_parts(q.capacity, q.dim, q.len, q.cursor, data.iter().map(|&v| v as f64).collect())?
    } else {
        EmbeddingQueue::new(state.queue.capacity(), state.queue.dim())
    };
    state.step = meta.step;
    state.seed = meta.seed;
    Ok(())
}
