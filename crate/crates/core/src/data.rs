//! Training data: paired real images from a manifest, a pool of clean images
//! for synthetic corruption, and deterministic batch assembly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::noise::{sample_noisy, NoiseSpec, Regime};

/// Independent deterministic stream for `(seed, domain, index)`.
pub fn derive_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub mod domain {
    pub const BATCH: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const PROCEDURAL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const GEN_D: u64 = 5;
    pub const GEN_G: u64 = 6;
    pub const EVAL_GEN: u64 = 7;
    pub const DENOISE: u64 = 8;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The reference patch is the positive patch.
    #[default]
    Paired,
    /// The reference patch is an independent patch of the same noise source.
    Unpaired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Tab-separated `clean, noisy, group` manifest of real pairs.
    pub manifest: Option<PathBuf>,
    /// Folder of clean images for synthetic corruption.
    pub clean_dir: Option<PathBuf>,
    /// Procedurally generated clean images used when `clean_dir` is unset.
    pub procedural_clean: usize,
    pub procedural_size: usize,
    /// Share of each batch drawn from the real manifest.
    pub real_fraction: f64,
    pub augment: bool,
    /// Clip noisy training patches to `[0, 1]`.
    pub clip_noisy: bool,
    pub reference: ReferenceMode,
    /// Noise laws for synthetic samples; empty means drawing from the
    /// training ranges.
    pub synthetic_noise: Vec<NoiseSpec>,
    /// Background batch builders; 0 builds batches inline.
    pub workers: usize,
    /// Held-out real pairs for evaluation; synthetic items are used otherwise.
    pub eval_manifest: Option<PathBuf>,
    pub eval_items: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            clean_dir: None,
            procedural_clean: 64,
            procedural_size: 128,
            real_fraction: 0.5,
            augment: true,
            clip_noisy: false,
            reference: ReferenceMode::Paired,
            synthetic_noise: Vec::new(),
            workers: 0,
            eval_manifest: None,
            eval_items: 16,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return Err(Error::config("data.real_fraction", format!("must lie in [0, 1], got {}", self.real_fraction)));
        }
        if self.clean_dir.is_none() && self.procedural_clean == 0 {
            return Err(Error::config("data.procedural_clean", "no clean images: set data.clean_dir or a positive count"));
        }
        for (i, s) in self.synthetic_noise.iter().enumerate() {
            s.validate().map_err(|e| match e {
                Error::Config { key, msg } => Error::config(format!("data.synthetic_noise[{i}].{key}"), msg),
                other => other,
            })?;
            if s.outside_training_range() {
                warn!("data.synthetic_noise[{i}] = {s} lies outside the usual training ranges");
            }
        }
        if self.eval_items == 0 {
            return Err(Error::config("data.eval_items", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub clean: PathBuf,
    pub noisy: PathBuf,
    pub group: String,
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, format!("cannot read manifest: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::data(path, format!("line {}: expected 3 tab-separated columns, found {}", i + 1, cols.len())));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(Record { clean: resolve(cols[0]), noisy: resolve(cols[1]), group: cols[2].to_string() });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("{}\t{}\t{}\n", r.clean.display(), r.noisy.display(), r.group));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Builds records from an SIDD-Medium style tree, where every scene folder
/// holds `*GT_SRGB*` and `*NOISY_SRGB*` files sharing a suffix. The scene
/// folder name becomes the group.
pub fn sidd_records(root: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::data(root, e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !entry.file_type().is_file() || !name.contains("GT_SRGB") {
            continue;
        }
        let noisy = entry.path().with_file_name(name.replace("GT_SRGB", "NOISY_SRGB"));
        if !noisy.exists() {
            warn!("no noisy partner for {}", entry.path().display());
            continue;
        }
        let group = entry
            .path()
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(Record { clean: entry.path().to_path_buf(), noisy, group });
    }
    if out.is_empty() {
        return Err(Error::data(root, "no GT_SRGB/NOISY_SRGB pairs found"));
    }
    Ok(out)
}

/// Decoded clean/noisy pairs with their noise-source group.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<(ImagePatch, ImagePatch)>,
    groups: Vec<String>,
    by_group: HashMap<String, Vec<usize>>,
}

impl PairedDataset {
    pub fn from_pairs(items: Vec<(ImagePatch, ImagePatch, String)>) -> Result<Self> {
        let mut pairs = Vec::with_capacity(items.len());
        let mut groups = Vec::with_capacity(items.len());
        let mut by_group: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (clean, noisy, group)) in items.into_iter().enumerate() {
            if clean.dims() != noisy.dims() {
                return Err(Error::data(
                    format!("<pair {i}>"),
                    format!("clean {:?} and noisy {:?} differ in size", clean.dims(), noisy.dims()),
                ));
            }
            by_group.entry(group.clone()).or_default().push(i);
            pairs.push((clean, noisy));
            groups.push(group);
        }
        Ok(Self { pairs, groups, by_group })
    }

    /// Loads every record, checking sizes against each other and `min_size`.
    pub fn load(manifest: &Path, min_size: usize) -> Result<Self> {
        let records = read_manifest(manifest)?;
        if records.is_empty() {
            return Err(Error::data(manifest, "manifest lists no images"));
        }
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            let clean = ImagePatch::load(&r.clean)?;
            let noisy = ImagePatch::load(&r.noisy)?;
            if clean.dims() != noisy.dims() {
                return Err(Error::data(
                    &r.noisy,
                    format!("size {:?} differs from its clean image {:?}", noisy.dims(), clean.dims()),
                ));
            }
            if clean.height() < min_size || clean.width() < min_size {
                return Err(Error::data(&r.noisy, format!("smaller than the {min_size}px patch size")));
            }
            items.push((clean, noisy, r.group));
        }
        Self::from_pairs(items)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> (&ImagePatch, &ImagePatch) {
        let (c, n) = &self.pairs[i];
        (c, n)
    }

    pub fn group(&self, i: usize) -> &str {
        &self.groups[i]
    }

    pub fn group_members(&self, group: &str) -> &[usize] {
        self.by_group.get(group).map_or(&[], |v| v.as_slice())
    }
}

/// Clean images available for synthetic corruption.
#[derive(Clone, Debug)]
pub struct CleanPool {
    images: Vec<ImagePatch>,
}

impl CleanPool {
    pub fn new(images: Vec<ImagePatch>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::config("data", "the clean image pool is empty"));
        }
        Ok(Self { images })
    }

    /// All PNG/JPEG files below `dir`, in path order.
    pub fn from_dir(dir: &Path, min_size: usize) -> Result<Self> {
        let mut images = Vec::new();
        for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::data(dir, e.to_string()))?;
            let ext = entry.path().extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            if !entry.file_type().is_file() || !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            let img = ImagePatch::load(entry.path())?;
            if img.height() < min_size || img.width() < min_size {
                warn!("skipping {}: smaller than {min_size}px", entry.path().display());
                continue;
            }
            images.push(img);
        }
        if images.is_empty() {
            return Err(Error::data(dir, "no usable clean images"));
        }
        Ok(Self { images })
    }

    pub fn procedural(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::new((0..count).map(|i| ImagePatch::procedural(size, size, &mut derive_rng(seed, domain::PROCEDURAL, i as u64))).collect())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &ImagePatch {
        &self.images[i]
    }
}

/// Top-left corners of two patches; distinct unless only one position exists.
pub fn positive_pair_coords<R: Rng>(
    h: usize,
    w: usize,
    patch: usize,
    rng: &mut R,
) -> Option<((usize, usize), (usize, usize))> {
    if h < patch || w < patch {
        return None;
    }
    let (ny, nx) = (h - patch + 1, w - patch + 1);
    let a = (rng.gen_range(0..ny), rng.gen_range(0..nx));
    if ny * nx == 1 {
        return Some((a, a));
    }
    loop {
        let b = (rng.gen_range(0..ny), rng.gen_range(0..nx));
        if b != a {
            return Some((a, b));
        }
    }
}

/// Two crops of one noisy image at distinct positions.
pub fn extract_positive_pair<R: Rng>(
    noisy: &ImagePatch,
    patch: usize,
    source: &Path,
    rng: &mut R,
) -> Result<(ImagePatch, ImagePatch)> {
    let ((y0, x0), (y1, x1)) = positive_pair_coords(noisy.height(), noisy.width(), patch, rng).ok_or_else(|| {
        Error::data(source, format!("{}x{} image is smaller than the {patch}px patch", noisy.height(), noisy.width()))
    })?;
    if (y0, x0) == (y1, x1) {
        warn!("{} admits a single {patch}px patch; positive pair is one crop twice", source.display());
    }
    Ok((noisy.crop(y0, x0, patch, patch), noisy.crop(y1, x1, patch, patch)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Real { group: String },
    Synthetic(NoiseSpec),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real { group } => write!(f, "real:{group}"),
            Provenance::Synthetic(s) => write!(f, "synthetic:{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub step: u64,
    pub x: Vec<ImagePatch>,
    pub y: Vec<ImagePatch>,
    pub y_pos: Vec<ImagePatch>,
    pub y_ref: Vec<ImagePatch>,
    pub provenance: Vec<Provenance>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batch: usize,
    pub patch: usize,
    pub n_real: usize,
    pub augment: bool,
    pub clip_noisy: bool,
    pub reference: ReferenceMode,
    pub synthetic_noise: Vec<NoiseSpec>,
}

impl BatchPlan {
    pub fn new(cfg: &DataConfig, batch: usize, patch: usize) -> Self {
        Self {
            batch,
            patch,
            n_real: (batch as f64 * cfg.real_fraction).floor() as usize,
            augment: cfg.augment,
            clip_noisy: cfg.clip_noisy,
            reference: cfg.reference,
            synthetic_noise: cfg.synthetic_noise.clone(),
        }
    }

    fn spec<R: Rng>(&self, rng: &mut R) -> NoiseSpec {
        if self.synthetic_noise.is_empty() {
            NoiseSpec::sample(Regime::Train, rng)
        } else {
            self.synthetic_noise[rng.gen_range(0..self.synthetic_noise.len())]
        }
    }
}

/// Builds batches as a pure function of `(seed, step)`.
#[derive(Clone, Debug)]
pub struct BatchSource {
    pub plan: BatchPlan,
    pub real: Option<Arc<PairedDataset>>,
    pub clean: Arc<CleanPool>,
    pub seed: u64,
}

struct Sample {
    x: ImagePatch,
    y: ImagePatch,
    y_pos: ImagePatch,
    y_ref: ImagePatch,
    provenance: Provenance,
}

impl BatchSource {
    pub fn new(plan: BatchPlan, real: Option<Arc<PairedDataset>>, clean: Arc<CleanPool>, seed: u64) -> Result<Self> {
        if plan.batch == 0 || plan.patch == 0 {
            return Err(Error::config("train.batch", "batch and patch sizes must be positive"));
        }
        if plan.n_real > 0 && real.as_ref().is_none_or(|r| r.is_empty()) {
            return Err(Error::config("data.manifest", "real samples requested but the real dataset is empty"));
        }
        if clean.is_empty() && plan.n_real < plan.batch {
            return Err(Error::config("data", "synthetic samples requested but the clean pool is empty"));
        }
        let too_small = (0..clean.len()).find(|&i| {
            let c = clean.get(i);
            c.height() < plan.patch || c.width() < plan.patch
        });
        if let Some(i) = too_small {
            return Err(Error::data(format!("<clean image {i}>"), format!("smaller than the {}px patch", plan.patch)));
        }
        Ok(Self { plan, real, clean, seed })
    }

    pub fn batch(&self, step: u64) -> Result<TrainingBatch> {
        let mut rng = derive_rng(self.seed, domain::BATCH, step);
        let mut out = TrainingBatch {
            step,
            x: Vec::with_capacity(self.plan.batch),
            y: Vec::with_capacity(self.plan.batch),
            y_pos: Vec::with_capacity(self.plan.batch),
            y_ref: Vec::with_capacity(self.plan.batch),
            provenance: Vec::with_capacity(self.plan.batch),
        };
        for i in 0..self.plan.batch {
            let mut s = if i < self.plan.n_real { self.real_sample(&mut rng)? } else { self.synthetic_sample(&mut rng)? };
            if self.plan.clip_noisy {
                for img in [&mut s.y, &mut s.y_pos, &mut s.y_ref] {
                    *img = img.clip01();
                }
            }
            if self.plan.augment {
                let k = rng.gen_range(0..8u8);
                for img in [&mut s.x, &mut s.y, &mut s.y_pos, &mut s.y_ref] {
                    *img = img.dihedral(k);
                }
            }
            out.x.push(s.x);
            out.y.push(s.y);
            out.y_pos.push(s.y_pos);
            out.y_ref.push(s.y_ref);
            out.provenance.push(s.provenance);
        }
        Ok(out)
    }

    fn real_sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let ds = self.real.as_ref().expect("checked at construction");
        let p = self.plan.patch;
        let r = rng.gen_range(0..ds.len());
        let (clean, noisy) = ds.pair(r);
        let source = PathBuf::from(format!("<{} #{r}>", ds.group(r)));
        let ((y0, x0), (y1, x1)) = positive_pair_coords(noisy.height(), noisy.width(), p, rng)
            .ok_or_else(|| Error::data(&source, "image smaller than the patch size"))?;
        let x = clean.crop(y0, x0, p, p);
        let y = noisy.crop(y0, x0, p, p);
        let y_pos = noisy.crop(y1, x1, p, p);
        let y_ref = match self.plan.reference {
            ReferenceMode::Paired => y_pos.clone(),
            ReferenceMode::Unpaired => {
                let members = ds.group_members(ds.group(r));
                let other = members[rng.gen_range(0..members.len())];
                let img = ds.pair(other).1;
                let ry = rng.gen_range(0..=img.height() - p);
                let rx = rng.gen_range(0..=img.width() - p);
                img.crop(ry, rx, p, p)
            }
        };
        Ok(Sample { x, y, y_pos, y_ref, provenance: Provenance::Real { group: ds.group(r).to_string() } })
    }

    fn synthetic_sample(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let p = self.plan.patch;
        let img = self.clean.get(rng.gen_range(0..self.clean.len()));
        let spec = self.plan.spec(rng);
        let ((y0, x0), (y1, x1)) = positive_pair_coords(img.height(), img.width(), p, rng).expect("checked at construction");
        let x = img.crop(y0, x0, p, p);
        let y = sample_noisy(&x, &spec, rng)?;
        let y_pos = sample_noisy(&img.crop(y1, x1, p, p), &spec, rng)?;
        let y_ref = match self.plan.reference {
            ReferenceMode::Paired => y_pos.clone(),
            ReferenceMode::Unpaired => {
                let ry = rng.gen_range(0..=img.height() - p);
                let rx = rng.gen_range(0..=img.width() - p);
                sample_noisy(&img.crop(ry, rx, p, p), &spec, rng)?
            }
        };
        Ok(Sample { x, y, y_pos, y_ref, provenance: Provenance::Synthetic(spec) })
    }
}

/// Builds batches for consecutive steps on background threads and hands
/// them out in step order.
pub struct Prefetcher {
    source: Arc<BatchSource>,
    next: u64,
    end: u64,
    rx: Option<Receiver<(u64, Result<TrainingBatch>)>>,
    pending: BTreeMap<u64, Result<TrainingBatch>>,
    workers: Vec<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn new(source: Arc<BatchSource>, start: u64, end: u64, workers: usize) -> Self {
        let mut pf = Self { source, next: start, end, rx: None, pending: BTreeMap::new(), workers: Vec::new() };
        if workers > 0 && end > start {
            let (tx, rx) = mpsc::sync_channel(2 * workers);
            for w in 0..workers as u64 {
                let tx = tx.clone();
                let src = Arc::clone(&pf.source);
                pf.workers.push(std::thread::spawn(move || {
                    let mut step = start + w;
                    while step < end {
                        if tx.send((step, src.batch(step))).is_err() {
                            return;
                        }
                        step += workers as u64;
                    }
                }));
            }
            pf.rx = Some(rx);
        }
        pf
    }
}

impl Iterator for Prefetcher {
    type Item = Result<TrainingBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let step = self.next;
        self.next += 1;
        let Some(rx) = &self.rx else {
            return Some(self.source.batch(step));
        };
        loop {
            if let Some(b) = self.pending.remove(&step) {
                return Some(b);
            }
            match rx.recv() {
                Ok((s, b)) => {
                    self.pending.insert(s, b);
                }
                Err(_) => return Some(self.source.batch(step)),
            }
        }
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.rx = None;
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}

/// A held-out item: clean patch, its real noisy version, and a reference
/// patch carrying the same noise.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub clean: ImagePatch,
    pub noisy: ImagePatch,
    pub reference: ImagePatch,
    pub label: String,
}

/// Fixed evaluation items drawn from real pairs.
pub fn eval_items_real(ds: &PairedDataset, n: usize, patch: usize, seed: u64) -> Result<Vec<EvalItem>> {
    (0..n.min(ds.len().max(1) * 4))
        .map(|i| {
            let mut rng = derive_rng(seed, domain::EVAL, i as u64);
            let r = i % ds.len();
            let (clean, noisy) = ds.pair(r);
            let ((y0, x0), (y1, x1)) = positive_pair_coords(noisy.height(), noisy.width(), patch, &mut rng)
                .ok_or_else(|| Error::data(format!("<eval {r}>"), "image smaller than the patch size"))?;
            Ok(EvalItem {
                clean: clean.crop(y0, x0, patch, patch),
                noisy: noisy.crop(y0, x0, patch, patch),
                reference: noisy.crop(y1, x1, patch, patch),
                label: ds.group(r).to_string(),
            })
        })
        .collect()
}

/// Fixed synthetic evaluation items: procedural clean images, noise laws
/// cycling through `specs` (or drawn from the training ranges when empty).
pub fn eval_items_synthetic(specs: &[NoiseSpec], n: usize, patch: usize, seed: u64) -> Result<Vec<EvalItem>> {
    (0..n)
        .map(|i| {
            let mut rng = derive_rng(seed, domain::EVAL, i as u64);
            let img = ImagePatch::procedural(2 * patch, 2 * patch, &mut rng);
            let spec = if specs.is_empty() { NoiseSpec::sample(Regime::Train, &mut rng) } else { specs[i % specs.len()] };
            let ((y0, x0), (y1, x1)) = positive_pair_coords(img.height(), img.width(), patch, &mut rng).expect("image is larger than the patch");
            let clean = img.crop(y0, x0, patch, patch);
            Ok(EvalItem {
                noisy: sample_noisy(&clean, &spec, &mut rng)?,
                reference: sample_noisy(&img.crop(y1, x1, patch, patch), &spec, &mut rng)?,
                clean,
                label: spec.to_string(),
            })
        })
        .collect()
}
