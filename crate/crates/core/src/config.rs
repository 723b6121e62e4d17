//! Run configuration: a profile preset, overlaid by a TOML file, overlaid
//! by `NT_<SECTION>__<KEY>` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::data::DataConfig;
use crate::denoise::DenoiserConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::noise::NoiseSpec;
use crate::trainer::{LossConfig, StepConfig, TrainConfig};

pub const ENV_PREFIX: &str = "NT_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-scale published settings.
    #[default]
    Paper,
    /// Small networks and patches that train on a CPU in minutes.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub contrastive: ContrastiveConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub denoise: DenoiserConfig,
}

impl RunConfig {
    pub fn preset(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                profile,
                seed: 0,
                generator: GeneratorConfig::default(),
                discriminator: DiscriminatorConfig::default(),
                contrastive: ContrastiveConfig::default(),
                losses: LossConfig::default(),
                train: TrainConfig::default(),
                data: DataConfig::default(),
                denoise: DenoiserConfig::default(),
            },
            Profile::Toy => Self {
                profile,
                seed: 0,
                generator: GeneratorConfig {
                    base_channels: 8,
                    depth: 2,
                    z_dim: 8,
                    embed_dim: 64,
                    residual_output: true,
                    ..GeneratorConfig::default()
                },
                discriminator: DiscriminatorConfig { base_channels: 8, embed_dim: 64, mlp_hidden: 128, ..Default::default() },
                contrastive: ContrastiveConfig { momentum: 0.99, queue_size: 256, ..Default::default() },
                losses: LossConfig::default(),
                train: TrainConfig {
                    lr: 2e-4,
                    steps_per_epoch: 500,
                    epochs: 4,
                    batch: 8,
                    patch: 32,
                    eval_draws: 10,
                    log_every: 10,
                    ..Default::default()
                },
                data: DataConfig {
                    real_fraction: 0.0,
                    procedural_clean: 64,
                    procedural_size: 64,
                    synthetic_noise: vec![NoiseSpec::gaussian(15.0), NoiseSpec::gaussian(50.0)],
                    eval_items: 16,
                    ..Default::default()
                },
                denoise: DenoiserConfig {
                    layers: 6,
                    channels: 24,
                    epochs: 4,
                    steps_per_epoch: 150,
                    pairs: 256,
                    ..Default::default()
                },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.contrastive.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.denoise.validate()?;
        if self.generator.embed_dim != self.discriminator.embed_dim {
            return Err(Error::config(
                "generator.embed_dim",
                format!(
                    "{} differs from discriminator.embed_dim = {}",
                    self.generator.embed_dim, self.discriminator.embed_dim
                ),
            ));
        }
        if self.generator.image_channels != self.discriminator.image_channels {
            return Err(Error::config("generator.image_channels", "differs from discriminator.image_channels"));
        }
        let m = self.generator.size_multiple().max(self.discriminator.size_multiple());
        if self.train.patch % m != 0 {
            return Err(Error::config("train.patch", format!("must be a multiple of {m}, got {}", self.train.patch)));
        }
        if self.data.procedural_size < self.train.patch && self.data.clean_dir.is_none() {
            return Err(Error::config("data.procedural_size", "must be at least train.patch"));
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig { contrastive: self.contrastive, losses: self.losses.clone(), ablation: self.train.ablation }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        serde_path_to_error::deserialize(v).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
    }

    /// Resolves relative data paths against `base`.
    fn anchor_paths(&mut self, base: &Path) {
        for p in [&mut self.data.manifest, &mut self.data.clean_dir, &mut self.data.eval_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Loads `path` (if any) over its profile preset, then applies environment
/// overrides from `env`.
pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let (source, mut file) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", p.display())))?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                let line = e.span().map(|s| text[..s.start].lines().count().max(1));
                Error::config(
                    line.map_or("<file>".to_string(), |l| format!("<file>:{l}")),
                    e.message().to_string(),
                )
            })?;
            (Some((p.to_path_buf(), text)), table)
        }
        None => (None, toml::Table::new()),
    };
    for (k, v) in env {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let keys: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        set_path(&mut file, &keys, parse_env_value(&v)).map_err(|m| Error::config(keys.join("."), m))?;
    }
    let profile = match file.get("profile") {
        None => Profile::default(),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("profile", e.message().to_string()))?,
    };
    let mut merged = toml::Value::try_from(RunConfig::preset(profile)).expect("preset serializes");
    merge(&mut merged, toml::Value::Table(file));
    let annotate = |key: String, msg: String| -> Error {
        let line = source.as_ref().and_then(|(_, text)| locate_key(text, &key));
        match (line, &source) {
            (Some(l), Some((p, _))) => Error::config(key, format!("{msg} ({}:{l})", p.display())),
            _ => Error::config(key, msg),
        }
    };
    let mut cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let key = e.path().to_string();
        annotate(key, e.inner().to_string())
    })?;
    if let Some((p, _)) = &source {
        cfg.anchor_paths(p.parent().unwrap_or(Path::new(".")));
    }
    cfg.validate().map_err(|e| match e {
        Error::Config { key, msg } => annotate(key, msg),
        other => other,
    })?;
    Ok(cfg)
}

/// Environment values are TOML literals when they parse as one, strings otherwise.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, keys: &[String], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = keys.split_last().ok_or("empty key")?;
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| format!("`{k}` is not a section"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// 1-based line of `a.b.c` in a TOML document: the `c = ` line inside a
/// `[a.b]` section, or a dotted / inline form on a single line.
pub fn locate_key(text: &str, key: &str) -> Option<usize> {
    let parts: Vec<&str> = key.split('.').filter(|p| !p.is_empty()).collect();
    let (leaf, section) = parts.split_last()?;
    let leaf = leaf.split('[').next().unwrap_or(leaf);
    let section = section.join(".");
    let mut current = String::new();
    let mut fallback = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
            current = h.trim_matches(['[', ']']).trim().to_string();
            if current == format!("{section}.{leaf}") || (section.is_empty() && current == leaf) {
                return Some(i + 1);
            }
            continue;
        }
        let lhs = t.split('=').next().unwrap_or("").trim();
        if current == section && lhs == leaf {
            return Some(i + 1);
        }
        if fallback.is_none() && (lhs == key || (lhs == leaf && !t.starts_with('#'))) {
            fallback = Some(i + 1);
        }
    }
    fallback
}

/// Standard layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.logs().join("metrics.tsv")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step-{step:08}.ckpt"))
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("latest.ckpt")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.logs(), self.reports()] {
            std::fs::create_dir_all(&d)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::preset(Profile::Paper).validate().unwrap();
        RunConfig::preset(Profile::Toy).validate().unwrap();
    }

    #[test]
    fn env_overrides_and_unknown_keys() {
        let cfg = load(None, [("NT_TRAIN__LR".to_string(), "0.5".to_string()), ("HOME".into(), "x".into())]).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        let err = load(None, [("NT_TRAIN__NOPE".to_string(), "1".to_string())]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.nope"), "{err}");
    }

    #[test]
    fn locates_keys() {
        let text = "profile = \"toy\"\n[contrastive]\ntau = -1\n[train.ablation]\nno_lnoise_d = true\n";
        assert_eq!(locate_key(text, "contrastive.tau"), Some(3));
        assert_eq!(locate_key(text, "train.ablation.no_lnoise_d"), Some(5));
        assert_eq!(locate_key(text, "profile"), Some(1));
    }
}
