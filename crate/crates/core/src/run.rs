//! End-to-end training runs with checkpoints, logs and periodic evaluation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use crate::checkpoint::{restore_train_state, save_train_state, train_config_of, Archive};
use crate::config::{RunConfig, RunDir};
use crate::data::{eval_items_real, eval_items_synthetic, BatchPlan, BatchSource, CleanPool, EvalItem, PairedDataset, Prefetcher};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::report::{write_tsv, MetricsLog};
use crate::trainer::{train_step, TrainState};

/// Fresh state for a configuration.
pub fn new_state(cfg: &RunConfig) -> Result<TrainState> {
    TrainState::new(cfg.generator, cfg.discriminator, &cfg.contrastive, &cfg.train, cfg.seed)
}

/// Configuration and state stored in a training checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    let ar = Archive::read(path)?;
    let cfg = RunConfig::from_json(train_config_of(&ar)?)
        .map_err(|e| Error::Checkpoint(format!("{}: stored configuration is invalid: {e}", path.display())))?;
    let mut state = new_state(&cfg)?;
    restore_train_state(&ar, &mut state)?;
    Ok((cfg, state))
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, state: &TrainState) -> Result<()> {
    save_train_state(path, state, cfg.to_json(), cfg.contrastive.persist_queue)
}

/// Batch source described by the configuration.
pub fn batch_source(cfg: &RunConfig) -> Result<BatchSource> {
    let plan = BatchPlan::new(&cfg.data, cfg.train.batch, cfg.train.patch);
    let real = if plan.n_real > 0 {
        let manifest = cfg
            .data
            .manifest
            .as_ref()
            .ok_or_else(|| Error::config("data.manifest", "required when data.real_fraction > 0"))?;
        Some(Arc::new(PairedDataset::load(manifest, cfg.train.patch)?))
    } else {
        None
    };
    let clean = match &cfg.data.clean_dir {
        Some(dir) => CleanPool::from_dir(dir, cfg.train.patch)?,
        None => CleanPool::procedural(cfg.data.procedural_clean, cfg.data.procedural_size, cfg.seed)?,
    };
    BatchSource::new(plan, real, Arc::new(clean), cfg.seed)
}

/// Held-out evaluation items described by the configuration.
pub fn eval_items(cfg: &RunConfig) -> Result<Vec<EvalItem>> {
    let seed = cfg.seed ^ 0x5eed_e7a1;
    match &cfg.data.eval_manifest {
        Some(m) => eval_items_real(&PairedDataset::load(m, cfg.train.patch)?, cfg.data.eval_items, cfg.train.patch, seed),
        None => eval_items_synthetic(&cfg.data.synthetic_noise, cfg.data.eval_items, cfg.train.patch, seed),
    }
}

pub fn eval_entries(r: &EvalReport) -> Vec<(&'static str, f64)> {
    let mut v = vec![("eval_akld", r.akld), ("eval_ks", r.ks)];
    if let Some(s) = r.separation {
        v.push(("eval_within_cos", s.within));
        v.push(("eval_between_cos", s.between));
    }
    v
}

/// Trains to `epochs * steps_per_epoch` steps inside `out`, saving a
/// checkpoint and evaluating after every epoch. Returns the last checkpoint.
pub fn run_training(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = RunDir::new(out);
    dir.create()?;
    std::fs::write(dir.config(), cfg.to_toml())?;
    let mut state = match resume {
        Some(p) => {
            let (stored, state) = load_checkpoint(p)?;
            if stored.generator != cfg.generator || stored.discriminator != cfg.discriminator {
                return Err(Error::Checkpoint(format!("{} was trained with different network settings", p.display())));
            }
            if !cfg.contrastive.persist_queue || !stored.contrastive.persist_queue {
                warn!("resuming without a stored queue; negatives are rebuilt from scratch");
            }
            info!("resuming from {} at step {}", p.display(), state.step);
            state
        }
        None => new_state(cfg)?,
    };
    let source = Arc::new(batch_source(cfg)?);
    let items = eval_items(cfg)?;
    let total = cfg.train.epochs * cfg.train.steps_per_epoch;
    let step_cfg = cfg.step_config();
    let mut log = MetricsLog::open(&dir.metrics_log())?;
    let mut last = dir.latest_checkpoint();
    let batches = Prefetcher::new(Arc::clone(&source), state.step, total, cfg.data.workers);
    for batch in batches {
        let rec = train_step(&mut state, &batch?, &step_cfg)?;
        if rec.step % cfg.train.log_every == 0 {
            log.write(rec.step, &rec.entries())?;
        }
        if rec.step % cfg.train.steps_per_epoch == 0 || rec.step == total {
            let report = evaluate(&state.nets, &state.g, &state.key, &items, cfg.train.eval_draws, cfg.seed)?;
            log.write(rec.step, &eval_entries(&report))?;
            log.flush()?;
            let rows: Vec<Vec<String>> = eval_entries(&report).iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
            write_tsv(&dir.reports().join(format!("eval-step-{:08}.tsv", rec.step)), &["metric", "value"], &rows)?;
            last = dir.checkpoint(rec.step);
            save_checkpoint(&last, cfg, &state)?;
            save_checkpoint(&dir.latest_checkpoint(), cfg, &state)?;
            info!(
                "step {}: loss_d {:.4} loss_g {:.4} akld {:.4} ks {:.4}",
                rec.step, rec.loss_d, rec.loss_g, report.akld, report.ks
            );
        }
    }
    log.flush()?;
    if state.step == 0 {
        save_checkpoint(&last, cfg, &state)?;
    }
    Ok(last)
}
