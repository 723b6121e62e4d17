use noisetransfer::config::{Profile, RunConfig, RunDir};
use noisetransfer::losses::{Ablation, DiscriminatorTerms, GeneratorTerms, LossWeights};
use noisetransfer::report::read_metrics;
use noisetransfer::run::{batch_source, load_checkpoint, new_state, run_training, save_checkpoint};
use noisetransfer::trainer::{train_step, TrainState};
use noisetransfer::Error;
use nt_autodiff::ParamStore;

fn tiny() -> RunConfig {
    let mut c = RunConfig::preset(Profile::Toy);
    c.seed = 17;
    c.train.batch = 4;
    c.train.patch = 16;
    c.train.steps_per_epoch = 3;
    c.train.epochs = 2;
    c.train.eval_draws = 2;
    c.train.log_every = 1;
    c.data.procedural_clean = 6;
    c.data.procedural_size = 32;
    c.data.eval_items = 4;
    c.contrastive.queue_size = 10;
    c.validate().unwrap();
    c
}

fn values(store: &ParamStore<f32>) -> Vec<Vec<f32>> {
    store.ids().map(|id| store.get(id).data().to_vec()).collect()
}

#[test]
fn one_step_updates_every_parameter_and_moves_key_by_momentum() {
    let cfg = tiny();
    let mut state = new_state(&cfg).unwrap();
    let batch = batch_source(&cfg).unwrap().batch(0).unwrap();
    let (g0, d0, k0) = (values(&state.g), values(&state.d), values(&state.key));
    train_step(&mut state, &batch, &cfg.step_config()).unwrap();
    let (g1, d1, k1) = (values(&state.g), values(&state.d), values(&state.key));
    for (i, (a, b)) in g0.iter().zip(&g1).enumerate() {
        assert_ne!(a, b, "generator parameter {} unchanged", state.g.name(state.g.ids().nth(i).unwrap()));
    }
    for (i, (a, b)) in d0.iter().zip(&d1).enumerate() {
        assert_ne!(a, b, "discriminator parameter {} unchanged", state.d.name(state.d.ids().nth(i).unwrap()));
    }
    let m = cfg.contrastive.momentum;
    for ((k_old, k_new), d_new) in k0.iter().zip(&k1).zip(&d1) {
        for ((a, b), q) in k_old.iter().zip(k_new).zip(d_new) {
            let expected = m * *a as f64 + (1.0 - m) * *q as f64;
            assert!((*b as f64 - expected).abs() <= 1e-6 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn ablation_drops_contrastive_term_from_discriminator() {
    let mut cfg = tiny();
    cfg.train.ablation = Ablation { no_lnoise_d: true, no_lnoise_g_and_fm: false };
    let mut state = new_state(&cfg).unwrap();
    let batch = batch_source(&cfg).unwrap().batch(0).unwrap();
    let rec = train_step(&mut state, &batch, &cfg.step_config()).unwrap();
    assert_eq!(rec.loss_d, rec.d.gan);
    assert!(rec.d.noise > 0.0);
}

#[test]
fn loss_totals_follow_weights() {
    let d = DiscriminatorTerms { noise: 1.5, gan: 2.25 };
    assert_eq!(d.total(&Ablation::default()), 3.75);
    assert_eq!(d.total(&Ablation { no_lnoise_d: true, ..Default::default() }), 2.25);
    let g = GeneratorTerms { noise: 0.5, gan: 1.0, fm_noise: 0.01, fm_gan: 0.02, recon: 0.03 };
    let full = g.total(&LossWeights::default(), &Ablation::default());
    assert!((full - (0.5 + 1.0 + 1.0 + 2.0 + 3.0)).abs() < 1e-12);
    let zero = LossWeights { w_noise_fm: 0.0, w_gan_fm: 0.0, w_recon: 0.0 };
    assert_eq!(g.total(&zero, &Ablation::default()), 1.5);
    let abl = g.total(&LossWeights::default(), &Ablation { no_lnoise_g_and_fm: true, ..Default::default() });
    assert!((abl - (1.0 + 2.0 + 3.0)).abs() < 1e-12);
}

#[test]
fn optimizer_state_matches_parameters_and_queue_grows_by_batch() {
    let cfg = tiny();
    let mut state = new_state(&cfg).unwrap();
    assert_eq!(state.opt_g.slots().len(), state.g.len());
    assert_eq!(state.opt_d.slots().len(), state.d.len());
    assert_eq!(state.opt_d.cfg.weight_decay, 1e-7);
    let src = batch_source(&cfg).unwrap();
    let mut lens = Vec::new();
    for s in 0..4 {
        lens.push(train_step(&mut state, &src.batch(s).unwrap(), &cfg.step_config()).unwrap().queue_len);
    }
    assert_eq!(lens, vec![4, 8, 10, 10]);
}

#[test]
fn key_encoder_is_untouched_by_optimizers() {
    let cfg = tiny();
    let mut state = new_state(&cfg).unwrap();
    let src = batch_source(&cfg).unwrap();
    for s in 0..5 {
        let d_before = values(&state.key);
        train_step(&mut state, &src.batch(s).unwrap(), &cfg.step_config()).unwrap();
        let d_after = values(&state.d);
        let m = cfg.contrastive.momentum;
        for ((old, new), q) in d_before.iter().zip(values(&state.key)).zip(&d_after) {
            for ((a, b), c) in old.iter().zip(&new).zip(q) {
                let want = m * *a as f64 + (1.0 - m) * *c as f64;
                assert!((*b as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()));
            }
        }
    }
    assert!(state.opt_g.slots().iter().all(|s| s.step == 5));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny();
    let run = || {
        let mut state = new_state(&cfg).unwrap();
        let src = batch_source(&cfg).unwrap();
        (0..4).map(|s| train_step(&mut state, &src.batch(s).unwrap(), &cfg.step_config()).unwrap().loss_g).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn assert_same_state(a: &TrainState, b: &TrainState) {
    assert_eq!(values(&a.g), values(&b.g));
    assert_eq!(values(&a.d), values(&b.d));
    assert_eq!(values(&a.key), values(&b.key));
    assert_eq!(a.step, b.step);
    for (x, y) in a.opt_g.slots().iter().zip(b.opt_g.slots()) {
        assert_eq!(x, y);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = tiny();
    cfg.contrastive.persist_queue = true;
    let mut state = new_state(&cfg).unwrap();
    let src = batch_source(&cfg).unwrap();
    for s in 0..2 {
        train_step(&mut state, &src.batch(s).unwrap(), &cfg.step_config()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let (cfg2, restored) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_same_state(&state, &restored);
    assert_eq!(state.queue, restored.queue);
}

#[test]
fn queue_is_not_stored_by_default() {
    let cfg = tiny();
    let mut state = new_state(&cfg).unwrap();
    train_step(&mut state, &batch_source(&cfg).unwrap().batch(0).unwrap(), &cfg.step_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let (_, restored) = load_checkpoint(&path).unwrap();
    assert!(restored.queue.is_empty());
    assert_eq!(restored.step, 1);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let cfg = tiny();
    let state = new_state(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn run_directory_layout_and_resume() {
    let mut cfg = tiny();
    cfg.contrastive.persist_queue = true;
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let last = run_training(&cfg, &full, None).unwrap();
    let rd = RunDir::new(&full);
    assert!(rd.config().is_file());
    assert!(rd.checkpoints().is_dir() && rd.logs().is_dir() && rd.reports().is_dir());
    assert_eq!(last, rd.checkpoint(6));
    assert!(rd.checkpoint(3).is_file() && rd.latest_checkpoint().is_file());
    assert!(rd.reports().join("eval-step-00000003.tsv").is_file());
    let rows = read_metrics(&rd.metrics_log()).unwrap();
    assert!(rows.iter().any(|(s, k, _)| *s == 6 && k == "eval_akld"));

    let part = dir.path().join("part");
    let mut first = cfg.clone();
    first.train.epochs = 1;
    run_training(&first, &part, None).unwrap();
    run_training(&cfg, &part, Some(&RunDir::new(&part).checkpoint(3))).unwrap();
    let loss = |rows: &[(u64, String, f64)]| -> Vec<(u64, f64)> {
        rows.iter().filter(|(_, k, _)| k == "loss_g").map(|(s, _, v)| (*s, *v)).collect()
    };
    let resumed = read_metrics(&RunDir::new(&part).metrics_log()).unwrap();
    assert_eq!(loss(&rows), loss(&resumed));
    let (_, a) = load_checkpoint(&last).unwrap();
    let (_, b) = load_checkpoint(&RunDir::new(&part).checkpoint(6)).unwrap();
    assert_same_state(&a, &b);
}

#[test]
fn prefetching_does_not_change_training() {
    let cfg = tiny();
    let mut threaded = cfg.clone();
    threaded.data.workers = 2;
    let dir = tempfile::tempdir().unwrap();
    run_training(&cfg, &dir.path().join("a"), None).unwrap();
    run_training(&threaded, &dir.path().join("b"), None).unwrap();
    let a = read_metrics(&RunDir::new(dir.path().join("a")).metrics_log()).unwrap();
    let b = read_metrics(&RunDir::new(dir.path().join("b")).metrics_log()).unwrap();
    assert_eq!(a, b);
}
