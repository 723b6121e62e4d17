use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use noisetransfer::config::{self, RunConfig};
use noisetransfer::contrastive::cosine_sim;
use noisetransfer::data::{read_manifest, CleanPool, PairedDataset};
use noisetransfer::denoise::{
    evaluate_denoiser, load_denoiser, make_denoise_pairs, save_denoiser, train_denoiser, GaussianOracle,
    GeneratorSynthesizer, NoiseSynthesizer,
};
use noisetransfer::eval::{embed_images, evaluate, generate};
use noisetransfer::image::ImagePatch;
use noisetransfer::metrics::{kl_divergence, NoiseHistogram};
use noisetransfer::noise::{sample_noisy, NoiseKind};
use noisetransfer::report::{plot_histograms, write_tsv};
use noisetransfer::run::{batch_source, eval_entries, load_checkpoint, new_state, run_training};
use noisetransfer::trainer::train_step;
use noisetransfer::{data, Error, NoiseSpec, Result};
use nt_autodiff::ParamStore;

#[derive(Parser)]
#[command(name = "noisetransfer", version, about = "Learn, transfer and evaluate real camera noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; values not set fall back to the profile preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when the file does not name one (paper or toy).
    #[arg(long)]
    profile: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut env: Vec<(String, String)> = Vec::new();
        if let Some(p) = &self.profile {
            env.push((format!("{}PROFILE", config::ENV_PREFIX), format!("\"{p}\"")));
        }
        env.extend(std::env::vars());
        config::load(self.config.as_deref(), env)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator and discriminator.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transfer the noise of a reference image onto a clean image.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// AKLD/KS report of a checkpoint against real pairs from a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply a parametric noise model to a clean image.
    SampleNoise {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: NoiseKind,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        lam: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on synthesized noisy/clean pairs.
    DenoiseTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest whose clean images are noised and whose noisy images serve as references.
        #[arg(long)]
        data: PathBuf,
        /// Generator checkpoint used to synthesize noise.
        #[arg(long, conflicts_with = "oracle_sigma", required_unless_present = "oracle_sigma")]
        generator: Option<PathBuf>,
        /// Use exact Gaussian noise of this level instead of a generator.
        #[arg(long)]
        oracle_sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR/SSIM of a denoiser on the pairs of a manifest.
    DenoiseEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Parse and check a configuration and print it fully resolved.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also run one training step on a tiny synthetic batch.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the parameter tables of the networks.
    Describe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Describe the networks stored in a training checkpoint instead.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<NoiseKind, String> {
    match s {
        "gaussian" => Ok(NoiseKind::Gaussian),
        "poisson" => Ok(NoiseKind::Poisson),
        "poisson_gaussian" | "poisson-gaussian" => Ok(NoiseKind::PoissonGaussian),
        other => Err(format!("unknown noise kind `{other}` (gaussian, poisson, poisson_gaussian)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out, resume } => {
            let last = run_training(&cfg.load()?, &out, resume.as_deref())?;
            info!("final checkpoint {}", last.display());
            Ok(())
        }
        Command::Generate { ckpt, clean, reference, n_samples, seed, out } => {
            generate_cmd(&ckpt, &clean, &reference, n_samples, seed, &out)
        }
        Command::Evaluate { ckpt, data, report, draws, items, seed } => {
            evaluate_cmd(&ckpt, &data, &report, draws, items, seed)
        }
        Command::SampleNoise { clean, kind, sigma, lam, seed, out } => {
            let spec = NoiseSpec { kind, sigma, lam };
            spec.validate()?;
            let x = ImagePatch::load(&clean)?;
            let y = sample_noisy(&x, &spec, &mut data::derive_rng(seed, data::domain::PROCEDURAL, 1))?;
            y.save_png(&out)
        }
        Command::DenoiseTrain { cfg, data, generator, oracle_sigma, out, seed } => {
            denoise_train_cmd(&cfg.load()?, &data, generator.as_deref(), oracle_sigma, &out, seed)
        }
        Command::DenoiseEval { ckpt, data, report } => {
            let (net, store) = load_denoiser(&ckpt)?;
            let ds = PairedDataset::load(&data, 1)?;
            let pairs: Vec<_> = (0..ds.len()).map(|i| (ds.pair(i).0.clone(), ds.pair(i).1.clone())).collect();
            let noisy = evaluate_quality_of_input(&pairs)?;
            let q = evaluate_denoiser(&net, &store, &pairs)?;
            println!("input\tpsnr\t{:.4}", noisy);
            println!("denoised\tpsnr\t{:.4}\tssim\t{:.4}", q.psnr, q.ssim);
            if let Some(r) = report {
                write_tsv(
                    &r,
                    &["metric", "value"],
                    &[
                        vec!["input_psnr".into(), noisy.to_string()],
                        vec!["psnr".into(), q.psnr.to_string()],
                        vec!["ssim".into(), q.ssim.to_string()],
                    ],
                )?;
            }
            Ok(())
        }
        Command::ValidateConfig { cfg, dry_run } => {
            let cfg = cfg.load()?;
            print!("{}", cfg.to_toml());
            if dry_run {
                dry_run_step(&cfg)?;
                println!("# dry run: one training step completed");
            }
            Ok(())
        }
        Command::Describe { cfg, ckpt } => {
            let (cfg, state) = match ckpt {
                Some(p) => load_checkpoint(&p)?,
                None => {
                    let c = cfg.load()?;
                    let s = new_state(&c)?;
                    (c, s)
                }
            };
            println!("# generator {:?}", cfg.generator);
            print_table(&state.g);
            println!("\n# discriminator {:?}", cfg.discriminator);
            print_table(&state.d);
            Ok(())
        }
    }
}

fn print_table(store: &ParamStore<f32>) {
    println!("{:<48} {:<20} {:>10}", "parameter", "shape", "count");
    for id in store.ids() {
        let t = store.get(id);
        println!("{:<48} {:<20} {:>10}", store.name(id), format!("{:?}", t.shape()), t.len());
    }
    println!("{:<48} {:<20} {:>10}", "total", "", store.num_scalars());
}

fn generate_cmd(ckpt: &Path, clean: &Path, reference: &Path, n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("--n-samples must be positive".into()));
    }
    let (cfg, state) = load_checkpoint(ckpt)?;
    let multiple = cfg.generator.size_multiple().max(4);
    let x = ImagePatch::load(clean)?;
    let r = ImagePatch::load(reference)?;
    let (h, w, _) = x.dims();
    let e = embed_images(&state.nets, &state.key, &[r.pad_to_multiple(4)])?.remove(0);
    let xp = x.pad_to_multiple(multiple);
    let clean_batch = vec![xp; n];
    let outs = generate(&state.nets, &state.g, &clean_batch, &vec![e.clone(); n], seed)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(n);
    for (i, y) in outs.into_iter().enumerate() {
        let y = y.crop(0, 0, h, w);
        let name = format!("sample-{i:03}.png");
        y.save_png(&out.join(&name))?;
        let re = embed_images(&state.nets, &state.key, &[y.pad_to_multiple(4)])?.remove(0);
        rows.push(vec![name, format!("{:.6}", cosine_sim(&e, &re)?)]);
    }
    write_tsv(&out.join("similarity.tsv"), &["sample", "cosine_to_reference"], &rows)
}

fn evaluate_cmd(
    ckpt: &Path,
    manifest: &Path,
    report: &Path,
    draws: Option<usize>,
    items: Option<usize>,
    seed: u64,
) -> Result<()> {
    let (cfg, state) = load_checkpoint(ckpt)?;
    let patch = cfg.train.patch;
    let ds = PairedDataset::load(manifest, patch)?;
    let items = data::eval_items_real(&ds, items.unwrap_or(cfg.data.eval_items), patch, seed)?;
    let draws = draws.unwrap_or(cfg.train.eval_draws);
    let summary = evaluate(&state.nets, &state.g, &state.key, &items, draws, seed)?;
    std::fs::create_dir_all(report)?;
    let rows: Vec<Vec<String>> = eval_entries(&summary).iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
    write_tsv(&report.join("summary.tsv"), &["metric", "value"], &rows)?;

    let clean: Vec<ImagePatch> = items.iter().map(|i| i.clean.clone()).collect();
    let refs: Vec<ImagePatch> = items.iter().map(|i| i.reference.clone()).collect();
    let e = embed_images(&state.nets, &state.key, &refs)?;
    let fakes = generate(&state.nets, &state.g, &clean, &e, seed)?;
    let (mut real_all, mut fake_all) = (NoiseHistogram::default(), NoiseHistogram::default());
    let mut per_item = Vec::with_capacity(items.len());
    for (i, (item, fake)) in items.iter().zip(&fakes).enumerate() {
        let hr = NoiseHistogram::from_pair(&item.noisy, &item.clean)?;
        let hf = NoiseHistogram::from_pair(fake, &item.clean)?;
        per_item.push(vec![i.to_string(), item.label.clone(), kl_divergence(&hr, &hf).to_string()]);
        real_all.merge(&hr);
        fake_all.merge(&hf);
    }
    write_tsv(&report.join("items.tsv"), &["item", "label", "kl"], &per_item)?;
    plot_histograms(&real_all, &fake_all, &report.join("noise_histogram.png"))?;
    for (k, v) in eval_entries(&summary) {
        println!("{k}\t{v:.6}");
    }
    Ok(())
}

fn evaluate_quality_of_input(pairs: &[(ImagePatch, ImagePatch)]) -> Result<f64> {
    let mut total = 0.0;
    for (c, n) in pairs {
        total += noisetransfer::metrics::psnr(&n.clip01(), c)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

fn denoise_train_cmd(
    cfg: &RunConfig,
    manifest: &Path,
    generator: Option<&Path>,
    oracle_sigma: Option<f64>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let dcfg = &cfg.denoise;
    let records = read_manifest(manifest)?;
    let clean: Vec<ImagePatch> = records.iter().map(|r| ImagePatch::load(&r.clean)).collect::<Result<_>>()?;
    let noisy: Vec<ImagePatch> = records.iter().map(|r| ImagePatch::load(&r.noisy)).collect::<Result<_>>()?;
    let pool = CleanPool::new(clean.clone())?;
    let loaded;
    let synth: Box<dyn NoiseSynthesizer> = match (generator, oracle_sigma) {
        (Some(p), _) => {
            loaded = load_checkpoint(p)?;
            let patch = dcfg.patch;
            let refs = noisy
                .iter()
                .filter(|n| n.height() >= patch && n.width() >= patch)
                .map(|n| n.crop(0, 0, patch, patch))
                .collect();
            Box::new(GeneratorSynthesizer { nets: &loaded.1.nets, g: &loaded.1.g, key: &loaded.1.key, references: refs })
        }
        (None, Some(sigma)) => Box::new(GaussianOracle { sigma }),
        (None, None) => return Err(Error::Usage("either --generator or --oracle-sigma is required".into())),
    };
    let pairs = make_denoise_pairs(synth.as_ref(), &pool, dcfg.pairs, dcfg.patch, seed)?;
    let val: Vec<(ImagePatch, ImagePatch)> = clean.into_iter().zip(noisy).collect();
    let trained = train_denoiser(&pairs, &val, dcfg, seed)?;
    save_denoiser(out, &trained, 3)?;
    let rows: Vec<Vec<String>> = trained
        .history
        .iter()
        .map(|h| vec![h.epoch.to_string(), h.train_l1.to_string(), h.val.psnr.to_string(), h.val.ssim.to_string()])
        .collect();
    write_tsv(&out.with_extension("history.tsv"), &["epoch", "train_l1", "val_psnr", "val_ssim"], &rows)
}

fn dry_run_step(cfg: &RunConfig) -> Result<()> {
    let mut c = cfg.clone();
    c.data.real_fraction = 0.0;
    c.data.manifest = None;
    c.data.clean_dir = None;
    c.data.procedural_clean = 2;
    c.data.procedural_size = c.train.patch + c.generator.size_multiple();
    c.train.batch = 2;
    let source = batch_source(&c)?;
    let mut state = new_state(&c)?;
    let rec = train_step(&mut state, &source.batch(0)?, &c.step_config())?;
    for (k, v) in rec.entries() {
        println!("# {k} = {v:.6}");
    }
    Ok(())
}
