//! `forgeloc` command-line front end.
//!
//! Every subcommand is a plain function over an argument struct so it can be
//! driven from tests without spawning the binary. Files a command writes are
//! removed again if it fails part way.

mod outputs;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use forgeloc::checkpoint::Checkpoint;
use forgeloc::config::{RunConfig, SEED_ENV};
use forgeloc::data::dataset::{write_dataset, DatasetSpec};
use forgeloc::data::io::{
    load_image_folder, read_image, read_mask, write_image, write_probability_map, write_raster, Raster8,
};
use forgeloc::data::manifest::{DatasetManifest, Split};
use forgeloc::data::resize::{resize_image, resize_mask, resize_plane};
use forgeloc::data::{dataset::load_split, Image};
use forgeloc::metrics::{evaluate, standard_suite, MetricsReport, Perturbation};
use forgeloc::network::{CoarseToFineModel, NoiseFront};
use forgeloc::predict::predict;
use forgeloc::seed::rng_for;
use forgeloc::train::{fgsm, train, TrainState};
use forgeloc::visualize::{heatmap_raster, overlay, stage_maps};

pub use outputs::Outputs;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.fglc";
pub const LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.txt";
/// Residual maps are amplified by this factor for display.
pub const RESIDUAL_GAIN: f32 = 20.0;
/// Heatmaps are blended over the image at this opacity.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "forgeloc", version, about = "Image forgery localisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Predict the tamper mask of one image.
    Infer(InferArgs),
    /// Score a checkpoint on the test split, clean and perturbed.
    Eval(EvalArgs),
    /// Build an FGSM adversarial copy of an image.
    Attack(AttackArgs),
    /// Write activation heatmaps of the noise and attention stages.
    Visualize(VisualizeArgs),
    /// Generate a synthetic dataset with a manifest.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// `key = value` run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest, overriding the config's `manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory, overriding the config's `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Total iteration count, overriding the config.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on clean batches only.
    #[arg(long)]
    pub no_sat: bool,
    /// Drop the forgery attention module.
    #[arg(long)]
    pub no_attention: bool,
    /// Use the plain HPF layer instead of channel-wise HPF in both nets.
    #[arg(long)]
    pub no_cwhpf: bool,
    /// Single network: no coarse net, the refined net reads the image.
    #[arg(long)]
    pub no_coarse_to_fine: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Refined mask PNG.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the coarse mask here.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated list such as `resize:0.5,blur:3,noise:15,fgsm:0.02`;
    /// `none` for the clean row only. Defaults to the standard suite.
    #[arg(long)]
    pub perturbations: Option<String>,
    /// Seed of the perturbation noise; `FORGELOC_SEED` overrides it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the report table and the resolved settings.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Ground-truth mask the attack pushes the prediction away from.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub eps: f64,
    /// Adversarial image PNG.
    #[arg(long)]
    pub output: PathBuf,
    /// Amplified residual PNG.
    #[arg(long)]
    pub residual: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory, overriding the config's `output_dir`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Number of training samples, overriding `train_count`.
    #[arg(long)]
    pub train: Option<usize>,
    /// Number of test samples, overriding `test_count`.
    #[arg(long)]
    pub test: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => {
            print!("{}", cmd_eval(&a)?);
            Ok(())
        }
        Command::Attack(a) => {
            println!("linf={}", cmd_attack(&a)?);
            Ok(())
        }
        Command::Visualize(a) => {
            for (name, var) in cmd_visualize(&a)? {
                println!("{name}\tvariance={var}");
            }
            Ok(())
        }
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
    }
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

/// Reads the config file (or the defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env_seed(env_seed().as_deref())?;
    Ok(cfg)
}

/// Paths written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: u64,
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = args.iterations {
        cfg.sat.iterations = n;
    }
    if args.no_sat {
        cfg.sat.sat_enabled = false;
    }
    if args.no_attention {
        cfg.model.attention = false;
    }
    if args.no_cwhpf {
        cfg.model.coarse_front = NoiseFront::Hpf;
        cfg.model.refined_front = NoiseFront::Hpf;
    }
    if args.no_coarse_to_fine {
        cfg.model.coarse_to_fine = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let cfg = resolve_train_config(args)?;
    let manifest_path = cfg
        .manifest
        .clone()
        .context("no dataset manifest: set `manifest` in the config or pass --manifest")?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let (samples, skipped) = load_split(&manifest, Split::Train, cfg.model.input_size)?;
    if skipped > 0 {
        warn!("{skipped} training entries skipped");
    }
    ensure!(
        !samples.is_empty(),
        "manifest {} has no usable training samples",
        manifest_path.display()
    );

    let (model, mut state) = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            ensure!(
                ck.config == cfg.model,
                "checkpoint {} was trained with a different model configuration",
                p.display()
            );
            ensure!(
                ck.seed == cfg.seed,
                "checkpoint seed {} differs from run seed {}",
                ck.seed,
                cfg.seed
            );
            ck.into_model()?
        }
        None => {
            let (model, params) = CoarseToFineModel::new(cfg.model.clone(), &mut rng_for(cfg.seed, "init"))?;
            (model, TrainState::new(params, cfg.sat.lr))
        }
    };
    ensure!(
        state.iteration <= cfg.sat.iterations,
        "checkpoint is at iteration {}, past the requested {}",
        state.iteration,
        cfg.sat.iterations
    );
    info!(
        "training {} parameters on {} samples, iterations {}..{}",
        model.param_count(),
        samples.len(),
        state.iteration,
        cfg.sat.iterations
    );

    let mut out = Outputs::new();
    out.dir(&cfg.output_dir)?;
    let config = out.write(cfg.output_dir.join(CONFIG_FILE), cfg.to_string())?;
    train(&model, &mut state, &cfg.sat, &samples, |r| {
        if r.phase == 1 && (r.iteration + 1) % 50 == 0 {
            info!("{r}");
        }
    })?;
    let mut log = String::new();
    for r in &state.history {
        writeln!(log, "{r}").expect("writing to a String");
    }
    let log_path = out.write(cfg.output_dir.join(LOG_FILE), log)?;
    let checkpoint = out.file(cfg.output_dir.join(CHECKPOINT_FILE));
    Checkpoint::from_state(&model, &state, cfg.seed).save(&checkpoint)?;
    out.commit();
    info!("wrote {}", checkpoint.display());
    Ok(TrainOutput {
        config,
        checkpoint,
        log: log_path,
        iterations: state.iteration,
    })
}

fn load_model(path: &Path) -> Result<(CoarseToFineModel, TrainState)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.into_model()?)
}

/// Resizes `img` to the model's input size, warning when that changes it.
fn fit_to_model(img: &Image, model: &CoarseToFineModel, what: &Path) -> Result<Image> {
    let (h, w) = model.config.input_size;
    if (img.height, img.width) == (h, w) {
        return Ok(img.clone());
    }
    warn!(
        "{} is {}x{}, model expects {}x{}; resizing",
        what.display(),
        img.height,
        img.width,
        h,
        w
    );
    Ok(resize_image(img, h, w)?)
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let (model, state) = load_model(&args.checkpoint)?;
    let image = read_image(&args.image)?;
    let input = fit_to_model(&image, &model, &args.image)?;
    let pred = predict(&model, &state.params, &input)?;
    let back = |v: &[f32]| resize_plane(v, pred.height, pred.width, image.height, image.width);

    let mut out = Outputs::new();
    write_probability_map(&back(&pred.refined), image.height, image.width, &out.file(&args.output))?;
    if let Some(path) = &args.coarse {
        let coarse = pred
            .coarse
            .as_ref()
            .context("this model has no coarse net (trained with --no-coarse-to-fine)")?;
        write_probability_map(&back(coarse), image.height, image.width, &out.file(path))?;
    }
    out.commit();
    Ok(())
}

fn parse_perturbations(list: Option<&str>) -> Result<Vec<Perturbation>> {
    match list.map(str::trim) {
        None => Ok(standard_suite()),
        Some("") | Some("none") => Ok(Vec::new()),
        Some(l) => l
            .split(',')
            .map(|p| p.trim().parse::<Perturbation>().map_err(anyhow::Error::msg))
            .collect(),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let perturbations = parse_perturbations(args.perturbations.as_deref())?;
    let seed = match env_seed().as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s.parse().with_context(|| format!("{SEED_ENV}=`{s}` is not a seed"))?,
        None => args.seed,
    };
    let (model, state) = load_model(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let (samples, skipped) = load_split(&manifest, Split::Test, model.config.input_size)?;
    ensure!(
        !samples.is_empty(),
        "manifest {} has no usable test samples",
        args.manifest.display()
    );
    let mut report = evaluate(&model, &state.params, &samples, &perturbations, seed)?;
    report.skipped = skipped;

    let mut settings = String::new();
    writeln!(settings, "checkpoint = {}", args.checkpoint.display())?;
    writeln!(settings, "manifest = {}", args.manifest.display())?;
    writeln!(settings, "seed = {seed}")?;
    let names: Vec<String> = perturbations.iter().map(|p| p.to_string()).collect();
    writeln!(
        settings,
        "perturbations = {}",
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    )?;

    let mut out = Outputs::new();
    out.dir(&args.output_dir)?;
    out.write(args.output_dir.join(CONFIG_FILE), settings)?;
    out.write(args.output_dir.join(REPORT_FILE), report.to_string())?;
    out.commit();
    Ok(report)
}

/// `20 * |adv - image|` per channel, clipped to white.
pub fn residual_raster(image: &Image, adv: &Image) -> Raster8 {
    let mut data = Vec::with_capacity(3 * image.height * image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                let d = (adv.get(c, y, x) - image.get(c, y, x)).abs() * RESIDUAL_GAIN;
                data.push((d.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Raster8 {
        width: image.width,
        height: image.height,
        channels: 3,
        data,
    }
}

/// Writes the adversarial image and its residual; returns `||adv - image||_inf`.
pub fn cmd_attack(args: &AttackArgs) -> Result<f64> {
    if !(args.eps > 0.0 && args.eps <= 1.0) {
        bail!("eps must lie in (0, 1], got {}", args.eps);
    }
    let (model, state) = load_model(&args.checkpoint)?;
    let image = fit_to_model(&read_image(&args.image)?, &model, &args.image)?;
    let mask = read_mask(&args.mask)?;
    let mask = if (mask.height, mask.width) == (image.height, image.width) {
        mask
    } else {
        resize_mask(&mask, image.height, image.width)?
    };
    let adv_t = fgsm(
        &model,
        &state.params,
        &image.to_tensor(),
        &mask.to_tensor(),
        &[args.eps],
    )?;
    let adv = Image::from_tensor(&adv_t, 0)?;
    let linf = image
        .data
        .iter()
        .zip(&adv.data)
        .map(|(a, b)| (f64::from(*b) - f64::from(*a)).abs())
        .fold(0.0, f64::max);

    let mut out = Outputs::new();
    write_image(&adv, &out.file(&args.output))?;
    write_raster(&residual_raster(&image, &adv), &out.file(&args.residual))?;
    out.commit();
    Ok(linf)
}

/// Writes `<stage>_heatmap.png` and `<stage>_overlay.png` per stage and
/// `variance.txt`; returns `(stage, variance)` pairs.
pub fn cmd_visualize(args: &VisualizeArgs) -> Result<Vec<(String, f64)>> {
    let (model, state) = load_model(&args.checkpoint)?;
    let image = fit_to_model(&read_image(&args.image)?, &model, &args.image)?;
    let maps = stage_maps(&model, &state.params, &image)?;

    let mut out = Outputs::new();
    out.dir(&args.output_dir)?;
    let mut report = String::new();
    let mut variances = Vec::with_capacity(maps.len());
    for m in &maps {
        write_raster(
            &heatmap_raster(m),
            &out.file(args.output_dir.join(format!("{}_heatmap.png", m.name))),
        )?;
        write_raster(
            &overlay(&image, m, OVERLAY_ALPHA),
            &out.file(args.output_dir.join(format!("{}_overlay.png", m.name))),
        )?;
        writeln!(report, "{}\t{}", m.name, m.variance)?;
        variances.push((m.name.to_string(), m.variance));
    }
    out.write(args.output_dir.join("variance.txt"), report)?;
    out.commit();
    Ok(variances)
}

pub fn resolve_gen_data_config(args: &GenDataArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = args.train {
        cfg.train_count = n;
    }
    if let Some(n) = args.test {
        cfg.test_count = n;
    }
    ensure!(cfg.train_count + cfg.test_count > 0, "dataset would be empty");
    Ok(cfg)
}

/// Writes `images/`, `masks/`, `manifest.tsv` and the resolved config.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<DatasetManifest> {
    let cfg = resolve_gen_data_config(args)?;
    let (h, w) = cfg.model.input_size;
    let mut spec = DatasetSpec::new(h, w, cfg.train_count, cfg.test_count, cfg.seed).with_kinds(&cfg.kinds);
    if let Some(dir) = &cfg.base_images {
        let pool = load_image_folder(dir, h, w)?;
        ensure!(!pool.is_empty(), "no PNG images in {}", dir.display());
        spec = spec.with_pool(pool);
    }
    let dir = &cfg.output_dir;
    let mut out = Outputs::new();
    out.dir(dir)?;
    for i in 0..spec.len() {
        out.file(dir.join(format!("images/{i:05}.png")));
        out.file(dir.join(format!("masks/{i:05}.png")));
    }
    out.file(dir.join("manifest.tsv"));
    out.dir(&dir.join("images"))?;
    out.dir(&dir.join("masks"))?;
    let manifest = write_dataset(&spec, dir)?;
    out.write(dir.join(CONFIG_FILE), cfg.to_string())?;
    out.commit();
    info!("wrote {} samples to {}", manifest.entries.len(), dir.display());
    Ok(manifest)
}
