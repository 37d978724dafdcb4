//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 1 when some entries of a batch failed or a run failed, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cforge_core::dataset::{build_dataset, read_sources};
use cforge_core::imaging::{load_image, resize_bilinear, save_image};
use cforge_core::landmarks::load_landmarks;
use cforge_core::metrics::{fid, identity_similarity, l2_metric, perceptual_distance, ssim, Embedder, FileEmbedder, MetricReport, PairRecord};
use cforge_core::{Error, ImageBuffer, Result};
use cforge_model::encoder::{train_encoder, write_encoder_log, EncoderConfig, EncoderTrainConfig};
use cforge_model::projection::{write_walk, WalkSpec, DEFAULT_WALK_STEPS};
use cforge_model::stylegen::{train_generator, write_gan_log, TrainConfig};
use cforge_model::{toy, EncoderCheckpoint, GeneratorCheckpoint, GeneratorConfig};

use crate::config::{Config, ServiceConfig, CONFIG_ENV};
use crate::models::{Models, Route};

#[derive(Debug, Parser)]
#[command(name = "cforge", version, about = "Caricature dataset builder, toy generator and latent-walk service")]
struct Cli {
    /// TOML config file; defaults to $CFORGE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    #[command(subcommand)]
    Dataset(DatasetCommand),
    #[command(subcommand)]
    Train(TrainCommand),
    /// Project a face into the generator's style space.
    Project(ProjectArgs),
    /// Walk from a face's projection to its caricature's projection.
    Walk(WalkArgs),
    /// Replace the later styles of a projection with a sampled style.
    Mix(MixArgs),
    /// Pairwise metrics between two folders of same-named images.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Build caricatures for every entry of a source manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    /// Adversarial training of the toy generator.
    Generator {
        #[arg(long)]
        out: PathBuf,
        /// Folder of training PNGs; the synthetic toy faces when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the encoder against a frozen generator.
    Encoder {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "projection")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WalkArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    /// Intervals between t=0 and t=1; writes steps + 1 frames.
    #[arg(long, default_value_t = DEFAULT_WALK_STEPS)]
    steps: usize,
    /// Explicit comma separated positions instead of --steps.
    #[arg(long, value_delimiter = ',')]
    t_values: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    route: Option<RouteArg>,
    #[arg(long, default_value = "walk")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RouteArg {
    Plain,
    Sunglasses,
    ReadingGlasses,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Plain => Route::Plain,
            RouteArg::Sunglasses => Route::Sunglasses,
            RouteArg::ReadingGlasses => Route::ReadingGlasses,
        }
    }
}

#[derive(Debug, Args)]
struct MixArgs {
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    style_seed: u64,
    #[arg(long)]
    crossover: usize,
    #[arg(long, default_value = "mix.png")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference images.
    #[arg(long)]
    real: PathBuf,
    /// Images to score, matched to --real by file name.
    #[arg(long)]
    fake: PathBuf,
    /// Sidecar suffix of identity embeddings, e.g. `id.json`.
    #[arg(long)]
    identity: Option<String>,
    /// Sidecar suffix of perceptual features.
    #[arg(long)]
    perceptual: Option<String>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    run_with_env(args, env.as_deref())
}

/// [`run`] with the config-variable value passed in rather than read.
pub fn run_with_env<I, A>(args: I, config_env: Option<&Path>) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = Config::locate(cli.config.as_deref(), config_env).and_then(|cfg| dispatch(cli.command, &cfg));
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn dispatch(command: Command, cfg: &Config) -> Result<i32> {
    match command {
        Command::Dataset(DatasetCommand::Build { manifest, out, workers }) => dataset_build(cfg, &manifest, &out, workers),
        Command::Train(TrainCommand::Generator {
            out,
            data,
            steps,
            seed,
            log,
        }) => train_gen(&out, data.as_deref(), steps, seed, log.as_deref()),
        Command::Train(TrainCommand::Encoder {
            generator,
            out,
            data,
            steps,
            seed,
            log,
        }) => {
            let generator = generator
                .or_else(|| cfg.checkpoints.generator.clone())
                .ok_or_else(|| Error::Config("no generator checkpoint given".into()))?;
            train_enc(&generator, &out, data.as_deref(), steps, seed, log.as_deref())
        }
        Command::Project(a) => project(cfg, a),
        Command::Walk(a) => walk(cfg, a),
        Command::Mix(a) => mix(cfg, a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(cfg, a),
    }
}

fn dataset_build(cfg: &Config, manifest: &Path, out: &Path, workers: Option<usize>) -> Result<i32> {
    let sources = read_sources(manifest)?;
    let resolution = match (cfg.dataset.resolution, sources.first()) {
        (Some(r), _) => r,
        (None, Some(first)) => load_image::<f32>(&first.source_path).map(|i| i.width()).unwrap_or(256),
        (None, None) => 256,
    };
    let dataset = cfg.dataset.dataset_config(resolution);
    let workers = workers.unwrap_or(cfg.dataset.workers);
    let m = build_dataset(&sources, &dataset, &cfg.dataset.providers, out, workers)?;
    let failed: Vec<_> = m.failures().collect();
    for f in &failed {
        eprintln!(
            "skipped {}: {}",
            f.source_path.display(),
            f.message.as_deref().unwrap_or_default()
        );
    }
    println!("{} built, {} skipped", m.outputs().count(), failed.len());
    Ok(if failed.is_empty() { 0 } else { 1 })
}

/// PNGs of a folder in name order, resized to `size`.
fn load_folder(dir: &Path, size: usize) -> Result<Vec<ImageBuffer<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = load_image::<f32>(p)?.to_rgb();
            if img.dims() == (size, size) {
                Ok(img)
            } else {
                resize_bilinear(&img, size, size)
            }
        })
        .collect()
}

fn training_images(data: Option<&Path>) -> Result<Vec<ImageBuffer<f32>>> {
    match data {
        Some(d) => load_folder(d, toy::TOY_RESOLUTION),
        None => Ok(toy::training_faces()),
    }
}

fn train_gen(out: &Path, data: Option<&Path>, steps: usize, seed: u64, log: Option<&Path>) -> Result<i32> {
    let images = training_images(data)?;
    let train = TrainConfig {
        steps,
        seed,
        ..TrainConfig::toy()
    };
    let trained = train_generator(&images, &GeneratorConfig::toy(), &train, None)?;
    GeneratorCheckpoint::from_models(&trained.generator, Some(&trained.discriminator), steps, seed).save(out)?;
    if let Some(l) = log {
        write_gan_log(&trained.log, l)?;
    }
    println!("generator {} saved to {}", trained.generator.params.hash(), out.display());
    Ok(0)
}

fn train_enc(generator: &Path, out: &Path, data: Option<&Path>, steps: Option<usize>, seed: u64, log: Option<&Path>) -> Result<i32> {
    let g = GeneratorCheckpoint::load(generator)?.generator::<f32>()?;
    let images = training_images(data)?;
    let base = EncoderTrainConfig::toy();
    let train = EncoderTrainConfig {
        steps: steps.unwrap_or(base.steps),
        seed,
        ..base
    };
    let trained = train_encoder(&images, &g, &EncoderConfig::toy(), &train, &toy::adapters(), None)?;
    EncoderCheckpoint::from_model(&trained.encoder, g.params.hash(), train.steps, seed).save(out)?;
    if let Some(l) = log {
        write_encoder_log(&trained.log, l)?;
    }
    println!("encoder saved to {}", out.display());
    Ok(0)
}

fn load_models(cfg: &Config, a: &ModelArgs) -> Result<(Models, usize)> {
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>, what: &str| {
        flag.clone()
            .or_else(|| conf.clone())
            .ok_or_else(|| Error::Config(format!("no {what} checkpoint given")))
    };
    let g = pick(&a.generator, &cfg.checkpoints.generator, "generator")?;
    let e = pick(&a.encoder, &cfg.checkpoints.encoder, "encoder")?;
    let iterations = a.iterations.unwrap_or(cfg.projection.iterations);
    if iterations == 0 {
        return Err(Error::Config("projection needs at least one iteration".into()));
    }
    Ok((Models::load(&g, &e)?, iterations))
}

fn write_json<S: serde::Serialize>(value: &S, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn project(cfg: &Config, a: ProjectArgs) -> Result<i32> {
    let (models, iterations) = load_models(cfg, &a.models)?;
    let image = load_image::<f64>(&a.input)?;
    let p = models.project(&image, iterations)?;
    create_dir(&a.out)?;
    save_image(&p.final_image, a.out.join("projection.png"))?;
    write_json(&p.codes, &a.out.join("codes.json"))?;
    for (i, img) in p.intermediates.iter().enumerate() {
        save_image(img, a.out.join(format!("iter_{}.png", i + 1)))?;
    }
    println!("projection written to {}", a.out.display());
    Ok(0)
}

fn walk(cfg: &Config, a: WalkArgs) -> Result<i32> {
    let (models, iterations) = load_models(cfg, &a.models)?;
    let spec = match a.t_values {
        Some(t) => WalkSpec::custom(t)?,
        None => WalkSpec::uniform(a.steps)?,
    };
    let image = load_image::<f64>(&a.input)?;
    let landmarks = load_landmarks::<f64>(&a.input, &cfg.projection.landmarks)?;
    let route = a.route.map(Route::from).unwrap_or(cfg.projection.route);
    let w = models.walk(&image, Some(&landmarks), route, iterations, &spec.t_values)?;
    let index = write_walk(&w.frames, &a.out, &models.generator_hash, &models.encoder_hash)?;
    println!("{} frames written to {}", index.files.len(), a.out.display());
    Ok(0)
}

fn mix(cfg: &Config, a: MixArgs) -> Result<i32> {
    let (models, iterations) = load_models(cfg, &a.models)?;
    let p = models.project(&load_image::<f64>(&a.input)?, iterations)?;
    let style = models.style(a.style_seed)?;
    let (_, image) = models
        .mix(&p.codes, &style, a.crossover)
        .map_err(|e| match e {
            Error::InvalidInput(m) => Error::Config(m),
            other => other,
        })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&image, &a.out)?;
    println!("mixed image written to {}", a.out.display());
    Ok(0)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let mut names: Vec<String> = std::fs::read_dir(&a.real)
        .map_err(|e| Error::io(&a.real, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let id = a.identity.map(|suffix| FileEmbedder { suffix });
    let perceptual = a.perceptual.map(|suffix| FileEmbedder { suffix });
    let mut records = Vec::new();
    let mut failures = 0;
    let (mut set_real, mut set_fake) = (Vec::new(), Vec::new());
    for name in &names {
        let (rp, fp) = (a.real.join(name), a.fake.join(name));
        let scored = (|| -> Result<PairRecord> {
            let (x, y) = (load_image::<f64>(&rp)?, load_image::<f64>(&fp)?);
            let rec = PairRecord {
                name: name.clone(),
                l2: l2_metric(&x, &y)?,
                ssim: ssim(&x, &y)?,
                lpips: perceptual
                    .as_ref()
                    .map(|e| perceptual_distance((&x, Some(&rp)), (&y, Some(&fp)), e))
                    .transpose()?,
                id: id.as_ref().map(|e| identity_similarity((&x, Some(&rp)), (&y, Some(&fp)), e)).transpose()?,
            };
            if let Some(e) = &id {
                set_real.push(e.embed(&x, Some(&rp))?);
                set_fake.push(e.embed(&y, Some(&fp))?);
            }
            Ok(rec)
        })();
        match scored {
            Ok(r) => records.push(r),
            Err(e) => {
                eprintln!("skipped {name}: {e}");
                failures += 1;
            }
        }
    }
    let fid_value = if set_real.len() >= 2 { Some(fid(&set_real, &set_fake)?) } else { None };
    let report = MetricReport::new(records, fid_value);
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    Ok(if failures == 0 { 0 } else { 1 })
}

fn serve(cfg: &Config, a: ServeArgs) -> Result<i32> {
    let mut cfg = cfg.clone();
    if let Some(h) = a.host {
        cfg.service.host = h;
    }
    if let Some(p) = a.port {
        cfg.service.port = p;
    }
    if a.generator.is_some() {
        cfg.checkpoints.generator = a.generator;
    }
    if a.encoder.is_some() {
        cfg.checkpoints.encoder = a.encoder;
    }
    let service = ServiceConfig::from_config(&cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("runtime: {e}")))?;
    rt.block_on(crate::service::serve(service))?;
    Ok(0)
}
