//! Command-line front end: training, translation, sampling, video, evaluation.

mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use analogy_core::checkpoint;
use analogy_core::config::{Ablation, Objective, TrainConfig};
use analogy_core::eval::{eval_batch, ConvExtractor};
use analogy_core::image::grid;
use analogy_core::inference::{self, Direction, InferenceRequest, NoiseMode};
use analogy_core::losses::GpMode;
use analogy_core::trainer::{self, ModelBundle, RunHooks, TrainEvent};
use analogy_core::video::{self, VideoJob};
use analogy_core::Image;
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "analogy", version, about = "Structural analogies between two single images")]
struct Cli {
    /// More log output (also controlled by RUST_LOG).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the two-domain model on an image pair (or A frames and one B image).
    Train {
        #[arg(long)]
        a: Option<PathBuf>,
        /// Directory of A frames for video training.
        #[arg(long, conflicts_with = "a")]
        frames: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainArgs,
    },
    /// Train a single-image model used to refine translations.
    RefineTrain {
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainArgs,
    },
    /// Translate an image with a trained checkpoint.
    Translate {
        #[command(flatten)]
        common: InferArgs,
        #[arg(long)]
        input: PathBuf,
        /// Injection scale; negative counts back from the finest (-2 is N-2).
        #[arg(long, allow_hyphen_values = true)]
        inject: Option<i64>,
        /// One output per injection scale.
        #[arg(long)]
        inject_sweep: bool,
        /// Map at this scale and finish in the target domain.
        #[arg(long, allow_hyphen_values = true)]
        early: Option<i64>,
        /// One output per early mapping scale above the injection scale.
        #[arg(long, conflicts_with = "inject_sweep")]
        early_sweep: bool,
        /// Deterministic pass without noise above the injection scale.
        #[arg(long)]
        zero_noise: bool,
        /// Refinement checkpoint (from refine-train) applied to the output.
        #[arg(long)]
        refine: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        refine_insert: Option<i64>,
    },
    /// Random samples of the source domain above their translations.
    Sample {
        #[command(flatten)]
        common: InferArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Translate a directory of frames with fixed noise.
    Video {
        #[command(flatten)]
        common: InferArgs,
        #[arg(long)]
        frames: PathBuf,
        /// Quantise each input frame to this many colours before translating it.
        #[arg(long)]
        quantize: Option<usize>,
        /// Use each frame's own normalisation statistics.
        #[arg(long)]
        live_norm: bool,
    },
    /// SIFID of every image in a directory against a reference.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        /// Trained extractor weights (layer{i}.weight / layer{i}.bias).
        #[arg(long)]
        extractor_weights: Option<PathBuf>,
        #[arg(long)]
        extractor_seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Small preset for CPU runs (width 16, 1/1 steps, 300 iterations, 48 px).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    min_size: Option<usize>,
    /// Shrink ratio between scales.
    #[arg(long)]
    r: Option<f64>,
    /// K = N - k_offset.
    #[arg(long, allow_hyphen_values = true)]
    k_offset: Option<i64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    d_steps: Option<usize>,
    #[arg(long)]
    g_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    lambda_gp: Option<f64>,
    /// Finite-difference gradient penalty with this step instead of double backward.
    #[arg(long)]
    gp_fd_step: Option<f64>,
    /// One of the named ablation variants.
    #[arg(long)]
    ablation: Option<String>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_direction)]
    direction: Option<Direction>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse().map_err(|e: analogy_core::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<analogy_core::Error> for Failure {
    fn from(e: analogy_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn base_config(path: Option<&Path>, command: &str) -> Result<RunConfig, Failure> {
    let mut c = match path {
        Some(p) => RunConfig::read(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    c.command = command.to_string();
    Ok(c)
}

fn apply_train_args(c: &mut RunConfig, o: &TrainArgs) -> Result<(), Failure> {
    if o.desk {
        c.train = TrainConfig { seed: c.train.seed, ablation: c.train.ablation, objective: c.train.objective, ..TrainConfig::desk() };
    }
    let t = &mut c.train;
    if let Some(v) = o.max_size {
        t.schedule.max_size = v;
    }
    if let Some(v) = o.min_size {
        t.schedule.min_size = v;
    }
    if let Some(v) = o.r {
        t.schedule.r = v;
    }
    if let Some(v) = o.k_offset {
        t.schedule.k_offset = v;
    }
    if let Some(v) = o.iters {
        t.iters_per_scale = v;
    }
    if let Some(v) = o.width {
        t.base_channels = v;
    }
    if let Some(v) = o.d_steps {
        t.d_steps = v;
    }
    if let Some(v) = o.g_steps {
        t.g_steps = v;
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.lambda_recon {
        t.weights.lambda_recon = v;
    }
    if let Some(v) = o.lambda_cycle {
        t.weights.lambda_cycle = v;
    }
    if let Some(v) = o.lambda_gp {
        t.weights.lambda_gp = v;
    }
    if let Some(step) = o.gp_fd_step {
        t.gp_mode = GpMode::FiniteDifference { step };
    }
    if let Some(name) = &o.ablation {
        let variants = Ablation::variants();
        t.ablation = variants.iter().find(|(n, _)| n == name).map(|(_, a)| *a).ok_or_else(|| {
            let names: Vec<&str> = variants.iter().map(|(n, _)| *n).collect();
            usage(format!("unknown ablation {name:?}; expected one of {}", names.join(", ")))
        })?;
    }
    if let Some(out) = &o.out {
        c.out_dir = out.clone();
    }
    Ok(())
}

fn apply_infer_args(c: &mut RunConfig, o: &InferArgs) {
    c.checkpoint = Some(o.checkpoint.clone());
    if let Some(d) = o.direction {
        c.inference.direction = d;
    }
    if let Some(s) = o.seed {
        c.inference.seed = s;
    }
    if let Some(out) = &o.out {
        c.out_dir = out.clone();
    }
}

/// Validates, then records the configuration in the output directory.
fn prepare(c: &RunConfig) -> CmdResult {
    c.validate().map_err(usage)?;
    c.write(&c.out_dir)?;
    info!("{} -> {}", c.command, c.out_dir.display());
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn load_images(files: &[PathBuf]) -> Result<Vec<Image>, Failure> {
    files.iter().map(|f| Ok(Image::load(f)?)).collect()
}

fn save(img: &Image, path: &Path) -> CmdResult {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn direction_tag(d: Direction) -> &'static str {
    match d {
        Direction::AToB => "a2b",
        Direction::BToA => "b2a",
    }
}

/// Shared training driver: checkpoints and a preview grid after each scale.
fn run_training(c: &RunConfig, frames_a: &[Image], img_b: &Image, resume: bool) -> CmdResult {
    let ckpt = c.out_dir.join("checkpoint");
    let preview_dir = c.out_dir.join("preview");
    let mut preview_err = None;
    let mut obs = |e: &TrainEvent<'_>| match e {
        TrainEvent::ScaleEnd { scale, bundle } => {
            let res = inference::preview_grid(bundle, *scale, c.train.seed)
                .map_err(Failure::from)
                .and_then(|g| save(&g, &preview_dir.join(format!("scale_{scale}.png"))));
            if let Err(Failure::Runtime(m) | Failure::Usage(m)) = res {
                preview_err.get_or_insert(m);
            }
        }
        TrainEvent::Iteration(r) if r.iteration % 100 == 0 => {
            info!("scale {} iter {}: G {:.4} D {:.4} recon {:.4}/{:.4}", r.scale, r.iteration, r.total_g, r.total_d, r.recon_a, r.recon_b);
        }
        _ => {}
    };
    let mut hooks = RunHooks { checkpoint_dir: Some(ckpt.clone()), stop_after: None, observer: Some(&mut obs) };
    let bundle = if resume && ckpt.join(checkpoint::MANIFEST).exists() {
        trainer::resume(&ckpt, frames_a, img_b, &mut hooks)?
    } else if frames_a.len() > 1 {
        video::train_video(frames_a, img_b, &c.train, &mut hooks)?
    } else {
        trainer::train_pair_with(&frames_a[0], img_b, &c.train, &mut hooks)?
    };
    if let Some(m) = preview_err {
        return Err(Failure::Runtime(format!("preview grid: {m}")));
    }
    info!("trained {} scales, sizes {:?}, K = {}", bundle.sched.num_scales(), bundle.sched.sizes, bundle.sched.k);
    Ok(())
}

fn cmd_train(a: Option<PathBuf>, frames: Option<PathBuf>, b: Option<PathBuf>, o: &TrainArgs) -> CmdResult {
    let mut c = base_config(o.config.as_deref(), "train")?;
    apply_train_args(&mut c, o)?;
    c.img_a = a.or(c.img_a);
    c.frames = frames.or(c.frames);
    c.img_b = b.or(c.img_b);
    c.train.objective = Objective::Pair;
    if c.img_a.is_none() && c.frames.is_none() {
        return Err(usage("train needs --a or --frames"));
    }
    let Some(b_path) = c.img_b.clone() else {
        return Err(usage("train needs --b"));
    };
    prepare(&c)?;
    let frames_a = match (&c.frames, &c.img_a) {
        (Some(dir), _) => load_images(&image_files(dir)?)?,
        (None, Some(a)) => vec![Image::load(a)?],
        (None, None) => unreachable!(),
    };
    run_training(&c, &frames_a, &Image::load(&b_path)?, o.resume)
}

fn cmd_refine_train(image: Option<PathBuf>, o: &TrainArgs) -> CmdResult {
    let mut c = base_config(o.config.as_deref(), "refine-train")?;
    apply_train_args(&mut c, o)?;
    c.img_a = image.or(c.img_a);
    c.img_b = None;
    c.train.objective = Objective::Single;
    let Some(path) = c.img_a.clone() else {
        return Err(usage("refine-train needs --image"));
    };
    prepare(&c)?;
    let img = Image::load(&path)?;
    run_training(&c, std::slice::from_ref(&img), &img, o.resume)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    // accept either the checkpoint directory or a run directory containing one
    let dir = if path.join(checkpoint::MANIFEST).exists() { path.to_path_buf() } else { path.join("checkpoint") };
    Ok(checkpoint::load(&dir)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_translate(
    common: &InferArgs,
    input: PathBuf,
    inject: Option<i64>,
    inject_sweep: bool,
    early: Option<i64>,
    early_sweep: bool,
    zero_noise: bool,
    refine: Option<PathBuf>,
    refine_insert: Option<i64>,
) -> CmdResult {
    let mut c = base_config(common.config.as_deref(), "translate")?;
    apply_infer_args(&mut c, common);
    c.img_a = Some(input.clone());
    if let Some(s) = inject {
        c.inference.inject = s;
    }
    c.inference.early = early.or(c.inference.early);
    if zero_noise {
        c.inference.noise = NoiseMode::Zero;
    }
    c.inference.refine_checkpoint = refine.or(c.inference.refine_checkpoint);
    if let Some(s) = refine_insert {
        c.inference.refine_insert = s;
    }
    prepare(&c)?;
    let bundle = load_bundle(common.checkpoint.as_path())?;
    let refiner = c.inference.refine_checkpoint.as_deref().map(load_bundle).transpose()?;
    let source = Image::load(&input)?;
    let inf = &c.inference;
    let req = InferenceRequest { direction: inf.direction, inject: inf.inject, early: inf.early, seed: inf.seed, noise: inf.noise };
    let tag = direction_tag(inf.direction);
    let finish = |img: Image| -> Result<Image, Failure> {
        match &refiner {
            Some(r) => Ok(inference::refine(r, &img, inf.refine_insert, inf.seed, inf.noise)?),
            None => Ok(img),
        }
    };
    if inject_sweep || early_sweep {
        let (results, prefix) = if inject_sweep {
            (inference::injection_sweep(&bundle, &source, &req)?, "s")
        } else {
            (inference::early_sweep(&bundle, &source, &req)?, "early")
        };
        let mut row = vec![inference_input(&bundle, &source)?];
        for (s, img) in results {
            let img = finish(img)?;
            save(&img, &c.out_dir.join(format!("translate_{tag}_{prefix}{s}.png")))?;
            row.push(img);
        }
        save(&grid(&[row], 2)?, &c.out_dir.join(format!("translate_{tag}_{prefix}_sweep.png")))?;
        return Ok(());
    }
    let s = bundle.sched.resolve(req.inject).map_err(|e| usage(e.to_string()))?;
    let out = match req.early {
        Some(sp) => inference::translate_early(&bundle, &source, &req, sp)?,
        None => inference::translate(&bundle, &source, &req)?,
    };
    save(&finish(out)?, &c.out_dir.join(format!("translate_{tag}_s{s}.png")))
}

/// The source as the model sees it, for the first column of sweep grids.
fn inference_input(bundle: &ModelBundle, source: &Image) -> Result<Image, Failure> {
    Ok(analogy_core::pyramid::resize(source, bundle.sched.finest())?)
}

fn cmd_sample(common: &InferArgs, count: Option<usize>) -> CmdResult {
    let mut c = base_config(common.config.as_deref(), "sample")?;
    apply_infer_args(&mut c, common);
    if let Some(n) = count {
        c.inference.count = n;
    }
    prepare(&c)?;
    let bundle = load_bundle(common.checkpoint.as_path())?;
    let g = inference::sample_grid(&bundle, c.inference.direction, c.inference.count, c.inference.seed)?;
    save(&g, &c.out_dir.join(format!("samples_{}.png", direction_tag(c.inference.direction))))
}

fn cmd_video(common: &InferArgs, frames: PathBuf, quantize: Option<usize>, live_norm: bool) -> CmdResult {
    let mut c = base_config(common.config.as_deref(), "video")?;
    apply_infer_args(&mut c, common);
    c.frames = Some(frames.clone());
    c.video.quantize_colors = quantize.or(c.video.quantize_colors);
    if live_norm {
        c.video.freeze_norm = false;
    }
    prepare(&c)?;
    let files = image_files(&frames)?;
    let bundle = load_bundle(common.checkpoint.as_path())?;
    let first = Image::load(&files[0])?;
    let job = VideoJob::new(&bundle, &first, c.inference.seed, c.video.quantize_colors, c.video.freeze_norm)?;
    let out_dir = c.out_dir.join("frames");
    for (i, f) in files.iter().enumerate() {
        let out = video::translate_frame(&bundle, &Image::load(f)?, &job)?;
        save(&out, &out_dir.join(format!("{i:05}.png")))?;
    }
    info!("translated {} frames", files.len());
    Ok(())
}

fn cmd_eval(
    reference: PathBuf,
    dir: PathBuf,
    weights: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
) -> CmdResult {
    let mut c = base_config(config.as_deref(), "eval")?;
    c.img_a = Some(reference.clone());
    c.frames = Some(dir.clone());
    c.eval.extractor_weights = weights.or(c.eval.extractor_weights);
    if let Some(s) = seed {
        c.eval.extractor_seed = s;
    }
    if let Some(o) = out {
        c.out_dir = o;
    }
    prepare(&c)?;
    let e = &c.eval;
    let extractor = match &e.extractor_weights {
        Some(p) => ConvExtractor::load(p)?,
        None => ConvExtractor::random(e.extractor_seed, e.extractor_depth, e.extractor_dim),
    };
    let summary = eval_batch(&Image::load(&reference)?, &dir, &extractor).map_err(|err| match err {
        analogy_core::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let path = c.out_dir.join("sifid.csv");
    std::fs::write(&path, summary.to_csv())?;
    println!("mean SIFID {:.6} over {} images ({})", summary.mean, summary.scores.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { a, frames, b, opts } => cmd_train(a, frames, b, &opts),
        Command::RefineTrain { image, opts } => cmd_refine_train(image, &opts),
        Command::Translate { common, input, inject, inject_sweep, early, early_sweep, zero_noise, refine, refine_insert } => {
            cmd_translate(&common, input, inject, inject_sweep, early, early_sweep, zero_noise, refine, refine_insert)
        }
        Command::Sample { common, count } => cmd_sample(&common, count),
        Command::Video { common, frames, quantize, live_norm } => cmd_video(&common, frames, quantize, live_norm),
        Command::Eval { reference, dir, extractor_weights, extractor_seed, out, config } => {
            cmd_eval(reference, dir, extractor_weights, extractor_seed, out, config)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            error!("{m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            error!("{m}");
            ExitCode::from(3)
        }
    }
}
