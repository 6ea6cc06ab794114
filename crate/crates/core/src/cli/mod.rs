//! The `celsr` command line: one binary, one subcommand per workflow.
//!
//! Config files are the source of truth and flags override them. Every run
//! writes `resolved_config.toml` and `run.json` next to its outputs. Exit
//! codes: 0 success, 1 runtime failure, 2 bad usage or config, 3 missing
//! environment (encoder or plugin).

mod config;

pub use config::{describe_keys, resolve, CommandConfig};

use std::ffi::OsString;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curate::{curate_videos, CommandScorer, CurationConfig, SourceVideo, DATASET_MANIFEST};
use crate::degrade::{run_pipeline, sample_degradation, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{benchmark_runtime, evaluate, render_table, write_report, FrameScorer, GeneratorModel, NiqeScorer, PluginScorer, SrModel};
use crate::lbo::{train_lbo, LboPool, LboTrainConfig};
use crate::media::{
    frame_file_name, load_frame, read_clip, resize_frame, save_frame_png, Clip, ClipManifest, ResizeMethod, SourceInfo, MANIFEST_FILE,
};
use crate::rescale::{
    export_pairs, generate_candidates, load_pair_dataset, serve, ApiState, ExportConfig, RescaleConfig, RescaleWorkspace, SelectionStore,
    EXPORT_FILE,
};
use crate::train::{config_hash, train_stage, Discriminator, TrainConfig, TrainData, DISCRIMINATOR_FILE, GENERATOR_FILE};
use crate::vsr::{stream_sequence, Generator, GeneratorArch};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CELSR_GIT_REV"), ")");
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const RUN_STAMP: &str = "run.json";
pub const LBO_FILE: &str = "lbo.safetensors";
pub const DEGRADATION_FILE: &str = "degradation.json";
pub const BENCH_FILE: &str = "benchmark.json";
/// Directories searched for plugin programs given by bare name, before `PATH`.
pub const PLUGIN_PATH_ENV: &str = "CELSR_PLUGIN_PATH";
/// Log filter, in `env_logger` syntax; overrides `-v` / `-q`.
pub const LOG_ENV: &str = "CELSR_LOG";

#[derive(Parser, Debug)]
#[command(name = "celsr", version = VERSION, about = "Animation video super-resolution toolkit")]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML config for the subcommand
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage.6.crf=[20,30]`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random draw of the run
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a degraded LR clip from an HR clip
    Degrade(DegradeArgs),
    /// Fit a learnable degradation operator to exported LR/pseudo-HR pairs
    TrainLbo(TrainLboArgs),
    /// Train the generator (stage 1: L1 only; stage 2: adds perceptual and adversarial terms)
    Train(TrainArgs),
    /// Super-resolve a clip x4
    Infer(InferArgs),
    /// Split source videos into scenes and keep the best clip of each
    Curate(CurateArgs),
    /// Generate rescale candidates and serve the review API
    RescaleServe(ServeArgs),
    /// Export LR / pseudo-HR pairs for an approved rescale selection
    ExportPairs(ExportArgs),
    /// Score models on clips with no-reference metrics
    Evaluate(EvalArgs),
    /// Time one recurrent step
    Benchmark(BenchArgs),
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// HR clip directory
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Learnable operator weights, or a train-lbo output dir, forming the pool (repeatable)
    #[arg(long = "lbo", value_name = "PATH")]
    lbo: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainLboArgs {
    /// Export directory or its export.json
    #[arg(long, value_name = "PATH")]
    pairs: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// HR clip directories or curated dataset manifests (repeatable)
    #[arg(long, value_name = "PATH", required = true)]
    data: Vec<PathBuf>,
    /// Degradation pipeline config (TOML); defaults to the built-in one
    #[arg(long, value_name = "FILE")]
    pipeline: Option<PathBuf>,
    /// Learnable operator weights, or a train-lbo output dir, forming the pool (repeatable)
    #[arg(long = "lbo", value_name = "PATH")]
    lbo: Vec<PathBuf>,
    /// Checkpoint to start from; required for stage 2
    #[arg(long, value_name = "PATH")]
    init: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Generator weights file or checkpoint directory
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// LR clip directory (with manifest.json, or just PNG frames)
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CurateArgs {
    /// Source video as a clip directory (repeatable)
    #[arg(long, value_name = "DIR", required = true)]
    video: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, value_name = "DIR")]
    workspace: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Generator for candidate generation and exports
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// LQ video to generate candidates for before serving (repeatable)
    #[arg(long, value_name = "DIR")]
    video: Vec<PathBuf>,
    /// Generate candidates and exit without serving
    #[arg(long)]
    prepare_only: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, value_name = "DIR")]
    workspace: PathBuf,
    #[arg(long, value_name = "ID")]
    video_id: String,
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// LQ clip; defaults to the source recorded with the candidates
    #[arg(long, value_name = "DIR")]
    source: Option<PathBuf>,
    /// Defaults to `<workspace>/exports/<video_id>`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Generator to evaluate (repeatable); the bilinear baseline is always included
    #[arg(long, value_name = "PATH")]
    model: Vec<PathBuf>,
    /// LR clip directory (repeatable)
    #[arg(long, value_name = "DIR", required = true)]
    clip: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Generator to time; defaults to a freshly initialized `generator` arch
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Area-downscale the input by this factor before super-resolving.
    pub input_scale: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { input_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    pub candidates: RescaleConfig,
    pub export: ExportConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            candidates: RescaleConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub niqe: bool,
    /// External scorers, each `{ id, program, args }`.
    pub plugins: Vec<CommandScorer>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            niqe: true,
            plugins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// LR input size.
    pub height: usize,
    pub width: usize,
    pub trials: usize,
    /// Architecture used when no model is given.
    pub generator: GeneratorArch,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 180,
            width: 320,
            trials: 10,
            generator: GeneratorArch::default(),
        }
    }
}

fn with_config_help(cmd: clap::Command) -> clap::Command {
    cmd.mut_subcommand("degrade", |s| s.after_help(describe_keys::<PipelineConfig>()))
        .mut_subcommand("train-lbo", |s| s.after_help(describe_keys::<LboTrainConfig>()))
        .mut_subcommand("train", |s| s.after_help(describe_keys::<TrainConfig>()))
        .mut_subcommand("infer", |s| s.after_help(describe_keys::<InferConfig>()))
        .mut_subcommand("curate", |s| s.after_help(describe_keys::<CurationConfig>()))
        .mut_subcommand("rescale-serve", |s| s.after_help(describe_keys::<ServeConfig>()))
        .mut_subcommand("export-pairs", |s| s.after_help(describe_keys::<ExportConfig>()))
        .mut_subcommand("evaluate", |s| s.after_help(describe_keys::<EvalConfig>()))
        .mut_subcommand("benchmark", |s| s.after_help(describe_keys::<BenchConfig>()))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let matches = match with_config_help(Cli::command()).try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    init_logging(&cli.global);
    let ctx = Ctx {
        global: &cli.global,
        argv: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    match execute(&ctx, &cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.class());
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        "config" => 2,
        "environment" | "plugin" => 3,
        _ => 1,
    }
}

fn hint(e: &Error) -> Option<&'static str> {
    match e.class() {
        "environment" => Some(
            "install ffmpeg or point CELSR_FFMPEG at it, or use the built-in surrogate with --set 'backend={backend=\"mock\"}'",
        ),
        "plugin" => Some(
            "check the plugin program (bare names are looked up in CELSR_PLUGIN_PATH, then PATH) or set fallback_to_builtin = true",
        ),
        _ => None,
    }
}

fn init_logging(g: &GlobalArgs) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or(LOG_ENV, level))
        .format_timestamp_millis()
        .try_init();
}

struct Ctx<'a> {
    global: &'a GlobalArgs,
    argv: Vec<String>,
}

#[derive(Serialize)]
struct RunStamp<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: Option<u64>,
    config_hash: String,
    argv: &'a [String],
}

impl Ctx<'_> {
    fn config<T: CommandConfig>(&self) -> Result<T> {
        resolve(self.global.config.as_deref(), &self.global.overrides)
    }

    /// Logs the resolved config and writes it, plus the version stamp, to `dir`.
    fn stamp<T: Serialize>(&self, dir: &Path, subcommand: &str, cfg: &T, seed: Option<u64>) -> Result<()> {
        let body = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
        log::info!("celsr {VERSION} {subcommand}, resolved config:\n{body}");
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let text = format!("# celsr {VERSION}\n# subcommand: {subcommand}\n{body}");
        write_file(&dir.join(RESOLVED_CONFIG), text.as_bytes())?;
        let stamp = RunStamp {
            tool: "celsr",
            version: VERSION,
            subcommand,
            seed,
            config_hash: config_hash(&body),
            argv: &self.argv,
        };
        write_file(&dir.join(RUN_STAMP), &serde_json::to_vec_pretty(&stamp)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn execute(ctx: &Ctx, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Degrade(a) => degrade(ctx, a),
        Command::TrainLbo(a) => train_lbo_cmd(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Infer(a) => infer(ctx, a),
        Command::Curate(a) => curate(ctx, a),
        Command::RescaleServe(a) => rescale_serve(ctx, a),
        Command::ExportPairs(a) => export(ctx, a),
        Command::Evaluate(a) => evaluate_cmd(ctx, a),
        Command::Benchmark(a) => benchmark(ctx, a),
    }
}

/// Frame files of a clip directory: from its manifest when there is one,
/// otherwise every PNG in name order. Returns `(clip_id, fps, paths)`.
fn frame_paths(dir: &Path) -> Result<(String, f64, Vec<PathBuf>)> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.is_file() || dir.is_file() {
        let mpath = if dir.is_file() { dir.to_path_buf() } else { manifest };
        let m = ClipManifest::load(&mpath)?;
        let base = mpath.parent().unwrap_or(Path::new("."));
        return Ok((m.clip_id, m.fps, m.frames.iter().map(|f| base.join(f)).collect()));
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no manifest and no PNG frames", dir.display())));
    }
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    Ok((id, 24.0, paths))
}

fn load_clip(dir: &Path) -> Result<Clip> {
    if dir.join(MANIFEST_FILE).is_file() || dir.is_file() {
        return read_clip(dir);
    }
    let (id, fps, paths) = frame_paths(dir)?;
    let frames = paths.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
    Clip::new(id, fps, frames)
}

/// HR clips from clip directories or curated dataset manifests.
fn load_training_clips(paths: &[PathBuf]) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for p in paths {
        let manifest = if p.is_dir() { p.join(DATASET_MANIFEST) } else { p.clone() };
        if manifest.file_name().is_some_and(|n| n == DATASET_MANIFEST) && manifest.is_file() {
            let ds = crate::curate::DatasetManifest::load(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            for entry in &ds.clips {
                clips.push(read_clip(base.join(&entry.dir))?);
            }
        } else {
            clips.push(load_clip(p)?);
        }
    }
    Ok(clips)
}

fn weights_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load_pool(paths: &[PathBuf], dev: &Device) -> Result<LboPool> {
    let files: Vec<PathBuf> = paths.iter().map(|p| weights_file(p, LBO_FILE)).collect();
    LboPool::load(&files, dev)
}

fn load_generator(path: &Path) -> Result<Generator> {
    Generator::load(&weights_file(path, GENERATOR_FILE), DType::F32, &Device::Cpu)
}

fn model_id(path: &Path) -> String {
    let named = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    let id = if path.is_dir() {
        named(path)
    } else {
        match path.file_stem().map(|s| s.to_string_lossy().into_owned()) {
            Some(s) if s == "generator" => path.parent().and_then(named),
            other => other,
        }
    };
    id.unwrap_or_else(|| "model".into())
}

/// Resolves a bare plugin program name against the plugin search path.
fn find_plugin(program: &Path) -> PathBuf {
    if program.components().count() > 1 {
        return program.to_path_buf();
    }
    std::env::var_os(PLUGIN_PATH_ENV)
        .and_then(|dirs| {
            std::env::split_paths(&dirs)
                .map(|d| d.join(program))
                .find(|p| p.is_file())
        })
        .unwrap_or_else(|| program.to_path_buf())
}

fn degrade(ctx: &Ctx, a: &DegradeArgs) -> Result<()> {
    let cfg: PipelineConfig = ctx.config()?;
    let seed = ctx.global.seed.unwrap_or(0);
    ctx.stamp(&a.out, "degrade", &cfg, Some(seed))?;
    let hr = load_clip(&a.input)?;
    let pool = load_pool(&a.lbo, &Device::Cpu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sample_degradation(&cfg, pool.len(), &mut rng)?;
    log::info!("degradation draw: {}", serde_json::to_string(&d)?);
    let lr = run_pipeline(&hr, &d, &pool, &cfg.backend)?;
    crate::media::write_clip(&lr, &a.out)?;
    write_file(&a.out.join(DEGRADATION_FILE), &serde_json::to_vec_pretty(&d)?)?;
    let (h, w) = lr.dims();
    log::info!("wrote {} frames at {h}x{w} to {}", lr.len(), a.out.display());
    Ok(())
}

fn train_lbo_cmd(ctx: &Ctx, a: &TrainLboArgs) -> Result<()> {
    let mut cfg: LboTrainConfig = ctx.config()?;
    if let Some(s) = ctx.global.seed {
        cfg.seed = s;
    }
    ctx.stamp(&a.out, "train-lbo", &cfg, Some(cfg.seed))?;
    let ds = load_pair_dataset(&weights_file(&a.pairs, EXPORT_FILE))?;
    let outcome = train_lbo(&ds, &cfg, Some(&a.out))?;
    let path = a.out.join(LBO_FILE);
    outcome.weights.save(&path)?;
    log::info!(
        "final loss {:.6} after {} iterations; weights in {}",
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        outcome.losses.len(),
        path.display()
    );
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = ctx.config()?;
    cfg.stage = a.stage;
    if let Some(s) = ctx.global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.stage >= 2 && a.init.is_none() {
        return Err(Error::Config("stage 2 needs --init with a stage-1 checkpoint".into()));
    }
    ctx.stamp(&a.out, "train", &cfg, Some(cfg.seed))?;
    let pipeline: PipelineConfig = match &a.pipeline {
        Some(p) => resolve(Some(p), &[])?,
        None => PipelineConfig::default(),
    };
    let dev = Device::Cpu;
    let data = TrainData {
        hr_clips: load_training_clips(&a.data)?,
        pipeline,
        pool: load_pool(&a.lbo, &dev)?,
    };
    let mut gen = match &a.init {
        Some(p) => load_generator(p)?,
        None => Generator::seeded(cfg.generator, cfg.seed, DType::F32, &dev)?,
    };
    if gen.arch() != cfg.generator {
        log::warn!("checkpoint arch {:?} overrides config arch {:?}", gen.arch(), cfg.generator);
    }
    let disc = if cfg.stage >= 2 {
        let saved = a.init.as_deref().map(|p| weights_file(p, GENERATOR_FILE).with_file_name(DISCRIMINATOR_FILE));
        Some(match saved {
            Some(p) if p.is_file() => Discriminator::load(&p, DType::F32, &dev)?,
            _ => Discriminator::seeded(cfg.discriminator.base_width, cfg.seed, DType::F32, &dev)?,
        })
    } else {
        None
    };
    let outcome = train_stage(&mut gen, disc.as_ref(), &data, &cfg, &a.out)?;
    gen.save(&a.out.join(GENERATOR_FILE))?;
    if let Some(d) = &disc {
        d.save(&a.out.join(DISCRIMINATOR_FILE))?;
    }
    if let Some(last) = outcome.log.last() {
        log::info!("stage {} done at iteration {}, l1 {:.5}", cfg.stage, last.iter, last.report.l1);
    }
    Ok(())
}

fn infer(ctx: &Ctx, a: &InferArgs) -> Result<()> {
    let cfg: InferConfig = ctx.config()?;
    ctx.stamp(&a.out, "infer", &cfg, ctx.global.seed)?;
    let gen = load_generator(&a.model)?;
    let (clip_id, fps, paths) = frame_paths(&a.input)?;
    let scale = cfg.input_scale;
    let frames = paths.iter().map(|p| {
        let f = load_frame(p)?;
        if scale < 1.0 {
            resize_frame(&f, scale, ResizeMethod::Area)
        } else {
            Ok(f)
        }
    });
    // frames go to disk as they come out, so memory does not grow with length
    let mut names = Vec::with_capacity(paths.len());
    let mut dims = None;
    stream_sequence(&gen, frames, |i, f| {
        let name = frame_file_name(i);
        save_frame_png(&f, &a.out.join(&name))?;
        dims = Some([f.height(), f.width()]);
        names.push(name);
        Ok(())
    })?;
    let m = ClipManifest {
        clip_id,
        fps,
        frames: names,
        source: SourceInfo {
            resolution: dims,
            origin_url: None,
        },
        tags: vec!["sr".into()],
    };
    write_file(&a.out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&m)?)?;
    log::info!("wrote {} SR frames to {}", m.frames.len(), a.out.display());
    Ok(())
}

fn curate(ctx: &Ctx, a: &CurateArgs) -> Result<()> {
    let mut cfg: CurationConfig = ctx.config()?;
    for p in [&mut cfg.quality_plugin, &mut cfg.motion_plugin].into_iter().flatten() {
        p.program = find_plugin(&p.program);
    }
    ctx.stamp(&a.out, "curate", &cfg, ctx.global.seed)?;
    let videos = a
        .video
        .iter()
        .map(|p| {
            let clip = load_clip(p)?;
            Ok(SourceVideo {
                video_id: clip.clip_id.clone(),
                path: p.clone(),
                clip,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = curate_videos(&videos, &cfg, &a.out)?;
    log::info!("kept {} of {} candidate clips", m.clips.len(), m.candidates_scored);
    Ok(())
}

fn rescale_serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    let cfg: ServeConfig = ctx.config()?;
    let addr: SocketAddr = format!("{}:{}", cfg.bind, a.port)
        .parse()
        .map_err(|e| Error::Config(format!("bind address `{}`: {e}", cfg.bind)))?;
    let ws = RescaleWorkspace::new(&a.workspace);
    ctx.stamp(ws.root(), "rescale-serve", &cfg, ctx.global.seed)?;
    let model = a.model.as_deref().map(load_generator).transpose()?;
    for v in &a.video {
        let gen = model
            .as_ref()
            .ok_or_else(|| Error::Config("--video needs --model to generate candidates".into()))?;
        let lq = load_clip(v)?;
        let vc = generate_candidates(&lq, &lq.clip_id, Some(v), gen, &cfg.candidates, &ws)?;
        log::info!("{}: {} candidates, default ranking {:?}", vc.video_id, vc.candidates.len(), vc.ranking());
    }
    if a.prepare_only {
        return Ok(());
    }
    let state = Arc::new(ApiState::open(ws, model, cfg.export)?);
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("starting the async runtime", e))?
        .block_on(serve(state, addr))
}

fn export(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    let cfg: ExportConfig = ctx.config()?;
    let ws = RescaleWorkspace::new(&a.workspace);
    let out = a.out.clone().unwrap_or_else(|| ws.exports_dir(&a.video_id));
    let store = SelectionStore::open(&ws.selections_dir())?;
    let rec = store
        .current(&a.video_id)
        .ok_or_else(|| Error::NotFound(format!("no selection recorded for video `{}`", a.video_id)))?;
    let source = match &a.source {
        Some(s) => s.clone(),
        None => ws
            .load_candidates(&a.video_id)?
            .source
            .ok_or_else(|| Error::Config(format!("no --source given and none recorded for `{}`", a.video_id)))?,
    };
    ctx.stamp(&out, "export-pairs", &cfg, ctx.global.seed)?;
    let lq = load_clip(&source)?;
    let gen = load_generator(&a.model)?;
    let m = export_pairs(&rec, &lq, &gen, &cfg, &out)?;
    log::info!("exported {} pairs at factor {} to {}", m.pairs.len(), m.factor, out.display());
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let cfg: EvalConfig = ctx.config()?;
    ctx.stamp(&a.out, "evaluate", &cfg, ctx.global.seed)?;
    let gens = a
        .model
        .iter()
        .map(|p| Ok((model_id(p), load_generator(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let wrapped: Vec<GeneratorModel> = gens.iter().map(|(id, gen)| GeneratorModel { id: id.clone(), gen }).collect();
    let models: Vec<&dyn SrModel> = wrapped.iter().map(|m| m as &dyn SrModel).collect();
    let clips = a.clip.iter().map(|p| load_clip(p)).collect::<Result<Vec<_>>>()?;
    let plugins: Vec<PluginScorer> = cfg
        .plugins
        .iter()
        .map(|c| PluginScorer {
            command: CommandScorer {
                program: find_plugin(&c.program),
                ..c.clone()
            },
        })
        .collect();
    let mut scorers: Vec<&dyn FrameScorer> = Vec::new();
    if cfg.niqe {
        scorers.push(&NiqeScorer);
    }
    scorers.extend(plugins.iter().map(|p| p as &dyn FrameScorer));
    let report = evaluate(&models, &clips, &scorers)?;
    write_report(&report, &a.out)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn benchmark(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let cfg: BenchConfig = ctx.config()?;
    let seed = ctx.global.seed.unwrap_or(0);
    if let Some(out) = &a.out {
        ctx.stamp(out, "benchmark", &cfg, Some(seed))?;
    }
    let gen = match &a.model {
        Some(p) => load_generator(p)?,
        None => Generator::seeded(cfg.generator, seed, DType::F32, &Device::Cpu)?,
    };
    let r = benchmark_runtime(&gen, cfg.height, cfg.width, cfg.trials)?;
    let json = serde_json::to_string_pretty(&r)?;
    println!("{json}");
    if let Some(out) = &a.out {
        write_file(&out.join(BENCH_FILE), json.as_bytes())?;
    }
    Ok(())
}
