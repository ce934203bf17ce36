//! Batch command-line surface. The `handmesh` binary only forwards its
//! arguments to [`run`].
//!
//! Exit codes: 0 on success, 1 for invalid arguments, configuration or
//! data, 2 for runtime failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    export_obj, ingest_freihand, load_all, load_image, load_manifest, make_synthetic, FreiHandPaths, HandSample,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::metrics::{bench_fps, points, ErrorMode, MetricsReport};
use crate::model::Prediction;
use crate::params::NetworkParams;
use crate::tensor::Tensor;
use crate::train::train_to_dir;

/// Head-only parameter count quoted for the reference network.
pub const REFERENCE_HEAD_PARAMS: &str = "1.91M";
/// Minimum timed and warmup iterations accepted by `bench`.
pub const MIN_BENCH_ITERS: usize = 100;
pub const MIN_BENCH_WARMUP: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "handmesh", version, about = "Hand pose and mesh regression: train, evaluate, infer, benchmark")]
pub struct Cli {
    /// Config file (flat `key = value`); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from seeded initial weights; writes a log and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Run one image through a checkpoint.
    Infer(InferArgs),
    /// Time single-image forward passes and count parameters.
    Bench(BenchArgs),
    /// Write a synthetic dataset manifest.
    MakeSynth(MakeSynthArgs),
    /// Convert FreiHand-style annotation arrays and images to a manifest.
    IngestFreihand(IngestArgs),
    /// Write a sample's mesh, or a checkpoint's prediction for it, as OBJ.
    ExportObj(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest [default: `data.train` from the config].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `train_log.txt`, `final.ckpt`, `best.ckpt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Override `train.epochs`; the lr boundary moves to the halfway epoch.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size 32 instead of the configured value.
    #[arg(long)]
    pub full_scale: bool,
    /// Suppress per-epoch lines on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation manifest [default: `data.eval` from the config].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Worker threads [default: `metrics.workers`].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Score F-scores on unaligned vertices.
    #[arg(long)]
    pub no_align: bool,
    /// `mean_euclidean` or `rmse` [default: `metrics.mode`].
    #[arg(long)]
    pub mode: Option<ErrorMode>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for `kp2d.txt`, `joints3d.txt`, `mesh.obj`.
    #[arg(long)]
    pub out: PathBuf,
    /// Rescale images that are not the model input size.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Weights to time; seeded initial weights when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Timed iterations [default: `bench.iters`].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Untimed warmup iterations [default: `bench.warmup`].
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Data seed [default: `seed` from the config].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSON array of per-sample 21x3 joint coordinates.
    #[arg(long)]
    pub xyz: PathBuf,
    /// JSON array of per-sample 778x3 vertices.
    #[arg(long)]
    pub verts: PathBuf,
    /// JSON array of per-sample 3x3 intrinsic matrices.
    #[arg(long)]
    pub k: PathBuf,
    /// Directory of `%08d.jpg` images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stored image size [default: `backbone.input_size`].
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sample id [default: the first sample].
    #[arg(long)]
    pub id: Option<String>,
    /// Export this checkpoint's prediction instead of the stored mesh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Loads and validates the configuration named on the command line.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let here = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v, &here)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Runs the parsed command, writing its report to `out`.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
                cfg.train.lr_boundary = e / 2;
            }
            if a.full_scale {
                cfg.train.batch_size = 32;
            }
            cfg.validate()?;
            let data = a.data.clone().or_else(|| cfg.train_manifest.clone());
            let data = data.ok_or_else(|| Error::Config("no training data: pass --data or set data.train".into()))?;
            let samples = load_all(&data)?;
            let quiet = a.quiet;
            let mut log_err = None;
            let net = cfg.network()?;
            let art = train_to_dir(&cfg, &net, &samples, &a.out, |e| {
                if !quiet {
                    if let Err(err) = writeln!(out, "{e}") {
                        log_err.get_or_insert(err);
                    }
                }
            })?;
            if let Some(e) = log_err {
                return Err(Error::io("<stdout>", e));
            }
            let o = &art.outcome;
            let first = o.log.first().map_or(f64::NAN, |e| e.total);
            let last = o.log.last().map_or(f64::NAN, |e| e.total);
            write_out(
                out,
                &format!(
                    "initial_loss={first}\nfinal_loss={last}\nbest_epoch={}\nfinal_checkpoint={}\nbest_checkpoint={}\n",
                    o.best_epoch,
                    art.final_checkpoint.display(),
                    art.best_checkpoint.display()
                ),
            )
        }
        Command::Eval(a) => {
            if let Some(w) = a.workers {
                cfg.metrics.workers = w;
            }
            if a.no_align {
                cfg.metrics.align_fscore = false;
            }
            if let Some(m) = a.mode {
                cfg.metrics.mode = m;
            }
            cfg.validate()?;
            let report = eval_command(&cfg, &a.checkpoint, a.data.as_deref())?;
            if let Some(p) = &a.json {
                std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
            }
            write_out(out, &report.to_text())
        }
        Command::Infer(a) => {
            let files = infer_command(&cfg, &a.checkpoint, &a.image, &a.out, a.resize)?;
            let mut text = String::new();
            for f in files {
                let _ = writeln!(text, "wrote {}", f.display());
            }
            write_out(out, &text)
        }
        Command::Bench(a) => {
            if let Some(i) = a.iters {
                cfg.bench.iters = i;
            }
            if let Some(w) = a.warmup {
                cfg.bench.warmup = w;
            }
            let report = bench_command(&cfg, a.checkpoint.as_deref())?;
            if let Some(p) = &a.json {
                std::fs::write(p, report.to_json()).map_err(|e| Error::io(p, e))?;
            }
            write_out(out, &bench_text(&report))
        }
        Command::MakeSynth(a) => {
            let reg = cfg.regressor()?;
            let sc = SynthConfig::new(cfg.model.backbone.input_size, reg);
            let manifest = make_synthetic(a.count, a.seed.unwrap_or(cfg.seed), &a.out, &sc)?;
            write_out(out, &format!("wrote {} samples to {}\n", a.count, manifest.display()))
        }
        Command::IngestFreihand(a) => {
            let paths = FreiHandPaths {
                xyz: a.xyz.clone(),
                verts: a.verts.clone(),
                k: a.k.clone(),
                image_dir: a.images.clone(),
            };
            let size = a.image_size.unwrap_or(cfg.model.backbone.input_size);
            if size == 0 {
                return Err(Error::Config("--image-size must be positive".into()));
            }
            let n = ingest_freihand(&paths, &a.out, size)?;
            write_out(out, &format!("ingested {n} samples into {}\n", a.out.join("manifest.txt").display()))
        }
        Command::ExportObj(a) => {
            export_command(&cfg, &a.manifest, a.id.as_deref(), a.checkpoint.as_deref(), &a.out)?;
            write_out(out, &format!("wrote {}\n", a.out.display()))
        }
    }
}

/// Loads a checkpoint and checks it against the model layout.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<NetworkParams> {
    let params = checkpoint::load(path)?;
    cfg.model.check_params(&params)?;
    Ok(params)
}

pub fn eval_command(cfg: &RunConfig, ckpt: &Path, manifest: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval_manifest.clone())
        .ok_or_else(|| Error::Config("no evaluation data: pass --data or set data.eval".into()))?;
    let net = cfg.network()?;
    let params = load_checkpoint(cfg, ckpt)?;
    let samples = load_all(&manifest)?;
    crate::train::check_samples(cfg, &samples)?;
    evaluate(&net, &params, &samples, &cfg.metrics)
}

fn rows_text(t: &Tensor) -> String {
    let cols = t.shape()[1];
    let mut s = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Writes `kp2d.txt` (normalized crop coordinates), `joints3d.txt`
/// (meters, root-relative) and `mesh.obj` into `out_dir`.
pub fn infer_command(cfg: &RunConfig, ckpt: &Path, image: &Path, out_dir: &Path, resize: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let net = cfg.network()?;
    let faces = cfg.faces()?;
    let params = load_checkpoint(cfg, ckpt)?;
    let (img, _) = load_image(image, cfg.model.backbone.input_size, resize)?;
    let pred = net.predict(&params, &img)?;
    write_prediction(&pred, faces.as_deref(), out_dir)
}

pub fn write_prediction(pred: &Prediction, faces: Option<&[[usize; 3]]>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let kp = out_dir.join("kp2d.txt");
    let j3 = out_dir.join("joints3d.txt");
    let mesh = out_dir.join("mesh.obj");
    std::fs::write(&kp, rows_text(&pred.kp2d)).map_err(|e| Error::io(&kp, e))?;
    std::fs::write(&j3, rows_text(&pred.joints3d)).map_err(|e| Error::io(&j3, e))?;
    export_obj(&points(&pred.vertices)?, faces, &mesh)?;
    Ok(vec![kp, j3, mesh])
}

/// Times single-image inference on a seeded random input and counts
/// parameters. Head parameters are everything outside the backbone.
pub fn bench_command(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    if cfg.bench.iters < MIN_BENCH_ITERS || cfg.bench.warmup < MIN_BENCH_WARMUP {
        return Err(Error::Config(format!(
            "bench needs at least {MIN_BENCH_ITERS} iterations after {MIN_BENCH_WARMUP} warmup, got {} after {}",
            cfg.bench.iters, cfg.bench.warmup
        )));
    }
    let net = cfg.network()?;
    let params = match ckpt {
        Some(p) => load_checkpoint(cfg, p)?,
        None => cfg.model.init_params(cfg.seed),
    };
    let s = cfg.model.backbone.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image = Tensor::new([3, s, s], (0..3 * s * s).map(|_| rng.gen()).collect())?;
    let latency = bench_fps(|| net.predict(&params, &image).map(drop), cfg.bench.iters, cfg.bench.warmup)?;
    Ok(MetricsReport {
        latency: Some(latency),
        params_total: Some(params.count()),
        params_heads: Some(params.count_excluding(&["backbone."])),
        ..Default::default()
    })
}

/// Bench report text with the reference head size alongside.
pub fn bench_text(report: &MetricsReport) -> String {
    format!("{}params_heads_reference={REFERENCE_HEAD_PARAMS}\n", report.to_text())
}

fn find_sample(manifest: &Path, id: Option<&str>) -> Result<HandSample> {
    for sample in load_manifest(manifest)? {
        let sample = sample?;
        if id.is_none_or(|id| id == sample.id) {
            return Ok(sample);
        }
    }
    Err(Error::Input(match id {
        Some(id) => format!("no sample `{id}` in {}", manifest.display()),
        None => format!("{} has no samples", manifest.display()),
    }))
}

pub fn export_command(cfg: &RunConfig, manifest: &Path, id: Option<&str>, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    cfg.validate()?;
    let faces = cfg.faces()?;
    let sample = find_sample(manifest, id)?;
    let vertices = match ckpt {
        Some(p) => {
            let net = cfg.network()?;
            let params = load_checkpoint(cfg, p)?;
            crate::train::check_samples(cfg, std::slice::from_ref(&sample))?;
            net.predict(&params, &sample.image)?.vertices
        }
        None => sample.vertices,
    };
    export_obj(&points(&vertices)?, faces.as_deref(), out)
}
