//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::infer::{segment_video, write_segmentation, InferenceConfig};
use crate::io::{
    frame_file_name, list_files, load_dataset, read_detections, read_heatmap, read_mask, save_dataset,
    write_mask,
};
use crate::metrics::{drift_csv, embedding_drift, evaluate, late_mean, VideoPrediction};
use crate::model::{load_checkpoint, save_checkpoint, Variant};
use crate::pruning::apply_pruning;
use crate::synthdata::{gen_benchmark, gen_video, pruning_scene, BenchmarkConfig};
use crate::train::{loss_csv, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "adnet", version, about = "Anchor-diffusion video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset split.
    Train(TrainArgs),
    /// Segment every video of a dataset.
    Infer(InferArgs),
    /// Remove small static instances from predicted masks.
    Prune(PruneArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Embedding drift of foreground pixels relative to the first frame.
    Drift(DriftArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    /// Train and test splits of moving shapes with look-alike distractors.
    Benchmark,
    /// A single video with one dominant mover and a small static distractor.
    Pruning,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// `key = value` overrides of the benchmark settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "benchmark")]
    preset: Preset,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.75,1.0,1.5")]
    scales: Vec<f64>,
    #[arg(long)]
    no_mirror: bool,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Predictions laid out as `<pred>/<video>/masks/%05d.pgm`.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset holding `<video>/detections.txt`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DriftArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Drift(a) => drift_cmd(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Applies `key = value` lines to a benchmark config.
pub fn parse_benchmark_config(text: &str) -> Result<BenchmarkConfig> {
    let mut cfg = BenchmarkConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = || Error::config(format!("invalid value {v:?} for {k}"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let real = || v.parse::<f64>().map_err(|_| bad());
        match k {
            "train_videos" => cfg.train_videos = int()?,
            "test_videos" => cfg.test_videos = int()?,
            "frames" => cfg.frames = int()?,
            "width" => cfg.width = int()?,
            "height" => cfg.height = int()?,
            "noise" => cfg.noise = real()?,
            "min_size" => cfg.min_size = int()?,
            "max_size" => cfg.max_size = int()?,
            "max_speed" => cfg.max_speed = real()?,
            "max_distractors" => cfg.max_distractors = int()?,
            _ => return Err(Error::config(format!("unknown config key {k:?}"))),
        }
    }
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    match a.preset {
        Preset::Benchmark => {
            let cfg = match &a.config {
                Some(p) => parse_benchmark_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => BenchmarkConfig::default(),
            };
            let b = gen_benchmark(&cfg, a.seed)?;
            save_dataset(&a.out.join("train"), &b.train)?;
            save_dataset(&a.out.join("test"), &b.test)?;
            info!("wrote {} train and {} test videos", b.train.len(), b.test.len());
        }
        Preset::Pruning => {
            let v = gen_video("pruning_scene", &pruning_scene(16), a.seed)?;
            save_dataset(&a.out, &[v])?;
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    cfg.validate()?;
    let data = load_dataset(&a.dataset)?;
    info!("training {} on {} videos for {} iterations", cfg.model.variant, data.len(), cfg.iterations);
    let out = train(&cfg, &data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_checkpoint(&out.model, &a.out.join("model.ckpt"))?;
    write_text(&a.out.join("loss.csv"), &loss_csv(&out.history))?;
    write_text(&a.out.join("train.cfg"), &cfg.to_text())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let cfg = InferenceConfig {
        scales: a.scales,
        mirror: !a.no_mirror,
        threshold: a.threshold,
        cache_anchor: true,
    };
    cfg.validate()?;
    let model = load_checkpoint(&a.checkpoint)?;
    for video in load_dataset(&a.dataset)? {
        let seg = segment_video(&model, &video, &cfg)?;
        write_segmentation(&a.out, &video.id, &seg)?;
        info!("segmented {} ({} frames)", video.id, video.len());
    }
    Ok(())
}

/// Loads `<root>/<video>/masks` and, when present, `heatmaps`.
pub fn load_predictions(root: &Path) -> Result<Vec<VideoPrediction>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("masks").is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::input(format!("no predictions under {}", root.display())));
    }
    dirs.iter()
        .map(|d| {
            let id = d.file_name().expect("listed entry").to_string_lossy().into_owned();
            let masks = list_files(&d.join("masks"), "pgm")?
                .iter()
                .map(|p| read_mask(p))
                .collect::<Result<Vec<_>>>()?;
            let hdir = d.join("heatmaps");
            let heatmaps = if hdir.is_dir() {
                list_files(&hdir, "pgm")?
                    .iter()
                    .map(|p| read_heatmap(p))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(VideoPrediction { id, masks, heatmaps })
        })
        .collect()
}

fn prune_cmd(a: PruneArgs) -> Result<()> {
    for p in load_predictions(&a.pred)? {
        let det_path = a.dataset.join(&p.id).join("detections.txt");
        let detections = if det_path.is_file() {
            read_detections(&det_path)?
        } else {
            Vec::new()
        };
        let refined = apply_pruning(&p.masks, &detections)?;
        for (t, m) in refined.iter().enumerate() {
            write_mask(&a.out.join(&p.id).join("masks").join(frame_file_name(t, "pgm")), m)?;
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let preds = load_predictions(&a.pred)?;
    let gts = load_dataset(&a.dataset)?;
    let report = evaluate(&preds, &gts)?;
    write_text(&a.out.join("frames.csv"), &report.frames_csv())?;
    let summary = report.summary();
    write_text(&a.out.join("summary.txt"), &summary)?;
    if let Some(pr) = &report.pr {
        write_text(&a.out.join("pr.csv"), &pr.to_csv())?;
    }
    print!("{summary}");
    Ok(())
}

fn drift_cmd(a: DriftArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut rows = Vec::new();
    for video in load_dataset(&a.dataset)? {
        let d = embedding_drift(&model, &video)?;
        if let Some(m) = late_mean(&d) {
            info!("{}: late drift {m:.4}", video.id);
        }
        rows.push((video.id, d));
    }
    write_text(&a.out.join("drift.csv"), &drift_csv(&rows))
}
