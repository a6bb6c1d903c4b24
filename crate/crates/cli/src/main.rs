//! `crossdepth`: synthetic data, training, evaluation, ablation grids and
//! augmentation previews.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 artifact or
//! content error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use crossdepth::augmentation::{augment_pipeline, cutflip_range, sample_rng, AugmentConfig};
use crossdepth::data::{load_split, synthesize_dataset, write_pfm, write_ppm, Split, SynthOptions};
use crossdepth::metrics::{Aggregation, MetricReport};
use crossdepth::models::{load_checkpoint, InferenceModel};
use crossdepth::trainer::{ablation_csv, evaluate_samples, fit, run_ablation, Ablation, FitOptions, TrainConfig};
use crossdepth::Error;
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "crossdepth", version, about = "Dual-branch depth training with cross-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/depth dataset.
    SynthData(SynthArgs),
    /// Train both branches.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the transformer branch only.
    Eval(EvalArgs),
    /// Train several component combinations and tabulate validation metrics.
    Ablate(AblateArgs),
    /// Write before/after pairs of the training augmentation.
    AugmentPreview(PreviewArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "96x128", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a `last.safetensors` checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    /// Metric JSON; the per-image CSV goes next to it unless `--csv` is given.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Weight images by valid pixel count instead of averaging per image.
    #[arg(long)]
    pixel_weighted: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated rows; each is a table id (1-7), `none`, or flags
    /// joined by `+` from cd, up, cu, cf. Example: `1,2,7` or `none,cd+up`.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; every row is trained once per seed.
    /// Defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    cutflip_prob: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn artifact(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::EmptyDataset(_) | Error::Io { .. } => 2,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::artifact(e.to_string())
    }
}

type CmdResult = Result<Vec<PathBuf>, Failure>;

/// Prints the fully resolved settings of a command as one JSON document.
fn echo<T: Serialize>(command: &str, resolved: &T) -> Result<(), Failure> {
    let doc = json!({ "command": command, "resolved": resolved });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::usage(format!("data directory {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_synth_data(args: &SynthArgs) -> CmdResult {
    let (height, width) = args.size;
    let opts = SynthOptions {
        train: args.train,
        val: args.val,
        test: args.test,
        height,
        width,
        seed: args.seed,
        ..SynthOptions::default()
    };
    echo(
        "synth-data",
        &json!({
            "out": args.out,
            "train": opts.train,
            "val": opts.val,
            "test": opts.test,
            "size": [height, width],
            "seed": opts.seed,
            "scene": {
                "num_primitives": opts.scene.num_primitives,
                "invalid_fraction": opts.scene.invalid_fraction,
                "depth_range": opts.scene.depth_range,
            },
        }),
    )?;
    opts.scene.validate()?;
    let manifest = synthesize_dataset(&args.out, &opts)?;
    let mut written = vec![args.out.join(crossdepth::data::MANIFEST_FILE)];
    for entry in manifest.entries(&args.out) {
        written.push(entry.image_path);
        written.push(entry.depth_path);
    }
    Ok(written)
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    echo(
        "train",
        &json!({
            "config": cfg,
            "data": args.data,
            "out": args.out,
            "resume": args.resume,
            "stop_after": args.stop_after,
        }),
    )?;
    require_dir(&args.data)?;
    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::usage(format!("{}: {e}", args.out.display())))?;
    let resolved = args.out.join("config.json");
    write_file(&resolved, &cfg.to_json_pretty()?)?;
    let opts = FitOptions {
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
        stop_after: args.stop_after,
    };
    let report = fit(&train, &val, &cfg, &opts)?;
    if let Some(best) = report.best_val_abs_rel {
        log::info!("best val abs_rel {best:.4} after {} steps", report.steps);
    }
    let mut written = vec![resolved, report.log_path, report.last_checkpoint];
    written.extend(report.best_checkpoint);
    Ok(written)
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let mode = if args.pixel_weighted {
        Aggregation::PixelWeighted
    } else {
        Aggregation::ImageAveraged
    };
    let csv_path = args.csv.clone().unwrap_or_else(|| args.report.with_extension("csv"));
    echo(
        "eval",
        &json!({
            "checkpoint": args.checkpoint,
            "data": args.data,
            "split": args.split.as_str(),
            "report": args.report,
            "csv": csv_path,
            "aggregation": mode,
        }),
    )?;
    require_dir(&args.data)?;
    if !args.checkpoint.is_file() {
        return Err(Failure::usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let samples = load_split(&args.data, args.split)?;
    let ckpt = load_checkpoint(&args.checkpoint).map_err(|e| Failure::artifact(e.to_string()))?;
    let model = InferenceModel::from_loaded(&ckpt, &Device::Cpu).map_err(|e| Failure::artifact(e.to_string()))?;
    let eval = evaluate_samples(&model, &samples, mode)?;

    let mut report = serde_json::Map::new();
    for (name, value) in MetricReport::NAMES.iter().zip(eval.summary.values()) {
        report.insert(name.to_string(), json!(value));
    }
    write_file(&args.report, &serde_json::to_string_pretty(&report)?)?;

    let mut csv = format!("id,pixel_count,{}\n", MetricReport::NAMES.join(","));
    for (id, r) in &eval.per_image {
        let values: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{id},{},{}\n", r.pixel_count, values.join(",")));
    }
    write_file(&csv_path, &csv)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(vec![args.report.clone(), csv_path])
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, Failure> {
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|e| Failure::usage(format!("seed {s:?}: {e}"))))
        .collect()
}

fn cmd_ablate(args: &AblateArgs) -> CmdResult {
    let base = load_config(args.config.as_deref())?;
    let rows = args
        .grid
        .split(',')
        .map(Ablation::parse)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(format!("--grid: {e}")))?;
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![base.seed],
    };
    echo(
        "ablate",
        &json!({
            "config": base,
            "data": args.data,
            "out": args.out,
            "rows": rows.iter().map(|a| json!({"id": a.id(), "flags": a.to_string(), "ablation": a})).collect::<Vec<_>>(),
            "seeds": seeds,
        }),
    )?;
    require_dir(&args.data)?;
    let train = load_split(&args.data, Split::Train)?;
    let val = load_split(&args.data, Split::Val)?;
    let mut results = Vec::new();
    for seed in &seeds {
        let cfg = TrainConfig { seed: *seed, ..base.clone() };
        let out = args.out.join(format!("seed{seed}"));
        results.extend(run_ablation(&train, &val, &cfg, &rows, &out)?);
    }
    let csv_path = args.out.join("ablation.csv");
    let csv = ablation_csv(&results);
    write_file(&csv_path, &csv)?;
    print!("{csv}");
    Ok(vec![csv_path])
}

fn cmd_augment_preview(args: &PreviewArgs) -> CmdResult {
    let cfg = AugmentConfig {
        cutflip_prob: args.cutflip_prob,
        seed: args.seed,
        ..AugmentConfig::default()
    };
    echo(
        "augment-preview",
        &json!({
            "data": args.data,
            "out": args.out,
            "n": args.n,
            "split": args.split.as_str(),
            "augment": cfg,
        }),
    )?;
    cfg.validate()?;
    require_dir(&args.data)?;
    let samples = load_split(&args.data, args.split)?;
    if args.n > samples.len() {
        return Err(Failure::usage(format!(
            "--n {} exceeds the {} samples of split {}",
            args.n,
            samples.len(),
            args.split
        )));
    }
    fs::create_dir_all(&args.out).map_err(|e| Failure::usage(format!("{}: {e}", args.out.display())))?;
    let mut written = Vec::new();
    let mut sidecar = Vec::new();
    for sample in &samples[..args.n] {
        let mut rng = sample_rng(args.seed, 0, &sample.id);
        let (after, record) = augment_pipeline(sample, &cfg, &mut rng)?;
        for (tag, src) in [("before", sample), ("after", &after)] {
            let ppm = args.out.join(format!("{}_{tag}.ppm", sample.id));
            let pfm = args.out.join(format!("{}_{tag}.pfm", sample.id));
            write_ppm(&ppm, &src.image)?;
            write_pfm(&pfm, &src.gt_depth)?;
            written.extend([ppm, pfm]);
        }
        sidecar.push(json!({
            "id": sample.id,
            "height": sample.height(),
            "cut_range": cutflip_range(after.height()),
            "record": record,
        }));
    }
    let sidecar_path = args.out.join("preview.json");
    write_file(&sidecar_path, &serde_json::to_string_pretty(&sidecar)?)?;
    written.push(sidecar_path);
    Ok(written)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AugmentPreview(a) => cmd_augment_preview(a),
    };
    match result {
        Ok(written) => {
            log::info!("wrote {} artifact(s)", written.len());
            for p in &written {
                log::debug!("  {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
