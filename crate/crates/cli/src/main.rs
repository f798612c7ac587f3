use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use veinpipe::bench::{self, BenchOptions};
use veinpipe::data::{self, DataError, Preprocess, Sample};
use veinpipe::format::write_atomic;
use veinpipe::imaging::{clahe, GrayImage, Mask};
use veinpipe::metrics::EvalAccumulator;
use veinpipe::model::{self, UNetConfig};
use veinpipe::postprocess::{self, FossaPrediction};
use veinpipe::quant::{self, QuantizedModel, Scheme};
use veinpipe::tensor::Tensor;
use veinpipe::{angle, imaging, train};

/// Errors that exit with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "veinpipe", version, about = "Forearm vein segmentation, fossa localization and quantized inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset root containing annotations.csv.
    #[arg(long)]
    data: PathBuf,
    /// Apply CLAHE to images at load time.
    #[arg(long)]
    clahe: bool,
    /// Resize images and masks to this square size at load time.
    #[arg(long)]
    resize: Option<usize>,
    /// Seed of the train/val/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// JSON file with optional "model" and "train" sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a weights file every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Compute the metric suite on a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Weights file of any scheme.
        #[arg(long, required_unless_present = "pred_masks")]
        weights: Option<PathBuf>,
        /// Directory of predicted masks named `{id}.png`, scored instead of a model.
        #[arg(long, conflicts_with = "weights")]
        pred_masks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Convert float32 weights to a compressed scheme.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scheme: String,
        /// Dataset root used for activation calibration.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Maximum number of calibration samples.
        #[arg(long, default_value_t = 64)]
        calib_limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency and accuracy of every scheme.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated scheme names, or "all".
        #[arg(long, default_value = "all")]
        schemes: String,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, env = "VEINPIPE_THREADS", default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the text table here.
        #[arg(long)]
        table_out: Option<PathBuf>,
    },
    /// Segment one image and draw the fossa region.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = postprocess::DEFAULT_ROI_FRAC_W)]
        roi_frac_w: f64,
        #[arg(long, default_value_t = postprocess::DEFAULT_ROI_FRAC_H)]
        roi_frac_h: f64,
        #[arg(long)]
        overlay_out: PathBuf,
        /// Sidecar JSON path; defaults to the overlay path with a .json extension.
        #[arg(long)]
        json_out: Option<PathBuf>,
        #[arg(long)]
        clahe: bool,
    },
    /// Estimate the arm angle of every mask PNG in a directory.
    LabelAngles {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        csv_out: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ConfigFile {
    model: Option<UNetConfig>,
    train: Option<train::TrainConfig>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', "; ");
            eprintln!("veinpipe: error: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(DataError::MissingRoot(..)) = cause.downcast_ref::<DataError>() {
            return 2;
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { count, size, seed, out } => synth(count, size, seed, &out),
        Command::Train {
            data,
            config,
            out_weights,
            log,
            epochs,
            batch,
            lr,
            seed,
            checkpoint_every,
        } => {
            let mut file = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<ConfigFile>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => ConfigFile::default(),
            };
            let mut tc = file.train.take().unwrap_or_default();
            if let Some(v) = epochs {
                tc.epochs = v;
            }
            if let Some(v) = batch {
                tc.batch_size = v;
            }
            if let Some(v) = lr {
                tc.learning_rate = v;
            }
            if let Some(v) = seed {
                tc.seed = v;
            }
            train_cmd(&data, file.model, &tc, &out_weights, log.as_deref(), checkpoint_every)
        }
        Command::Eval {
            data,
            weights,
            pred_masks,
            split,
            report,
            batch,
        } => eval_cmd(&data, weights.as_deref(), pred_masks.as_deref(), split, report.as_deref(), batch),
        Command::Quantize {
            weights,
            scheme,
            calib,
            calib_limit,
            out,
        } => quantize_cmd(&weights, &scheme, calib.as_deref(), calib_limit, &out),
        Command::Bench {
            data,
            weights,
            schemes,
            warmup,
            runs,
            threads,
            split,
            report,
            table_out,
        } => {
            let schemes = parse_schemes(&schemes)?;
            if runs == 0 {
                return usage("--runs must be at least 1");
            }
            if threads == 0 {
                return usage("--threads must be at least 1");
            }
            let opts = BenchOptions {
                schemes,
                warmup,
                runs,
                threads,
                ..BenchOptions::default()
            };
            bench_cmd(&data, &weights, split, &opts, report.as_deref(), table_out.as_deref())
        }
        Command::Infer {
            weights,
            image,
            roi_frac_w,
            roi_frac_h,
            overlay_out,
            json_out,
            clahe,
        } => {
            if !(roi_frac_w > 0.0 && roi_frac_h > 0.0) {
                return usage("ROI fractions must be positive");
            }
            let json_out = json_out.unwrap_or_else(|| overlay_out.with_extension("json"));
            infer_cmd(&weights, &image, roi_frac_w, roi_frac_h, &overlay_out, &json_out, clahe)
        }
        Command::LabelAngles { masks, csv_out } => label_angles(&masks, &csv_out),
    }
}

fn synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        return usage("--count must be at least 1");
    }
    let samples = match data::synth_generate(count, size, seed) {
        Ok(s) => s,
        Err(e) => return usage(e.to_string()),
    };
    data::save_dataset(&samples, out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn load(args: &DataArgs) -> Result<Vec<Sample>> {
    if !args.data.join(data::ANNOTATIONS).is_file() {
        return Err(DataError::MissingRoot(args.data.clone(), data::ANNOTATIONS).into());
    }
    let opts = Preprocess {
        clahe: args.clahe,
        resize: args.resize,
        ..Preprocess::default()
    };
    Ok(data::load_dataset_with(&args.data, &opts)?)
}

fn pick(samples: &[Sample], seed: u64, split: SplitArg) -> Result<Vec<Sample>> {
    let ids = match split {
        SplitArg::All => return Ok(samples.to_vec()),
        SplitArg::Train => data::split(samples, seed)?.train,
        SplitArg::Val => data::split(samples, seed)?.val,
        SplitArg::Test => data::split(samples, seed)?.test,
    };
    Ok(data::select(samples, &ids).into_iter().cloned().collect())
}

fn train_cmd(
    args: &DataArgs,
    model_cfg: Option<UNetConfig>,
    tc: &train::TrainConfig,
    out: &Path,
    log_path: Option<&Path>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    if tc.epochs == 0 || tc.batch_size == 0 {
        return usage("--epochs and --batch must be at least 1");
    }
    let samples = load(args)?;
    let manifest = data::split(&samples, args.split_seed)?;
    let train_set: Vec<Sample> = data::select(&samples, &manifest.train).into_iter().cloned().collect();
    let val_set: Vec<Sample> = data::select(&samples, &manifest.val).into_iter().cloned().collect();
    let cfg = model_cfg.unwrap_or(UNetConfig {
        input_size: samples[0].size(),
        ..UNetConfig::desk()
    });
    let init = model::build(&cfg, tc.seed)?;
    let every = checkpoint_every.filter(|&n| n > 0);
    let (weights, log) = train::train_with(&init, &train_set, &val_set, tc, |rec, w| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  bce {:.5}  mse {:.5}  val iou {}",
            rec.epoch,
            rec.loss,
            rec.bce,
            rec.mse,
            rec.val_iou.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some(n) = every {
            if rec.epoch % n == 0 {
                let path = checkpoint_path(out, rec.epoch);
                model::save_weights(w, &path)?;
            }
        }
        Ok(())
    })?;
    model::save_weights(&weights, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = log_path {
        write_json(p, &log)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("veinw");
    out.with_file_name(format!("{stem}.epoch{epoch}.{ext}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_any(path: &Path) -> Result<QuantizedModel> {
    QuantizedModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn eval_cmd(
    args: &DataArgs,
    weights: Option<&Path>,
    pred_masks: Option<&Path>,
    split: SplitArg,
    report_path: Option<&Path>,
    batch: usize,
) -> Result<()> {
    let samples = load(args)?;
    let set = pick(&samples, args.split_seed, split)?;
    let report = match (weights, pred_masks) {
        (_, Some(dir)) => {
            let mut acc = EvalAccumulator::new();
            for s in &set {
                let path = dir.join(format!("{}.png", s.id));
                let pred = Mask::load_png(&path).with_context(|| format!("reading {}", path.display()))?;
                let pred = if pred.width == s.vein_mask.width && pred.height == s.vein_mask.height {
                    pred
                } else if pred.width == pred.height {
                    imaging::geom::resize_mask(&pred, s.size())
                } else {
                    bail!("{} is {}×{}, expected {}×{}", path.display(), pred.width, pred.height, s.size(), s.size());
                };
                acc.add_mask(&pred.data, &s.vein_mask.data)?;
            }
            acc.finish()
        }
        (Some(w), None) => {
            let q = load_any(w)?;
            if let Some(s) = set.iter().find(|s| s.size() != q.config.input_size) {
                return usage(format!(
                    "sample {} is {}×{}, model expects {}; pass --resize",
                    s.id,
                    s.size(),
                    s.size(),
                    q.config.input_size
                ));
            }
            train::evaluate_with(&set, batch, |x| quant::quantized_forward(&q, x).map_err(anyhow::Error::from))?
        }
        (None, None) => return usage("eval needs --weights or --pred-masks"),
    };
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    println!(
        "samples {}  iou {:.4}  dice {:.4}  f1 {:.4}  pixel_accuracy {:.4}  psnr_db {:.2}  mse {:.5}  mae {:.5}",
        report.samples, report.iou, report.dice, report.f1, report.pixel_accuracy, report.psnr_db, report.mse, report.mae
    );
    Ok(())
}

fn parse_scheme(name: &str) -> Result<Scheme> {
    name.trim().parse::<Scheme>().map_err(|e| Usage(e.to_string()).into())
}

fn parse_schemes(list: &str) -> Result<Vec<Scheme>> {
    if list.trim() == "all" {
        return Ok(Scheme::ALL.to_vec());
    }
    let v: Vec<Scheme> = list.split(',').filter(|s| !s.trim().is_empty()).map(parse_scheme).collect::<Result<_>>()?;
    if v.is_empty() {
        return usage(format!("no schemes given; valid schemes: {}", Scheme::NAMES.join(", ")));
    }
    Ok(v)
}

fn calib_batches(samples: &[Sample], batch: usize) -> Vec<Tensor<f32>> {
    samples
        .chunks(batch)
        .map(|c| {
            let refs: Vec<&Sample> = c.iter().collect();
            train::batch_tensors(&refs).0.cast()
        })
        .collect()
}

fn quantize_cmd(weights: &Path, scheme: &str, calib: Option<&Path>, limit: usize, out: &Path) -> Result<()> {
    let scheme = parse_scheme(scheme)?;
    if scheme.needs_calibration() && calib.is_none() {
        return usage(format!("{}; pass --calib <dataset dir>", quant::QuantError::MissingCalibration));
    }
    let w = model::load_weights(weights).with_context(|| format!("loading {}", weights.display()))?;
    let table = match calib {
        Some(dir) if scheme.needs_calibration() => {
            let args = DataArgs {
                data: dir.to_path_buf(),
                clahe: false,
                resize: Some(w.config.input_size),
                split_seed: 0,
            };
            let samples = load(&args)?;
            let used = &samples[..samples.len().min(limit.max(1))];
            Some(quant::calibrate(&w, &calib_batches(used, 8))?)
        }
        _ => None,
    };
    let q = quant::apply_scheme(&w, scheme, table.as_ref())?;
    q.save(out).with_context(|| format!("writing {}", out.display()))?;
    let before = std::fs::metadata(weights)?.len();
    let after = std::fs::metadata(out)?.len();
    println!(
        "{scheme}: {before} → {after} bytes ({:.1}%)",
        100.0 * after as f64 / before.max(1) as f64
    );
    Ok(())
}

fn bench_cmd(
    args: &DataArgs,
    weights: &Path,
    split: SplitArg,
    opts: &BenchOptions,
    report_path: Option<&Path>,
    table_out: Option<&Path>,
) -> Result<()> {
    let w = model::load_weights(weights).with_context(|| format!("loading {}", weights.display()))?;
    let samples = load(args)?;
    let eval_set = pick(&samples, args.split_seed, split)?;
    let calib = pick(&samples, args.split_seed, SplitArg::Train)?;
    if eval_set.is_empty() {
        return usage("evaluation split is empty");
    }
    let report = bench::run_bench(&w, &eval_set, &calib, opts)?;
    let table = bench::render_table(&report);
    print!("{table}");
    if let Some(p) = report_path {
        write_json(p, &report)?;
    }
    if let Some(p) = table_out {
        write_atomic(p, table.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferSidecar {
    cx: f64,
    cy: f64,
    angle: f64,
    roi_frac_w: f64,
    roi_frac_h: f64,
    vein_pixels: usize,
    roi_vein_pixels: usize,
    width: usize,
    height: usize,
}

fn infer_cmd(
    weights: &Path,
    image: &Path,
    frac_w: f64,
    frac_h: f64,
    overlay_out: &Path,
    json_out: &Path,
    use_clahe: bool,
) -> Result<()> {
    let q = load_any(weights)?;
    let img = GrayImage::load_png(image).with_context(|| format!("reading {}", image.display()))?;
    let (w, h) = (img.width, img.height);
    let work = if use_clahe {
        clahe::clahe(&img, clahe::DEFAULT_CLIP_LIMIT, clahe::DEFAULT_TILES)?
    } else {
        img.clone()
    };
    let s = q.config.input_size;
    let small = imaging::geom::resize(&work, s);
    let x = Tensor::new(vec![1, 1, s, s], small.to_input().iter().map(|&v| v as f32).collect())?;
    let (logits, fossa) = quant::quantized_forward(&q, &x)?;
    let mask_small = Mask::new(s, s, logits.data().iter().map(|&v| u8::from(v > 0.0)).collect())?;
    let mask = Mask::from_fn(w, h, |px, py| mask_small.get(px * s / w, py * s / h));

    let f = fossa.data();
    let raw = postprocess::decode_fossa([f[0] as f64, f[1] as f64, f[2] as f64], s);
    let (kx, ky) = (w as f64 / s as f64, h as f64 / s as f64);
    let (sin, cos) = raw.angle.to_radians().sin_cos();
    let angle = angle::normalize_deg((sin * ky).atan2(cos * kx).to_degrees());
    let pred = FossaPrediction {
        cx: raw.cx * kx,
        cy: raw.cy * ky,
        angle,
        roi_width: 0.0,
        roi_height: 0.0,
    }
    .with_roi_fraction(w.min(h), frac_w, frac_h);
    let filtered = postprocess::roi_filter(&mask, &pred);
    let overlay = postprocess::render_overlay(&img, &filtered, &pred);
    overlay.save_png(overlay_out).with_context(|| format!("writing {}", overlay_out.display()))?;
    let side = InferSidecar {
        cx: pred.cx,
        cy: pred.cy,
        angle: pred.angle,
        roi_frac_w: frac_w,
        roi_frac_h: frac_h,
        vein_pixels: mask.area(),
        roi_vein_pixels: filtered.area(),
        width: w,
        height: h,
    };
    write_json(json_out, &side)?;
    println!("cx {:.1}  cy {:.1}  angle {:.1}", side.cx, side.cy, side.angle);
    Ok(())
}

fn label_angles(dir: &Path, csv_out: &Path) -> Result<()> {
    if !dir.is_dir() {
        return usage(format!("mask directory {} not found", dir.display()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["file", "angle_deg", "status", "message"])?;
    let mut failed = 0;
    for p in &files {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let result = Mask::load_png(p)
            .map_err(|e| e.to_string())
            .and_then(|m| angle::arm_angle(&m).map_err(|e| e.to_string()));
        match result {
            Ok(a) => wr.write_record([name, format!("{:.2}", data::round_angle(a)), "ok".into(), String::new()])?,
            Err(msg) => {
                failed += 1;
                log::warn!("{name}: {msg}");
                wr.write_record([name, String::new(), "error".into(), msg])?;
            }
        }
    }
    let bytes = wr.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    write_atomic(csv_out, &bytes).with_context(|| format!("writing {}", csv_out.display()))?;
    println!("labeled {} masks, {failed} flagged", files.len());
    Ok(())
}
