//! `cuts` command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::encoder::{checkpoint, EncoderParams};
use crate::imgio::{self, BinaryMask, Image, LabelMap};
use crate::metrics::{self, MetricsReport};
use crate::objective::{self, ObjectiveError};
use crate::pipeline::{self, parse_selectors, Selector};
use crate::segment::binarize_with_hint;
use crate::synth::{self, SynthKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "jpg", "jpeg"];

#[derive(Debug, Parser)]
#[command(name = "cuts", version, about = "Unsupervised multi-granularity image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Binary,
    Multiclass,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on every image in a directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the history goes next to it as `<out>.history.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment an image (or every image in a directory) at several granularities.
    Segment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// e.g. `persistent,k10,count:5,index:3`
        #[arg(long)]
        selectors: Option<String>,
        /// Label map whose non-zero pixels hint the foreground (a directory
        /// is searched for `<stem>.lbl`).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predicted label maps against ground truth.
    Eval {
        /// Predicted `.lbl` file or directory.
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth `.lbl` file or directory (matched by stem up to the first dot).
        #[arg(long)]
        gt: PathBuf,
        /// JSON-lines report path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "multiclass")]
        mode: EvalMode,
    },
    /// Train one model per weighting coefficient and score each on held-out data.
    SweepLambda {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated list.
        #[arg(long, default_value = "0,0.001,0.01,0.03,0.1,0.5,0.9,1")]
        lambdas: String,
        /// CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory of images with `<stem>.lbl` ground truth; synthetic two-region
        /// images are generated when absent.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write synthetic images and their label maps.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "two-region")]
        kind: String,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(m: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: m.to_string() }
    }

    fn data(m: impl ToString) -> Self {
        Self { code: EXIT_DATA, message: m.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        use crate::encoder::EncoderError;
        let code = match &e {
            ObjectiveError::NonFiniteLoss { .. } => EXIT_NUMERIC,
            ObjectiveError::Encoder(inner) if matches!(**inner, EncoderError::NonFiniteLoss) => EXIT_NUMERIC,
            ObjectiveError::LambdaOutOfRange(_) | ObjectiveError::InvalidConfig(_) => EXIT_CONFIG,
            ObjectiveError::Encoder(inner) if matches!(**inner, EncoderError::InvalidArch(_)) => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parse `args` (program name first) and run; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("CUTS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train { config, data, out, seed } => cmd_train(&load_config(config.as_deref(), seed)?, &data, &out),
        Command::Segment { config, model, data, out, selectors, gt, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let selectors = match selectors {
                Some(s) => parse_selectors(&s).map_err(CliError::config)?,
                None => cfg.selectors()?,
            };
            cmd_segment(&cfg, &model, &data, &out, &selectors, gt.as_deref())
        }
        Command::Eval { data, gt, out, mode } => cmd_eval(&data, &gt, &out, mode),
        Command::SweepLambda { config, data, lambdas, out, heldout, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let lambdas = parse_lambdas(&lambdas)?;
            cmd_sweep_lambda(&cfg, &data, &lambdas, &out, heldout.as_deref())
        }
        Command::Synth { out, n, seed, kind } => {
            let kind: SynthKind = kind.parse().map_err(CliError::config)?;
            synth::write_corpus(&out, kind, n, seed).map_err(CliError::data)?;
            println!("wrote {n} {kind} images to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_lambdas(list: &str) -> CliResult<Vec<f64>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|_| CliError::config(format!("bad lambda {s:?}")))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(CliError::config(format!("lambda {v} outside [0, 1]")))
            }
        })
        .collect()
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && keep(p)).collect();
    files.sort();
    Ok(files)
}

fn load_input(path: &Path, cfg: &RunConfig) -> CliResult<Image> {
    let img = imgio::load_image(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    match cfg.io.resize {
        Some([h, w]) => imgio::resize_bilinear(&img, h, w).map_err(CliError::data),
        None => Ok(img),
    }
}

/// Images of a file or directory, in name order.
fn load_images(path: &Path, cfg: &RunConfig) -> CliResult<Vec<(PathBuf, Image)>> {
    let files = if path.is_dir() {
        sorted_files(path, is_image)?
    } else if path.exists() {
        vec![path.to_path_buf()]
    } else {
        return Err(CliError::data(format!("{} does not exist", path.display())));
    };
    if files.is_empty() {
        return Err(CliError::data(format!("no images in {}", path.display())));
    }
    files.into_iter().map(|p| load_input(&p, cfg).map(|img| (p, img))).collect()
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

/// `path` with `suffix` appended to the full file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult {
    let images: Vec<Image> = load_images(data, cfg)?.into_iter().map(|(_, img)| img).collect();
    let history_path = sibling(out, ".history.jsonl");
    let tcfg = cfg.train_config();
    let mut history = String::new();
    let outcome = objective::train_with_progress(&images, &cfg.arch, &tcfg, |epoch, loss| {
        let line = json!({
            "epoch": epoch,
            "lc": loss.contrastive,
            "lr": loss.reconstruction,
            "combined": loss.combined,
        });
        eprintln!("epoch {epoch}: {line}");
        history.push_str(&line.to_string());
        history.push('\n');
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    checkpoint::save(&outcome.params, out).map_err(CliError::data)?;
    write_text(&history_path, &history)?;
    match outcome.history.last() {
        Some(l) => println!(
            "final loss: contrastive {:.6} reconstruction {:.6} combined {:.6}",
            l.contrastive, l.reconstruction, l.combined
        ),
        None => println!("no epochs run; wrote initial parameters"),
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<EncoderParams> {
    checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn gt_for(gt: &Path, image: &Path) -> PathBuf {
    if gt.is_dir() {
        gt.join(format!("{}.lbl", stem(image)))
    } else {
        gt.to_path_buf()
    }
}

fn foreground(lm: &LabelMap) -> BinaryMask {
    BinaryMask::new(lm.height(), lm.width(), lm.labels().iter().map(|&l| l != 0).collect()).expect("same shape")
}

/// `<base>.lbl` plus a rendered `<base>.png` in `dir`.
fn write_label_outputs(dir: &Path, base: &str, lm: &LabelMap) -> CliResult {
    imgio::write_label_map(lm, dir.join(format!("{base}.lbl"))).map_err(CliError::data)?;
    imgio::save_png(&imgio::render_label_map(lm), dir.join(format!("{base}.png"))).map_err(CliError::data)
}

pub fn cmd_segment(
    cfg: &RunConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    selectors: &[Selector],
    gt: Option<&Path>,
) -> CliResult {
    let params = load_model(model)?;
    let images = load_images(data, cfg)?;
    fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let condense = cfg.condense_config();
    let results: Vec<CliResult> = images
        .par_iter()
        .map(|(path, img)| {
            let name = stem(path);
            let seg = pipeline::segment_image(&params, img, selectors, &condense, cfg.seed).map_err(CliError::data)?;
            let hint = match gt {
                Some(g) => {
                    let p = gt_for(g, path);
                    let lm = imgio::read_label_map(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
                    Some(foreground(&lm))
                }
                None => None,
            };
            if let Some(trace) = &seg.trace {
                if !seg.converged {
                    eprintln!("warning: {name}: condensation stopped after {} iterations", trace.iterations);
                }
                let mut doc = trace.summary_json();
                doc["assignments"] = json!(trace.snapshots.iter().map(|s| &s.assignment).collect::<Vec<_>>());
                write_text(&out.join(format!("{name}.trace.json")), &doc.to_string())?;
            }
            for (sel, map) in &seg.maps {
                let tag = sel.to_string().replace(':', "-");
                let lm = match map {
                    Ok(lm) => lm,
                    Err(e) => {
                        eprintln!("warning: {name}: selector {sel}: {e}");
                        continue;
                    }
                };
                write_label_outputs(out, &format!("{name}.{tag}"), lm)?;
                if let Some(h) = &hint {
                    let mask = binarize_with_hint(lm, h).map_err(CliError::data)?;
                    write_label_outputs(out, &format!("{name}.{tag}.mask"), &mask.to_label_map())?;
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<CliResult<Vec<()>>>()?;
    println!("segmented {} image(s) into {}", images.len(), out.display());
    Ok(())
}

/// Binary metric set on the non-zero pixels of both maps.
pub fn binary_report(pred: &LabelMap, gt: &LabelMap) -> Result<MetricsReport, metrics::MetricsError> {
    let (p, g) = (foreground(pred), foreground(gt));
    let hausdorff = if p.count() + g.count() == 0 { 0.0 } else { metrics::hausdorff_or_diagonal(&p, &g)? };
    let (pl, gl) = (p.to_label_map(), g.to_label_map());
    Ok(MetricsReport {
        dice: metrics::dice(&p, &g)?,
        hausdorff,
        ssim: metrics::ssim_image(&pl, &gl)?,
        ergas: metrics::ergas(&pl, &gl)?,
        rmse: metrics::rmse(&pl, &gl)?,
        per_class: None,
    })
}

const FIELDS: [&str; 5] = ["dice", "hausdorff", "ssim", "ergas", "rmse"];

fn fields(r: &MetricsReport) -> [f64; 5] {
    [r.dice, r.hausdorff, r.ssim, r.ergas, r.rmse]
}

/// Per-field mean and population standard deviation.
pub fn summarize(reports: &[MetricsReport]) -> serde_json::Value {
    let n = reports.len() as f64;
    let mut mean = serde_json::Map::new();
    let mut std = serde_json::Map::new();
    for (i, name) in FIELDS.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| fields(r)[i]).collect();
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.insert((*name).into(), json!(m));
        std.insert((*name).into(), json!(v.sqrt()));
    }
    json!({ "mean": mean, "std": std })
}

pub fn cmd_eval(pred: &Path, gt: &Path, out: &Path, mode: EvalMode) -> CliResult {
    let is_lbl = |p: &Path| p.extension().is_some_and(|e| e == "lbl");
    let preds = if pred.is_dir() { sorted_files(pred, is_lbl)? } else { vec![pred.to_path_buf()] };
    if preds.is_empty() {
        return Err(CliError::data(format!("no label maps in {}", pred.display())));
    }
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for p in &preds {
        let g = gt_for(gt, p);
        let scored = (|| -> Result<MetricsReport, String> {
            let pm = imgio::read_label_map(p).map_err(|e| e.to_string())?;
            let gm = imgio::read_label_map(&g).map_err(|e| e.to_string())?;
            match mode {
                EvalMode::Binary => binary_report(&pm, &gm),
                EvalMode::Multiclass => metrics::multiclass_summary(&pm, &gm),
            }
            .map_err(|e| e.to_string())
        })();
        let mut rec = json!({ "pred": p.display().to_string(), "gt": g.display().to_string() });
        match scored {
            Ok(r) => {
                let obj = rec.as_object_mut().expect("object");
                if let serde_json::Value::Object(fields) = serde_json::to_value(&r).expect("serializable") {
                    obj.extend(fields);
                }
                reports.push(r);
            }
            Err(e) => rec["error"] = json!(e),
        }
        lines.push(rec.to_string());
    }
    let mut summary = json!({ "summary": { "pairs": preds.len(), "failed": preds.len() - reports.len() } });
    if !reports.is_empty() {
        if let serde_json::Value::Object(m) = summarize(&reports) {
            summary["summary"].as_object_mut().expect("object").extend(m);
        }
    }
    lines.push(summary.to_string());
    write_text(out, &(lines.join("\n") + "\n"))?;
    println!("{summary}");
    if reports.is_empty() {
        return Err(CliError::data("every pair failed"));
    }
    Ok(())
}

/// Held-out images and their label maps for sweeps.
fn heldout_set(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<Vec<(Image, LabelMap)>> {
    match dir {
        None => Ok(synth::corpus(SynthKind::TwoRegion, cfg.io.heldout_images, cfg.seed ^ 0xA5A5_5A5A)),
        Some(d) => load_images(d, cfg)?
            .into_iter()
            .map(|(p, img)| {
                let g = gt_for(d, &p);
                let lm = imgio::read_label_map(&g).map_err(|e| CliError::data(format!("{}: {e}", g.display())))?;
                Ok((img, lm))
            })
            .collect(),
    }
}

/// Mean binary metrics of k-means maps binarized with the gt hint.
pub fn score_kmeans(params: &EncoderParams, set: &[(Image, LabelMap)], k: usize, seed: u64) -> CliResult<MetricsReport> {
    let reports: Vec<CliResult<MetricsReport>> = set
        .par_iter()
        .map(|(img, gt)| {
            let seg = pipeline::segment_image(params, img, &[Selector::KMeans(k)], &Default::default(), seed)
                .map_err(CliError::data)?;
            let lm = seg.maps[0].1.as_ref().map_err(CliError::data)?;
            let mask = binarize_with_hint(lm, &foreground(gt)).map_err(CliError::data)?;
            binary_report(&mask.to_label_map(), gt).map_err(CliError::data)
        })
        .collect();
    let reports = reports.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mean = summarize(&reports)["mean"].clone();
    let get = |k: &str| mean[k].as_f64().unwrap_or(f64::NAN);
    Ok(MetricsReport {
        dice: get("dice"),
        hausdorff: get("hausdorff"),
        ssim: get("ssim"),
        ergas: get("ergas"),
        rmse: get("rmse"),
        per_class: None,
    })
}

pub fn cmd_sweep_lambda(cfg: &RunConfig, data: &Path, lambdas: &[f64], out: &Path, heldout: Option<&Path>) -> CliResult {
    let images: Vec<Image> = load_images(data, cfg)?.into_iter().map(|(_, img)| img).collect();
    let held = heldout_set(cfg, heldout)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    let file = fs::File::create(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let mut csv = BufWriter::new(file);
    let io_err = |e: std::io::Error| CliError::data(format!("{}: {e}", out.display()));
    writeln!(csv, "lambda,dice,hausdorff,ssim,ergas,rmse").map_err(io_err)?;
    csv.flush().map_err(io_err)?;
    for &lambda in lambdas {
        let mut tcfg = cfg.train_config();
        tcfg.lambda = lambda;
        let outcome = objective::train(&images, &cfg.arch, &tcfg)?;
        let r = score_kmeans(&outcome.params, &held, cfg.io.kmeans_k, cfg.seed)?;
        eprintln!("lambda {lambda}: dice {:.4}", r.dice);
        writeln!(csv, "{lambda},{},{},{},{},{}", r.dice, r.hausdorff, r.ssim, r.ergas, r.rmse).map_err(io_err)?;
        csv.flush().map_err(io_err)?;
    }
    Ok(())
}
