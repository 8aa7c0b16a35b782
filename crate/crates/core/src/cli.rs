//! The `medflowseg` command line: `synth`, `train`, `sample` and `eval`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, read_image, read_label_png, write_indexed_png, write_overlay_png,
    DatasetManifest, LabelMap, MaskEncoding, ShapeKind, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses_training::{
    parse_dtype, CheckpointKind, CheckpointManifest, MetricsLog, TrainConfig, Trainer,
};
use crate::metrics::{evaluate, CaseReport, EvalReport};
use crate::networks::ModelConfig;
use crate::sampling::{sample_ensemble, EnsembleResult, OracleField, SamplerConfig};

pub const SEED_ENV: &str = "MEDFLOWSEG_SEED";
pub const LOCK_FILE: &str = ".medflowseg.lock";
pub const RUN_CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "medflowseg", version, about = "Flow-matching segmentation: synthesize data, train, sample, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Sample ensembles from a checkpoint and fuse them.
    Sample(SampleArgs),
    /// Score predicted masks against references.
    Eval(EvalArgs),
    /// Draw the loss curves of a run as a PNG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Comma-separated subset of disk, ring, rectangle.
    #[arg(long, value_delimiter = ',')]
    pub shapes: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint directory (a run directory also works).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with `images/`, or a directory of PNG images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected resolution; must match the checkpoint.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Expected class count; must match the checkpoint.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Also write every run's mask.
    #[arg(long)]
    pub per_run: bool,
    /// Also write image/mask overlays.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction directory (its `masks/` subdirectory is used when present).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference directory (its `masks/` subdirectory is used when present).
    #[arg(long)]
    pub gt: PathBuf,
    /// Where to write `report.json` and `report.csv`; defaults to `--pred`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Defaults to `<run_dir>/loss_curve.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 360)]
    pub height: u32,
}

/// Every tunable of a run; serialized into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub resolution: usize,
    pub dtype: String,
    pub data: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            resolution: 256,
            dtype: "f32".into(),
            data: None,
            run_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Flag, then config, then `MEDFLOWSEG_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Exclusive ownership of a directory for the life of the guard.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("{} is locked by another process ({})", dir.display(), path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn parse_shape(s: &str) -> Result<ShapeKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "disk" => Ok(ShapeKind::Disk),
        "ring" => Ok(ShapeKind::Ring),
        "rectangle" | "rect" => Ok(ShapeKind::Rectangle),
        other => Err(Error::Config(format!("unknown shape {other}"))),
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        count: a.count,
        resolution: a.resolution,
        num_classes: a.classes,
        noise: a.noise,
        seed: resolve_seed(a.seed, None)?,
        ..SyntheticSpec::default()
    };
    if let Some(s) = a.shapes {
        spec.shapes = s.iter().map(|x| parse_shape(x)).collect::<Result<_>>()?;
    }
    spec.validate()?;
    generate_synthetic(&spec, &a.out)?;
    println!("{}", a.out.join(crate::data::MANIFEST_FILE).display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    // a resumed run without --config picks up the configuration it was started with
    let saved = a.run_dir.as_ref().map(|d| d.join(RUN_CONFIG_FILE)).filter(|p| a.resume && p.exists());
    let mut cfg = match a.config.clone().or(saved) {
        Some(p) => RunConfig::read(&p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = &a.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.train.max_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    cfg.sampler.seed = seed;
    cfg.model.resolution = cfg.resolution;
    Ok(cfg)
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_train_config(&a)?;
    let data_dir = cfg.data.clone().ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
    let run_dir = cfg.run_dir.clone().ok_or_else(|| Error::Config("no run directory given (--run-dir)".into()))?;
    let _lock = DirLock::acquire(&run_dir)?;
    let dev = Device::Cpu;
    let data = load_dataset(&data_dir, cfg.resolution, &dev)?;
    let b = &mut cfg.model.backbone;
    b.num_classes = data.num_classes();
    b.flow_channels = data.num_classes();
    b.image_channels = data.manifest.image_channels;
    let ckpt = run_dir.join(CHECKPOINT_DIR);
    let mut trainer = if a.resume {
        let t = Trainer::resume(&ckpt, &cfg.train, &dev)?;
        if t.model_config() != &cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        t
    } else {
        if ckpt.join(crate::losses_training::CHECKPOINT_MANIFEST).exists() {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; pass --resume or choose another run directory",
                run_dir.display()
            )));
        }
        Trainer::new(&cfg.model, &cfg.train, parse_dtype(&cfg.dtype)?, &dev)?
    };
    fs::write(run_dir.join(RUN_CONFIG_FILE), cfg.to_toml()?).map_err(|e| Error::io(&run_dir, e))?;
    data.manifest.write_as(&run_dir.join("data_manifest.json"))?;
    let mut log = MetricsLog::open(&run_dir.join(METRICS_FILE), trainer.step_count())?;
    let every = cfg.train.checkpoint_every.max(1);
    while trainer.step_count() < cfg.train.max_steps {
        let m = trainer.step_on(&data)?;
        log.append(&m)?;
        if !a.quiet && (m.step % 50 == 0 || m.step == 1) {
            println!(
                "step {} total {:.5} vel {:.5} dice {:.5} ce {:.5}",
                m.step, m.total_loss, m.vel_loss, m.dice_loss, m.ce_loss
            );
        }
        if m.step % every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

/// Image files of a sampling input: `dir/images/*.png` or `dir/*.png`.
fn image_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("images");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn mask_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("masks");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let sub = path.join(CHECKPOINT_DIR);
    if sub.join(crate::losses_training::CHECKPOINT_MANIFEST).exists() {
        sub
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct StapleCase<'a> {
    id: &'a str,
    classes: &'a [crate::sampling::ClassStaple],
}

pub fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ckpt = checkpoint_dir(&a.checkpoint);
    let man = CheckpointManifest::read(&ckpt)?;
    let resolution = man.model.resolution;
    let classes = man.encoding.num_classes;
    if let Some(r) = a.resolution.filter(|&r| r != resolution) {
        return Err(Error::Config(format!("checkpoint resolution is {resolution}, requested {r}")));
    }
    if let Some(k) = a.classes.filter(|&k| k != classes) {
        return Err(Error::Config(format!("checkpoint has {classes} classes, requested {k}")));
    }
    if a.images.join(crate::data::MANIFEST_FILE).exists() {
        let dm = DatasetManifest::read(&a.images)?;
        if dm.num_classes != classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, checkpoint {classes}",
                dm.num_classes
            )));
        }
    }
    let cfg = SamplerConfig {
        steps: a.steps,
        runs: a.runs,
        seed: resolve_seed(a.seed, None)?,
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    if a.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let dev = Device::Cpu;
    let img_dir = image_dir(&a.images);
    let ids = png_ids(&img_dir)?;
    if ids.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", img_dir.display())));
    }
    let _lock = DirLock::acquire(&a.out)?;
    let out_masks = a.out.join("masks");
    fs::create_dir_all(&out_masks).map_err(|e| Error::io(&out_masks, e))?;
    let enc = MaskEncoding::new(classes)?;
    let dtype = parse_dtype(&man.dtype)?;
    let model = match man.kind {
        CheckpointKind::Model => Some(man.load_ema_model(&ckpt, &dev)?),
        CheckpointKind::Oracle => None,
    };
    let mut staple_log = Vec::new();
    for (chunk_no, chunk) in ids.chunks(a.batch_size).enumerate() {
        let images = chunk
            .iter()
            .map(|id| read_image(&img_dir.join(format!("{id}.png")), resolution, man.model.backbone.image_channels, &dev))
            .collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&images, 0)?.to_dtype(dtype)?;
        let keys: Vec<u64> = (0..chunk.len()).map(|i| (chunk_no * a.batch_size + i) as u64).collect();
        let results: Vec<EnsembleResult> = match &model {
            Some(m) => sample_ensemble(m, &batch, &keys, &enc, &cfg)?,
            None => {
                let md = mask_dir(&a.images);
                let refs = chunk
                    .iter()
                    .map(|id| {
                        let l = read_label_png(&md.join(format!("{id}.png")))?;
                        crate::data::resize_labels(&l, resolution)
                    })
                    .collect::<Result<Vec<LabelMap>>>()?;
                let targets = enc.encode_batch(&refs.iter().collect::<Vec<_>>(), &dev)?.to_dtype(dtype)?;
                sample_ensemble(&OracleField { targets }, &batch, &keys, &enc, &cfg)?
            }
        };
        for ((id, res), img) in chunk.iter().zip(&results).zip(&images) {
            write_indexed_png(&out_masks.join(format!("{id}.png")), &res.fused)?;
            if a.per_run {
                let d = a.out.join("runs").join(id);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                for (r, m) in res.runs.iter().enumerate() {
                    write_indexed_png(&d.join(format!("run_{r:02}.png")), m)?;
                }
            }
            if a.overlay {
                let d = a.out.join("overlays");
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                write_overlay_png(&d.join(format!("{id}.png")), img, &res.fused, 0.45)?;
            }
        }
        staple_log.extend(chunk.iter().cloned().zip(results));
    }
    let cases: Vec<StapleCase> = staple_log
        .iter()
        .map(|(id, r)| StapleCase {
            id,
            classes: &r.classes,
        })
        .collect();
    let p = a.out.join("staple.json");
    fs::write(&p, serde_json::to_string_pretty(&cases)? + "\n").map_err(|e| Error::io(&p, e))?;
    println!("{}", out_masks.display());
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred_dir = mask_dir(&a.pred);
    let gt_dir = mask_dir(&a.gt);
    let gt_ids = png_ids(&gt_dir)?;
    let pred_ids = png_ids(&pred_dir)?;
    let missing: Vec<&String> = gt_ids.iter().filter(|id| !pred_ids.contains(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing predictions for: {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut pairs = Vec::with_capacity(gt_ids.len());
    for id in &gt_ids {
        let g = read_label_png(&gt_dir.join(format!("{id}.png")))?;
        let p = read_label_png(&pred_dir.join(format!("{id}.png")))?;
        if p.dims() != g.dims() {
            return Err(Error::Data(format!("case {id}: prediction {:?} vs reference {:?}", p.dims(), g.dims())));
        }
        pairs.push((id.clone(), p, g));
    }
    let declared = a.gt.join(crate::data::MANIFEST_FILE);
    let classes = match a.classes {
        Some(k) => k,
        None if declared.exists() => DatasetManifest::read(&a.gt)?.num_classes,
        None => pairs
            .iter()
            .map(|(_, p, g)| p.max_label().max(g.max_label()) as usize + 1)
            .max()
            .unwrap_or(2)
            .max(2),
    };
    let cases = pairs
        .iter()
        .map(|(id, p, g)| {
            Ok(CaseReport {
                id: id.clone(),
                report: evaluate(p, g, classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(cases);
    let out = a.out.unwrap_or(a.pred.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))?;
    let ag = &report.aggregate;
    println!(
        "cases {} dice {:.4} iou {:.4} hd95 {}",
        ag.cases,
        ag.mean_dice,
        ag.mean_iou,
        ag.mean_hd95.map_or("undefined".into(), |h| format!("{h:.3}"))
    );
    Ok(())
}

/// Writes an oracle checkpoint: sampling from it follows the reference masks.
pub fn write_oracle_checkpoint(dir: &Path, num_classes: usize, resolution: usize) -> Result<()> {
    let mut model = ModelConfig {
        resolution,
        ..ModelConfig::default()
    };
    model.backbone.num_classes = num_classes;
    model.backbone.flow_channels = num_classes;
    CheckpointManifest {
        kind: CheckpointKind::Oracle,
        model,
        encoding: MaskEncoding::new(num_classes)?,
        train: TrainConfig::default(),
        ema_decay: 0.0,
        step: 0,
        dtype: crate::losses_training::dtype_name(DType::F32).into(),
    }
    .write(dir)
}

/// Log-scale curves of the total (black), velocity (blue) and auxiliary
/// Dice + CE (orange) losses over steps.
pub fn cmd_plot(a: PlotArgs) -> Result<()> {
    let rows = MetricsLog::read(&a.run_dir.join(METRICS_FILE))?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no logged steps", a.run_dir.display())));
    }
    if a.width < 32 || a.height < 32 {
        return Err(Error::Config("plot needs at least 32x32 pixels".into()));
    }
    let series: [(Vec<f64>, [u8; 3]); 3] = [
        (rows.iter().map(|r| r.total_loss).collect(), [0, 0, 0]),
        (rows.iter().map(|r| r.vel_loss).collect(), [31, 119, 180]),
        (rows.iter().map(|r| r.dice_loss + r.ce_loss).collect(), [255, 127, 14]),
    ];
    let logs: Vec<f64> = series
        .iter()
        .flat_map(|(v, _)| v.iter().filter(|x| **x > 0.0).map(|x| x.log10()))
        .collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0) };
    let margin = 8i64;
    let (w, h) = (a.width as i64, a.height as i64);
    let mut img = image::RgbImage::from_pixel(a.width, a.height, image::Rgb([255, 255, 255]));
    let first = rows[0].step as f64;
    let span = (rows[rows.len() - 1].step as f64 - first).max(1.0);
    let to_px = |i: usize, v: f64| -> Option<(i64, i64)> {
        (v > 0.0).then(|| {
            let x = margin + ((rows[i].step as f64 - first) / span * (w - 2 * margin - 1) as f64).round() as i64;
            let y = h - 1 - margin - ((v.log10() - lo) / (hi - lo) * (h - 2 * margin - 1) as f64).round() as i64;
            (x, y)
        })
    };
    for (values, color) in &series {
        let mut prev = None;
        for (i, &v) in values.iter().enumerate() {
            let cur = to_px(i, v);
            if let (Some(p), Some(q)) = (prev, cur) {
                draw_line(&mut img, p, q, *color);
            } else if let Some(q) = cur {
                draw_line(&mut img, q, q, *color);
            }
            prev = cur;
        }
    }
    let out = a.out.unwrap_or_else(|| a.run_dir.join("loss_curve.png"));
    img.save(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    println!("{}", out.display());
    Ok(())
}

fn draw_line(img: &mut image::RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = RunConfig::from_toml(
            "resolution = 64\n[model.backbone]\nwidths = [8, 16, 32]\ntime_dim = 32\n\
             [model.fa]\npatch = 2\ndim = 32\n[train]\nlr = 1e-3\nbatch_size = 4\n\
             max_steps = 1000\nema_decay = 0.995\n[sampler.staple]\ntol = 1e-8\n",
        )
        .unwrap();
        assert_eq!(cfg.model.backbone.widths, vec![8, 16, 32]);
        assert_eq!(cfg.model.fa.depth, 4);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.sampler.steps, 50);
        assert_eq!(cfg.sampler.staple.max_iters, 100);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn malformed_toml_is_a_config_error() {
        let err = RunConfig::from_toml("resolution = \"big\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn flag_beats_config_seed() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap(), 4);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }
}
