use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::ema::{EmaState, DEFAULT_EMA_DECAY};
use super::losses::{ce_loss, dice_loss, scalar, total_loss, LossWeights};
use super::optim::AdamW;
use crate::data::{Dataset, MaskEncoding};
use crate::error::{Error, Result};
use crate::flow_core::{
    interpolate, sample_time, standard_normal, stream_rng, target_velocity, velocity_loss, Endpoints,
};
use crate::networks::{MedFlowSeg, ModelConfig};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weights: LossWeights,
    /// Steps between checkpoints written by the CLI loop.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            max_steps: 3000,
            seed: 0,
            weight_decay: 0.01,
            ema_decay: DEFAULT_EMA_DECAY,
            grad_clip: Some(1.0),
            weights: LossWeights::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0) || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "lr must be > 0 and batch_size >= 1, got {} and {}",
                self.lr, self.batch_size
            )));
        }
        self.weights.validate()
    }
}

/// Scalar losses of one step, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub vel_loss: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// Loss tensors of one forward pass.
pub struct LossTerms {
    pub vel: Tensor,
    pub dice: Tensor,
    pub ce: Tensor,
    pub total: Tensor,
}

/// Full objective for fixed noise `x0` and times `t`.
pub fn compute_losses(
    model: &MedFlowSeg,
    images: &Tensor,
    labels: &Tensor,
    enc: &MaskEncoding,
    x0: &Tensor,
    t: &[f64],
    weights: &LossWeights,
) -> Result<LossTerms> {
    let maps = (0..labels.dim(0)?)
        .map(|i| {
            let l = labels.get(i)?;
            let (h, w) = l.dims2()?;
            crate::data::LabelMap::new(h, w, l.to_dtype(DType::U8)?.flatten_all()?.to_vec1()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let x1 = enc
        .encode_batch(&maps.iter().collect::<Vec<_>>(), images.device())?
        .to_dtype(x0.dtype())?;
    let ends = Endpoints::new(x0.clone(), x1)?;
    let state = interpolate(&ends, t)?;
    let cond = model.condition_forward(images)?;
    let t_emb = model.time_embed(t, x0)?;
    let pred = model.flow_forward(&state, &t_emb, &cond)?;
    let vel = velocity_loss(&pred, &target_velocity(&ends)?)?;
    let dice = dice_loss(&cond.aux_logits, labels)?;
    let ce = ce_loss(&cond.aux_logits, labels)?;
    let total = total_loss(&vel, &dice, &ce, weights)?;
    Ok(LossTerms { vel, dice, ce, total })
}

/// Live model, EMA shadow and optimizer state.
pub struct Trainer {
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    enc: MaskEncoding,
    live: ParamStore,
    model: MedFlowSeg,
    ema: EmaState,
    opt: AdamW,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, dtype: DType, dev: &Device) -> Result<Self> {
        cfg.validate()?;
        let enc = MaskEncoding::new(model_cfg.backbone.num_classes)?;
        if model_cfg.backbone.flow_channels != enc.channels() {
            return Err(Error::Config(format!(
                "flow_channels {} must equal the mask encoding width {}",
                model_cfg.backbone.flow_channels,
                enc.channels()
            )));
        }
        let live = ParamStore::new(cfg.seed, dtype, dev);
        let model = MedFlowSeg::new(model_cfg, &live.root())?;
        let ema = EmaState::new(&live, cfg.ema_decay)?;
        let opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.grad_clip)?;
        Ok(Self {
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            enc,
            live,
            model,
            ema,
            opt,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &MedFlowSeg {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.live
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn encoding(&self) -> &MaskEncoding {
        &self.enc
    }

    /// Network bound to the EMA weights.
    pub fn ema_model(&self) -> Result<MedFlowSeg> {
        MedFlowSeg::new(&self.model_cfg, &self.ema.shadow().root())
    }

    /// Draws a batch, noise and times from the step's own stream and trains on them.
    pub fn step_on(&mut self, data: &Dataset) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut rng = stream_rng(self.cfg.seed, self.step, 0);
        let b = self.cfg.batch_size.min(data.len());
        let idx = index::sample(&mut rng, data.len(), b).into_vec();
        let (images, labels) = data.batch(&idx)?;
        let images = images.to_dtype(self.live.dtype())?;
        self.train_step(&images, &labels, &mut rng)
    }

    /// One optimizer update followed by an EMA update.
    pub fn train_step<R: rand::Rng>(&mut self, images: &Tensor, labels: &Tensor, rng: &mut R) -> Result<StepMetrics> {
        let (b, _, h, w) = images.dims4()?;
        let t = sample_time(b, rng)?;
        let x0 = standard_normal((b, self.enc.channels(), h, w), rng, self.live.dtype(), images.device())?;
        let terms = compute_losses(&self.model, images, labels, &self.enc, &x0, &t, &self.cfg.weights)?;
        let next = self.step + 1;
        let m = StepMetrics {
            step: next,
            vel_loss: scalar(&terms.vel)?,
            dice_loss: scalar(&terms.dice)?,
            ce_loss: scalar(&terms.ce)?,
            total_loss: scalar(&terms.total)?,
            lr: self.cfg.lr,
        };
        if ![m.vel_loss, m.dice_loss, m.ce_loss, m.total_loss].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: next as usize,
                msg: format!(
                    "non-finite loss: vel={} dice={} ce={} total={}",
                    m.vel_loss, m.dice_loss, m.ce_loss, m.total_loss
                ),
            });
        }
        let grads = terms.total.backward()?;
        self.opt.step(&self.live, &grads)?;
        self.ema.update(&self.live)?;
        self.step = next;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.live.save(&dir.join(LIVE_FILE))?;
        self.ema.shadow().save(&dir.join(EMA_FILE))?;
        self.opt.save(&dir.join(OPTIM_FILE))?;
        CheckpointManifest {
            kind: CheckpointKind::Model,
            model: self.model_cfg.clone(),
            encoding: self.enc,
            train: self.cfg.clone(),
            ema_decay: self.ema.decay(),
            step: self.step,
            dtype: dtype_name(self.live.dtype()).into(),
        }
        .write(dir)
    }

    /// Restores live, EMA and optimizer state. `cfg` may differ from the saved
    /// configuration in everything except the model.
    pub fn resume(dir: &Path, cfg: &TrainConfig, dev: &Device) -> Result<Self> {
        let man = CheckpointManifest::read(dir)?;
        if man.kind != CheckpointKind::Model {
            return Err(Error::Config("cannot resume training from an oracle checkpoint".into()));
        }
        let mut t = Self::new(&man.model, cfg, parse_dtype(&man.dtype)?, dev)?;
        t.live.load(&dir.join(LIVE_FILE))?;
        t.ema = EmaState::from_shadow(t.live.deep_clone()?, cfg.ema_decay, man.step)?;
        t.ema.shadow().load(&dir.join(EMA_FILE))?;
        t.opt.load(&dir.join(OPTIM_FILE), man.step, dev)?;
        t.step = man.step;
        Ok(t)
    }
}

pub const LIVE_FILE: &str = "live.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const OPTIM_FILE: &str = "optimizer.safetensors";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    /// No weights; sampling uses the reference masks as the target.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub encoding: MaskEncoding,
    pub train: TrainConfig,
    pub ema_decay: f64,
    pub step: u64,
    pub dtype: String,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CHECKPOINT_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }

    /// EMA-weight network stored in a model checkpoint.
    pub fn load_ema_model(&self, dir: &Path, dev: &Device) -> Result<MedFlowSeg> {
        if self.kind != CheckpointKind::Model {
            return Err(Error::Config("oracle checkpoints carry no weights".into()));
        }
        let store = ParamStore::new(0, parse_dtype(&self.dtype)?, dev);
        let model = MedFlowSeg::new(&self.model, &store.root())?;
        store.load(&dir.join(EMA_FILE))?;
        Ok(model)
    }
}

pub fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Config(format!("unsupported dtype {other}"))),
    }
}

/// Append-only CSV of [`StepMetrics`].
pub struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    pub const HEADER: &'static str = "step,vel_loss,dice_loss,ce_loss,total_loss,lr";

    /// Opens `path` for appending. Rows after `keep_through` (from an
    /// interrupted run that was not checkpointed) are dropped.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let mut kept = vec![Self::HEADER.to_string()];
        if path.exists() {
            let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
            for row in r.deserialize::<StepMetrics>() {
                let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                if row.step <= keep_through {
                    kept.push(Self::format(&row));
                }
            }
        }
        fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn format(m: &StepMetrics) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            m.step, m.vel_loss, m.dice_loss, m.ce_loss, m.total_loss, m.lr
        )
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", Self::format(m)).map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepMetrics>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
            .collect()
    }
}
