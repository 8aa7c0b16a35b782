//! The two-stream backbone.
//!
//! The condition UNet sees only the image and yields its full-resolution
//! decoder feature, its bottleneck feature and auxiliary logits. The flow UNet
//! sees `x_t` and the time embedding; its first encoder feature is gated by
//! DB-SA from the condition decoder feature and its bottleneck receives the
//! FA-attention refinement of the condition bottleneck.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::dbsa::DbSa;
use crate::error::{contract, Error, Result};
use crate::fa_attention::{FaAttention, FaConfig};
use crate::flow_core::{FlowState, Velocity};
use crate::params::{conv2d, group_norm, linear, Params};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_channels: usize,
    /// Channel count per encoder stage; its length is the stage count `S`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Channels of the flow state (the mask encoding width).
    pub flow_channels: usize,
    pub time_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            widths: vec![32, 64, 128],
            num_classes: 3,
            flow_channels: 3,
            time_dim: 128,
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be non-empty and positive, got {:?}",
                self.widths
            )));
        }
        if self.image_channels == 0 || self.num_classes < 2 || self.flow_channels == 0 {
            return Err(Error::Config(
                "image channels, flow channels must be >= 1 and classes >= 2".into(),
            ));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    /// Spatial size of the bottleneck for an input of `size`.
    pub fn bottleneck_size(&self, size: (usize, usize)) -> Result<(usize, usize)> {
        let f = 1usize << self.stages();
        if !size.0.is_multiple_of(f) || !size.1.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} = {f}",
                size.0,
                size.1,
                self.stages()
            )));
        }
        Ok((size.0 / f, size.1 / f))
    }
}

/// Full model configuration including the ablation switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fa: FaConfig,
    pub use_dbsa: bool,
    pub use_fa: bool,
    /// Input resolution the bottleneck attention is built for.
    pub resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fa: FaConfig {
                patch: 2,
                ..FaConfig::default()
            },
            use_dbsa: true,
            use_fa: true,
            resolution: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding(pub Tensor);

/// `[sin(1000 t w_i), cos(1000 t w_i)]` with `w_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_features(
    t: &[f64],
    dim: usize,
    dtype: candle_core::DType,
    dev: &candle_core::Device,
) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let arg = |i: usize| 1000.0 * tv * (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.extend((0..half).map(|i| arg(i).sin()));
        out.extend((0..half).map(|i| arg(i).cos()));
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), dev)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer SiLU perceptron.
#[derive(Debug, Clone)]
pub struct TimeEmbedder {
    l1: Linear,
    l2: Linear,
    dim: usize,
}

impl TimeEmbedder {
    pub fn new(dim: usize, p: &Params) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
        }
        Ok(Self {
            l1: linear(dim, dim, &p.pp("l1"))?,
            l2: linear(dim, dim, &p.pp("l2"))?,
            dim,
        })
    }

    pub fn forward(&self, t: &[f64], p_dtype: candle_core::DType, dev: &candle_core::Device) -> Result<TimeEmbedding> {
        let s = sinusoidal_features(t, self.dim, p_dtype, dev)?;
        Ok(TimeEmbedding(self.l2.forward(&self.l1.forward(&s)?.silu()?)?))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, t_dim: Option<usize>, p: &Params) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(in_c, &p.pp("norm1"))?,
            conv1: conv2d(in_c, out_c, 3, 1, &p.pp("conv1"))?,
            time: t_dim.map(|d| linear(d, out_c, &p.pp("time"))).transpose()?,
            norm2: group_norm(out_c, &p.pp("norm2"))?,
            conv2: conv2d(out_c, out_c, 3, 1, &p.pp("conv2"))?,
            skip: if in_c != out_c {
                Some(conv2d(in_c, out_c, 1, 1, &p.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.time, t_emb) {
            let (b, c, _, _) = h.dims4()?;
            let bias = proj.forward(&t.silu()?)?.reshape((b, c, 1, 1))?;
            h = h.broadcast_add(&bias)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Encoder stages, bottleneck and decoder shared by both streams.
#[derive(Debug, Clone)]
struct UNetBody {
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    mid2: ResBlock,
    up: Vec<Conv2d>,
    dec: Vec<ResBlock>,
}

impl UNetBody {
    fn new(widths: &[usize], t_dim: Option<usize>, p: &Params) -> Result<Self> {
        let s = widths.len();
        let mut enc = Vec::with_capacity(s);
        let mut down = Vec::with_capacity(s);
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            enc.push(ResBlock::new(prev, w, t_dim, &p.pp("enc").pp(i))?);
            down.push(conv2d(w, w, 3, 2, &p.pp("down").pp(i))?);
            prev = w;
        }
        let wb = widths[s - 1];
        let mid = ResBlock::new(wb, wb, t_dim, &p.pp("mid"))?;
        let mid2 = ResBlock::new(wb, wb, t_dim, &p.pp("mid2"))?;
        let mut up = Vec::with_capacity(s);
        let mut dec = Vec::with_capacity(s);
        let mut prev = wb;
        for i in (0..s).rev() {
            up.push(conv2d(prev, prev, 3, 1, &p.pp("up").pp(i))?);
            dec.push(ResBlock::new(prev + widths[i], widths[i], t_dim, &p.pp("dec").pp(i))?);
            prev = widths[i];
        }
        Ok(Self {
            enc,
            down,
            mid,
            mid2,
            up,
            dec,
        })
    }
}

/// Outputs of the condition stream.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `[B, widths[0], H, W]`
    pub final_decoder_feature: Tensor,
    /// `[B, widths[S-1], H / 2^S, W / 2^S]`
    pub bottleneck_feature: Tensor,
    /// `[B, K_cls, H, W]`
    pub aux_logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConditionNet {
    stem: Conv2d,
    body: UNetBody,
    aux_head: Conv2d,
    cfg: BackboneConfig,
}

impl ConditionNet {
    pub fn new(cfg: &BackboneConfig, p: &Params) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.widths[0];
        Ok(Self {
            stem: conv2d(cfg.image_channels, w0, 3, 1, &p.pp("stem"))?,
            body: UNetBody::new(&cfg.widths, None, p)?,
            aux_head: conv2d(w0, cfg.num_classes, 1, 1, &p.pp("aux_head"))?,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ConditionBundle> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.cfg.image_channels {
            return Err(contract(format!(
                "condition network expects {} image channels, got {c}",
                self.cfg.image_channels
            )));
        }
        self.cfg.bottleneck_size((h, w))?;
        let body = &self.body;
        let mut x = self.stem.forward(image)?;
        let mut skips = Vec::with_capacity(body.enc.len());
        for (blk, down) in body.enc.iter().zip(&body.down) {
            x = blk.forward(&x, None)?;
            skips.push(x.clone());
            x = down.forward(&x)?;
        }
        let bottleneck = body.mid.forward(&x, None)?;
        let mut x = body.mid2.forward(&bottleneck, None)?;
        for (k, (up, blk)) in body.up.iter().zip(&body.dec).enumerate() {
            let skip = &skips[skips.len() - 1 - k];
            x = upsample(&up.forward(&x)?)?;
            x = blk.forward(&Tensor::cat(&[&x, skip], 1)?, None)?;
        }
        let aux_logits = self.aux_head.forward(&x)?;
        Ok(ConditionBundle {
            final_decoder_feature: x,
            bottleneck_feature: bottleneck,
            aux_logits,
        })
    }
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

#[derive(Debug, Clone)]
pub struct FlowNet {
    stem: Conv2d,
    body: UNetBody,
    dbsa: Option<DbSa>,
    fa: Option<FaAttention>,
    out_norm: GroupNorm,
    out: Conv2d,
    cfg: BackboneConfig,
}

impl FlowNet {
    pub fn new(cfg: &ModelConfig, p: &Params) -> Result<Self> {
        let b = &cfg.backbone;
        b.validate()?;
        let w0 = b.widths[0];
        let wb = *b.widths.last().unwrap();
        let bottleneck = b.bottleneck_size((cfg.resolution, cfg.resolution))?;
        let dbsa = if cfg.use_dbsa {
            // the condition decoder ends at widths[0] at full resolution, the
            // same resolution as the first flow encoder stage
            Some(DbSa::new(w0, w0, &p.pp("dbsa"))?)
        } else {
            None
        };
        let fa = if cfg.use_fa {
            Some(FaAttention::new(wb, b.time_dim, bottleneck, &cfg.fa, &p.pp("fa"))?)
        } else {
            None
        };
        Ok(Self {
            stem: conv2d(b.flow_channels, w0, 3, 1, &p.pp("stem"))?,
            body: UNetBody::new(&b.widths, Some(b.time_dim), p)?,
            dbsa,
            fa,
            out_norm: group_norm(w0, &p.pp("out_norm"))?,
            out: conv2d(w0, b.flow_channels, 3, 1, &p.pp("out"))?,
            cfg: b.clone(),
        })
    }

    pub fn forward(&self, x_t: &Tensor, t_emb: &TimeEmbedding, cond: &ConditionBundle) -> Result<Tensor> {
        let (_, k, h, w) = x_t.dims4()?;
        if k != self.cfg.flow_channels {
            return Err(contract(format!(
                "flow network expects {} channels, got {k}",
                self.cfg.flow_channels
            )));
        }
        let (_, _, hc, wc) = cond.final_decoder_feature.dims4()?;
        if (h, w) != (hc, wc) {
            return Err(contract(format!(
                "flow state {h}x{w} does not match condition feature {hc}x{wc}"
            )));
        }
        let t = Some(&t_emb.0);
        let body = &self.body;
        let mut x = self.stem.forward(x_t)?;
        let mut skips = Vec::with_capacity(body.enc.len());
        for (i, (blk, down)) in body.enc.iter().zip(&body.down).enumerate() {
            x = blk.forward(&x, t)?;
            if i == 0 {
                if let Some(d) = &self.dbsa {
                    x = d.forward(&x, &cond.final_decoder_feature)?;
                }
            }
            skips.push(x.clone());
            x = down.forward(&x)?;
        }
        let mut x = body.mid.forward(&x, t)?;
        if let Some(fa) = &self.fa {
            if x.dims() != cond.bottleneck_feature.dims() {
                return Err(contract(format!(
                    "flow bottleneck {:?} does not match condition bottleneck {:?}",
                    x.dims(),
                    cond.bottleneck_feature.dims()
                )));
            }
            let refined = fa.forward(&x, &cond.bottleneck_feature, &t_emb.0)?;
            x = (x + refined)?;
        }
        let mut x = body.mid2.forward(&x, t)?;
        for (k, (up, blk)) in body.up.iter().zip(&body.dec).enumerate() {
            let skip = &skips[skips.len() - 1 - k];
            x = upsample(&up.forward(&x)?)?;
            x = blk.forward(&Tensor::cat(&[&x, skip], 1)?, t)?;
        }
        Ok(self.out.forward(&self.out_norm.forward(&x)?.silu()?)?)
    }
}

/// Condition stream, flow stream and time embedder under one parameter tree.
#[derive(Debug, Clone)]
pub struct MedFlowSeg {
    time: TimeEmbedder,
    cond: ConditionNet,
    flow: FlowNet,
    cfg: ModelConfig,
}

/// Parameter path prefixes of the ablatable blocks.
pub mod prefixes {
    pub const CONDITION: &str = "cond.";
    pub const FLOW: &str = "flow.";
    pub const AUX_HEAD: &str = "cond.aux_head.";
    pub const DBSA: &str = "flow.dbsa.";
    pub const FA: &str = "flow.fa.";
}

impl MedFlowSeg {
    pub fn new(cfg: &ModelConfig, p: &Params) -> Result<Self> {
        let b = &cfg.backbone;
        b.validate()?;
        Ok(Self {
            time: TimeEmbedder::new(b.time_dim, &p.pp("time"))?,
            cond: ConditionNet::new(b, &p.pp("cond"))?,
            flow: FlowNet::new(cfg, &p.pp("flow"))?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn condition_forward(&self, image: &Tensor) -> Result<ConditionBundle> {
        self.cond.forward(image)
    }

    pub fn time_embed(&self, t: &[f64], like: &Tensor) -> Result<TimeEmbedding> {
        self.time.forward(t, like.dtype(), like.device())
    }

    pub fn flow_forward(
        &self,
        state: &FlowState,
        t_emb: &TimeEmbedding,
        cond: &ConditionBundle,
    ) -> Result<Velocity> {
        Ok(Velocity(self.flow.forward(&state.x_t, t_emb, cond)?))
    }

    /// Velocity at `(x_t, t)` given a cached condition bundle.
    pub fn velocity(&self, x_t: &Tensor, t: &[f64], cond: &ConditionBundle) -> Result<Velocity> {
        let t_emb = self.time_embed(t, x_t)?;
        let state = FlowState {
            x_t: x_t.clone(),
            t: t.to_vec(),
        };
        self.flow_forward(&state, &t_emb, cond)
    }
}

/// Parameter paths that exist only because the neural modulator is enabled.
pub fn modulator_prefixes(cfg: &ModelConfig) -> Vec<String> {
    (0..cfg.fa.depth)
        .flat_map(|i| {
            [
                format!("{}blocks.{i}.modulator.", prefixes::FA),
                format!("{}blocks.{i}.spatial.", prefixes::FA),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                image_channels: 1,
                widths: vec![4, 8],
                num_classes: 3,
                flow_channels: 3,
                time_dim: 8,
            },
            fa: FaConfig {
                patch: 2,
                depth: 1,
                modulator_depth: 1,
                heads: 2,
                dim: 8,
                use_modulator: true,
            },
            use_dbsa: true,
            use_fa: true,
            resolution: 16,
        }
    }

    #[test]
    fn sinusoidal_at_zero() {
        let s = sinusoidal_features(&[0.0], 6, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(s.to_vec2::<f64>().unwrap()[0], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(sinusoidal_features(&[0.0], 5, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.bottleneck_size((64, 64)).unwrap(), (8, 8));
        assert!(c.bottleneck_size((60, 64)).is_err());
        c.widths.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn flow_rejects_mismatched_streams() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let cfg = small_cfg();
        let m = MedFlowSeg::new(&cfg, &s.root()).unwrap();
        let img = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let cond = m.condition_forward(&img).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.velocity(&x, &[0.5], &cond), Err(Error::Contract(_))));
        let x = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.velocity(&x, &[0.5], &cond), Err(Error::Contract(_))));
        let bad = Tensor::zeros((1, 1, 14, 14), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.condition_forward(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn condition_shape_contract_and_determinism() {
        let s = ParamStore::new(1, DType::F32, &Device::Cpu);
        let b = BackboneConfig {
            widths: vec![16, 32, 64],
            ..BackboneConfig::default()
        };
        let net = ConditionNet::new(&b, &s.root().pp("cond")).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let img = crate::flow_core::standard_normal((2, 1, 64, 64), &mut rng, DType::F32, &Device::Cpu).unwrap();
        let a = net.forward(&img).unwrap();
        assert_eq!(a.final_decoder_feature.dims(), &[2, 16, 64, 64]);
        assert_eq!(a.bottleneck_feature.dims(), &[2, 64, 8, 8]);
        assert_eq!(a.aux_logits.dims(), &[2, 3, 64, 64]);
        let b2 = net.forward(&img).unwrap();
        let d = (a.aux_logits - b2.aux_logits).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn velocity_shape_and_time_dependence() {
        let s = ParamStore::new(2, DType::F32, &Device::Cpu);
        let cfg = small_cfg();
        let m = MedFlowSeg::new(&cfg, &s.root()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let img = crate::flow_core::standard_normal((2, 1, 16, 16), &mut rng, DType::F32, &Device::Cpu).unwrap();
        let x = crate::flow_core::standard_normal((2, 3, 16, 16), &mut rng, DType::F32, &Device::Cpu).unwrap();
        let cond = m.condition_forward(&img).unwrap();
        let u1 = m.velocity(&x, &[0.2, 0.2], &cond).unwrap().0;
        let u2 = m.velocity(&x, &[0.7, 0.7], &cond).unwrap().0;
        assert_eq!(u1.dims(), x.dims());
        let d = (u1 - u2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn time_embedding_deterministic_and_finite() {
        let s = ParamStore::new(5, DType::F64, &Device::Cpu);
        let te = TimeEmbedder::new(16, &s.root()).unwrap();
        let a = te.forward(&[0.0, 0.5, 1.0], DType::F64, &Device::Cpu).unwrap().0;
        let b = te.forward(&[0.0, 0.5, 1.0], DType::F64, &Device::Cpu).unwrap().0;
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        let rows = a.to_vec2::<f64>().unwrap();
        assert!(rows.iter().flatten().all(|v| v.is_finite()));
        assert_ne!(rows[0], rows[1]);
        assert!(TimeEmbedder::new(7, &s.root().pp("x")).is_err());
    }

    #[test]
    fn ablation_parameter_counts() {
        let full = ParamStore::new(0, DType::F32, &Device::Cpu);
        let cfg = small_cfg();
        MedFlowSeg::new(&cfg, &full.root()).unwrap();
        let dbsa = full.num_params_under(prefixes::DBSA);
        let fa = full.num_params_under(prefixes::FA);
        let modulator: usize = modulator_prefixes(&cfg).iter().map(|p| full.num_params_under(p)).sum();
        assert!(dbsa > 0 && fa > 0 && modulator > 0);
        let check = |c: ModelConfig, removed: usize| {
            let s = ParamStore::new(0, DType::F32, &Device::Cpu);
            MedFlowSeg::new(&c, &s.root()).unwrap();
            assert_eq!(full.num_params() - s.num_params(), removed);
        };
        check(ModelConfig { use_dbsa: false, ..cfg.clone() }, dbsa);
        check(ModelConfig { use_fa: false, ..cfg.clone() }, fa);
        let mut c = cfg.clone();
        c.fa.use_modulator = false;
        check(c, modulator);
    }
}
