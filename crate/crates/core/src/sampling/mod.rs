//! Euler ODE sampling, multi-run ensembles and STAPLE fusion.

mod staple;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, MaskEncoding};
use crate::error::{contract, Error, Result};
use crate::flow_core::{euler_integrate, standard_normal, stream_rng};
use crate::networks::{ConditionBundle, MedFlowSeg};

pub use staple::{staple_fuse, staple_multiclass, ClassStaple, StapleConfig, StapleResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub staple: StapleConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            runs: 10,
            seed: 0,
            staple: StapleConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.runs < 1 {
            return Err(Error::Config(format!(
                "steps and runs must be >= 1, got {} and {}",
                self.steps, self.runs
            )));
        }
        Ok(())
    }
}

/// A velocity field over batches, with per-batch cached conditioning.
pub trait VelocityField {
    type Cache;
    fn condition(&self, images: &Tensor) -> Result<Self::Cache>;
    fn velocity(&self, x_t: &Tensor, t: f64, cache: &Self::Cache) -> Result<Tensor>;
}

impl VelocityField for MedFlowSeg {
    type Cache = ConditionBundle;

    // Outputs are detached: sampling never backpropagates, and a tracked
    // velocity would chain every step's forward graph onto the Euler state.
    fn condition(&self, images: &Tensor) -> Result<ConditionBundle> {
        let c = self.condition_forward(images)?;
        Ok(ConditionBundle {
            final_decoder_feature: c.final_decoder_feature.detach(),
            bottleneck_feature: c.bottleneck_feature.detach(),
            aux_logits: c.aux_logits.detach(),
        })
    }

    fn velocity(&self, x_t: &Tensor, t: f64, cache: &ConditionBundle) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        Ok(MedFlowSeg::velocity(self, x_t, &vec![t; b], cache)?.0.detach())
    }
}

/// Field that knows the answer: `(x1 - x) / (1 - t)`, which equals the
/// constant `x1 - x0` along the straight path.
#[derive(Debug, Clone)]
pub struct OracleField {
    /// Encoded targets `[B, K, H, W]`, in batch order.
    pub targets: Tensor,
}

impl VelocityField for OracleField {
    type Cache = Tensor;

    fn condition(&self, images: &Tensor) -> Result<Tensor> {
        if images.dim(0)? != self.targets.dim(0)? {
            return Err(contract("oracle field batch size differs from its targets"));
        }
        Ok(self.targets.clone())
    }

    fn velocity(&self, x_t: &Tensor, t: f64, cache: &Tensor) -> Result<Tensor> {
        Ok(((cache.to_dtype(x_t.dtype())? - x_t)? / (1.0 - t))?)
    }
}

/// Per-case output of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub runs: Vec<LabelMap>,
    pub fused: LabelMap,
    pub classes: Vec<ClassStaple>,
}

/// Initial noise of one case in one run, independent of batching.
fn initial_noise(
    cfg: &SamplerConfig,
    keys: &[u64],
    run: usize,
    shape: (usize, usize, usize),
    like: &Tensor,
) -> Result<Tensor> {
    let parts = keys
        .iter()
        .map(|&k| {
            let mut rng = stream_rng(cfg.seed, k, run as u64);
            standard_normal(shape, &mut rng, like.dtype(), like.device())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

fn integrate_run<F: VelocityField>(
    field: &F,
    cache: &F::Cache,
    images: &Tensor,
    keys: &[u64],
    enc: &MaskEncoding,
    cfg: &SamplerConfig,
    run: usize,
) -> Result<Vec<LabelMap>> {
    let (b, _, h, w) = images.dims4()?;
    if keys.len() != b {
        return Err(contract(format!("{} noise keys for a batch of {b}", keys.len())));
    }
    let x0 = initial_noise(cfg, keys, run, (enc.channels(), h, w), images)?;
    let x1 = euler_integrate(|x, t| field.velocity(x, t, cache), &x0, cfg.steps)?;
    enc.decode_batch(&x1)
}

/// One run for each image of `images` (`[B, C, H, W]`). `keys` identify the
/// cases so each draws its own noise.
pub fn sample_once<F: VelocityField>(
    field: &F,
    images: &Tensor,
    keys: &[u64],
    enc: &MaskEncoding,
    cfg: &SamplerConfig,
    run: usize,
) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    let cache = field.condition(images)?;
    integrate_run(field, &cache, images, keys, enc, cfg, run)
}

/// `cfg.runs` runs per image, fused per case. The condition is computed once
/// per batch and reused across runs and steps.
pub fn sample_ensemble<F: VelocityField>(
    field: &F,
    images: &Tensor,
    keys: &[u64],
    enc: &MaskEncoding,
    cfg: &SamplerConfig,
) -> Result<Vec<EnsembleResult>> {
    cfg.validate()?;
    let cache = field.condition(images)?;
    let b = images.dim(0)?;
    let mut per_case: Vec<Vec<LabelMap>> = vec![Vec::with_capacity(cfg.runs); b];
    for run in 0..cfg.runs {
        for (i, m) in integrate_run(field, &cache, images, keys, enc, cfg, run)?.into_iter().enumerate() {
            per_case[i].push(m);
        }
    }
    per_case
        .into_iter()
        .map(|runs| {
            let (fused, classes) = staple_multiclass(&runs, enc.num_classes, &cfg.staple)?;
            Ok(EnsembleResult {
                runs,
                fused,
                classes,
            })
        })
        .collect()
}

/// Softmax-free argmax of auxiliary logits `[B, K, H, W]`, for diagnostics.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (b, _, h, w) = logits.dims4()?;
    let idx = logits.argmax(D::Minus(3))?.to_dtype(candle_core::DType::U8)?;
    (0..b)
        .map(|i| LabelMap::new(h, w, idx.get(i)?.flatten_all()?.to_vec1()?))
        .collect()
}
