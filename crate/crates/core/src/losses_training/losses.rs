use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

/// Coefficients of the auxiliary segmentation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the whole auxiliary term.
    pub lambda: f64,
    /// Weight of cross-entropy relative to Dice inside the auxiliary term.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda={} alpha={}",
                self.lambda, self.alpha
            )));
        }
        Ok(())
    }
}

/// Checks that an integer label map `[B, H, W]` only holds classes below `k`.
pub fn validate_labels(labels: &Tensor, k: usize) -> Result<()> {
    let max = labels.to_dtype(DType::U32)?.flatten_all()?.max(0)?.to_scalar::<u32>()?;
    if max as usize >= k {
        return Err(Error::Data(format!("label {max} outside [0, {k})")));
    }
    Ok(())
}

/// `[B, H, W]` labels to a `[B, K, H, W]` indicator tensor of `dtype`.
pub fn one_hot(labels: &Tensor, k: usize, dtype: DType) -> Result<Tensor> {
    validate_labels(labels, k)?;
    let classes = Tensor::arange(0u32, k as u32, labels.device())?.reshape((1, k, 1, 1))?;
    let l = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    Ok(l.broadcast_eq(&classes)?.to_dtype(dtype)?)
}

fn check_logits(logits: &Tensor, labels: &Tensor) -> Result<usize> {
    let (b, k, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::Contract(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    Ok(k)
}

/// `1 - mean_k (2 I_k + eps) / (|P_k| + |Y_k| + eps)` with sums over batch and
/// pixels. `probs` and `target` are `[B, K, H, W]`.
pub fn soft_dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let inter = (probs * target)?.sum((0, 2, 3))?;
    let card = (probs.sum((0, 2, 3))? + target.sum((0, 2, 3))?)?;
    let score = ((inter * 2.0)? + DICE_SMOOTH)?.div(&(card + DICE_SMOOTH)?)?;
    Ok(score.mean_all()?.affine(-1.0, 1.0)?)
}

/// Multi-class soft Dice loss on softmax probabilities.
pub fn dice_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let k = check_logits(logits, labels)?;
    let target = one_hot(labels, k, logits.dtype())?;
    soft_dice_loss(&candle_nn::ops::softmax(logits, 1)?, &target)
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let k = check_logits(logits, labels)?;
    let target = one_hot(labels, k, logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let n = (logits.elem_count() / k) as f64;
    Ok((logp * target)?.sum_all()?.affine(-1.0 / n, 0.0)?)
}

/// `vel + lambda * (dice + alpha * ce)`.
pub fn total_loss(vel: &Tensor, dice: &Tensor, ce: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let aux = (dice + ce.affine(w.alpha, 0.0)?)?;
    Ok((vel + aux.affine(w.lambda, 0.0)?)?)
}

/// Scalar view of a loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    if t.elem_count() != 1 {
        return Err(Error::Contract(format!("expected a scalar, got {:?}", t.dims())));
    }
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}
