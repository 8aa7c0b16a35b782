//! Dual-branch spatial attention.
//!
//! The condition stream's final decoder feature is turned into a structural
//! map, split into a Gaussian low-pass branch and its high-pass residual, and
//! the two branches are fused into a sigmoid gate that rescales the flow
//! stream's first encoder feature by `1 + g`.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::error::{contract, ensure_same_shape, Result};
use crate::params::{conv2d, Init, Params};

/// `ln(e - 1)`: softplus of this is exactly 1.
const SIGMA_ONE_RAW: f64 = 0.541_324_854_612_918_1;

/// Odd-sized isotropic Gaussian with a learnable, softplus-positive width.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    size: usize,
    raw_sigma: Tensor,
    sq_dist: Tensor,
}

impl GaussianKernel {
    pub fn new(size: usize, p: &Params) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(contract(format!("gaussian kernel size {size} must be odd")));
        }
        let raw_sigma = p.get(&[1], "raw_sigma", Init::Const(SIGMA_ONE_RAW))?;
        let r = (size / 2) as f64;
        let mut d2 = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                let (y, x) = (i as f64 - r, j as f64 - r);
                d2.push(x * x + y * y);
            }
        }
        let sq_dist = Tensor::from_vec(d2, (size, size), p.device())?.to_dtype(p.dtype())?;
        Ok(Self {
            size,
            raw_sigma,
            sq_dist,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `softplus(raw)`, floored at `1e-6` where the softplus underflows.
    pub fn sigma(&self) -> Result<Tensor> {
        Ok((self.raw_sigma.exp()? + 1.0)?.log()?.maximum(1e-6)?)
    }

    /// Normalized `size x size` weights for the current sigma.
    pub fn weights(&self) -> Result<Tensor> {
        let sigma = self.sigma()?;
        let two_var = (sigma.sqr()? * 2.0)?;
        let w = self.sq_dist.broadcast_div(&two_var)?.neg()?.exp()?;
        let total = w.sum_all()?;
        Ok(w.broadcast_div(&total)?)
    }

    /// Depthwise blur with reflect padding; spatial size preserved.
    pub fn blur(&self, x: &Tensor) -> Result<Tensor> {
        blur_with(x, &self.weights()?)
    }

    /// `x - blur(x)`, accumulated as `sum_i w_i (x - shift_i x)` so flat
    /// regions cancel exactly instead of up to rounding of the kernel sum.
    pub fn residual(&self, x: &Tensor) -> Result<Tensor> {
        residual_with(x, &self.weights()?)
    }
}

/// Difference form of `x - blur_with(x, kernel)` for a normalized kernel.
pub fn residual_with(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (k, k2) = kernel.dims2()?;
    if k != k2 || k % 2 == 0 {
        return Err(contract(format!("blur kernel must be odd and square, got {k}x{k2}")));
    }
    let padded = reflect_pad(x, k / 2)?;
    let kern = kernel.to_dtype(x.dtype())?;
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        for j in 0..k {
            let shifted = padded.narrow(2, i, h)?.narrow(3, j, w)?;
            let term = (x - shifted)?.broadcast_mul(&kern.get(i)?.get(j)?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// Weights of a normalized Gaussian with a fixed sigma, outside any parameter store.
pub fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 - r, j as f64 - r);
            w.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Reflect padding (edge pixel not repeated) on both spatial axes.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h <= pad || w <= pad {
        return Err(contract(format!(
            "reflect padding of {pad} needs spatial size > {pad}, got {h}x{w}"
        )));
    }
    let index = |n: usize| -> Result<Tensor> {
        let mut idx: Vec<u32> = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            idx.push(i as u32);
        }
        idx.extend(0..n as u32);
        for i in 0..pad {
            idx.push((n - 2 - i) as u32);
        }
        Ok(Tensor::from_vec(idx, n + 2 * pad, x.device())?)
    };
    let x = x.index_select(&index(h)?, 2)?;
    Ok(x.index_select(&index(w)?, 3)?)
}

/// Applies one `k x k` kernel to every channel independently.
pub fn blur_with(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (k, k2) = kernel.dims2()?;
    if k != k2 || k % 2 == 0 {
        return Err(contract(format!("blur kernel must be odd and square, got {k}x{k2}")));
    }
    let padded = reflect_pad(x, k / 2)?;
    let flat = padded.reshape((b * c, 1, h + k - 1, w + k - 1))?;
    let kern = kernel.reshape((1, 1, k, k))?.to_dtype(x.dtype())?;
    Ok(flat.conv2d(&kern, 0, 1, 1, 1)?.reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct DbSa {
    align: Conv2d,
    structural: Conv2d,
    low_gauss: GaussianKernel,
    low_conv: Conv2d,
    high_gauss: GaussianKernel,
    high_conv: Conv2d,
    gate: Conv2d,
    channels: usize,
}

impl DbSa {
    /// `cond_channels` is the width of the condition decoder feature,
    /// `flow_channels` that of the flow stream's first encoder stage.
    pub fn new(cond_channels: usize, flow_channels: usize, p: &Params) -> Result<Self> {
        let c = flow_channels;
        Ok(Self {
            align: conv2d(cond_channels, c, 1, 1, &p.pp("align"))?,
            structural: conv2d(c, c, 3, 1, &p.pp("structural"))?,
            low_gauss: GaussianKernel::new(3, &p.pp("low_gauss"))?,
            low_conv: conv2d(c, c, 3, 1, &p.pp("low_conv"))?,
            high_gauss: GaussianKernel::new(5, &p.pp("high_gauss"))?,
            high_conv: conv2d(c, c, 3, 1, &p.pp("high_conv"))?,
            gate: conv2d(2 * c, c, 1, 1, &p.pp("gate"))?,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn low_gaussian(&self) -> &GaussianKernel {
        &self.low_gauss
    }

    pub fn high_gaussian(&self) -> &GaussianKernel {
        &self.high_gauss
    }

    /// Channel alignment followed by the structural 3x3 convolution.
    pub fn structural_feature(&self, f_cond_final: &Tensor) -> Result<Tensor> {
        let aligned = self.align.forward(f_cond_final)?;
        Ok(self.structural.forward(&aligned)?)
    }

    /// `f_str - gauss5(f_str)` before the branch convolution.
    pub fn high_pass_residual(&self, f_str: &Tensor) -> Result<Tensor> {
        self.high_gauss.residual(f_str)
    }

    /// Returns `(f_low, f_high)`.
    pub fn decompose(&self, f_str: &Tensor) -> Result<(Tensor, Tensor)> {
        let low = self.low_conv.forward(&self.low_gauss.blur(f_str)?)?;
        let high = self.high_conv.forward(&self.high_pass_residual(f_str)?)?;
        Ok((low, high))
    }

    pub fn gate(&self, f_high: &Tensor, f_low: &Tensor) -> Result<Tensor> {
        ensure_same_shape(f_high, f_low, "dbsa gate branches")?;
        if f_high.dim(1)? != self.channels {
            return Err(contract(format!(
                "dbsa gate expects {} channels per branch, got {}",
                self.channels,
                f_high.dim(1)?
            )));
        }
        let cat = Tensor::cat(&[f_high, f_low], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.gate.forward(&cat)?)?)
    }

    /// Full gate map from the condition decoder feature.
    pub fn attention_map(&self, f_cond_final: &Tensor) -> Result<Tensor> {
        let f_str = self.structural_feature(f_cond_final)?;
        let (low, high) = self.decompose(&f_str)?;
        self.gate(&high, &low)
    }

    /// Gated first encoder feature of the flow stream.
    pub fn forward(&self, f_flow0: &Tensor, f_cond_final: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = f_flow0.dims4()?;
        let (_, _, hc, wc) = f_cond_final.dims4()?;
        if (h, w) != (hc, wc) {
            return Err(contract(format!(
                "dbsa needs matching resolutions: flow {h}x{w}, condition {hc}x{wc}"
            )));
        }
        let g = self.attention_map(f_cond_final)?;
        inject(f_flow0, &g)
    }
}

/// `f + g * f`.
pub fn inject(f_flow0: &Tensor, g: &Tensor) -> Result<Tensor> {
    ensure_same_shape(f_flow0, g, "dbsa inject")?;
    Ok((f_flow0 + (f_flow0 * g)?)?)
}
