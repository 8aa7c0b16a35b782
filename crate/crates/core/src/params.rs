//! Seeded parameter storage and the small layer set the networks are built from.
//!
//! candle's own initializers draw from an unseeded generator, so every weight
//! here is drawn from a ChaCha stream owned by the store. Building the same
//! configuration twice from the same seed yields bit-identical weights.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    /// Rows (or columns, whichever is shorter) orthonormal.
    Orthogonal,
}

struct Inner {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

/// Owns every trainable variable of a model, keyed by dotted path.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self::from_varmap(VarMap::new(), seed, dtype, device)
    }

    /// Wraps an existing map; paths already present are reused instead of drawn.
    pub fn from_varmap(varmap: VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Inner {
                varmap,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                dtype,
                device: device.clone(),
            }),
        }
    }

    pub fn root(&self) -> Params {
        Params {
            store: self.clone(),
            path: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.inner.varmap
    }

    /// All variables sorted by path, so iteration order is reproducible.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.inner.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameter count of every variable whose path starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.named_vars()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.inner.varmap.save(path)?;
        Ok(())
    }

    /// Overwrites every variable from a safetensors file. Missing entries are an error.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.inner.device)?;
        self.assign(&tensors)
    }

    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_vars() {
            let src = tensors
                .get(&name)
                .ok_or_else(|| contract(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(contract(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.inner.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy with independent storage, drawing no random numbers.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let varmap = VarMap::new();
        {
            let mut data = varmap.data().lock().unwrap();
            for (name, var) in self.named_vars() {
                data.insert(name, Var::from_tensor(&var.as_tensor().copy()?)?);
            }
        }
        Ok(ParamStore::from_varmap(varmap, 0, self.inner.dtype, &self.inner.device))
    }

    fn fetch(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.inner.varmap.data().lock().unwrap();
        if let Some(v) = data.get(&name) {
            if v.dims() != shape {
                return Err(contract(format!(
                    "parameter {name}: stored shape {:?} but requested {:?}",
                    v.dims(),
                    shape
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.draw(shape, init);
        let t = Tensor::from_vec(values, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name, var);
        Ok(out)
    }

    fn draw(&self, shape: &[usize], init: Init) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut rng = self.inner.rng.lock().unwrap();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    z * std
                })
                .collect(),
            Init::Orthogonal => {
                let rows = shape[0];
                let cols = n / rows.max(1);
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
                orthogonal(rows, cols, z)
            }
        }
    }
}

fn orthogonal(rows: usize, cols: usize, gaussian: Vec<f64>) -> Vec<f64> {
    use nalgebra::DMatrix;
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let m = DMatrix::from_row_slice(r, c, &gaussian);
    let qr = m.qr();
    let q = qr.q();
    // Sign fix so the distribution is uniform over orthogonal matrices.
    let rdiag = qr.r().diagonal();
    let mut q = q.columns(0, c).into_owned();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if tall { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(q[(i, j)]);
        }
    }
    out
}

/// A scoped view into a [`ParamStore`], in the style of a var builder.
#[derive(Clone)]
pub struct Params {
    store: ParamStore,
    path: Vec<String>,
}

impl Params {
    pub fn pp(&self, name: impl ToString) -> Params {
        let mut path = self.path.clone();
        path.push(name.to_string());
        Params {
            store: self.store.clone(),
            path,
        }
    }

    pub fn prefix(&self) -> String {
        self.path.join(".")
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix())
        };
        self.store.fetch(full, shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}

pub fn linear(in_dim: usize, out_dim: usize, p: &Params) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.get(&[out_dim, in_dim], "weight", Init::Uniform(bound))?;
    let b = p.get(&[out_dim], "bias", Init::Uniform(bound))?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn linear_with(
    in_dim: usize,
    out_dim: usize,
    weight: Init,
    bias: Init,
    p: &Params,
) -> Result<candle_nn::Linear> {
    let w = p.get(&[out_dim, in_dim], "weight", weight)?;
    let b = p.get(&[out_dim], "bias", bias)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// Same-padded, stride-1 convolution unless `stride` says otherwise.
pub fn conv2d(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    p: &Params,
) -> Result<candle_nn::Conv2d> {
    let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
    let w = p.get(&[out_c, in_c, kernel, kernel], "weight", Init::Uniform(bound))?;
    let b = p.get(&[out_c], "bias", Init::Uniform(bound))?;
    let cfg = candle_nn::Conv2dConfig {
        padding: kernel / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::Conv2d::new(w, Some(b), cfg))
}

/// Largest group count from {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap()
}

pub fn group_norm(channels: usize, p: &Params) -> Result<candle_nn::GroupNorm> {
    let w = p.get(&[channels], "weight", Init::Const(1.0))?;
    let b = p.get(&[channels], "bias", Init::Zeros)?;
    Ok(candle_nn::GroupNorm::new(w, b, channels, norm_groups(channels), 1e-5)?)
}

/// Layer norm over the last dimension built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            weight: p.get(&[dim], "weight", Init::Const(1.0))?,
            bias: p.get(&[dim], "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let dev = Device::Cpu;
        let build = || {
            let s = ParamStore::new(11, DType::F32, &dev);
            let l = linear(5, 3, &s.root().pp("a")).unwrap();
            l.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn existing_vars_are_reused() {
        let dev = Device::Cpu;
        let s = ParamStore::new(1, DType::F32, &dev);
        let a = s.root().get(&[2, 2], "w", Init::Normal(1.0)).unwrap();
        let b = s.root().get(&[2, 2], "w", Init::Normal(1.0)).unwrap();
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        assert!(s.root().get(&[3], "w", Init::Zeros).is_err());
        assert_eq!(s.num_params(), 4);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let dev = Device::Cpu;
        let s = ParamStore::new(3, DType::F64, &dev);
        let w = s.root().get(&[4, 9], "w", Init::Orthogonal).unwrap();
        let g = w.matmul(&w.t().unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deep_clone_is_independent() {
        let dev = Device::Cpu;
        let s = ParamStore::new(5, DType::F32, &dev);
        s.root().get(&[3], "w", Init::Const(1.0)).unwrap();
        let c = s.deep_clone().unwrap();
        let (_, v) = &s.named_vars()[0];
        v.set(&Tensor::zeros(3, DType::F32, &dev).unwrap()).unwrap();
        let (_, cv) = &c.named_vars()[0];
        assert_eq!(cv.to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn layer_norm_normalizes_last_dim() {
        let dev = Device::Cpu;
        let s = ParamStore::new(0, DType::F64, &dev);
        let ln = LayerNorm::new(4, &s.root()).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
