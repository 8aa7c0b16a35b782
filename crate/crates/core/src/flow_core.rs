//! Flow-matching mathematics on the straight noise-to-mask path.
//!
//! A sample moves from `x0 ~ N(0, I)` at `t = 0` to the encoded mask `x1` at
//! `t = 1` along `x_t = (1 - t) x0 + t x1`, whose velocity is the constant
//! `x1 - x0`. Training regresses that velocity under an L1 objective and
//! inference integrates the learned field with explicit Euler steps.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure_same_shape, Error, Result};

/// Noise and target endpoints of a batch of straight paths.
#[derive(Debug, Clone)]
pub struct Endpoints {
    pub x0: Tensor,
    pub x1: Tensor,
}

impl Endpoints {
    pub fn new(x0: Tensor, x1: Tensor) -> Result<Self> {
        ensure_same_shape(&x0, &x1, "endpoints")?;
        Ok(Self { x0, x1 })
    }
}

/// A point on the path together with its per-sample timestamps.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub x_t: Tensor,
    pub t: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Velocity(pub Tensor);

impl Velocity {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_times(t: &[f64], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(Error::Contract(format!(
            "time batch has {} entries for a batch of {batch}",
            t.len()
        )));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("time {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Per-sample scalars as a `[B, 1, 1, ...]` tensor broadcastable against `like`.
pub fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1usize; like.rank()];
    dims[0] = values.len();
    Ok(Tensor::from_slice(values, dims, like.device())?.to_dtype(like.dtype())?)
}

/// `(1 - t) x0 + t x1`, one `t` per batch element.
pub fn interpolate(e: &Endpoints, t: &[f64]) -> Result<FlowState> {
    ensure_same_shape(&e.x0, &e.x1, "interpolate")?;
    check_times(t, e.x0.dim(0)?)?;
    let tt = per_sample(t, &e.x0)?;
    let one_minus: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let omt = per_sample(&one_minus, &e.x0)?;
    let x_t = (e.x0.broadcast_mul(&omt)? + e.x1.broadcast_mul(&tt)?)?;
    Ok(FlowState { x_t, t: t.to_vec() })
}

pub fn target_velocity(e: &Endpoints) -> Result<Velocity> {
    ensure_same_shape(&e.x0, &e.x1, "target_velocity")?;
    Ok(Velocity((&e.x1 - &e.x0)?))
}

/// `batch_size` i.i.d. draws from `U[0, 1]`.
pub fn sample_time<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Result<Vec<f64>> {
    if batch_size < 1 {
        return Err(Error::Domain("sample_time needs batch_size >= 1".into()));
    }
    Ok((0..batch_size).map(|_| rng.random::<f64>()).collect())
}

/// Independent generator for `(seed, key, stream)`, so draws do not depend
/// on how work is batched or resumed.
pub fn stream_rng(seed: u64, key: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Standard normal noise of the given shape, drawn from `rng`.
pub fn standard_normal<R: Rng + ?Sized, S: Into<Shape>>(
    shape: S,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f32> = (0..shape.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Mean absolute error over every element.
pub fn velocity_loss(pred: &Velocity, target: &Velocity) -> Result<Tensor> {
    ensure_same_shape(&pred.0, &target.0, "velocity_loss")?;
    Ok((&pred.0 - &target.0)?.abs()?.mean_all()?)
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1` in `steps`
/// uniform explicit-Euler steps.
pub fn euler_integrate<F>(field: F, x0: &Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    Ok(euler_integrate_traced(field, x0, steps, false)?.0)
}

/// Like [`euler_integrate`], optionally keeping every intermediate state
/// (`steps + 1` tensors including `x0`).
pub fn euler_integrate_traced<F>(
    mut field: F,
    x0: &Tensor,
    steps: usize,
    record: bool,
) -> Result<(Tensor, Vec<Tensor>)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps < 1 {
        return Err(Error::Domain("euler_integrate needs steps >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    let mut trace = Vec::new();
    if record {
        trace.push(x.clone());
    }
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field(&x, t)?;
        ensure_same_shape(&v, &x, "velocity field output")?;
        if !all_finite(&v)? {
            return Err(Error::Numeric {
                step: k,
                msg: format!("non-finite velocity at t = {t}"),
            });
        }
        x = (x + (v * dt)?)?;
        if record {
            trace.push(x.clone());
        }
    }
    Ok((x, trace))
}
