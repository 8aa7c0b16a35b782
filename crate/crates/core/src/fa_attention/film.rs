use candle_core::Tensor;

use crate::error::{contract, Result};
use crate::params::{Init, Params};

/// Feature-wise affine modulation `gamma * f + beta`, with `(gamma, beta)`
/// read off the time embedding by a linear head.
///
/// The head starts at the identity: zero weights, `gamma` bias 1, `beta` bias 0.
#[derive(Debug, Clone)]
pub struct Film {
    weight: Tensor,
    gamma_bias: Tensor,
    beta_bias: Tensor,
    channels: usize,
}

impl Film {
    pub fn new(t_dim: usize, channels: usize, p: &Params) -> Result<Self> {
        Self::build(t_dim, channels, Init::Zeros, Init::Const(1.0), Init::Zeros, p)
    }

    /// Same layout with every head entry drawn from `init`.
    pub fn with_init(t_dim: usize, channels: usize, init: Init, p: &Params) -> Result<Self> {
        Self::build(t_dim, channels, init, init, init, p)
    }

    fn build(
        t_dim: usize,
        channels: usize,
        weight: Init,
        gamma: Init,
        beta: Init,
        p: &Params,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.get(&[2 * channels, t_dim], "weight", weight)?,
            gamma_bias: p.get(&[channels], "gamma_bias", gamma)?,
            beta_bias: p.get(&[channels], "beta_bias", beta)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(gamma, beta)`, each `[B, C]`.
    pub fn coefficients(&self, t_emb: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = t_emb.matmul(&self.weight.t()?)?;
        let gamma = gb.narrow(1, 0, self.channels)?.broadcast_add(&self.gamma_bias)?;
        let beta = gb.narrow(1, self.channels, self.channels)?.broadcast_add(&self.beta_bias)?;
        Ok((gamma, beta))
    }

    /// Modulates a `[B, C, h, w]` map along its channel axis.
    pub fn forward_map(&self, f: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = f.dims4()?;
        self.check(c)?;
        let (g, be) = self.coefficients(t_emb)?;
        let g = g.reshape((b, c, 1, 1))?;
        let be = be.reshape((b, c, 1, 1))?;
        Ok(f.broadcast_mul(&g)?.broadcast_add(&be)?)
    }

    /// Modulates `[B, L, D]` tokens along the feature axis.
    pub fn forward_tokens(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        self.check(d)?;
        let (g, be) = self.coefficients(t_emb)?;
        Ok(x.broadcast_mul(&g.reshape((b, 1, d))?)?
            .broadcast_add(&be.reshape((b, 1, d))?)?)
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(contract(format!(
                "FiLM built for {} channels applied to {c}",
                self.channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn identity_at_init() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let film = Film::new(4, 3, &s.root().pp("film")).unwrap();
        let f = Tensor::arange(0.0f64, 24.0, &Device::Cpu).unwrap().reshape((2, 3, 2, 2)).unwrap();
        let t = Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap();
        let out = film.forward_map(&f, &t).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            f.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn zero_input_gives_beta() {
        let s = ParamStore::new(1, DType::F64, &Device::Cpu);
        let film = Film::with_init(4, 3, Init::Normal(0.5), &s.root()).unwrap();
        let t = Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 5, 3), DType::F64, &Device::Cpu).unwrap();
        let out = film.forward_tokens(&zero, &t).unwrap();
        let (_, beta) = film.coefficients(&t).unwrap();
        let beta = beta.to_vec2::<f64>().unwrap()[0].clone();
        for row in out.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            assert_eq!(row, beta);
        }
    }

    #[test]
    fn distinct_times_give_distinct_outputs() {
        let s = ParamStore::new(2, DType::F64, &Device::Cpu);
        let film = Film::with_init(2, 2, Init::Normal(1.0), &s.root()).unwrap();
        let f = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let t1 = Tensor::new(&[[0.1f64, 0.2]], &Device::Cpu).unwrap();
        let t2 = Tensor::new(&[[0.7f64, -0.3]], &Device::Cpu).unwrap();
        let a = film.forward_map(&f, &t1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = film.forward_map(&f, &t2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_ne!(a, b);
        assert!(film.forward_map(&Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap(), &t1).is_err());
    }
}
