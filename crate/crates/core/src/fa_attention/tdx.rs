//! Token discrepancy extraction between flow and condition tokens.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::{ensure_same_shape, Result};
use crate::params::{linear, Params};

use super::attention::FeedForward;
use super::tokens::TokenSequence;

/// Agreement, difference and residual cues of two aligned token streams.
#[derive(Debug, Clone)]
pub struct TdxCues {
    /// `T_f * T_c`
    pub agreement: Tensor,
    /// `|T_f - T_c|`
    pub difference: Tensor,
    /// `T_f - T_c`
    pub residual: Tensor,
}

pub fn tdx_cues(t_f: &Tensor, t_c: &Tensor) -> Result<TdxCues> {
    ensure_same_shape(t_f, t_c, "tdx cues")?;
    let residual = (t_f - t_c)?;
    Ok(TdxCues {
        agreement: (t_f * t_c)?,
        difference: residual.abs()?,
        residual,
    })
}

#[derive(Debug, Clone)]
pub struct TdxEvidence {
    pub cues: TdxCues,
    /// Sum of the three encoded cues.
    pub evidence: Tensor,
}

#[derive(Debug, Clone)]
pub struct Tdx {
    enc_agreement: FeedForward,
    enc_difference: FeedForward,
    enc_residual: FeedForward,
    head_flow: Linear,
    head_cond: Linear,
}

impl Tdx {
    pub fn new(dim: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            enc_agreement: FeedForward::new(dim, dim, &p.pp("enc_agreement"))?,
            enc_difference: FeedForward::new(dim, dim, &p.pp("enc_difference"))?,
            enc_residual: FeedForward::new(dim, dim, &p.pp("enc_residual"))?,
            head_flow: linear(dim, dim, &p.pp("head_flow"))?,
            head_cond: linear(dim, dim, &p.pp("head_cond"))?,
        })
    }

    pub fn evidence(&self, t_f: &Tensor, t_c: &Tensor) -> Result<TdxEvidence> {
        let cues = tdx_cues(t_f, t_c)?;
        let evidence = ((self.enc_agreement.forward(&cues.agreement)?
            + self.enc_difference.forward(&cues.difference)?)?
            + self.enc_residual.forward(&cues.residual)?)?;
        Ok(TdxEvidence { cues, evidence })
    }

    /// Recalibrated `(T~_f, T~_c)`, each `T + sigmoid(head(T_z)) * T`.
    pub fn forward(
        &self,
        t_f: &TokenSequence,
        t_c: &TokenSequence,
    ) -> Result<(TokenSequence, TokenSequence)> {
        let ev = self.evidence(&t_f.tokens, &t_c.tokens)?;
        let recal = |t: &Tensor, head: &Linear| -> Result<Tensor> {
            let g = candle_nn::ops::sigmoid(&head.forward(&ev.evidence)?)?;
            Ok((t + (t * g)?)?)
        };
        Ok((
            t_f.with_tokens(recal(&t_f.tokens, &self.head_flow)?),
            t_c.with_tokens(recal(&t_c.tokens, &self.head_cond)?),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_core::standard_normal;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn tok(seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        standard_normal((2, 4, 6), &mut rng, DType::F64, &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn identical_streams() {
        let a = tok(1);
        let c = tdx_cues(&a, &a).unwrap();
        assert!(v(&c.difference).iter().all(|x| *x == 0.0));
        assert!(v(&c.residual).iter().all(|x| *x == 0.0));
        assert_eq!(v(&c.agreement), v(&(&a * &a).unwrap()));
    }

    #[test]
    fn zero_condition() {
        let a = tok(2);
        let z = a.zeros_like().unwrap();
        let c = tdx_cues(&a, &z).unwrap();
        assert!(v(&c.agreement).iter().all(|x| *x == 0.0));
        assert_eq!(v(&c.difference), v(&a.abs().unwrap()));
        assert_eq!(v(&c.residual), v(&a));
    }

    #[test]
    fn swap_antisymmetry() {
        let (a, b) = (tok(3), tok(4));
        let ab = tdx_cues(&a, &b).unwrap();
        let ba = tdx_cues(&b, &a).unwrap();
        assert_eq!(v(&ab.agreement), v(&ba.agreement));
        assert_eq!(v(&ab.difference), v(&ba.difference));
        assert_eq!(v(&ab.residual), v(&ba.residual.neg().unwrap()));
        assert_eq!(v(&ab.difference), v(&ab.residual.abs().unwrap()));
        assert!(tdx_cues(&a, &a.narrow(2, 0, 3).unwrap()).is_err());
    }
}
