use candle_core::{Module, Tensor};
use candle_nn::Linear;

use crate::error::{ensure_same_shape, Error, Result};
use crate::params::{linear, Params};

use super::attention::SelfAttentionBlock;
use super::film::Film;
use super::tokens::TokenSequence;

/// Element-wise gate in `(0, 1)` over `[B, L, D]` tokens.
#[derive(Debug, Clone)]
pub struct ModulationMask(pub Tensor);

#[derive(Debug, Clone)]
struct ModulatorBlock {
    film: Film,
    attn: SelfAttentionBlock,
}

/// Fuses frequency and spatial tokens through `R` time-conditioned
/// attention blocks into a sigmoid mask.
#[derive(Debug, Clone)]
pub struct NeuralModulator {
    fuse: Linear,
    blocks: Vec<ModulatorBlock>,
    head: Linear,
}

impl NeuralModulator {
    pub fn new(dim: usize, heads: usize, t_dim: usize, depth: usize, p: &Params) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Config("modulator depth must be at least 1".into()));
        }
        let blocks = (0..depth)
            .map(|i| {
                let bp = p.pp("blocks").pp(i);
                Ok(ModulatorBlock {
                    film: Film::new(t_dim, dim, &bp.pp("film"))?,
                    attn: SelfAttentionBlock::new(dim, heads, &bp)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            fuse: linear(3 * dim, dim, &p.pp("fuse"))?,
            blocks,
            head: linear(dim, dim, &p.pp("head"))?,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(
        &self,
        t_freq: &TokenSequence,
        t_flow: &TokenSequence,
        t_cond: &TokenSequence,
        t_emb: &Tensor,
    ) -> Result<ModulationMask> {
        ensure_same_shape(&t_freq.tokens, &t_flow.tokens, "modulator inputs")?;
        ensure_same_shape(&t_freq.tokens, &t_cond.tokens, "modulator inputs")?;
        let cat = Tensor::cat(&[&t_freq.tokens, &t_flow.tokens, &t_cond.tokens], 2)?;
        let mut x = self.fuse.forward(&cat)?;
        for b in &self.blocks {
            x = b.film.forward_tokens(&x, t_emb)?;
            x = b.attn.forward(&x)?;
        }
        Ok(ModulationMask(candle_nn::ops::sigmoid(&self.head.forward(&x)?)?))
    }
}
