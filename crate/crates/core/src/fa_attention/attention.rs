use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{contract, Error, Result};
use crate::params::{linear, LayerNorm, Params};

use super::tokens::TokenSequence;

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, p: &Params) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "token dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: linear(dim, dim, &p.pp("q"))?,
            k: linear(dim, dim, &p.pp("k"))?,
            v: linear(dim, dim, &p.pp("v"))?,
            o: linear(dim, dim, &p.pp("o"))?,
            heads,
            dim,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the output `[B, Lq, D]` and the attention weights `[B, H, Lq, Lk]`.
    pub fn forward_with_weights(&self, query: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, lq, dq) = query.dims3()?;
        let (bk, _, dk) = kv.dims3()?;
        if dq != self.dim || dk != self.dim || b != bk {
            return Err(contract(format!(
                "attention over dim {}: query [{b}, {lq}, {dq}], key/value [{bk}, _, {dk}]",
                self.dim
            )));
        }
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(kv)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.dim))?;
        Ok((self.o.forward(&mixed)?, weights))
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, kv)?.0)
    }

    /// `o(v(x))`: what a single key contributes regardless of the query.
    pub fn value_path(&self, kv: &Tensor) -> Result<Tensor> {
        Ok(self.o.forward(&self.v.forward(kv)?)?)
    }
}

/// Two-layer perceptron `D -> hidden -> D` with SiLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            up: linear(dim, hidden, &p.pp("up"))?,
            down: linear(hidden, dim, &p.pp("down"))?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.silu()?)
    }
}

/// Pre-norm cross-attention with residual and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl CrossAttention {
    pub fn new(dim: usize, heads: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(dim, &p.pp("norm_q"))?,
            norm_kv: LayerNorm::new(dim, &p.pp("norm_kv"))?,
            attn: MultiHeadAttention::new(dim, heads, &p.pp("attn"))?,
            norm_ff: LayerNorm::new(dim, &p.pp("norm_ff"))?,
            ff: FeedForward::new(dim, 2 * dim, &p.pp("ff"))?,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    /// Attention sublayer alone (no residual), with its weights.
    pub fn attend(&self, q: &TokenSequence, kv: &TokenSequence) -> Result<(Tensor, Tensor)> {
        let qn = self.norm_q.forward(&q.tokens)?;
        let kvn = self.norm_kv.forward(&kv.tokens)?;
        self.attn.forward_with_weights(&qn, &kvn)
    }

    /// `T_q` attends to `T_kv`; the output keeps the query's layout.
    pub fn forward(&self, q: &TokenSequence, kv: &TokenSequence) -> Result<TokenSequence> {
        let (a, _) = self.attend(q, kv)?;
        let x = (&q.tokens + a)?;
        let x = (&x + self.ff.forward(&self.norm_ff.forward(&x)?)?)?;
        Ok(q.with_tokens(x))
    }
}

/// Pre-norm self-attention plus feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(dim: usize, heads: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(dim, &p.pp("norm"))?,
            attn: MultiHeadAttention::new(dim, heads, &p.pp("attn"))?,
            norm_ff: LayerNorm::new(dim, &p.pp("norm_ff"))?,
            ff: FeedForward::new(dim, 2 * dim, &p.pp("ff"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.norm.forward(x)?;
        let x = (x + self.attn.forward(&n, &n)?)?;
        Ok((&x + self.ff.forward(&self.norm_ff.forward(&x)?)?)?)
    }
}
