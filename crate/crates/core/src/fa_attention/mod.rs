//! Frequency-aware attention at the bottleneck.
//!
//! Each block runs two branches over the flow feature `f` and the condition
//! feature `c`:
//!
//! * frequency: DFT of both maps, FiLM on the time embedding, patch tokens
//!   with a 2-D sinusoidal position code, then cross-attention with the
//!   condition tokens as queries, giving `T^_F`;
//! * spatial: FiLM and patch tokens of the raw maps, recalibrated by TD-X.
//!
//! The neural modulator turns `T^_F` and the spatial tokens into a mask
//! `M0`; `M0 * T^_F` is mapped back through the inverse patch embedding and
//! the inverse DFT to the refined condition feature. The module stacks `N`
//! blocks and threads the refined condition through them while `f` stays fixed.

mod attention;
mod film;
mod modulator;
mod spectral;
mod tdx;
mod tokens;

pub use attention::{CrossAttention, FeedForward, MultiHeadAttention, SelfAttentionBlock};
pub use film::Film;
pub use modulator::{ModulationMask, NeuralModulator};
pub use spectral::{from_frequency, to_frequency, ImagResidue, SpectralFeature};
pub use tdx::{tdx_cues, Tdx, TdxCues, TdxEvidence};
pub use tokens::{positional_encoding_2d, PatchEmbed, TokenSequence};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaConfig {
    pub patch: usize,
    /// Number of stacked blocks (`N`).
    pub depth: usize,
    /// Attention blocks inside the neural modulator (`R`).
    pub modulator_depth: usize,
    pub heads: usize,
    pub dim: usize,
    /// When false the frequency tokens pass unmasked and the spatial branch
    /// that only feeds the modulator is not built.
    pub use_modulator: bool,
}

impl Default for FaConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            depth: 4,
            modulator_depth: 2,
            heads: 4,
            dim: 128,
            use_modulator: true,
        }
    }
}

impl FaConfig {
    pub fn validate(&self, bottleneck: (usize, usize)) -> Result<()> {
        if self.depth < 1 || self.modulator_depth < 1 {
            return Err(Error::Config("FA depth and modulator depth must be >= 1".into()));
        }
        if self.patch == 0 || !bottleneck.0.is_multiple_of(self.patch) || !bottleneck.1.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "bottleneck {}x{} is not divisible by patch {}",
                bottleneck.0, bottleneck.1, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "token dim {} must be divisible by 4 and by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SpatialBranch {
    film_flow: Film,
    film_cond: Film,
    embed_flow: PatchEmbed,
    embed_cond: PatchEmbed,
    tdx: Tdx,
}

/// Intermediate tensors of one block, for inspection.
#[derive(Debug, Clone)]
pub struct FaTrace {
    pub freq_flow: TokenSequence,
    pub freq_cond: TokenSequence,
    pub fused: TokenSequence,
    pub spatial: Option<(TokenSequence, TokenSequence)>,
    pub mask: Option<ModulationMask>,
    pub modulated: TokenSequence,
    pub refined: Tensor,
}

#[derive(Debug, Clone)]
pub struct FaBlock {
    film_freq_flow: Film,
    film_freq_cond: Film,
    embed_freq_flow: PatchEmbed,
    embed_freq_cond: PatchEmbed,
    cross: CrossAttention,
    spatial: Option<SpatialBranch>,
    modulator: Option<NeuralModulator>,
    dim: usize,
}

impl FaBlock {
    /// `channels` is the bottleneck width, `t_dim` the time-embedding width.
    pub fn new(channels: usize, t_dim: usize, cfg: &FaConfig, p: &Params) -> Result<Self> {
        let (d, pt) = (cfg.dim, cfg.patch);
        let spatial = if cfg.use_modulator {
            let sp = p.pp("spatial");
            Some(SpatialBranch {
                film_flow: Film::new(t_dim, channels, &sp.pp("film_flow"))?,
                film_cond: Film::new(t_dim, channels, &sp.pp("film_cond"))?,
                embed_flow: PatchEmbed::new(channels, pt, d, &sp.pp("embed_flow"))?,
                embed_cond: PatchEmbed::new(channels, pt, d, &sp.pp("embed_cond"))?,
                tdx: Tdx::new(d, &sp.pp("tdx"))?,
            })
        } else {
            None
        };
        let modulator = if cfg.use_modulator {
            Some(NeuralModulator::new(d, cfg.heads, t_dim, cfg.modulator_depth, &p.pp("modulator"))?)
        } else {
            None
        };
        Ok(Self {
            film_freq_flow: Film::new(t_dim, 2 * channels, &p.pp("film_freq_flow"))?,
            film_freq_cond: Film::new(t_dim, 2 * channels, &p.pp("film_freq_cond"))?,
            embed_freq_flow: PatchEmbed::new(2 * channels, pt, d, &p.pp("embed_freq_flow"))?,
            embed_freq_cond: PatchEmbed::new(2 * channels, pt, d, &p.pp("embed_freq_cond"))?,
            cross: CrossAttention::new(d, cfg.heads, &p.pp("cross"))?,
            spatial,
            modulator,
            dim: d,
        })
    }

    fn positioned(&self, t: TokenSequence) -> Result<TokenSequence> {
        let pe = positional_encoding_2d(
            t.grid.0,
            t.grid.1,
            self.dim,
            t.tokens.dtype(),
            t.tokens.device(),
        )?;
        let tokens = t.tokens.broadcast_add(&pe)?;
        Ok(t.with_tokens(tokens))
    }

    pub fn trace(&self, f: &Tensor, c: &Tensor, t_emb: &Tensor) -> Result<FaTrace> {
        ensure_same_shape(f, c, "FA-attention inputs")?;
        let sf = to_frequency(f)?;
        let sc = to_frequency(c)?;
        let freq_flow = self.positioned(
            self.embed_freq_flow
                .embed(&self.film_freq_flow.forward_map(sf.tensor(), t_emb)?)?,
        )?;
        let freq_cond = self.positioned(
            self.embed_freq_cond
                .embed(&self.film_freq_cond.forward_map(sc.tensor(), t_emb)?)?,
        )?;
        let fused = self.cross.forward(&freq_cond, &freq_flow)?;

        let (spatial, mask, modulated) = match (&self.spatial, &self.modulator) {
            (Some(sp), Some(m)) => {
                let tf = sp.embed_flow.embed(&sp.film_flow.forward_map(f, t_emb)?)?;
                let tc = sp.embed_cond.embed(&sp.film_cond.forward_map(c, t_emb)?)?;
                let (tf, tc) = sp.tdx.forward(&tf, &tc)?;
                let mask = m.forward(&fused, &tf, &tc, t_emb)?;
                let modulated = fused.with_tokens((&fused.tokens * &mask.0)?);
                (Some((tf, tc)), Some(mask), modulated)
            }
            _ => (None, None, fused.clone()),
        };
        let spectrum = SpectralFeature(self.embed_freq_cond.invert(&modulated)?);
        let refined = from_frequency(&spectrum, ImagResidue::Discard)?;
        Ok(FaTrace {
            freq_flow,
            freq_cond,
            fused,
            spatial,
            mask,
            modulated,
            refined,
        })
    }

    /// Refined condition feature `c1`, shaped like `c`.
    pub fn forward(&self, f: &Tensor, c: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        Ok(self.trace(f, c, t_emb)?.refined)
    }
}

/// `N` stacked blocks; the condition feature is refined in turn by each.
#[derive(Debug, Clone)]
pub struct FaAttention {
    blocks: Vec<FaBlock>,
    cfg: FaConfig,
}

impl FaAttention {
    pub fn new(
        channels: usize,
        t_dim: usize,
        bottleneck: (usize, usize),
        cfg: &FaConfig,
        p: &Params,
    ) -> Result<Self> {
        cfg.validate(bottleneck)?;
        let blocks = (0..cfg.depth)
            .map(|i| FaBlock::new(channels, t_dim, cfg, &p.pp("blocks").pp(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, cfg: *cfg })
    }

    pub fn config(&self) -> &FaConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[FaBlock] {
        &self.blocks
    }

    pub fn forward(&self, f: &Tensor, c: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let mut c = c.clone();
        for b in &self.blocks {
            c = b.forward(f, &c, t_emb)?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_core::standard_normal;
    use crate::params::ParamStore;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize, modulator_depth: usize) -> FaConfig {
        FaConfig {
            patch: 4,
            depth,
            modulator_depth,
            heads: 2,
            dim: 16,
            use_modulator: true,
        }
    }

    fn inputs(dtype: DType) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dev = Device::Cpu;
        (
            standard_normal((2, 8, 8, 8), &mut rng, dtype, &dev).unwrap(),
            standard_normal((2, 8, 8, 8), &mut rng, dtype, &dev).unwrap(),
            standard_normal((2, 8), &mut rng, dtype, &dev).unwrap(),
        )
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn modulator_mask_range_shape_determinism() {
        let s = ParamStore::new(1, DType::F32, &Device::Cpu);
        let block = FaBlock::new(8, 8, &cfg(1, 2), &s.root()).unwrap();
        let (f, c, t) = inputs(DType::F32);
        let a = block.trace(&f, &c, &t).unwrap();
        let mask = a.mask.as_ref().unwrap();
        assert_eq!(mask.0.dims(), &[2, 4, 16]);
        assert!(flat(&mask.0).iter().all(|&m| m > 0.0 && m < 1.0));
        let b = block.trace(&f, &c, &t).unwrap();
        assert_eq!(flat(&mask.0), flat(&b.mask.unwrap().0));
        for (m, u) in flat(&a.modulated.tokens).iter().zip(flat(&a.fused.tokens)) {
            assert!(m.abs() <= u.abs());
        }
    }

    #[test]
    fn output_shape_and_depth() {
        let s = ParamStore::new(2, DType::F32, &Device::Cpu);
        let fa = FaAttention::new(8, 8, (8, 8), &cfg(4, 2), &s.root()).unwrap();
        assert_eq!(fa.blocks().len(), 4);
        let (f, c, t) = inputs(DType::F32);
        assert_eq!(fa.forward(&f, &c, &t).unwrap().dims(), c.dims());
        let mut no_mod = cfg(2, 1);
        no_mod.use_modulator = false;
        let s = ParamStore::new(2, DType::F32, &Device::Cpu);
        let fa = FaAttention::new(8, 8, (8, 8), &no_mod, &s.root()).unwrap();
        assert_eq!(fa.forward(&f, &c, &t).unwrap().dims(), c.dims());
        assert!(FaAttention::new(8, 8, (6, 6), &cfg(1, 1), &s.root().pp("x")).is_err());
    }

    #[test]
    fn gradients_reach_both_inputs() {
        let s = ParamStore::new(3, DType::F64, &Device::Cpu);
        let fa = FaAttention::new(8, 8, (8, 8), &cfg(2, 1), &s.root()).unwrap();
        let (f, c, t) = inputs(DType::F64);
        let (fv, cv) = (Var::from_tensor(&f).unwrap(), Var::from_tensor(&c).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = standard_normal((2, 8, 8, 8), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let out = fa.forward(fv.as_tensor(), cv.as_tensor(), &t).unwrap();
        let readout = (out * w).unwrap().sum_all().unwrap();
        let grads = readout.backward().unwrap();
        for v in [&fv, &cv] {
            let g: Vec<f64> = grads.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(g.iter().all(|x| x.is_finite()));
            assert!(g.iter().any(|x| x.abs() > 0.0));
        }
    }

    #[test]
    fn parameter_count_affine_in_depths() {
        let count = |n: usize, r: usize| {
            let s = ParamStore::new(0, DType::F32, &Device::Cpu);
            FaAttention::new(8, 8, (8, 8), &cfg(n, r), &s.root()).unwrap();
            s.num_params() as i64
        };
        let block = count(2, 1) - count(1, 1);
        let modulator_block = count(1, 2) - count(1, 1);
        assert!(block > 0 && modulator_block > 0);
        assert_eq!(count(4, 1), count(1, 1) + 3 * block);
        // each of the N blocks owns its own R modulator blocks
        assert_eq!(count(3, 3), count(3, 1) + 3 * 2 * modulator_block);
    }
}
