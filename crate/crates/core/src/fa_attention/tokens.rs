use candle_core::{Device, DType, Tensor};

use crate::error::{contract, Error, Result};
use crate::params::{Init, Params};

/// Patch tokens `[B, L, D]` laid out row-major over a `rows x cols` grid.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub patch: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    /// Same grid, new token values.
    pub fn with_tokens(&self, tokens: Tensor) -> TokenSequence {
        TokenSequence {
            tokens,
            grid: self.grid,
            patch: self.patch,
        }
    }
}

/// Non-overlapping `P x P` patches flattened and projected to `D`.
///
/// The inverse applies the transposed projection after removing the bias,
/// so it is an exact inverse whenever the projection has orthonormal columns.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    patch: usize,
    dim: usize,
}

impl PatchEmbed {
    pub fn new(in_channels: usize, patch: usize, dim: usize, p: &Params) -> Result<Self> {
        let fan_in = in_channels * patch * patch;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(in_channels, patch, dim, Init::Uniform(bound), p)
    }

    pub fn with_init(
        in_channels: usize,
        patch: usize,
        dim: usize,
        init: Init,
        p: &Params,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let fan_in = in_channels * patch * patch;
        Ok(Self {
            weight: p.get(&[dim, fan_in], "weight", init)?,
            bias: p.get(&[dim], "bias", Init::Zeros)?,
            in_channels,
            patch,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, f: &Tensor) -> Result<TokenSequence> {
        let (b, c, h, w) = f.dims4()?;
        let p = self.patch;
        if c != self.in_channels {
            return Err(contract(format!(
                "patch embedding built for {} channels, got {c}",
                self.in_channels
            )));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} is not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = f
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = patches
            .broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        Ok(TokenSequence {
            tokens,
            grid: (gh, gw),
            patch: p,
        })
    }

    pub fn invert(&self, t: &TokenSequence) -> Result<Tensor> {
        let (b, l, d) = t.tokens.dims3()?;
        if d != self.dim || l != t.len() || t.patch != self.patch {
            return Err(contract(format!(
                "inverse patch embedding: tokens [{b}, {l}, {d}] with patch {} do not fit dim {} patch {}",
                t.patch, self.dim, self.patch
            )));
        }
        let (gh, gw) = t.grid;
        let (c, p) = (self.in_channels, self.patch);
        let patches = t
            .tokens
            .broadcast_sub(&self.bias)?
            .broadcast_matmul(&self.weight)?;
        Ok(patches
            .reshape((b, gh, gw, c, p, p))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, c, gh * p, gw * p))?)
    }
}

/// Fixed 2-D sinusoidal encoding `[rows * cols, dim]`: the first half of the
/// features encode the row index, the second half the column index.
pub fn positional_encoding_2d(
    rows: usize,
    cols: usize,
    dim: usize,
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2-D positional encoding needs dim divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let quarter = half / 2;
    let freq: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for (pos, _) in [(r, 0), (c, 1)] {
                for f in &freq {
                    out.push((pos as f64 * f).sin());
                }
                for f in &freq {
                    out.push((pos as f64 * f).cos());
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (rows * cols, dim), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_core::standard_normal;
    use crate::params::ParamStore;
    use rand::SeedableRng;

    fn map(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        standard_normal(shape, &mut rng, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn token_counts() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let pe = PatchEmbed::new(3, 4, 16, &s.root().pp("a")).unwrap();
        let t = pe.embed(&map(1, (2, 3, 8, 8))).unwrap();
        assert_eq!(t.grid, (2, 2));
        assert_eq!(t.tokens.dims(), &[2, 4, 16]);
        assert_eq!(pe.invert(&t).unwrap().dims(), &[2, 3, 8, 8]);

        let pe = PatchEmbed::new(3, 8, 16, &s.root().pp("b")).unwrap();
        let t = pe.embed(&map(1, (2, 3, 8, 8))).unwrap();
        assert_eq!(t.len(), 1);

        let err = pe.embed(&map(1, (2, 3, 6, 6))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn patch_layout_is_row_major() {
        // identity projection exposes the raw patch vector
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let pe = PatchEmbed::with_init(1, 2, 4, Init::Zeros, &s.root()).unwrap();
        let eye = Tensor::eye(4, DType::F64, &Device::Cpu).unwrap();
        s.named_vars().iter().find(|(n, _)| n == "weight").unwrap().1.set(&eye).unwrap();
        let x = Tensor::arange(0.0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let t = pe.embed(&x).unwrap();
        let rows = t.tokens.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(rows[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(rows[2], vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn orthogonal_projection_round_trips() {
        let s = ParamStore::new(3, DType::F64, &Device::Cpu);
        // fan-in 2*2*2 = 8 <= dim 12, so the columns are orthonormal
        let pe = PatchEmbed::with_init(2, 2, 12, Init::Orthogonal, &s.root()).unwrap();
        let x = map(4, (2, 2, 8, 8));
        let back = pe.invert(&pe.embed(&x).unwrap()).unwrap();
        let err = (&x - &back)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn positional_encoding_rows_are_distinct() {
        let pe = positional_encoding_2d(3, 3, 8, DType::F64, &Device::Cpu).unwrap();
        let rows = pe.to_vec2::<f64>().unwrap();
        for i in 0..rows.len() {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
        assert!(positional_encoding_2d(2, 2, 6, DType::F64, &Device::Cpu).is_err());
    }
}
