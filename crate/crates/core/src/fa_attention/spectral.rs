//! 2-D discrete Fourier transform of feature maps, computed as dense matrix
//! products so that it is differentiable with the rest of the graph.
//!
//! Complex maps are stored channel-concatenated: the first `C` channels hold
//! the real part, the last `C` the imaginary part.

use std::f64::consts::PI;

use candle_core::{Device, DType, Tensor};

use crate::error::{contract, Error, Result};

/// Real/imaginary spectrum of a `C`-channel map, as `[B, 2C, h, w]`.
#[derive(Debug, Clone)]
pub struct SpectralFeature(pub Tensor);

impl SpectralFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn real(&self) -> Result<Tensor> {
        let c = self.0.dim(1)? / 2;
        Ok(self.0.narrow(1, 0, c)?)
    }

    pub fn imag(&self) -> Result<Tensor> {
        let c = self.0.dim(1)? / 2;
        Ok(self.0.narrow(1, c, c)?)
    }
}

/// What to do with the imaginary part left over by the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImagResidue {
    /// Fail with a numeric error if any `|imag|` exceeds the bound.
    Check(f64),
    Discard,
}

fn dft_mats(n: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for k in 0..n {
        for m in 0..n {
            // reduce k*m mod n first so large sizes keep full angle precision
            let a = 2.0 * PI * ((k * m) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    let c = Tensor::from_vec(c, (n, n), dev)?.to_dtype(dtype)?;
    let s = Tensor::from_vec(s, (n, n), dev)?.to_dtype(dtype)?;
    Ok((c, s))
}

/// `L x R` on the last two axes, with `L` and `R` plain matrices.
fn sandwich(l: &Tensor, x: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(l.broadcast_matmul(&x.contiguous()?.broadcast_matmul(r)?)?)
}

/// Per-channel 2-D DFT, `X[k, l] = sum x[m, n] exp(-2 pi i (km/h + ln/w))`.
pub fn to_frequency(f: &Tensor) -> Result<SpectralFeature> {
    let (_, _, h, w) = f.dims4()?;
    let (ch, sh) = dft_mats(h, f.dtype(), f.device())?;
    let (cw, sw) = dft_mats(w, f.dtype(), f.device())?;
    let re = (sandwich(&ch, f, &cw)? - sandwich(&sh, f, &sw)?)?;
    let im = (sandwich(&sh, f, &cw)? + sandwich(&ch, f, &sw)?)?.neg()?;
    Ok(SpectralFeature(Tensor::cat(&[&re, &im], 1)?))
}

/// Inverse 2-D DFT, keeping the real part.
pub fn from_frequency(s: &SpectralFeature, residue: ImagResidue) -> Result<Tensor> {
    let (_, c2, h, w) = s.0.dims4()?;
    if c2 % 2 != 0 {
        return Err(contract(format!(
            "spectral feature needs an even channel count, got {c2}"
        )));
    }
    let a = s.real()?;
    let b = s.imag()?;
    let (ch, sh) = dft_mats(h, a.dtype(), a.device())?;
    let (cw, sw) = dft_mats(w, a.dtype(), a.device())?;
    let scale = 1.0 / (h * w) as f64;
    let re = (((sandwich(&ch, &a, &cw)? - sandwich(&sh, &a, &sw)?)?
        - sandwich(&ch, &b, &sw)?)?
        - sandwich(&sh, &b, &cw)?)?;
    let re = (re * scale)?;
    if let ImagResidue::Check(bound) = residue {
        let im = (((sandwich(&ch, &a, &sw)? + sandwich(&sh, &a, &cw)?)?
            + sandwich(&ch, &b, &cw)?)?
            - sandwich(&sh, &b, &sw)?)?;
        let worst = (im * scale)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        // negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(worst < bound) {
            return Err(Error::Numeric {
                step: 0,
                msg: format!("inverse transform left imaginary residue {worst:e} > {bound:e}"),
            });
        }
    }
    Ok(re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_core::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn constant_map_spectrum() {
        let x = Tensor::full(0.75f64, (1, 2, 4, 6), &Device::Cpu).unwrap();
        let s = to_frequency(&x).unwrap();
        let re = flat(&s.real().unwrap());
        let im = flat(&s.imag().unwrap());
        for (i, v) in re.iter().enumerate() {
            let want = if i % 24 == 0 { 0.75 * 24.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "bin {i}: {v}");
        }
        assert!(im.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut v = vec![0.0f64; 25];
        v[0] = 1.0;
        let x = Tensor::from_vec(v, (1, 1, 5, 5), &Device::Cpu).unwrap();
        let s = to_frequency(&x).unwrap();
        assert!(flat(&s.real().unwrap()).iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(flat(&s.imag().unwrap()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_direct_dft_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal((1, 1, 3, 4), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let xv = flat(&x);
        let s = to_frequency(&x).unwrap();
        let (re, im) = (flat(&s.real().unwrap()), flat(&s.imag().unwrap()));
        for k in 0..3 {
            for l in 0..4 {
                let (mut a, mut b) = (0.0, 0.0);
                for m in 0..3 {
                    for n in 0..4 {
                        let ang = -2.0 * PI * (k as f64 * m as f64 / 3.0 + l as f64 * n as f64 / 4.0);
                        a += xv[m * 4 + n] * ang.cos();
                        b += xv[m * 4 + n] * ang.sin();
                    }
                }
                assert!((re[k * 4 + l] - a).abs() < 1e-12);
                assert!((im[k * 4 + l] - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_every_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(1, 1), (2, 2), (4, 4), (8, 8), (5, 7), (16, 16), (32, 32)] {
            for dtype in [DType::F32, DType::F64] {
                let x = standard_normal((2, 3, h, w), &mut rng, dtype, &Device::Cpu).unwrap();
                let back = from_frequency(&to_frequency(&x).unwrap(), ImagResidue::Check(1e-4)).unwrap();
                let err = flat(&x)
                    .iter()
                    .zip(flat(&back))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err <= 1e-5, "{h}x{w} {dtype:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_spectrum_and_linearity() {
        let z = SpectralFeature(Tensor::zeros((1, 4, 4, 4), DType::F64, &Device::Cpu).unwrap());
        assert!(flat(&from_frequency(&z, ImagResidue::Discard).unwrap()).iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1 = standard_normal((1, 4, 4, 4), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let s2 = standard_normal((1, 4, 4, 4), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let (a, b) = (0.3, -1.7);
        let mix = ((&s1 * a).unwrap() + (&s2 * b).unwrap()).unwrap();
        let lhs = from_frequency(&SpectralFeature(mix), ImagResidue::Discard).unwrap();
        let r1 = from_frequency(&SpectralFeature(s1), ImagResidue::Discard).unwrap();
        let r2 = from_frequency(&SpectralFeature(s2), ImagResidue::Discard).unwrap();
        let rhs = ((r1 * a).unwrap() + (r2 * b).unwrap()).unwrap();
        for (p, q) in flat(&lhs).iter().zip(flat(&rhs)) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn non_hermitian_spectrum_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = standard_normal((1, 2, 4, 4), &mut rng, DType::F64, &Device::Cpu).unwrap();
        let err = from_frequency(&SpectralFeature(s.clone()), ImagResidue::Check(1e-4)).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert!(from_frequency(&SpectralFeature(s), ImagResidue::Discard).is_ok());
        let odd = SpectralFeature(Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap());
        assert!(from_frequency(&odd, ImagResidue::Discard).is_err());
    }
}
