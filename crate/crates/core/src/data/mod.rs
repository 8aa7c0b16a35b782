//! Label maps, the signed one-hot mask encoding, dataset I/O and the
//! synthetic shapes generator.

mod io;
mod synthetic;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    class_color, load_dataset, read_image, read_label_png, resize_labels, write_image_png,
    write_indexed_png, write_label_png, write_overlay_png, DatasetManifest, MANIFEST_FILE,
};
pub use synthetic::{generate_synthetic, render_case, ShapeKind, SyntheticSpec};

/// Integer class map stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Indicator mask of one class.
    pub fn binary(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let m = self.max_label() as usize;
        if m >= num_classes {
            return Err(Error::Data(format!("label {m} outside [0, {num_classes})")));
        }
        Ok(())
    }

    /// `[H, W]` u32 tensor.
    pub fn to_tensor(&self, dev: &Device) -> Result<Tensor> {
        let v: Vec<u32> = self.data.iter().map(|&x| x as u32).collect();
        Ok(Tensor::from_vec(v, (self.height, self.width), dev)?)
    }
}

/// Boolean mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Signed one-hot: channel `k` is `+1` where the label is `k`, else `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEncoding {
    pub num_classes: usize,
}

impl MaskEncoding {
    pub const LOW: f32 = -1.0;
    pub const HIGH: f32 = 1.0;

    pub fn new(num_classes: usize) -> Result<Self> {
        if !(2..=256).contains(&num_classes) {
            return Err(Error::Config(format!("num_classes must be in [2, 256], got {num_classes}")));
        }
        Ok(Self { num_classes })
    }

    pub fn channels(&self) -> usize {
        self.num_classes
    }

    /// `[K, H, W]` f32 encoding.
    pub fn encode(&self, labels: &LabelMap, dev: &Device) -> Result<Tensor> {
        labels.validate(self.num_classes)?;
        let (h, w) = labels.dims();
        let mut out = vec![Self::LOW; self.num_classes * h * w];
        for (i, &l) in labels.data().iter().enumerate() {
            out[l as usize * h * w + i] = Self::HIGH;
        }
        Ok(Tensor::from_vec(out, (self.num_classes, h, w), dev)?)
    }

    /// `[B, K, H, W]` encoding of a batch of equally sized maps.
    pub fn encode_batch(&self, labels: &[&LabelMap], dev: &Device) -> Result<Tensor> {
        let parts = labels
            .iter()
            .map(|l| self.encode(l, dev))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    }

    /// Per-pixel argmax over channels of `[K, H, W]`; ties go to the lowest index.
    pub fn decode(&self, x: &Tensor) -> Result<LabelMap> {
        let (k, h, w) = x.dims3()?;
        if k != self.num_classes {
            return Err(Error::Contract(format!(
                "decoding expects {} channels, got {k}",
                self.num_classes
            )));
        }
        let v: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = h * w;
        let data = (0..n)
            .map(|i| {
                let mut best = 0usize;
                for c in 1..k {
                    if v[c * n + i] > v[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, data)
    }

    pub fn decode_batch(&self, x: &Tensor) -> Result<Vec<LabelMap>> {
        let b = x.dim(0)?;
        (0..b).map(|i| self.decode(&x.get(i)?)).collect()
    }
}

/// One image and its label map.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]` f32 in `[-1, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Samples plus the metadata recorded alongside them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Stacked `[B, C, H, W]` images, `[B, H, W]` labels for the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &self.samples[i].image).collect();
        let dev = imgs
            .first()
            .map(|t| t.device().clone())
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let labels = idx
            .iter()
            .map(|&i| self.samples[i].labels.to_tensor(&dev))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&imgs, 0)?, Tensor::stack(&labels, 0)?))
    }
}
