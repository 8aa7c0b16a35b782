use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::write_label_png;
use super::{DatasetManifest, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Ring,
    Rectangle,
}

/// Generator settings. Every foreground class gets one shape per image and a
/// fixed intensity level, so the class is recoverable from the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub shapes: Vec<ShapeKind>,
    /// Standard deviation of additive Gaussian noise on `[0, 1]` intensities.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 64,
            resolution: 64,
            num_classes: 3,
            shapes: vec![ShapeKind::Disk, ShapeKind::Ring, ShapeKind::Rectangle],
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution must be >= 16, got {}", self.resolution)));
        }
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic num_classes must be in [2, 8], got {}",
                self.num_classes
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary is empty".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Mean intensity of a class in `[0, 1]`.
    pub fn level(&self, class: u8) -> f64 {
        0.15 + 0.7 * class as f64 / (self.num_classes - 1) as f64
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Ring { cy: f64, cx: f64, r: f64, inner: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn draw<R: Rng>(kind: ShapeKind, res: f64, rng: &mut R) -> Self {
        match kind {
            ShapeKind::Disk => {
                let r = rng.random_range(0.1 * res..0.2 * res);
                let (cy, cx) = center(r, r, res, rng);
                Shape::Disk { cy, cx, r }
            }
            ShapeKind::Ring => {
                let r = rng.random_range(0.12 * res..0.2 * res);
                let (cy, cx) = center(r, r, res, rng);
                Shape::Ring { cy, cx, r, inner: 0.5 * r }
            }
            ShapeKind::Rectangle => {
                let hy = rng.random_range(0.08 * res..0.18 * res);
                let hx = rng.random_range(0.08 * res..0.18 * res);
                let (cy, cx) = center(hy, hx, res, rng);
                Shape::Rect { cy, cx, hy, hx }
            }
        }
    }

    /// Whether the pixel centred at `(y + 0.5, x + 0.5)` lies inside.
    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Ring { cy, cx, r, inner } => {
                let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                d2 <= r * r && d2 > inner * inner
            }
            Shape::Rect { cy, cx, hy, hx } => (py - cy).abs() <= hy && (px - cx).abs() <= hx,
        }
    }
}

fn center<R: Rng>(hy: f64, hx: f64, res: f64, rng: &mut R) -> (f64, f64) {
    let m = 2.0;
    (
        rng.random_range(hy + m..res - hy - m),
        rng.random_range(hx + m..res - hx - m),
    )
}

/// Renders one case: `[0, 1]` intensities (row-major) and the label map.
pub fn render_case<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<(Vec<f64>, LabelMap)> {
    let n = spec.resolution;
    let mut labels = LabelMap::filled(n, n, 0);
    for class in 1..spec.num_classes as u8 {
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut shape = Shape::draw(kind, n as f64, rng);
        // prefer placements that keep a one-pixel gap to earlier shapes
        for _ in 0..50 {
            if !touches(&shape, &labels) {
                break;
            }
            shape = Shape::draw(kind, n as f64, rng);
        }
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y, x) {
                    labels.set(y, x, class);
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let pixels = labels
        .data()
        .iter()
        .map(|&c| {
            let e = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            (spec.level(c) + e).clamp(0.0, 1.0)
        })
        .collect();
    Ok((pixels, labels))
}

fn touches(shape: &Shape, labels: &LabelMap) -> bool {
    let (h, w) = labels.dims();
    for y in 0..h {
        for x in 0..w {
            if shape.contains(y, x) {
                let y0 = y.saturating_sub(1);
                let x0 = x.saturating_sub(1);
                for yy in y0..(y + 2).min(h) {
                    for xx in x0..(x + 2).min(w) {
                        if labels.get(yy, xx) != 0 {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}

/// Writes `count` cases plus a manifest under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let img_dir = out.join("images");
    let mask_dir = out.join("masks");
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.resolution as u32;
    for i in 0..spec.count {
        let (pixels, labels) = render_case(spec, &mut rng)?;
        let id = format!("case_{i:04}");
        let raw = pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = GrayImage::from_raw(n, n, raw).ok_or_else(|| Error::Contract("image buffer".into()))?;
        let p = img_dir.join(format!("{id}.png"));
        img.save(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        write_label_png(&mask_dir.join(format!("{id}.png")), &labels)?;
    }
    let manifest = DatasetManifest {
        num_classes: spec.num_classes,
        resolution: spec.resolution,
        image_channels: 1,
        seed: Some(spec.seed),
        synthetic: Some(spec.clone()),
    };
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_pixel_count_near_area() {
        for r in [5.0, 8.3, 12.0, 20.5] {
            let s = Shape::Disk { cy: 32.0, cx: 31.7, r };
            let count = (0..64).flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| s.contains(y, x)).count();
            let area = std::f64::consts::PI * r * r;
            assert!((count as f64 - area).abs() <= 4.0 * r, "r={r} count={count} area={area}");
        }
    }

    #[test]
    fn noiseless_images_match_levels() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (px, labels) = render_case(&spec, &mut rng).unwrap();
        for (v, &c) in px.iter().zip(labels.data()) {
            assert_eq!(*v, spec.level(c));
        }
        for c in 0..3 {
            assert!(labels.data().contains(&c));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SyntheticSpec { count: 0, ..Default::default() },
            SyntheticSpec { resolution: 8, ..Default::default() },
            SyntheticSpec { shapes: vec![], ..Default::default() },
            SyntheticSpec { noise: -1.0, ..Default::default() },
        ];
        for s in bad {
            assert!(matches!(s.validate(), Err(Error::Config(_))));
        }
    }
}
