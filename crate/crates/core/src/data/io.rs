use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelMap, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub resolution: usize,
    #[serde(default = "one")]
    pub image_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<super::SyntheticSpec>,
}

fn one() -> usize {
    1
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        self.write_as(&path)?;
        Ok(path)
    }

    pub fn write_as(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Reads an 8-bit PNG, resizes it bilinearly to `resolution` and maps it to
/// `[C, H, W]` values in `[-1, 1]`.
pub fn read_image(path: &Path, resolution: usize, channels: usize, dev: &Device) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let r = resolution as u32;
    let data: Vec<f32> = match channels {
        1 => {
            let g = img.into_luma8();
            let g = if g.dimensions() == (r, r) { g } else { imageops::resize(&g, r, r, FilterType::Triangle) };
            g.into_raw().into_iter().map(normalize).collect()
        }
        3 => {
            let c = img.into_rgb8();
            let c = if c.dimensions() == (r, r) { c } else { imageops::resize(&c, r, r, FilterType::Triangle) };
            // interleaved to planar
            let raw = c.into_raw();
            (0..3)
                .flat_map(|ch| raw.iter().skip(ch).step_by(3).map(|&v| normalize(v)).collect::<Vec<_>>())
                .collect()
        }
        n => return Err(Error::Config(format!("image channels must be 1 or 3, got {n}"))),
    };
    Ok(Tensor::from_vec(data, (channels, resolution, resolution), dev)?)
}

fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Reads an 8-bit grayscale or palette PNG as raw class indices.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(bad(format!(
            "masks must be 8-bit grayscale or indexed, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().copied())
        .collect();
    LabelMap::new(h, w, data)
}

/// Nearest-neighbour resize; only labels present in the source can appear.
pub fn resize_labels(labels: &LabelMap, resolution: usize) -> Result<LabelMap> {
    if labels.dims() == (resolution, resolution) {
        return Ok(labels.clone());
    }
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.data().to_vec())
        .ok_or_else(|| Error::Contract("label buffer size".into()))?;
    let r = resolution as u32;
    LabelMap::new(resolution, resolution, imageops::resize(&img, r, r, FilterType::Nearest).into_raw())
}

/// Class indices as an 8-bit grayscale PNG.
pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.data().to_vec())
        .ok_or_else(|| Error::Contract("label buffer size".into()))?;
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Fixed colour for each class index.
pub fn class_color(c: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    match BASE.get(c as usize) {
        Some(rgb) => *rgb,
        None => {
            let h = (c as u32).wrapping_mul(2654435761);
            [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
        }
    }
}

/// Class indices as a palette PNG; the stored indices are the labels.
pub fn write_indexed_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let n = labels.max_label() as usize + 1;
    enc.set_palette((0..n).flat_map(|c| class_color(c as u8)).collect::<Vec<u8>>());
    let err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(labels.data()).map_err(err)?;
    w.finish().map_err(err)
}

/// `[C, H, W]` image in `[-1, 1]` blended with the class colours of `labels`.
pub fn write_overlay_png(path: &Path, image: &Tensor, labels: &LabelMap, alpha: f32) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if (h, w) != labels.dims() {
        return Err(Error::Contract("overlay image and labels differ in size".into()));
    }
    let v: Vec<f32> = image.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let n = h * w;
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let l = labels.data()[i];
        let color = class_color(l);
        for ch in 0..3 {
            let base = (v[(ch % c) * n + i] + 1.0) * 127.5;
            let a = if l == 0 { 0.0 } else { alpha };
            px.0[ch] = ((1.0 - a) * base + a * color[ch] as f32).round().clamp(0.0, 255.0) as u8;
        }
    }
    out.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes a `[C, H, W]` image in `[-1, 1]` as an 8-bit PNG.
pub fn write_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    let v: Vec<f32> = image.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let q = |x: f32| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    let res = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, v.iter().map(|&x| q(x)).collect())
            .map(image::DynamicImage::ImageLuma8),
        3 => {
            let n = h * w;
            let raw = (0..n).flat_map(|i| (0..3).map(move |ch| (ch, i))).map(|(ch, i)| q(v[ch * n + i])).collect();
            RgbImage::from_raw(w as u32, h as u32, raw).map(image::DynamicImage::ImageRgb8)
        }
        _ => None,
    }
    .ok_or_else(|| Error::Contract(format!("cannot write a {c}-channel image")))?;
    res.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

/// Loads `root/{images,masks}/<id>.png` pairs in lexicographic id order.
/// Without a manifest, the class count is inferred from the largest label.
pub fn load_dataset(dir: &Path, resolution: usize, dev: &Device) -> Result<Dataset> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    let imgs = png_stems(&img_dir)?;
    let masks = png_stems(&mask_dir)?;
    let unmatched: Vec<String> = imgs
        .symmetric_difference(&masks)
        .map(|s| {
            let side = if imgs.contains(s) { "mask" } else { "image" };
            format!("{s} (no {side})")
        })
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Data(format!("unmatched cases: {}", unmatched.join(", "))));
    }
    let declared = if dir.join(MANIFEST_FILE).exists() {
        Some(DatasetManifest::read(dir)?)
    } else {
        None
    };
    let channels = declared.as_ref().map_or(1, |m| m.image_channels);
    let mut samples = Vec::with_capacity(imgs.len());
    for id in &imgs {
        let image = read_image(&img_dir.join(format!("{id}.png")), resolution, channels, dev)?;
        let mask_path = mask_dir.join(format!("{id}.png"));
        let labels = resize_labels(&read_label_png(&mask_path)?, resolution)?;
        samples.push(Sample {
            id: id.clone(),
            image,
            labels,
        });
    }
    let num_classes = match &declared {
        Some(m) => m.num_classes,
        None => (samples.iter().map(|s| s.labels.max_label() as usize).max().unwrap_or(0) + 1).max(2),
    };
    for s in &samples {
        s.labels
            .validate(num_classes)
            .map_err(|e| Error::Data(format!("case {}: {e}", s.id)))?;
    }
    let manifest = DatasetManifest {
        num_classes,
        resolution,
        image_channels: channels,
        seed: declared.as_ref().and_then(|m| m.seed),
        synthetic: declared.and_then(|m| m.synthetic),
    };
    Ok(Dataset { samples, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_png_round_trip_keeps_indices() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let p = dir.path().join("m.png");
        write_indexed_png(&p, &l).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), l);
        write_label_png(&p, &l).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), l);
    }

    #[test]
    fn nearest_resize_keeps_label_set() {
        let l = LabelMap::new(3, 3, vec![0, 1, 1, 2, 2, 1, 0, 0, 2]).unwrap();
        for r in [2, 5, 8, 13] {
            let out = resize_labels(&l, r).unwrap();
            assert!(out.data().iter().all(|v| [0, 1, 2].contains(v)));
        }
    }

    #[test]
    fn loads_sorted_pairs_and_names_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        let img = Tensor::zeros((1, 4, 4), candle_core::DType::F32, &Device::Cpu).unwrap();
        for id in ["c", "a", "b"] {
            write_image_png(&root.join(format!("images/{id}.png")), &img).unwrap();
            write_label_png(&root.join(format!("masks/{id}.png")), &LabelMap::filled(4, 4, 1)).unwrap();
        }
        let ds = load_dataset(root, 4, &Device::Cpu).unwrap();
        let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ds.num_classes(), 2);
        write_image_png(&root.join("images/orphan.png"), &img).unwrap();
        match load_dataset(root, 4, &Device::Cpu) {
            Err(Error::Data(m)) => assert!(m.contains("orphan")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("images")).unwrap();
        fs::create_dir_all(root.join("masks")).unwrap();
        let img = Tensor::zeros((1, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        write_image_png(&root.join("images/x.png"), &img).unwrap();
        write_label_png(&root.join("masks/x.png"), &LabelMap::filled(2, 2, 5)).unwrap();
        DatasetManifest {
            num_classes: 3,
            resolution: 2,
            image_channels: 1,
            seed: None,
            synthetic: None,
        }
        .write(root)
        .unwrap();
        assert!(matches!(load_dataset(root, 2, &Device::Cpu), Err(Error::Data(_))));
    }
}
