//! Dataset layout, loading, augmentation and the synthetic terrain set.
//!
//! A dataset root holds `images/*.png`, `masks/*.png` (same stems) and
//! `classes.txt` with one class name per line. Masks are 8-bit single
//! channel images whose values are class indices, 255 meaning ignore.

mod augment;
mod manifest;
mod palette;
pub mod synth;

pub use augment::{augment, flip_horizontal, scale_sample, AugmentPolicy};
pub use manifest::{
    class_frequency, load_manifest, oversample_rare, DatasetManifest, ManifestEntry, ManifestOptions, Split,
};
pub use palette::{class_color, colorize, convert_masks, parse_palette, ConversionSummary, Palette, CLASS_COLORS};

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// An image `[3,H,W]` in [0,1] with its `[1,H,W]` label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: LabelMap) -> Result<Self> {
        let s = image.shape();
        let [n, h, w] = mask.shape();
        if s.len() != 3 || s[0] != 3 || n != 1 || s[1] != h || s[2] != w {
            return Err(Error::Dimension(format!("image {s:?} and mask {:?} are not congruent", mask.shape())));
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn extent(&self) -> (usize, usize) {
        let [_, h, w] = self.mask.shape();
        (h, w)
    }
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: LabelMap,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn stack(samples: &[SegmentationSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = first.extent();
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        for s in samples {
            if s.extent() != (h, w) {
                return Err(Error::Data(format!(
                    "sample {} is {:?} but the batch is {h}x{w}; set a crop size to batch mixed extents",
                    s.id,
                    s.extent()
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        let masks: Vec<&LabelMap> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            images: Tensor::new(&[samples.len(), 3, h, w], data)?,
            masks: LabelMap::stack(&masks)?,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

/// Reads an image as RGB in [0,1]; grayscale input is replicated to three
/// channels.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let rgb = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor<f32> {
    rgb_to_tensor_raw(rgb.as_raw(), rgb.height() as usize, rgb.width() as usize).expect("nonzero image extents")
}

/// `[3,H,W]` tensor in [0,1] from interleaved 8-bit RGB.
pub fn rgb_to_tensor_raw(raw: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    if raw.len() != 3 * h * w {
        return Err(Error::Dimension(format!("{} bytes for a {h}x{w} RGB image", raw.len())));
    }
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `[3,H,W]` tensor in [0,1] to 8-bit RGB.
pub fn tensor_to_rgb(image: &Tensor<f32>) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected a [3,H,W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let raw = (0..h * w * 3).map(|i| (d[(i % 3) * h * w + i / 3].clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches extents"))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    tensor_to_rgb(image)?.save(path)?;
    Ok(())
}

/// Reads an 8-bit single-channel index mask.
pub fn read_mask(path: &Path) -> Result<LabelMap> {
    match image::open(path)? {
        DynamicImage::ImageLuma8(g) => decode_mask(&g),
        other => Err(Error::Data(format!(
            "mask {} must be 8-bit single-channel, found {:?}; convert it with convert-masks",
            path.display(),
            other.color()
        ))),
    }
}

pub fn decode_mask(g: &GrayImage) -> Result<LabelMap> {
    LabelMap::single(g.height() as usize, g.width() as usize, g.as_raw().clone())
}

/// Encodes the first map of `mask` as an 8-bit grayscale image.
pub fn encode_mask(mask: &LabelMap) -> GrayImage {
    let [_, h, w] = mask.shape();
    GrayImage::from_raw(w as u32, h as u32, mask.data()[..h * w].to_vec()).expect("buffer matches extents")
}

pub fn write_mask(path: &Path, mask: &LabelMap) -> Result<()> {
    encode_mask(mask).save(path)?;
    Ok(())
}

/// Reads `classes.txt`: one name per non-empty line.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read class list {}: {e}", path.display())))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.len() < 2 || names.len() > 255 {
        return Err(Error::Manifest(format!("{} lists {} classes; need 2..=255", path.display(), names.len())));
    }
    Ok(names)
}

pub fn load_sample(entry: &ManifestEntry) -> Result<SegmentationSample> {
    SegmentationSample::new(entry.id.clone(), read_image(&entry.image_path)?, read_mask(&entry.mask_path)?)
}
