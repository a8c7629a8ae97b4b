use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;

use super::write_mask;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::Tensor;

/// Maps RGB colours of an external mask format to class indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Palette {
    pub colors: HashMap<[u8; 3], u8>,
}

/// Parses lines of `R G B index`; blank lines and `#` comments are skipped.
pub fn parse_palette(text: &str) -> Result<Palette> {
    let mut colors = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<u8>> =
            (fields.len() == 4).then(|| fields.iter().map(|f| f.parse().ok()).collect()).flatten();
        let Some(v) = parsed else {
            return Err(Error::Config(format!("palette line {}: expected `R G B index`, got {line:?}", n + 1)));
        };
        if colors.insert([v[0], v[1], v[2]], v[3]).is_some() {
            return Err(Error::Config(format!("palette line {}: colour {:?} listed twice", n + 1, &v[..3])));
        }
    }
    if colors.is_empty() {
        return Err(Error::Config("palette is empty".into()));
    }
    Ok(Palette { colors })
}

impl Palette {
    /// Index mask of `rgb`; colours not in the palette become [`IGNORE`].
    pub fn apply(&self, rgb: &RgbImage) -> (LabelMap, u64) {
        let mut unmapped = 0;
        let data = rgb
            .pixels()
            .map(|p| {
                self.colors.get(&p.0).copied().unwrap_or_else(|| {
                    unmapped += 1;
                    IGNORE
                })
            })
            .collect();
        let map = LabelMap::single(rgb.height() as usize, rgb.width() as usize, data).expect("nonzero extents");
        (map, unmapped)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConversionSummary {
    pub files: usize,
    pub unmapped_pixels: u64,
}

/// Converts every PNG in `src` to an index mask of the same name in `dst`.
pub fn convert_masks(src: &Path, dst: &Path, palette: &Palette) -> Result<ConversionSummary> {
    std::fs::create_dir_all(dst)?;
    let mut paths: Vec<_> = std::fs::read_dir(src)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true));
    paths.sort();
    let mut summary = ConversionSummary::default();
    for path in paths {
        let rgb = image::open(&path)?.to_rgb8();
        let (mask, unmapped) = palette.apply(&rgb);
        write_mask(&dst.join(path.file_name().expect("file path")), &mask)?;
        summary.files += 1;
        summary.unmapped_pixels += unmapped;
    }
    Ok(summary)
}

/// Fixed overlay colour per class index; indices past the table cycle.
pub const CLASS_COLORS: [[u8; 3]; 10] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [220, 20, 60],
    [250, 170, 30],
    [107, 142, 35],
    [70, 130, 180],
    [0, 0, 142],
    [153, 153, 153],
    [255, 255, 0],
];

pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE {
        [0, 0, 0]
    } else {
        CLASS_COLORS[class as usize % CLASS_COLORS.len()]
    }
}

/// Colour-coded mask blended over `image` (`[3,H,W]` in [0,1]) with equal
/// weight; `image = None` gives the bare colour map.
pub fn colorize(mask: &LabelMap, image: Option<&Tensor<f32>>) -> Result<RgbImage> {
    let [_, h, w] = mask.shape();
    if let Some(img) = image {
        if img.shape() != [3, h, w] {
            return Err(Error::Dimension(format!("overlay image {:?} does not match mask {h}x{w}", img.shape())));
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (p, px) in out.pixels_mut().enumerate() {
        let color = class_color(mask.data()[p]);
        for c in 0..3 {
            px.0[c] = match image {
                Some(img) => {
                    let base = img.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0;
                    ((base + color[c] as f32) / 2.0).round() as u8
                }
                None => color[c],
            };
        }
    }
    Ok(out)
}
