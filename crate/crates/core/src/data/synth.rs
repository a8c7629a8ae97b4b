//! Synthetic terrain scenes: soil background, sand stripes, bedrock
//! ellipses and small dark "big rock" blobs held to a fixed pixel share.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_image, write_mask, SegmentationSample};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["soil", "sand", "bedrock", "big_rock"];
pub const RARE_CLASS: u8 = 3;

const BASE_COLORS: [[f32; 3]; 4] = [[0.62, 0.42, 0.28], [0.85, 0.74, 0.52], [0.42, 0.44, 0.48], [0.16, 0.13, 0.12]];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    /// Exact share of rare-class pixels over the whole set (rounded to a
    /// whole pixel count).
    pub rare_share: f64,
    /// Share of images that contain the rare class.
    pub rare_image_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 10, size: 128, rare_share: 0.02, rare_image_fraction: 0.5, noise: 0.04, seed: 0 }
    }
}

impl SynthConfig {
    /// Rare-class pixels the generated set contains.
    pub fn rare_quota(&self) -> usize {
        (self.rare_share * (self.count * self.size * self.size) as f64).round() as usize
    }
}

fn paint_ellipse(mask: &mut [u8], size: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64, class: u8) {
    let (s, c) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = (dx * c + dy * s) / rx;
            let v = (-dx * s + dy * c) / ry;
            if u * u + v * v <= 1.0 {
                mask[y * size + x] = class;
            }
        }
    }
}

/// Paints rare blobs until exactly `quota` pixels carry the rare class.
fn paint_rare(mask: &mut [u8], size: usize, quota: usize, rng: &mut ChaCha8Rng) {
    let mut painted = 0;
    while painted < quota {
        let r = rng.random_range(5.0..10.0);
        let cy = rng.random_range(r..size as f64 - r);
        let cx = rng.random_range(r..size as f64 - r);
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let cell = &mut mask[y * size + x];
                if painted < quota && dy * dy + dx * dx <= r * r && *cell != RARE_CLASS {
                    *cell = RARE_CLASS;
                    painted += 1;
                }
            }
        }
    }
}

fn layout(size: usize, rare_quota: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    let s = size as f64;
    if rng.random::<f64>() < 0.8 {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(0.2..0.35) * s;
        let width = period * rng.random_range(0.35..0.5);
        let phase = rng.random_range(0.0..period);
        let (sn, cs) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * cs + y as f64 * sn + phase).rem_euclid(period);
                if t < width {
                    mask[y * size + x] = 1;
                }
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let ry = rng.random_range(0.08..0.22) * s;
        let rx = rng.random_range(0.08..0.22) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let cx = rng.random_range(0.15..0.85) * s;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        paint_ellipse(&mut mask, size, cy, cx, ry, rx, angle, 2);
    }
    paint_rare(&mut mask, size, rare_quota, rng);
    mask
}

fn render(mask: &[u8], size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let jitter = rng.random_range(-0.05f32..0.05);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let mut data = vec![0.0f32; 3 * size * size];
    for (p, &class) in mask.iter().enumerate() {
        for c in 0..3 {
            let v = BASE_COLORS[class as usize][c] + jitter + normal.sample(rng) as f32;
            // quantize so in-memory samples equal their PNG round trip
            data[c * size * size + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Tensor::new(&[3, size, size], data)
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    if cfg.count == 0 || cfg.size < 32 {
        return Err(Error::Config(format!("synthetic set needs count >= 1 and size >= 32, got {cfg:?}")));
    }
    if !(0.0..0.2).contains(&cfg.rare_share) || !(0.0..=1.0).contains(&cfg.rare_image_fraction) {
        return Err(Error::Config("rare_share must lie in [0, 0.2) and rare_image_fraction in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quota = cfg.rare_quota();
    let carriers = if quota == 0 {
        0
    } else {
        ((cfg.count as f64 * cfg.rare_image_fraction).round() as usize).clamp(1, cfg.count)
    };
    let mut per_image = vec![0usize; cfg.count];
    for (k, i) in sample(&mut rng, cfg.count, carriers).into_iter().enumerate() {
        per_image[i] = quota / carriers + usize::from(k < quota % carriers);
    }
    per_image
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let mask = layout(cfg.size, q, &mut rng);
            let image = render(&mask, cfg.size, cfg.noise, &mut rng)?;
            SegmentationSample::new(format!("synth_{i:03}"), image, LabelMap::single(cfg.size, cfg.size, mask)?)
        })
        .collect()
}

/// Generates the set and writes it as a dataset tree under `root`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    let samples = generate(cfg)?;
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    std::fs::write(root.join("classes.txt"), CLASS_NAMES.join("\n") + "\n")?;
    for s in &samples {
        write_image(&root.join("images").join(format!("{}.png", s.id)), &s.image)?;
        write_mask(&root.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
    }
    Ok(samples)
}
