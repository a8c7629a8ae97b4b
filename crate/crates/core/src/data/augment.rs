use rand::Rng;

use super::SegmentationSample;
use crate::autograd::kernels::bilinear_forward;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Output extent `(h, w)`; `None` keeps the scaled extent.
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Class whose training images are oversampled.
    pub rare_class: Option<usize>,
    pub rare_factor: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop: Some((256, 256)),
            flip_prob: 0.5,
            scale_min: 0.75,
            scale_max: 1.25,
            rare_class: None,
            rare_factor: 1,
        }
    }
}

impl AugmentPolicy {
    /// Leaves samples untouched.
    pub fn identity() -> Self {
        Self { crop: None, flip_prob: 0.0, scale_min: 1.0, scale_max: 1.0, rare_class: None, rare_factor: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config(format!(
                "scale range must satisfy 0 < min <= max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        if matches!(self.crop, Some((0, _)) | Some((_, 0))) {
            return Err(Error::Config("crop extents must be >= 1".into()));
        }
        if self.rare_factor == 0 {
            return Err(Error::Config("rare_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Resizes by `factor`: bilinear for the image, nearest neighbour (same
/// half-pixel convention) for the mask.
pub fn scale_sample(sample: &SegmentationSample, factor: f64) -> Result<SegmentationSample> {
    let (h, w) = sample.extent();
    let oh = ((h as f64 * factor).round() as usize).max(1);
    let ow = ((w as f64 * factor).round() as usize).max(1);
    if (oh, ow) == (h, w) {
        return Ok(sample.clone());
    }
    let image = Tensor::new(&[3, oh, ow], bilinear_forward(sample.image.data(), [1, 3, h, w], oh, ow))?;
    let nearest = |input: usize, output: usize| -> Vec<usize> {
        let s = input as f64 / output as f64;
        (0..output).map(|o| (((o as f64 + 0.5) * s) as usize).min(input - 1)).collect()
    };
    let (rows, cols) = (nearest(h, oh), nearest(w, ow));
    let src = sample.mask.data();
    let mut mask = Vec::with_capacity(oh * ow);
    for &r in &rows {
        mask.extend(cols.iter().map(|&c| src[r * w + c]));
    }
    SegmentationSample::new(sample.id.clone(), image, LabelMap::single(oh, ow, mask)?)
}

pub fn flip_horizontal(sample: &SegmentationSample) -> SegmentationSample {
    let (h, w) = sample.extent();
    let mut image = sample.image.clone();
    for row in image.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    let mut mask = sample.mask.clone();
    for row in mask.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(mask.data().len(), h * w);
    SegmentationSample { id: sample.id.clone(), image, mask }
}

/// Crops the window at `(top, left)` of extent `(ch, cw)`; positions outside
/// the sample are padded with image 0 and mask [`IGNORE`]. Offsets may be
/// negative.
fn crop(sample: &SegmentationSample, top: isize, left: isize, ch: usize, cw: usize) -> Result<SegmentationSample> {
    let (h, w) = sample.extent();
    let mut image = vec![0.0f32; 3 * ch * cw];
    let mut mask = vec![IGNORE; ch * cw];
    let src = sample.image.data();
    for y in 0..ch {
        let sy = y as isize + top;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..cw {
            let sx = x as isize + left;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            for c in 0..3 {
                image[(c * ch + y) * cw + x] = src[(c * h + sy) * w + sx];
            }
            mask[y * cw + x] = sample.mask.data()[sy * w + sx];
        }
    }
    SegmentationSample::new(sample.id.clone(), Tensor::new(&[3, ch, cw], image)?, LabelMap::single(ch, cw, mask)?)
}

fn offset<R: Rng + ?Sized>(rng: &mut R, have: usize, want: usize) -> isize {
    if have >= want {
        rng.random_range(0..=have - want) as isize
    } else {
        // the short side lands at a random position inside the padded window
        -(rng.random_range(0..=want - have) as isize)
    }
}

/// Random scale, horizontal flip and crop applied congruently to image
/// and mask.
pub fn augment<R: Rng + ?Sized>(
    sample: &SegmentationSample,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<SegmentationSample> {
    policy.validate()?;
    let factor = if policy.scale_max > policy.scale_min {
        rng.random_range(policy.scale_min..=policy.scale_max)
    } else {
        policy.scale_min
    };
    let mut out = scale_sample(sample, factor)?;
    if policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob {
        out = flip_horizontal(&out);
    }
    if let Some((ch, cw)) = policy.crop {
        let (h, w) = out.extent();
        if (h, w) != (ch, cw) {
            let top = offset(rng, h, ch);
            let left = offset(rng, w, cw);
            out = crop(&out, top, left, ch, cw)?;
        }
    }
    Ok(out)
}
