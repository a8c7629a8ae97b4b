//! Integer class maps: ground-truth masks and argmax predictions.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Mask value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Class ids laid out `[N,H,W]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!("label map shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Single-image map of extent `h` x `w`.
    pub fn single(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        Self::new([1, h, w], data)
    }

    /// Stacks equally sized single maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Dimension("cannot stack zero label maps".into()))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(maps.len() * h * w);
        let mut n = 0;
        for m in maps {
            if m.shape[1..] != [h, w] {
                return Err(Error::Dimension(format!(
                    "label maps {:?} and {:?} differ in extent",
                    first.shape, m.shape
                )));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Self::new([n, h, w], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Fails with a data error if a value is neither a class id below
    /// `num_classes` nor [`IGNORE`].
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v != IGNORE && v as usize >= num_classes) {
            Some(i) => {
                Err(Error::Data(format!("label {} at flat index {i} is outside 0..{num_classes}", self.data[i])))
            }
            None => Ok(()),
        }
    }

    /// Number of pixels per class, ignoring [`IGNORE`] and out-of-range ids.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; num_classes];
        for &v in &self.data {
            if let Some(c) = h.get_mut(v as usize) {
                *c += 1;
            }
        }
        h
    }
}

/// Argmax over the class axis of `[N,n,H,W]` logits (first index wins ties).
pub fn argmax_classes<T: Element>(logits: &Tensor<T>) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 4 || s[1] > IGNORE as usize {
        return Err(Error::Dimension(format!("expected [N,n,H,W] logits with n < 255, got {s:?}")));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    LabelMap::new([n, s[2], s[3]], out)
}
