//! Oracles shared by the integration tests. They work on plain vectors and
//! recompute everything from first principles rather than calling the
//! library code they check.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use marsseg::data::SegmentationSample;
use marsseg::{LabelMap, Tensor, IGNORE};

/// IoU per class from explicit pixel-index sets: |P ∩ T| / |P ∪ T| after
/// dropping pixels whose target is ignored. `None` for an empty union.
pub fn set_iou(pred: &[u8], target: &[u8], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes as u8)
        .map(|k| {
            let p: HashSet<usize> = (0..pred.len()).filter(|&i| target[i] != IGNORE && pred[i] == k).collect();
            let t: HashSet<usize> = (0..target.len()).filter(|&i| target[i] == k).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect()
}

/// Mean over classes with a defined IoU, summed in class order.
pub fn set_miou(iou: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean softmax cross-entropy over non-ignored pixels of `[N,K,H,W]` logits.
pub fn cross_entropy(logits: &[f64], shape: [usize; 4], target: &[u8]) -> f64 {
    let [n, k, h, w] = shape;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for p in 0..h * w {
            let t = target[b * h * w + p];
            if t == IGNORE {
                continue;
            }
            let z: Vec<f64> = (0..k).map(|c| logits[(b * k + c) * h * w + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[t as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// Image whose channels encode source coordinates: channel 0 is
/// (y + 0.5) / h, channel 1 is (x + 0.5) / w, channel 2 is 1 everywhere
/// (0 marks padding after augmentation).
pub fn coordinate_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        match c {
            0 => ((p / w) as f32 + 0.5) / h as f32,
            1 => ((p % w) as f32 + 0.5) / w as f32,
            _ => 1.0,
        }
    })
    .unwrap()
}

/// Source indices a decoded coordinate may refer to: the rounded index,
/// or both neighbours when the value sits within `tol` of a half-way point.
fn candidates(coord: f64, extent: usize, tol: f64) -> Vec<usize> {
    let c = coord.clamp(0.0, (extent - 1) as f64);
    let frac = c - c.floor();
    let mut v =
        if (frac - 0.5).abs() < tol { vec![c.floor() as usize, c.ceil() as usize] } else { vec![c.round() as usize] };
    v.dedup();
    v
}

/// Checks that every output pixel of an augmented coordinate image carries
/// the label of the source pixel its image content came from, that padding
/// agrees between image and mask, and that no label appears that the
/// source did not have. Returns a description of the first violation.
pub fn check_congruence(source_mask: &LabelMap, out: &SegmentationSample) -> Result<(), String> {
    let [_, sh, sw] = source_mask.shape();
    let (oh, ow) = out.extent();
    let img = out.image.data();
    let src_labels: BTreeSet<u8> = source_mask.data().iter().copied().collect();
    let plane = oh * ow;
    for p in 0..plane {
        let (y, x) = (p / ow, p % ow);
        let label = out.mask.data()[p];
        let marker = img[2 * plane + p];
        if label == IGNORE {
            if marker != 0.0 {
                return Err(format!("pixel ({y},{x}) masked as padding but image marker is {marker}"));
            }
            continue;
        }
        if !src_labels.contains(&label) {
            return Err(format!("pixel ({y},{x}) has label {label} absent from the source"));
        }
        if (marker - 1.0).abs() > 1e-5 {
            return Err(format!("pixel ({y},{x}) carries label {label} but image marker is {marker}"));
        }
        let sy = img[p] as f64 * sh as f64 - 0.5;
        let sx = img[plane + p] as f64 * sw as f64 - 0.5;
        let ok = candidates(sy, sh, 1e-3)
            .iter()
            .any(|&ry| candidates(sx, sw, 1e-3).iter().any(|&rx| source_mask.data()[ry * sw + rx] == label));
        if !ok {
            return Err(format!("pixel ({y},{x}) label {label} but image content comes from source ({sy:.3},{sx:.3})"));
        }
    }
    Ok(())
}

pub fn class_names(n: usize) -> Vec<String> {
    marsseg::data::synth::CLASS_NAMES.iter().take(n).map(|s| s.to_string()).collect()
}
