//! Focal and dice losses, their deep-supervised combination and the
//! IoU-driven class weights.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// Dice smoothing added to numerator and denominator.
    pub dice_eps: f64,
    /// Use Σp² instead of Σp in the dice denominator.
    pub dice_squared: bool,
    /// Offset in w_k = 1/(IoU_k + alpha).
    pub alpha: f64,
    /// Number of supervised outputs the combined loss expects.
    pub deep_supervision_levels: usize,
    /// Refresh class weights from validation IoU; otherwise they stay uniform.
    pub adaptive_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            dice_eps: 1.0,
            dice_squared: false,
            alpha: 0.1,
            deep_supervision_levels: 3,
            adaptive_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.dice_eps > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "loss needs gamma >= 0, dice_eps > 0 and alpha > 0 (got {}, {}, {})",
                self.gamma, self.dice_eps, self.alpha
            )));
        }
        if self.deep_supervision_levels == 0 {
            return Err(Error::Config("deep_supervision_levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-class loss weights and the IoU vector they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeightState {
    pub weights: Vec<f64>,
    /// `None` until the first validation.
    pub source_iou: Option<Vec<f64>>,
    pub alpha: f64,
}

impl ClassWeightState {
    pub fn uniform(num_classes: usize, alpha: f64) -> Self {
        Self { weights: vec![1.0 / num_classes as f64; num_classes], source_iou: None, alpha }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// New state from validation IoU; `None` entries (classes absent from
    /// the split) keep their previous IoU, or the mean of the present
    /// classes before any history exists.
    pub fn refreshed(&self, iou: &[Option<f64>]) -> Result<Self> {
        if iou.len() != self.weights.len() {
            return Err(Error::Contract(format!("{} IoU values for {} classes", iou.len(), self.weights.len())));
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let fallback = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let filled: Vec<f64> = iou
            .iter()
            .enumerate()
            .map(|(k, v)| v.unwrap_or_else(|| self.source_iou.as_ref().map_or(fallback, |s| s[k])))
            .collect();
        update_class_weights(&filled, self.alpha)
    }
}

/// Scales positive raw weights to sum to one.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

/// w_k = (1/(iou_k+alpha)) / Σ_j 1/(iou_j+alpha).
pub fn update_class_weights(iou: &[f64], alpha: f64) -> Result<ClassWeightState> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("alpha must be > 0, got {alpha}")));
    }
    if iou.is_empty() || iou.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("IoU values must lie in [0, 1]: {iou:?}")));
    }
    let raw: Vec<f64> = iou.iter().map(|v| 1.0 / (v + alpha)).collect();
    Ok(ClassWeightState { weights: normalize_weights(&raw), source_iou: Some(iou.to_vec()), alpha })
}

/// Constant tensors derived from a target: one-hot labels (zero rows at
/// ignored pixels), validity mask, per-pixel weight of the true class.
struct TargetTensors<T: Element> {
    onehot: Tensor<T>,
    valid: Tensor<T>,
    pixel_weight: Tensor<T>,
    count: usize,
}

fn target_tensors<T: Element>(logits_shape: &[usize], target: &LabelMap, weights: &[f64]) -> Result<TargetTensors<T>> {
    let [n, h, w] = target.shape();
    if logits_shape.len() != 4 || logits_shape[0] != n || logits_shape[2] != h || logits_shape[3] != w {
        return Err(Error::Dimension(format!("logits {logits_shape:?} do not match target {:?}", target.shape())));
    }
    let k = logits_shape[1];
    if weights.len() != k {
        return Err(Error::Dimension(format!("{} class weights for {k} classes", weights.len())));
    }
    target.check_classes(k)?;
    let hw = h * w;
    let mut onehot = vec![T::zero(); n * k * hw];
    let mut valid = vec![T::zero(); n * hw];
    let mut pixel_weight = vec![T::zero(); n * hw];
    let mut count = 0;
    for b in 0..n {
        for p in 0..hw {
            let t = target.data()[b * hw + p];
            if t == IGNORE {
                continue;
            }
            count += 1;
            let t = t as usize;
            onehot[(b * k + t) * hw + p] = T::one();
            valid[b * hw + p] = T::one();
            pixel_weight[b * hw + p] = T::lit(weights[t]);
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMean("every target pixel is ignored".into()));
    }
    Ok(TargetTensors {
        onehot: Tensor::new(logits_shape, onehot)?,
        valid: Tensor::new(&[n, 1, h, w], valid)?,
        pixel_weight: Tensor::new(&[n, 1, h, w], pixel_weight)?,
        count,
    })
}

/// Mean over non-ignored pixels of w_t (1-p_t)^gamma (-log p_t).
pub fn focal_loss<'t, T: Element>(
    logits: Var<'t, T>,
    target: &LabelMap,
    weights: &[f64],
    gamma: f64,
) -> Result<Var<'t, T>> {
    let tt = target_tensors::<T>(&logits.shape(), target, weights)?;
    let tape = logits.tape();
    let log_pt = logits.log_softmax(1)?.mul(tape.constant(tt.onehot))?.sum_axes(&[1], true)?;
    let modulating = log_pt.exp().neg().add_scalar(1.0).powf(gamma);
    let per_pixel = modulating.mul(log_pt)?.mul(tape.constant(tt.pixel_weight))?;
    Ok(per_pixel.sum_all().mul_scalar(-1.0 / tt.count as f64))
}

/// 1 - Σ_k w_k (2 Σ p_k y_k + eps) / (Σ p_k + Σ y_k + eps) over
/// non-ignored pixels; `squared` uses Σ p_k² in the denominator.
pub fn dice_loss<'t, T: Element>(
    logits: Var<'t, T>,
    target: &LabelMap,
    weights: &[f64],
    eps: f64,
    squared: bool,
) -> Result<Var<'t, T>> {
    dice_loss_from_probs(logits.softmax(1)?, target, weights, eps, squared)
}

/// [`dice_loss`] on probabilities that are already normalized.
pub fn dice_loss_from_probs<'t, T: Element>(
    probs: Var<'t, T>,
    target: &LabelMap,
    weights: &[f64],
    eps: f64,
    squared: bool,
) -> Result<Var<'t, T>> {
    let shape = probs.shape();
    let tt = target_tensors::<T>(&shape, target, weights)?;
    let tape = probs.tape();
    let k = shape[1];
    let onehot = tape.constant(tt.onehot);
    let intersection = probs.mul(onehot)?.sum_axes(&[0, 2, 3], false)?;
    let p = probs.mul(tape.constant(tt.valid))?;
    let p = if squared { p.mul(p)? } else { p };
    let p_sum = p.sum_axes(&[0, 2, 3], false)?;
    let y_sum = onehot.sum_axes(&[0, 2, 3], false)?;
    let num = intersection.mul_scalar(2.0).add_scalar(eps);
    let den = p_sum.add(y_sum)?.add_scalar(eps);
    let w = tape.constant(Tensor::from_fn(&[k], |i| T::lit(weights[i]))?);
    Ok(num.div(den)?.mul(w)?.sum_all().neg().add_scalar(1.0))
}

/// (1/L) Σ_levels (focal + dice) with the state's class weights.
pub fn combined_loss<'t, T: Element>(
    outputs: &[Var<'t, T>],
    target: &LabelMap,
    state: &ClassWeightState,
    cfg: &LossConfig,
) -> Result<Var<'t, T>> {
    if outputs.len() != cfg.deep_supervision_levels {
        return Err(Error::Contract(format!(
            "combined loss expects {} outputs, got {}",
            cfg.deep_supervision_levels,
            outputs.len()
        )));
    }
    let mut total: Option<Var<'t, T>> = None;
    for &out in outputs {
        let level = focal_loss(out, target, &state.weights, cfg.gamma)?.add(dice_loss(
            out,
            target,
            &state.weights,
            cfg.dice_eps,
            cfg.dice_squared,
        )?)?;
        total = Some(match total {
            Some(t) => t.add(level)?,
            None => level,
        });
    }
    Ok(total.expect("at least one level").mul_scalar(1.0 / outputs.len() as f64))
}

#[cfg(test)]
mod tests;
