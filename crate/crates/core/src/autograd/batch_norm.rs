use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self { mean: Tensor::zeros(&[channels])?, var: Tensor::ones(&[channels])? })
    }
}

/// Batch normalization over axis 1 of an `[N, C, ...]` tensor.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// folds them into `stats` with the given momentum; eval mode uses `stats`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    stats: &mut RunningStats<T>,
    training: bool,
    eps: f64,
    momentum: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("batch_norm expects [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    for (name, t) in [("gamma", gamma.value()), ("beta", beta.value())] {
        if t.shape() != [c] {
            return Err(Error::Dimension(format!("batch_norm {name} shape {:?}, expected [{c}]", t.shape())));
        }
    }
    if stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return Err(Error::Dimension(format!("batch_norm running stats do not have {c} channels")));
    }
    if eps < 0.0 {
        return Err(Error::Contract(format!("batch_norm eps must be >= 0, got {eps}")));
    }
    let count = n * s;
    let data = xv.data();
    let at = move |ni: usize, ci: usize| (ni * c + ci) * s;

    let (mean, var): (Vec<T>, Vec<T>) = if training {
        if count < 2 {
            return Err(Error::DegenerateVariance(format!(
                "training batch_norm needs more than one value per channel, got input {shape:?}"
            )));
        }
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                acc += data[at(ni, ci)..at(ni, ci) + s].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
            }
            let mu = acc / count as f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                sq += data[at(ni, ci)..at(ni, ci) + s]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap_or(f64::NAN) - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ci] = T::lit(mu);
            var[ci] = T::lit(sq / count as f64);
        }
        let m = T::lit(momentum);
        let unbias = T::lit(count as f64 / (count - 1) as f64);
        let rm = stats.mean.data_mut();
        for ci in 0..c {
            rm[ci] = (T::one() - m) * rm[ci] + m * mean[ci];
        }
        let rv = stats.var.data_mut();
        for ci in 0..c {
            rv[ci] = (T::one() - m) * rv[ci] + m * var[ci] * unbias;
        }
        (mean, var)
    } else {
        (stats.mean.data().to_vec(), stats.var.data().to_vec())
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
    let (g, b) = (gamma.value(), beta.value());
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for ni in 0..n {
        for ci in 0..c {
            let range = at(ni, ci)..at(ni, ci) + s;
            for i in range {
                let h = (data[i] - mean[ci]) * inv_std[ci];
                xhat[i] = h;
                out[i] = h * g.data()[ci] + b.data()[ci];
            }
        }
    }
    let out = Tensor::from_parts(shape.clone(), out);
    Ok(x.tape().op(
        out,
        &[x, gamma, beta],
        Box::new(move |gy, needs| {
            let gd = gy.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    for i in at(ni, ci)..at(ni, ci) + s {
                        dbeta[ci] += gd[i];
                        dgamma[ci] += gd[i] * xhat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                let inv_count = T::lit(1.0 / count as f64);
                for ci in 0..c {
                    let scale = g.data()[ci] * inv_std[ci];
                    let (mg, mgx) = (dbeta[ci] * inv_count, dgamma[ci] * inv_count);
                    for ni in 0..n {
                        for i in at(ni, ci)..at(ni, ci) + s {
                            dx[i] = if training { scale * (gd[i] - mg - xhat[i] * mgx) } else { scale * gd[i] };
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }),
    ))
}
