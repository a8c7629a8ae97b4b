use rand::Rng;

use crate::autograd::{Conv2dGeom, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsaSpec {
    pub channels: usize,
    pub reduction: usize,
}

impl PsaSpec {
    pub fn new(channels: usize) -> Self {
        Self { channels, reduction: 2 }
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.reduction == 0
            || !self.channels.is_multiple_of(self.reduction)
            || self.reduced() == 0
        {
            return Err(Error::Spec(format!(
                "PSA channels {} must be a positive multiple of reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Polarized self-attention with the channel-only and spatial-only
/// branches composed in parallel: `out = F * g_channel + F * g_spatial`.
#[derive(Clone, Debug)]
pub struct Psa {
    pub spec: PsaSpec,
    channel_value: Conv2d,
    channel_query: Conv2d,
    channel_up: Conv2d,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    spatial_query: Conv2d,
    spatial_value: Conv2d,
}

/// Intermediate results of one PSA evaluation.
pub struct PsaParts<'t, T: Element> {
    /// Per-channel gate, `[N, C, 1, 1]`.
    pub channel_gate: Var<'t, T>,
    /// Per-pixel gate, `[N, 1, H, W]`.
    pub spatial_gate: Var<'t, T>,
    /// Softmax over pixels used by the channel branch, `[N, 1, H*W]`.
    pub channel_attention: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl Psa {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: PsaSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let (c, r) = (spec.channels, spec.reduced());
        Ok(Self {
            spec,
            channel_value: Conv2d::pointwise(store, rng, &format!("{name}.channel_value"), c, r)?,
            // A bias here would be cancelled by the spatial softmax.
            channel_query: Conv2d::new(
                store,
                rng,
                &format!("{name}.channel_query"),
                c,
                1,
                1,
                Conv2dGeom::default(),
                false,
            )?,
            channel_up: Conv2d::pointwise(store, rng, &format!("{name}.channel_up"), r, c)?,
            norm_gamma: store.add(format!("{name}.channel_norm.gamma"), Tensor::ones(&[c])?, ParamKind::Trainable)?,
            norm_beta: store.add(format!("{name}.channel_norm.beta"), Tensor::zeros(&[c])?, ParamKind::Trainable)?,
            spatial_query: Conv2d::pointwise(store, rng, &format!("{name}.spatial_query"), c, r)?,
            spatial_value: Conv2d::pointwise(store, rng, &format!("{name}.spatial_value"), c, r)?,
        })
    }

    pub fn forward_parts<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<PsaParts<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.channels {
            return Err(Error::Dimension(format!("PSA expects [N, {}, H, W], got {shape:?}", self.spec.channels)));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let r = self.spec.reduced();

        // channel-only branch
        let value = self.channel_value.forward(fwd, x)?.reshape(&[n, r, h * w])?;
        let attention = self.channel_query.forward(fwd, x)?.reshape(&[n, 1, h * w])?.softmax(2)?;
        let pooled = value.matmul(attention.transpose(1, 2)?)?.reshape(&[n, r, 1, 1])?;
        let z = self.channel_up.forward(fwd, pooled)?;
        let mean = z.mean_axes(&[1], true)?;
        let centered = z.sub(mean)?;
        let var = centered.mul(centered)?.mean_axes(&[1], true)?;
        let normed = centered.div(var.add_scalar(LAYER_NORM_EPS).sqrt())?;
        let gamma = fwd.param(self.norm_gamma).reshape(&[1, c, 1, 1])?;
        let beta = fwd.param(self.norm_beta).reshape(&[1, c, 1, 1])?;
        let channel_gate = normed.mul(gamma)?.add(beta)?.sigmoid();

        // spatial-only branch
        let query = self.spatial_query.forward(fwd, x)?.adaptive_avg_pool2d(1, 1)?.reshape(&[n, 1, r])?.softmax(2)?;
        let value = self.spatial_value.forward(fwd, x)?.reshape(&[n, r, h * w])?;
        let spatial_gate = query.matmul(value)?.reshape(&[n, 1, h, w])?.sigmoid();

        let output = Self::combine(x, channel_gate, spatial_gate)?;
        Ok(PsaParts { channel_gate, spatial_gate, channel_attention: attention, output })
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_parts(fwd, x)?.output)
    }

    /// Parallel composition of the two gated copies of `x`.
    pub fn combine<'t, T: Element>(
        x: Var<'t, T>,
        channel_gate: Var<'t, T>,
        spatial_gate: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.mul(channel_gate)?.add(x.mul(spatial_gate)?)
    }
}
