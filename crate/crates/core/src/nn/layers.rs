use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Forward, ParamId, ParamKind, ParamStore};
use crate::autograd::{batch_norm, Conv2dGeom, RunningStats, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// 2-D convolution with He-normal initialized weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: Conv2dGeom,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| T::lit(normal.sample(rng)))?;
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])?, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_channels, out_channels, kernel, geom })
    }

    /// 1x1, stride 1, with bias.
    pub fn pointwise<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, in_channels, out_channels, 1, Conv2dGeom::default(), true)
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(fwd.param(self.weight), self.bias.map(|b| fwd.param(b)), self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels])?, ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut stats = RunningStats { mean: fwd.buffer(self.running_mean), var: fwd.buffer(self.running_var) };
        let bn = fwd.batch_norm_settings();
        let y = batch_norm(
            x,
            fwd.param(self.gamma),
            fwd.param(self.beta),
            &mut stats,
            fwd.training(),
            bn.eps,
            bn.momentum,
        )?;
        if fwd.training() {
            fwd.stage_buffer(self.running_mean, stats.mean);
            fwd.stage_buffer(self.running_var, stats.var);
        }
        Ok(y)
    }
}

/// Convolution, batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: Conv2dGeom,
        relu: bool,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, geom, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
            relu,
        })
    }

    pub fn pointwise<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, in_channels, out_channels, 1, Conv2dGeom::default(), true)
    }

    pub fn forward<'t, T: Element>(&self, fwd: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.bn.forward(fwd, self.conv.forward(fwd, x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}
